#pragma once

// Feature interventions on a replacement forward: every MLP output is
// replaced by the transcoder reconstruction from (possibly edited) feature
// activations plus the error term of the unedited pass at that site. Attention
// and LayerNorm downstream of an edit are recomputed normally.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/analysis.hpp"
#include "ct/clt.hpp"
#include "ct/tinylm.hpp"

namespace ct::intervene {

using clt::FeatureKey;

enum class EditMode { zero, set, add, scale };

struct Edit {
  FeatureKey feature;
  std::vector<int> positions;  // empty: every position
  EditMode mode = EditMode::zero;
  double value = 0;            // set/add value or scale coefficient
  std::vector<double> values;  // optional per-position values, aligned with `positions`
};

struct InterventionSpec {
  std::vector<Edit> edits;
  int target_token = -1;  // -1: none
  int top_k = 5;
};

void to_json(nlohmann::json& j, const Edit& e);
void from_json(const nlohmann::json& j, Edit& e);
void to_json(nlohmann::json& j, const InterventionSpec& s);
void from_json(const nlohmann::json& j, InterventionSpec& s);

struct TokenLogit {
  int token = 0;
  double logit = 0;
};

struct InterventionResult {
  std::vector<TokenLogit> baseline_top, edited_top;  // at the last position
  int target_token = -1;
  int baseline_rank = 0, edited_rank = 0;  // 1 = top; 0 when no target
  std::vector<double> baseline_logits, edited_logits;  // [n, vocab]
  std::vector<std::string> edits;  // one line per applied edit
};

nlohmann::json result_json(const InterventionResult& r);

// Rank of `token` in `logits` (1 = largest; ties go to the lower id).
int token_rank(std::span<const double> logits, int token);

// Logits of the replacement forward with `edits` applied.
std::vector<double> replacement_logits(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                       std::span<const int> tokens, const std::vector<Edit>& edits = {});

// Feature activations z[l] ([n, d_features]) of the unedited pass.
std::vector<std::vector<double>> capture_features(const lm::Params<double>& params,
                                                  const clt::CltParams<double>& clt, std::span<const int> tokens);

InterventionResult run_with_interventions(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                          std::span<const int> tokens, const InterventionSpec& spec);

struct SwapOptions {
  int first_late_layer = -1;  // -1: top quartile of layers
  double add_coefficient = 1.0;
  bool zero_source = true;
  int offset = 0;  // extra shift when aligning positions from the end
  int top_k = 5;
};

// Zeroes late-layer features of `src_language` and adds the late-layer
// features of `tgt_language` with the activations they take on the translated
// prompt. Positions are aligned from the end of both prompts.
InterventionResult language_swap(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                 std::span<const int> prompt, int src_language, int tgt_language,
                                 std::span<const int> translated_prompt, int target_token,
                                 const std::vector<analysis::LanguageFeature>& features,
                                 const SwapOptions& opt = {});

// Edits built by language_swap, exposed for inspection and for the service.
std::vector<Edit> swap_edits(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                             std::span<const int> prompt, int src_language, int tgt_language,
                             std::span<const int> translated_prompt,
                             const std::vector<analysis::LanguageFeature>& features, const SwapOptions& opt = {});

struct SweepCell {
  double c_up = 0, c_down = 0;
  int target_rank = 0;
  int top_token = 0;
};

struct SweepResult {
  std::vector<double> up_range, down_range;
  std::vector<SweepCell> cells;  // row-major over (up, down)
  int argmax = 0;                // best target rank, first in row-major order on ties
};

std::vector<double> default_up_range();    // 1..30
std::vector<double> default_down_range();  // -30..-1

// scale(c_up) on every member of `up` and scale(c_down) on every member of
// `down`, over the full grid. An empty cluster contributes no edits; an empty
// range is an error.
SweepResult coefficient_sweep(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                              std::span<const int> tokens, int target_token, const analysis::Cluster& up,
                              const analysis::Cluster& down, const std::vector<double>& up_range,
                              const std::vector<double>& down_range);

// c_up,c_down,target_rank,top_token
std::string sweep_csv(const SweepResult& r);

}  // namespace ct::intervene
