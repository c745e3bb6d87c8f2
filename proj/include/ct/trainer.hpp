#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/corpus.hpp"
#include "ct/tinylm.hpp"
#include "ct/tokenizer.hpp"

namespace ct::lm {

struct TrainPlan {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  int warmup_steps = 2000;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of lr
  int batch_size = 64;        // sequences per step
  long total_tokens = 0;      // 0: 20 x parameter count
  int eval_interval = 100;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;

  void validate() const;
  long resolved_total_tokens(const ModelConfig& c) const {
    return total_tokens > 0 ? total_tokens : 20L * c.parameter_count();
  }
};

void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

// Linear warmup to `lr` at step == warmup_steps, then cosine decay to
// min_lr_ratio * lr at total_steps.
double learning_rate(const TrainPlan& plan, long step, long total_steps);

template <typename T>
struct AdamState {
  std::vector<T> m, v;
  explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

// One AdamW update. Gradients are clipped to global norm plan.grad_clip first;
// weight decay is decoupled and applies to rank-2 tensors. Returns the
// pre-clip gradient norm. Throws NumericalError naming the first non-finite
// gradient tensor.
template <typename T>
double adamw_step(Params<T>& params, Params<T>& grads, AdamState<T>& state, const TrainPlan& plan,
                  long step, double lr);

struct LossPoint {
  long step = 0;
  long tokens_seen = 0;
  double lr = 0;
  double train_loss = 0;
  std::vector<double> val_loss;  // per language; empty between evals
};

struct TrainResult {
  Params<float> params;
  std::vector<LossPoint> history;
  std::vector<std::string> checkpoints;
};

struct TrainCallbacks {
  std::string checkpoint_dir;  // empty: no checkpoints written
  std::function<void(const LossPoint&)> on_eval;
};

// Token stream is a list of BOS-prefixed, EOS-terminated encoded sequences.
TrainResult train_lm(const ModelConfig& config, const TrainPlan& plan,
                     const std::vector<corpus::LabeledSequence>& train,
                     const std::vector<corpus::LabeledSequence>& validation, int n_languages,
                     const Specials& specials, const TrainCallbacks& callbacks = {});

// Per-language validation loss of a model.
std::vector<double> validation_loss(const Params<float>& params,
                                    const std::vector<corpus::LabeledSequence>& validation,
                                    int n_languages, const Specials& specials);

// BOS + tokens + EOS, truncated to context_len + 1 tokens.
std::vector<int> training_row(const corpus::LabeledSequence& s, int bos, int eos, int context_len);

std::string history_csv(const std::vector<LossPoint>& history, const std::vector<std::string>& languages);

}  // namespace ct::lm
