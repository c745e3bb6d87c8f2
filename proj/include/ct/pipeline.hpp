#pragma once

// End-to-end workflow over an artifact directory:
// corpus -> tokenizer -> LM -> activation store -> CLT -> metrics, scores,
// language features, attribution graphs and the language-swap suite.
//
// Every stage records a key (digest of its config section and upstream keys)
// and the digests of its outputs in <artifact_dir>/manifest.json. A stage
// whose key and outputs still match is skipped.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ct/activations.hpp"
#include "ct/analysis.hpp"
#include "ct/attribution.hpp"
#include "ct/clt.hpp"
#include "ct/corpus.hpp"
#include "ct/intervene.hpp"
#include "ct/tinylm.hpp"
#include "ct/tokenizer.hpp"
#include "ct/trainer.hpp"

namespace ct::pipeline {

struct CaptureConfig {
  int corpus_sequences = 6000;  // balanced sample drawn for capture
  int n_sequences = 5000;
  int seq_len = 16;
};

struct AttributeConfig {
  std::vector<std::string> prompts;  // empty: one generated prompt per language
  int top_logits = 5;
  double node_keep = 0.80;
  double edge_keep = 0.95;
};

struct SwapConfig {
  int n_prompts = 20;
  int first_late_layer = -1;  // -1: top quartile
  double add_coefficient = 1.0;
};

struct MixtureConfig {
  std::vector<double> dominant_shares{0.9, 0.7, 0.5, 0.2};
  int dominant_language = 0;
  long lm_tokens = 0;  // 0: same as the main run
  int clt_steps = 0;   // 0: same as the main run
};

struct RunConfig {
  std::string artifact_dir = "artifacts";
  std::uint64_t seed = 0;
  corpus::CorpusSpec corpus;
  int validation_sequences = 1000;
  lm::ModelConfig model;
  lm::TrainPlan train;
  CaptureConfig capture;
  clt::CltConfig clt;
  double freq_threshold = 0.05;
  int top_k = 100;
  AttributeConfig attribute;
  SwapConfig swap;
  MixtureConfig mixture;

  // Derives module seeds from the global seed and copies the model shape
  // into the transcoder config.
  RunConfig resolved() const;
  void validate() const;
  std::string digest() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_config(const std::string& path);

// Applies `path=value` overrides (dotted path, JSON value or bare string).
void apply_override(nlohmann::json& j, const std::string& assignment);

// Digest of a file, or of every file below a directory (sorted by path).
std::string path_digest(const std::string& path);

class Registry {
 public:
  explicit Registry(std::string dir);

  const std::string& dir() const { return dir_; }
  std::string path(const std::string& rel) const;
  bool fresh(const std::string& stage, const std::string& key) const;
  // Outputs are paths relative to the registry directory.
  void record(const std::string& stage, const std::string& key, const std::string& config_digest,
              const nlohmann::json& section, const std::vector<std::string>& outputs);
  std::optional<std::string> key(const std::string& stage) const;
  const nlohmann::json& manifest() const { return manifest_; }

 private:
  void save() const;
  std::string dir_;
  nlohmann::json manifest_;
};

nlohmann::json language_features_json(const std::vector<analysis::LanguageFeature>& features,
                                      const std::vector<std::string>& languages);
std::vector<analysis::LanguageFeature> language_features_from_json(const nlohmann::json& j);

// BOS + encoded text; ValidationError when empty or beyond `context_len`.
std::vector<int> encode_prompt(const Tokenizer& tok, const std::string& text, int context_len);

// Language distribution and entropy (general variant) of every feature node.
std::map<clt::FeatureKey, attr::NodeAnnotation> feature_annotations(
    const std::vector<analysis::LayerActivity>& activity, const attr::AttributionGraph& g);

struct ParallelPrompt {
  int src_language = 0, tgt_language = 0;
  std::string src_text, tgt_text;
  std::vector<int> prompt, translated;  // BOS-prefixed
  int target_token = 0;                 // next token of the translated prompt
};

// Same meaning rendered in two languages, cut before the same word. Pairs
// cycle over the non-fragmenting languages.
std::vector<ParallelPrompt> parallel_prompts(const corpus::World& world, const Tokenizer& tok, int count,
                                             int context_len, std::uint64_t seed);

struct SwapOutcome {
  ParallelPrompt prompt;
  int baseline_rank = 0, edited_rank = 0;
  bool noop_exact = false;
};

std::string swap_csv(const std::vector<SwapOutcome>& rows);

class Pipeline {
 public:
  explicit Pipeline(RunConfig config, std::function<void(const std::string&)> log = {});

  const RunConfig& config() const { return cfg_; }
  Registry& registry() { return reg_; }

  // Each returns true when the stage ran, false when its outputs were fresh.
  bool gen_corpus();
  bool train_tokenizer();
  bool train_lm();
  bool capture();
  bool train_clt();
  bool metrics();
  bool score();
  bool language_features();
  bool attribute();
  bool swap_suite();
  void run_all();

  std::vector<corpus::LabeledSequence> corpus_split(const std::string& split) const;
  Tokenizer tokenizer() const;
  lm::Params<float> model() const;
  act::ActivationStore store() const;
  clt::CltParams<float> transcoder() const;
  std::vector<analysis::LanguageFeature> load_language_features() const;
  // Per-layer activity over the store, computed once per Pipeline.
  const std::vector<analysis::LayerActivity>& activity() const;

  // BOS + encoded text; ValidationError beyond the model context.
  std::vector<int> encode_prompt(const std::string& text) const;
  std::vector<std::string> token_text(std::span<const int> tokens) const;
  std::vector<std::string> attribution_prompts() const;

  attr::AttributionGraph build_graph(const std::string& prompt, int top_logits, double node_keep,
                                     double edge_keep) const;
  std::map<clt::FeatureKey, attr::NodeAnnotation> annotations(const attr::AttributionGraph& g) const;

 private:
  std::string key_for(const std::string& stage, const nlohmann::json& section,
                      const std::vector<std::string>& upstream) const;
  void log(const std::string& s) const;

  RunConfig cfg_;
  Registry reg_;
  std::function<void(const std::string&)> log_;
  mutable std::optional<std::vector<analysis::LayerActivity>> activity_;
};

struct MixtureRun {
  double dominant_share = 0;
  std::vector<double> mixture;
  std::string dir;
  std::string model_digest;
  std::vector<double> val_loss;  // per language
  std::vector<analysis::LayerProfile> profile;
};

// Trains one model per dominant share (plus its CLT for the entropy
// profiles) under <artifact_dir>/mixture/<percent>/ and writes
// mixture_report.csv to the artifact directory.
std::vector<MixtureRun> mixture_matrix(const RunConfig& config,
                                       std::function<void(const std::string&)> log = {});

// Mixture vector with `share` on the dominant language and the rest split evenly.
std::vector<double> dominant_mixture(int n_languages, int dominant, double share);

}  // namespace ct::pipeline
