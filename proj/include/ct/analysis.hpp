#pragma once

// Multilingual feature statistics over an activation store: per-language
// activity counts, entropy scores, layer profiles, language features,
// decoder/unembedding alignment and cluster diagnostics.
//
// A feature is active on a token when its post-activation is positive; a
// sequence is active when any of its tokens is.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/activations.hpp"
#include "ct/clt.hpp"
#include "ct/tinylm.hpp"

namespace ct::analysis {

using clt::FeatureKey;

struct FeatureActivity {
  std::vector<char> sequence_active;     // [n_sequences]
  std::vector<float> token_activation;   // [n_tokens]
};

// Re-encodes the stored h of one layer for a single feature.
FeatureActivity feature_activity(const act::ActivationStore& store, const clt::CltParams<float>& clt,
                                 FeatureKey feature);

// Per-layer aggregates for every feature at once.
struct LayerActivity {
  int layer = 0, n_features = 0, n_sequences = 0, n_languages = 0;
  std::vector<long> sequences_active;    // [F, languages]
  std::vector<long> tokens_active;       // [F, languages]
  std::vector<long> tokens_per_language;
  std::vector<long> sequences_per_language;
  std::vector<float> sequence_max;       // [F, n_sequences], 0 when inactive
  std::vector<int> labels;               // language per sequence
};

LayerActivity layer_activity(const act::ActivationStore& store, const clt::CltParams<float>& clt, int layer);

// p_l = A_l / sum A; empty when every count is zero (undefined).
std::optional<std::vector<double>> language_distribution(std::span<const long> counts);

// -sum p ln p in nats, 0 ln 0 = 0. Throws ValidationError unless p is a
// distribution (non-negative, summing to 1 within 1e-9).
double multilingual_score(std::span<const double> p);

enum class Variant { general, top100 };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct MultilingualProfile {
  FeatureKey feature;
  Variant variant = Variant::general;
  std::vector<long> counts;                  // A_l
  std::optional<std::vector<double>> distribution;
  double entropy = 0;                        // 0 when undefined
  double activation_rate = 0;                // share of all tokens
  double sequence_rate = 0;                  // share of all sequences
  std::vector<std::pair<int, float>> top_sequences;  // (sequence, max activation)

  bool inactive() const { return !distribution; }
};

// Profiles for every feature of the layer. `top100` counts A_l over each
// feature's `top_k` highest sequences (ties by ascending id); top_sequences
// always lists those.
std::vector<MultilingualProfile> feature_profiles(const LayerActivity& activity, Variant variant, int top_k = 100);

struct LayerProfile {
  int layer = 0;
  Variant variant = Variant::general;
  double weighted = 0;    // mean of H * activation_rate
  double unweighted = 0;  // mean of H
  int live_features = 0;
  int inactive_features = 0;
};

// Never-active features are excluded and counted; a layer with no live
// features reports zeros and live_features = 0.
LayerProfile layer_profile(const std::vector<MultilingualProfile>& profiles, int layer, Variant variant);

std::vector<LayerProfile> layerwise_entropy_profile(const act::ActivationStore& store,
                                                    const clt::CltParams<float>& clt, Variant variant);

double token_activation_frequency(const act::ActivationStore& store, const clt::CltParams<float>& clt,
                                  FeatureKey feature, int language);

struct LanguageFeature {
  FeatureKey feature;
  double frequency = 0;  // token activation frequency over the whole store
  int top_language = 0;
  double top_probability = 0;
  std::vector<double> language_frequency;  // per-language token frequency
};

// Features with overall token frequency >= threshold, in (layer, index) order.
std::vector<LanguageFeature> identify_language_features(const std::vector<LayerActivity>& activity,
                                                        double freq_threshold = 0.05);
std::vector<LanguageFeature> identify_language_features(const act::ActivationStore& store,
                                                        const clt::CltParams<float>& clt,
                                                        double freq_threshold = 0.05);

struct TokenAlignment {
  int token = 0;
  double similarity = 0;
  int rank = 0;            // 1 = most similar
  double normalized = 0;   // 1 - (rank - 1) / (V - 1)
};

struct Alignment {
  std::vector<double> similarity;  // per vocab token
  TokenAlignment native, reference;
};

// Similarity of the unit decoder direction into `target_layer`
// (default: last layer) with every unembedding row. Ranks break ties by token id.
Alignment feature_token_alignment(const clt::CltParams<double>& clt, const lm::Params<double>& params,
                                  FeatureKey feature, int native_token, int reference_token,
                                  int target_layer = -1);

struct Cluster {
  std::string name;
  std::vector<FeatureKey> members;
  std::vector<int> positions;  // empty: every position

  void validate(const clt::CltConfig& c) const;
};

void to_json(nlohmann::json& j, const Cluster& c);
void from_json(const nlohmann::json& j, Cluster& c);

// Sum of member activations at the scoped positions of a recorded pass.
double cluster_activation_strength(const lm::ActivationRecord<double>& rec, const clt::CltParams<double>& clt,
                                   const Cluster& cluster);

// Mean of member encoder rows.
std::vector<double> cluster_input_direction(const clt::CltParams<double>& clt, const Cluster& cluster);

// Sum over scoped positions of <embedding output, cluster input direction>.
double embedding_edge_strength(const lm::ActivationRecord<double>& rec, const clt::CltParams<double>& clt,
                               const Cluster& cluster);

// Features active in at least one sequence of `language`.
std::set<FeatureKey> active_features(const std::vector<LayerActivity>& activity, int language);

// |A and B| / |A|; empty when A is empty.
std::optional<double> feature_overlap(const std::set<FeatureKey>& a, const std::set<FeatureKey>& b);

// One JSON object per line.
std::string profiles_jsonl(const std::vector<MultilingualProfile>& profiles,
                           const std::vector<std::string>& languages);
nlohmann::json profile_json(const MultilingualProfile& p, const std::vector<std::string>& languages);
// layer,variant,weighted,unweighted,live_features
std::string layer_profile_csv(const std::vector<LayerProfile>& rows);

}  // namespace ct::analysis
