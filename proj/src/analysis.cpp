#include "ct/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace ct::analysis {

namespace {

void check_feature(const clt::CltConfig& c, FeatureKey f) {
  if (f.layer < 0 || f.layer >= c.n_layers || f.index < 0 || f.index >= c.d_features)
    throw ValidationError(fmt::format("feature ({}, {}) outside transcoder of {} layers x {} features", f.layer,
                                      f.index, c.n_layers, c.d_features));
}

void check_store(const act::ActivationStore& store, const clt::CltConfig& c) {
  if (store.n_layers != c.n_layers || store.d_model != c.d_model)
    throw ValidationError(fmt::format("store ({} layers, width {}) does not match transcoder ({} layers, width {})",
                                      store.n_layers, store.d_model, c.n_layers, c.d_model));
}

}  // namespace

FeatureActivity feature_activity(const act::ActivationStore& store, const clt::CltParams<float>& clt,
                                 FeatureKey feature) {
  check_feature(clt.config, feature);
  check_store(store, clt.config);
  const int D = store.d_model;
  const float* w = clt.enc_w(feature.layer) + std::size_t(feature.index) * D;
  const float b = clt.enc_b(feature.layer)[feature.index];
  FeatureActivity out;
  out.token_activation.resize(store.n_tokens());
  out.sequence_active.assign(store.n_sequences(), 0);
  const auto& h = store.h[feature.layer];
  for (long t = 0; t < store.n_tokens(); ++t) {
    float pre = b;
    for (int d = 0; d < D; ++d) pre += w[d] * h[std::size_t(t) * D + d];
    const float z = clt::activate(clt, feature.layer, feature.index, pre);
    out.token_activation[t] = z;
    if (z > 0) out.sequence_active[t / store.seq_len] = 1;
  }
  return out;
}

LayerActivity layer_activity(const act::ActivationStore& store, const clt::CltParams<float>& clt, int layer) {
  check_store(store, clt.config);
  if (layer < 0 || layer >= clt.config.n_layers) throw ValidationError(fmt::format("layer {} out of range", layer));
  const int F = clt.config.d_features, D = store.d_model, T = store.seq_len, S = store.n_sequences();
  const int NL = int(store.languages.size());
  LayerActivity a;
  a.layer = layer;
  a.n_features = F;
  a.n_sequences = S;
  a.n_languages = NL;
  a.sequence_max.assign(std::size_t(F) * S, 0.f);
  a.labels = store.labels;
  std::vector<std::uint16_t> tok_count(std::size_t(S) * F, 0);
#pragma omp parallel for schedule(static)
  for (int s = 0; s < S; ++s) {
    std::span<const float> h(store.h[layer].data() + std::size_t(s) * T * D, std::size_t(T) * D);
    const auto z = clt::clt_encode<float>(clt, layer, h, T);
    for (int i = 0; i < T; ++i)
      for (int f = 0; f < F; ++f) {
        const float v = z[std::size_t(i) * F + f];
        if (v > 0) {
          tok_count[std::size_t(s) * F + f]++;
          float& mx = a.sequence_max[std::size_t(f) * S + s];
          mx = std::max(mx, v);
        }
      }
  }
  a.sequences_active.assign(std::size_t(F) * NL, 0);
  a.tokens_active.assign(std::size_t(F) * NL, 0);
  a.tokens_per_language.assign(NL, 0);
  a.sequences_per_language.assign(NL, 0);
  for (int s = 0; s < S; ++s) {
    const int lang = store.labels[s];
    a.sequences_per_language[lang]++;
    a.tokens_per_language[lang] += T;
    for (int f = 0; f < F; ++f) {
      const int c = tok_count[std::size_t(s) * F + f];
      if (c == 0) continue;
      a.sequences_active[std::size_t(f) * NL + lang]++;
      a.tokens_active[std::size_t(f) * NL + lang] += c;
    }
  }
  return a;
}

std::optional<std::vector<double>> language_distribution(std::span<const long> counts) {
  long total = 0;
  for (long c : counts) {
    if (c < 0) throw ValidationError("negative activity count");
    total += c;
  }
  if (total == 0) return std::nullopt;
  std::vector<double> p(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) p[i] = double(counts[i]) / double(total);
  return p;
}

double multilingual_score(std::span<const double> p) {
  double sum = 0;
  for (double x : p) {
    if (!(x >= 0)) throw ValidationError("distribution has a negative or non-finite entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError(fmt::format("distribution sums to {}, not 1", sum));
  double h = 0;
  for (double x : p)
    if (x > 0) h -= x * std::log(x);
  // Clamp rounding so the bounds hold exactly.
  return std::clamp(h, 0.0, std::log(double(p.size())));
}

const char* variant_name(Variant v) { return v == Variant::general ? "general" : "top100"; }

Variant parse_variant(const std::string& s) {
  if (s == "general") return Variant::general;
  if (s == "top100") return Variant::top100;
  throw ValidationError(fmt::format("unknown variant '{}' (expected general or top100)", s));
}

std::vector<MultilingualProfile> feature_profiles(const LayerActivity& a, Variant variant, int top_k) {
  if (top_k < 1) throw ConfigError("top_k must be positive");
  const int F = a.n_features, S = a.n_sequences, NL = a.n_languages;
  long total_tokens = 0;
  for (long t : a.tokens_per_language) total_tokens += t;
  std::vector<MultilingualProfile> out(F);
  for (int f = 0; f < F; ++f) {
    auto& p = out[f];
    p.feature = {a.layer, f};
    p.variant = variant;
    const float* mx = a.sequence_max.data() + std::size_t(f) * S;
    std::vector<int> active;
    for (int s = 0; s < S; ++s)
      if (mx[s] > 0) active.push_back(s);
    const int k = std::min<int>(top_k, int(active.size()));
    std::partial_sort(active.begin(), active.begin() + k, active.end(),
                      [&](int x, int y) { return mx[x] != mx[y] ? mx[x] > mx[y] : x < y; });
    for (int i = 0; i < k; ++i) p.top_sequences.emplace_back(active[i], mx[active[i]]);
    long tok = 0, seq = 0;
    for (int l = 0; l < NL; ++l) {
      tok += a.tokens_active[std::size_t(f) * NL + l];
      seq += a.sequences_active[std::size_t(f) * NL + l];
    }
    p.activation_rate = total_tokens > 0 ? double(tok) / double(total_tokens) : 0.0;
    p.sequence_rate = S > 0 ? double(seq) / S : 0.0;
    if (variant == Variant::general) {
      p.counts.assign(a.sequences_active.begin() + std::size_t(f) * NL,
                      a.sequences_active.begin() + std::size_t(f + 1) * NL);
    } else {
      p.counts.assign(NL, 0);
      for (const auto& ts : p.top_sequences) p.counts[a.labels[ts.first]]++;
    }
    p.distribution = language_distribution(p.counts);
    p.entropy = p.distribution ? multilingual_score(*p.distribution) : 0.0;
  }
  return out;
}

LayerProfile layer_profile(const std::vector<MultilingualProfile>& profiles, int layer, Variant variant) {
  LayerProfile r;
  r.layer = layer;
  r.variant = variant;
  double w = 0, u = 0;
  for (const auto& p : profiles) {
    if (p.feature.layer != layer) continue;
    if (p.inactive()) {
      r.inactive_features++;
      continue;
    }
    r.live_features++;
    u += p.entropy;
    w += p.entropy * p.activation_rate;
  }
  if (r.live_features > 0) {
    r.weighted = w / r.live_features;
    r.unweighted = u / r.live_features;
  }
  return r;
}

std::vector<LayerProfile> layerwise_entropy_profile(const act::ActivationStore& store,
                                                    const clt::CltParams<float>& clt, Variant variant) {
  std::vector<LayerProfile> out;
  for (int l = 0; l < clt.config.n_layers; ++l) {
    const auto a = layer_activity(store, clt, l);
    out.push_back(layer_profile(feature_profiles(a, variant), l, variant));
    if (out.back().live_features == 0) warn(fmt::format("layer {} has no live features", l));
  }
  return out;
}

double token_activation_frequency(const act::ActivationStore& store, const clt::CltParams<float>& clt,
                                  FeatureKey feature, int language) {
  if (language < 0 || language >= int(store.languages.size()))
    throw ValidationError(fmt::format("language {} out of range", language));
  const auto act = feature_activity(store, clt, feature);
  long tokens = 0, active = 0;
  for (int s = 0; s < store.n_sequences(); ++s) {
    if (store.labels[s] != language) continue;
    for (int i = 0; i < store.seq_len; ++i) {
      ++tokens;
      active += act.token_activation[std::size_t(s) * store.seq_len + i] > 0;
    }
  }
  return tokens > 0 ? double(active) / double(tokens) : 0.0;
}

std::vector<LanguageFeature> identify_language_features(const std::vector<LayerActivity>& activity,
                                                        double freq_threshold) {
  std::vector<LanguageFeature> out;
  for (const auto& a : activity) {
    const int NL = a.n_languages;
    long total_tokens = 0;
    for (long t : a.tokens_per_language) total_tokens += t;
    for (int f = 0; f < a.n_features; ++f) {
      long tok = 0;
      for (int l = 0; l < NL; ++l) tok += a.tokens_active[std::size_t(f) * NL + l];
      const double freq = total_tokens > 0 ? double(tok) / double(total_tokens) : 0.0;
      if (tok == 0 || freq < freq_threshold) continue;
      LanguageFeature lf;
      lf.feature = {a.layer, f};
      lf.frequency = freq;
      auto p = language_distribution(
          std::span<const long>(a.sequences_active.data() + std::size_t(f) * NL, std::size_t(NL)));
      const auto best = std::max_element(p->begin(), p->end());
      lf.top_language = int(best - p->begin());
      lf.top_probability = *best;
      for (int l = 0; l < NL; ++l)
        lf.language_frequency.push_back(a.tokens_per_language[l] > 0
                                            ? double(a.tokens_active[std::size_t(f) * NL + l]) / a.tokens_per_language[l]
                                            : 0.0);
      out.push_back(std::move(lf));
    }
  }
  return out;
}

std::vector<LanguageFeature> identify_language_features(const act::ActivationStore& store,
                                                        const clt::CltParams<float>& clt, double freq_threshold) {
  std::vector<LayerActivity> a;
  for (int l = 0; l < clt.config.n_layers; ++l) a.push_back(layer_activity(store, clt, l));
  return identify_language_features(a, freq_threshold);
}

Alignment feature_token_alignment(const clt::CltParams<double>& clt, const lm::Params<double>& params,
                                  FeatureKey feature, int native_token, int reference_token, int target_layer) {
  check_feature(clt.config, feature);
  const int D = params.config.d_model, V = params.config.vocab_size;
  if (clt.config.d_model != D) throw ValidationError("transcoder width does not match the model");
  if (target_layer < 0) target_layer = clt.config.n_layers - 1;
  if (target_layer < feature.layer || target_layer >= clt.config.n_layers)
    throw ValidationError(fmt::format("feature at layer {} does not decode into layer {}", feature.layer, target_layer));
  for (int t : {native_token, reference_token})
    if (t < 0 || t >= V) throw ValidationError(fmt::format("token {} outside vocabulary of {}", t, V));
  const double* d = clt.dec_w(feature.layer, target_layer) + std::size_t(feature.index) * D;
  double norm = 0;
  for (int i = 0; i < D; ++i) norm += d[i] * d[i];
  norm = std::sqrt(norm);
  if (norm == 0) throw NumericalError(fmt::format("feature ({}, {}) has a zero decoder", feature.layer, feature.index));
  Alignment a;
  a.similarity.resize(V);
  const double* wu = params.at(params.layout.w_u);
  for (int t = 0; t < V; ++t) {
    double s = 0;
    for (int i = 0; i < D; ++i) s += d[i] * wu[std::size_t(t) * D + i];
    a.similarity[t] = s / norm;
  }
  auto describe = [&](int token) {
    TokenAlignment r;
    r.token = token;
    r.similarity = a.similarity[token];
    int better = 0;
    for (int t = 0; t < V; ++t)
      if (a.similarity[t] > r.similarity || (a.similarity[t] == r.similarity && t < token)) ++better;
    r.rank = better + 1;
    r.normalized = V > 1 ? 1.0 - double(r.rank - 1) / double(V - 1) : 1.0;
    return r;
  };
  a.native = describe(native_token);
  a.reference = describe(reference_token);
  return a;
}

void Cluster::validate(const clt::CltConfig& c) const {
  if (members.empty()) throw ValidationError(fmt::format("cluster '{}' has no members", name));
  for (const auto& m : members) check_feature(c, m);
  for (int p : positions)
    if (p < 0) throw ValidationError(fmt::format("cluster '{}' has a negative position", name));
}

void to_json(nlohmann::json& j, const Cluster& c) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : c.members) members.push_back({m.layer, m.index});
  j = {{"name", c.name}, {"members", members}, {"positions", c.positions}};
}

void from_json(const nlohmann::json& j, Cluster& c) {
  c.name = j.value("name", std::string("cluster"));
  c.members.clear();
  for (const auto& m : j.at("members")) {
    if (m.is_array()) c.members.push_back({m.at(0).get<int>(), m.at(1).get<int>()});
    else c.members.push_back({m.at("layer").get<int>(), m.at("index").get<int>()});
  }
  c.positions = j.value("positions", std::vector<int>{});
}

namespace {

std::vector<int> scoped(const Cluster& c, int n) {
  if (c.positions.empty()) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<int> out;
  for (int p : c.positions)
    if (p < n) out.push_back(p);
  return out;
}

}  // namespace

double cluster_activation_strength(const lm::ActivationRecord<double>& rec, const clt::CltParams<double>& clt,
                                   const Cluster& cluster) {
  cluster.validate(clt.config);
  const int D = clt.config.d_model;
  double s = 0;
  for (int p : scoped(cluster, rec.n))
    for (const auto& m : cluster.members) {
      double pre = clt.enc_b(m.layer)[m.index];
      const double* w = clt.enc_w(m.layer) + std::size_t(m.index) * D;
      for (int d = 0; d < D; ++d) pre += w[d] * rec.blocks[m.layer].mlp_in[std::size_t(p) * D + d];
      s += clt::activate(clt, m.layer, m.index, pre);
    }
  return s;
}

std::vector<double> cluster_input_direction(const clt::CltParams<double>& clt, const Cluster& cluster) {
  cluster.validate(clt.config);
  const int D = clt.config.d_model;
  std::vector<double> dir(D, 0.0);
  for (const auto& m : cluster.members) {
    const double* w = clt.enc_w(m.layer) + std::size_t(m.index) * D;
    for (int d = 0; d < D; ++d) dir[d] += w[d];
  }
  for (auto& x : dir) x /= double(cluster.members.size());
  return dir;
}

double embedding_edge_strength(const lm::ActivationRecord<double>& rec, const clt::CltParams<double>& clt,
                               const Cluster& cluster) {
  const auto dir = cluster_input_direction(clt, cluster);
  const int D = int(dir.size());
  double s = 0;
  for (int p : scoped(cluster, rec.n))
    for (int d = 0; d < D; ++d) s += rec.embed[std::size_t(p) * D + d] * dir[d];
  return s;
}

std::set<FeatureKey> active_features(const std::vector<LayerActivity>& activity, int language) {
  std::set<FeatureKey> out;
  for (const auto& a : activity) {
    if (language < 0 || language >= a.n_languages) throw ValidationError(fmt::format("language {} out of range", language));
    for (int f = 0; f < a.n_features; ++f)
      if (a.sequences_active[std::size_t(f) * a.n_languages + language] > 0) out.insert({a.layer, f});
  }
  return out;
}

std::optional<double> feature_overlap(const std::set<FeatureKey>& a, const std::set<FeatureKey>& b) {
  if (a.empty()) return std::nullopt;
  long both = 0;
  for (const auto& k : a) both += b.count(k);
  return double(both) / double(a.size());
}

nlohmann::json profile_json(const MultilingualProfile& p, const std::vector<std::string>& languages) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [s, v] : p.top_sequences) top.push_back({{"sequence", s}, {"max_activation", v}});
  nlohmann::json j = {{"layer", p.feature.layer},
                      {"index", p.feature.index},
                      {"variant", variant_name(p.variant)},
                      {"languages", languages},
                      {"counts", p.counts},
                      {"inactive", p.inactive()},
                      {"activation_rate", p.activation_rate},
                      {"sequence_rate", p.sequence_rate},
                      {"top_sequences", top}};
  if (p.distribution) {
    j["distribution"] = *p.distribution;
    j["entropy"] = p.entropy;
  } else {
    j["distribution"] = nullptr;
    j["entropy"] = nullptr;
  }
  return j;
}

std::string profiles_jsonl(const std::vector<MultilingualProfile>& profiles, const std::vector<std::string>& languages) {
  std::string out;
  for (const auto& p : profiles) {
    out += profile_json(p, languages).dump();
    out += '\n';
  }
  return out;
}

std::string layer_profile_csv(const std::vector<LayerProfile>& rows) {
  std::string out = "layer,variant,weighted,unweighted,live_features\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{:.9g},{:.9g},{}\n", r.layer, variant_name(r.variant), r.weighted, r.unweighted,
                       r.live_features);
  return out;
}

}  // namespace ct::analysis
