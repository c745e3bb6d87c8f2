#include "ct/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

namespace ct::intervene {

NLOHMANN_JSON_SERIALIZE_ENUM(EditMode, {{EditMode::zero, "zero"},
                                        {EditMode::set, "set"},
                                        {EditMode::add, "add"},
                                        {EditMode::scale, "scale"}})

void to_json(nlohmann::json& j, const Edit& e) {
  j = {{"layer", e.feature.layer}, {"index", e.feature.index}, {"positions", e.positions}, {"mode", e.mode},
       {"value", e.value}};
  if (!e.values.empty()) j["values"] = e.values;
}

void from_json(const nlohmann::json& j, Edit& e) {
  e = Edit{};
  e.feature = {j.at("layer").get<int>(), j.at("index").get<int>()};
  e.positions = j.value("positions", std::vector<int>{});
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "zero" && mode != "set" && mode != "add" && mode != "scale")
    throw ValidationError(fmt::format("edit mode '{}' is not one of zero, set, add, scale", mode));
  e.mode = j.at("mode").get<EditMode>();
  e.value = j.value("value", e.mode == EditMode::scale ? 1.0 : 0.0);
  e.values = j.value("values", std::vector<double>{});
}

void to_json(nlohmann::json& j, const InterventionSpec& s) {
  j = {{"edits", s.edits}, {"target_token", s.target_token}, {"top_k", s.top_k}};
}

void from_json(const nlohmann::json& j, InterventionSpec& s) {
  s = InterventionSpec{};
  s.edits = j.value("edits", std::vector<Edit>{});
  s.target_token = j.value("target_token", -1);
  s.top_k = j.value("top_k", 5);
}

namespace {

std::string describe(const Edit& e) {
  const char* names[] = {"zero", "set", "add", "scale"};
  std::string pos = e.positions.empty() ? "all" : fmt::format("{}", fmt::join(e.positions, " "));
  return fmt::format("{} feat {}:{} at {} value {}", names[int(e.mode)], e.feature.layer, e.feature.index, pos,
                     e.value);
}

void validate_edits(const clt::CltConfig& c, const std::vector<Edit>& edits, int n) {
  for (const auto& e : edits) {
    if (e.feature.layer < 0 || e.feature.layer >= c.n_layers || e.feature.index < 0 ||
        e.feature.index >= c.d_features)
      throw ValidationError(fmt::format("edit references feature {}:{} outside the transcoder ({} layers x {})",
                                        e.feature.layer, e.feature.index, c.n_layers, c.d_features));
    for (int p : e.positions)
      if (p < 0 || p >= n) throw ValidationError(fmt::format("edit position {} outside prompt of {} tokens", p, n));
    if (!std::isfinite(e.value)) throw ValidationError("edit coefficient is not finite");
    if (!e.values.empty()) {
      if (e.values.size() != e.positions.size())
        throw ValidationError("per-position edit values must align with explicit positions");
      for (double v : e.values)
        if (!std::isfinite(v)) throw ValidationError("edit value is not finite");
    }
  }
}

void check_pair(const lm::Params<double>& params, const clt::CltParams<double>& clt) {
  if (clt.config.n_layers != params.config.n_layers || clt.config.d_model != params.config.d_model)
    throw ValidationError(fmt::format("transcoder ({} layers, width {}) does not match the model ({} layers, width {})",
                                      clt.config.n_layers, clt.config.d_model, params.config.n_layers,
                                      params.config.d_model));
}

double apply(EditMode mode, double z, double v) {
  switch (mode) {
    case EditMode::zero: return 0.0;
    case EditMode::set: return v;
    case EditMode::add: return z + v;
    case EditMode::scale: return z * v;
  }
  return z;
}

struct Replacement {
  std::vector<std::vector<double>> error;  // per layer [n, d_model]
};

Replacement unedited_errors(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                            std::span<const int> tokens) {
  const auto rec = lm::forward<double>(params, tokens);
  const int L = params.config.n_layers;
  std::vector<std::vector<double>> z(L);
  for (int l = 0; l < L; ++l) z[l] = clt::clt_encode<double>(clt, l, rec.blocks[l].mlp_in, rec.n);
  Replacement r;
  for (int l = 0; l < L; ++l) {
    auto mh = clt::clt_decode<double>(clt, z, l, rec.n);
    for (std::size_t i = 0; i < mh.size(); ++i) mh[i] = rec.blocks[l].mlp_out[i] - mh[i];
    r.error.push_back(std::move(mh));
  }
  return r;
}

std::vector<double> run_replacement(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                    std::span<const int> tokens, const Replacement& rep,
                                    const std::vector<Edit>& edits) {
  const int L = params.config.n_layers, F = clt.config.d_features;
  const int n = int(tokens.size());
  std::vector<std::vector<double>> z(L);
  lm::MlpHook<double> hook = [&](int layer, std::span<const double> h, std::span<double> out) {
    z[layer] = clt::clt_encode<double>(clt, layer, h, n);
    for (const auto& e : edits) {
      if (e.feature.layer != layer) continue;
      auto at = [&](int p) -> double& { return z[layer][std::size_t(p) * F + e.feature.index]; };
      if (e.positions.empty()) {
        for (int p = 0; p < n; ++p) at(p) = apply(e.mode, at(p), e.value);
      } else {
        for (std::size_t i = 0; i < e.positions.size(); ++i)
          at(e.positions[i]) = apply(e.mode, at(e.positions[i]), e.values.empty() ? e.value : e.values[i]);
      }
    }
    const auto mh = clt::clt_decode<double>(clt, z, layer, n);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mh[i] + rep.error[layer][i];
  };
  return lm::forward<double>(params, tokens, hook).logits;
}

std::vector<TokenLogit> top_tokens(std::span<const double> last, int k) {
  std::vector<int> order(last.size());
  std::iota(order.begin(), order.end(), 0);
  k = std::min<int>(k, int(order.size()));
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) { return last[a] != last[b] ? last[a] > last[b] : a < b; });
  std::vector<TokenLogit> out;
  for (int i = 0; i < k; ++i) out.push_back({order[i], last[order[i]]});
  return out;
}

}  // namespace

int token_rank(std::span<const double> logits, int token) {
  if (token < 0 || token >= int(logits.size())) throw ValidationError(fmt::format("token {} outside vocabulary", token));
  int better = 0;
  for (int t = 0; t < int(logits.size()); ++t)
    if (logits[t] > logits[token] || (logits[t] == logits[token] && t < token)) ++better;
  return better + 1;
}

std::vector<double> replacement_logits(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                       std::span<const int> tokens, const std::vector<Edit>& edits) {
  check_pair(params, clt);
  validate_edits(clt.config, edits, int(tokens.size()));
  return run_replacement(params, clt, tokens, unedited_errors(params, clt, tokens), edits);
}

std::vector<std::vector<double>> capture_features(const lm::Params<double>& params,
                                                  const clt::CltParams<double>& clt, std::span<const int> tokens) {
  check_pair(params, clt);
  const auto rec = lm::forward<double>(params, tokens);
  std::vector<std::vector<double>> z;
  for (int l = 0; l < params.config.n_layers; ++l)
    z.push_back(clt::clt_encode<double>(clt, l, rec.blocks[l].mlp_in, rec.n));
  return z;
}

InterventionResult run_with_interventions(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                          std::span<const int> tokens, const InterventionSpec& spec) {
  check_pair(params, clt);
  const int n = int(tokens.size()), V = params.config.vocab_size;
  validate_edits(clt.config, spec.edits, n);
  if (spec.top_k < 1) throw ValidationError("top_k must be at least 1");
  if (spec.target_token >= V) throw ValidationError(fmt::format("target token {} outside vocabulary", spec.target_token));
  const auto rep = unedited_errors(params, clt, tokens);
  InterventionResult r;
  r.baseline_logits = run_replacement(params, clt, tokens, rep, {});
  r.edited_logits = spec.edits.empty() ? r.baseline_logits : run_replacement(params, clt, tokens, rep, spec.edits);
  std::span<const double> base(r.baseline_logits.data() + std::size_t(n - 1) * V, V);
  std::span<const double> edit(r.edited_logits.data() + std::size_t(n - 1) * V, V);
  r.baseline_top = top_tokens(base, spec.top_k);
  r.edited_top = top_tokens(edit, spec.top_k);
  r.target_token = spec.target_token;
  if (spec.target_token >= 0) {
    r.baseline_rank = token_rank(base, spec.target_token);
    r.edited_rank = token_rank(edit, spec.target_token);
  }
  for (const auto& e : spec.edits) r.edits.push_back(describe(e));
  return r;
}

nlohmann::json result_json(const InterventionResult& r) {
  auto tops = [](const std::vector<TokenLogit>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& t : v) a.push_back({{"token", t.token}, {"logit", t.logit}});
    return a;
  };
  nlohmann::json j = {{"baseline", {{"top", tops(r.baseline_top)}}},
                      {"edited", {{"top", tops(r.edited_top)}}},
                      {"edits", r.edits}};
  if (r.target_token >= 0) {
    j["target_token"] = r.target_token;
    j["baseline"]["target_rank"] = r.baseline_rank;
    j["edited"]["target_rank"] = r.edited_rank;
    j["rank_delta"] = r.baseline_rank - r.edited_rank;
  } else {
    j["target_token"] = nullptr;
  }
  return j;
}

std::vector<Edit> swap_edits(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                             std::span<const int> prompt, int src_language, int tgt_language,
                             std::span<const int> translated_prompt,
                             const std::vector<analysis::LanguageFeature>& features, const SwapOptions& opt) {
  check_pair(params, clt);
  const int L = clt.config.n_layers, F = clt.config.d_features;
  const int first_late = opt.first_late_layer >= 0 ? opt.first_late_layer : L - std::max(1, L / 4);
  if (first_late >= L) throw ValidationError(fmt::format("first late layer {} beyond {} layers", first_late, L));
  std::vector<FeatureKey> src, tgt;
  for (const auto& f : features) {
    if (f.feature.layer < first_late) continue;
    if (f.top_language == src_language) src.push_back(f.feature);
    if (f.top_language == tgt_language) tgt.push_back(f.feature);
  }
  if (src.empty() && opt.zero_source)
    throw ValidationError(fmt::format("no language features found for language {} in layers >= {}", src_language, first_late));
  if (tgt.empty())
    throw ValidationError(fmt::format("no language features found for language {} in layers >= {}", tgt_language, first_late));

  std::vector<Edit> edits;
  if (opt.zero_source)
    for (const auto& k : src) edits.push_back({k, {}, EditMode::zero, 0.0, {}});
  const int n = int(prompt.size()), nt = int(translated_prompt.size());
  const auto zt = capture_features(params, clt, translated_prompt);
  for (const auto& k : tgt) {
    Edit e{k, {}, EditMode::add, 0.0, {}};
    for (int p = 0; p < n; ++p) {
      const int q = p + (nt - n) + opt.offset;
      if (q < 0 || q >= nt) continue;
      e.positions.push_back(p);
      e.values.push_back(opt.add_coefficient * zt[k.layer][std::size_t(q) * F + k.index]);
    }
    if (!e.positions.empty()) edits.push_back(std::move(e));
  }
  return edits;
}

InterventionResult language_swap(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                 std::span<const int> prompt, int src_language, int tgt_language,
                                 std::span<const int> translated_prompt, int target_token,
                                 const std::vector<analysis::LanguageFeature>& features, const SwapOptions& opt) {
  InterventionSpec spec;
  spec.edits = swap_edits(params, clt, prompt, src_language, tgt_language, translated_prompt, features, opt);
  spec.target_token = target_token;
  spec.top_k = opt.top_k;
  return run_with_interventions(params, clt, prompt, spec);
}

std::vector<double> default_up_range() {
  std::vector<double> r;
  for (int c = 1; c <= 30; ++c) r.push_back(c);
  return r;
}

std::vector<double> default_down_range() {
  std::vector<double> r;
  for (int c = -30; c <= -1; ++c) r.push_back(c);
  return r;
}

SweepResult coefficient_sweep(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                              std::span<const int> tokens, int target_token, const analysis::Cluster& up,
                              const analysis::Cluster& down, const std::vector<double>& up_range,
                              const std::vector<double>& down_range) {
  check_pair(params, clt);
  if (up_range.empty() || down_range.empty()) throw ValidationError("sweep ranges must not be empty");
  const int n = int(tokens.size()), V = params.config.vocab_size;
  if (target_token < 0 || target_token >= V) throw ValidationError(fmt::format("target token {} outside vocabulary", target_token));
  if (!up.members.empty()) up.validate(clt.config);
  if (!down.members.empty()) down.validate(clt.config);
  const auto rep = unedited_errors(params, clt, tokens);
  SweepResult r;
  r.up_range = up_range;
  r.down_range = down_range;
  const int U = int(up_range.size()), Dn = int(down_range.size());
  r.cells.resize(std::size_t(U) * Dn);
  auto edits_for = [&](const analysis::Cluster& c, double coef) {
    std::vector<Edit> out;
    for (const auto& m : c.members) out.push_back({m, c.positions, EditMode::scale, coef, {}});
    return out;
  };
  validate_edits(clt.config, edits_for(up, 1.0), n);
  validate_edits(clt.config, edits_for(down, 1.0), n);
#pragma omp parallel for schedule(dynamic)
  for (int cell = 0; cell < U * Dn; ++cell) {
    const double cu = up_range[cell / Dn], cd = down_range[cell % Dn];
    auto edits = edits_for(up, cu);
    auto more = edits_for(down, cd);
    edits.insert(edits.end(), more.begin(), more.end());
    const auto logits = run_replacement(params, clt, tokens, rep, edits);
    std::span<const double> last(logits.data() + std::size_t(n - 1) * V, V);
    r.cells[cell] = {cu, cd, token_rank(last, target_token), top_tokens(last, 1)[0].token};
  }
  for (int cell = 1; cell < U * Dn; ++cell)
    if (r.cells[cell].target_rank < r.cells[r.argmax].target_rank) r.argmax = cell;
  return r;
}

std::string sweep_csv(const SweepResult& r) {
  std::string out = "c_up,c_down,target_rank,top_token\n";
  for (const auto& c : r.cells) out += fmt::format("{},{},{},{}\n", c.c_up, c.c_down, c.target_rank, c.top_token);
  return out;
}

}  // namespace ct::intervene
