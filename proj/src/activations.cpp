#include "ct/activations.hpp"

#include <algorithm>
#include <filesystem>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ct/container.hpp"

namespace ct::act {

std::vector<int> ActivationStore::per_language_counts() const {
  std::vector<int> n(languages.size(), 0);
  for (int l : labels) n[l]++;
  return n;
}

std::string ActivationStore::digest() const {
  Digest d;
  d.update(model_digest);
  for (const auto& name : languages) d.update(name);
  d.update(&seq_len, sizeof seq_len);
  d.update_span(std::span<const int>(tokens));
  d.update_span(std::span<const int>(labels));
  for (const auto& v : h) d.update_span(std::span<const float>(v));
  for (const auto& v : m) d.update_span(std::span<const float>(v));
  return d.hex();
}

ActivationStore build_activation_store(const lm::Params<float>& params,
                                       const std::vector<corpus::LabeledSequence>& corpus,
                                       const std::vector<std::string>& languages, int bos,
                                       const StoreSpec& spec) {
  const int L = int(languages.size());
  if (L < 1) throw ConfigError("activation store needs at least one language");
  if (spec.seq_len < 2 || spec.seq_len > params.config.context_len)
    throw ConfigError(fmt::format("seq_len {} outside [2, {}]", spec.seq_len, params.config.context_len));
  if (spec.n_sequences < L)
    throw ConfigError(fmt::format("n_sequences {} below language count {}", spec.n_sequences, L));

  std::vector<std::vector<int>> pool(L);
  for (int i = 0; i < int(corpus.size()); ++i) {
    const auto& s = corpus[i];
    if (s.language < 0 || s.language >= L)
      throw ValidationError(fmt::format("corpus sequence {} has unknown language {}", i, s.language));
    if (int(s.tokens.size()) >= spec.seq_len - 1) pool[s.language].push_back(i);
  }
  const auto quota = corpus::mixture_counts(std::vector<double>(L, 1.0 / L), spec.n_sequences);
  std::string shortfall;
  for (int l = 0; l < L; ++l)
    if (int(pool[l].size()) < quota[l])
      shortfall += fmt::format("{}{}: need {}, have {}", shortfall.empty() ? "" : "; ", languages[l],
                               quota[l], pool[l].size());
  if (!shortfall.empty())
    throw ValidationError("corpus too small for activation store (" + shortfall + ")");

  Rng rng(spec.seed * 0x2545F4914F6CDD1DULL + 11);
  std::vector<int> chosen;
  for (int l = 0; l < L; ++l) {
    rng.shuffle(pool[l]);
    chosen.insert(chosen.end(), pool[l].begin(), pool[l].begin() + quota[l]);
  }
  rng.shuffle(chosen);

  const auto& cfg = params.config;
  const int N = int(chosen.size()), T = spec.seq_len, D = cfg.d_model;
  ActivationStore st;
  st.seq_len = T;
  st.n_layers = cfg.n_layers;
  st.d_model = D;
  st.model_digest = lm::model_digest(params);
  st.languages = languages;
  st.tokens.resize(std::size_t(N) * T);
  st.labels.resize(N);
  st.h.assign(cfg.n_layers, std::vector<float>(std::size_t(N) * T * D));
  st.m = st.h;

  for (int s = 0; s < N; ++s) {
    const auto& seq = corpus[chosen[s]];
    st.labels[s] = seq.language;
    st.tokens[std::size_t(s) * T] = bos;
    std::copy_n(seq.tokens.begin(), T - 1, st.tokens.begin() + std::size_t(s) * T + 1);
  }

  bool bad = false;
#pragma omp parallel for schedule(dynamic, 8) reduction(|| : bad)
  for (int s = 0; s < N; ++s) {
    auto rec = lm::forward<float>(params, st.sequence(s));
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::copy(rec.blocks[l].mlp_in.begin(), rec.blocks[l].mlp_in.end(),
                st.h[l].begin() + std::size_t(s) * T * D);
      std::copy(rec.blocks[l].mlp_out.begin(), rec.blocks[l].mlp_out.end(),
                st.m[l].begin() + std::size_t(s) * T * D);
      for (float x : rec.blocks[l].mlp_out)
        if (!std::isfinite(x)) bad = true;
    }
  }
  if (bad) throw NumericalError("non-finite MLP output while capturing activations");
  return st;
}

void save_store(const ActivationStore& store, const std::string& dir, int shard_sequences) {
  if (shard_sequences < 1) throw ConfigError("shard_sequences must be positive");
  std::filesystem::create_directories(dir);
  const int N = store.n_sequences(), T = store.seq_len, D = store.d_model;
  nlohmann::json shards = nlohmann::json::array();
  for (int first = 0, k = 0; first < N; first += shard_sequences, ++k) {
    const int last = std::min(N, first + shard_sequences), n = last - first;
    Container c;
    c.kind = "activation_shard";
    c.meta = {{"first_sequence", first}, {"n_sequences", n}};
    NamedTensor tok{"tokens", {n, T}, {}}, lab{"labels", {n}, {}};
    for (int s = first; s < last; ++s) {
      lab.data.push_back(float(store.labels[s]));
      for (int t = 0; t < T; ++t) tok.data.push_back(float(store.tokens[std::size_t(s) * T + t]));
    }
    c.tensors.push_back(std::move(tok));
    c.tensors.push_back(std::move(lab));
    for (int l = 0; l < store.n_layers; ++l)
      for (const auto* which : {&store.h, &store.m}) {
        const auto& src = (*which)[l];
        NamedTensor t{fmt::format("{}.{}", which == &store.h ? "h" : "m", l), {n, T, D}, {}};
        t.data.assign(src.begin() + std::size_t(first) * T * D, src.begin() + std::size_t(last) * T * D);
        c.tensors.push_back(std::move(t));
      }
    const std::string name = fmt::format("shard_{:04d}.ctns", k);
    c.save((std::filesystem::path(dir) / name).string());
    shards.push_back({{"file", name}, {"first_sequence", first}, {"n_sequences", n}});
  }
  nlohmann::json manifest = {{"model_digest", store.model_digest},
                             {"seq_len", T},
                             {"n_layers", store.n_layers},
                             {"d_model", D},
                             {"languages", store.languages},
                             {"per_language_counts", store.per_language_counts()},
                             {"n_sequences", N},
                             {"store_digest", store.digest()},
                             {"shards", shards}};
  write_file((std::filesystem::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

ActivationStore load_store(const std::string& dir) {
  const auto mpath = (std::filesystem::path(dir) / "manifest.json").string();
  if (!std::filesystem::exists(mpath)) throw IoError(fmt::format("no activation manifest at '{}'", mpath));
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", mpath, e.what()));
  }
  ActivationStore st;
  st.model_digest = man.at("model_digest").get<std::string>();
  st.seq_len = man.at("seq_len").get<int>();
  st.n_layers = man.at("n_layers").get<int>();
  st.d_model = man.at("d_model").get<int>();
  st.languages = man.at("languages").get<std::vector<std::string>>();
  const int N = man.at("n_sequences").get<int>(), T = st.seq_len, D = st.d_model;
  st.tokens.resize(std::size_t(N) * T);
  st.labels.resize(N);
  st.h.assign(st.n_layers, std::vector<float>(std::size_t(N) * T * D));
  st.m = st.h;
  for (const auto& sh : man.at("shards")) {
    const auto c = Container::load((std::filesystem::path(dir) / sh.at("file").get<std::string>()).string());
    const int first = sh.at("first_sequence").get<int>(), n = sh.at("n_sequences").get<int>();
    if (first < 0 || first + n > N) throw ValidationError(fmt::format("{}: shard range out of bounds", dir));
    const auto& tok = c.get("tokens").data;
    const auto& lab = c.get("labels").data;
    if (int(lab.size()) != n || tok.size() != std::size_t(n) * T)
      throw ValidationError(fmt::format("{}: shard shape disagrees with manifest", dir));
    for (int s = 0; s < n; ++s) st.labels[first + s] = int(lab[s]);
    for (std::size_t i = 0; i < tok.size(); ++i) st.tokens[std::size_t(first) * T + i] = int(tok[i]);
    for (int l = 0; l < st.n_layers; ++l) {
      const auto& hh = c.get(fmt::format("h.{}", l)).data;
      const auto& mm = c.get(fmt::format("m.{}", l)).data;
      if (hh.size() != std::size_t(n) * T * D || mm.size() != hh.size())
        throw ValidationError(fmt::format("{}: activation shard shape disagrees with manifest", dir));
      std::copy(hh.begin(), hh.end(), st.h[l].begin() + std::size_t(first) * T * D);
      std::copy(mm.begin(), mm.end(), st.m[l].begin() + std::size_t(first) * T * D);
    }
  }
  if (man.contains("store_digest") && man["store_digest"].get<std::string>() != st.digest())
    throw ValidationError(fmt::format("{}: store digest mismatch", dir));
  return st;
}

PairBatch gather_pairs(const ActivationStore& store, std::span<const long> token_ids) {
  const int D = store.d_model;
  PairBatch b;
  b.n = int(token_ids.size());
  b.h.assign(store.n_layers, std::vector<float>(std::size_t(b.n) * D));
  b.m = b.h;
  for (int l = 0; l < store.n_layers; ++l)
    for (int i = 0; i < b.n; ++i) {
      const std::size_t src = std::size_t(token_ids[i]) * D, dst = std::size_t(i) * D;
      std::copy_n(store.h[l].begin() + src, D, b.h[l].begin() + dst);
      std::copy_n(store.m[l].begin() + src, D, b.m[l].begin() + dst);
    }
  return b;
}

std::vector<std::vector<long>> token_batches(std::span<const long> token_ids, int batch_tokens,
                                             std::uint64_t seed, int epoch) {
  if (batch_tokens < 1) throw ConfigError("batch_tokens must be positive");
  if (std::size_t(batch_tokens) > token_ids.size())
    warn(fmt::format("batch of {} tokens exceeds the {} available; one short batch per epoch",
                     batch_tokens, token_ids.size()));
  std::vector<long> order(token_ids.begin(), token_ids.end());
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + std::uint64_t(epoch) * 0xD1B54A32D192ED03ULL + 1);
  rng.shuffle(order);
  std::vector<std::vector<long>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_tokens)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_tokens));
  return out;
}

std::vector<long> token_range(const ActivationStore& store, int first_sequence, int last_sequence) {
  std::vector<long> ids;
  for (long t = long(first_sequence) * store.seq_len; t < long(last_sequence) * store.seq_len; ++t)
    ids.push_back(t);
  return ids;
}

}  // namespace ct::act
