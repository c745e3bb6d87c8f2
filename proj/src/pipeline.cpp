#include "ct/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace ct::pipeline {

using nlohmann::json;

// ---- config ----

void to_json(json& j, const RunConfig& c) {
  j = json{{"artifact_dir", c.artifact_dir},
           {"seed", c.seed},
           {"corpus", c.corpus},
           {"validation_sequences", c.validation_sequences},
           {"model", c.model},
           {"train", c.train},
           {"capture",
            {{"corpus_sequences", c.capture.corpus_sequences},
             {"n_sequences", c.capture.n_sequences},
             {"seq_len", c.capture.seq_len}}},
           {"clt", c.clt},
           {"freq_threshold", c.freq_threshold},
           {"top_k", c.top_k},
           {"attribute",
            {{"prompts", c.attribute.prompts},
             {"top_logits", c.attribute.top_logits},
             {"node_keep", c.attribute.node_keep},
             {"edge_keep", c.attribute.edge_keep}}},
           {"swap",
            {{"n_prompts", c.swap.n_prompts},
             {"first_late_layer", c.swap.first_late_layer},
             {"add_coefficient", c.swap.add_coefficient}}},
           {"mixture",
            {{"dominant_shares", c.mixture.dominant_shares},
             {"dominant_language", c.mixture.dominant_language},
             {"lm_tokens", c.mixture.lm_tokens},
             {"clt_steps", c.mixture.clt_steps}}}};
}

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", where.empty() ? "config" : where));
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
      throw ConfigError(fmt::format("unknown config field '{}{}'", where.empty() ? "" : where + ".", k));
  }
}

// Module sections accept exactly the fields their defaults serialize.
void check_section(const json& j, const std::string& where, const json& defaults,
                   std::initializer_list<const char*> extra = {}) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", where));
  for (const auto& [k, v] : j.items()) {
    if (defaults.contains(k)) continue;
    if (std::any_of(extra.begin(), extra.end(), [&](const char* a) { return k == a; })) continue;
    throw ConfigError(fmt::format("unknown config field '{}.{}'", where, k));
  }
}

}  // namespace

void from_json(const json& j, RunConfig& c) {
  check_keys(j, "",
             {"artifact_dir", "seed", "corpus", "validation_sequences", "model", "train", "capture", "clt",
              "freq_threshold", "top_k", "attribute", "swap", "mixture"});
  try {
    RunConfig d;
    c.artifact_dir = j.value("artifact_dir", d.artifact_dir);
    c.seed = j.value("seed", d.seed);
    if (j.contains("corpus")) check_section(j["corpus"], "corpus", json(d.corpus), {"fragmenting_language"});
    if (j.contains("model")) check_section(j["model"], "model", json(d.model));
    if (j.contains("train")) check_section(j["train"], "train", json(d.train));
    if (j.contains("clt")) check_section(j["clt"], "clt", json(d.clt));
    if (j.contains("corpus")) c.corpus = j["corpus"].get<corpus::CorpusSpec>();
    c.validation_sequences = j.value("validation_sequences", d.validation_sequences);
    if (j.contains("model")) c.model = j["model"].get<lm::ModelConfig>();
    if (j.contains("train")) c.train = j["train"].get<lm::TrainPlan>();
    if (j.contains("capture")) {
      const auto& s = j["capture"];
      check_keys(s, "capture", {"corpus_sequences", "n_sequences", "seq_len"});
      c.capture.corpus_sequences = s.value("corpus_sequences", d.capture.corpus_sequences);
      c.capture.n_sequences = s.value("n_sequences", d.capture.n_sequences);
      c.capture.seq_len = s.value("seq_len", d.capture.seq_len);
    }
    if (j.contains("clt")) c.clt = j["clt"].get<clt::CltConfig>();
    c.freq_threshold = j.value("freq_threshold", d.freq_threshold);
    c.top_k = j.value("top_k", d.top_k);
    if (j.contains("attribute")) {
      const auto& s = j["attribute"];
      check_keys(s, "attribute", {"prompts", "top_logits", "node_keep", "edge_keep"});
      c.attribute.prompts = s.value("prompts", d.attribute.prompts);
      c.attribute.top_logits = s.value("top_logits", d.attribute.top_logits);
      c.attribute.node_keep = s.value("node_keep", d.attribute.node_keep);
      c.attribute.edge_keep = s.value("edge_keep", d.attribute.edge_keep);
    }
    if (j.contains("swap")) {
      const auto& s = j["swap"];
      check_keys(s, "swap", {"n_prompts", "first_late_layer", "add_coefficient"});
      c.swap.n_prompts = s.value("n_prompts", d.swap.n_prompts);
      c.swap.first_late_layer = s.value("first_late_layer", d.swap.first_late_layer);
      c.swap.add_coefficient = s.value("add_coefficient", d.swap.add_coefficient);
    }
    if (j.contains("mixture")) {
      const auto& s = j["mixture"];
      check_keys(s, "mixture", {"dominant_shares", "dominant_language", "lm_tokens", "clt_steps"});
      c.mixture.dominant_shares = s.value("dominant_shares", d.mixture.dominant_shares);
      c.mixture.dominant_language = s.value("dominant_language", d.mixture.dominant_language);
      c.mixture.lm_tokens = s.value("lm_tokens", d.mixture.lm_tokens);
      c.mixture.clt_steps = s.value("clt_steps", d.mixture.clt_steps);
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config: {}", e.what()));
  }
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.corpus.seed = seed;
  r.corpus.stream = 0;
  r.model.seed = seed;
  r.train.seed = seed;
  r.clt.seed = seed + 42;
  r.clt.n_layers = model.n_layers;
  r.clt.d_model = model.d_model;
  return r;
}

void RunConfig::validate() const {
  corpus.validate();
  model.validate();
  train.validate();
  clt.validate();
  if (clt.n_layers != model.n_layers || clt.d_model != model.d_model)
    throw ConfigError("clt shape does not match the model");
  if (validation_sequences < corpus.n_languages())
    throw ConfigError("validation_sequences must cover every language");
  if (capture.seq_len < 2 || capture.seq_len > model.context_len)
    throw ConfigError(fmt::format("capture.seq_len must be in [2, {}]", model.context_len));
  if (capture.n_sequences < 1 || capture.corpus_sequences < capture.n_sequences)
    throw ConfigError("capture.corpus_sequences must be at least capture.n_sequences");
  if (!(freq_threshold >= 0 && freq_threshold <= 1)) throw ConfigError("freq_threshold must be in [0, 1]");
  if (top_k < 1) throw ConfigError("top_k must be positive");
  const auto& a = attribute;
  if (a.top_logits < 1) throw ConfigError("attribute.top_logits must be positive");
  if (!(a.node_keep >= 0 && a.node_keep <= 1) || !(a.edge_keep >= 0 && a.edge_keep <= 1))
    throw ConfigError("attribute.node_keep and attribute.edge_keep must be in [0, 1]");
  if (swap.n_prompts < 1) throw ConfigError("swap.n_prompts must be positive");
  if (swap.first_late_layer >= model.n_layers) throw ConfigError("swap.first_late_layer beyond the last layer");
  if (mixture.dominant_language < 0 || mixture.dominant_language >= corpus.n_languages())
    throw ConfigError("mixture.dominant_language out of range");
  for (double s : mixture.dominant_shares)
    if (!(s > 0 && s < 1)) throw ConfigError("mixture.dominant_shares must lie in (0, 1)");
  if (mixture.lm_tokens < 0 || mixture.clt_steps < 0) throw ConfigError("mixture budgets must be non-negative");
}

std::string RunConfig::digest() const {
  json j = resolved();
  j.erase("artifact_dir");
  return digest_hex(j.dump());
}

RunConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw IoError(fmt::format("config file '{}' not found", path));
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
  return j.get<RunConfig>();
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(fmt::format("override '{}' is not of the form path=value", assignment));
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::istringstream in(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(in, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError(fmt::format("override '{}': '{}' is not an object", path, parts[i]));
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  (*node)[parts.back()] = value;
}

// ---- registry ----

std::string path_digest(const std::string& path) {
  if (!fs::exists(path)) throw IoError(fmt::format("'{}' not found", path));
  if (!fs::is_directory(path)) return digest_hex(read_file(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Digest d;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, path).generic_string();
    const auto bytes = read_file(f.string());
    d.update(rel).update("\0", 1).update(digest_hex(bytes));
  }
  return d.hex();
}

Registry::Registry(std::string dir) : dir_(std::move(dir)) {
  const auto m = path("manifest.json");
  if (fs::exists(m)) {
    try {
      manifest_ = json::parse(read_file(m));
    } catch (const json::parse_error& e) {
      throw ValidationError(fmt::format("{}: {}", m, e.what()));
    }
  }
  if (!manifest_.is_object()) manifest_ = json::object();
  if (!manifest_.contains("stages")) manifest_["stages"] = json::object();
}

std::string Registry::path(const std::string& rel) const { return (fs::path(dir_) / rel).string(); }

std::optional<std::string> Registry::key(const std::string& stage) const {
  const auto& s = manifest_["stages"];
  if (!s.contains(stage)) return std::nullopt;
  return s[stage]["key"].get<std::string>();
}

bool Registry::fresh(const std::string& stage, const std::string& key) const {
  const auto& s = manifest_["stages"];
  if (!s.contains(stage) || s[stage]["key"] != key) return false;
  for (const auto& [rel, digest] : s[stage]["outputs"].items()) {
    if (!fs::exists(path(rel))) return false;
    if (path_digest(path(rel)) != digest.get<std::string>()) return false;
  }
  return true;
}

void Registry::record(const std::string& stage, const std::string& key, const std::string& config_digest,
                      const json& section, const std::vector<std::string>& outputs) {
  json out = json::object();
  for (const auto& rel : outputs) out[rel] = path_digest(path(rel));
  manifest_["stages"][stage] = {{"key", key}, {"config_digest", config_digest}, {"config", section}, {"outputs", out}};
  save();
}

void Registry::save() const { write_file(path("manifest.json"), manifest_.dump(2) + "\n"); }

// ---- language features ----

json language_features_json(const std::vector<analysis::LanguageFeature>& features,
                            const std::vector<std::string>& languages) {
  json arr = json::array();
  for (const auto& f : features)
    arr.push_back({{"layer", f.feature.layer},
                   {"index", f.feature.index},
                   {"frequency", f.frequency},
                   {"top_language", f.top_language},
                   {"top_language_name", languages.at(f.top_language)},
                   {"top_probability", f.top_probability},
                   {"language_frequency", f.language_frequency}});
  return arr;
}

std::vector<analysis::LanguageFeature> language_features_from_json(const json& j) {
  std::vector<analysis::LanguageFeature> out;
  try {
    for (const auto& e : j) {
      analysis::LanguageFeature f;
      f.feature = {e.at("layer").get<int>(), e.at("index").get<int>()};
      f.frequency = e.at("frequency").get<double>();
      f.top_language = e.at("top_language").get<int>();
      f.top_probability = e.at("top_probability").get<double>();
      f.language_frequency = e.value("language_frequency", std::vector<double>{});
      out.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("language features: {}", e.what()));
  }
  return out;
}

// ---- parallel prompts ----

std::vector<ParallelPrompt> parallel_prompts(const corpus::World& world, const Tokenizer& tok, int count,
                                             int context_len, std::uint64_t seed) {
  std::vector<int> langs;
  for (int l = 0; l < world.n_languages(); ++l)
    if (world.fragmenting_language() != l) langs.push_back(l);
  const int m = int(langs.size());
  if (m < 2) throw ConfigError("parallel prompts need two non-fragmenting languages");
  const int bos = tok.specials().bos;
  Rng rng(seed);
  std::vector<ParallelPrompt> out;
  for (int attempts = 0; int(out.size()) < count; ++attempts) {
    if (attempts > 100 * count) throw ValidationError("could not build parallel prompts within the context length");
    const int i = int(out.size());
    const auto meaning = world.sample_sentence(rng);
    const int si = i % m;
    int ti = (i / m + 1 + si) % m;
    if (ti == si) ti = (si + 1) % m;
    const int src = langs[si], tgt = langs[ti];
    const auto ws = corpus::split_words(world.render(meaning, src));
    const auto wt = corpus::split_words(world.render(meaning, tgt));
    if (ws.size() < 4 || ws.size() != wt.size()) continue;
    const int k = 2 + int(rng.index(ws.size() - 3));
    std::string ps, pt;
    for (int w = 0; w < k; ++w) {
      ps += (w ? " " : "") + ws[w];
      pt += (w ? " " : "") + wt[w];
    }
    const auto a = tok.encode(ps), b = tok.encode(pt), bn = tok.encode(pt + " " + wt[k]);
    if (int(a.size()) + 1 > context_len || int(b.size()) + 1 > context_len || bn.size() <= b.size()) continue;
    ParallelPrompt p;
    p.src_language = src;
    p.tgt_language = tgt;
    p.src_text = ps;
    p.tgt_text = pt;
    p.prompt = {bos};
    p.prompt.insert(p.prompt.end(), a.begin(), a.end());
    p.translated = {bos};
    p.translated.insert(p.translated.end(), b.begin(), b.end());
    p.target_token = bn[b.size()];
    out.push_back(std::move(p));
  }
  return out;
}

std::string swap_csv(const std::vector<SwapOutcome>& rows) {
  std::string s = "src_language,tgt_language,prompt,translated,target_token,baseline_rank,edited_rank,improved,noop_exact\n";
  for (const auto& r : rows)
    s += fmt::format("{},{},\"{}\",\"{}\",{},{},{},{},{}\n", r.prompt.src_language, r.prompt.tgt_language,
                     r.prompt.src_text, r.prompt.tgt_text, r.prompt.target_token, r.baseline_rank, r.edited_rank,
                     int(r.edited_rank < r.baseline_rank), int(r.noop_exact));
  return s;
}

// ---- pipeline ----

namespace {

const char* kTrain = "corpus/train";
const char* kVal = "corpus/validation";
const char* kCapture = "corpus/capture";

corpus::CorpusSpec split_spec(const RunConfig& c, const std::string& split) {
  auto s = c.corpus;
  if (split == "validation") {
    s.stream = 1;
    s.n_sequences = c.validation_sequences;
  } else if (split == "capture") {
    s.stream = 2;
    s.n_sequences = c.capture.corpus_sequences;
    s.mixture.assign(s.languages.size(), 1.0 / double(s.languages.size()));
  } else if (split != "train") {
    throw ValidationError(fmt::format("unknown corpus split '{}'", split));
  }
  return s;
}

std::string split_dir(const std::string& split) {
  return split == "train" ? kTrain : split == "validation" ? kVal : kCapture;
}

}  // namespace

Pipeline::Pipeline(RunConfig config, std::function<void(const std::string&)> log)
    : cfg_(config.resolved()), reg_(cfg_.artifact_dir), log_(std::move(log)) {
  cfg_.validate();
}

void Pipeline::log(const std::string& s) const {
  if (log_) log_(s);
}

std::string Pipeline::key_for(const std::string& stage, const json& section,
                              const std::vector<std::string>& upstream) const {
  Digest d;
  d.update(stage).update("\0", 1).update(section.dump());
  for (const auto& u : upstream) {
    auto k = reg_.key(u);
    if (!k) throw ValidationError(fmt::format("stage '{}' needs '{}' to run first", stage, u));
    d.update("\0", 1).update(*k);
  }
  return d.hex();
}

bool Pipeline::gen_corpus() {
  const json section{{"corpus", cfg_.corpus},
                     {"validation_sequences", cfg_.validation_sequences},
                     {"capture_sequences", cfg_.capture.corpus_sequences}};
  const auto key = key_for("gen-corpus", section, {});
  if (reg_.fresh("gen-corpus", key)) return false;
  for (const char* split : {"train", "validation", "capture"}) {
    auto seqs = corpus::generate_synthetic_corpus(split_spec(cfg_, split));
    corpus::write_corpus_dir(reg_.path(split_dir(split)), seqs, cfg_.corpus.languages);
    log(fmt::format("gen-corpus: {} {} sequences", split, seqs.size()));
  }
  reg_.record("gen-corpus", key, cfg_.digest(), section, {kTrain, kVal, kCapture});
  return true;
}

std::vector<corpus::LabeledSequence> Pipeline::corpus_split(const std::string& split) const {
  split_spec(cfg_, split);
  return corpus::ingest_corpus_dir(reg_.path(split_dir(split)), cfg_.corpus.languages);
}

bool Pipeline::train_tokenizer() {
  const json section{{"vocab_size", cfg_.model.vocab_size}};
  const auto key = key_for("train-tokenizer", section, {"gen-corpus"});
  if (reg_.fresh("train-tokenizer", key)) return false;
  const auto train = corpus_split("train");
  TokenizerTrainReport rep;
  const auto tok = Tokenizer::train(train, cfg_.corpus.n_languages(), cfg_.model.vocab_size, &rep);
  if (tok.vocab_size() > cfg_.model.vocab_size)
    throw ConfigError(fmt::format("tokenizer vocabulary {} exceeds model.vocab_size {}", tok.vocab_size(),
                                  cfg_.model.vocab_size));
  tok.save(reg_.path("tokenizer.json"));

  // Mean subtokens per word on the validation split.
  const int L = cfg_.corpus.n_languages();
  std::vector<long> words(L), pieces(L);
  for (const auto& s : corpus_split("validation")) {
    words[s.language] += long(corpus::split_words(s.text).size());
    pieces[s.language] += long(tok.encode(s.text).size());
  }
  json per = json::array();
  for (int l = 0; l < L; ++l)
    per.push_back({{"language", cfg_.corpus.languages[l]},
                   {"char_mass_available", rep.char_mass_available[l]},
                   {"char_mass_used", rep.char_mass_used[l]},
                   {"subtokens_per_word", words[l] ? double(pieces[l]) / double(words[l]) : 0.0}});
  json report{{"config_digest", cfg_.digest()},
              {"vocab_size", tok.vocab_size()},
              {"merges_learned", rep.merges_learned},
              {"languages", per}};
  write_file(reg_.path("tokenizer_report.json"), report.dump(2) + "\n");
  log(fmt::format("train-tokenizer: {} pieces, {} merges", tok.vocab_size(), rep.merges_learned));
  reg_.record("train-tokenizer", key, cfg_.digest(), section, {"tokenizer.json", "tokenizer_report.json"});
  return true;
}

Tokenizer Pipeline::tokenizer() const { return Tokenizer::load(reg_.path("tokenizer.json")); }

bool Pipeline::train_lm() {
  const json section{{"model", cfg_.model}, {"train", cfg_.train}};
  const auto key = key_for("train-lm", section, {"train-tokenizer"});
  if (reg_.fresh("train-lm", key)) return false;
  const auto tok = tokenizer();
  auto train = corpus_split("train"), val = corpus_split("validation");
  tok.encode_corpus(train);
  tok.encode_corpus(val);
  lm::TrainCallbacks cb;
  cb.on_eval = [&](const lm::LossPoint& p) {
    std::string v;
    for (double x : p.val_loss) v += fmt::format(" {:.3f}", x);
    log(fmt::format("train-lm: step {} tokens {} loss {:.4f} val{}", p.step, p.tokens_seen, p.train_loss, v));
  };
  auto result = lm::train_lm(cfg_.model, cfg_.train, train, val, cfg_.corpus.n_languages(), tok.specials(), cb);
  lm::save_checkpoint(result.params, reg_.path("lm.ckpt"),
                      json{{"config_digest", cfg_.digest()}, {"mixture", cfg_.corpus.mixture}});
  write_file(reg_.path("lm_history.csv"), lm::history_csv(result.history, cfg_.corpus.languages));
  reg_.record("train-lm", key, cfg_.digest(), section, {"lm.ckpt", "lm_history.csv"});
  return true;
}

lm::Params<float> Pipeline::model() const { return lm::load_checkpoint(reg_.path("lm.ckpt")); }

bool Pipeline::capture() {
  const json section{{"n_sequences", cfg_.capture.n_sequences}, {"seq_len", cfg_.capture.seq_len}};
  const auto key = key_for("capture", section, {"train-lm"});
  if (reg_.fresh("capture", key)) return false;
  const auto tok = tokenizer();
  auto seqs = corpus_split("capture");
  tok.encode_corpus(seqs);
  act::StoreSpec spec;
  spec.n_sequences = cfg_.capture.n_sequences;
  spec.seq_len = cfg_.capture.seq_len;
  spec.seed = cfg_.seed + 7;
  const auto store = act::build_activation_store(model(), seqs, cfg_.corpus.languages, tok.specials().bos, spec);
  fs::remove_all(reg_.path("store"));
  act::save_store(store, reg_.path("store"));
  log(fmt::format("capture: {} sequences x {} tokens", store.n_sequences(), store.seq_len));
  reg_.record("capture", key, cfg_.digest(), section, {"store"});
  return true;
}

act::ActivationStore Pipeline::store() const { return act::load_store(reg_.path("store")); }

bool Pipeline::train_clt() {
  const json section{{"clt", cfg_.clt}};
  const auto key = key_for("train-clt", section, {"capture"});
  if (reg_.fresh("train-clt", key)) return false;
  const auto st = store();
  auto result = clt::train_clt(cfg_.clt, st, [&](const clt::CltEval& e) {
    std::string ev;
    for (const auto& l : e.layers) ev += fmt::format(" ev={:.3f} l0={:.1f}", l.explained_variance, l.mean_l0);
    log(fmt::format("train-clt: step {} loss {:.4f}{}", e.step, e.train.total, ev));
  });
  clt::save_clt(result.params, reg_.path("clt.ckpt"),
                json{{"config_digest", cfg_.digest()}, {"model_digest", st.model_digest}});
  write_file(reg_.path("clt_history.csv"), clt::history_csv(result.history));
  reg_.record("train-clt", key, cfg_.digest(), section, {"clt.ckpt", "clt_history.csv"});
  return true;
}

clt::CltParams<float> Pipeline::transcoder() const { return clt::load_clt(reg_.path("clt.ckpt")); }

bool Pipeline::metrics() {
  const auto key = key_for("metrics", json::object(), {"train-clt"});
  if (reg_.fresh("metrics", key)) return false;
  const auto st = store();
  const auto p = transcoder();
  const int N = st.n_sequences();
  const int n_eval = std::max(1, int(std::lround(N * p.config.eval_fraction)));
  auto ids = act::token_range(st, N - n_eval, N);
  if (long(ids.size()) > p.config.eval_tokens) ids.resize(p.config.eval_tokens);
  const auto m = clt::clt_metrics(p, st, ids);
  std::string csv = "layer,explained_variance,dead_features,mean_l0\n";
  for (std::size_t l = 0; l < m.size(); ++l)
    csv += fmt::format("{},{:.6f},{},{:.6f}\n", l, m[l].explained_variance, m[l].dead_features, m[l].mean_l0);
  write_file(reg_.path("metrics.csv"), csv);
  log("metrics: wrote metrics.csv");
  reg_.record("metrics", key, cfg_.digest(), json::object(), {"metrics.csv"});
  return true;
}

const std::vector<analysis::LayerActivity>& Pipeline::activity() const {
  if (!activity_) {
    const auto st = store();
    const auto p = transcoder();
    std::vector<analysis::LayerActivity> a;
    for (int l = 0; l < p.config.n_layers; ++l) a.push_back(analysis::layer_activity(st, p, l));
    activity_ = std::move(a);
  }
  return *activity_;
}

bool Pipeline::score() {
  const json section{{"top_k", cfg_.top_k}};
  const auto key = key_for("score", section, {"train-clt"});
  if (reg_.fresh("score", key)) return false;
  std::vector<std::string> outputs;
  for (auto v : {analysis::Variant::general, analysis::Variant::top100}) {
    std::vector<analysis::LayerProfile> rows;
    std::string jsonl;
    for (const auto& a : activity()) {
      const auto prof = analysis::feature_profiles(a, v, cfg_.top_k);
      rows.push_back(analysis::layer_profile(prof, a.layer, v));
      jsonl += analysis::profiles_jsonl(prof, cfg_.corpus.languages);
    }
    const std::string name = analysis::variant_name(v);
    write_file(reg_.path("layer_profile_" + name + ".csv"), analysis::layer_profile_csv(rows));
    write_file(reg_.path("profiles_" + name + ".jsonl"), jsonl);
    outputs.push_back("layer_profile_" + name + ".csv");
    outputs.push_back("profiles_" + name + ".jsonl");
  }
  log("score: wrote layer profiles");
  reg_.record("score", key, cfg_.digest(), section, outputs);
  return true;
}

bool Pipeline::language_features() {
  const json section{{"freq_threshold", cfg_.freq_threshold}};
  const auto key = key_for("language-features", section, {"train-clt"});
  if (reg_.fresh("language-features", key)) return false;
  const auto& act = activity();
  const auto feats = analysis::identify_language_features(act, cfg_.freq_threshold);
  write_file(reg_.path("language_features.json"),
             language_features_json(feats, cfg_.corpus.languages).dump(2) + "\n");
  const int L = cfg_.corpus.n_languages();
  std::vector<std::set<clt::FeatureKey>> active;
  for (int l = 0; l < L; ++l) active.push_back(analysis::active_features(act, l));
  std::string csv = "language_a,language_b,overlap\n";
  for (int a = 0; a < L; ++a)
    for (int b = 0; b < L; ++b) {
      const auto o = analysis::feature_overlap(active[a], active[b]);
      csv += fmt::format("{},{},{}\n", cfg_.corpus.languages[a], cfg_.corpus.languages[b],
                         o ? fmt::format("{:.6f}", *o) : std::string());
    }
  write_file(reg_.path("feature_overlap.csv"), csv);
  log(fmt::format("language-features: {} features at threshold {}", feats.size(), cfg_.freq_threshold));
  reg_.record("language-features", key, cfg_.digest(), section, {"language_features.json", "feature_overlap.csv"});
  return true;
}

std::vector<analysis::LanguageFeature> Pipeline::load_language_features() const {
  const auto path = reg_.path("language_features.json");
  if (!fs::exists(path)) throw IoError(fmt::format("'{}' not found; run language-features first", path));
  try {
    return language_features_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

std::vector<int> encode_prompt(const Tokenizer& tok, const std::string& text, int context_len) {
  if (text.find_first_not_of(" \t\n") == std::string::npos) throw ValidationError("prompt is empty");
  std::vector<int> ids{tok.specials().bos};
  const auto body = tok.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  if (int(ids.size()) > context_len)
    throw ValidationError(fmt::format("prompt has {} tokens, the model context is {}", ids.size(), context_len));
  return ids;
}

std::vector<int> Pipeline::encode_prompt(const std::string& text) const {
  return pipeline::encode_prompt(tokenizer(), text, cfg_.model.context_len);
}

std::vector<std::string> Pipeline::token_text(std::span<const int> tokens) const {
  const auto tok = tokenizer();
  std::vector<std::string> out;
  for (int t : tokens) out.push_back(tok.piece(t));
  return out;
}

std::vector<std::string> Pipeline::attribution_prompts() const {
  if (!cfg_.attribute.prompts.empty()) return cfg_.attribute.prompts;
  corpus::World world(cfg_.corpus);
  Rng rng(cfg_.seed + 11);
  const auto tok = tokenizer();
  std::vector<std::string> out;
  for (int l = 0; l < world.n_languages(); ++l) {
    const auto words = corpus::split_words(world.render(world.sample_sentence(rng), l));
    std::string p;
    // Up to five words, fewer when the prompt would overflow the context.
    for (int k = std::min<int>(5, int(words.size()) - 1); k >= 1; --k) {
      p.clear();
      for (int w = 0; w < k; ++w) p += (w ? " " : "") + words[w];
      if (int(tok.encode(p).size()) + 1 <= cfg_.model.context_len) break;
    }
    out.push_back(p);
  }
  return out;
}

attr::AttributionGraph Pipeline::build_graph(const std::string& prompt, int top_logits, double node_keep,
                                             double edge_keep) const {
  const auto tokens = encode_prompt(prompt);
  attr::GraphOptions opt;
  opt.top_logits = top_logits;
  auto g = attr::build_attribution_graph(model().cast<double>(), transcoder().cast<double>(), tokens, opt);
  g.prompt = prompt;
  g.token_text = token_text(tokens);
  return attr::prune_graph(g, node_keep, edge_keep);
}

std::map<clt::FeatureKey, attr::NodeAnnotation> feature_annotations(
    const std::vector<analysis::LayerActivity>& activity, const attr::AttributionGraph& g) {
  std::map<clt::FeatureKey, attr::NodeAnnotation> out;
  for (const auto& n : g.nodes) {
    if (n.kind != attr::NodeKind::feature) continue;
    const auto& a = activity.at(n.layer);
    const int L = a.n_languages;
    std::vector<long> counts(a.sequences_active.begin() + long(n.index) * L,
                             a.sequences_active.begin() + long(n.index + 1) * L);
    if (auto p = analysis::language_distribution(counts)) out[{n.layer, n.index}] = {*p, analysis::multilingual_score(*p)};
  }
  return out;
}

std::map<clt::FeatureKey, attr::NodeAnnotation> Pipeline::annotations(const attr::AttributionGraph& g) const {
  return feature_annotations(activity(), g);
}

bool Pipeline::attribute() {
  const json section{{"attribute", json(cfg_).at("attribute")}};
  const auto key = key_for("attribute", section, {"train-clt"});
  if (reg_.fresh("attribute", key)) return false;
  fs::remove_all(reg_.path("graphs"));
  const auto prompts = attribution_prompts();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto g = build_graph(prompts[i], cfg_.attribute.top_logits, cfg_.attribute.node_keep,
                               cfg_.attribute.edge_keep);
    write_file(reg_.path(fmt::format("graphs/graph_{:02}.json", i)), attr::graph_to_json(g, annotations(g)).dump(1) + "\n");
    log(fmt::format("attribute: '{}' {} nodes {} edges", prompts[i], g.nodes.size(), g.edges.size()));
  }
  reg_.record("attribute", key, cfg_.digest(), section, {"graphs"});
  return true;
}

bool Pipeline::swap_suite() {
  const json section{{"swap", json(cfg_).at("swap")}};
  const auto key = key_for("swap", section, {"language-features"});
  if (reg_.fresh("swap", key)) return false;
  const auto tok = tokenizer();
  const auto feats = load_language_features();
  const auto pd = model().cast<double>();
  const auto cd = transcoder().cast<double>();
  const auto prompts =
      parallel_prompts(corpus::World(cfg_.corpus), tok, cfg_.swap.n_prompts, cfg_.capture.seq_len, cfg_.seed + 123);
  intervene::SwapOptions opt;
  opt.first_late_layer = cfg_.swap.first_late_layer;
  opt.add_coefficient = cfg_.swap.add_coefficient;
  std::vector<SwapOutcome> rows;
  int improved = 0;
  bool all_exact = true;
  for (const auto& p : prompts) {
    const auto r = intervene::language_swap(pd, cd, p.prompt, p.src_language, p.tgt_language, p.translated,
                                            p.target_token, feats, opt);
    intervene::InterventionSpec empty;
    empty.target_token = p.target_token;
    const auto noop = intervene::run_with_interventions(pd, cd, p.prompt, empty);
    auto zero_add = opt;
    zero_add.zero_source = false;
    zero_add.add_coefficient = 0.0;
    const auto zero = intervene::language_swap(pd, cd, p.prompt, p.src_language, p.tgt_language, p.translated,
                                               p.target_token, feats, zero_add);
    SwapOutcome o{p, r.baseline_rank, r.edited_rank,
                  noop.edited_logits == noop.baseline_logits && zero.edited_logits == noop.baseline_logits &&
                      r.baseline_logits == noop.baseline_logits};
    improved += o.edited_rank < o.baseline_rank;
    all_exact = all_exact && o.noop_exact;
    rows.push_back(std::move(o));
  }
  write_file(reg_.path("swap.csv"), swap_csv(rows));
  json summary{{"config_digest", cfg_.digest()},
               {"prompts", int(rows.size())},
               {"improved", improved},
               {"improved_fraction", double(improved) / double(rows.size())},
               {"noop_exact", all_exact}};
  write_file(reg_.path("swap_summary.json"), summary.dump(2) + "\n");
  log(fmt::format("swap: improved {}/{}, no-op exact {}", improved, rows.size(), all_exact));
  reg_.record("swap", key, cfg_.digest(), section, {"swap.csv", "swap_summary.json"});
  return true;
}

void Pipeline::run_all() {
  gen_corpus();
  train_tokenizer();
  train_lm();
  capture();
  train_clt();
  metrics();
  score();
  language_features();
  attribute();
  swap_suite();
}

// ---- mixture matrix ----

std::vector<double> dominant_mixture(int n_languages, int dominant, double share) {
  if (n_languages < 2 || dominant < 0 || dominant >= n_languages || !(share > 0 && share < 1))
    throw ConfigError("invalid dominant mixture");
  std::vector<double> m(n_languages, (1.0 - share) / double(n_languages - 1));
  m[dominant] = share;
  return m;
}

std::vector<MixtureRun> mixture_matrix(const RunConfig& config, std::function<void(const std::string&)> log) {
  const RunConfig base = config.resolved();
  base.validate();
  const auto root = fs::path(base.artifact_dir);
  fs::create_directories(root);

  // Pre-flight: corpora, checkpoints and one store per model.
  const double store_bytes = 4.0 * base.capture.n_sequences * base.capture.seq_len * base.model.d_model * 2 *
                             base.model.n_layers;
  const double need = double(base.mixture.dominant_shares.size()) * (store_bytes + 64e6);
  const auto space = fs::space(root);
  if (double(space.available) < need)
    throw IoError(fmt::format("insufficient disk space under '{}': {:.0f} MB needed, {:.0f} MB available",
                              root.string(), need / 1e6, double(space.available) / 1e6));

  std::vector<MixtureRun> runs;
  std::string report = "dominant_share,language,role,val_loss,model_digest\n";
  for (double share : base.mixture.dominant_shares) {
    RunConfig c = base;
    c.corpus.mixture = dominant_mixture(c.corpus.n_languages(), base.mixture.dominant_language, share);
    c.artifact_dir = (root / "mixture" / fmt::format("{:02}", int(std::lround(share * 100)))).string();
    if (base.mixture.lm_tokens > 0) c.train.total_tokens = base.mixture.lm_tokens;
    if (base.mixture.clt_steps > 0) {
      c.clt.train_steps = base.mixture.clt_steps;
      c.clt.decay_steps = std::min(c.clt.decay_steps, c.clt.train_steps - c.clt.warmup_steps);
    }
    Pipeline p(c, [&](const std::string& s) {
      if (log) log(fmt::format("[{:.0f}%] {}", share * 100, s));
    });
    p.gen_corpus();
    p.train_tokenizer();
    p.train_lm();
    p.capture();
    p.train_clt();

    MixtureRun r;
    r.dominant_share = share;
    r.mixture = c.corpus.mixture;
    r.dir = c.artifact_dir;
    const auto params = p.model();
    r.model_digest = lm::model_digest(params);
    auto val = p.corpus_split("validation");
    const auto tok = p.tokenizer();
    tok.encode_corpus(val);
    r.val_loss = lm::validation_loss(params, val, c.corpus.n_languages(), tok.specials());
    for (const auto& a : p.activity())
      r.profile.push_back(
          analysis::layer_profile(analysis::feature_profiles(a, analysis::Variant::general), a.layer,
                                  analysis::Variant::general));
    write_file(p.registry().path("entropy_profile.csv"), analysis::layer_profile_csv(r.profile));
    for (int l = 0; l < c.corpus.n_languages(); ++l)
      report += fmt::format("{},{},{},{:.6f},{}\n", share, c.corpus.languages[l],
                            l == base.mixture.dominant_language ? "dominant" : "minority", r.val_loss[l],
                            r.model_digest);
    runs.push_back(std::move(r));
  }
  write_file((root / "mixture_report.csv").string(), report);
  std::string profiles = "dominant_share,layer,variant,weighted,unweighted,live_features\n";
  for (const auto& r : runs)
    for (const auto& row : r.profile)
      profiles += fmt::format("{},{},{},{:.6f},{:.6f},{}\n", r.dominant_share, row.layer,
                              analysis::variant_name(row.variant), row.weighted, row.unweighted, row.live_features);
  write_file((root / "mixture_entropy.csv").string(), profiles);
  return runs;
}

}  // namespace ct::pipeline
