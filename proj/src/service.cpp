#include "ct/service.hpp"

#include <cstdlib>
#include <regex>

#include <fmt/format.h>

#include "httplib.h"

namespace ct::service {

using nlohmann::json;

namespace {

// A malformed request body, naming the offending field.
struct FieldError : ValidationError {
  FieldError(std::string f, const std::string& what) : ValidationError(what), field(std::move(f)) {}
  std::string field;
};

struct NotFound : Error {
  explicit NotFound(const std::string& w) : Error(ErrorKind::validation, w) {}
};

template <typename T>
T field(const json& body, const std::string& name, std::optional<T> fallback = std::nullopt) {
  if (!body.contains(name) || body[name].is_null()) {
    if (fallback) return *fallback;
    throw FieldError(name, fmt::format("missing field '{}'", name));
  }
  try {
    return body[name].get<T>();
  } catch (const json::exception&) {
    throw FieldError(name, fmt::format("field '{}' has the wrong type", name));
  }
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw FieldError("", fmt::format("body is not valid JSON: {}", e.what()));
  }
  if (!j.is_object()) throw FieldError("", "body must be a JSON object");
  return j;
}

std::string error_body(const std::string& message, const std::string& field = {},
                       const std::string& diagnostic = {}) {
  json j{{"version", kSchemaVersion}, {"error", message}};
  if (!field.empty()) j["field"] = field;
  if (!diagnostic.empty()) j["diagnostic_id"] = diagnostic;
  return j.dump();
}

}  // namespace

Session Session::from_parts(const lm::Params<float>& model, const clt::CltParams<float>& clt, Tokenizer tok,
                            act::ActivationStore store) {
  Session s;
  s.model = model.cast<double>();
  s.clt = clt.cast<double>();
  s.clt_f = clt;
  s.tokenizer = std::move(tok);
  s.store = std::move(store);
  s.languages = s.store.languages;
  s.model_digest = lm::model_digest(model);
  s.clt_digest = clt::clt_digest(clt);
  if (clt.config.n_layers != model.config.n_layers || clt.config.d_model != model.config.d_model)
    throw ValidationError("transcoder does not match the model");
  for (int l = 0; l < clt.config.n_layers; ++l) s.activity.push_back(analysis::layer_activity(s.store, clt, l));
  return s;
}

Session Session::from_artifacts(const pipeline::Pipeline& p) {
  auto s = from_parts(p.model(), p.transcoder(), p.tokenizer(), p.store());
  s.default_threshold = p.config().freq_threshold;
  return s;
}

ServiceOptions options_from_env(ServiceOptions base) {
  const char* env = std::getenv("CLT_TRACER_ADDR");
  if (!env || !*env) return base;
  const std::string addr = env;
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ConfigError(fmt::format("CLT_TRACER_ADDR '{}' is not host:port", addr));
  if (colon > 0) base.host = addr.substr(0, colon);
  try {
    std::size_t used = 0;
    base.port = std::stoi(addr.substr(colon + 1), &used);
    if (used != addr.size() - colon - 1 || base.port < 0 || base.port > 65535) throw std::out_of_range("port");
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("CLT_TRACER_ADDR '{}' has an invalid port", addr));
  }
  return base;
}

// ---- cache ----

bool LruCache::get(const std::string& key, std::string& out) {
  std::lock_guard lock(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return false;
  order_.splice(order_.begin(), order_, it->second);
  out = it->second->second;
  ++hits_;
  return true;
}

void LruCache::put(const std::string& key, std::string value) {
  std::lock_guard lock(mu_);
  if (capacity_ == 0) return;
  if (auto it = index_.find(key); it != index_.end()) {
    it->second->second = std::move(value);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.emplace_front(key, std::move(value));
  index_[key] = order_.begin();
  while (order_.size() > capacity_) {
    index_.erase(order_.back().first);
    order_.pop_back();
  }
}

std::size_t LruCache::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

std::uint64_t LruCache::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

// ---- service ----

struct GraphService::Server {
  httplib::Server http;
  bool bound = false;
};

GraphService::GraphService(std::shared_ptr<const Session> session, ServiceOptions options)
    : s_(std::move(session)), opt_(std::move(options)), cache_(opt_.cache_entries) {
  if (opt_.prompt_cap < 2) throw ConfigError("prompt_cap must be at least 2");
}

json GraphService::meta() const {
  return {{"version", kSchemaVersion},
          {"graph_version", attr::kGraphSchemaVersion},
          {"model", {{"config", s_->model.config}, {"digest", s_->model_digest}}},
          {"clt", {{"config", s_->clt.config}, {"digest", s_->clt_digest}}},
          {"languages", s_->languages},
          {"vocab_size", s_->tokenizer.vocab_size()},
          {"prompt_cap", opt_.prompt_cap},
          {"default_threshold", s_->default_threshold}};
}

std::vector<int> GraphService::prompt_tokens(const json& body) const {
  const auto prompt = field<std::string>(body, "prompt");
  std::vector<int> tokens;
  try {
    tokens = pipeline::encode_prompt(s_->tokenizer, prompt, s_->model.config.context_len);
  } catch (const ValidationError& e) {
    throw FieldError("prompt", e.what());
  }
  if (int(tokens.size()) > opt_.prompt_cap)
    throw FieldError("prompt",
                     fmt::format("prompt has {} tokens, the cap is {}", tokens.size(), opt_.prompt_cap));
  return tokens;
}

std::string GraphService::attribute(const json& body) const {
  const auto tokens = prompt_tokens(body);
  const int top_logits = field<int>(body, "top_logits", 5);
  const double node_keep = field<double>(body, "node_keep", 0.80);
  const double edge_keep = field<double>(body, "edge_keep", 0.95);
  if (top_logits < 1) throw FieldError("top_logits", "top_logits must be positive");
  if (!(node_keep >= 0 && node_keep <= 1)) throw FieldError("node_keep", "node_keep must be in [0, 1]");
  if (!(edge_keep >= 0 && edge_keep <= 1)) throw FieldError("edge_keep", "edge_keep must be in [0, 1]");

  const json canonical{{"prompt", body["prompt"]},
                       {"top_logits", top_logits},
                       {"node_keep", node_keep},
                       {"edge_keep", edge_keep}};
  const auto key = digest_hex(canonical.dump());
  std::string cached;
  if (cache_.get(key, cached)) return cached;

  attr::GraphOptions opt;
  opt.top_logits = top_logits;
  auto g = attr::build_attribution_graph(s_->model, s_->clt, tokens, opt);
  g.prompt = body["prompt"].get<std::string>();
  for (int t : tokens) g.token_text.push_back(s_->tokenizer.piece(t));
  g = attr::prune_graph(g, node_keep, edge_keep);
  auto out = attr::graph_to_json(g, pipeline::feature_annotations(s_->activity, g)).dump();
  cache_.put(key, out);
  return out;
}

json GraphService::feature(int layer, int index) const {
  const auto& c = s_->clt.config;
  if (layer < 0 || layer >= c.n_layers || index < 0 || index >= c.d_features)
    throw NotFound(fmt::format("feature {}/{} does not exist", layer, index));
  const auto& a = s_->activity[layer];
  auto general = analysis::feature_profiles(a, analysis::Variant::general);
  auto top = analysis::feature_profiles(a, analysis::Variant::top100);
  json j = analysis::profile_json(general[index], s_->languages);
  j["version"] = kSchemaVersion;
  j["top100"] = analysis::profile_json(top[index], s_->languages);

  // Token-level activations of the strongest sequences.
  const auto fa = analysis::feature_activity(s_->store, s_->clt_f, {layer, index});
  json seqs = json::array();
  const auto& ranked = general[index].top_sequences;
  for (std::size_t r = 0; r < ranked.size() && r < 10; ++r) {
    const int sq = ranked[r].first;
    json toks = json::array(), acts = json::array();
    for (int t = 0; t < s_->store.seq_len; ++t) {
      toks.push_back(s_->tokenizer.piece(s_->store.sequence(sq)[t]));
      acts.push_back(fa.token_activation[std::size_t(sq) * s_->store.seq_len + t]);
    }
    seqs.push_back({{"sequence", sq},
                    {"language", s_->languages.at(s_->store.labels[sq])},
                    {"tokens", toks},
                    {"activations", acts}});
  }
  j["sequences"] = seqs;
  return j;
}

json GraphService::intervene(const json& body) const {
  const auto tokens = prompt_tokens(body);
  intervene::InterventionSpec spec;
  if (body.contains("spec")) {
    try {
      spec = body["spec"].get<intervene::InterventionSpec>();
    } catch (const json::exception& e) {
      throw FieldError("spec", fmt::format("spec: {}", e.what()));
    } catch (const ValidationError& e) {
      throw FieldError("spec", fmt::format("spec: {}", e.what()));
    }
  }
  if (spec.target_token >= s_->model.config.vocab_size)
    throw FieldError("spec.target_token", "target_token outside the vocabulary");
  intervene::InterventionResult r;
  try {
    r = intervene::run_with_interventions(s_->model, s_->clt, tokens, spec);
  } catch (const ValidationError& e) {
    throw FieldError("spec.edits", e.what());
  }
  json j = intervene::result_json(r);
  j["version"] = kSchemaVersion;
  j["tokens"] = tokens;
  auto text = [&](json& top) {
    for (auto& t : top) t["text"] = s_->tokenizer.piece(t["token"].get<int>());
  };
  text(j["baseline"]["top"]);
  text(j["edited"]["top"]);
  return j;
}

json GraphService::sweep(const json& body) const {
  const auto tokens = prompt_tokens(body);
  int target = -1;
  if (!body.contains("target_token")) throw FieldError("target_token", "missing field 'target_token'");
  if (body["target_token"].is_string()) {
    const auto ids = s_->tokenizer.encode(body["target_token"].get<std::string>());
    if (ids.empty()) throw FieldError("target_token", "target_token encodes to nothing");
    target = ids.front();
  } else {
    target = field<int>(body, "target_token");
  }
  if (target < 0 || target >= s_->model.config.vocab_size)
    throw FieldError("target_token", "target_token outside the vocabulary");
  const auto clusters = field<json>(body, "clusters");
  analysis::Cluster up, down;
  try {
    if (clusters.contains("up")) up = clusters["up"].get<analysis::Cluster>();
    if (clusters.contains("down")) down = clusters["down"].get<analysis::Cluster>();
    if (!up.members.empty()) up.validate(s_->clt.config);
    if (!down.members.empty()) down.validate(s_->clt.config);
  } catch (const json::exception& e) {
    throw FieldError("clusters", fmt::format("clusters: {}", e.what()));
  } catch (const ValidationError& e) {
    throw FieldError("clusters", e.what());
  }
  const auto ranges = field<json>(body, "ranges", json::object());
  std::vector<double> ur = intervene::default_up_range(), dr = intervene::default_down_range();
  try {
    if (ranges.contains("up")) ur = ranges["up"].get<std::vector<double>>();
    if (ranges.contains("down")) dr = ranges["down"].get<std::vector<double>>();
  } catch (const json::exception&) {
    throw FieldError("ranges", "ranges.up and ranges.down must be number arrays");
  }
  if (ur.empty() || dr.empty()) throw FieldError("ranges", "sweep ranges must not be empty");
  if (ur.size() * dr.size() > 10000) throw FieldError("ranges", "sweep grid exceeds 10000 cells");

  const auto r = intervene::coefficient_sweep(s_->model, s_->clt, tokens, target, up, down, ur, dr);
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"c_up", c.c_up}, {"c_down", c.c_down}, {"target_rank", c.target_rank}, {"top_token", c.top_token}});
  const auto& best = r.cells[r.argmax];
  return {{"version", kSchemaVersion},
          {"target_token", target},
          {"up_range", r.up_range},
          {"down_range", r.down_range},
          {"columns", {"c_up", "c_down", "target_rank", "top_token"}},
          {"cells", cells},
          {"argmax",
           {{"index", r.argmax}, {"c_up", best.c_up}, {"c_down", best.c_down}, {"target_rank", best.target_rank}}},
          {"csv", intervene::sweep_csv(r)}};
}

json GraphService::language_features(const std::unordered_map<std::string, std::string>& query) const {
  double threshold = s_->default_threshold;
  if (auto it = query.find("threshold"); it != query.end()) {
    try {
      std::size_t used = 0;
      threshold = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("threshold");
    } catch (const std::exception&) {
      throw FieldError("threshold", fmt::format("threshold '{}' is not a number", it->second));
    }
    if (!(threshold >= 0 && threshold <= 1)) throw FieldError("threshold", "threshold must be in [0, 1]");
  }
  const auto feats = analysis::identify_language_features(s_->activity, threshold);
  return {{"version", kSchemaVersion},
          {"threshold", threshold},
          {"features", pipeline::language_features_json(feats, s_->languages)}};
}

Response GraphService::handle(const std::string& method, const std::string& path,
                              const std::unordered_map<std::string, std::string>& query,
                              const std::string& body) const {
  static const std::regex feature_re(R"(/api/feature/([^/]+)/([^/]+))");
  try {
    std::smatch m;
    if (method == "GET" && path == "/api/meta") return {200, meta().dump()};
    if (method == "GET" && path == "/api/language-features") return {200, language_features(query).dump()};
    if (method == "GET" && std::regex_match(path, m, feature_re)) {
      int layer = 0, index = 0;
      try {
        std::size_t a = 0, b = 0;
        layer = std::stoi(m[1].str(), &a);
        index = std::stoi(m[2].str(), &b);
        if (long(a) != m[1].length() || long(b) != m[2].length()) throw std::invalid_argument("id");
      } catch (const std::exception&) {
        throw NotFound(fmt::format("feature {}/{} does not exist", m[1].str(), m[2].str()));
      }
      return {200, feature(layer, index).dump()};
    }
    if (method == "POST" && path == "/api/attribute") return {200, attribute(parse_body(body))};
    if (method == "POST" && path == "/api/intervene") return {200, intervene(parse_body(body)).dump()};
    if (method == "POST" && path == "/api/sweep") return {200, sweep(parse_body(body)).dump()};
    return {404, error_body(fmt::format("no route for {} {}", method, path))};
  } catch (const NotFound& e) {
    return {404, error_body(e.what())};
  } catch (const FieldError& e) {
    return {400, error_body(e.what(), e.field)};
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::validation) return {400, error_body(e.what())};
    const auto id = digest_hex(method + " " + path + "\n" + body + "\n" + e.what()).substr(0, 12);
    warn(fmt::format("request failed [{}]: {} {}: {}", id, method, path, e.what()));
    return {500, error_body(e.what(), {}, id)};
  } catch (const std::exception& e) {
    const auto id = digest_hex(method + " " + path + "\n" + body + "\n" + e.what()).substr(0, 12);
    warn(fmt::format("request failed [{}]: {} {}: {}", id, method, path, e.what()));
    return {500, error_body("internal error", {}, id)};
  }
}

int GraphService::bind() {
  if (!server_) server_ = std::make_shared<Server>();
  auto& http = server_->http;
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::unordered_map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query.emplace(k, v);
    const auto r = handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  http.Get(".*", route);
  http.Post(".*", route);
  if (opt_.port == 0) {
    bound_port_ = http.bind_to_any_port(opt_.host);
    if (bound_port_ <= 0) throw IoError(fmt::format("cannot bind {}", opt_.host));
  } else {
    if (!http.bind_to_port(opt_.host, opt_.port)) throw IoError(fmt::format("cannot bind {}:{}", opt_.host, opt_.port));
    bound_port_ = opt_.port;
  }
  server_->bound = true;
  return bound_port_;
}

void GraphService::serve() {
  if (!server_ || !server_->bound) bind();
  if (!server_->http.listen_after_bind()) throw IoError("listener stopped unexpectedly");
}

void GraphService::stop() {
  if (server_) {
    server_->http.wait_until_ready();
    server_->http.stop();
  }
}

}  // namespace ct::service
