#pragma once

// HTTP/JSON access to graphs, feature profiles and interventions over one
// loaded model and transcoder. Loaded artifacts are never modified; the
// graph cache is the only shared mutable state.

#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ct/analysis.hpp"
#include "ct/pipeline.hpp"

namespace ct::service {

constexpr int kSchemaVersion = 1;

struct Session {
  lm::Params<double> model;
  clt::CltParams<double> clt;
  clt::CltParams<float> clt_f;
  Tokenizer tokenizer;
  act::ActivationStore store;
  std::vector<analysis::LayerActivity> activity;
  std::vector<std::string> languages;
  std::string model_digest, clt_digest;
  double default_threshold = 0.05;

  static Session from_artifacts(const pipeline::Pipeline& p);
  static Session from_parts(const lm::Params<float>& model, const clt::CltParams<float>& clt, Tokenizer tok,
                            act::ActivationStore store);
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t cache_entries = 128;
  int prompt_cap = 64;  // tokens, BOS included
};

// Reads CLT_TRACER_ADDR ("host:port" or ":port") over the given defaults.
ServiceOptions options_from_env(ServiceOptions base = {});

struct Response {
  int status = 200;
  std::string body;  // JSON
};

// Bounded least-recently-used map from request digest to response body.
class LruCache {
 public:
  explicit LruCache(std::size_t capacity) : capacity_(capacity) {}
  bool get(const std::string& key, std::string& out);
  void put(const std::string& key, std::string value);
  std::size_t size() const;
  std::uint64_t hits() const;

 private:
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::list<std::pair<std::string, std::string>> order_;  // front = most recent
  std::unordered_map<std::string, decltype(order_)::iterator> index_;
  std::uint64_t hits_ = 0;
};

class GraphService {
 public:
  GraphService(std::shared_ptr<const Session> session, ServiceOptions options = {});

  // Dispatches one request; `query` holds decoded query parameters.
  Response handle(const std::string& method, const std::string& path,
                  const std::unordered_map<std::string, std::string>& query, const std::string& body) const;

  // Binds the listener (port 0 picks a free port) and returns the port.
  int bind();
  // Blocks until stop() is called. Binds first when bind() was not called.
  void serve();
  void stop();
  int bound_port() const { return bound_port_; }
  const ServiceOptions& options() const { return opt_; }
  const LruCache& cache() const { return cache_; }

 private:
  nlohmann::json meta() const;
  std::string attribute(const nlohmann::json& body) const;
  nlohmann::json feature(int layer, int index) const;
  nlohmann::json intervene(const nlohmann::json& body) const;
  nlohmann::json sweep(const nlohmann::json& body) const;
  nlohmann::json language_features(const std::unordered_map<std::string, std::string>& query) const;
  std::vector<int> prompt_tokens(const nlohmann::json& body) const;

  std::shared_ptr<const Session> s_;
  ServiceOptions opt_;
  mutable LruCache cache_;
  struct Server;
  std::shared_ptr<Server> server_;
  int bound_port_ = 0;
};

}  // namespace ct::service
