#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "ct/pipeline.hpp"
#include "doctest.h"

using namespace ct;
using namespace ct::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ct_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

RunConfig tiny(const fs::path& dir) {
  auto c = load_config(CT_TINY_CONFIG);
  c.artifact_dir = dir.string();
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CT_TRACER_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> column(const std::string& csv, int col) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    for (int i = 0; i <= col; ++i) std::getline(row, cell, ',');
    out.push_back(cell);
  }
  return out;
}

// One tiny pipeline shared by the cases below.
const fs::path& tiny_run() {
  static const fs::path dir = [] {
    auto d = scratch("tiny");
    Pipeline(tiny(d)).run_all();
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("unknown config keys are rejected") {
  json j = json::parse(read_file(CT_TINY_CONFIG));
  j["lerning_rate"] = 1;
  CHECK_THROWS_AS(j.get<RunConfig>(), ConfigError);
  j = json::parse(read_file(CT_TINY_CONFIG));
  j["capture"]["seq_length"] = 4;
  CHECK_THROWS_AS(j.get<RunConfig>(), ConfigError);
  j = json::parse(read_file(CT_TINY_CONFIG));
  j["mixture"]["shares"] = {0.5};
  CHECK_THROWS_AS(j.get<RunConfig>(), ConfigError);
  for (const char* section : {"corpus", "model", "train", "clt"}) {
    j = json::parse(read_file(CT_TINY_CONFIG));
    j[section]["typo_field"] = 1;
    CHECK_THROWS_AS(j.get<RunConfig>(), ConfigError);
  }
}

TEST_CASE("overrides") {
  json j = json::object();
  apply_override(j, "train.lr=0.001");
  apply_override(j, "artifact_dir=out/x");
  apply_override(j, "mixture.dominant_shares=[0.8,0.4]");
  CHECK(j["train"]["lr"] == 0.001);
  CHECK(j["artifact_dir"] == "out/x");
  CHECK(j["mixture"]["dominant_shares"].size() == 2);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "=3"), ConfigError);
}

TEST_CASE("resolved seeds and digest") {
  auto c = tiny("a");
  c.seed = 9;
  auto r = c.resolved();
  CHECK(r.corpus.seed == 9);
  CHECK(r.model.seed == 9);
  CHECK(r.train.seed == 9);
  CHECK(r.clt.seed != r.model.seed);
  CHECK(r.clt.n_layers == r.model.n_layers);
  CHECK(r.clt.d_model == r.model.d_model);
  auto moved = c;
  moved.artifact_dir = "b";
  CHECK(moved.digest() == c.digest());
  moved.train.lr *= 2;
  CHECK(moved.digest() != c.digest());
}

TEST_CASE("invalid configs") {
  auto c = tiny("a");
  c.mixture.dominant_shares = {1.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny("a");
  c.mixture.dominant_language = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("run writes every artifact and a second run is a no-op") {
  const auto& dir = tiny_run();
  for (const char* f : {"manifest.json", "tokenizer.json", "tokenizer_report.json", "lm.ckpt", "lm_history.csv",
                        "clt.ckpt", "clt_history.csv", "metrics.csv", "layer_profile_general.csv",
                        "layer_profile_top100.csv", "profiles_general.jsonl", "language_features.json", "swap.csv",
                        "swap_summary.json"})
    CHECK_MESSAGE(fs::exists(dir / f), f);
  CHECK(fs::is_directory(dir / "graphs"));
  const auto before = read_file((dir / "manifest.json").string());
  Pipeline p(tiny(dir));
  CHECK_FALSE(p.gen_corpus());
  CHECK_FALSE(p.train_tokenizer());
  CHECK_FALSE(p.train_lm());
  CHECK_FALSE(p.capture());
  CHECK_FALSE(p.train_clt());
  CHECK_FALSE(p.metrics());
  CHECK_FALSE(p.score());
  CHECK_FALSE(p.language_features());
  CHECK_FALSE(p.attribute());
  CHECK_FALSE(p.swap_suite());
  CHECK(read_file((dir / "manifest.json").string()) == before);
}

TEST_CASE("a changed stage reruns itself and what depends on it") {
  auto dir = scratch("rerun");
  fs::create_directories(dir);
  fs::copy(tiny_run(), dir, fs::copy_options::recursive);
  auto c = tiny(dir);
  c.clt.lr *= 0.5;
  Pipeline p(c);
  CHECK_FALSE(p.train_lm());
  CHECK_FALSE(p.capture());
  CHECK(p.train_clt());
  CHECK(p.metrics());
  fs::remove_all(dir);
}

TEST_CASE("a tampered output forces a rerun") {
  auto dir = scratch("tamper");
  fs::create_directories(dir);
  fs::copy(tiny_run(), dir, fs::copy_options::recursive);
  write_file((dir / "metrics.csv").string(), "garbage\n");
  Pipeline p(tiny(dir));
  CHECK_FALSE(p.train_clt());
  CHECK(p.metrics());
  CHECK(read_file((dir / "metrics.csv").string()) == read_file((tiny_run() / "metrics.csv").string()));
  fs::remove_all(dir);
}

TEST_CASE("score variants share the layer axis") {
  const auto& dir = tiny_run();
  const auto g = column(read_file((dir / "layer_profile_general.csv").string()), 0);
  const auto t = column(read_file((dir / "layer_profile_top100.csv").string()), 0);
  CHECK(g.size() == 2);
  CHECK(g == t);
}

TEST_CASE("stored graphs parse and carry the schema version") {
  int graphs = 0;
  for (const auto& e : fs::directory_iterator(tiny_run() / "graphs")) {
    auto j = json::parse(read_file(e.path().string()));
    CHECK(j["version"] == attr::kGraphSchemaVersion);
    auto g = attr::graph_from_json(j);
    CHECK(!g.nodes.empty());
    ++graphs;
  }
  CHECK(graphs == 5);
}

TEST_CASE("cli exit codes") {
  CHECK(run_cli("--bogus-flag") == 1);
  CHECK(run_cli("run --config /nonexistent/cfg.json") == 2);
  auto dir = scratch("cli_cfg");
  fs::create_directories(dir);
  json j = json::parse(read_file(CT_TINY_CONFIG));
  j["model"]["unknown"] = 1;
  write_file((dir / "bad.json").string(), j.dump());
  CHECK(run_cli("run --config " + (dir / "bad.json").string() + " --artifacts " + dir.string()) == 1);
  CHECK(run_cli(std::string("metrics --config ") + CT_TINY_CONFIG + " --set train.lr=-1 --artifacts " + dir.string()) == 1);
  fs::remove_all(dir);
}

TEST_CASE("cli attribute from a prompt file and score variant") {
  auto dir = scratch("cli_out");
  fs::create_directories(dir);
  write_file((dir / "prompt.txt").string(), "\n  \nmi kulolo komiho\n");
  const std::string base = std::string("--config ") + CT_TINY_CONFIG + " -q --artifacts " + tiny_run().string();
  REQUIRE(run_cli("attribute " + base + " --prompt-file " + (dir / "prompt.txt").string() + " --out " +
                  (dir / "g.json").string()) == 0);
  auto g = attr::graph_from_json(json::parse(read_file((dir / "g.json").string())));
  CHECK(g.prompt == "mi kulolo komiho");
  CHECK(run_cli("attribute " + base + " --prompt-file " + (dir / "missing.txt").string()) == 2);
  REQUIRE(run_cli("score " + base + " --variant top100 --out " + (dir / "s.csv").string()) == 0);
  CHECK(read_file((dir / "s.csv").string()) == read_file((tiny_run() / "layer_profile_top100.csv").string()));
  CHECK(run_cli("score " + base + " --variant median") == 1);
  fs::remove_all(dir);
}

TEST_CASE("mixture matrix records its mixtures") {
  auto dir = scratch("mixture");
  auto runs = mixture_matrix(tiny(dir));
  REQUIRE(runs.size() == 2);
  for (const auto& r : runs) {
    auto m = json::parse(read_file((fs::path(r.dir) / "manifest.json").string()));
    auto mix = m["stages"]["gen-corpus"]["config"]["corpus"]["mixture"].get<std::vector<double>>();
    CHECK(mix[0] == doctest::Approx(r.dominant_share));
    double sum = 0;
    for (double x : mix) sum += x;
    CHECK(sum == doctest::Approx(1.0));
    CHECK(r.val_loss.size() == 5);
    CHECK(fs::exists(fs::path(r.dir) / "entropy_profile.csv"));
  }
  CHECK(runs[0].model_digest != runs[1].model_digest);
  CHECK(fs::exists(dir / "mixture_report.csv"));
  fs::remove_all(dir);
}
