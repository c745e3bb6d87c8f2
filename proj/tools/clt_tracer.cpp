// Command-line entry point for the pipeline stages and the graph service.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <memory>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "ct/pipeline.hpp"
#include "ct/service.hpp"

using namespace ct;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string artifacts;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run config (JSON)");
  app->add_option("--seed", c.seed, "Global seed");
  app->add_option("--artifacts", c.artifacts, "Artifact directory");
  app->add_option("--set", c.overrides, "Override a config field, e.g. train.lr=0.001");
  app->add_flag("-q,--quiet", c.quiet, "No progress output");
}

pipeline::RunConfig load(const Common& c) {
  json j = json::object();
  if (!c.config.empty()) {
    if (!std::filesystem::exists(c.config)) throw IoError(fmt::format("config file '{}' not found", c.config));
    try {
      j = json::parse(read_file(c.config));
    } catch (const json::parse_error& e) {
      throw ConfigError(fmt::format("{}: {}", c.config, e.what()));
    }
  }
  for (const auto& o : c.overrides) pipeline::apply_override(j, o);
  auto cfg = j.get<pipeline::RunConfig>();
  if (c.seed) cfg.seed = *c.seed;
  if (!c.artifacts.empty()) cfg.artifact_dir = c.artifacts;
  return cfg;
}

std::function<void(const std::string&)> logger(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& s) { std::cerr << s << "\n"; };
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    write_file(out, text);
}

std::string prompt_from(const std::string& prompt, const std::string& file) {
  if (!prompt.empty()) return prompt;
  if (file.empty()) throw ValidationError("give --prompt or --prompt-file");
  if (!std::filesystem::exists(file)) throw IoError(fmt::format("prompt file '{}' not found", file));
  std::istringstream in(read_file(file));
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      if (line.back() == '\r') line.pop_back();
      return line;
    }
  throw ValidationError(fmt::format("prompt file '{}' is empty", file));
}

json read_json(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError(fmt::format("'{}' not found", path));
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
}

std::vector<double> parse_range(const std::string& s) {
  // "a:b" (integer steps) or "a,b,c"
  std::vector<double> out;
  try {
    if (auto colon = s.find(':'); colon != std::string::npos) {
      const int a = std::stoi(s.substr(0, colon)), b = std::stoi(s.substr(colon + 1));
      for (int v = a; v <= b; ++v) out.push_back(v);
    } else {
      std::istringstream in(s);
      std::string tok;
      while (std::getline(in, tok, ',')) out.push_back(std::stod(tok));
    }
  } catch (const std::exception&) {
    throw ValidationError(fmt::format("invalid range '{}'", s));
  }
  if (out.empty()) throw ValidationError(fmt::format("range '{}' is empty", s));
  return out;
}

service::GraphService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-layer transcoder tracing on small multilingual models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  std::function<int()> action;

  auto stage = [&](const char* name, const char* help, bool (pipeline::Pipeline::*fn)()) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    sub->callback([&, fn, name] {
      action = [&, fn, name] {
        pipeline::Pipeline p(load(common), logger(common));
        const bool ran = (p.*fn)();
        if (!common.quiet && !ran) std::cerr << name << ": up to date\n";
        return 0;
      };
    });
    return sub;
  };

  stage("gen-corpus", "Generate the synthetic corpora", &pipeline::Pipeline::gen_corpus);
  stage("train-tokenizer", "Train the balanced tokenizer", &pipeline::Pipeline::train_tokenizer);
  stage("train-lm", "Train the language model", &pipeline::Pipeline::train_lm);
  stage("capture", "Capture the activation store", &pipeline::Pipeline::capture);
  stage("train-clt", "Train the cross-layer transcoder", &pipeline::Pipeline::train_clt);
  stage("metrics", "Transcoder metrics on the held-out split", &pipeline::Pipeline::metrics);
  stage("swap", "Language-swap suite on parallel prompts", &pipeline::Pipeline::swap_suite);

  // score
  std::string variant = "general", score_out;
  {
    auto* sub = app.add_subcommand("score", "Multilingual scores and layer profiles");
    add_common(sub, common);
    sub->add_option("--variant", variant, "general or top100")->check(CLI::IsMember({"general", "top100"}));
    sub->add_option("--out", score_out, "Copy the layer profile CSV here");
    sub->callback([&] {
      action = [&] {
        pipeline::Pipeline p(load(common), logger(common));
        p.score();
        const auto path = p.registry().path("layer_profile_" + variant + ".csv");
        if (score_out.empty())
          std::cout << path << "\n";
        else
          write_file(score_out, read_file(path));
        return 0;
      };
    });
  }

  // language-features
  std::optional<double> threshold;
  std::string lf_out;
  {
    auto* sub = app.add_subcommand("language-features", "High-frequency language features");
    add_common(sub, common);
    sub->add_option("--threshold", threshold, "Token frequency threshold");
    sub->add_option("--out", lf_out, "Copy the feature list here");
    sub->callback([&] {
      action = [&] {
        auto cfg = load(common);
        if (threshold) cfg.freq_threshold = *threshold;
        pipeline::Pipeline p(cfg, logger(common));
        p.language_features();
        const auto text = read_file(p.registry().path("language_features.json"));
        if (!lf_out.empty()) write_file(lf_out, text);
        return 0;
      };
    });
  }

  // attribute / export-graph
  std::string prompt, prompt_file, graph_out, graph_in;
  std::optional<int> top_logits;
  std::optional<double> node_keep, edge_keep;
  auto graph_options = [&](CLI::App* sub) {
    sub->add_option("--prompt", prompt, "Prompt text");
    sub->add_option("--prompt-file", prompt_file, "File whose first non-empty line is the prompt");
    sub->add_option("--top-logits", top_logits, "Logit nodes to keep");
    sub->add_option("--node-keep", node_keep, "Node influence share");
    sub->add_option("--edge-keep", edge_keep, "Edge effect share");
    sub->add_option("--out", graph_out, "Output graph JSON (default stdout)");
  };
  auto one_graph = [&](pipeline::Pipeline& p) {
    const auto& a = p.config().attribute;
    const auto g = p.build_graph(prompt_from(prompt, prompt_file), top_logits.value_or(a.top_logits),
                                 node_keep.value_or(a.node_keep), edge_keep.value_or(a.edge_keep));
    emit(graph_out, attr::graph_to_json(g, p.annotations(g)).dump(1) + "\n");
  };
  {
    auto* sub = app.add_subcommand("attribute", "Attribution graphs (config prompts, or one prompt)");
    add_common(sub, common);
    graph_options(sub);
    sub->callback([&] {
      action = [&] {
        pipeline::Pipeline p(load(common), logger(common));
        if (prompt.empty() && prompt_file.empty())
          p.attribute();
        else
          one_graph(p);
        return 0;
      };
    });
  }
  {
    auto* sub = app.add_subcommand("export-graph", "Write schema-conformant graph JSON");
    add_common(sub, common);
    graph_options(sub);
    sub->add_option("--in", graph_in, "Existing graph JSON to validate and re-emit");
    sub->callback([&] {
      action = [&] {
        if (!graph_in.empty()) {
          const auto g = attr::graph_from_json(read_json(graph_in));
          auto j = read_json(graph_in);
          std::map<clt::FeatureKey, attr::NodeAnnotation> ann;
          for (const auto& n : j.at("nodes"))
            if (n.contains("multilingual"))
              ann[{n["layer"].get<int>(), n["feature_index"].get<int>()}] = {
                  n["multilingual"]["distribution"].get<std::vector<double>>(),
                  n["multilingual"]["entropy"].get<double>()};
          emit(graph_out, attr::graph_to_json(g, ann).dump(1) + "\n");
          return 0;
        }
        pipeline::Pipeline p(load(common), logger(common));
        one_graph(p);
        return 0;
      };
    });
  }

  // intervene
  std::string spec_file, result_out;
  {
    auto* sub = app.add_subcommand("intervene", "Run feature edits on the replacement forward");
    add_common(sub, common);
    sub->add_option("--prompt", prompt, "Prompt text");
    sub->add_option("--prompt-file", prompt_file, "Prompt file");
    sub->add_option("--spec", spec_file, "InterventionSpec JSON (default: no edits)");
    sub->add_option("--out", result_out, "Result JSON (default stdout)");
    sub->callback([&] {
      action = [&] {
        pipeline::Pipeline p(load(common), logger(common));
        const auto tokens = p.encode_prompt(prompt_from(prompt, prompt_file));
        intervene::InterventionSpec spec;
        if (!spec_file.empty()) {
          try {
            spec = read_json(spec_file).get<intervene::InterventionSpec>();
          } catch (const json::exception& e) {
            throw ValidationError(fmt::format("{}: {}", spec_file, e.what()));
          }
        }
        const auto r = intervene::run_with_interventions(p.model().cast<double>(), p.transcoder().cast<double>(),
                                                         tokens, spec);
        emit(result_out, intervene::result_json(r).dump(1) + "\n");
        return 0;
      };
    });
  }

  // sweep
  std::string up_file, down_file, up_range = "1:30", down_range = "-30:-1", sweep_out;
  int target_token = -1;
  {
    auto* sub = app.add_subcommand("sweep", "Coefficient sweep over two clusters");
    add_common(sub, common);
    sub->add_option("--prompt", prompt, "Prompt text");
    sub->add_option("--prompt-file", prompt_file, "Prompt file");
    sub->add_option("--target-token", target_token, "Target token id")->required();
    sub->add_option("--up", up_file, "Cluster JSON scaled by the up coefficients");
    sub->add_option("--down", down_file, "Cluster JSON scaled by the down coefficients");
    sub->add_option("--up-range", up_range, "a:b or comma list");
    sub->add_option("--down-range", down_range, "a:b or comma list");
    sub->add_option("--out", sweep_out, "CSV output (default stdout)");
    sub->callback([&] {
      action = [&] {
        pipeline::Pipeline p(load(common), logger(common));
        const auto tokens = p.encode_prompt(prompt_from(prompt, prompt_file));
        auto cluster = [&](const std::string& f) {
          analysis::Cluster c;
          if (f.empty()) return c;
          try {
            return read_json(f).get<analysis::Cluster>();
          } catch (const json::exception& e) {
            throw ValidationError(fmt::format("{}: {}", f, e.what()));
          }
        };
        const auto clt = p.transcoder().cast<double>();
        const auto up = cluster(up_file), down = cluster(down_file);
        if (!up.members.empty()) up.validate(clt.config);
        if (!down.members.empty()) down.validate(clt.config);
        const auto r = intervene::coefficient_sweep(p.model().cast<double>(), clt, tokens, target_token, up, down,
                                                    parse_range(up_range), parse_range(down_range));
        emit(sweep_out, intervene::sweep_csv(r));
        const auto& best = r.cells[r.argmax];
        if (!common.quiet)
          std::cerr << fmt::format("best: c_up={} c_down={} rank={}\n", best.c_up, best.c_down, best.target_rank);
        return 0;
      };
    });
  }

  // serve
  std::string addr;
  std::size_t cache_entries = 128;
  int prompt_cap = 64;
  {
    auto* sub = app.add_subcommand("serve", "HTTP/JSON graph service");
    add_common(sub, common);
    sub->add_option("--addr", addr, "host:port (default: CLT_TRACER_ADDR or 127.0.0.1:8080)");
    sub->add_option("--cache", cache_entries, "Graph cache entries");
    sub->add_option("--prompt-cap", prompt_cap, "Maximum prompt tokens");
    sub->callback([&] {
      action = [&] {
        service::ServiceOptions opt = service::options_from_env();
        if (!addr.empty()) {
          const auto colon = addr.rfind(':');
          if (colon == std::string::npos) throw ConfigError(fmt::format("--addr '{}' is not host:port", addr));
          if (colon > 0) opt.host = addr.substr(0, colon);
          try {
            opt.port = std::stoi(addr.substr(colon + 1));
          } catch (const std::exception&) {
            throw ConfigError(fmt::format("--addr '{}' has an invalid port", addr));
          }
        }
        opt.cache_entries = cache_entries;
        opt.prompt_cap = prompt_cap;
        pipeline::Pipeline p(load(common), logger(common));
        auto session = std::make_shared<const service::Session>(service::Session::from_artifacts(p));
        service::GraphService svc(session, opt);
        const int port = svc.bind();
        std::cerr << fmt::format("serving on http://{}:{}\n", opt.host, port);
        g_service = &svc;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        svc.serve();
        g_service = nullptr;
        return 0;
      };
    });
  }

  // run / mixture
  {
    auto* sub = app.add_subcommand("run", "Every stage in order");
    add_common(sub, common);
    sub->callback([&] {
      action = [&] {
        pipeline::Pipeline p(load(common), logger(common));
        p.run_all();
        return 0;
      };
    });
  }
  {
    auto* sub = app.add_subcommand("mixture", "Train the dominant-share mixture matrix");
    add_common(sub, common);
    sub->callback([&] {
      action = [&] {
        const auto runs = pipeline::mixture_matrix(load(common), logger(common));
        for (const auto& r : runs) {
          std::string v;
          for (double x : r.val_loss) v += fmt::format(" {:.3f}", x);
          std::cout << fmt::format("{:.0f}%: {} val{}\n", r.dominant_share * 100, r.model_digest, v);
        }
        return 0;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    return action ? action() : 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return int(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
