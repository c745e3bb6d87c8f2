// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
// Usage: acceptance [work_dir] [config]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "ct/analysis.hpp"
#include "ct/attribution.hpp"
#include "ct/clt.hpp"
#include "ct/common.hpp"
#include "ct/pipeline.hpp"
#include "ct/tinylm.hpp"
#include "support/oracles.hpp"

#ifndef CT_DEMO_CONFIG
#define CT_DEMO_CONFIG "configs/demo.json"
#endif
#ifndef CT_ACCEPT_DIR
#define CT_ACCEPT_DIR "acceptance_work"
#endif

namespace fs = std::filesystem;
using namespace ct;
using json = nlohmann::json;

namespace {

int failures = 0;
std::FILE* report_file = nullptr;  // copy of stdout lines

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

void report(const std::string& name, bool ok, const std::string& detail, double seconds) {
  if (!ok) ++failures;
  const auto line = fmt::format("{} {}: {} [{:.1f}s]\n", ok ? "PASS" : "FAIL", name, detail, seconds);
  std::fputs(line.c_str(), stdout);
  std::fflush(stdout);
  if (report_file) {
    std::fputs(line.c_str(), report_file);
    std::fflush(report_file);
  }
}

// Runs fn and turns an escaped exception into a FAIL line.
void criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& fn) {
  Timer t;
  try {
    auto [ok, detail] = fn();
    report(name, ok, detail, t.seconds());
  } catch (const std::exception& e) {
    report(name, false, fmt::format("exception: {}", e.what()), t.seconds());
  }
}

double rel_err(double g, double fd) { return std::abs(g - fd) / std::max(1e-6, std::max(std::abs(g), std::abs(fd))); }

// ---- gradients ----

double lm_fd(int layers, int d, std::uint64_t seed) {
  lm::ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 2;
  c.d_head = d / 2;
  c.d_ffn = 2 * d;
  c.vocab_size = 11;
  c.context_len = 16;
  c.seed = seed;
  auto p = lm::init_model<float>(c).cast<double>();
  Rng rng(seed + 1);
  for (auto& v : p.values) v += 0.05 * rng.normal();
  lm::Batch b;
  for (int r = 0; r < 2; ++r) {
    std::vector<int> row(6);
    for (auto& t : row) t = int(rng.index(11));
    b.rows.push_back(row);
  }
  const auto g = lm::loss_and_grads<double>(p, b).grads;
  const double eps = 1e-4;
  double worst = 0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double keep = p.values[i];
    p.values[i] = keep + eps;
    const double up = lm::loss_only<double>(p, b);
    p.values[i] = keep - eps;
    const double down = lm::loss_only<double>(p, b);
    p.values[i] = keep;
    worst = std::max(worst, rel_err(g.values[i], (up - down) / (2 * eps)));
  }
  return worst;
}

double clt_fd(int layers, int d, std::uint64_t seed) {
  clt::CltConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.d_features = 2 * d;
  c.activation = clt::Activation::relu;
  c.lambda0 = 0.7;
  c.lambda_df = 0.2;
  c.dead_threshold = 0.1;
  c.seed = seed;
  auto p = clt::init_clt<double>(c);
  Rng rng(seed + 1);
  for (auto& v : p.values) v = 0.5 * rng.normal();
  clt::Pairs<double> b;
  b.n = 5;
  b.h.assign(layers, std::vector<double>(std::size_t(b.n) * d));
  b.m = b.h;
  for (auto* set : {&b.h, &b.m})
    for (auto& v : *set)
      for (auto& x : v) x = rng.normal();
  const auto g = clt::clt_loss_and_grads(p, b, c.lambda0).grads;
  const double eps = 1e-4;
  double worst = 0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double keep = p.values[i];
    p.values[i] = keep + eps;
    const double up = clt::clt_loss(p, b, c.lambda0).total;
    p.values[i] = keep - eps;
    const double down = clt::clt_loss(p, b, c.lambda0).total;
    p.values[i] = keep;
    worst = std::max(worst, rel_err(g.values[i], (up - down) / (2 * eps)));
  }
  return worst;
}

// ---- attribution ----

struct Micro {
  lm::Params<double> lm;
  clt::CltParams<double> clt;
  std::vector<int> tokens;
};

Micro micro_attribution(int layers, std::uint64_t seed) {
  lm::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_ffn = 16;
  c.vocab_size = 13;
  c.context_len = 16;
  c.seed = seed;
  Micro m;
  m.lm = lm::init_model<float>(c).cast<double>();
  Rng rng(seed + 100);
  for (auto& v : m.lm.values) v += 0.3 * rng.normal();
  clt::CltConfig cc;
  cc.n_layers = layers;
  cc.d_model = 8;
  cc.d_features = 12;
  cc.activation = clt::Activation::jumprelu;
  m.clt = clt::init_clt<double>(cc);
  for (auto& v : m.clt.values) v = 0.4 * rng.normal();
  for (int l = 0; l < layers; ++l)
    for (int n = 0; n < 12; ++n) m.clt.log_theta(l)[n] = std::log(0.05);
  for (int i = 0; i < 8; ++i) m.tokens.push_back(int(rng.index(13)));
  return m;
}

// ---- demo artifacts ----

std::vector<std::string> lines(const std::string& path) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : read_file(path)) {
    if (ch == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out(1);
  for (char ch : s) {
    if (ch == sep)
      out.emplace_back();
    else
      out.back() += ch;
  }
  return out;
}

std::vector<std::string> compared_files(const fs::path& dir) {
  std::vector<std::string> rel = {"metrics.csv",          "layer_profile_general.csv", "layer_profile_top100.csv",
                                  "swap.csv",             "clt_history.csv",          "lm_history.csv",
                                  "feature_overlap.csv",  "language_features.json"};
  std::vector<std::string> graphs;
  for (const auto& e : fs::directory_iterator(dir / "graphs")) graphs.push_back("graphs/" + e.path().filename().string());
  std::sort(graphs.begin(), graphs.end());
  rel.insert(rel.end(), graphs.begin(), graphs.end());
  return rel;
}

pipeline::RunConfig demo_config(const std::string& path, const fs::path& dir) {
  auto c = pipeline::load_config(path);
  c.artifact_dir = dir.string();
  return c;
}

double run_demo(const pipeline::RunConfig& c) {
  fs::remove_all(c.artifact_dir);
  Timer t;
  pipeline::Pipeline p(c, [](const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); });
  p.run_all();
  return t.seconds();
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? argv[1] : CT_ACCEPT_DIR;
  const std::string config = argc > 2 ? argv[2] : CT_DEMO_CONFIG;
  fs::create_directories(work);
  report_file = std::fopen((work / "acceptance_report.txt").string().c_str(), "w");

  criterion("gradient-oracles", [] {
    const double lm1 = lm_fd(1, 8, 3), lm2 = lm_fd(2, 16, 4), c1 = clt_fd(1, 4, 5), c2 = clt_fd(2, 8, 6);
    const double worst = std::max({lm1, lm2, c1, c2});
    return std::pair{worst <= 1e-4, fmt::format("max rel err lm(1,d8)={:.2e} lm(2,d16)={:.2e} clt(1,d4)={:.2e} "
                                                "clt(2,d8)={:.2e} (tol 1e-4)",
                                                lm1, lm2, c1, c2)};
  });

  criterion("attribution-oracle", [] {
    double worst_edge = 0, worst_complete = 0;
    long edges = 0;
    for (int layers : {1, 2, 3}) {
      auto m = micro_attribution(layers, 40 + layers);
      auto rec = lm::forward<double>(m.lm, m.tokens);
      auto g = attr::build_attribution_graph(m.lm, m.clt, m.tokens, {.top_logits = 3});
      for (const auto& e : g.edges) {
        const double o = oracle::perturbation_weight(m.lm, m.clt, rec, g, e);
        worst_edge = std::max(worst_edge, std::abs(e.weight - o) / std::max(1.0, std::abs(o)));
        ++edges;
      }
      for (int i = 0; i < int(g.nodes.size()); ++i) {
        const auto& n = g.nodes[i];
        if (n.kind != attr::NodeKind::feature && n.kind != attr::NodeKind::logit) continue;
        worst_complete =
            std::max(worst_complete, std::abs(g.completeness_error(i)) / std::max(1.0, std::abs(n.target_value)));
      }
    }
    return std::pair{edges > 0 && worst_edge <= 1e-3 && worst_complete <= 1e-3,
                     fmt::format("{} edges, max edge rel err {:.2e}, max completeness rel err {:.2e} (tol 1e-3)", edges,
                                 worst_edge, worst_complete)};
  });

  criterion("pruning-contract", [] {
    Rng rng(2024);
    double min_node = 1, min_edge = 1;
    int non_minimal = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      auto g = oracle::random_graph(rng);
      auto p = attr::prune_graph(g, 0.8, 0.95);
      std::vector<double> infl;
      double total = 0;
      for (const auto& n : g.nodes)
        if (n.kind != attr::NodeKind::logit) {
          infl.push_back(n.influence);
          total += n.influence;
        }
      double kept = 0;
      int kept_count = 0;
      for (const auto& n : p.nodes)
        if (n.kind != attr::NodeKind::logit) {
          kept += n.influence;
          ++kept_count;
        }
      const double node_share = total > 0 ? kept / total : 1.0;
      min_node = std::min(min_node, node_share);
      min_edge = std::min(min_edge, p.pruning->edge_mass_retained);
      // Minimal prefix: removing the smallest retained node falls below the target.
      double smallest = 1e300;
      for (const auto& n : p.nodes)
        if (n.kind != attr::NodeKind::logit) smallest = std::min(smallest, n.influence);
      if (kept_count > 0 && total > 0 && kept - smallest >= 0.8 * total) ++non_minimal;
    }
    return std::pair{min_node >= 0.8 - 1e-12 && min_edge >= 0.95 - 1e-12 && non_minimal == 0,
                     fmt::format("1000 graphs, min node share {:.4f}, min edge share {:.4f}, non-minimal {}", min_node,
                                 min_edge, non_minimal)};
  });

  criterion("entropy-exactness", [] {
    std::vector<double> one_hot = {0, 0, 1, 0, 0}, uniform(5, 0.2);
    const double h1 = analysis::multilingual_score(one_hot), h5 = analysis::multilingual_score(uniform);
    Rng rng(99);
    int violations = 0;
    double worst_gap = -1e300;
    for (int t = 0; t < 100000; ++t) {
      const int L = 2 + int(rng.index(9));
      std::vector<double> p(L);
      double s = 0;
      for (auto& x : p) {
        x = rng.uniform() < 0.2 ? 0.0 : -std::log(1 - rng.uniform());
        s += x;
      }
      if (s == 0) p[0] = s = 1;
      for (auto& x : p) x /= s;
      const double h = analysis::multilingual_score(p);
      worst_gap = std::max(worst_gap, h - std::log(double(L)));
      if (h > std::log(double(L)) || h < 0) ++violations;
    }
    return std::pair{h1 == 0 && std::abs(h5 - std::log(5.0)) <= 1e-12 && violations == 0,
                     fmt::format("H(one-hot)={}, |H(uniform5)-ln5|={:.1e}, 1e5 random: {} violations, max H-lnL {:.2e}",
                                 h1, std::abs(h5 - std::log(5.0)), violations, worst_gap)};
  });

  // Two fresh demo runs: the first feeds the quality criteria, both feed determinism.
  const fs::path run_a = work / "demo_a", run_b = work / "demo_b";
  double wall_a = -1, wall_b = -1;
  std::string demo_error;
  try {
    wall_a = run_demo(demo_config(config, run_a));
  } catch (const std::exception& e) {
    demo_error = e.what();
  }
  report("demo-pipeline", demo_error.empty(),
         demo_error.empty() ? fmt::format("fresh run wall time {:.1f} min (budget 20 min)", wall_a / 60)
                            : "exception: " + demo_error,
         std::max(0.0, wall_a));

  criterion("clt-quality", [&] {
    auto rows = lines((run_a / "metrics.csv").string());
    bool ok = rows.size() > 1;
    std::string detail;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto f = split(rows[i], ',');
      const double ev = std::stod(f[1]), l0 = std::stod(f[3]);
      ok = ok && ev >= 0.70 && l0 >= 5 && l0 <= 20;
      detail += fmt::format("layer {} EV {:.3f} L0 {:.2f}; ", f[0], ev, l0);
    }
    // EV per layer over the first three evaluations.
    auto hist = lines((run_a / "clt_history.csv").string());
    auto head = split(hist[0], ',');
    const auto col = [&](const std::string& name) {
      return int(std::find(head.begin(), head.end(), name) - head.begin());
    };
    const int c_step = col("step"), c_layer = col("layer"), c_ev = col("explained_variance");
    std::map<int, std::vector<std::pair<long, double>>> ev;
    for (std::size_t i = 1; i < hist.size(); ++i) {
      auto f = split(hist[i], ',');
      ev[std::stoi(f[c_layer])].push_back({std::stol(f[c_step]), std::stod(f[c_ev])});
    }
    for (auto& [layer, series] : ev) {
      bool inc = series.size() >= 3 && series[0].second < series[1].second && series[1].second < series[2].second;
      ok = ok && inc;
      detail += fmt::format("layer {} first evals", layer);
      for (std::size_t k = 0; k < std::min<std::size_t>(3, series.size()); ++k)
        detail += fmt::format(" {:.3f}", series[k].second);
      detail += inc ? " increasing; " : " NOT increasing; ";
    }
    ok = ok && !ev.empty() && wall_a > 0 && wall_a < 20 * 60;
    return std::pair{ok, detail + "(EV >= 0.70, L0 in [5, 20])"};
  });

  criterion("language-swap", [&] {
    auto s = json::parse(read_file((run_a / "swap_summary.json").string()));
    const double frac = s.at("improved_fraction").get<double>();
    const bool noop = s.at("noop_exact").get<bool>();
    return std::pair{s.at("prompts").get<int>() == 20 && frac >= 0.8 && noop,
                     fmt::format("{}/{} prompts improved ({:.0f}%, need 80%), no-op bit-exact {}",
                                 s.at("improved").get<int>(), s.at("prompts").get<int>(), 100 * frac, noop)};
  });

  criterion("tokenizer-balance", [&] {
    auto r = json::parse(read_file((run_a / "tokenizer_report.json").string()));
    const auto& langs = r.at("languages");
    double lo = 1e300, hi = 0, frag_spw = 0, other_max = 0;
    const int frag = json::parse(read_file(config)).at("corpus").value("fragmenting_language", -1);
    std::string detail;
    for (std::size_t i = 0; i < langs.size(); ++i) {
      const double used = langs[i].at("char_mass_used").get<double>();
      const double spw = langs[i].at("subtokens_per_word").get<double>();
      lo = std::min(lo, used);
      hi = std::max(hi, used);
      if (int(i) == frag)
        frag_spw = spw;
      else
        other_max = std::max(other_max, spw);
      detail += fmt::format("{} {:.3f}; ", langs[i].at("language").get<std::string>(), spw);
    }
    const double spread = (hi - lo) / hi;
    return std::pair{frag >= 0 && spread <= 0.01 && frag_spw > other_max,
                     fmt::format("char mass spread {:.4f} (tol 0.01); subtokens/word {}fragmenting {:.3f} vs max other {:.3f}",
                                 spread, detail, frag_spw, other_max)};
  });

  criterion("determinism", [&] {
    wall_b = run_demo(demo_config(config, run_b));
    int differ = 0;
    std::string first;
    const auto files = compared_files(run_a);
    for (const auto& rel : files) {
      const auto a = read_file((run_a / rel).string());
      const auto b = fs::exists(run_b / rel) ? read_file((run_b / rel).string()) : std::string();
      if (a != b) {
        ++differ;
        if (first.empty()) first = rel;
      }
    }
    return std::pair{differ == 0, fmt::format("{} files compared, {} differ{}{} (second run {:.1f} min)", files.size(),
                                              differ, first.empty() ? "" : ", first ", first, wall_b / 60)};
  });

  criterion("mixture-matrix", [&] {
    auto c = demo_config(config, work / "mixture_run");
    fs::remove_all(c.artifact_dir);
    auto runs = pipeline::mixture_matrix(c, [](const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); });
    const double ln_v = std::log(double(c.model.vocab_size));
    bool ok = runs.size() == c.mixture.dominant_shares.size();
    std::set<std::string> digests;
    std::string detail;
    for (const auto& r : runs) {
      digests.insert(r.model_digest);
      bool finite = r.val_loss.size() == c.corpus.languages.size();
      for (double v : r.val_loss) finite = finite && std::isfinite(v) && v < ln_v;
      auto m = json::parse(read_file((fs::path(r.dir) / "manifest.json").string()));
      const auto mixture = m.at("stages").at("gen-corpus").at("config").at("corpus").at("mixture").get<std::vector<double>>();
      const bool mix_ok = mixture.size() == r.mixture.size() &&
                          std::abs(mixture[c.mixture.dominant_language] - r.dominant_share) < 1e-12;
      const bool profile = !r.profile.empty() && fs::exists(fs::path(r.dir) / "entropy_profile.csv");
      ok = ok && finite && mix_ok && profile;
      detail += fmt::format("{:.0f}%: loss", 100 * r.dominant_share);
      for (double v : r.val_loss) detail += fmt::format(" {:.3f}", v);
      detail += " mean entropy by layer";
      for (const auto& lp : r.profile) detail += fmt::format(" {:.3f}", lp.unweighted);
      detail += " (rate-weighted";
      for (const auto& lp : r.profile) detail += fmt::format(" {:.3f}", lp.weighted);
      detail += ")";
      detail += "; ";
    }
    ok = ok && digests.size() == runs.size();
    return std::pair{ok, detail + fmt::format("{} distinct models, ln V = {:.3f}", digests.size(), ln_v)};
  });

  const auto summary = fmt::format("{}: {} criteria failed\n", failures ? "FAIL" : "PASS", failures);
  std::fputs(summary.c_str(), stdout);
  if (report_file) {
    std::fputs(summary.c_str(), report_file);
    std::fclose(report_file);
  }
  return failures ? 1 : 0;
}
