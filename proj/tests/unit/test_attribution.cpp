#include <algorithm>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "ct/attribution.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace ct;
using namespace ct::attr;
using namespace ct::oracle;

namespace {

struct Fixture {
  lm::Params<double> lm;
  clt::CltParams<double> clt;
  std::vector<int> tokens;
};

Fixture make_fixture(int layers, std::uint64_t seed, int n_tokens = 7) {
  lm::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_ffn = 16;
  c.vocab_size = 13;
  c.context_len = 16;
  c.seed = seed;
  Fixture f;
  f.lm = lm::init_model<float>(c).cast<double>();
  Rng rng(seed + 100);
  for (auto& v : f.lm.values) v += 0.3 * rng.normal();
  clt::CltConfig cc;
  cc.n_layers = layers;
  cc.d_model = 8;
  cc.d_features = 12;
  cc.activation = clt::Activation::jumprelu;
  f.clt = clt::init_clt<double>(cc);
  for (auto& v : f.clt.values) v = 0.4 * rng.normal();
  for (int l = 0; l < layers; ++l)
    for (int n = 0; n < 12; ++n) f.clt.log_theta(l)[n] = std::log(0.05);
  for (int i = 0; i < n_tokens; ++i) f.tokens.push_back(int(rng.index(13)));
  return f;
}

int find_node(const AttributionGraph& g, const std::string& id) {
  for (int i = 0; i < int(g.nodes.size()); ++i)
    if (g.nodes[i].id() == id) return i;
  return -1;
}

}  // namespace

TEST_CASE("frozen oracle reproduces the recorded pass") {
  auto f = make_fixture(2, 1);
  auto rec = lm::forward<double>(f.lm, f.tokens);
  FrozenOracle o{f.lm, rec};
  auto out = o.run(rec.embed, recorded_mlp_out(rec));
  for (int l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < out.h[l].size(); ++i) CHECK(out.h[l][i] == doctest::Approx(rec.blocks[l].mlp_in[i]).epsilon(1e-10));
  for (std::size_t i = 0; i < out.final_ln.size(); ++i) CHECK(out.final_ln[i] == doctest::Approx(rec.lnf_out[i]).epsilon(1e-10));
}

TEST_CASE("edge weights match frozen perturbations") {
  for (int layers : {1, 2, 3}) {
    auto f = make_fixture(layers, 10 + layers);
    auto rec = lm::forward<double>(f.lm, f.tokens);
    auto g = build_attribution_graph(f.lm, f.clt, f.tokens);
    int features = 0;
    for (const auto& nd : g.nodes) features += nd.kind == NodeKind::feature;
    CHECK(features > 5);
    for (const auto& e : g.edges) {
      const double oracle = perturbation_weight(f.lm, f.clt, rec, g, e);
      CHECK(std::abs(e.weight - oracle) <= 1e-3 * std::max(1.0, std::abs(oracle)));
    }
  }
}

TEST_CASE("targets are complete") {
  for (int layers : {1, 2, 3}) {
    auto f = make_fixture(layers, 20 + layers, 9);
    auto g = build_attribution_graph(f.lm, f.clt, f.tokens, {.top_logits = 4});
    auto rec = lm::forward<double>(f.lm, f.tokens);
    FrozenOracle o{f.lm, rec};
    const auto base = o.run(rec.embed, recorded_mlp_out(rec));
    int targets = 0;
    for (int i = 0; i < int(g.nodes.size()); ++i) {
      const auto& nd = g.nodes[i];
      if (nd.kind != NodeKind::feature && nd.kind != NodeKind::logit) continue;
      ++targets;
      CHECK(nd.target_value == doctest::Approx(o.target(base, f.clt, nd)).epsilon(1e-9));
      CHECK(std::abs(g.completeness_error(i)) <= 1e-3 * std::max(1.0, std::abs(nd.target_value)));
    }
    CHECK(targets > 4);
  }
}

TEST_CASE("edges respect causality") {
  auto f = make_fixture(3, 31, 10);
  auto g = build_attribution_graph(f.lm, f.clt, f.tokens, {.top_logits = 3, .target_position = 6});
  for (const auto& e : g.edges) {
    const Node& s = g.nodes[e.src];
    const Node& t = g.nodes[e.dst];
    CHECK(s.position <= t.position);
    CHECK(s.layer < t.layer);
    CHECK(t.kind != NodeKind::embedding);
    CHECK(t.kind != NodeKind::error);
  }
  for (const auto& nd : g.nodes) CHECK(nd.position <= 6);
}

TEST_CASE("linearized propagation is linear and zero upstream") {
  auto f = make_fixture(2, 41);
  auto rec = lm::forward<double>(f.lm, f.tokens);
  Rng rng(3);
  std::vector<double> a(8), b(8), ab(8);
  for (int d = 0; d < 8; ++d) {
    a[d] = rng.normal();
    b[d] = rng.normal();
    ab[d] = 2 * a[d] - 3 * b[d];
  }
  auto pa = linearized_propagate(f.lm, rec, 0, 2, a, 4, 5);
  auto pb = linearized_propagate(f.lm, rec, 0, 2, b, 4, 5);
  auto pab = linearized_propagate(f.lm, rec, 0, 2, ab, 4, 5);
  for (int d = 0; d < 8; ++d) CHECK(std::abs(pab[d] - (2 * pa[d] - 3 * pb[d])) < 1e-6);
  double norm = 0;
  for (double x : pa) norm += x * x;
  CHECK(norm > 0);
  for (double x : linearized_propagate(f.lm, rec, 0, 5, a, 4, 2)) CHECK(x == 0);
  for (double x : linearized_propagate(f.lm, rec, 2, 1, a, 1, 3)) CHECK(x == 0);
  CHECK_THROWS_AS(linearized_propagate(f.lm, rec, 0, 0, a, 2, 0), ValidationError);
}

TEST_CASE("linearized propagation matches the frozen oracle") {
  auto f = make_fixture(2, 43);
  auto rec = lm::forward<double>(f.lm, f.tokens);
  FrozenOracle o{f.lm, rec};
  auto m = recorded_mlp_out(rec);
  const auto base = o.run(rec.embed, m);
  std::vector<double> v(8);
  Rng rng(4);
  for (auto& x : v) x = rng.normal();
  // Inject after block 0's MLP at position 1, read at LN2 of block 1, position 4.
  for (int d = 0; d < 8; ++d) m[0][8 + d] += v[d];
  const auto pert = o.run(rec.embed, m);
  auto lin = linearized_propagate(f.lm, rec, slot_after_mlp(0), 1, v, slot_mlp_input(1), 4);
  for (int d = 0; d < 8; ++d) CHECK(lin[d] == doctest::Approx(pert.h[1][4 * 8 + d] - base.h[1][4 * 8 + d]).epsilon(1e-9));
}

TEST_CASE("mismatched transcoder is rejected") {
  auto f = make_fixture(2, 1);
  auto g = make_fixture(3, 1);
  CHECK_THROWS_AS(build_attribution_graph(f.lm, g.clt, f.tokens), ValidationError);
  CHECK_THROWS_AS(build_attribution_graph(f.lm, f.clt, f.tokens, {.target_position = 40}), ValidationError);
}


TEST_CASE("influence on hand-built graphs") {
  SUBCASE("chain") {
    AttributionGraph g;
    g.nodes = {mk(NodeKind::embedding, -1, 0, 0), mk(NodeKind::feature, 0, 0, 0), mk(NodeKind::logit, 1, 0, 0, 0.3)};
    g.edges = {{0, 1, 2.0, 2.0}, {1, 2, -0.5, -0.5}};
    compute_influence(g);
    CHECK(g.nodes[1].influence == doctest::Approx(1.0));
    CHECK(g.nodes[0].influence == doctest::Approx(1.0));
  }
  SUBCASE("parallel paths") {
    AttributionGraph g;
    g.nodes = {mk(NodeKind::embedding, -1, 0, 0), mk(NodeKind::feature, 0, 0, 0), mk(NodeKind::feature, 0, 0, 1),
               mk(NodeKind::logit, 1, 0, 0)};
    g.edges = {{0, 1, 1.0, 1.0}, {0, 2, 1.0, 1.0}, {1, 3, 1.0, 1.0}, {2, 3, 1.0, 1.0}};
    compute_influence(g);
    CHECK(g.nodes[1].influence == doctest::Approx(0.5));
    CHECK(g.nodes[2].influence == doctest::Approx(0.5));
    CHECK(g.nodes[0].influence == doctest::Approx(1.0));
  }
  SUBCASE("no path") {
    AttributionGraph g;
    g.nodes = {mk(NodeKind::embedding, -1, 0, 0), mk(NodeKind::feature, 0, 0, 0), mk(NodeKind::logit, 1, 0, 0)};
    g.edges = {{0, 2, 1.0, 1.0}};
    compute_influence(g);
    CHECK(g.nodes[1].influence == 0);
    CHECK(g.nodes[0].influence == doctest::Approx(1.0));
  }
  SUBCASE("logit weights are renormalized probabilities") {
    AttributionGraph g;
    g.nodes = {mk(NodeKind::feature, 0, 0, 0), mk(NodeKind::logit, 1, 0, 0, 0.3), mk(NodeKind::logit, 1, 0, 1, 0.1)};
    g.edges = {{0, 1, 1.0, 1.0}};
    compute_influence(g);
    CHECK(g.nodes[1].influence == doctest::Approx(0.75));
    CHECK(g.nodes[0].influence == doctest::Approx(0.75));
  }
}


TEST_CASE("pruning keeps minimal prefixes on random graphs") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    auto g = random_graph(rng);
    auto p = prune_graph(g);
    REQUIRE(p.pruning);
    const auto& r = *p.pruning;
    CHECK(r.retained_mass >= 0.80 - 1e-12);
    CHECK(r.edge_mass_retained >= 0.95 - 1e-12);

    // Minimality: dropping the last node of the prefix falls below the target.
    std::vector<const Node*> cand;
    double total = 0;
    for (const auto& n : g.nodes)
      if (n.kind != NodeKind::logit) {
        cand.push_back(&n);
        total += n.influence;
      }
    std::stable_sort(cand.begin(), cand.end(), [](const Node* a, const Node* b) { return influence_order(*a, *b); });
    double cum = 0;
    int prefix = 0;
    while (prefix < int(cand.size()) && cum < 0.80 * total) cum += cand[prefix++]->influence;
    if (prefix > 0) CHECK(cum - cand[prefix - 1]->influence < 0.80 * total);
    CHECK(r.retained_mass == doctest::Approx(total > 0 ? cum / total : 1.0));
    CHECK(p.nodes.size() == std::size_t(prefix) + (g.nodes.size() - cand.size()));
    double final_mass = 0;
    for (const auto& n : p.nodes)
      if (n.kind != NodeKind::logit) final_mass += n.influence;
    CHECK(final_mass == doctest::Approx(r.retained_mass * total));

    std::set<std::string> ids;
    for (const auto& n : p.nodes) ids.insert(n.id());
    for (const auto& n : g.nodes)
      if (n.kind == NodeKind::logit) CHECK(ids.count(n.id()));
  }
}

TEST_CASE("pruning at full keep is the identity") {
  Rng rng(78);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = random_graph(rng);
    auto p = prune_graph(g, 1.0, 1.0);
    g.pruning.reset();
    p.pruning.reset();
    CHECK(graph_to_json(g).dump() == graph_to_json(p).dump());
  }
  CHECK_THROWS_AS(prune_graph(random_graph(rng), 1.5, 0.9), ConfigError);
}

TEST_CASE("graph JSON round trips and is deterministic") {
  auto f = make_fixture(2, 51);
  auto g = prune_graph(build_attribution_graph(f.lm, f.clt, f.tokens));
  g.prompt = "a b c";
  std::map<clt::FeatureKey, NodeAnnotation> ann;
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::feature) ann[{n.layer, n.index}] = {{0.5, 0.5}, std::log(2.0)};
  auto j = graph_to_json(g, ann);
  CHECK(j["version"] == kGraphSchemaVersion);
  auto back = graph_from_json(j);
  CHECK(graph_to_json(back, ann).dump() == j.dump());
  auto again = prune_graph(build_attribution_graph(f.lm, f.clt, f.tokens));
  again.prompt = "a b c";
  CHECK(graph_to_json(again, ann).dump() == j.dump());
  CHECK(find_node(g, "logit:" + std::to_string(f.tokens.size() - 1) + ":" + std::to_string(g.nodes.back().index)) >= 0);
  auto bad = j;
  bad["edges"][0]["src"] = "feat:9:9:9";
  CHECK_THROWS_AS(graph_from_json(bad), ValidationError);
  bad = j;
  bad["version"] = 99;
  CHECK_THROWS_AS(graph_from_json(bad), ValidationError);
}
