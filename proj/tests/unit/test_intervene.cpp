#include <cmath>

#include <nlohmann/json.hpp>

#include "ct/intervene.hpp"
#include "doctest.h"

using namespace ct;
using namespace ct::intervene;

namespace {

struct Fixture {
  lm::Params<double> lm;
  clt::CltParams<double> clt;
  std::vector<int> tokens;
};

Fixture make_fixture(int layers = 2, std::uint64_t seed = 3) {
  lm::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_ffn = 16;
  c.vocab_size = 15;
  c.context_len = 16;
  c.seed = seed;
  Fixture f;
  f.lm = lm::init_model<float>(c).cast<double>();
  Rng rng(seed + 7);
  for (auto& v : f.lm.values) v += 0.3 * rng.normal();
  clt::CltConfig cc;
  cc.n_layers = layers;
  cc.d_model = 8;
  cc.d_features = 10;
  cc.activation = clt::Activation::relu;
  f.clt = clt::init_clt<double>(cc);
  for (auto& v : f.clt.values) v = 0.4 * rng.normal();
  for (int i = 0; i < 8; ++i) f.tokens.push_back(int(rng.index(15)));
  return f;
}

}  // namespace

TEST_CASE("no-op edits are bit-exact") {
  auto f = make_fixture();
  InterventionSpec empty;
  empty.target_token = 4;
  auto r = run_with_interventions(f.lm, f.clt, f.tokens, empty);
  CHECK(r.baseline_logits == r.edited_logits);
  CHECK(r.baseline_rank == r.edited_rank);
  CHECK(r.baseline_rank >= 1);
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 10; ++i) {
      InterventionSpec s;
      s.edits = {{{l, i}, {}, EditMode::scale, 1.0, {}}};
      CHECK(run_with_interventions(f.lm, f.clt, f.tokens, s).edited_logits == r.baseline_logits);
    }
  CHECK(replacement_logits(f.lm, f.clt, f.tokens) == r.baseline_logits);
}

TEST_CASE("replacement baseline tracks the model") {
  auto f = make_fixture();
  auto rec = lm::forward<double>(f.lm, f.tokens);
  auto base = replacement_logits(f.lm, f.clt, f.tokens);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(base[i] == doctest::Approx(rec.logits[i]).epsilon(1e-10));
}

TEST_CASE("zeroing every feature equals decoding zeros") {
  auto f = make_fixture();
  std::vector<Edit> all;
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 10; ++i) all.push_back({{l, i}, {}, EditMode::zero, 0.0, {}});
  auto edited = replacement_logits(f.lm, f.clt, f.tokens, all);

  // Direct construction: the MLP output is the decoder bias plus the error of
  // the unedited pass, written here with plain loops.
  const int n = int(f.tokens.size()), D = 8, F = 10;
  auto rec = lm::forward<double>(f.lm, f.tokens);
  std::vector<std::vector<double>> err(2, std::vector<double>(n * D));
  for (int k = 0; k < 2; ++k)
    for (int p = 0; p < n; ++p)
      for (int d = 0; d < D; ++d) {
        double mh = f.clt.dec_b(k)[d];
        for (int l = 0; l <= k; ++l)
          for (int i = 0; i < F; ++i) {
            double pre = f.clt.enc_b(l)[i];
            for (int e = 0; e < D; ++e) pre += f.clt.enc_w(l)[i * D + e] * rec.blocks[l].mlp_in[p * D + e];
            mh += std::max(0.0, pre) * f.clt.dec_w(l, k)[i * D + d];
          }
        err[k][p * D + d] = rec.blocks[k].mlp_out[p * D + d] - mh;
      }
  lm::MlpHook<double> hook = [&](int layer, std::span<const double>, std::span<double> out) {
    for (int p = 0; p < n; ++p)
      for (int d = 0; d < D; ++d) out[p * D + d] = f.clt.dec_b(layer)[d] + err[layer][p * D + d];
  };
  auto direct = lm::forward<double>(f.lm, f.tokens, hook).logits;
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(edited[i] == doctest::Approx(direct[i]).epsilon(1e-9));
}

TEST_CASE("edits never reach earlier positions") {
  auto f = make_fixture();
  auto base = replacement_logits(f.lm, f.clt, f.tokens);
  const int V = 15;
  for (int p : {2, 5}) {
    std::vector<Edit> e{{{0, 3}, {p}, EditMode::set, 4.0, {}}, {{1, 1}, {p}, EditMode::add, -2.0, {}}};
    auto ed = replacement_logits(f.lm, f.clt, f.tokens, e);
    for (int i = 0; i < p * V; ++i) CHECK(ed[i] == base[i]);
    bool changed = false;
    for (std::size_t i = p * V; i < ed.size(); ++i) changed |= ed[i] != base[i];
    CHECK(changed);
  }
}

TEST_CASE("additive edits compose") {
  auto f = make_fixture();
  std::vector<Edit> two{{{1, 2}, {3, 6}, EditMode::add, 0.7, {}}, {{1, 2}, {3, 6}, EditMode::add, -1.9, {}}};
  std::vector<Edit> one{{{1, 2}, {3, 6}, EditMode::add, 0.7 - 1.9, {}}};
  auto a = replacement_logits(f.lm, f.clt, f.tokens, two);
  auto b = replacement_logits(f.lm, f.clt, f.tokens, one);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  std::vector<Edit> per{{{1, 2}, {3, 6}, EditMode::add, 0.0, {0.7 - 1.9, 0.7 - 1.9}}};
  CHECK(replacement_logits(f.lm, f.clt, f.tokens, per) == b);
}

TEST_CASE("invalid edits are rejected") {
  auto f = make_fixture();
  auto bad = [&](Edit e) { return replacement_logits(f.lm, f.clt, f.tokens, {e}); };
  CHECK_THROWS_AS(bad({{2, 0}, {}, EditMode::zero, 0, {}}), ValidationError);
  CHECK_THROWS_AS(bad({{0, 10}, {}, EditMode::zero, 0, {}}), ValidationError);
  CHECK_THROWS_AS(bad({{0, 1}, {8}, EditMode::zero, 0, {}}), ValidationError);
  CHECK_THROWS_AS(bad({{0, 1}, {}, EditMode::scale, NAN, {}}), ValidationError);
  CHECK_THROWS_AS(bad({{0, 1}, {1, 2}, EditMode::set, 0, {1.0}}), ValidationError);
  auto other = make_fixture(3);
  CHECK_THROWS_AS(replacement_logits(f.lm, other.clt, f.tokens), ValidationError);
}

TEST_CASE("language swap") {
  auto f = make_fixture();
  std::vector<analysis::LanguageFeature> feats;
  auto lf = [&](int layer, int index, int lang) {
    analysis::LanguageFeature x;
    x.feature = {layer, index};
    x.top_language = lang;
    x.top_probability = 1.0;
    feats.push_back(x);
  };
  lf(1, 0, 0);
  lf(1, 4, 0);
  lf(1, 2, 1);
  lf(0, 5, 1);  // early layer, ignored by default

  SUBCASE("degenerate swap") {
    auto r = language_swap(f.lm, f.clt, f.tokens, 0, 0, f.tokens, 3, feats);
    for (std::size_t i = 0; i < r.edited_logits.size(); ++i)
      CHECK(r.edited_logits[i] == doctest::Approx(r.baseline_logits[i]).epsilon(1e-12));
  }
  SUBCASE("adding with coefficient zero changes nothing") {
    std::vector<int> translated{1, 2, 3};
    SwapOptions opt;
    opt.zero_source = false;
    opt.add_coefficient = 0.0;
    auto r = language_swap(f.lm, f.clt, f.tokens, 0, 1, translated, 3, feats, opt);
    CHECK(r.edited_rank == r.baseline_rank);
  }
  SUBCASE("edits are aligned from the end") {
    std::vector<int> translated{1, 2, 3};
    auto edits = swap_edits(f.lm, f.clt, f.tokens, 0, 1, translated, feats);
    REQUIRE(edits.size() == 3);
    CHECK(edits[0].mode == EditMode::zero);
    CHECK(edits[0].feature == clt::FeatureKey{1, 0});
    CHECK(edits[2].mode == EditMode::add);
    CHECK(edits[2].positions == std::vector<int>{5, 6, 7});
    auto zt = capture_features(f.lm, f.clt, translated);
    CHECK(edits[2].values[2] == zt[1][2 * 10 + 2]);
    SwapOptions early;
    early.first_late_layer = 0;
    CHECK(swap_edits(f.lm, f.clt, f.tokens, 0, 1, translated, feats, early).size() == 4);
  }
  SUBCASE("missing language features are diagnosed") {
    try {
      language_swap(f.lm, f.clt, f.tokens, 0, 3, f.tokens, 3, feats);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("no language features found for language 3") != std::string::npos);
    }
  }
}

TEST_CASE("coefficient sweep") {
  auto f = make_fixture();
  analysis::Cluster up{"up", {{0, 1}, {1, 3}}, {}}, down{"down", {{1, 5}}, {}}, none{"none", {}, {}};
  auto r = coefficient_sweep(f.lm, f.clt, f.tokens, 6, up, down, default_up_range(), default_down_range());
  CHECK(r.cells.size() == 900);
  CHECK(r.cells.front().c_up == 1);
  CHECK(r.cells.front().c_down == -30);
  CHECK(r.cells.back().c_down == -1);
  for (const auto& c : r.cells) CHECK(c.target_rank >= r.cells[r.argmax].target_rank);
  auto again = coefficient_sweep(f.lm, f.clt, f.tokens, 6, up, down, default_up_range(), default_down_range());
  CHECK(again.argmax == r.argmax);
  CHECK(sweep_csv(again) == sweep_csv(r));
  CHECK(sweep_csv(r).rfind("c_up,c_down,target_rank,top_token\n1,-30,", 0) == 0);

  InterventionSpec empty;
  empty.target_token = 6;
  auto base = run_with_interventions(f.lm, f.clt, f.tokens, empty);
  auto unit = coefficient_sweep(f.lm, f.clt, f.tokens, 6, up, none, {1.0}, {-4.0});
  CHECK(unit.cells[0].target_rank == base.baseline_rank);
  CHECK(unit.cells[0].top_token == base.baseline_top[0].token);
  CHECK_THROWS_AS(coefficient_sweep(f.lm, f.clt, f.tokens, 6, up, down, {}, {-1.0}), ValidationError);
}

TEST_CASE("spec and result JSON") {
  InterventionSpec s;
  s.edits = {{{1, 2}, {0, 3}, EditMode::add, 0.0, {1.5, -2}}, {{0, 7}, {}, EditMode::scale, 3, {}}};
  s.target_token = 9;
  nlohmann::json j = s;
  auto back = j.get<InterventionSpec>();
  CHECK(nlohmann::json(back) == j);
  auto scale = nlohmann::json::parse(R"({"layer":0,"index":1,"mode":"scale"})").get<Edit>();
  CHECK(scale.value == 1.0);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"layer":0,"index":1,"mode":"boost"})").get<Edit>(), ValidationError);

  auto f = make_fixture();
  InterventionSpec empty;
  empty.target_token = 2;
  auto r = result_json(run_with_interventions(f.lm, f.clt, f.tokens, empty));
  CHECK(r["baseline"] == r["edited"]);
  CHECK(r["rank_delta"] == 0);
  CHECK(token_rank(std::vector<double>{1, 3, 3, 0}, 2) == 2);
  CHECK(token_rank(std::vector<double>{1, 3, 3, 0}, 3) == 4);
}
