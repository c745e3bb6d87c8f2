#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ct/activations.hpp"
#include "doctest.h"

using namespace ct;
using namespace ct::act;

namespace {
lm::ModelConfig tiny() {
  lm::ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.d_ffn = 16;
  c.vocab_size = 20;
  c.context_len = 16;
  c.seed = 1;
  return c;
}

std::vector<corpus::LabeledSequence> random_corpus(int per_language, int L, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<corpus::LabeledSequence> c;
  for (int i = 0; i < per_language * L; ++i) {
    corpus::LabeledSequence s;
    s.language = i % L;
    s.tokens.resize(10 + rng.index(20));
    for (auto& t : s.tokens) t = 4 + int(rng.index(16));
    c.push_back(s);
  }
  return c;
}

const std::vector<std::string> kNames{"A", "B", "C"};

ActivationStore small_store(std::uint64_t seed = 3) {
  auto p = lm::init_model<float>(tiny());
  StoreSpec spec;
  spec.n_sequences = 31;
  spec.seed = seed;
  return build_activation_store(p, random_corpus(30, 3, 2), kNames, 0, spec);
}
}  // namespace

TEST_CASE("store is uniform over languages") {
  auto st = small_store();
  auto n = st.per_language_counts();
  CHECK(*std::max_element(n.begin(), n.end()) - *std::min_element(n.begin(), n.end()) <= 1);
  CHECK(st.n_sequences() == 31);
  CHECK(st.n_tokens() == 31 * 16);
  for (int s = 0; s < st.n_sequences(); ++s) CHECK(st.sequence(s)[0] == 0);
}

TEST_CASE("store build is deterministic") {
  CHECK(small_store().digest() == small_store().digest());
  CHECK(small_store(3).digest() != small_store(4).digest());
}

TEST_CASE("stored pairs satisfy m = FFN(h)") {
  auto p = lm::init_model<float>(tiny());
  Rng perturb(5);
  for (auto& v : p.values) v += 0.05f * float(perturb.normal());
  StoreSpec spec;
  spec.n_sequences = 12;
  auto st = build_activation_store(p, random_corpus(10, 3, 2), kNames, 0, spec);
  const int D = 8, F = 16;
  Rng pick(6);
  for (int trial = 0; trial < 20; ++trial) {
    const long t = long(pick.index(st.n_tokens()));
    for (int l = 0; l < 2; ++l) {
      const auto& b = p.layout.blocks[l];
      for (int o = 0; o < D; ++o) {
        double m = p.values[b.b_proj + o];
        for (int f = 0; f < F; ++f) {
          double pre = p.values[b.b_fc + f];
          for (int i = 0; i < D; ++i) pre += double(p.values[b.w_fc + f * D + i]) * st.h[l][t * D + i];
          const double g = 0.5 * pre * (1 + std::tanh(std::sqrt(2 / M_PI) * (pre + 0.044715 * pre * pre * pre)));
          m += double(p.values[b.w_proj + o * F + f]) * g;
        }
        CHECK(std::abs(m - st.m[l][t * D + o]) < 1e-5);
      }
    }
  }
}

TEST_CASE("short corpora report the shortfall per language") {
  auto p = lm::init_model<float>(tiny());
  auto corpus = random_corpus(5, 3, 2);
  StoreSpec spec;
  spec.n_sequences = 30;
  try {
    build_activation_store(p, corpus, kNames, 0, spec);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("A: need 10, have ") != std::string::npos);
    CHECK(what.find("C: need 10") != std::string::npos);
  }
}

TEST_CASE("store round trips through shards") {
  auto st = small_store();
  auto dir = (std::filesystem::temp_directory_path() / "ct_store_rt").string();
  std::filesystem::remove_all(dir);
  save_store(st, dir, 7);
  CHECK(std::filesystem::exists(dir + "/shard_0004.ctns"));
  auto back = load_store(dir);
  CHECK(back.digest() == st.digest());
  CHECK(back.per_language_counts() == st.per_language_counts());
  CHECK_THROWS_AS(load_store(dir + "/missing"), IoError);
}

TEST_CASE("token batches cover every token once") {
  auto st = small_store();
  auto ids = token_range(st, 0, st.n_sequences());
  auto batches = token_batches(ids, 100, 9, 0);
  std::vector<long> all;
  for (const auto& b : batches) {
    CHECK(b.size() <= 100);
    all.insert(all.end(), b.begin(), b.end());
  }
  std::sort(all.begin(), all.end());
  CHECK(all == ids);
  CHECK(token_batches(ids, 100, 9, 1) == token_batches(ids, 100, 9, 1));
  CHECK(token_batches(ids, 100, 9, 1) != batches);
  // Oversized batch warns and yields a single short batch.
  CHECK(token_batches(ids, 1024, 9, 0).size() == 1);
}

TEST_CASE("gathered pairs copy the right rows") {
  auto st = small_store();
  std::vector<long> ids{5, 17, 200};
  auto b = gather_pairs(st, ids);
  CHECK(b.n == 3);
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 3; ++i)
      for (int d = 0; d < 8; ++d) {
        CHECK(b.h[l][i * 8 + d] == st.h[l][ids[i] * 8 + d]);
        CHECK(b.m[l][i * 8 + d] == st.m[l][ids[i] * 8 + d]);
      }
}
