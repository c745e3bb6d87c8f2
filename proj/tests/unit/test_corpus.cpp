#include <filesystem>
#include <set>

#include "ct/corpus.hpp"
#include "doctest.h"

using namespace ct;
using namespace ct::corpus;

namespace {
std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ct_corpus_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<int> per_language(const std::vector<LabeledSequence>& c, int L) {
  std::vector<int> n(L, 0);
  for (const auto& s : c) n[s.language]++;
  return n;
}
}  // namespace

TEST_CASE("dominant mixture yields 900 sequences of L0") {
  CorpusSpec spec;
  spec.mixture = {0.9, 0.025, 0.025, 0.025, 0.025};
  spec.seed = 7;
  spec.n_sequences = 1000;
  auto c = generate_synthetic_corpus(spec);
  auto n = per_language(c, 5);
  CHECK(n[0] == 900);
  for (int l = 1; l < 5; ++l) CHECK(n[l] == 25);
}

TEST_CASE("balanced mixture gives 200 per language") {
  CorpusSpec spec;
  spec.n_sequences = 1000;
  auto n = per_language(generate_synthetic_corpus(spec), 5);
  for (int l = 0; l < 5; ++l) CHECK(n[l] == 200);
}

TEST_CASE("mixture counts stay within one sequence of the target") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 2 + int(rng.index(6));
    std::vector<double> mix(L);
    double s = 0;
    for (auto& m : mix) s += (m = rng.uniform() + 1e-3);
    for (auto& m : mix) m /= s;
    const int n = int(rng.index(3000));
    auto counts = mixture_counts(mix, n);
    int total = 0;
    for (int l = 0; l < L; ++l) {
      CHECK(std::abs(counts[l] - mix[l] * n) <= 1.0);
      total += counts[l];
    }
    CHECK(total == n);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  CorpusSpec spec;
  spec.seed = 42;
  spec.n_sequences = 300;
  auto a = generate_synthetic_corpus(spec), b = generate_synthetic_corpus(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].text == b[i].text);
    CHECK(a[i].language == b[i].language);
  }
  spec.seed = 43;
  auto c = generate_synthetic_corpus(spec);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].text != c[i].text;
  CHECK(differs);
}

TEST_CASE("lexicons are disjoint and meanings are parallel") {
  CorpusSpec spec;
  spec.fragmenting_language = 4;
  World w(spec);
  std::set<std::string> all;
  std::size_t total = 0;
  for (int l = 0; l < w.n_languages(); ++l) {
    total += w.lexicon(l).size();
    all.insert(w.lexicon(l).begin(), w.lexicon(l).end());
  }
  CHECK(all.size() == total);

  Rng rng(5);
  auto m = w.sample_sequence(3, rng);
  std::size_t words0 = split_words(w.render(m, 0)).size();
  for (int l = 1; l < w.n_languages(); ++l) CHECK(split_words(w.render(m, l)).size() == words0);
}

TEST_CASE("fragmenting language uses a separate script") {
  CorpusSpec spec;
  spec.fragmenting_language = 2;
  World w(spec);
  for (const auto& word : w.lexicon(2)) CHECK(static_cast<unsigned char>(word[0]) >= 0x80);
  for (const auto& word : w.lexicon(0)) CHECK(static_cast<unsigned char>(word[0]) < 0x80);
}

TEST_CASE("invalid mixtures are configuration errors") {
  CorpusSpec spec;
  spec.mixture = {0.5, 0.5, 0.5, 0.0, 0.0};
  CHECK_THROWS_AS(generate_synthetic_corpus(spec), ConfigError);
  spec.mixture = {0.2, 0.2, 0.2, 0.2};
  CHECK_THROWS_AS(generate_synthetic_corpus(spec), ConfigError);
  spec = CorpusSpec{};
  spec.lexicon_size = 10;
  CHECK_THROWS_AS(generate_synthetic_corpus(spec), ConfigError);
}

TEST_CASE("ingest reads one sequence per non-blank line") {
  auto dir = temp_dir("ingest");
  write_file((dir / "A.txt").string(), "one\ntwo\nthree\n");
  write_file((dir / "B.txt").string(), "uno\n\n   \ndos\ntres");
  auto c = ingest_corpus_dir(dir.string(), {"A", "B"});
  CHECK(c.size() == 6);
  CHECK(per_language(c, 2) == std::vector<int>{3, 3});
  CHECK(c[3].text == "uno");
}

TEST_CASE("ingest error contracts") {
  auto dir = temp_dir("ingest_err");
  write_file((dir / "A.txt").string(), "ok\n");
  SUBCASE("missing file") {
    CHECK_THROWS_AS(ingest_corpus_dir(dir.string(), {"A", "Missing"}), IoError);
  }
  SUBCASE("empty file names the language") {
    write_file((dir / "E.txt").string(), "\n\n");
    try {
      ingest_corpus_dir(dir.string(), {"A", "E"});
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("'E'") != std::string::npos);
    }
  }
  SUBCASE("bad utf-8 reports byte offset") {
    write_file((dir / "B.txt").string(), std::string("ab\ncd\xff\n"));
    try {
      ingest_corpus_dir(dir.string(), {"A", "B"});
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("byte offset 5") != std::string::npos);
    }
  }
}

TEST_CASE("corpus directory round trip") {
  CorpusSpec spec;
  spec.n_sequences = 50;
  auto c = generate_synthetic_corpus(spec);
  auto dir = temp_dir("roundtrip");
  write_corpus_dir(dir.string(), c, spec.languages);
  auto back = ingest_corpus_dir(dir.string(), spec.languages);
  CHECK(back.size() == c.size());
}

TEST_CASE("sampled meanings reference valid concepts") {
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    CorpusSpec spec;
    spec.seed = seed;
    World w(spec);
    Rng rng(seed + 100);
    for (int i = 0; i < 2000; ++i) {
      auto m = w.sample_sentence(rng);
      CHECK(m.back() == -1);
      for (std::size_t k = 0; k + 1 < m.size(); ++k) {
        REQUIRE(m[k] >= 0);
        REQUIRE(m[k] < w.n_concepts());
      }
    }
  }
}

TEST_CASE("antonym frame pairs an adjective with its partner") {
  CorpusSpec spec;
  spec.templates = 1;
  World w(spec);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    auto m = w.sample_sentence(rng);
    REQUIRE(m.size() == 7);
    CHECK(w.word_class(m[3]) == WordClass::adjective);
    CHECK(w.word_class(m[5]) == WordClass::adjective);
    CHECK(m[3] != m[5]);
    CHECK(std::abs(m[3] - m[5]) == 1);
  }
}
