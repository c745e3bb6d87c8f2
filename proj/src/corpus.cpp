#include "ct/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ct/utf8.hpp"

namespace ct::corpus {

namespace {

// Function-word concept ids.
enum Fn { kThe, kA, kAnd, kIs, kOf, kOpposite, kVery, kIn, kTo, kThen, kNumFunction };

constexpr std::string_view kConsonants = "bcdfghjklmnpqrstvwxz";
constexpr std::string_view kVowels = "aeiouy";

// Letters of the Arabic block, used for the fragmenting language.
std::vector<char32_t> fragment_alphabet() {
  std::vector<char32_t> a;
  for (char32_t c = 0x0628; c <= 0x063A; ++c) a.push_back(c);
  for (char32_t c = 0x0641; c <= 0x064A; ++c) a.push_back(c);
  return a;
}

struct WordMaker {
  std::string consonants;
  std::string vowels;
  bool fragmenting = false;

  std::string syllable(Rng& rng) const {
    std::string s;
    s.push_back(consonants[rng.index(consonants.size())]);
    s.push_back(vowels[rng.index(vowels.size())]);
    return s;
  }

  std::string make(bool function_word, int attempt, Rng& rng) const {
    if (fragmenting) {
      static const auto alpha = fragment_alphabet();
      const int len = function_word ? 3 + int(rng.index(2)) : 6 + int(rng.index(4));
      std::u32string w;
      for (int i = 0; i < len + attempt / 40; ++i) w.push_back(alpha[rng.index(alpha.size())]);
      return utf8::encode(w);
    }
    const int syl = (function_word ? 1 : 2 + int(rng.index(2))) + attempt / 40;
    std::string w;
    for (int i = 0; i < syl; ++i) w += syllable(rng);
    return w;
  }
};

WordMaker maker_for(int regular_index, bool fragmenting) {
  WordMaker m;
  m.fragmenting = fragmenting;
  const int nc = int(kConsonants.size());
  for (int j = 0; j < 6; ++j) m.consonants.push_back(kConsonants[(regular_index * 5 + j) % nc]);
  const int nv = int(kVowels.size());
  for (int j = 0; j < 3; ++j) m.vowels.push_back(kVowels[(regular_index * 2 + j) % nv]);
  return m;
}

}  // namespace

void CorpusSpec::validate() const {
  if (languages.size() < 2) throw ConfigError("corpus needs at least 2 languages");
  if (mixture.size() != languages.size())
    throw ConfigError(fmt::format("mixture has {} entries for {} languages", mixture.size(),
                                  languages.size()));
  double sum = 0;
  for (double f : mixture) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError(fmt::format("mixture fraction {} outside [0,1]", f));
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError(fmt::format("mixture fractions sum to {:.12f}, expected 1", sum));
  if (n_sequences < 0) throw ConfigError("n_sequences must be non-negative");
  if (templates < 1) throw ConfigError("templates must be >= 1");
  if (lexicon_size < 40)
    throw ConfigError(fmt::format("lexicon_size {} below template slot demand (40)", lexicon_size));
  if (sentences_per_sequence < 1) throw ConfigError("sentences_per_sequence must be >= 1");
  if (fragmenting_language && (*fragmenting_language < 0 || *fragmenting_language >= n_languages()))
    throw ConfigError("fragmenting_language out of range");
  std::set<std::string> names(languages.begin(), languages.end());
  if (names.size() != languages.size()) throw ConfigError("duplicate language names");
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = nlohmann::json{{"languages", s.languages},
                     {"mixture", s.mixture},
                     {"n_sequences", s.n_sequences},
                     {"templates", s.templates},
                     {"lexicon_size", s.lexicon_size},
                     {"sentences_per_sequence", s.sentences_per_sequence},
                     {"seed", s.seed},
                     {"stream", s.stream}};
  j["fragmenting_language"] =
      s.fragmenting_language ? nlohmann::json(*s.fragmenting_language) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  CorpusSpec d;
  s.languages = j.value("languages", d.languages);
  s.mixture = j.value("mixture", std::vector<double>(s.languages.size(), 1.0 / s.languages.size()));
  s.n_sequences = j.value("n_sequences", d.n_sequences);
  s.templates = j.value("templates", d.templates);
  s.lexicon_size = j.value("lexicon_size", d.lexicon_size);
  s.sentences_per_sequence = j.value("sentences_per_sequence", d.sentences_per_sequence);
  s.seed = j.value("seed", d.seed);
  s.stream = j.value("stream", d.stream);
  if (j.contains("fragmenting_language") && !j["fragmenting_language"].is_null())
    s.fragmenting_language = j["fragmenting_language"].get<int>();
  else
    s.fragmenting_language.reset();
}

World::World(const CorpusSpec& spec) : names_(spec.languages), fragmenting_(spec.fragmenting_language) {
  spec.validate();
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x5157);

  // Concept inventory.
  for (int i = 0; i < kNumFunction; ++i) classes_.push_back(WordClass::function);
  const int rest = spec.lexicon_size - kNumFunction;
  const int n_series = std::max(1, int(rest * 0.15) / series_len_);
  int n_adj = std::max(4, int(rest * 0.2) / 2 * 2);
  const int n_verb = std::max(4, int(rest * 0.2));
  const int left = rest - n_series * series_len_ - n_adj - n_verb;
  const int n_agent = left / 2;
  const int n_object = left - n_agent;
  auto add = [&](WordClass c, int n) {
    for (int i = 0; i < n; ++i) classes_.push_back(c);
  };
  add(WordClass::agent, n_agent);
  add(WordClass::object, n_object);
  add(WordClass::verb, n_verb);
  add(WordClass::adjective, n_adj);
  add(WordClass::series, n_series * series_len_);
  for (int c = 0; c < int(classes_.size()); ++c) by_class_[classes_[c]].push_back(c);

  // Lexicons; words are unique across every language.
  std::set<std::string> used;
  int regular = 0;
  for (int l = 0; l < spec.n_languages(); ++l) {
    const bool frag = spec.fragmenting_language && *spec.fragmenting_language == l;
    const WordMaker maker = maker_for(frag ? 0 : regular++, frag);
    std::vector<std::string> lex;
    for (int c = 0; c < int(classes_.size()); ++c) {
      const bool fn = classes_[c] == WordClass::function;
      for (int attempt = 0;; ++attempt) {
        std::string w = maker.make(fn, attempt, rng);
        if (used.insert(w).second) {
          lex.push_back(std::move(w));
          break;
        }
      }
    }
    lexicons_.push_back(std::move(lex));
  }

  // Templates: three relational frames, then seeded narrative frames.
  using C = WordClass;
  std::vector<std::vector<Slot>> base = {
      {{C::function, kThe}, {C::function, kOpposite}, {C::function, kOf}, {C::adjective},
       {C::function, kIs}, {C::adjective, -1, 1}},
      {{C::series}, {C::series, -1, 2}, {C::series, -1, 2}, {C::series, -1, 2}},
      {{C::function, kThe}, {C::agent}, {C::function, kIs}, {C::function, kVery}, {C::adjective}},
  };
  for (int t = 0; t < std::min<int>(spec.templates, int(base.size())); ++t) templates_.push_back(base[t]);
  while (int(templates_.size()) < spec.templates) {
    std::vector<Slot> t;
    if (rng.index(2)) t.push_back({C::function, kThe});
    if (rng.index(2)) t.push_back({C::adjective});
    t.push_back({C::agent});
    t.push_back({C::verb});
    t.push_back({C::function, rng.index(2) ? kThe : kA});
    if (rng.index(3) == 0) t.push_back({C::adjective});
    t.push_back({C::object});
    switch (rng.index(3)) {
      case 0:
        t.push_back({C::function, kIn});
        t.push_back({C::function, kThe});
        t.push_back({C::object});
        break;
      case 1:
        t.push_back({C::function, kAnd});
        t.push_back({C::function, kThen});
        t.push_back({C::verb});
        t.push_back({C::function, kTo});
        t.push_back({C::object});
        break;
      default:
        break;
    }
    templates_.push_back(std::move(t));
  }
}

Meaning World::sample_sentence(Rng& rng) const {
  const auto& t = templates_[rng.index(templates_.size())];
  Meaning m;
  for (const Slot& s : t) {
    if (s.fixed >= 0) {
      m.push_back(s.fixed);
      continue;
    }
    const auto& pool = by_class_.at(s.cls);
    if (s.relation == 1) {
      // Adjectives come in antonym pairs (2i, 2i+1) within the pool.
      auto it = std::find_if(m.rbegin(), m.rend(),
                             [&](int c) { return c >= 0 && classes_[c] == WordClass::adjective; });
      if (it == m.rend()) throw Error(ErrorKind::validation, "antonym slot without a preceding adjective");
      const int prev = *it;
      const int k = int(std::find(pool.begin(), pool.end(), prev) - pool.begin());
      m.push_back(pool[k ^ 1]);
    } else if (s.relation == 2) {
      m.push_back(m.back() + 1);
    } else if (s.cls == WordClass::series) {
      // Leave room for the following items of the same series.
      int run = 0;
      for (const Slot& o : t)
        if (o.cls == WordClass::series) ++run;
      const int n_series = int(pool.size()) / series_len_;
      const int series = int(rng.index(n_series));
      const int start = int(rng.index(series_len_ - run + 1));
      m.push_back(pool[series * series_len_ + start]);
    } else {
      m.push_back(pool[rng.index(pool.size())]);
    }
  }
  m.push_back(-1);
  return m;
}

Meaning World::sample_sequence(int sentences, Rng& rng) const {
  Meaning m;
  for (int i = 0; i < sentences; ++i) {
    Meaning s = sample_sentence(rng);
    m.insert(m.end(), s.begin(), s.end());
  }
  return m;
}

std::string World::render(const Meaning& m, int language) const {
  std::string out;
  for (int c : m) {
    if (!out.empty()) out.push_back(' ');
    out += c < 0 ? std::string(".") : lexicons_[language][c];
  }
  return out;
}

std::vector<int> mixture_counts(const std::vector<double>& mixture, int n) {
  std::vector<int> counts(mixture.size());
  std::vector<std::pair<double, int>> rem;
  int total = 0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    const double exact = mixture[i] * n;
    counts[i] = int(std::floor(exact + 1e-9));
    total += counts[i];
    rem.push_back({exact - counts[i], int(i)});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (int k = 0; total < n; ++k, ++total) counts[rem[k % rem.size()].second]++;
  return counts;
}

std::vector<LabeledSequence> generate_synthetic_corpus(const CorpusSpec& spec) {
  const World world(spec);
  const auto counts = mixture_counts(spec.mixture, spec.n_sequences);
  std::vector<int> labels;
  for (int l = 0; l < int(counts.size()); ++l) labels.insert(labels.end(), counts[l], l);
  Rng rng(spec.seed ^ (0xA24BAED4963EE407ULL * (spec.stream + 1)));
  rng.shuffle(labels);
  std::vector<LabeledSequence> out;
  out.reserve(labels.size());
  for (int l : labels) {
    const Meaning m = world.sample_sequence(spec.sentences_per_sequence, rng);
    out.push_back({world.render(m, l), l, {}});
  }
  return out;
}

std::vector<LabeledSequence> ingest_corpus(const std::map<int, std::string>& paths_by_language,
                                           const std::vector<std::string>& language_names) {
  std::vector<LabeledSequence> out;
  for (const auto& [lang, path] : paths_by_language) {
    if (lang < 0 || lang >= int(language_names.size()))
      throw ValidationError(fmt::format("language id {} out of range", lang));
    if (!std::filesystem::exists(path)) throw IoError(fmt::format("corpus file '{}' not found", path));
    const std::string bytes = read_file(path);
    if (auto bad = utf8::first_invalid(bytes); bad != std::string::npos)
      throw ValidationError(
          fmt::format("'{}': invalid UTF-8 at byte offset {}", path, bad));
    std::istringstream in(bytes);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      out.push_back({line, lang, {}});
      ++n;
    }
    if (n == 0)
      throw ValidationError(fmt::format("corpus file for language '{}' is empty", language_names[lang]));
  }
  return out;
}

std::vector<LabeledSequence> ingest_corpus_dir(const std::string& dir,
                                               const std::vector<std::string>& language_names) {
  std::map<int, std::string> paths;
  for (int l = 0; l < int(language_names.size()); ++l)
    paths[l] = (std::filesystem::path(dir) / (language_names[l] + ".txt")).string();
  return ingest_corpus(paths, language_names);
}

void write_corpus_dir(const std::string& dir, const std::vector<LabeledSequence>& corpus,
                      const std::vector<std::string>& language_names) {
  std::vector<std::string> files(language_names.size());
  for (const auto& s : corpus) files.at(s.language) += s.text + "\n";
  for (std::size_t l = 0; l < files.size(); ++l)
    write_file((std::filesystem::path(dir) / (language_names[l] + ".txt")).string(), files[l]);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

}  // namespace ct::corpus
