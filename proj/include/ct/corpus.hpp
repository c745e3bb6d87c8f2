#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/common.hpp"

namespace ct::corpus {

struct LabeledSequence {
  std::string text;
  int language = 0;
  std::vector<int> tokens;  // filled by encoding
};

// Synthetic multilingual corpus description. Languages share semantic templates
// and concept inventories but never share a surface word.
struct CorpusSpec {
  std::vector<std::string> languages{"L0", "L1", "L2", "L3", "L4"};
  std::vector<double> mixture{0.2, 0.2, 0.2, 0.2, 0.2};
  int n_sequences = 1000;
  int templates = 12;
  int lexicon_size = 120;
  std::optional<int> fragmenting_language;
  int sentences_per_sequence = 3;
  std::uint64_t seed = 0;
  // Selects an independent sample over the same lexicons (e.g. validation data).
  std::uint64_t stream = 0;

  int n_languages() const { return int(languages.size()); }
  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

enum class WordClass { function, agent, object, verb, adjective, series };

// One meaning unit; `concept` indexes the shared concept inventory.
using Meaning = std::vector<int>;  // concept ids, -1 = sentence end

// Lexicons and templates derived deterministically from a CorpusSpec. Anything
// sharing (languages, templates, lexicon_size, fragmenting_language, seed)
// shares a world, regardless of mixture or stream.
class World {
 public:
  explicit World(const CorpusSpec& spec);

  int n_languages() const { return int(lexicons_.size()); }
  int n_concepts() const { return int(classes_.size()); }
  const std::string& word(int language, int concept_id) const {
    return lexicons_[language][concept_id];
  }
  WordClass word_class(int concept_id) const { return classes_[concept_id]; }
  const std::vector<std::string>& lexicon(int language) const { return lexicons_[language]; }
  const std::string& language_name(int language) const { return names_[language]; }
  std::optional<int> fragmenting_language() const { return fragmenting_; }

  Meaning sample_sentence(Rng& rng) const;
  Meaning sample_sequence(int sentences, Rng& rng) const;
  std::string render(const Meaning& m, int language) const;

 private:
  struct Slot {
    WordClass cls;
    int fixed = -1;  // concept id for function words
    int relation = 0;  // 0 none, 1 antonym of previous adjective, 2 next item of previous series
  };
  std::vector<std::string> names_;
  std::vector<WordClass> classes_;
  std::map<WordClass, std::vector<int>> by_class_;
  std::vector<std::vector<std::string>> lexicons_;
  std::vector<std::vector<Slot>> templates_;
  int series_len_ = 6;
  std::optional<int> fragmenting_;
};

std::vector<LabeledSequence> generate_synthetic_corpus(const CorpusSpec& spec);

// Per-language sequence counts by largest remainder; sums to n exactly.
std::vector<int> mixture_counts(const std::vector<double>& mixture, int n);

// One sequence per non-blank line, labelled with the map key.
std::vector<LabeledSequence> ingest_corpus(const std::map<int, std::string>& paths_by_language,
                                           const std::vector<std::string>& language_names);
// Reads `<dir>/<language-name>.txt` for every language.
std::vector<LabeledSequence> ingest_corpus_dir(const std::string& dir,
                                               const std::vector<std::string>& language_names);
void write_corpus_dir(const std::string& dir, const std::vector<LabeledSequence>& corpus,
                      const std::vector<std::string>& language_names);

// Words of `text` split on spaces.
std::vector<std::string> split_words(const std::string& text);

}  // namespace ct::corpus
