#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ct/corpus.hpp"

namespace ct {

struct Specials {
  int bos = 0;
  int eos = 1;
  int pad = 2;
  int unk = 3;
};

// What the merge learner actually saw, per language.
struct TokenizerTrainReport {
  std::vector<long> char_mass_available;
  std::vector<long> char_mass_used;
  int merges_learned = 0;
};

// Code-point BPE over space-prefixed word chunks. Vocabulary layout:
// specials, then the alphabet sorted by code point, then one id per merge.
class Tokenizer {
 public:
  static constexpr int kNumSpecials = 4;
  static constexpr int kFormatVersion = 1;

  // Each language contributes the same number of characters (truncating the
  // larger ones) before merges are learned. vocab_size includes the specials.
  static Tokenizer train(std::span<const corpus::LabeledSequence> corpus, int n_languages,
                         int vocab_size, TokenizerTrainReport* report = nullptr);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int vocab_size() const { return int(pieces_.size()); }
  const Specials& specials() const { return specials_; }
  const std::string& piece(int id) const { return pieces_.at(id); }
  int alphabet_size() const { return alphabet_size_; }
  const std::vector<std::pair<int, int>>& merges() const { return merges_; }

  std::string to_json() const;
  static Tokenizer from_json(std::string_view json);
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

  // Encodes every sequence in place.
  void encode_corpus(std::vector<corpus::LabeledSequence>& corpus) const;

 private:
  void rebuild_index();
  std::vector<int> encode_chunk(std::u32string_view chunk) const;

  Specials specials_;
  std::vector<std::string> pieces_;
  int alphabet_size_ = 0;
  std::vector<std::pair<int, int>> merges_;
  std::unordered_map<char32_t, int> char_id_;
  std::map<std::pair<int, int>, int> merge_rank_;
};

// Splits text into chunks that each hold one word with its leading spaces.
std::vector<std::u32string> pretokenize(std::u32string_view text);

}  // namespace ct
