#include "ct/tokenizer.hpp"

#include <algorithm>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ct/utf8.hpp"

namespace ct {

namespace {
const char* kSpecialNames[Tokenizer::kNumSpecials] = {"<bos>", "<eos>", "<pad>", "<unk>"};
}

std::vector<std::u32string> pretokenize(std::u32string_view text) {
  std::vector<std::u32string> chunks;
  std::u32string cur;
  bool has_word = false;
  for (char32_t c : text) {
    if (c == U' ' && has_word) {
      chunks.push_back(std::move(cur));
      cur.clear();
      has_word = false;
    }
    cur.push_back(c);
    if (c != U' ') has_word = true;
  }
  if (!cur.empty()) chunks.push_back(std::move(cur));
  return chunks;
}

Tokenizer Tokenizer::train(std::span<const corpus::LabeledSequence> corpus, int n_languages,
                           int vocab_size, TokenizerTrainReport* report) {
  if (n_languages < 2) throw ConfigError("tokenizer training needs at least 2 languages");
  std::vector<std::vector<std::u32string>> texts(n_languages);
  for (const auto& s : corpus) {
    if (s.language < 0 || s.language >= n_languages)
      throw ValidationError(fmt::format("sequence labelled with unknown language {}", s.language));
    auto cps = utf8::decode(s.text);
    texts[s.language].emplace_back(cps.begin(), cps.end());
  }
  std::vector<long> available(n_languages, 0);
  for (int l = 0; l < n_languages; ++l) {
    if (texts[l].empty())
      throw ValidationError(fmt::format("tokenizer corpus has no text for language {}", l));
    for (const auto& t : texts[l]) available[l] += long(t.size());
  }

  // Alphabet from the full corpus so training text never maps to UNK.
  std::set<char32_t> alphabet;
  for (const auto& lang : texts)
    for (const auto& t : lang) alphabet.insert(t.begin(), t.end());
  if (vocab_size < int(alphabet.size()) + kNumSpecials)
    throw ConfigError(fmt::format("vocab_size {} below alphabet size {} + {} specials", vocab_size,
                                  alphabet.size(), kNumSpecials));

  Tokenizer tok;
  for (const char* s : kSpecialNames) tok.pieces_.emplace_back(s);
  for (char32_t c : alphabet) {
    std::string p;
    utf8::append(p, c);
    tok.pieces_.push_back(std::move(p));
  }
  tok.alphabet_size_ = int(alphabet.size());
  tok.rebuild_index();

  // Equal character mass per language: truncate every language to the smallest.
  const long budget = *std::min_element(available.begin(), available.end());
  std::vector<long> used(n_languages, 0);
  std::map<std::u32string, long> chunk_counts;
  for (int l = 0; l < n_languages; ++l) {
    for (const auto& t : texts[l]) {
      if (used[l] >= budget) break;
      const long take = std::min<long>(long(t.size()), budget - used[l]);
      used[l] += take;
      for (auto& c : pretokenize(std::u32string_view(t).substr(0, take))) chunk_counts[c]++;
    }
  }

  struct Word {
    std::vector<int> sym;
    long count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (char32_t c : chunk) w.sym.push_back(tok.char_id_.at(c));
    words.push_back(std::move(w));
  }

  while (tok.vocab_size() < vocab_size) {
    std::map<std::pair<int, int>, long> pairs;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) pairs[{w.sym[i], w.sym[i + 1]}] += w.count;
    if (pairs.empty()) break;
    // Highest count wins; ties go to the smallest pair (map order).
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [a, b] = best->first;
    const int id = tok.vocab_size();
    tok.merges_.push_back({a, b});
    tok.pieces_.push_back(tok.pieces_[a] + tok.pieces_[b]);
    for (auto& w : words) {
      std::vector<int> out;
      out.reserve(w.sym.size());
      for (std::size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == a && w.sym[i + 1] == b) {
          out.push_back(id);
          ++i;
        } else {
          out.push_back(w.sym[i]);
        }
      }
      w.sym = std::move(out);
    }
  }
  tok.rebuild_index();
  if (report) {
    report->char_mass_available = available;
    report->char_mass_used = used;
    report->merges_learned = int(tok.merges_.size());
  }
  return tok;
}

void Tokenizer::rebuild_index() {
  char_id_.clear();
  merge_rank_.clear();
  for (int i = 0; i < alphabet_size_; ++i) {
    auto cps = utf8::decode(pieces_[kNumSpecials + i]);
    char_id_[cps.at(0)] = kNumSpecials + i;
  }
  for (int r = 0; r < int(merges_.size()); ++r) merge_rank_[merges_[r]] = r;
}

std::vector<int> Tokenizer::encode_chunk(std::u32string_view chunk) const {
  std::vector<int> sym;
  sym.reserve(chunk.size());
  for (char32_t c : chunk) {
    auto it = char_id_.find(c);
    sym.push_back(it == char_id_.end() ? specials_.unk : it->second);
  }
  const int first_merge_id = kNumSpecials + alphabet_size_;
  while (sym.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto it = merge_rank_.find({sym[i], sym[i + 1]});
      if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const auto [a, b] = merges_[best_rank];
    std::vector<int> out;
    out.reserve(sym.size());
    for (std::size_t i = 0; i < sym.size(); ++i) {
      if (i + 1 < sym.size() && sym[i] == a && sym[i + 1] == b) {
        out.push_back(first_merge_id + best_rank);
        ++i;
      } else {
        out.push_back(sym[i]);
      }
    }
    sym = std::move(out);
  }
  return sym;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  const auto cps = utf8::decode(text);
  for (const auto& chunk : pretokenize(std::u32string_view(cps.data(), cps.size()))) {
    auto part = encode_chunk(chunk);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw ValidationError(fmt::format("token id {} out of range", id));
    if (id == specials_.unk)
      utf8::append(out, U'�');
    else if (id >= kNumSpecials)
      out += pieces_[id];
  }
  return out;
}

void Tokenizer::encode_corpus(std::vector<corpus::LabeledSequence>& corpus) const {
  for (auto& s : corpus) s.tokens = encode(s.text);
}

std::string Tokenizer::to_json() const {
  nlohmann::json j;
  j["version"] = kFormatVersion;
  j["specials"] = {{"bos", specials_.bos}, {"eos", specials_.eos}, {"pad", specials_.pad}, {"unk", specials_.unk}};
  nlohmann::json vocab = nlohmann::json::array();
  for (const auto& p : pieces_) vocab.push_back(p);
  j["vocab"] = vocab;
  nlohmann::json merges = nlohmann::json::array();
  for (auto [a, b] : merges_) merges.push_back({a, b});
  j["merges"] = merges;
  return j.dump();
}

Tokenizer Tokenizer::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("tokenizer JSON: {}", e.what()));
  }
  if (j.value("version", -1) != kFormatVersion)
    throw ValidationError(fmt::format("unsupported tokenizer version {}", j.value("version", -1)));
  Tokenizer tok;
  const auto& sp = j.at("specials");
  tok.specials_ = {sp.at("bos"), sp.at("eos"), sp.at("pad"), sp.at("unk")};
  for (const auto& p : j.at("vocab")) tok.pieces_.push_back(p.get<std::string>());
  const auto& merges = j.at("merges");
  tok.alphabet_size_ = int(tok.pieces_.size()) - int(merges.size()) - kNumSpecials;
  if (tok.alphabet_size_ < 0) throw ValidationError("tokenizer vocab shorter than its merge list");
  for (const auto& m : merges) {
    const int a = m.at(0), b = m.at(1);
    const int id = kNumSpecials + tok.alphabet_size_ + int(tok.merges_.size());
    if (a < 0 || b < 0 || a >= id || b >= id || tok.pieces_[id] != tok.pieces_[a] + tok.pieces_[b])
      throw ValidationError(fmt::format("tokenizer merge {} inconsistent with vocab", tok.merges_.size()));
    tok.merges_.push_back({a, b});
  }
  tok.rebuild_index();
  return tok;
}

void Tokenizer::save(const std::string& path) const { write_file(path, to_json()); }

Tokenizer Tokenizer::load(const std::string& path) { return from_json(read_file(path)); }

}  // namespace ct
