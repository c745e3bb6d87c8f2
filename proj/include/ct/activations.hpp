#pragma once

// Activation datasets captured from a frozen LM. Each sequence is a fixed
// window (BOS at position 0) and stores, per layer, the MLP input h and the
// MLP output m. Everything else a forward pass computes can be regenerated
// from the stored tokens.

#include <cstdint>
#include <string>
#include <vector>

#include "ct/corpus.hpp"
#include "ct/tinylm.hpp"

namespace ct::act {

struct StoreSpec {
  int n_sequences = 5000;
  int seq_len = 16;
  std::uint64_t seed = 0;
};

struct ActivationStore {
  int seq_len = 16;
  int n_layers = 0;
  int d_model = 0;
  std::string model_digest;
  std::vector<std::string> languages;
  std::vector<int> tokens;  // [n_sequences * seq_len]
  std::vector<int> labels;  // [n_sequences]
  std::vector<std::vector<float>> h, m;  // per layer [n_sequences * seq_len * d_model]

  int n_sequences() const { return int(labels.size()); }
  long n_tokens() const { return long(tokens.size()); }
  std::vector<int> per_language_counts() const;
  std::span<const int> sequence(int s) const {
    return {tokens.data() + std::size_t(s) * seq_len, std::size_t(seq_len)};
  }
  std::string digest() const;
};

// Picks windows uniformly across languages (counts differ by at most one) and
// records one forward pass per window. `corpus` must already be encoded; a
// sequence qualifies when it has at least seq_len - 1 tokens.
ActivationStore build_activation_store(const lm::Params<float>& params,
                                       const std::vector<corpus::LabeledSequence>& corpus,
                                       const std::vector<std::string>& languages, int bos,
                                       const StoreSpec& spec);

// Writes manifest.json plus shard_NNNN.ctns files of `shard_sequences` each.
void save_store(const ActivationStore& store, const std::string& dir, int shard_sequences = 1000);
ActivationStore load_store(const std::string& dir);

// h and m for a set of tokens, one contiguous [n, d_model] matrix per layer.
struct PairBatch {
  int n = 0;
  std::vector<std::vector<float>> h, m;
};

PairBatch gather_pairs(const ActivationStore& store, std::span<const long> token_ids);

// Token-level batches covering `token_ids` exactly once, in an order fixed by
// (seed, epoch). The final batch may be short. Warns (not throws) when
// batch_tokens exceeds the number of tokens.
std::vector<std::vector<long>> token_batches(std::span<const long> token_ids, int batch_tokens,
                                             std::uint64_t seed, int epoch);

// Token ids of sequences [first, last).
std::vector<long> token_range(const ActivationStore& store, int first_sequence, int last_sequence);

}  // namespace ct::act
