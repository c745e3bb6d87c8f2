#pragma once

// Decoder-only transformer: learned positions, pre-LN blocks, GELU MLP, untied
// unembedding. Forward and backward passes are written out by hand and
// templated on the scalar so the same graph runs in float for training and in
// double for finite-difference checks.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/common.hpp"

namespace ct::lm {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int d_ffn = 256;
  int vocab_size = 1024;
  int context_len = 64;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  int attn_width() const { return n_heads * d_head; }
  void validate() const;
  // Closed-form count of every trainable scalar.
  long parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TensorSlot {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool decay = false;  // rank-2 tensors take weight decay
};

// Offsets of every named tensor inside one flat buffer.
struct Layout {
  struct Block {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::size_t wte, wpe, lnf_g, lnf_b, w_u;
  std::vector<Block> blocks;
  std::vector<TensorSlot> slots;
  std::size_t total = 0;

  explicit Layout(const ModelConfig& c);
  Layout() = default;
};

// Parameters (or gradients, which share the layout) in one flat buffer.
// w_u is stored [vocab, d_model]: row t is the unembedding column for token t.
template <typename T>
struct Params {
  ModelConfig config;
  Layout layout;
  std::vector<T> values;

  Params() = default;
  explicit Params(const ModelConfig& c) : config(c), layout(c), values(layout.total, T(0)) {}

  T* at(std::size_t off) { return values.data() + off; }
  const T* at(std::size_t off) const { return values.data() + off; }
  std::span<const T> slice(std::size_t off, std::size_t n) const { return {values.data() + off, n}; }
  std::span<T> slice(std::size_t off, std::size_t n) { return {values.data() + off, n}; }

  template <typename U>
  Params<U> cast() const {
    Params<U> p;
    p.config = config;
    p.layout = layout;
    p.values.assign(values.begin(), values.end());
    return p;
  }
};

template <typename T>
Params<T> init_model(const ModelConfig& config);

// Everything one forward pass computes, kept for backprop and for analysis.
// All matrices are row-major [positions, width].
template <typename T>
struct ActivationRecord {
  struct Block {
    std::vector<T> resid_pre;  // block input
    std::vector<T> ln1_out, ln1_mean, ln1_rstd;
    std::vector<T> qkv;
    std::vector<T> att;  // [heads, n, n] softmax rows, zero above the diagonal
    std::vector<T> attn_y;  // per-head mixed values [n, heads*d_head]
    std::vector<T> attn_out;
    std::vector<T> resid_mid;  // after attention; LN2 reads this
    std::vector<T> mlp_in, ln2_mean, ln2_rstd;  // mlp_in = LN2 output (the MLP input h)
    std::vector<T> fc_pre, fc_act;
    std::vector<T> mlp_out;  // m, before the residual add
    std::vector<T> resid_post;
    std::vector<T> dropout_attn, dropout_mlp;  // keep masks (scaled), empty when dropout is off
  };
  int n = 0;
  std::vector<int> tokens;
  std::vector<T> embed;  // token + position embedding
  std::vector<Block> blocks;
  std::vector<T> lnf_out, lnf_mean, lnf_rstd;
  std::vector<T> logits;  // [n, vocab]

  std::span<const T> row(const std::vector<T>& m, int pos, int width) const {
    return {m.data() + std::size_t(pos) * width, std::size_t(width)};
  }
};

// Called after each block's MLP with (layer, mlp_in, mlp_out); may rewrite
// mlp_out in place. This is how replacement-model forwards are built.
template <typename T>
using MlpHook = std::function<void(int layer, std::span<const T> mlp_in, std::span<T> mlp_out)>;

struct ForwardOptions {
  bool train = false;  // enables dropout when config.dropout > 0
  std::uint64_t dropout_seed = 0;
};

template <typename T>
ActivationRecord<T> forward(const Params<T>& p, std::span<const int> tokens,
                            const MlpHook<T>& hook = {}, const ForwardOptions& opt = {});

// Rows are full token sequences; inputs are row[:-1], targets row[1:].
// Positions whose target is `pad_id` carry no loss.
struct Batch {
  std::vector<std::vector<int>> rows;
  int pad_id = -1;
};

template <typename T>
struct LossAndGrads {
  double loss = 0;
  long tokens = 0;
  Params<T> grads;
};

template <typename T>
double loss_only(const Params<T>& p, const Batch& batch);

template <typename T>
LossAndGrads<T> loss_and_grads(const Params<T>& p, const Batch& batch, const ForwardOptions& opt = {});

// Backward pass of one record given dL/dlogits; accumulates into grads.
template <typename T>
void backward(const Params<T>& p, const ActivationRecord<T>& rec, std::span<const T> dlogits,
              Params<T>& grads);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

void save_checkpoint(const Params<float>& p, const std::string& path,
                     const nlohmann::json& extra_meta);
void save_checkpoint(const Params<float>& p, const std::string& path);
Params<float> load_checkpoint(const std::string& path);
// Digest of config and parameter bytes.
std::string model_digest(const Params<float>& p);

}  // namespace ct::lm
