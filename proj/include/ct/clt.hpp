#pragma once

// Cross-layer transcoder. Features at layer l read the MLP input h_l and write
// into the MLP outputs of layers l..L-1.
//
//   z_l    = act(W_enc^l h_l + b_enc^l)
//   mhat_k = sum_{l<=k} W_dec^{l->k} z_l + b_dec^k
//   loss   = sum_k |mhat_k - m_k|^2
//          + lambda0   * sum_l sum_n tanh(C z_{l,n} |w_{l,n}|)
//          + lambda_df * sum_l sum_n relu(theta_{l,n} - pre_{l,n}) |w_{l,n}|
//
// where w_{l,n} is feature n's decoder vectors concatenated over all target
// layers, pre the encoder pre-activation and theta the feature threshold
// (the JumpReLU threshold, or a constant in ReLU mode). Averaged over tokens.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/activations.hpp"
#include "ct/common.hpp"

namespace ct::clt {

enum class Activation { relu, jumprelu };

struct CltConfig {
  int n_layers = 2;
  int d_model = 64;
  int d_features = 512;
  Activation activation = Activation::jumprelu;
  double threshold_init = 0.03;
  double bandwidth = 1.0;  // rectangle window for threshold gradients
  double lambda0 = 2.0;
  double tanh_scale = 1.0;  // C
  double target_l0 = 10.0;
  bool adapt_lambda0 = true;  // steer lambda0 towards target_l0 during training
  double lambda_df = 1e-5;
  double dead_threshold = 0.03;  // exp(tau) in ReLU mode
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 1000;
  int decay_steps = 3749;  // linear decay to zero over the final decay_steps
  int batch_tokens = 1024;
  int train_steps = 4749;
  int eval_interval = 250;
  long eval_tokens = 200000;
  double eval_fraction = 0.1;  // trailing share of the store held out for metrics
  std::uint64_t seed = 42;

  void validate() const;
};

void to_json(nlohmann::json& j, const CltConfig& c);
void from_json(const nlohmann::json& j, CltConfig& c);

struct FeatureKey {
  int layer = 0;
  int index = 0;
  bool operator==(const FeatureKey&) const = default;
  auto operator<=>(const FeatureKey&) const = default;
};

// All parameters in one flat buffer. Decoders are stored feature-major: row n
// of dec(l, k) is column n of W_dec^{l->k}. Thresholds are stored as
// log-thresholds (tau), so theta = exp(tau) stays positive under Adam.
struct CltLayout {
  std::vector<std::size_t> enc_w, enc_b, dec_b, log_theta;
  std::vector<std::size_t> dec_w;  // pair_index(l, k)
  std::size_t total = 0;
  int n_layers = 0;

  explicit CltLayout(const CltConfig& c);
  CltLayout() = default;
  int pair_index(int l, int k) const { return l * n_layers - l * (l - 1) / 2 + (k - l); }
};

template <typename T>
struct CltParams {
  CltConfig config;
  CltLayout layout;
  std::vector<T> values;

  CltParams() = default;
  explicit CltParams(const CltConfig& c) : config(c), layout(c), values(layout.total, T(0)) {}

  T* enc_w(int l) { return values.data() + layout.enc_w[l]; }
  const T* enc_w(int l) const { return values.data() + layout.enc_w[l]; }
  T* enc_b(int l) { return values.data() + layout.enc_b[l]; }
  const T* enc_b(int l) const { return values.data() + layout.enc_b[l]; }
  T* dec_w(int l, int k) { return values.data() + layout.dec_w[layout.pair_index(l, k)]; }
  const T* dec_w(int l, int k) const { return values.data() + layout.dec_w[layout.pair_index(l, k)]; }
  T* dec_b(int k) { return values.data() + layout.dec_b[k]; }
  const T* dec_b(int k) const { return values.data() + layout.dec_b[k]; }
  T* log_theta(int l) { return values.data() + layout.log_theta[l]; }
  const T* log_theta(int l) const { return values.data() + layout.log_theta[l]; }

  // Threshold used by the activation and the dead-feature term.
  T threshold(int l, int n) const;

  template <typename U>
  CltParams<U> cast() const {
    CltParams<U> p;
    p.config = config;
    p.layout = layout;
    p.values.assign(values.begin(), values.end());
    return p;
  }
};

// Encoder rows normal(0, 1/d_model), encoder bias 0, decoders 0, output bias
// = `mean_m` (per layer, may be empty for zero), thresholds threshold_init.
template <typename T>
CltParams<T> init_clt(const CltConfig& config, const std::vector<std::vector<double>>& mean_m = {});

// Pre-activations and activations for n tokens at layer l; h is [n, d_model].
template <typename T>
void clt_encode_pre(const CltParams<T>& p, int layer, std::span<const T> h, int n, std::span<T> pre);
template <typename T>
std::vector<T> clt_encode(const CltParams<T>& p, int layer, std::span<const T> h, int n = 1);
template <typename T>
T activate(const CltParams<T>& p, int layer, int feature, T pre);

// mhat for target layer k from activations z[l] ([n, d_features]) of every l <= k.
template <typename T>
std::vector<T> clt_decode(const CltParams<T>& p, const std::vector<std::vector<T>>& z, int target,
                          int n = 1);

// Euclidean norm of every feature's concatenated decoder vectors at layer l.
template <typename T>
std::vector<T> decoder_norms(const CltParams<T>& p, int layer);

struct LossParts {
  double total = 0, mse = 0, sparsity = 0, dead = 0;
};

// Per-layer contiguous [n, d_model] matrices.
template <typename T>
struct Pairs {
  int n = 0;
  std::vector<std::vector<T>> h, m;
};

Pairs<float> to_pairs(act::PairBatch&& b);

template <typename T>
LossParts clt_loss(const CltParams<T>& p, const Pairs<T>& batch, double lambda0);

template <typename T>
struct LossAndGrads {
  LossParts parts;
  CltParams<T> grads;
  std::vector<double> l0;  // mean active features per token, per layer
};

template <typename T>
LossAndGrads<T> clt_loss_and_grads(const CltParams<T>& p, const Pairs<T>& batch, double lambda0);

struct LayerMetrics {
  double explained_variance = 0;
  int dead_features = 0;
  double mean_l0 = 0;
};

std::vector<LayerMetrics> clt_metrics(const CltParams<float>& p, const act::ActivationStore& store,
                                      std::span<const long> token_ids);

struct CltEval {
  long step = 0;
  double lr = 0;
  double lambda0 = 0;
  LossParts train;  // mean over the steps since the last eval
  std::vector<LayerMetrics> layers;
};

struct CltTrainResult {
  CltParams<float> params;
  std::vector<CltEval> history;
};

// Adam with linear warmup and a final linear decay. Aborts with
// NumericalError when the loss stays above 10x its initial value for 100
// consecutive steps, or turns non-finite.
CltTrainResult train_clt(const CltConfig& config, const act::ActivationStore& store,
                         const std::function<void(const CltEval&)>& on_eval = {});

double clt_learning_rate(const CltConfig& c, long step);

std::string history_csv(const std::vector<CltEval>& history);

void save_clt(const CltParams<float>& p, const std::string& path, const nlohmann::json& extra_meta);
CltParams<float> load_clt(const std::string& path);
std::string clt_digest(const CltParams<float>& p);

}  // namespace ct::clt
