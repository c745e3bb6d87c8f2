#include "ct/clt.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ct/container.hpp"
#include "ct/kernels.hpp"

namespace ct::clt {

namespace {

NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::relu, "relu"}, {Activation::jumprelu, "jumprelu"}})

template <typename T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

void CltConfig::validate() const {
  if (n_layers < 1) throw ConfigError("clt n_layers must be positive");
  if (d_model < 1) throw ConfigError("clt d_model must be positive");
  if (d_features < d_model)
    throw ConfigError(fmt::format("d_features {} below d_model {}", d_features, d_model));
  if (lambda0 < 0 || lambda_df < 0) throw ConfigError("loss coefficients must be non-negative");
  if (!(bandwidth > 0)) throw ConfigError("bandwidth must be positive");
  if (!(threshold_init > 0) || !(dead_threshold >= 0)) throw ConfigError("thresholds must be positive");
  if (tanh_scale <= 0) throw ConfigError("tanh_scale must be positive");
  if (batch_tokens < 1) throw ConfigError("batch_tokens must be positive");
  if (train_steps < 0 || warmup_steps < 0 || decay_steps < 0) throw ConfigError("step counts must be non-negative");
  if (eval_interval < 1) throw ConfigError("eval_interval must be positive");
  if (!(eval_fraction > 0 && eval_fraction < 1)) throw ConfigError("eval_fraction must be in (0, 1)");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
}

void to_json(nlohmann::json& j, const CltConfig& c) {
  j = {{"n_layers", c.n_layers},       {"d_model", c.d_model},
       {"d_features", c.d_features},   {"activation", c.activation},
       {"threshold_init", c.threshold_init}, {"bandwidth", c.bandwidth},
       {"lambda0", c.lambda0},         {"tanh_scale", c.tanh_scale},
       {"target_l0", c.target_l0},     {"adapt_lambda0", c.adapt_lambda0},
       {"lambda_df", c.lambda_df},     {"dead_threshold", c.dead_threshold},
       {"lr", c.lr},                   {"beta1", c.beta1},
       {"beta2", c.beta2},             {"eps", c.eps},
       {"warmup_steps", c.warmup_steps}, {"decay_steps", c.decay_steps},
       {"batch_tokens", c.batch_tokens}, {"train_steps", c.train_steps},
       {"eval_interval", c.eval_interval}, {"eval_tokens", c.eval_tokens},
       {"eval_fraction", c.eval_fraction}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CltConfig& c) {
  const CltConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_features = j.value("d_features", d.d_features);
  c.activation = j.value("activation", d.activation);
  c.threshold_init = j.value("threshold_init", d.threshold_init);
  c.bandwidth = j.value("bandwidth", d.bandwidth);
  c.lambda0 = j.value("lambda0", d.lambda0);
  c.tanh_scale = j.value("tanh_scale", d.tanh_scale);
  c.target_l0 = j.value("target_l0", d.target_l0);
  c.adapt_lambda0 = j.value("adapt_lambda0", d.adapt_lambda0);
  c.lambda_df = j.value("lambda_df", d.lambda_df);
  c.dead_threshold = j.value("dead_threshold", d.dead_threshold);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.decay_steps = j.value("decay_steps", d.decay_steps);
  c.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  c.train_steps = j.value("train_steps", d.train_steps);
  c.eval_interval = j.value("eval_interval", d.eval_interval);
  c.eval_tokens = j.value("eval_tokens", d.eval_tokens);
  c.eval_fraction = j.value("eval_fraction", d.eval_fraction);
  c.seed = j.value("seed", d.seed);
}

CltLayout::CltLayout(const CltConfig& c) : n_layers(c.n_layers) {
  const std::size_t F = c.d_features, D = c.d_model;
  auto take = [&](std::size_t n) {
    const std::size_t off = total;
    total += n;
    return off;
  };
  for (int l = 0; l < c.n_layers; ++l) {
    enc_w.push_back(take(F * D));
    enc_b.push_back(take(F));
    log_theta.push_back(take(F));
  }
  for (int l = 0; l < c.n_layers; ++l)
    for (int k = l; k < c.n_layers; ++k) dec_w.push_back(take(F * D));
  for (int k = 0; k < c.n_layers; ++k) dec_b.push_back(take(D));
}

template <typename T>
T CltParams<T>::threshold(int l, int n) const {
  if (config.activation == Activation::relu) return T(config.dead_threshold);
  return std::exp(log_theta(l)[n]);
}

template <typename T>
CltParams<T> init_clt(const CltConfig& config, const std::vector<std::vector<double>>& mean_m) {
  config.validate();
  CltParams<T> p(config);
  Rng rng(config.seed);
  const int F = config.d_features, D = config.d_model;
  const double scale = 1.0 / std::sqrt(double(D));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int i = 0; i < F * D; ++i) p.enc_w(l)[i] = T(rng.normal() * scale);
    std::fill_n(p.log_theta(l), F, T(std::log(config.threshold_init)));
  }
  for (int k = 0; k < config.n_layers && k < int(mean_m.size()); ++k) {
    if (int(mean_m[k].size()) != D) throw ValidationError("decoder bias init has the wrong width");
    for (int d = 0; d < D; ++d) p.dec_b(k)[d] = T(mean_m[k][d]);
  }
  return p;
}

template <typename T>
T activate(const CltParams<T>& p, int layer, int feature, T pre) {
  if (p.config.activation == Activation::relu) return pre > T(0) ? pre : T(0);
  return pre > p.threshold(layer, feature) ? pre : T(0);
}

template <typename T>
void clt_encode_pre(const CltParams<T>& p, int layer, std::span<const T> h, int n, std::span<T> pre) {
  const auto& c = p.config;
  if (layer < 0 || layer >= c.n_layers)
    throw ValidationError(fmt::format("clt layer {} out of range [0, {})", layer, c.n_layers));
  if (h.size() != std::size_t(n) * c.d_model) throw ValidationError("clt input has the wrong width");
  kernels::matmul_nt<T>(pre, h, {p.enc_w(layer), std::size_t(c.d_features) * c.d_model}, p.enc_b(layer), n,
                        c.d_features, c.d_model, false);
}

template <typename T>
std::vector<T> clt_encode(const CltParams<T>& p, int layer, std::span<const T> h, int n) {
  const int F = p.config.d_features;
  std::vector<T> z(std::size_t(n) * F);
  clt_encode_pre<T>(p, layer, h, n, z);
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < F; ++f) z[std::size_t(i) * F + f] = activate(p, layer, f, z[std::size_t(i) * F + f]);
  return z;
}

template <typename T>
std::vector<T> clt_decode(const CltParams<T>& p, const std::vector<std::vector<T>>& z, int target, int n) {
  const auto& c = p.config;
  const int F = c.d_features, D = c.d_model;
  if (target < 0 || target >= c.n_layers)
    throw ValidationError(fmt::format("clt target layer {} out of range", target));
  if (int(z.size()) <= target)
    throw ValidationError(fmt::format("decode of layer {} needs activations of layers 0..{}", target, target));
  std::vector<T> out(std::size_t(n) * D);
  for (int i = 0; i < n; ++i) std::copy_n(p.dec_b(target), D, out.begin() + std::size_t(i) * D);
  for (int l = 0; l <= target; ++l) {
    if (z[l].size() != std::size_t(n) * F)
      throw ValidationError(fmt::format("activations of layer {} missing or mis-sized", l));
    kernels::matmul_nn<T>(out, z[l], {p.dec_w(l, target), std::size_t(F) * D}, n, D, F);
  }
  return out;
}

template <typename T>
std::vector<T> decoder_norms(const CltParams<T>& p, int layer) {
  const auto& c = p.config;
  const int F = c.d_features, D = c.d_model;
  std::vector<T> sq(F, T(0));
  for (int k = layer; k < c.n_layers; ++k) {
    const T* w = p.dec_w(layer, k);
    for (int f = 0; f < F; ++f) sq[f] += kernels::dot(w + std::size_t(f) * D, w + std::size_t(f) * D, D);
  }
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

Pairs<float> to_pairs(act::PairBatch&& b) { return {b.n, std::move(b.h), std::move(b.m)}; }

namespace {

// Shared forward for loss and gradients.
template <typename T>
struct Forward {
  std::vector<std::vector<T>> pre, z, mhat, norms;
  LossParts parts;
  std::vector<double> l0;
};

template <typename T>
Forward<T> run_forward(const CltParams<T>& p, const Pairs<T>& b, double lambda0) {
  const auto& c = p.config;
  const int L = c.n_layers, F = c.d_features, n = b.n;
  if (int(b.h.size()) != L || int(b.m.size()) != L) throw ValidationError("clt batch needs every layer");
  Forward<T> f;
  f.pre.resize(L);
  f.z.resize(L);
  f.mhat.resize(L);
  f.l0.assign(L, 0.0);
  for (int l = 0; l < L; ++l) {
    f.pre[l].resize(std::size_t(n) * F);
    clt_encode_pre<T>(p, l, b.h[l], n, f.pre[l]);
    f.z[l].resize(f.pre[l].size());
    long active = 0;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < F; ++k) {
        const std::size_t at = std::size_t(i) * F + k;
        f.z[l][at] = activate(p, l, k, f.pre[l][at]);
        active += f.z[l][at] != T(0);
      }
    f.l0[l] = n ? double(active) / n : 0.0;
    f.norms.push_back(decoder_norms(p, l));
  }
  const double inv_n = n ? 1.0 / n : 0.0;
  for (int k = 0; k < L; ++k) {
    f.mhat[k] = clt_decode(p, f.z, k, n);
    double s = 0;
    for (std::size_t i = 0; i < f.mhat[k].size(); ++i) {
      const double d = double(f.mhat[k][i]) - double(b.m[k][i]);
      s += d * d;
    }
    f.parts.mse += s * inv_n;
  }
  for (int l = 0; l < L; ++l) {
    double sp = 0, dead = 0;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < F; ++k) {
        const std::size_t at = std::size_t(i) * F + k;
        const double w = f.norms[l][k];
        sp += std::tanh(c.tanh_scale * double(f.z[l][at]) * w);
        dead += std::max(0.0, double(p.threshold(l, k)) - double(f.pre[l][at])) * w;
      }
    f.parts.sparsity += lambda0 * sp * inv_n;
    f.parts.dead += c.lambda_df * dead * inv_n;
  }
  f.parts.total = f.parts.mse + f.parts.sparsity + f.parts.dead;
  if (!std::isfinite(f.parts.total)) {
    const char* which = !std::isfinite(f.parts.mse) ? "mse" : !std::isfinite(f.parts.sparsity) ? "sparsity" : "dead";
    throw NumericalError(fmt::format("clt loss is non-finite in the {} term", which));
  }
  return f;
}

}  // namespace

template <typename T>
LossParts clt_loss(const CltParams<T>& p, const Pairs<T>& batch, double lambda0) {
  return run_forward(p, batch, lambda0).parts;
}

template <typename T>
LossAndGrads<T> clt_loss_and_grads(const CltParams<T>& p, const Pairs<T>& b, double lambda0) {
  const auto& c = p.config;
  const int L = c.n_layers, F = c.d_features, D = c.d_model, n = b.n;
  auto f = run_forward(p, b, lambda0);
  LossAndGrads<T> out{f.parts, CltParams<T>(c), f.l0};
  auto& g = out.grads;
  if (n == 0) return out;
  const T inv_n = T(1.0 / n);

  // d/d mhat and the decoder bias.
  std::vector<std::vector<T>> dm(L);
  for (int k = 0; k < L; ++k) {
    dm[k].resize(std::size_t(n) * D);
    for (std::size_t i = 0; i < dm[k].size(); ++i) dm[k][i] = T(2) * (f.mhat[k][i] - b.m[k][i]) * inv_n;
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d) g.dec_b(k)[d] += dm[k][std::size_t(i) * D + d];
  }

  const T C = T(c.tanh_scale), lam0 = T(lambda0), lamdf = T(c.lambda_df);
  const T eps = T(c.bandwidth);
  for (int l = 0; l < L; ++l) {
    const auto& pre = f.pre[l];
    const auto& z = f.z[l];
    const auto& wn = f.norms[l];
    // dz from reconstruction.
    std::vector<T> dz(std::size_t(n) * F, T(0));
    for (int k = l; k < L; ++k) {
      kernels::matmul_nt<T>(dz, dm[k], {p.dec_w(l, k), std::size_t(F) * D}, nullptr, n, F, D, true);
      kernels::matmul_tn<T>({g.dec_w(l, k), std::size_t(F) * D}, z, dm[k], n, D, F);
    }
    std::vector<T> dwn(F, T(0));  // d loss / d |w_{l,n}|
    std::vector<T> dpre(std::size_t(n) * F, T(0));
    T* dlog_theta = g.log_theta(l);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < F; ++k) {
        const std::size_t at = std::size_t(i) * F + k;
        const T theta = p.threshold(l, k);
        // sparsity
        const T t = std::tanh(C * z[at] * wn[k]);
        const T sech2 = T(1) - t * t;
        dz[at] += lam0 * C * wn[k] * sech2 * inv_n;
        dwn[k] += lam0 * C * z[at] * sech2 * inv_n;
        // dead-feature term
        if (pre[at] < theta) {
          dpre[at] -= lamdf * wn[k] * inv_n;
          dwn[k] += lamdf * (theta - pre[at]) * inv_n;
          if (c.activation == Activation::jumprelu) dlog_theta[k] += lamdf * wn[k] * inv_n * theta;
        }
        // activation
        if (c.activation == Activation::relu) {
          if (pre[at] > T(0)) dpre[at] += dz[at];
        } else {
          if (pre[at] > theta) dpre[at] += dz[at];
          // Straight-through rectangle window around the threshold.
          if (std::abs(pre[at] - theta) < eps / T(2)) dlog_theta[k] += dz[at] * (-theta / eps) * theta;
        }
      }
    // Norm gradient flows back into every target decoder of the feature.
    for (int k = l; k < L; ++k) {
      const T* w = p.dec_w(l, k);
      T* gw = g.dec_w(l, k);
      for (int ft = 0; ft < F; ++ft) {
        if (wn[ft] == T(0) || dwn[ft] == T(0)) continue;
        kernels::axpy(dwn[ft] / wn[ft], w + std::size_t(ft) * D, gw + std::size_t(ft) * D, D);
      }
    }
    kernels::matmul_tn<T>({g.enc_w(l), std::size_t(F) * D}, dpre, b.h[l], n, D, F);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < F; ++k) g.enc_b(l)[k] += dpre[std::size_t(i) * F + k];
  }
  return out;
}

std::vector<LayerMetrics> clt_metrics(const CltParams<float>& p, const act::ActivationStore& store,
                                      std::span<const long> token_ids) {
  const auto& c = p.config;
  const int L = c.n_layers, F = c.d_features, D = c.d_model;
  if (token_ids.empty()) throw ValidationError("clt metrics need a non-empty evaluation sample");
  if (store.n_layers != L || store.d_model != D) throw ValidationError("activation store does not match the clt");
  std::vector<double> sse(L, 0), sum_sq(L, 0), active(L, 0);
  std::vector<std::vector<double>> mean(L, std::vector<double>(D, 0));
  std::vector<std::vector<char>> ever(L, std::vector<char>(F, 0));
  const std::size_t chunk = 1024;
  for (std::size_t s = 0; s < token_ids.size(); s += chunk) {
    auto ids = token_ids.subspan(s, std::min(chunk, token_ids.size() - s));
    auto b = to_pairs(act::gather_pairs(store, ids));
    std::vector<std::vector<float>> z(L);
    for (int l = 0; l < L; ++l) {
      z[l] = clt_encode<float>(p, l, b.h[l], b.n);
      for (int i = 0; i < b.n; ++i)
        for (int k = 0; k < F; ++k)
          if (z[l][std::size_t(i) * F + k] != 0.f) {
            active[l] += 1;
            ever[l][k] = 1;
          }
    }
    for (int k = 0; k < L; ++k) {
      auto mh = clt_decode<float>(p, z, k, b.n);
      for (std::size_t i = 0; i < mh.size(); ++i) {
        const double d = double(mh[i]) - b.m[k][i];
        sse[k] += d * d;
        sum_sq[k] += double(b.m[k][i]) * b.m[k][i];
        mean[k][i % D] += b.m[k][i];
      }
    }
  }
  const double N = double(token_ids.size());
  std::vector<LayerMetrics> out(L);
  for (int l = 0; l < L; ++l) {
    double centered = sum_sq[l];
    for (double mu : mean[l]) centered -= mu * mu / N;
    out[l].explained_variance = centered > 0 ? 1.0 - sse[l] / centered : (sse[l] == 0 ? 1.0 : -INFINITY);
    out[l].dead_features = int(std::count(ever[l].begin(), ever[l].end(), 0));
    out[l].mean_l0 = active[l] / N;
  }
  return out;
}

double clt_learning_rate(const CltConfig& c, long step) {
  const long total = c.train_steps;
  const long warm = std::min<long>(c.warmup_steps, total);
  if (step < warm) return c.lr * double(step + 1) / double(warm);
  const long decay = std::min<long>(c.decay_steps, total - warm);
  const long decay_start = total - decay;
  if (step < decay_start || decay == 0) return c.lr;
  return c.lr * double(total - step) / double(decay);
}

CltTrainResult train_clt(const CltConfig& config, const act::ActivationStore& store,
                         const std::function<void(const CltEval&)>& on_eval) {
  config.validate();
  if (store.n_layers != config.n_layers || store.d_model != config.d_model)
    throw ValidationError(fmt::format("activation store has {} layers of width {}, clt expects {} of {}",
                                      store.n_layers, store.d_model, config.n_layers, config.d_model));
  const int N = store.n_sequences();
  const int n_eval = std::max(1, int(std::lround(N * config.eval_fraction)));
  if (N - n_eval < 1) throw ValidationError("activation store too small to hold out an evaluation split");
  const auto train_ids = act::token_range(store, 0, N - n_eval);
  auto eval_ids = act::token_range(store, N - n_eval, N);
  if (long(eval_ids.size()) > config.eval_tokens) eval_ids.resize(config.eval_tokens);

  // Decoder bias starts at the mean MLP output of the first training tokens.
  std::vector<std::vector<double>> mean(config.n_layers, std::vector<double>(config.d_model, 0));
  const std::size_t warm = std::min<std::size_t>(train_ids.size(), 16384);
  for (int l = 0; l < config.n_layers; ++l) {
    for (std::size_t t = 0; t < warm; ++t)
      for (int d = 0; d < config.d_model; ++d) mean[l][d] += store.m[l][train_ids[t] * config.d_model + d];
    for (auto& v : mean[l]) v /= double(warm);
  }

  CltTrainResult res;
  res.params = init_clt<float>(config, mean);
  auto& p = res.params;
  std::vector<float> m1(p.values.size(), 0.f), m2(p.values.size(), 0.f);
  double lambda0 = config.lambda0;
  double initial_loss = -1;
  int above = 0;
  LossParts acc;
  int acc_steps = 0;
  int epoch = 0;
  auto batches = act::token_batches(train_ids, config.batch_tokens, config.seed, epoch);
  std::size_t next_batch = 0;

  for (long step = 0; step < config.train_steps; ++step) {
    if (next_batch == batches.size()) {
      batches = act::token_batches(train_ids, config.batch_tokens, config.seed, ++epoch);
      next_batch = 0;
    }
    auto batch = to_pairs(act::gather_pairs(store, batches[next_batch++]));
    auto lg = clt_loss_and_grads<float>(p, batch, lambda0);
    if (!std::isfinite(lg.parts.total)) throw NumericalError(fmt::format("clt loss non-finite at step {}", step));
    if (initial_loss < 0) initial_loss = lg.parts.total;
    above = lg.parts.total > 10 * initial_loss ? above + 1 : 0;
    if (above >= 100)
      throw NumericalError(fmt::format("clt training diverged: loss above 10x initial for 100 steps (step {})", step));
    for (std::size_t i = 0; i < lg.grads.values.size(); ++i)
      if (!std::isfinite(lg.grads.values[i]))
        throw NumericalError(fmt::format("non-finite clt gradient at step {}", step));

    const double lr = clt_learning_rate(config, step);
    const double bc1 = 1 - std::pow(config.beta1, double(step + 1));
    const double bc2 = 1 - std::pow(config.beta2, double(step + 1));
    const float b1 = float(config.beta1), b2 = float(config.beta2);
    const float step_size = float(lr / bc1), inv_bc2 = float(1 / bc2), eps = float(config.eps);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const float gi = lg.grads.values[i];
      m1[i] = b1 * m1[i] + (1 - b1) * gi;
      m2[i] = b2 * m2[i] + (1 - b2) * gi * gi;
      p.values[i] -= step_size * m1[i] / (std::sqrt(m2[i] * inv_bc2) + eps);
    }

    if (config.adapt_lambda0 && step >= config.warmup_steps / 2) {
      double l0 = 0;
      for (double v : lg.l0) l0 += v;
      l0 /= config.n_layers;
      // Multiplicative controller, at most a few percent per step.
      const double err = std::clamp((l0 - config.target_l0) / config.target_l0, -1.0, 1.0);
      lambda0 = std::clamp(lambda0 * std::exp(0.02 * err), config.lambda0 * 1e-3, config.lambda0 * 1e3);
    }

    acc.total += lg.parts.total;
    acc.mse += lg.parts.mse;
    acc.sparsity += lg.parts.sparsity;
    acc.dead += lg.parts.dead;
    ++acc_steps;
    if ((step + 1) % config.eval_interval == 0 || step + 1 == config.train_steps) {
      CltEval e;
      e.step = step + 1;
      e.lr = lr;
      e.lambda0 = lambda0;
      e.train = {acc.total / acc_steps, acc.mse / acc_steps, acc.sparsity / acc_steps, acc.dead / acc_steps};
      e.layers = clt_metrics(p, store, eval_ids);
      res.history.push_back(e);
      if (on_eval) on_eval(e);
      acc = {};
      acc_steps = 0;
    }
  }
  return res;
}

std::string history_csv(const std::vector<CltEval>& history) {
  std::string out = "step,lr,lambda0,loss,mse,sparsity,dead,layer,explained_variance,dead_features,mean_l0\n";
  for (const auto& e : history)
    for (std::size_t l = 0; l < e.layers.size(); ++l)
      out += fmt::format("{},{:.6g},{:.6g},{:.6f},{:.6f},{:.6f},{:.6f},{},{:.6f},{},{:.4f}\n", e.step, e.lr,
                         e.lambda0, e.train.total, e.train.mse, e.train.sparsity, e.train.dead, l,
                         e.layers[l].explained_variance, e.layers[l].dead_features, e.layers[l].mean_l0);
  return out;
}

void save_clt(const CltParams<float>& p, const std::string& path, const nlohmann::json& extra_meta) {
  const auto& c = p.config;
  const int F = c.d_features, D = c.d_model;
  Container out;
  out.kind = "clt";
  out.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  out.meta["config"] = c;
  for (int l = 0; l < c.n_layers; ++l) {
    out.tensors.push_back({fmt::format("enc.{}.W", l), {F, D}, {p.enc_w(l), p.enc_w(l) + std::size_t(F) * D}});
    out.tensors.push_back({fmt::format("enc.{}.b", l), {F}, {p.enc_b(l), p.enc_b(l) + F}});
    NamedTensor th{fmt::format("jthresh.{}", l), {F}, {}};
    for (int n = 0; n < F; ++n) th.data.push_back(std::exp(p.log_theta(l)[n]));
    out.tensors.push_back(std::move(th));
  }
  for (int l = 0; l < c.n_layers; ++l)
    for (int k = l; k < c.n_layers; ++k) {
      // Written d_model x d_features.
      NamedTensor t{fmt::format("dec.{}.{}.W", l, k), {D, F}, std::vector<float>(std::size_t(F) * D)};
      const float* w = p.dec_w(l, k);
      for (int n = 0; n < F; ++n)
        for (int d = 0; d < D; ++d) t.data[std::size_t(d) * F + n] = w[std::size_t(n) * D + d];
      out.tensors.push_back(std::move(t));
    }
  for (int k = 0; k < c.n_layers; ++k)
    out.tensors.push_back({fmt::format("dec_bias.{}", k), {D}, {p.dec_b(k), p.dec_b(k) + D}});
  out.save(path);
}

CltParams<float> load_clt(const std::string& path) {
  const Container in = Container::load(path);
  if (in.kind != "clt") throw ValidationError(fmt::format("{}: expected a clt checkpoint, found '{}'", path, in.kind));
  const CltConfig c = in.meta.at("config").get<CltConfig>();
  c.validate();
  CltParams<float> p(c);
  const int F = c.d_features, D = c.d_model;
  auto fetch = [&](const std::string& name, std::size_t n) -> const std::vector<float>& {
    const auto& t = in.get(name);
    if (t.data.size() != n)
      throw ValidationError(fmt::format("{}: tensor '{}' has {} values, expected {}", path, name, t.data.size(), n));
    return t.data;
  };
  for (int l = 0; l < c.n_layers; ++l) {
    auto& w = fetch(fmt::format("enc.{}.W", l), std::size_t(F) * D);
    std::copy(w.begin(), w.end(), p.enc_w(l));
    auto& b = fetch(fmt::format("enc.{}.b", l), F);
    std::copy(b.begin(), b.end(), p.enc_b(l));
    auto& th = fetch(fmt::format("jthresh.{}", l), F);
    for (int n = 0; n < F; ++n) {
      if (!(th[n] > 0)) throw ValidationError(fmt::format("{}: non-positive threshold", path));
      p.log_theta(l)[n] = std::log(th[n]);
    }
  }
  for (int l = 0; l < c.n_layers; ++l)
    for (int k = l; k < c.n_layers; ++k) {
      auto& t = fetch(fmt::format("dec.{}.{}.W", l, k), std::size_t(F) * D);
      float* w = p.dec_w(l, k);
      for (int n = 0; n < F; ++n)
        for (int d = 0; d < D; ++d) w[std::size_t(n) * D + d] = t[std::size_t(d) * F + n];
    }
  for (int k = 0; k < c.n_layers; ++k) {
    auto& b = fetch(fmt::format("dec_bias.{}", k), D);
    std::copy(b.begin(), b.end(), p.dec_b(k));
  }
  if (!all_finite<float>(p.values)) throw ValidationError(fmt::format("{}: non-finite clt parameter", path));
  return p;
}

std::string clt_digest(const CltParams<float>& p) {
  Digest d;
  d.update(nlohmann::json(p.config).dump());
  d.update(p.values.data(), p.values.size() * sizeof(float));
  return d.hex();
}

#define CT_INSTANTIATE(T)                                                                               \
  template struct CltParams<T>;                                                                         \
  template CltParams<T> init_clt<T>(const CltConfig&, const std::vector<std::vector<double>>&);         \
  template void clt_encode_pre<T>(const CltParams<T>&, int, std::span<const T>, int, std::span<T>);     \
  template std::vector<T> clt_encode<T>(const CltParams<T>&, int, std::span<const T>, int);             \
  template T activate<T>(const CltParams<T>&, int, int, T);                                             \
  template std::vector<T> clt_decode<T>(const CltParams<T>&, const std::vector<std::vector<T>>&, int, int); \
  template std::vector<T> decoder_norms<T>(const CltParams<T>&, int);                                   \
  template LossParts clt_loss<T>(const CltParams<T>&, const Pairs<T>&, double);                         \
  template LossAndGrads<T> clt_loss_and_grads<T>(const CltParams<T>&, const Pairs<T>&, double);

CT_INSTANTIATE(float)
CT_INSTANTIATE(double)
#undef CT_INSTANTIATE

}  // namespace ct::clt
