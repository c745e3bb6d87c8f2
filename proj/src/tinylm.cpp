#include "ct/tinylm.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ct/container.hpp"
#include "ct/kernels.hpp"

namespace ct::lm {

namespace k = ct::kernels;

namespace {
constexpr double kLnEps = 1e-5;
constexpr int kGradChunks = 8;
}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(fmt::format("model config: {} must be positive (got {})", name, v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(d_ffn, "d_ffn");
  positive(vocab_size, "vocab_size");
  if (context_len < 16) throw ConfigError(fmt::format("model config: context_len {} < 16", context_len));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0, 1)");
}

long ModelConfig::parameter_count() const {
  const long D = d_model, A = attn_width(), F = d_ffn, V = vocab_size, T = context_len;
  const long per_block = 2 * D + (3 * A * D + 3 * A) + (D * A + D) + 2 * D + (F * D + F) + (D * F + D);
  return V * D + T * D + n_layers * per_block + 2 * D + V * D;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
                     {"n_heads", c.n_heads},     {"d_head", c.d_head},
                     {"d_ffn", c.d_ffn},         {"vocab_size", c.vocab_size},
                     {"context_len", c.context_len}, {"dropout", c.dropout},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_head = j.value("d_head", d.d_head);
  c.d_ffn = j.value("d_ffn", d.d_ffn);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_len = j.value("context_len", d.context_len);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

Layout::Layout(const ModelConfig& c) {
  c.validate();
  const int D = c.d_model, A = c.attn_width(), F = c.d_ffn, V = c.vocab_size;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int s : shape) n *= std::size_t(s);
    const bool decay = shape.size() == 2;
    slots.push_back({std::move(name), std::move(shape), total, n, decay});
    total += n;
    return slots.back().offset;
  };
  wte = add("wte", {V, D});
  wpe = add("wpe", {c.context_len, D});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = fmt::format("blocks.{}.", l);
    Block b;
    b.ln1_g = add(p + "ln1.g", {D});
    b.ln1_b = add(p + "ln1.b", {D});
    b.w_qkv = add(p + "attn.w_qkv", {3 * A, D});
    b.b_qkv = add(p + "attn.b_qkv", {3 * A});
    b.w_o = add(p + "attn.w_o", {D, A});
    b.b_o = add(p + "attn.b_o", {D});
    b.ln2_g = add(p + "ln2.g", {D});
    b.ln2_b = add(p + "ln2.b", {D});
    b.w_fc = add(p + "mlp.w_fc", {F, D});
    b.b_fc = add(p + "mlp.b_fc", {F});
    b.w_proj = add(p + "mlp.w_proj", {D, F});
    b.b_proj = add(p + "mlp.b_proj", {D});
    blocks.push_back(b);
  }
  lnf_g = add("lnf.g", {D});
  lnf_b = add("lnf.b", {D});
  w_u = add("w_u", {V, D});
}

template <typename T>
Params<T> init_model(const ModelConfig& config) {
  Params<T> p(config);
  Rng rng(config.seed ^ 0x6C6D5F696E6974ULL);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  for (const auto& s : p.layout.slots) {
    T* w = p.at(s.offset);
    const bool is_gain = s.name.ends_with(".g");
    if (is_gain) {
      std::fill(w, w + s.size, T(1));
    } else if (s.shape.size() == 2) {
      const bool resid_proj = s.name.ends_with("w_o") || s.name.ends_with("w_proj");
      const double sd = resid_proj ? std_resid : std_base;
      for (std::size_t i = 0; i < s.size; ++i) w[i] = T(rng.normal() * sd);
    }
  }
  return p;
}

template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

namespace {

template <typename T>
void layernorm_forward(const T* x, const T* g, const T* b, T* y, T* mean, T* rstd, int n, int d) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + std::size_t(i) * d;
    T m = 0;
    for (int j = 0; j < d; ++j) m += xi[j];
    m /= T(d);
    T v = 0;
    for (int j = 0; j < d; ++j) v += (xi[j] - m) * (xi[j] - m);
    v /= T(d);
    const T r = T(1) / std::sqrt(v + T(kLnEps));
    mean[i] = m;
    rstd[i] = r;
    T* yi = y + std::size_t(i) * d;
    for (int j = 0; j < d; ++j) yi[j] = (xi[j] - m) * r * g[j] + b[j];
  }
}

// Accumulates dx, dg, db.
template <typename T>
void layernorm_backward(const T* dy, const T* x, const T* g, const T* mean, const T* rstd, T* dx, T* dg,
                        T* db, int n, int d) {
  for (int i = 0; i < n; ++i) {
    const T* xi = x + std::size_t(i) * d;
    const T* dyi = dy + std::size_t(i) * d;
    T* dxi = dx + std::size_t(i) * d;
    T mean_dn = 0, mean_dn_norm = 0;
    for (int j = 0; j < d; ++j) {
      const T norm = (xi[j] - mean[i]) * rstd[i];
      const T dn = dyi[j] * g[j];
      mean_dn += dn;
      mean_dn_norm += dn * norm;
      dg[j] += dyi[j] * norm;
      db[j] += dyi[j];
    }
    mean_dn /= T(d);
    mean_dn_norm /= T(d);
    for (int j = 0; j < d; ++j) {
      const T norm = (xi[j] - mean[i]) * rstd[i];
      const T dn = dyi[j] * g[j];
      dxi[j] += rstd[i] * (dn - mean_dn - norm * mean_dn_norm);
    }
  }
}

template <typename T>
void add_row_sums(const T* m, T* out, int n, int d) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += m[std::size_t(i) * d + j];
}

template <typename T>
std::vector<T> dropout_mask(int count, double rate, Rng& rng) {
  std::vector<T> mask(count);
  const T keep = T(1.0 / (1.0 - rate));
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep;
  return mask;
}

}  // namespace

template <typename T>
ActivationRecord<T> forward(const Params<T>& p, std::span<const int> tokens, const MlpHook<T>& hook,
                            const ForwardOptions& opt) {
  const auto& c = p.config;
  const int n = int(tokens.size());
  if (n < 1) throw ValidationError("forward: empty token sequence");
  if (n > c.context_len)
    throw ValidationError(fmt::format("forward: {} tokens exceed context_len {}", n, c.context_len));
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size)
      throw ValidationError(fmt::format("forward: token id {} outside vocabulary of {}", t, c.vocab_size));

  const int D = c.d_model, A = c.attn_width(), F = c.d_ffn, V = c.vocab_size, H = c.n_heads,
            dh = c.d_head;
  const auto& L = p.layout;
  const bool drop = opt.train && c.dropout > 0.0;
  Rng drop_rng(opt.dropout_seed);

  ActivationRecord<T> r;
  r.n = n;
  r.tokens.assign(tokens.begin(), tokens.end());
  r.embed.resize(std::size_t(n) * D);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < D; ++j)
      r.embed[i * D + j] = p.at(L.wte)[std::size_t(tokens[i]) * D + j] + p.at(L.wpe)[std::size_t(i) * D + j];

  std::vector<T> x = r.embed;
  const T scale = T(1) / std::sqrt(T(dh));
  r.blocks.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& Lb = L.blocks[l];
    auto& b = r.blocks[l];
    b.resid_pre = x;
    b.ln1_out.resize(n * D);
    b.ln1_mean.resize(n);
    b.ln1_rstd.resize(n);
    layernorm_forward(x.data(), p.at(Lb.ln1_g), p.at(Lb.ln1_b), b.ln1_out.data(), b.ln1_mean.data(),
                      b.ln1_rstd.data(), n, D);
    b.qkv.resize(std::size_t(n) * 3 * A);
    k::matmul_nt<T>(b.qkv, b.ln1_out, p.slice(Lb.w_qkv, 3 * A * D), p.at(Lb.b_qkv), n, 3 * A, D);

    b.att.assign(std::size_t(H) * n * n, T(0));
    b.attn_y.assign(std::size_t(n) * A, T(0));
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const T* q = b.qkv.data() + std::size_t(i) * 3 * A + h * dh;
        T* row = b.att.data() + (std::size_t(h) * n + i) * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T* kv = b.qkv.data() + std::size_t(j) * 3 * A + A + h * dh;
          row[j] = k::dot(q, kv, dh) * scale;
          mx = std::max(mx, row[j]);
        }
        T sum = 0;
        for (int j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const T inv = T(1) / sum;
        T* y = b.attn_y.data() + std::size_t(i) * A + h * dh;
        for (int j = 0; j <= i; ++j) {
          row[j] *= inv;
          k::axpy(row[j], b.qkv.data() + std::size_t(j) * 3 * A + 2 * A + h * dh, y, dh);
        }
      }
    }
    b.attn_out.resize(std::size_t(n) * D);
    k::matmul_nt<T>(b.attn_out, b.attn_y, p.slice(Lb.w_o, D * A), p.at(Lb.b_o), n, D, A);
    if (drop) b.dropout_attn = dropout_mask<T>(n * D, c.dropout, drop_rng);
    b.resid_mid.resize(std::size_t(n) * D);
    for (int i = 0; i < n * D; ++i)
      b.resid_mid[i] = x[i] + (drop ? b.dropout_attn[i] * b.attn_out[i] : b.attn_out[i]);

    b.mlp_in.resize(std::size_t(n) * D);
    b.ln2_mean.resize(n);
    b.ln2_rstd.resize(n);
    layernorm_forward(b.resid_mid.data(), p.at(Lb.ln2_g), p.at(Lb.ln2_b), b.mlp_in.data(),
                      b.ln2_mean.data(), b.ln2_rstd.data(), n, D);
    b.fc_pre.resize(std::size_t(n) * F);
    k::matmul_nt<T>(b.fc_pre, b.mlp_in, p.slice(Lb.w_fc, F * D), p.at(Lb.b_fc), n, F, D);
    b.fc_act.resize(b.fc_pre.size());
    for (std::size_t i = 0; i < b.fc_pre.size(); ++i) b.fc_act[i] = gelu(b.fc_pre[i]);
    b.mlp_out.resize(std::size_t(n) * D);
    k::matmul_nt<T>(b.mlp_out, b.fc_act, p.slice(Lb.w_proj, D * F), p.at(Lb.b_proj), n, D, F);
    if (hook) hook(l, b.mlp_in, b.mlp_out);
    if (drop) b.dropout_mlp = dropout_mask<T>(n * D, c.dropout, drop_rng);
    b.resid_post.resize(std::size_t(n) * D);
    for (int i = 0; i < n * D; ++i)
      b.resid_post[i] = b.resid_mid[i] + (drop ? b.dropout_mlp[i] * b.mlp_out[i] : b.mlp_out[i]);
    x = b.resid_post;
  }
  r.lnf_out.resize(std::size_t(n) * D);
  r.lnf_mean.resize(n);
  r.lnf_rstd.resize(n);
  layernorm_forward(x.data(), p.at(L.lnf_g), p.at(L.lnf_b), r.lnf_out.data(), r.lnf_mean.data(),
                    r.lnf_rstd.data(), n, D);
  r.logits.resize(std::size_t(n) * V);
  k::matmul_nt<T>(r.logits, r.lnf_out, p.slice(L.w_u, std::size_t(V) * D), nullptr, n, V, D);
  return r;
}

template <typename T>
void backward(const Params<T>& p, const ActivationRecord<T>& r, std::span<const T> dlogits,
              Params<T>& g) {
  const auto& c = p.config;
  const int n = r.n, D = c.d_model, A = c.attn_width(), F = c.d_ffn, V = c.vocab_size, H = c.n_heads,
            dh = c.d_head;
  const auto& L = p.layout;
  const T scale = T(1) / std::sqrt(T(dh));

  std::vector<T> dlnf(std::size_t(n) * D, T(0));
  k::matmul_nn<T>(dlnf, dlogits, p.slice(L.w_u, std::size_t(V) * D), n, D, V);
  k::matmul_tn<T>(g.slice(L.w_u, std::size_t(V) * D), dlogits, r.lnf_out, n, D, V);
  std::vector<T> dx(std::size_t(n) * D, T(0));
  const std::vector<T>& x_final = c.n_layers > 0 ? r.blocks.back().resid_post : r.embed;
  layernorm_backward(dlnf.data(), x_final.data(), p.at(L.lnf_g), r.lnf_mean.data(), r.lnf_rstd.data(),
                     dx.data(), g.at(L.lnf_g), g.at(L.lnf_b), n, D);

  std::vector<T> dmlp_out(std::size_t(n) * D), dfc(std::size_t(n) * F), dmlp_in(std::size_t(n) * D);
  std::vector<T> dattn_out(std::size_t(n) * D), dattn_y(std::size_t(n) * A), dqkv(std::size_t(n) * 3 * A);
  std::vector<T> dln1(std::size_t(n) * D);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& Lb = L.blocks[l];
    const auto& b = r.blocks[l];
    // resid_post = resid_mid + drop(mlp_out)
    for (int i = 0; i < n * D; ++i) dmlp_out[i] = b.dropout_mlp.empty() ? dx[i] : dx[i] * b.dropout_mlp[i];
    k::matmul_tn<T>(g.slice(Lb.w_proj, D * F), dmlp_out, b.fc_act, n, F, D);
    add_row_sums(dmlp_out.data(), g.at(Lb.b_proj), n, D);
    std::fill(dfc.begin(), dfc.end(), T(0));
    k::matmul_nn<T>(dfc, dmlp_out, p.slice(Lb.w_proj, D * F), n, F, D);
    for (std::size_t i = 0; i < dfc.size(); ++i) dfc[i] *= gelu_grad(b.fc_pre[i]);
    k::matmul_tn<T>(g.slice(Lb.w_fc, F * D), dfc, b.mlp_in, n, D, F);
    add_row_sums(dfc.data(), g.at(Lb.b_fc), n, F);
    std::fill(dmlp_in.begin(), dmlp_in.end(), T(0));
    k::matmul_nn<T>(dmlp_in, dfc, p.slice(Lb.w_fc, F * D), n, D, F);
    layernorm_backward(dmlp_in.data(), b.resid_mid.data(), p.at(Lb.ln2_g), b.ln2_mean.data(),
                       b.ln2_rstd.data(), dx.data(), g.at(Lb.ln2_g), g.at(Lb.ln2_b), n, D);

    // resid_mid = resid_pre + drop(attn_out)
    for (int i = 0; i < n * D; ++i)
      dattn_out[i] = b.dropout_attn.empty() ? dx[i] : dx[i] * b.dropout_attn[i];
    k::matmul_tn<T>(g.slice(Lb.w_o, D * A), dattn_out, b.attn_y, n, A, D);
    add_row_sums(dattn_out.data(), g.at(Lb.b_o), n, D);
    std::fill(dattn_y.begin(), dattn_y.end(), T(0));
    k::matmul_nn<T>(dattn_y, dattn_out, p.slice(Lb.w_o, D * A), n, A, D);

    std::fill(dqkv.begin(), dqkv.end(), T(0));
    std::vector<T> datt(n);
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const T* row = b.att.data() + (std::size_t(h) * n + i) * n;
        const T* dy = dattn_y.data() + std::size_t(i) * A + h * dh;
        T s = 0;
        for (int j = 0; j <= i; ++j) {
          const T* v = b.qkv.data() + std::size_t(j) * 3 * A + 2 * A + h * dh;
          datt[j] = k::dot(dy, v, dh);
          s += row[j] * datt[j];
          k::axpy(row[j], dy, dqkv.data() + std::size_t(j) * 3 * A + 2 * A + h * dh, dh);
        }
        const T* q = b.qkv.data() + std::size_t(i) * 3 * A + h * dh;
        T* dq = dqkv.data() + std::size_t(i) * 3 * A + h * dh;
        for (int j = 0; j <= i; ++j) {
          const T ds = row[j] * (datt[j] - s) * scale;
          if (ds == T(0)) continue;
          const T* kv = b.qkv.data() + std::size_t(j) * 3 * A + A + h * dh;
          k::axpy(ds, kv, dq, dh);
          k::axpy(ds, q, dqkv.data() + std::size_t(j) * 3 * A + A + h * dh, dh);
        }
      }
    }
    k::matmul_tn<T>(g.slice(Lb.w_qkv, 3 * A * D), dqkv, b.ln1_out, n, D, 3 * A);
    add_row_sums(dqkv.data(), g.at(Lb.b_qkv), n, 3 * A);
    std::fill(dln1.begin(), dln1.end(), T(0));
    k::matmul_nn<T>(dln1, dqkv, p.slice(Lb.w_qkv, 3 * A * D), n, D, 3 * A);
    layernorm_backward(dln1.data(), b.resid_pre.data(), p.at(Lb.ln1_g), b.ln1_mean.data(),
                       b.ln1_rstd.data(), dx.data(), g.at(Lb.ln1_g), g.at(Lb.ln1_b), n, D);
  }
  for (int i = 0; i < n; ++i) {
    k::axpy(T(1), dx.data() + std::size_t(i) * D, g.at(L.wte) + std::size_t(r.tokens[i]) * D, D);
    k::axpy(T(1), dx.data() + std::size_t(i) * D, g.at(L.wpe) + std::size_t(i) * D, D);
  }
}

namespace {

long count_targets(const Batch& batch) {
  long n = 0;
  for (const auto& row : batch.rows)
    for (std::size_t i = 1; i < row.size(); ++i)
      if (row[i] != batch.pad_id) ++n;
  return n;
}

// Cross-entropy over one row; fills dlogits scaled by 1/total when requested.
template <typename T>
double row_loss(const ActivationRecord<T>& r, const std::vector<int>& row, int pad_id, int V,
                std::vector<T>* dlogits, double inv_total) {
  double loss = 0;
  if (dlogits) dlogits->assign(r.logits.size(), T(0));
  for (int i = 0; i + 1 < int(row.size()); ++i) {
    const int target = row[i + 1];
    if (target == pad_id) continue;
    if (target < 0 || target >= V) throw ValidationError(fmt::format("target id {} outside vocabulary", target));
    const T* z = r.logits.data() + std::size_t(i) * V;
    const T mx = *std::max_element(z, z + V);
    double sum = 0;
    for (int v = 0; v < V; ++v) sum += std::exp(double(z[v] - mx));
    const double lse = std::log(sum) + double(mx);
    loss += lse - double(z[target]);
    if (dlogits) {
      T* d = dlogits->data() + std::size_t(i) * V;
      for (int v = 0; v < V; ++v) d[v] = T(std::exp(double(z[v]) - lse) * inv_total);
      d[target] -= T(inv_total);
    }
  }
  return loss;
}

std::span<const int> inputs_of(const std::vector<int>& row) {
  return {row.data(), row.size() - 1};
}

}  // namespace

template <typename T>
double loss_only(const Params<T>& p, const Batch& batch) {
  const long total = count_targets(batch);
  if (total == 0) throw ValidationError("batch has no unmasked target positions");
  double loss = 0;
  for (const auto& row : batch.rows) {
    if (row.size() < 2) continue;
    auto rec = forward(p, inputs_of(row));
    loss += row_loss<T>(rec, row, batch.pad_id, p.config.vocab_size, nullptr, 0.0);
  }
  return loss / double(total);
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Params<T>& p, const Batch& batch, const ForwardOptions& opt) {
  const long total = count_targets(batch);
  if (total == 0) throw ValidationError("batch has no unmasked target positions");
  const double inv_total = 1.0 / double(total);
  const int rows = int(batch.rows.size());
  const int chunks = std::min(rows, kGradChunks);
  std::vector<Params<T>> partial(chunks, Params<T>(p.config));
  std::vector<double> partial_loss(chunks, 0.0);

  // Fixed chunk boundaries and an ordered reduction keep results independent
  // of the thread count.
#pragma omp parallel for schedule(static, 1)
  for (int ch = 0; ch < chunks; ++ch) {
    const int lo = int(long(rows) * ch / chunks), hi = int(long(rows) * (ch + 1) / chunks);
    std::vector<T> dlogits;
    for (int i = lo; i < hi; ++i) {
      const auto& row = batch.rows[i];
      if (row.size() < 2) continue;
      ForwardOptions o = opt;
      o.dropout_seed = opt.dropout_seed * 1000003ULL + std::uint64_t(i);
      auto rec = forward(p, inputs_of(row), {}, o);
      partial_loss[ch] += row_loss<T>(rec, row, batch.pad_id, p.config.vocab_size, &dlogits, inv_total);
      backward(p, rec, std::span<const T>(dlogits), partial[ch]);
    }
  }
  LossAndGrads<T> out{0.0, total, std::move(partial[0])};
  out.loss = partial_loss[0];
  for (int ch = 1; ch < chunks; ++ch) {
    out.loss += partial_loss[ch];
    for (std::size_t i = 0; i < out.grads.values.size(); ++i) out.grads.values[i] += partial[ch].values[i];
  }
  out.loss *= inv_total;
  return out;
}

void save_checkpoint(const Params<float>& p, const std::string& path, const nlohmann::json& extra_meta) {
  Container c;
  c.kind = "lm";
  c.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  c.meta["config"] = p.config;
  for (const auto& s : p.layout.slots) {
    NamedTensor t;
    t.name = s.name;
    t.shape.assign(s.shape.begin(), s.shape.end());
    t.data.assign(p.at(s.offset), p.at(s.offset) + s.size);
    c.tensors.push_back(std::move(t));
  }
  c.save(path);
}

void save_checkpoint(const Params<float>& p, const std::string& path) {
  save_checkpoint(p, path, nlohmann::json::object());
}

Params<float> load_checkpoint(const std::string& path) {
  const Container c = Container::load(path);
  if (c.kind != "lm") throw ValidationError(fmt::format("{}: expected an lm checkpoint, found '{}'", path, c.kind));
  ModelConfig cfg = c.meta.at("config").get<ModelConfig>();
  Params<float> p(cfg);
  for (const auto& s : p.layout.slots) {
    const auto& t = c.get(s.name);
    if (t.data.size() != s.size)
      throw ValidationError(fmt::format("{}: tensor '{}' has {} values, expected {}", path, s.name,
                                        t.data.size(), s.size));
    std::copy(t.data.begin(), t.data.end(), p.at(s.offset));
  }
  return p;
}

std::string model_digest(const Params<float>& p) {
  Digest d;
  d.update(nlohmann::json(p.config).dump());
  d.update(p.values.data(), p.values.size() * sizeof(float));
  return d.hex();
}

template Params<float> init_model<float>(const ModelConfig&);
template Params<double> init_model<double>(const ModelConfig&);
template float gelu<float>(float);
template double gelu<double>(double);
template float gelu_grad<float>(float);
template double gelu_grad<double>(double);
template ActivationRecord<float> forward<float>(const Params<float>&, std::span<const int>,
                                                const MlpHook<float>&, const ForwardOptions&);
template ActivationRecord<double> forward<double>(const Params<double>&, std::span<const int>,
                                                  const MlpHook<double>&, const ForwardOptions&);
template void backward<float>(const Params<float>&, const ActivationRecord<float>&, std::span<const float>,
                              Params<float>&);
template void backward<double>(const Params<double>&, const ActivationRecord<double>&,
                               std::span<const double>, Params<double>&);
template double loss_only<float>(const Params<float>&, const Batch&);
template double loss_only<double>(const Params<double>&, const Batch&);
template LossAndGrads<float> loss_and_grads<float>(const Params<float>&, const Batch&, const ForwardOptions&);
template LossAndGrads<double> loss_and_grads<double>(const Params<double>&, const Batch&,
                                                     const ForwardOptions&);

}  // namespace ct::lm
