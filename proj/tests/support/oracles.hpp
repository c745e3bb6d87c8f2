#pragma once

// Test-side reference implementations shared by unit and acceptance tests.
// Nothing here calls into the code it checks beyond reading recorded values.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ct/attribution.hpp"
#include "ct/clt.hpp"
#include "ct/tinylm.hpp"

namespace ct::oracle {

using attr::AttributionGraph;
using attr::Edge;
using attr::Node;
using attr::NodeKind;

// Test-side frozen model: attention patterns and LayerNorm scales come from
// the recorded pass, centering is recomputed, MLP outputs are supplied.
struct FrozenOracle {
  const lm::Params<double>& p;
  const lm::ActivationRecord<double>& r;

  struct Out {
    std::vector<std::vector<double>> h;  // LN2 output per layer
    std::vector<double> final_ln;        // LNf output, all positions
  };

  std::vector<double> ln(const std::vector<double>& x, int pos, const double* g, const double* b, double rstd) const {
    const int D = p.config.d_model;
    double mean = 0;
    for (int d = 0; d < D; ++d) mean += x[pos * D + d];
    mean /= D;
    std::vector<double> y(D);
    for (int d = 0; d < D; ++d) y[d] = g[d] * (x[pos * D + d] - mean) * rstd + b[d];
    return y;
  }

  Out run(const std::vector<double>& embed, const std::vector<std::vector<double>>& mlp_out) const {
    const auto& c = p.config;
    const int n = r.n, D = c.d_model, A = c.attn_width(), H = c.n_heads, dh = c.d_head;
    std::vector<double> x = embed;
    Out out;
    for (int b = 0; b < c.n_layers; ++b) {
      const auto& blk = p.layout.blocks[b];
      std::vector<double> v(n * A);
      for (int i = 0; i < n; ++i) {
        auto a = ln(x, i, p.at(blk.ln1_g), p.at(blk.ln1_b), r.blocks[b].ln1_rstd[i]);
        for (int o = 0; o < A; ++o) {
          double s = p.at(blk.b_qkv)[2 * A + o];
          for (int d = 0; d < D; ++d) s += p.at(blk.w_qkv)[(2 * A + o) * D + d] * a[d];
          v[i * A + o] = s;
        }
      }
      std::vector<double> nx = x;
      for (int i = 0; i < n; ++i) {
        std::vector<double> y(A, 0.0);
        for (int h = 0; h < H; ++h)
          for (int j = 0; j < n; ++j)
            for (int e = 0; e < dh; ++e) y[h * dh + e] += r.blocks[b].att[(h * n + i) * n + j] * v[j * A + h * dh + e];
        for (int d = 0; d < D; ++d) {
          double s = p.at(blk.b_o)[d];
          for (int o = 0; o < A; ++o) s += p.at(blk.w_o)[d * A + o] * y[o];
          nx[i * D + d] += s;
        }
      }
      x = nx;
      std::vector<double> h(n * D);
      for (int i = 0; i < n; ++i) {
        auto y = ln(x, i, p.at(blk.ln2_g), p.at(blk.ln2_b), r.blocks[b].ln2_rstd[i]);
        std::copy(y.begin(), y.end(), h.begin() + i * D);
      }
      out.h.push_back(h);
      for (int i = 0; i < n * D; ++i) x[i] += mlp_out[b][i];
    }
    out.final_ln.resize(n * D);
    for (int i = 0; i < n; ++i) {
      auto y = ln(x, i, p.at(p.layout.lnf_g), p.at(p.layout.lnf_b), r.lnf_rstd[i]);
      std::copy(y.begin(), y.end(), out.final_ln.begin() + i * D);
    }
    return out;
  }

  double target(const Out& o, const clt::CltParams<double>& clt, const Node& t) const {
    const int D = p.config.d_model;
    double s;
    const double* g;
    const double* x;
    if (t.kind == NodeKind::feature) {
      s = clt.enc_b(t.layer)[t.index];
      g = clt.enc_w(t.layer) + t.index * D;
      x = &o.h[t.layer][t.position * D];
    } else {
      s = 0;
      g = p.at(p.layout.w_u) + t.index * D;
      x = &o.final_ln[t.position * D];
    }
    for (int d = 0; d < D; ++d) s += g[d] * x[d];
    return s;
  }
};

inline std::vector<std::vector<double>> recorded_mlp_out(const lm::ActivationRecord<double>& r) {
  std::vector<std::vector<double>> m;
  for (const auto& b : r.blocks) m.push_back(b.mlp_out);
  return m;
}

// Edge weight measured by perturbing the source in the frozen model: scale the
// embedding, the feature's decoded write, or the error along itself.
inline double perturbation_weight(const lm::Params<double>& p, const clt::CltParams<double>& clt,
                                  const lm::ActivationRecord<double>& rec, const AttributionGraph& g,
                                  const Edge& e, double eps = 0.5) {
  const int D = p.config.d_model, layers = p.config.n_layers;
  FrozenOracle o{p, rec};
  const auto base_m = recorded_mlp_out(rec);
  const Node& s = g.nodes[e.src];
  const Node& t = g.nodes[e.dst];
  auto embed = rec.embed;
  auto m = base_m;
  if (s.kind == NodeKind::embedding) {
    for (int d = 0; d < D; ++d) embed[s.position * D + d] *= 1 + eps;
  } else if (s.kind == NodeKind::error) {
    std::vector<std::vector<double>> z(layers);
    for (int l = 0; l < layers; ++l) z[l] = clt::clt_encode<double>(clt, l, rec.blocks[l].mlp_in, rec.n);
    const auto mh = clt::clt_decode<double>(clt, z, s.layer, rec.n);
    for (int d = 0; d < D; ++d)
      m[s.layer][s.position * D + d] += eps * (rec.blocks[s.layer].mlp_out[s.position * D + d] - mh[s.position * D + d]);
  } else {
    for (int k = s.layer; k < layers; ++k)
      for (int d = 0; d < D; ++d) m[k][s.position * D + d] += eps * s.activation * clt.dec_w(s.layer, k)[s.index * D + d];
  }
  return (o.target(o.run(embed, m), clt, t) - o.target(o.run(rec.embed, base_m), clt, t)) / eps;
}

inline Node mk(NodeKind k, int layer, int pos, int idx, double act = 1) {
  Node n;
  n.kind = k;
  n.layer = layer;
  n.position = pos;
  n.index = idx;
  n.activation = act;
  return n;
}

// Layered random DAG with influence already computed.
inline AttributionGraph random_graph(Rng& rng) {
  AttributionGraph g;
  const int layers = 1 + int(rng.index(3)), per = 2 + int(rng.index(6));
  std::vector<std::vector<int>> by_layer(layers + 2);
  for (int i = 0; i < per; ++i) {
    by_layer[0].push_back(int(g.nodes.size()));
    g.nodes.push_back(mk(NodeKind::embedding, -1, i, i));
  }
  for (int l = 0; l < layers; ++l)
    for (int i = 0; i < per; ++i) {
      by_layer[l + 1].push_back(int(g.nodes.size()));
      g.nodes.push_back(mk(rng.uniform() < 0.8 ? NodeKind::feature : NodeKind::error, l, i, i, rng.uniform()));
    }
  const int logits = 1 + int(rng.index(4));
  for (int i = 0; i < logits; ++i) {
    by_layer[layers + 1].push_back(int(g.nodes.size()));
    g.nodes.push_back(mk(NodeKind::logit, layers, per - 1, i, 0.05 + rng.uniform()));
  }
  for (int t = 1; t < layers + 2; ++t)
    for (int dst : by_layer[t])
      for (int s = 0; s < t; ++s)
        for (int src : by_layer[s])
          if (rng.uniform() < 0.4) g.edges.push_back({src, dst, rng.normal() * std::exp(2 * rng.normal()), 0});
  std::sort(g.edges.begin(), g.edges.end(),
            [](const Edge& a, const Edge& b) { return a.dst != b.dst ? a.dst < b.dst : a.src < b.src; });
  attr::compute_influence(g);
  return g;
}

}  // namespace ct::oracle
