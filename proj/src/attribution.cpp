#include "ct/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace ct::attr {

namespace {

using Vec = std::vector<double>;

// Linear part of a LayerNorm with frozen statistics: g * (x - mean(x)) * rstd.
void ln_apply(const double* x, const double* g, double rstd, double* y, int d) {
  double m = 0;
  for (int j = 0; j < d; ++j) m += x[j];
  m /= d;
  for (int j = 0; j < d; ++j) y[j] = g[j] * (x[j] - m) * rstd;
}

// Transpose of ln_apply.
void ln_adjoint(const double* ybar, const double* g, double rstd, double* xbar, int d) {
  double m = 0;
  for (int j = 0; j < d; ++j) m += g[j] * ybar[j];
  m /= d;
  for (int j = 0; j < d; ++j) xbar[j] = rstd * (g[j] * ybar[j] - m);
}

struct Frozen {
  const lm::Params<double>& p;
  const lm::ActivationRecord<double>& r;
  int D, A, H, dh;

  Frozen(const lm::Params<double>& params, const lm::ActivationRecord<double>& rec)
      : p(params), r(rec), D(params.config.d_model), A(params.config.attn_width()),
        H(params.config.n_heads), dh(params.config.d_head) {}

  const double* w_v(int b) const { return p.at(p.layout.blocks[b].w_qkv) + std::size_t(2) * A * D; }
  const double* w_o(int b) const { return p.at(p.layout.blocks[b].w_o); }
  double att(int b, int h, int i, int j) const { return r.blocks[b].att[(std::size_t(h) * r.n + i) * r.n + j]; }

  // Frozen attention of block b applied to a residual perturbation over the
  // first n positions; returns the attention-output perturbation.
  Vec attention(int b, const Vec& dx, int n) const {
    const auto& blk = p.layout.blocks[b];
    Vec da(std::size_t(n) * D), dv(std::size_t(n) * A, 0.0), dy(std::size_t(n) * A, 0.0), out(std::size_t(n) * D, 0.0);
    for (int i = 0; i < n; ++i)
      ln_apply(&dx[std::size_t(i) * D], p.at(blk.ln1_g), r.blocks[b].ln1_rstd[i], &da[std::size_t(i) * D], D);
    const double* wv = w_v(b);
    for (int i = 0; i < n; ++i)
      for (int a = 0; a < A; ++a) {
        double s = 0;
        for (int d = 0; d < D; ++d) s += wv[std::size_t(a) * D + d] * da[std::size_t(i) * D + d];
        dv[std::size_t(i) * A + a] = s;
      }
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
          const double w = att(b, h, i, j);
          if (w == 0) continue;
          for (int e = 0; e < dh; ++e) dy[std::size_t(i) * A + h * dh + e] += w * dv[std::size_t(j) * A + h * dh + e];
        }
    const double* wo = w_o(b);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d) {
        double s = 0;
        for (int a = 0; a < A; ++a) s += wo[std::size_t(d) * A + a] * dy[std::size_t(i) * A + a];
        out[std::size_t(i) * D + d] = s;
      }
    return out;
  }

  // Transpose of `attention`.
  Vec attention_adjoint(int b, const Vec& lam, int n) const {
    const auto& blk = p.layout.blocks[b];
    Vec u(std::size_t(n) * A, 0.0), w(std::size_t(n) * A, 0.0), da(D), out(std::size_t(n) * D, 0.0);
    const double* wo = w_o(b);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < D; ++d) {
        const double l = lam[std::size_t(i) * D + d];
        if (l == 0) continue;
        for (int a = 0; a < A; ++a) u[std::size_t(i) * A + a] += wo[std::size_t(d) * A + a] * l;
      }
    for (int h = 0; h < H; ++h)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
          const double at = att(b, h, i, j);
          if (at == 0) continue;
          for (int e = 0; e < dh; ++e) w[std::size_t(j) * A + h * dh + e] += at * u[std::size_t(i) * A + h * dh + e];
        }
    const double* wv = w_v(b);
    for (int j = 0; j < n; ++j) {
      std::fill(da.begin(), da.end(), 0.0);
      for (int a = 0; a < A; ++a) {
        const double x = w[std::size_t(j) * A + a];
        if (x == 0) continue;
        for (int d = 0; d < D; ++d) da[d] += wv[std::size_t(a) * D + d] * x;
      }
      ln_adjoint(da.data(), p.at(blk.ln1_g), r.blocks[b].ln1_rstd[j], &out[std::size_t(j) * D], D);
    }
    return out;
  }

  // Reader LayerNorm for a read slot: LN2 of the block for odd slots, the
  // final LN for slot 2L.
  std::pair<const double*, double> reader(int read_slot, int position) const {
    const int L = p.config.n_layers;
    if (read_slot == 2 * L) return {p.at(p.layout.lnf_g), r.lnf_rstd[position]};
    if (read_slot % 2 == 1 && read_slot < 2 * L) {
      const int b = read_slot / 2;
      return {p.at(p.layout.blocks[b].ln2_g), r.blocks[b].ln2_rstd[position]};
    }
    throw ValidationError(fmt::format("slot {} is not read by a LayerNorm", read_slot));
  }

  // Adjoints of the scalar <g, reader-LN(slot read_slot)[pos]> with respect
  // to every residual slot 0..read_slot over positions 0..pos.
  std::vector<Vec> adjoints(int read_slot, int pos, const double* g) const {
    const int n = pos + 1;
    std::vector<Vec> lam(read_slot + 1, Vec(std::size_t(n) * D, 0.0));
    auto [gamma, rstd] = reader(read_slot, pos);
    ln_adjoint(g, gamma, rstd, &lam[read_slot][std::size_t(pos) * D], D);
    for (int s = read_slot; s > 0; --s) {
      if (s % 2 == 0) {
        lam[s - 1] = lam[s];  // MLP cut: identity through the skip connection
      } else {
        const int b = s / 2;
        Vec back = attention_adjoint(b, lam[s], n);
        for (std::size_t i = 0; i < back.size(); ++i) lam[s - 1][i] = lam[s][i] + back[i];
      }
    }
    return lam;
  }
};

double dot(const double* a, const double* b, int n) {
  double s = 0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::embedding: return "embedding";
    case NodeKind::feature: return "feature";
    case NodeKind::error: return "error";
    case NodeKind::logit: return "logit";
  }
  return "?";
}

NodeKind kind_from(const std::string& s) {
  if (s == "embedding") return NodeKind::embedding;
  if (s == "feature") return NodeKind::feature;
  if (s == "error") return NodeKind::error;
  if (s == "logit") return NodeKind::logit;
  throw ValidationError(fmt::format("unknown node kind '{}'", s));
}

}  // namespace

std::string Node::id() const {
  switch (kind) {
    case NodeKind::embedding: return fmt::format("emb:{}", position);
    case NodeKind::feature: return fmt::format("feat:{}:{}:{}", layer, position, index);
    case NodeKind::error: return fmt::format("err:{}:{}", layer, position);
    case NodeKind::logit: return fmt::format("logit:{}:{}", position, index);
  }
  return "";
}

std::vector<double> linearized_propagate(const lm::Params<double>& params, const lm::ActivationRecord<double>& rec,
                                         int slot, int position, std::span<const double> v, int read_slot,
                                         int read_position) {
  const int D = params.config.d_model, L = params.config.n_layers;
  if (int(v.size()) != D) throw ValidationError("injection must have d_model entries");
  if (slot < 0 || slot > 2 * L || read_slot < 0 || read_slot > 2 * L)
    throw ValidationError(fmt::format("residual slot outside [0, {}]", 2 * L));
  if (position < 0 || position >= rec.n || read_position < 0 || read_position >= rec.n)
    throw ValidationError("position outside the recorded prompt");
  Frozen fz(params, rec);
  auto [gamma, rstd] = fz.reader(read_slot, read_position);
  Vec out(D, 0.0);
  if (read_slot < slot || read_position < position) return out;
  const int n = read_position + 1;
  Vec dx(std::size_t(n) * D, 0.0);
  std::copy(v.begin(), v.end(), dx.begin() + std::size_t(position) * D);
  for (int s = slot; s < read_slot; ++s) {
    if (s % 2 == 0) {
      const int b = s / 2;  // slot 2b -> 2b+1 through attention of block b
      Vec a = fz.attention(b, dx, n);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += a[i];
    }
    // odd slot -> next even slot: the MLP is cut, nothing to add
  }
  ln_apply(&dx[std::size_t(read_position) * D], gamma, rstd, out.data(), D);
  return out;
}

double AttributionGraph::completeness_error(int node) const {
  double s = nodes[node].bias;
  for (const auto& e : edges)
    if (e.dst == node) s += e.weight;
  return s - nodes[node].target_value;
}

AttributionGraph build_attribution_graph(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                         std::span<const int> tokens, const GraphOptions& opt) {
  const auto& mc = params.config;
  const auto& cc = clt.config;
  if (cc.n_layers != mc.n_layers || cc.d_model != mc.d_model)
    throw ValidationError(fmt::format("transcoder ({} layers, width {}) does not match the model ({} layers, width {})",
                                      cc.n_layers, cc.d_model, mc.n_layers, mc.d_model));
  if (opt.top_logits < 1) throw ConfigError("top_logits must be positive");
  const int L = mc.n_layers, D = mc.d_model, V = mc.vocab_size, F = cc.d_features;
  const auto rec = lm::forward<double>(params, tokens);
  const int n = rec.n;
  const int tpos = opt.target_position < 0 ? n - 1 : opt.target_position;
  if (tpos >= n) throw ValidationError(fmt::format("target position {} outside prompt of {} tokens", tpos, n));
  Frozen fz(params, rec);

  AttributionGraph g;
  g.tokens.assign(tokens.begin(), tokens.end());
  g.target_position = tpos;

  // Transcoder activations, reconstructions and residual errors.
  std::vector<Vec> pre(L), z(L), err(L);
  for (int l = 0; l < L; ++l) {
    pre[l].resize(std::size_t(n) * F);
    clt::clt_encode_pre<double>(clt, l, rec.blocks[l].mlp_in, n, pre[l]);
    z[l] = pre[l];
    for (int i = 0; i < n; ++i)
      for (int f = 0; f < F; ++f) z[l][std::size_t(i) * F + f] = clt::activate(clt, l, f, pre[l][std::size_t(i) * F + f]);
  }
  for (int l = 0; l < L; ++l) {
    Vec mh = clt::clt_decode<double>(clt, z, l, n);
    err[l].resize(mh.size());
    for (std::size_t i = 0; i < mh.size(); ++i) err[l][i] = rec.blocks[l].mlp_out[i] - mh[i];
  }

  // Nodes. Nothing after the target position can influence it.
  std::vector<int> emb_node(n, -1);
  for (int k = 0; k <= tpos; ++k) {
    Node nd;
    nd.kind = NodeKind::embedding;
    nd.layer = -1;
    nd.position = k;
    nd.index = tokens[k];
    nd.activation = std::sqrt(dot(&rec.embed[std::size_t(k) * D], &rec.embed[std::size_t(k) * D], D));
    emb_node[k] = int(g.nodes.size());
    g.nodes.push_back(nd);
  }
  struct Feat {
    int layer, pos, index, node;
  };
  std::vector<Feat> feats;
  for (int l = 0; l < L; ++l)
    for (int k = 0; k <= tpos; ++k)
      for (int f = 0; f < F; ++f) {
        const double a = z[l][std::size_t(k) * F + f];
        if (a <= 0) continue;
        Node nd;
        nd.kind = NodeKind::feature;
        nd.layer = l;
        nd.position = k;
        nd.index = f;
        nd.activation = a;
        nd.target_value = pre[l][std::size_t(k) * F + f];
        feats.push_back({l, k, f, int(g.nodes.size())});
        g.nodes.push_back(nd);
      }
  std::vector<int> err_node(std::size_t(L) * n, -1);
  for (int l = 0; l < L; ++l)
    for (int k = 0; k <= tpos; ++k) {
      Node nd;
      nd.kind = NodeKind::error;
      nd.layer = l;
      nd.position = k;
      nd.index = -1;
      const double* e = &err[l][std::size_t(k) * D];
      nd.activation = std::sqrt(dot(e, e, D));
      err_node[std::size_t(l) * n + k] = int(g.nodes.size());
      g.nodes.push_back(nd);
    }
  {
    const double* lg = &rec.logits[std::size_t(tpos) * V];
    const double mx = *std::max_element(lg, lg + V);
    Vec prob(V);
    double s = 0;
    for (int t = 0; t < V; ++t) s += (prob[t] = std::exp(lg[t] - mx));
    for (auto& p : prob) p /= s;
    std::vector<int> order(V);
    std::iota(order.begin(), order.end(), 0);
    const int k = std::min(opt.top_logits, V);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) { return prob[a] != prob[b] ? prob[a] > prob[b] : a < b; });
    for (int i = 0; i < k; ++i) {
      Node nd;
      nd.kind = NodeKind::logit;
      nd.layer = L;
      nd.position = tpos;
      nd.index = order[i];
      nd.activation = prob[order[i]];
      nd.target_value = lg[order[i]];
      g.nodes.push_back(nd);
    }
  }

  // Constant vectors written into the residual stream: attention biases (at
  // slot 2b+1, every position) and decoder biases (at slot 2s+2).
  std::vector<Vec> attn_bias(L, Vec(D, 0.0));
  for (int b = 0; b < L; ++b) {
    const auto& blk = params.layout.blocks[b];
    const int A = mc.attn_width();
    Vec vb(A);
    const double* wv = fz.w_v(b);
    const double* bv = params.at(blk.b_qkv) + 2 * A;
    const double* beta1 = params.at(blk.ln1_b);
    for (int a = 0; a < A; ++a) vb[a] = bv[a] + dot(wv + std::size_t(a) * D, beta1, D);
    for (int d = 0; d < D; ++d) attn_bias[b][d] = params.at(blk.b_o)[d] + dot(fz.w_o(b) + std::size_t(d) * A, vb.data(), A);
  }

  std::vector<int> targets;
  for (const auto& f : feats) targets.push_back(f.node);
  for (int i = 0; i < int(g.nodes.size()); ++i)
    if (g.nodes[i].kind == NodeKind::logit) targets.push_back(i);

  std::vector<std::vector<Edge>> incoming(targets.size());
  std::vector<double> bias(targets.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
  for (int ti = 0; ti < int(targets.size()); ++ti) {
    const Node& t = g.nodes[targets[ti]];
    int read_slot;
    const double* gvec;
    double b0;
    if (t.kind == NodeKind::feature) {
      read_slot = slot_mlp_input(t.layer);
      gvec = clt.enc_w(t.layer) + std::size_t(t.index) * D;
      b0 = clt.enc_b(t.layer)[t.index] + dot(gvec, params.at(params.layout.blocks[t.layer].ln2_b), D);
    } else {
      read_slot = 2 * L;
      gvec = params.at(params.layout.w_u) + std::size_t(t.index) * D;
      b0 = dot(gvec, params.at(params.layout.lnf_b), D);
    }
    const int pos = t.position;
    const auto lam = fz.adjoints(read_slot, pos, gvec);
    auto at = [&](int slot, int k) { return &lam[slot][std::size_t(k) * D]; };
    auto& out = incoming[ti];
    for (int k = 0; k <= pos; ++k) {
      const double w = dot(&rec.embed[std::size_t(k) * D], at(0, k), D);
      if (std::abs(w) > opt.min_edge) out.push_back({emb_node[k], targets[ti], w, w});
    }
    for (const auto& f : feats) {
      if (f.pos > pos || slot_after_mlp(f.layer) > read_slot) continue;
      double raw = 0;
      for (int s = f.layer; s < L && slot_after_mlp(s) <= read_slot; ++s)
        raw += dot(clt.dec_w(f.layer, s) + std::size_t(f.index) * D, at(slot_after_mlp(s), f.pos), D);
      const double w = raw * g.nodes[f.node].activation;
      if (std::abs(w) > opt.min_edge) out.push_back({f.node, targets[ti], w, raw});
    }
    for (int l = 0; l < L && slot_after_mlp(l) <= read_slot; ++l)
      for (int k = 0; k <= pos; ++k) {
        const double w = dot(&err[l][std::size_t(k) * D], at(slot_after_mlp(l), k), D);
        if (std::abs(w) > opt.min_edge) out.push_back({err_node[std::size_t(l) * n + k], targets[ti], w, w});
      }
    double bsum = b0;
    for (int k = 0; k <= pos; ++k) {
      for (int s = 0; s < L && slot_after_mlp(s) <= read_slot; ++s) bsum += dot(clt.dec_b(s), at(slot_after_mlp(s), k), D);
      for (int b = 0; b < L && slot_mlp_input(b) <= read_slot; ++b)
        bsum += dot(attn_bias[b].data(), at(slot_mlp_input(b), k), D);
    }
    bias[ti] = bsum;
    std::sort(out.begin(), out.end(), [](const Edge& a, const Edge& b) { return a.src < b.src; });
  }
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    g.nodes[targets[ti]].bias = bias[ti];
    g.edges.insert(g.edges.end(), incoming[ti].begin(), incoming[ti].end());
  }
  std::stable_sort(g.edges.begin(), g.edges.end(),
                   [](const Edge& a, const Edge& b) { return a.dst != b.dst ? a.dst < b.dst : a.src < b.src; });
  compute_influence(g);
  return g;
}

void compute_influence(AttributionGraph& g) {
  const int N = int(g.nodes.size());
  std::vector<double> in_mass(N, 0.0);
  for (const auto& e : g.edges) in_mass[e.dst] += std::abs(e.weight);
  std::vector<double> cur(N, 0.0), total(N, 0.0);
  double logit_mass = 0;
  for (const auto& nd : g.nodes)
    if (nd.kind == NodeKind::logit) logit_mass += nd.activation;
  for (int i = 0; i < N; ++i)
    if (g.nodes[i].kind == NodeKind::logit) cur[i] = logit_mass > 0 ? g.nodes[i].activation / logit_mass : 0.0;
  for (int i = 0; i < N; ++i) total[i] = cur[i];
  for (int iter = 0; iter < N + 1; ++iter) {
    std::vector<double> next(N, 0.0);
    for (const auto& e : g.edges)
      if (in_mass[e.dst] > 0 && cur[e.dst] != 0) next[e.src] += std::abs(e.weight) / in_mass[e.dst] * cur[e.dst];
    double mx = 0;
    for (int i = 0; i < N; ++i) {
      total[i] += next[i];
      mx = std::max(mx, next[i]);
    }
    cur.swap(next);
    if (mx < 1e-6) break;
  }
  for (int i = 0; i < N; ++i) g.nodes[i].influence = total[i];
}

bool influence_order(const Node& a, const Node& b) {
  if (a.influence != b.influence) return a.influence > b.influence;
  if (a.layer != b.layer) return a.layer < b.layer;
  if (a.position != b.position) return a.position < b.position;
  return a.index < b.index;
}

AttributionGraph prune_graph(const AttributionGraph& g, double node_keep, double edge_keep) {
  if (!(node_keep >= 0 && node_keep <= 1 && edge_keep >= 0 && edge_keep <= 1))
    throw ConfigError("pruning thresholds must lie in [0, 1]");
  const int N = int(g.nodes.size());
  std::vector<int> cand;
  for (int i = 0; i < N; ++i)
    if (g.nodes[i].kind != NodeKind::logit) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) { return influence_order(g.nodes[a], g.nodes[b]); });
  double total = 0;
  for (int i : cand) total += g.nodes[i].influence;

  std::vector<char> keep(N, 0);
  for (int i = 0; i < N; ++i)
    if (g.nodes[i].kind == NodeKind::logit) keep[i] = 1;
  double kept_mass = 0;
  if (node_keep >= 1.0) {
    for (int i : cand) keep[i] = 1;
    kept_mass = total;
  } else {
    for (int i : cand) {
      if (kept_mass >= node_keep * total) break;
      keep[i] = 1;
      kept_mass += g.nodes[i].influence;
    }
  }

  std::vector<int> eidx;
  for (int e = 0; e < int(g.edges.size()); ++e)
    if (keep[g.edges[e].src] && keep[g.edges[e].dst]) eidx.push_back(e);
  auto score = [&](int e) { return std::abs(g.edges[e].weight) * g.nodes[g.edges[e].dst].influence; };
  std::stable_sort(eidx.begin(), eidx.end(), [&](int a, int b) { return score(a) > score(b); });
  double etotal = 0;
  for (int e : eidx) etotal += score(e);
  std::vector<int> kept_edges;
  double emass = 0;
  if (edge_keep >= 1.0) {
    kept_edges = eidx;
    emass = etotal;
  } else {
    for (int e : eidx) {
      if (emass >= edge_keep * etotal) break;
      kept_edges.push_back(e);
      emass += score(e);
    }
  }
  std::sort(kept_edges.begin(), kept_edges.end());

  PruneReport rep;
  rep.node_keep = node_keep;
  rep.edge_keep = edge_keep;
  rep.nodes_before = N;
  rep.edges_before = int(g.edges.size());
  rep.retained_mass = total > 0 ? kept_mass / total : 1.0;
  rep.edge_mass_retained = etotal > 0 ? emass / etotal : 1.0;

  AttributionGraph out;
  out.prompt = g.prompt;
  out.tokens = g.tokens;
  out.token_text = g.token_text;
  out.target_position = g.target_position;
  std::vector<int> remap(N, -1);
  for (int i = 0; i < N; ++i)
    if (keep[i]) {
      remap[i] = int(out.nodes.size());
      out.nodes.push_back(g.nodes[i]);
    }
  for (int e : kept_edges) {
    Edge ed = g.edges[e];
    if (remap[ed.src] < 0 || remap[ed.dst] < 0) continue;
    ed.src = remap[ed.src];
    ed.dst = remap[ed.dst];
    out.edges.push_back(ed);
  }
  rep.nodes_after = int(out.nodes.size());
  rep.edges_after = int(out.edges.size());
  out.pruning = rep;
  return out;
}

nlohmann::json graph_to_json(const AttributionGraph& g, const std::map<clt::FeatureKey, NodeAnnotation>& multilingual) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& nd : g.nodes) {
    nlohmann::json j = {{"id", nd.id()},
                        {"kind", kind_name(nd.kind)},
                        {"layer", nd.layer},
                        {"position", nd.position},
                        {"feature_index", nd.kind == NodeKind::feature ? nlohmann::json(nd.index) : nlohmann::json(nullptr)},
                        {"activation", nd.activation},
                        {"influence", nd.influence},
                        {"target_value", nd.target_value},
                        {"bias", nd.bias}};
    if (nd.kind == NodeKind::embedding || nd.kind == NodeKind::logit) j["token"] = nd.index;
    if (nd.kind == NodeKind::feature) {
      auto it = multilingual.find({nd.layer, nd.index});
      if (it != multilingual.end())
        j["multilingual"] = {{"distribution", it->second.distribution}, {"entropy", it->second.entropy}};
    }
    nodes.push_back(std::move(j));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"src", g.nodes[e.src].id()}, {"dst", g.nodes[e.dst].id()}, {"weight", e.weight}, {"raw_weight", e.raw_weight}});
  nlohmann::json j = {{"version", kGraphSchemaVersion},
                      {"prompt", g.prompt},
                      {"tokens", g.tokens},
                      {"token_text", g.token_text},
                      {"target_position", g.target_position},
                      {"nodes", nodes},
                      {"edges", edges}};
  if (g.pruning) {
    const auto& p = *g.pruning;
    j["pruning"] = {{"node_keep", p.node_keep},
                    {"edge_keep", p.edge_keep},
                    {"retained_mass", p.retained_mass},
                    {"edge_mass_retained", p.edge_mass_retained},
                    {"edge_effect", "abs(weight) * influence(target)"},
                    {"nodes_before", p.nodes_before},
                    {"nodes_after", p.nodes_after},
                    {"edges_before", p.edges_before},
                    {"edges_after", p.edges_after}};
  } else {
    j["pruning"] = nullptr;
  }
  return j;
}

AttributionGraph graph_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kGraphSchemaVersion)
      throw ValidationError(fmt::format("graph schema version {} unsupported", j.at("version").get<int>()));
    AttributionGraph g;
    g.prompt = j.at("prompt").get<std::string>();
    g.tokens = j.at("tokens").get<std::vector<int>>();
    g.token_text = j.value("token_text", std::vector<std::string>{});
    g.target_position = j.value("target_position", 0);
    std::map<std::string, int> ids;
    for (const auto& jn : j.at("nodes")) {
      Node nd;
      nd.kind = kind_from(jn.at("kind").get<std::string>());
      nd.layer = jn.at("layer").get<int>();
      nd.position = jn.at("position").get<int>();
      if (nd.kind == NodeKind::feature) nd.index = jn.at("feature_index").get<int>();
      else if (jn.contains("token")) nd.index = jn.at("token").get<int>();
      else nd.index = -1;
      nd.activation = jn.at("activation").get<double>();
      nd.influence = jn.at("influence").get<double>();
      nd.target_value = jn.value("target_value", 0.0);
      nd.bias = jn.value("bias", 0.0);
      ids[jn.at("id").get<std::string>()] = int(g.nodes.size());
      g.nodes.push_back(nd);
    }
    for (const auto& je : j.at("edges")) {
      auto s = ids.find(je.at("src").get<std::string>()), d = ids.find(je.at("dst").get<std::string>());
      if (s == ids.end() || d == ids.end()) throw ValidationError("graph edge references an unknown node");
      g.edges.push_back({s->second, d->second, je.at("weight").get<double>(), je.at("raw_weight").get<double>()});
    }
    if (j.contains("pruning") && !j["pruning"].is_null()) {
      const auto& p = j["pruning"];
      PruneReport r;
      r.node_keep = p.at("node_keep").get<double>();
      r.edge_keep = p.at("edge_keep").get<double>();
      r.retained_mass = p.at("retained_mass").get<double>();
      r.edge_mass_retained = p.value("edge_mass_retained", 1.0);
      r.nodes_before = p.value("nodes_before", 0);
      r.nodes_after = p.value("nodes_after", 0);
      r.edges_before = p.value("edges_before", 0);
      r.edges_after = p.value("edges_after", 0);
      g.pruning = r;
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("malformed graph JSON: {}", e.what()));
  }
}

}  // namespace ct::attr
