#pragma once

// Attribution graphs over a frozen linearization of the LM. Attention
// patterns and LayerNorm statistics are taken from a recorded forward pass and
// held fixed; MLPs are cut, so all MLP influence is carried by transcoder
// features and per-site error nodes. Under these constraints every target
// (a feature pre-activation or a logit) is an exact linear function of the
// sources plus constant bias paths.
//
// Residual slots: slot 0 is the embedding output; for block l, slot 2l+1 is
// the stream after attention (LN2 reads it) and slot 2l+2 after the MLP.
// Slot 2L is what the final LayerNorm reads.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ct/clt.hpp"
#include "ct/tinylm.hpp"

namespace ct::attr {

inline int slot_after_mlp(int layer) { return 2 * layer + 2; }
inline int slot_mlp_input(int layer) { return 2 * layer + 1; }

// Pushes a residual perturbation `v` added at (slot, position) forward through
// the frozen model and returns the resulting perturbation of the vector read
// at `read_slot`, position `read_position`, after that reader's frozen
// LayerNorm scaling (LN2 of the block for odd slots, the final LN for slot
// 2L). Zero when the read site is not downstream.
std::vector<double> linearized_propagate(const lm::Params<double>& params,
                                         const lm::ActivationRecord<double>& rec, int slot, int position,
                                         std::span<const double> v, int read_slot, int read_position);

enum class NodeKind { embedding, feature, error, logit };

struct Node {
  NodeKind kind = NodeKind::feature;
  int layer = 0;     // -1 for embeddings, n_layers for logits
  int position = 0;
  int index = 0;     // feature index, token id for embeddings and logits
  double activation = 0;  // z for features, logit probability for logits, norm of the written vector otherwise
  double target_value = 0;  // pre-activation (features) or logit value; 0 for pure sources
  double bias = 0;          // constant paths into this target
  double influence = 0;

  std::string id() const;
};

struct Edge {
  int src = 0;
  int dst = 0;
  double weight = 0;      // instance attribution
  double raw_weight = 0;  // same path without the source activation factor
};

struct PruneReport {
  double node_keep = 0, edge_keep = 0;
  double retained_mass = 0;        // share of influence kept by the node prefix
  double edge_mass_retained = 0;   // share of edge effect kept among surviving nodes
  int nodes_before = 0, nodes_after = 0, edges_before = 0, edges_after = 0;
};

struct AttributionGraph {
  std::string prompt;
  std::vector<int> tokens;
  std::vector<std::string> token_text;
  int target_position = 0;
  std::vector<Node> nodes;
  std::vector<Edge> edges;  // ordered by (dst, src)
  std::optional<PruneReport> pruning;

  // Incoming edge weights plus bias, per target node, minus its target value.
  double completeness_error(int node) const;
};

struct GraphOptions {
  int top_logits = 5;
  int target_position = -1;  // -1: last position
  double min_edge = 0.0;     // drop edges with |weight| <= min_edge
};

AttributionGraph build_attribution_graph(const lm::Params<double>& params, const clt::CltParams<double>& clt,
                                         std::span<const int> tokens, const GraphOptions& opt = {});

// Influence on the logit set: logit nodes carry their probability
// renormalized over the set; every other node accumulates
// sum_t A[t, node] * influence(t) with A the per-target |weight|-normalized
// adjacency, iterated until the increment falls below 1e-6.
void compute_influence(AttributionGraph& g);

// Order used for influence prefixes: influence desc, layer asc, position asc,
// index asc.
bool influence_order(const Node& a, const Node& b);

AttributionGraph prune_graph(const AttributionGraph& g, double node_keep = 0.80, double edge_keep = 0.95);

struct NodeAnnotation {
  std::vector<double> distribution;
  double entropy = 0;
};

nlohmann::json graph_to_json(const AttributionGraph& g,
                             const std::map<clt::FeatureKey, NodeAnnotation>& multilingual = {});
AttributionGraph graph_from_json(const nlohmann::json& j);

constexpr int kGraphSchemaVersion = 1;

}  // namespace ct::attr
