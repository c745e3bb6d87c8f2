// Payload shapes of the graph JSON and the graph service.

export const GRAPH_SCHEMA_VERSION = 1;
export const SERVICE_SCHEMA_VERSION = 1;

export type NodeKind = "embedding" | "feature" | "error" | "logit";

export interface Multilingual {
  distribution: number[];
  entropy: number;
}

export interface GraphNode {
  id: string;
  kind: NodeKind;
  layer: number;
  position: number;
  feature_index: number | null;
  activation: number;
  influence: number;
  target_value: number;
  bias: number;
  token?: number;
  multilingual?: Multilingual;
}

export interface GraphEdge {
  src: string;
  dst: string;
  weight: number;
  raw_weight: number;
}

export interface Pruning {
  node_keep: number;
  edge_keep: number;
  retained_mass: number;
  edge_mass_retained: number;
  edge_effect: string;
  nodes_before: number;
  nodes_after: number;
  edges_before: number;
  edges_after: number;
}

export interface GraphJson {
  version: number;
  prompt: string;
  tokens: number[];
  token_text: string[];
  target_position: number;
  nodes: GraphNode[];
  edges: GraphEdge[];
  pruning: Pruning | null;
}

export interface Meta {
  version: number;
  graph_version: number;
  languages: string[];
  vocab_size: number;
  prompt_cap: number;
  default_threshold: number;
  model: { digest: string; config: Record<string, unknown> };
  clt: { digest: string; config: Record<string, unknown> };
}

export interface AttributeRequest {
  prompt: string;
  top_logits?: number;
  node_keep?: number;
  edge_keep?: number;
}

export interface FeatureSequence {
  sequence: number;
  language: string;
  tokens: string[];
  activations: number[];
}

export interface ProfileSummary {
  layer: number;
  index: number;
  variant: "general" | "top100";
  languages: string[];
  counts: number[];
  inactive: boolean;
  activation_rate: number;
  sequence_rate: number;
  top_sequences: { sequence: number; max_activation: number }[];
  distribution: number[] | null;
  entropy: number | null;
}

export interface FeatureProfile extends ProfileSummary {
  version: number;
  top100: ProfileSummary;
  sequences: FeatureSequence[];
}

export type EditMode = "zero" | "set" | "add" | "scale";

export interface Edit {
  layer: number;
  index: number;
  positions: number[];  // empty: every position
  mode: EditMode;
  value: number;
  values?: number[];
}

export interface InterventionSpec {
  edits: Edit[];
  target_token: number;  // -1: none
  top_k: number;
}

export interface TokenLogit {
  token: number;
  logit: number;
  text: string;
}

export interface Readout {
  top: TokenLogit[];
  target_rank?: number;
}

export interface InterventionResult {
  version: number;
  tokens: number[];
  baseline: Readout;
  edited: Readout;
  target_token: number | null;
  rank_delta?: number;
  edits: string[];
}

export type ClusterMember = [layer: number, index: number];

export interface Cluster {
  name: string;
  members: ClusterMember[];
  positions?: number[];
}

export interface SweepRequest {
  prompt: string;
  target_token: number | string;
  clusters: { up?: Cluster; down?: Cluster };
  ranges?: { up?: number[]; down?: number[] };
}

export interface SweepCell {
  c_up: number;
  c_down: number;
  target_rank: number;
  top_token: number;
}

export interface SweepResult {
  version: number;
  target_token: number;
  up_range: number[];
  down_range: number[];
  cells: SweepCell[];
  argmax: { index: number; c_up: number; c_down: number; target_rank: number };
  csv: string;
}

export interface LanguageFeature {
  layer: number;
  index: number;
  frequency: number;
  top_language: number;
  top_language_name: string;
  top_probability: number;
  language_frequency: number[];
}

export interface LanguageFeatures {
  version: number;
  threshold: number;
  features: LanguageFeature[];
}

export interface ServiceError {
  version: number;
  error: string;
  field?: string;
  diagnostic_id?: string;
}
