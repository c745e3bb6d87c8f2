// View state for the graph explorer and the intervention console. Everything
// displayed comes from graph JSON or service payloads; nothing here runs model
// math.

import type {
  Cluster,
  Edit,
  EditMode,
  GraphEdge,
  GraphJson,
  GraphNode,
  InterventionResult,
  InterventionSpec,
  LanguageFeatures,
  SweepResult,
} from "./types";
import { GRAPH_SCHEMA_VERSION } from "./types";

export class SchemaMismatch extends Error {
  constructor(readonly found: unknown) {
    super(`graph schema version ${String(found)} is not supported (expected ${GRAPH_SCHEMA_VERSION})`);
  }
}

export interface Badge {
  entropy: number;
  distribution: number[];
  topLanguage: number;
}

export interface PlacedNode {
  node: GraphNode;
  column: number;  // 0 = embeddings, layer + 1 for features and errors, last = logits
  row: number;     // token position
  size: number;    // influence relative to the largest non-logit influence
  badge: Badge | null;
}

export interface GraphView {
  prompt: string;
  tokenText: string[];
  columns: number;
  rows: number;
  nodes: PlacedNode[];
  edges: GraphEdge[];
  maxAbsWeight: number;
  selected: Set<string>;
}

export function badgeOf(node: GraphNode): Badge | null {
  const m = node.multilingual;
  if (!m) return null;
  let top = 0;
  m.distribution.forEach((p, i) => {
    if (p > m.distribution[top]) top = i;
  });
  return { entropy: m.entropy, distribution: m.distribution, topLanguage: top };
}

export function loadGraph(json: unknown): GraphView {
  const g = json as GraphJson;
  if (!g || typeof g !== "object" || g.version !== GRAPH_SCHEMA_VERSION)
    throw new SchemaMismatch((g as { version?: unknown } | null)?.version);
  let layers = 0;
  for (const n of g.nodes) if (n.kind === "feature" || n.kind === "error") layers = Math.max(layers, n.layer + 1);
  let maxInfluence = 0;
  for (const n of g.nodes) if (n.kind !== "logit") maxInfluence = Math.max(maxInfluence, n.influence);
  const columnOf = (n: GraphNode) => (n.kind === "embedding" ? 0 : n.kind === "logit" ? layers + 1 : n.layer + 1);
  const nodes = g.nodes.map((node) => ({
    node,
    column: columnOf(node),
    row: node.position,
    size: node.kind === "logit" || maxInfluence === 0 ? 1 : node.influence / maxInfluence,
    badge: badgeOf(node),
  }));
  let maxAbsWeight = 0;
  for (const e of g.edges) maxAbsWeight = Math.max(maxAbsWeight, Math.abs(e.weight));
  return {
    prompt: g.prompt,
    tokenText: g.token_text ?? [],
    columns: layers + 2,
    rows: g.tokens.length,
    nodes,
    edges: g.edges,
    maxAbsWeight,
    selected: new Set(),
  };
}

// Slider over [0, maxAbsWeight]: 0 shows every edge, the maximum hides all.
export function visibleEdges(view: GraphView, threshold: number): GraphEdge[] {
  if (threshold <= 0) return view.edges;
  return view.edges.filter((e) => Math.abs(e.weight) > threshold);
}

// ---- intervention panel ----

export const UP_RANGE = Array.from({ length: 30 }, (_, i) => i + 1);
export const DOWN_RANGE = Array.from({ length: 30 }, (_, i) => i - 30);

export interface PanelEdit {
  layer: number;
  index: number;
  mode: EditMode;
  coefficient: number;
  positions: number[];
}

export interface InterventionPanel {
  prompt: string;
  edits: PanelEdit[];
  targetToken: number;
  topK: number;
}

export function emptyPanel(prompt: string, targetToken = -1): InterventionPanel {
  return { prompt, edits: [], targetToken, topK: 5 };
}

export function toSpec(panel: InterventionPanel): InterventionSpec {
  const edits: Edit[] = panel.edits.map((e) => ({
    layer: e.layer,
    index: e.index,
    positions: [...e.positions],
    mode: e.mode,
    value: e.mode === "zero" ? 0 : e.coefficient,
  }));
  return { edits, target_token: panel.targetToken, top_k: panel.topK };
}

// Zero the source language's features and add the target language's, using
// the service's language-feature list.
export function swapPreset(
  panel: InterventionPanel,
  features: LanguageFeatures,
  src: number,
  tgt: number,
  firstLayer: number,
  coefficient = 1,
): InterventionPanel {
  const edits: PanelEdit[] = [];
  for (const f of features.features) {
    if (f.layer < firstLayer) continue;
    if (f.top_language === src) edits.push({ layer: f.layer, index: f.index, mode: "zero", coefficient: 0, positions: [] });
  }
  for (const f of features.features) {
    if (f.layer < firstLayer) continue;
    if (f.top_language === tgt)
      edits.push({ layer: f.layer, index: f.index, mode: "add", coefficient, positions: [] });
  }
  return { ...panel, edits };
}

export function clusterOf(name: string, nodes: GraphNode[]): Cluster {
  return {
    name,
    members: nodes.filter((n) => n.kind === "feature").map((n) => [n.layer, n.feature_index as number] as [number, number]),
  };
}

// ---- readout and history ----

export interface ReadoutRow {
  baseline: { text: string; logit: number };
  edited: { text: string; logit: number };
}

export interface Readout {
  rows: ReadoutRow[];
  rankDelta: number;
  baselineRank: number | null;
  editedRank: number | null;
}

export function readout(result: InterventionResult): Readout {
  const n = Math.max(result.baseline.top.length, result.edited.top.length);
  const rows: ReadoutRow[] = [];
  for (let i = 0; i < n; ++i) {
    const b = result.baseline.top[i];
    const e = result.edited.top[i];
    rows.push({
      baseline: { text: b?.text ?? "", logit: b?.logit ?? NaN },
      edited: { text: e?.text ?? "", logit: e?.logit ?? NaN },
    });
  }
  return {
    rows,
    rankDelta: result.rank_delta ?? 0,
    baselineRank: result.baseline.target_rank ?? null,
    editedRank: result.edited.target_rank ?? null,
  };
}

export interface HistoryEntry {
  id: number;
  parent: number | null;
  panel: InterventionPanel;
  result: InterventionResult | null;
  error: string | null;
}

// Results kept as a tree: any entry can be branched from.
export class History {
  private entries: HistoryEntry[] = [];

  record(panel: InterventionPanel, parent: number | null, result: InterventionResult | null, error: string | null) {
    const entry: HistoryEntry = { id: this.entries.length, parent, panel: structuredClone(panel), result, error };
    this.entries.push(entry);
    return entry;
  }

  branch(id: number): InterventionPanel {
    const e = this.entries[id];
    if (!e) throw new RangeError(`no history entry ${id}`);
    return structuredClone(e.panel);
  }

  list(): readonly HistoryEntry[] {
    return this.entries;
  }
}

// ---- sweep heatmap ----

export interface Heatmap {
  rows: number[];     // c_down values
  columns: number[];  // c_up values
  rank: number[][];   // [row][column]
  highlight: { row: number; column: number };
}

export function heatmap(result: SweepResult): Heatmap {
  const rows = result.down_range;
  const columns = result.up_range;
  const rank = rows.map(() => columns.map(() => NaN));
  for (const c of result.cells) {
    const r = rows.indexOf(c.c_down);
    const k = columns.indexOf(c.c_up);
    if (r >= 0 && k >= 0) rank[r][k] = c.target_rank;
  }
  // The argmax comes from the service, not from the grid.
  const best = result.cells[result.argmax.index];
  return { rows, columns, rank, highlight: { row: rows.indexOf(best.c_down), column: columns.indexOf(best.c_up) } };
}
