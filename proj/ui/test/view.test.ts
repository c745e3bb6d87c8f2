import assert from "node:assert/strict";
import { test } from "node:test";

import { ServiceClient, ServiceRequestError } from "../src/client";
import type { GraphJson, InterventionResult, LanguageFeatures, SweepResult } from "../src/types";
import {
  History,
  SchemaMismatch,
  emptyPanel,
  heatmap,
  loadGraph,
  readout,
  swapPreset,
  toSpec,
  visibleEdges,
} from "../src/view";

function graph(): GraphJson {
  const node = (id: string, kind: GraphJson["nodes"][number]["kind"], layer: number, position: number, influence: number) => ({
    id,
    kind,
    layer,
    position,
    feature_index: kind === "feature" ? 3 : null,
    activation: 1,
    influence,
    target_value: 0,
    bias: 0,
  });
  return {
    version: 1,
    prompt: "a b",
    tokens: [0, 5, 6],
    token_text: ["<bos>", "a", "b"],
    target_position: 2,
    nodes: [
      node("emb:1", "embedding", -1, 1, 0.2),
      { ...node("feat:0:2:3", "feature", 0, 2, 0.4), multilingual: { distribution: [0.1, 0.7, 0.2], entropy: 0.8 } },
      node("err:1:2", "error", 1, 2, 0.1),
      node("logit:2:9", "logit", 2, 2, 1),
    ],
    edges: [
      { src: "emb:1", dst: "feat:0:2:3", weight: 0.5, raw_weight: 0.5 },
      { src: "feat:0:2:3", dst: "logit:2:9", weight: -2, raw_weight: -2 },
    ],
    pruning: null,
  };
}

test("graph loads into a layer by position grid", () => {
  const v = loadGraph(graph());
  assert.equal(v.nodes.length, 4);
  assert.equal(v.columns, 4);
  assert.equal(v.rows, 3);
  const cols = Object.fromEntries(v.nodes.map((n) => [n.node.id, n.column]));
  assert.deepEqual(cols, { "emb:1": 0, "feat:0:2:3": 1, "err:1:2": 2, "logit:2:9": 3 });
  const feat = v.nodes[1];
  assert.equal(feat.size, 1);
  assert.deepEqual(feat.badge, { entropy: 0.8, distribution: [0.1, 0.7, 0.2], topLanguage: 1 });
  assert.equal(v.nodes[0].badge, null);
});

test("unsupported schema is rejected with its version", () => {
  assert.throws(() => loadGraph({ ...graph(), version: 7 }), (e: unknown) => e instanceof SchemaMismatch && e.found === 7);
  assert.throws(() => loadGraph(null), SchemaMismatch);
});

test("edge filter", () => {
  const v = loadGraph(graph());
  assert.equal(visibleEdges(v, 0).length, 2);
  assert.equal(visibleEdges(v, 1).length, 1);
  assert.equal(visibleEdges(v, v.maxAbsWeight).length, 0);
});

test("panel state serializes to a spec", () => {
  const p = emptyPanel("a b", 9);
  assert.deepEqual(toSpec(p), { edits: [], target_token: 9, top_k: 5 });
  const lf: LanguageFeatures = {
    version: 1,
    threshold: 0.05,
    features: [
      { layer: 0, index: 1, frequency: 0.1, top_language: 0, top_language_name: "L0", top_probability: 0.9, language_frequency: [] },
      { layer: 1, index: 2, frequency: 0.1, top_language: 0, top_language_name: "L0", top_probability: 0.9, language_frequency: [] },
      { layer: 1, index: 4, frequency: 0.1, top_language: 1, top_language_name: "L1", top_probability: 0.8, language_frequency: [] },
    ],
  };
  const s = toSpec(swapPreset(p, lf, 0, 1, 1, 2));
  assert.deepEqual(s.edits, [
    { layer: 1, index: 2, positions: [], mode: "zero", value: 0 },
    { layer: 1, index: 4, positions: [], mode: "add", value: 2 },
  ]);
});

test("readout shows the service rank delta", () => {
  const r: InterventionResult = {
    version: 1,
    tokens: [0, 1],
    baseline: { top: [{ token: 3, logit: 2, text: "x" }], target_rank: 4 },
    edited: { top: [{ token: 5, logit: 3, text: "y" }], target_rank: 1 },
    target_token: 5,
    rank_delta: 3,
    edits: [],
  };
  const o = readout(r);
  assert.equal(o.rankDelta, 3);
  assert.equal(o.rows[0].edited.text, "y");
  assert.equal(readout({ ...r, rank_delta: undefined, target_token: null }).rankDelta, 0);
});

test("history branches from any entry", () => {
  const h = new History();
  const p = emptyPanel("a", 1);
  h.record(p, null, null, "boom");
  p.edits.push({ layer: 0, index: 0, mode: "add", coefficient: 1, positions: [] });
  h.record(p, 0, null, null);
  const b = h.branch(0);
  assert.equal(b.edits.length, 0);
  assert.equal(h.list()[1].parent, 0);
  assert.throws(() => h.branch(5), RangeError);
});

test("heatmap highlights the service argmax", () => {
  const cells = [];
  for (const d of [-2, -1]) for (const u of [1, 2, 3]) cells.push({ c_up: u, c_down: d, target_rank: 10 - u + d, top_token: 0 });
  const r: SweepResult = {
    version: 1,
    target_token: 0,
    up_range: [1, 2, 3],
    down_range: [-2, -1],
    cells,
    argmax: { index: 4, c_up: 2, c_down: -1, target_rank: 7 },
    csv: "",
  };
  const h = heatmap(r);
  assert.deepEqual(h.highlight, { row: 1, column: 1 });
  assert.equal(h.rank[0][2], 5);
});

test("client caches feature profiles and maps errors", async () => {
  const calls: string[] = [];
  const fake = async (url: string) => {
    calls.push(url);
    if (url.endsWith("/api/feature/9/9"))
      return new Response(JSON.stringify({ version: 1, error: "feature 9/9 does not exist" }), { status: 404 });
    return new Response(JSON.stringify({ version: 1, layer: 0, index: 1 }), { status: 200 });
  };
  const c = new ServiceClient("http://x", fake);
  await c.feature(0, 1);
  await c.feature(0, 1);
  assert.equal(calls.length, 1);
  await assert.rejects(c.feature(9, 9), (e: unknown) => e instanceof ServiceRequestError && e.status === 404);
  await assert.rejects(c.feature(9, 9));
  assert.equal(calls.length, 3);
});
