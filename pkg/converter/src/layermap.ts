/**
 * Mapping from checkpoint parameter names to weight-file slots. The default
 * map covers the published checkpoint naming (conv1..conv4 with .weight and
 * .bias); a user-supplied JSON map handles variants. Checkpoints already
 * store convolution weights in (out, in, ky, kx) order, which is the order
 * the weights file expects, so no axis shuffling happens here.
 */

import { readFileSync } from "node:fs";
import { LAYER_SPECS, weightCount } from "./weights.js";

export type ParamKind = "weight" | "bias";

export interface MapEntry {
  slot: string;
  kind: ParamKind;
}

export type LayerMap = Map<string, MapEntry>;

export const DEFAULT_LAYER_MAP: LayerMap = new Map([
  ["conv1.weight", { slot: "enc1", kind: "weight" as ParamKind }],
  ["conv1.bias", { slot: "enc1", kind: "bias" as ParamKind }],
  ["conv2.weight", { slot: "enc2", kind: "weight" as ParamKind }],
  ["conv2.bias", { slot: "enc2", kind: "bias" as ParamKind }],
  ["conv3.weight", { slot: "enc3", kind: "weight" as ParamKind }],
  ["conv3.bias", { slot: "enc3", kind: "bias" as ParamKind }],
  ["conv4.weight", { slot: "dec", kind: "weight" as ParamKind }],
  ["conv4.bias", { slot: "dec", kind: "bias" as ParamKind }],
]);

export function expectedShape(slot: string, kind: ParamKind): number[] {
  const spec = LAYER_SPECS.find((s) => s.slot === slot);
  if (!spec) {
    throw new Error(`unknown layer slot ${slot}`);
  }
  return kind === "weight" ? [spec.out, spec.in, spec.k, spec.k] : [spec.out];
}

export function expectedCount(slot: string, kind: ParamKind): number {
  const spec = LAYER_SPECS.find((s) => s.slot === slot)!;
  return kind === "weight" ? weightCount(spec) : spec.out;
}

export function loadLayerMap(path: string): LayerMap {
  const raw = JSON.parse(readFileSync(path, "utf-8"));
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error(`${path}: layer map must be a JSON object`);
  }
  const map: LayerMap = new Map();
  for (const [param, entry] of Object.entries(raw as Record<string, MapEntry>)) {
    if (!entry || typeof entry.slot !== "string" || (entry.kind !== "weight" && entry.kind !== "bias")) {
      throw new Error(`${path}: entry for ${param} must be {"slot": ..., "kind": "weight"|"bias"}`);
    }
    expectedShape(entry.slot, entry.kind); // validates the slot name
    map.set(param, { slot: entry.slot, kind: entry.kind });
  }
  return map;
}
