/**
 * Checkpoint-to-weights-file conversion. Parameters are validated against
 * the fixed layer shapes before anything is written; every unmet
 * expectation is collected and reported together, and float32 values pass
 * through bit-exactly.
 */

import { crc32 } from "node:zlib";
import { loadSafetensors, numel, TensorMap } from "./safetensors.js";
import { expectedShape, LayerMap, DEFAULT_LAYER_MAP } from "./layermap.js";
import { Layer, LayerSet, LAYER_SPECS, writeWeightsFile } from "./weights.js";

export class ConversionError extends Error {
  constructor(public problems: string[]) {
    super(`checkpoint does not match the expected layers:\n  - ${problems.join("\n  - ")}`);
  }
}

export interface LayerSummary {
  slot: string;
  weightShape: number[];
  biasShape: number[];
  weightChecksum: string;
  biasChecksum: string;
}

export interface ConversionSummary {
  layers: LayerSummary[];
  output: string;
}

function shapesEqual(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

function checksum(data: Float32Array): string {
  const bytes = Buffer.from(data.buffer, data.byteOffset, data.length * 4);
  return crc32(bytes).toString(16).padStart(8, "0");
}

export function collectLayers(tensors: TensorMap, layerMap: LayerMap): LayerSet {
  const problems: string[] = [];
  const partial = new Map<string, { weights?: Float32Array; bias?: Float32Array }>();
  for (const spec of LAYER_SPECS) {
    partial.set(spec.slot, {});
  }

  const seen = new Map<string, string>(); // "slot.kind" -> param name
  for (const [param, entry] of layerMap) {
    const tensor = tensors.get(param);
    const key = `${entry.slot}.${entry.kind}`;
    if (!tensor) {
      problems.push(`missing parameter ${param} (maps to ${key})`);
      continue;
    }
    const want = expectedShape(entry.slot, entry.kind);
    if (!shapesEqual(tensor.shape, want)) {
      problems.push(
        `parameter ${param} (${key}) has shape [${tensor.shape}], expected [${want}]`,
      );
      continue;
    }
    if (tensor.data.length !== numel(want)) {
      problems.push(`parameter ${param} (${key}) has inconsistent data length`);
      continue;
    }
    if (seen.has(key)) {
      problems.push(`${key} mapped twice (${seen.get(key)} and ${param})`);
      continue;
    }
    seen.set(key, param);
    const slot = partial.get(entry.slot)!;
    if (entry.kind === "weight") {
      slot.weights = tensor.data;
    } else {
      slot.bias = tensor.data;
    }
  }
  for (const spec of LAYER_SPECS) {
    const slot = partial.get(spec.slot)!;
    if (!slot.weights && !seen.has(`${spec.slot}.weight`)) {
      problems.push(`no checkpoint parameter mapped to ${spec.slot}.weight`);
    }
    if (!slot.bias && !seen.has(`${spec.slot}.bias`)) {
      problems.push(`no checkpoint parameter mapped to ${spec.slot}.bias`);
    }
  }
  if (problems.length > 0) {
    throw new ConversionError([...new Set(problems)]);
  }
  const layers: LayerSet = new Map();
  for (const spec of LAYER_SPECS) {
    const slot = partial.get(spec.slot)!;
    layers.set(spec.slot, { weights: slot.weights!, bias: slot.bias! } as Layer);
  }
  return layers;
}

export function convert(
  checkpointPath: string,
  outPath: string,
  layerMap: LayerMap = DEFAULT_LAYER_MAP,
): ConversionSummary {
  const tensors = loadSafetensors(checkpointPath);
  const layers = collectLayers(tensors, layerMap);
  writeWeightsFile(outPath, layers);
  const summaries: LayerSummary[] = LAYER_SPECS.map((spec) => {
    const layer = layers.get(spec.slot)!;
    return {
      slot: spec.slot,
      weightShape: [spec.out, spec.in, spec.k, spec.k],
      biasShape: [spec.out],
      weightChecksum: checksum(layer.weights),
      biasChecksum: checksum(layer.bias),
    };
  });
  return { layers: summaries, output: outPath };
}
