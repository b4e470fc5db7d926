/**
 * The tracker's binary weights format (little-endian):
 *   magic "LETW", u32 version, then for each of the four layers in order
 *   enc1, enc2, enc3, dec: u32 out, u32 in, u32 k, float32 weights in
 *   (out, in, ky, kx) order, float32 biases.
 */

import { readFileSync, writeFileSync } from "node:fs";

export const MAGIC = "LETW";
export const FORMAT_VERSION = 1;

export interface LayerSpec {
  slot: string;
  out: number;
  in: number;
  k: number;
}

export const LAYER_SPECS: LayerSpec[] = [
  { slot: "enc1", out: 8, in: 3, k: 3 },
  { slot: "enc2", out: 8, in: 8, k: 3 },
  { slot: "enc3", out: 16, in: 8, k: 1 },
  { slot: "dec", out: 4, in: 16, k: 1 },
];

export interface Layer {
  weights: Float32Array; // (out, in, k, k) row-major
  bias: Float32Array; // (out,)
}

export type LayerSet = Map<string, Layer>;

export function weightCount(spec: LayerSpec): number {
  return spec.out * spec.in * spec.k * spec.k;
}

export function writeWeightsFile(path: string, layers: LayerSet): void {
  const chunks: Buffer[] = [Buffer.from(MAGIC, "ascii")];
  const ver = Buffer.alloc(4);
  ver.writeUInt32LE(FORMAT_VERSION);
  chunks.push(ver);
  for (const spec of LAYER_SPECS) {
    const layer = layers.get(spec.slot);
    if (!layer) {
      throw new Error(`layer ${spec.slot} missing`);
    }
    if (layer.weights.length !== weightCount(spec) || layer.bias.length !== spec.out) {
      throw new Error(`layer ${spec.slot} has wrong parameter sizes`);
    }
    const head = Buffer.alloc(12);
    head.writeUInt32LE(spec.out, 0);
    head.writeUInt32LE(spec.in, 4);
    head.writeUInt32LE(spec.k, 8);
    chunks.push(head);
    chunks.push(Buffer.from(layer.weights.buffer, layer.weights.byteOffset, layer.weights.length * 4));
    chunks.push(Buffer.from(layer.bias.buffer, layer.bias.byteOffset, layer.bias.length * 4));
  }
  writeFileSync(path, Buffer.concat(chunks));
}

export function readWeightsFile(path: string): LayerSet {
  const buf = readFileSync(path);
  if (buf.subarray(0, 4).toString("ascii") !== MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`${path}: unsupported format version ${version}`);
  }
  let off = 8;
  const layers: LayerSet = new Map();
  for (const spec of LAYER_SPECS) {
    if (off + 12 > buf.length) {
      throw new Error(`${path}: truncated in header of ${spec.slot}`);
    }
    const out = buf.readUInt32LE(off);
    const cin = buf.readUInt32LE(off + 4);
    const k = buf.readUInt32LE(off + 8);
    off += 12;
    if (out !== spec.out || cin !== spec.in || k !== spec.k) {
      throw new Error(
        `${path}: layer ${spec.slot} declares (${out}, ${cin}, ${k}), expected (${spec.out}, ${spec.in}, ${spec.k})`,
      );
    }
    const nw = weightCount(spec);
    const need = 4 * (nw + spec.out);
    if (off + need > buf.length) {
      throw new Error(`${path}: truncated in parameters of ${spec.slot}`);
    }
    const wslice = Buffer.from(buf.subarray(off, off + nw * 4));
    const weights = new Float32Array(wslice.buffer, wslice.byteOffset, nw);
    off += nw * 4;
    const bslice = Buffer.from(buf.subarray(off, off + spec.out * 4));
    const bias = new Float32Array(bslice.buffer, bslice.byteOffset, spec.out);
    off += spec.out * 4;
    layers.set(spec.slot, { weights, bias });
  }
  if (off !== buf.length) {
    throw new Error(`${path}: ${buf.length - off} trailing bytes`);
  }
  return layers;
}
