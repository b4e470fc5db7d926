/**
 * Minimal safetensors container support: little-endian u64 header length,
 * JSON header mapping tensor names to dtype/shape/offsets, then raw data.
 * Only F32 tensors are handled, which is all a checkpoint of the
 * four-convolution model needs.
 */

import { readFileSync, writeFileSync } from "node:fs";

export interface TensorEntry {
  dtype: string;
  shape: number[];
  data: Float32Array;
}

export type TensorMap = Map<string, TensorEntry>;

interface HeaderEntry {
  dtype: string;
  shape: number[];
  data_offsets: [number, number];
}

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function loadSafetensors(path: string): TensorMap {
  const buf = readFileSync(path);
  if (buf.length < 8) {
    throw new Error(`${path}: too short for a safetensors header`);
  }
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  const headerLen = Number(view.getBigUint64(0, true));
  if (8 + headerLen > buf.length) {
    throw new Error(`${path}: header length ${headerLen} exceeds file size`);
  }
  const headerJson = buf.subarray(8, 8 + headerLen).toString("utf-8");
  let header: Record<string, HeaderEntry>;
  try {
    header = JSON.parse(headerJson);
  } catch (e) {
    throw new Error(`${path}: invalid safetensors header JSON: ${e}`);
  }
  const dataStart = 8 + headerLen;
  const tensors: TensorMap = new Map();
  for (const [name, entry] of Object.entries(header)) {
    if (name === "__metadata__") continue;
    const [begin, end] = entry.data_offsets;
    if (entry.dtype !== "F32") {
      throw new Error(`${path}: tensor ${name} has dtype ${entry.dtype}, only F32 is supported`);
    }
    const bytes = end - begin;
    if (bytes !== numel(entry.shape) * 4) {
      throw new Error(`${path}: tensor ${name} byte span does not match its shape`);
    }
    if (dataStart + end > buf.length) {
      throw new Error(`${path}: tensor ${name} extends past end of file`);
    }
    // copy so the typed array is aligned and independent of the file buffer
    const slice = Buffer.from(buf.subarray(dataStart + begin, dataStart + end));
    const data = new Float32Array(slice.buffer, slice.byteOffset, bytes / 4);
    tensors.set(name, { dtype: entry.dtype, shape: entry.shape, data });
  }
  return tensors;
}

export function saveSafetensors(path: string, tensors: Map<string, { shape: number[]; data: Float32Array }>): void {
  const header: Record<string, HeaderEntry> = {};
  let offset = 0;
  const chunks: Buffer[] = [];
  for (const [name, t] of tensors) {
    const bytes = t.data.length * 4;
    if (t.data.length !== numel(t.shape)) {
      throw new Error(`tensor ${name}: data length does not match shape`);
    }
    header[name] = {
      dtype: "F32",
      shape: t.shape,
      data_offsets: [offset, offset + bytes],
    };
    chunks.push(Buffer.from(t.data.buffer, t.data.byteOffset, bytes));
    offset += bytes;
  }
  const headerBuf = Buffer.from(JSON.stringify(header), "utf-8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBuf.length));
  writeFileSync(path, Buffer.concat([lenBuf, headerBuf, ...chunks]));
}
