import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { convert, ConversionError } from "../src/convert.js";
import { DEFAULT_LAYER_MAP } from "../src/layermap.js";
import { saveSafetensors } from "../src/safetensors.js";
import { LAYER_SPECS, readWeightsFile, weightCount, writeWeightsFile } from "../src/weights.js";

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

interface Fixture {
  tensors: Map<string, { shape: number[]; data: Float32Array }>;
}

function makeFixture(seed: number): Fixture {
  const rnd = mulberry32(seed);
  const tensors = new Map<string, { shape: number[]; data: Float32Array }>();
  const names: Record<string, string> = {
    enc1: "conv1",
    enc2: "conv2",
    enc3: "conv3",
    dec: "conv4",
  };
  for (const spec of LAYER_SPECS) {
    const w = new Float32Array(weightCount(spec));
    for (let i = 0; i < w.length; i++) {
      w[i] = Math.fround((rnd() - 0.5) * 0.6);
    }
    const b = new Float32Array(spec.out);
    for (let i = 0; i < b.length; i++) {
      b[i] = Math.fround((rnd() - 0.5) * 0.2);
    }
    tensors.set(`${names[spec.slot]}.weight`, {
      shape: [spec.out, spec.in, spec.k, spec.k],
      data: w,
    });
    tensors.set(`${names[spec.slot]}.bias`, { shape: [spec.out], data: b });
  }
  return { tensors };
}

function tempDir(): string {
  return mkdtempSync(join(tmpdir(), "letwconv-"));
}

describe("conversion", () => {
  it("is lossless for float32 parameters", () => {
    const dir = tempDir();
    const fixture = makeFixture(7);
    const ckpt = join(dir, "model.safetensors");
    saveSafetensors(ckpt, fixture.tensors);
    const out = join(dir, "model.letw");
    const summary = convert(ckpt, out);
    expect(summary.layers.map((l) => l.slot)).toEqual(["enc1", "enc2", "enc3", "dec"]);

    const loaded = readWeightsFile(out);
    const names: Record<string, string> = { enc1: "conv1", enc2: "conv2", enc3: "conv3", dec: "conv4" };
    for (const spec of LAYER_SPECS) {
      const got = loaded.get(spec.slot)!;
      const wantW = fixture.tensors.get(`${names[spec.slot]}.weight`)!.data;
      const wantB = fixture.tensors.get(`${names[spec.slot]}.bias`)!.data;
      expect(Buffer.from(got.weights.buffer, got.weights.byteOffset, got.weights.length * 4))
        .toEqual(Buffer.from(wantW.buffer, wantW.byteOffset, wantW.length * 4));
      expect(Buffer.from(got.bias.buffer, got.bias.byteOffset, got.bias.length * 4))
        .toEqual(Buffer.from(wantB.buffer, wantB.byteOffset, wantB.length * 4));
    }
  });

  it("round-trips to a byte-identical weights file", () => {
    const dir = tempDir();
    const ckpt = join(dir, "model.safetensors");
    saveSafetensors(ckpt, makeFixture(11).tensors);
    const out1 = join(dir, "a.letw");
    convert(ckpt, out1);
    const loaded = readWeightsFile(out1);
    const out2 = join(dir, "b.letw");
    writeWeightsFile(out2, loaded);
    expect(readFileSync(out2)).toEqual(readFileSync(out1));
  });

  it("refuses a shape-mismatched checkpoint with a complete error list", () => {
    const dir = tempDir();
    const fixture = makeFixture(3);
    // break two things at once: wrong conv2 weight shape, missing conv4 bias
    const bad = new Map(fixture.tensors);
    bad.set("conv2.weight", { shape: [4, 8, 3, 3], data: new Float32Array(4 * 8 * 3 * 3) });
    bad.delete("conv4.bias");
    const ckpt = join(dir, "bad.safetensors");
    saveSafetensors(ckpt, bad);
    const out = join(dir, "bad.letw");
    let err: ConversionError | undefined;
    try {
      convert(ckpt, out);
    } catch (e) {
      err = e as ConversionError;
    }
    expect(err).toBeInstanceOf(ConversionError);
    const text = err!.message;
    expect(text).toMatch(/conv2\.weight.*\[4,8,3,3\].*\[8,8,3,3\]/);
    expect(text).toMatch(/conv4\.bias/);
    expect(err!.problems.length).toBeGreaterThanOrEqual(2);
  });

  it("reports a missing weight parameter by slot", () => {
    const dir = tempDir();
    const fixture = makeFixture(5);
    const bad = new Map(fixture.tensors);
    bad.delete("conv3.weight");
    const ckpt = join(dir, "missing.safetensors");
    saveSafetensors(ckpt, bad);
    expect(() => convert(ckpt, join(dir, "x.letw"))).toThrowError(/enc3\.weight/);
  });
});

describe("primary-artifact fidelity", () => {
  it(
    "converted weights reproduce the reference forward pass within 1e-4",
    () => {
      const dir = tempDir();
      const fixture = makeFixture(21);
      const ckpt = join(dir, "model.safetensors");
      saveSafetensors(ckpt, fixture.tensors);
      const letw = join(dir, "model.letw");
      convert(ckpt, letw);

      // small grayscale test image as binary PGM
      const H = 12;
      const W = 16;
      const rnd = mulberry32(99);
      const pixels = Buffer.alloc(H * W);
      for (let i = 0; i < H * W; i++) {
        pixels[i] = Math.floor(rnd() * 256);
      }
      const pgm = Buffer.concat([Buffer.from(`P5\n${W} ${H}\n255\n`, "ascii"), pixels]);
      const imgPath = join(dir, "img.pgm");
      writeFileSync(imgPath, pgm);

      const mapsPath = join(dir, "maps.json");
      execFileSync("python3", [
        "-m", "featflow", "forward", imgPath,
        "--weights", letw, "--output", mapsPath,
      ]);
      const maps = JSON.parse(readFileSync(mapsPath, "utf-8"));
      expect(maps.height).toBe(H);
      expect(maps.width).toBe(W);

      const { score, features } = referenceForward(fixture, pixels, H, W);
      let worstScore = 0;
      for (let i = 0; i < H * W; i++) {
        worstScore = Math.max(worstScore, Math.abs(maps.score[i] - score[i]));
      }
      let worstFeat = 0;
      for (let i = 0; i < H * W * 3; i++) {
        worstFeat = Math.max(worstFeat, Math.abs(maps.features[i] - features[i]));
      }
      expect(worstScore).toBeLessThan(1e-4);
      expect(worstFeat).toBeLessThan(1e-4);
    },
    30000,
  );
});

/** Float64 reference of the four-convolution forward pass on a grayscale
 * image replicated to 3 channels and scaled to [0, 1]. */
function referenceForward(fixture: Fixture, pixels: Buffer, H: number, W: number) {
  const names: Record<string, string> = { enc1: "conv1", enc2: "conv2", enc3: "conv3", dec: "conv4" };
  let act: Float64Array = new Float64Array(H * W * 3);
  for (let i = 0; i < H * W; i++) {
    const v = pixels[i] / 255;
    act[i * 3] = v;
    act[i * 3 + 1] = v;
    act[i * 3 + 2] = v;
  }
  let channels = 3;
  for (const spec of LAYER_SPECS) {
    const w = fixture.tensors.get(`${names[spec.slot]}.weight`)!.data;
    const b = fixture.tensors.get(`${names[spec.slot]}.bias`)!.data;
    const out = new Float64Array(H * W * spec.out);
    const pad = spec.k === 3 ? 1 : 0;
    for (let y = 0; y < H; y++) {
      for (let x = 0; x < W; x++) {
        for (let co = 0; co < spec.out; co++) {
          let acc = b[co];
          for (let ci = 0; ci < spec.in; ci++) {
            for (let ky = 0; ky < spec.k; ky++) {
              for (let kx = 0; kx < spec.k; kx++) {
                const yy = y + ky - pad;
                const xx = x + kx - pad;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                acc +=
                  w[((co * spec.in + ci) * spec.k + ky) * spec.k + kx] *
                  act[(yy * W + xx) * channels + ci];
              }
            }
          }
          const isLast = spec.slot === "dec";
          out[(y * W + x) * spec.out + co] = isLast ? acc : Math.max(0, acc);
        }
      }
    }
    act = out;
    channels = spec.out;
  }
  const score = new Float64Array(H * W);
  const features = new Float64Array(H * W * 3);
  for (let i = 0; i < H * W; i++) {
    const a = act[i * 4];
    const b2 = act[i * 4 + 1];
    const c = act[i * 4 + 2];
    const s = act[i * 4 + 3];
    const n = Math.max(Math.sqrt(a * a + b2 * b2 + c * c), 1e-8);
    features[i * 3] = a / n;
    features[i * 3 + 1] = b2 / n;
    features[i * 3 + 2] = c / n;
    score[i] = s >= 0 ? 1 / (1 + Math.exp(-s)) : Math.exp(s) / (1 + Math.exp(s));
  }
  return { score, features };
}
