/**
 * Synthetic toy "mini U-Net": conv -> silu -> skip_save -> conv ->
 * skip_concat -> linear head, with output shaped like the input so the
 * pipeline can be iterated as a denoising loop. Forward math accumulates
 * in float64 (plain JS numbers) and stores float32, matching the
 * container dtype.
 */

import { Rng } from "./rng.js";
import type { NamedTensor } from "./container.js";

export const IN_CHANNELS = 2;
export const HIDDEN_CHANNELS = 4;

export interface Fmap {
  channels: number;
  height: number;
  width: number;
  data: Float32Array; // [c][h][w] row-major, batch of 1
}

export interface ToyModel {
  conv1: NamedTensor; // (4, 2, 3, 3)
  conv2: NamedTensor; // (4, 4, 3, 3)
  head: NamedTensor; // (2, 8)
}

export function buildModel(seed: number): ToyModel {
  const rng = new Rng(seed);
  const fill = (shape: number[], fanIn: number): Float32Array => {
    const n = shape.reduce((a, b) => a * b, 1);
    const data = new Float32Array(n);
    for (let i = 0; i < n; i++) {
      data[i] = rng.gauss() / Math.sqrt(fanIn);
    }
    return data;
  };
  const c = HIDDEN_CHANNELS;
  return {
    conv1: { name: "conv1.w", shape: [c, IN_CHANNELS, 3, 3], data: fill([c, IN_CHANNELS, 3, 3], 9 * IN_CHANNELS) },
    conv2: { name: "conv2.w", shape: [c, c, 3, 3], data: fill([c, c, 3, 3], 9 * c) },
    head: { name: "head.w", shape: [IN_CHANNELS, 2 * c], data: fill([IN_CHANNELS, 2 * c], 2 * c) },
  };
}

export function noiseInput(rng: Rng, height: number, width: number): Fmap {
  const data = new Float32Array(IN_CHANNELS * height * width);
  for (let i = 0; i < data.length; i++) data[i] = rng.gauss();
  return { channels: IN_CHANNELS, height, width, data };
}

function conv3x3(w: NamedTensor, x: Fmap): Fmap {
  const [co, ci, kh, kw] = w.shape;
  if (ci !== x.channels) throw new Error(`conv channel mismatch: ${ci} vs ${x.channels}`);
  const { height: h, width: wd } = x;
  const out = new Float32Array(co * h * wd);
  for (let o = 0; o < co; o++) {
    for (let y = 0; y < h; y++) {
      for (let xx = 0; xx < wd; xx++) {
        let acc = 0;
        for (let c = 0; c < ci; c++) {
          for (let i = 0; i < kh; i++) {
            const sy = y + i - 1;
            if (sy < 0 || sy >= h) continue;
            for (let j = 0; j < kw; j++) {
              const sx = xx + j - 1;
              if (sx < 0 || sx >= wd) continue;
              acc +=
                x.data[(c * h + sy) * wd + sx] *
                w.data[((o * ci + c) * kh + i) * kw + j];
            }
          }
        }
        out[(o * h + y) * wd + xx] = Math.fround(acc);
      }
    }
  }
  return { channels: co, height: h, width: wd, data: out };
}

function silu(x: Fmap): Fmap {
  const out = new Float32Array(x.data.length);
  for (let i = 0; i < x.data.length; i++) {
    const v = x.data[i];
    out[i] = Math.fround(v / (1 + Math.exp(-v)));
  }
  return { ...x, data: out };
}

function concatChannels(a: Fmap, b: Fmap): Fmap {
  const out = new Float32Array(a.data.length + b.data.length);
  out.set(a.data, 0);
  out.set(b.data, a.data.length);
  return { channels: a.channels + b.channels, height: a.height, width: a.width, data: out };
}

function headLinear(w: NamedTensor, x: Fmap): Fmap {
  // channel-wise linear: each spatial position maps channels through w
  const [outC, inC] = w.shape;
  if (inC !== x.channels) throw new Error(`head channel mismatch: ${inC} vs ${x.channels}`);
  const { height: h, width: wd } = x;
  const out = new Float32Array(outC * h * wd);
  for (let y = 0; y < h; y++) {
    for (let xx = 0; xx < wd; xx++) {
      for (let o = 0; o < outC; o++) {
        let acc = 0;
        for (let c = 0; c < inC; c++) {
          acc += x.data[(c * h + y) * wd + xx] * w.data[o * inC + c];
        }
        out[(o * h + y) * wd + xx] = Math.fround(acc);
      }
    }
  }
  return { channels: outC, height: h, width: wd, data: out };
}

/** One denoising step; returns the output and every captured layer input. */
export function forwardStep(model: ToyModel, x: Fmap): { output: Fmap; captures: Map<string, Fmap> } {
  const captures = new Map<string, Fmap>();
  captures.set("conv1.in", x);
  const h1 = silu(conv3x3(model.conv1, x));
  captures.set("conv2.in", h1);
  const h2 = conv3x3(model.conv2, h1);
  captures.set("cat0.skip", h1);
  captures.set("cat0.in", h2);
  const cat = concatChannels(h1, h2);
  captures.set("head.in", cat);
  const output = headLinear(model.head, cat);
  return { output, captures };
}

/** PipelineDesc JSON matching the exported tensor names. */
export function pipelineDesc(): object {
  return {
    version: 1,
    layers: [
      { op: "conv2d", name: "conv1", w: "conv1.w", stride: 1, padding: 1 },
      { op: "silu", name: "act1" },
      { op: "skip_save", name: "save0", slot: "s0" },
      { op: "conv2d", name: "conv2", w: "conv2.w", stride: 1, padding: 1 },
      { op: "skip_concat", name: "cat0", slot: "s0", axis: 1 },
      { op: "linear", name: "head", w: "head.w" },
    ],
  };
}
