/**
 * Export bridge: writes toy-model weights, per-timestep activation
 * captures (calibration set), a uniformly-timestep-sampled subset
 * (initialization set), a pipeline description, and one input sample,
 * all in the FPQT container / CalibSet naming convention
 * ("tensor@t<timestep>#<sample>").
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { encodeContainer, type NamedTensor } from "./container.js";
import {
  buildModel,
  forwardStep,
  noiseInput,
  pipelineDesc,
  type Fmap,
  type ToyModel,
} from "./model.js";
import { Rng } from "./rng.js";

export interface ExportSpec {
  source: "synthetic";
  timesteps: number;
  samplesPerStep: number;
  initSamples: number;
  seed: number;
  height: number;
  width: number;
  outDir: string;
}

export const DEFAULT_SPEC: ExportSpec = {
  source: "synthetic",
  timesteps: 10,
  samplesPerStep: 2,
  initSamples: 8,
  seed: 0,
  height: 6,
  width: 6,
  outDir: "export",
};

function validateSpec(spec: ExportSpec): void {
  if (spec.source !== "synthetic") {
    throw new Error(`unknown source ${spec.source}; only "synthetic" is bundled`);
  }
  if (spec.timesteps < 1) throw new Error("timesteps must be >= 1");
  if (spec.samplesPerStep < 1) throw new Error("samples per step must be >= 1");
  if (spec.initSamples < 1) throw new Error("init samples must be >= 1");
}

function calibEntry(name: string, t: number, j: number, fmap: Fmap): NamedTensor {
  return {
    name: `${name}@t${t}#${j}`,
    shape: [1, fmap.channels, fmap.height, fmap.width],
    data: fmap.data,
  };
}

export function exportWeights(model: ToyModel): NamedTensor[] {
  return [model.conv1, model.conv2, model.head];
}

/**
 * Runs `count` independent noise inputs through `timesteps` denoising
 * iterations, capturing every layer input per step.
 */
export function captureActivations(
  model: ToyModel,
  spec: ExportSpec,
  count: number,
  rng: Rng,
): NamedTensor[] {
  const out: NamedTensor[] = [];
  for (let j = 0; j < count; j++) {
    let x = noiseInput(rng, spec.height, spec.width);
    for (let t = 0; t < spec.timesteps; t++) {
      const { output, captures } = forwardStep(model, x);
      for (const [name, fmap] of captures) {
        out.push(calibEntry(name, t, j, fmap));
      }
      x = output;
    }
  }
  return out;
}

/**
 * Initialization set: one trajectory per init sample, keeping only the
 * captures at evenly spaced timesteps floor(k*(T-1)/(n-1)).
 */
export function captureInitialization(
  model: ToyModel,
  spec: ExportSpec,
  rng: Rng,
): NamedTensor[] {
  const t = spec.timesteps;
  const n = Math.min(spec.initSamples, t);
  const keep = new Set<number>();
  if (n === 1) {
    keep.add(0);
  } else {
    for (let k = 0; k < n; k++) {
      keep.add(Math.floor((k * (t - 1)) / (n - 1)));
    }
  }
  const perStep = Math.max(1, Math.ceil(spec.initSamples / keep.size));
  const out: NamedTensor[] = [];
  for (let j = 0; j < perStep; j++) {
    let x = noiseInput(rng, spec.height, spec.width);
    for (let step = 0; step < t; step++) {
      const { output, captures } = forwardStep(model, x);
      if (keep.has(step)) {
        for (const [name, fmap] of captures) {
          out.push(calibEntry(name, step, j, fmap));
        }
      }
      x = output;
    }
  }
  return out;
}

export interface ExportResult {
  weights: string;
  init: string;
  calib: string;
  pipeline: string;
  input: string;
}

export function runExport(spec: ExportSpec): ExportResult {
  validateSpec(spec);
  mkdirSync(spec.outDir, { recursive: true });
  const model = buildModel(spec.seed);

  const paths: ExportResult = {
    weights: join(spec.outDir, "weights.fpqt"),
    init: join(spec.outDir, "init.fpqt"),
    calib: join(spec.outDir, "calib.fpqt"),
    pipeline: join(spec.outDir, "pipeline.json"),
    input: join(spec.outDir, "input.fpqt"),
  };

  writeFileSync(paths.weights, encodeContainer(exportWeights(model)));

  const initRng = new Rng(spec.seed + 1);
  writeFileSync(paths.init, encodeContainer(captureInitialization(model, spec, initRng)));

  const calibRng = new Rng(spec.seed + 2);
  writeFileSync(
    paths.calib,
    encodeContainer(captureActivations(model, spec, spec.samplesPerStep, calibRng)),
  );

  writeFileSync(paths.pipeline, JSON.stringify(pipelineDesc(), null, 2) + "\n");

  const inputRng = new Rng(spec.seed + 3);
  const x = noiseInput(inputRng, spec.height, spec.width);
  writeFileSync(
    paths.input,
    encodeContainer([{ name: "input", shape: [1, x.channels, x.height, x.width], data: x.data }]),
  );
  return paths;
}
