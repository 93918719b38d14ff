#!/usr/bin/env node
/**
 * fpqt-export: generate the bundled synthetic toy model and write its
 * weights, activation captures, pipeline description, and an input
 * sample as FPQT containers.
 */

import { DEFAULT_SPEC, runExport, type ExportSpec } from "./export.js";

function usage(): never {
  console.error(
    "usage: fpqt-export --out DIR [--timesteps N] [--samples-per-step N] " +
      "[--init-samples N] [--seed N] [--height N] [--width N]",
  );
  process.exit(1);
}

function parseArgs(argv: string[]): ExportSpec {
  const spec = { ...DEFAULT_SPEC };
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (value === undefined) usage();
    switch (flag) {
      case "--out":
        spec.outDir = value;
        break;
      case "--timesteps":
        spec.timesteps = Number(value);
        break;
      case "--samples-per-step":
        spec.samplesPerStep = Number(value);
        break;
      case "--init-samples":
        spec.initSamples = Number(value);
        break;
      case "--seed":
        spec.seed = Number(value);
        break;
      case "--height":
        spec.height = Number(value);
        break;
      case "--width":
        spec.width = Number(value);
        break;
      default:
        usage();
    }
  }
  return spec;
}

const spec = parseArgs(process.argv.slice(2));
try {
  const paths = runExport(spec);
  console.log(
    `exported synthetic model (seed=${spec.seed}, timesteps=${spec.timesteps}, ` +
      `samples/step=${spec.samplesPerStep}, init=${spec.initSamples})`,
  );
  for (const [kind, path] of Object.entries(paths)) {
    console.log(`  ${kind}: ${path}`);
  }
} catch (err) {
  console.error(`export failed: ${err instanceof Error ? err.message : err}`);
  process.exit(2);
}
