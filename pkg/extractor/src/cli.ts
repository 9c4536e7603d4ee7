#!/usr/bin/env node
/** Command-line front end.
 *
 * extract --model M.ckpt --calib C.json --out DIR
 *         [--samples 100] [--loss clm] [--mode importance|grads|both]
 *         [--seed 0] [--grad-mode mean|per-sample] [--sample-index 0]
 *
 * Logs go to standard error. Exit status is 0 only when every requested
 * output was fully written; failures print one "category: message" line.
 */

import { parseArgs } from "node:util";
import { pathToFileURL } from "node:url";
import { ExtractorError, ValidationError } from "./errors.js";
import { GRAD_MODES, GradMode, JOB_DEFAULTS, MODES, Mode, runExtraction } from "./extract.js";

const USAGE = `usage: extract --model MODEL --calib CALIB --out DIR [options]

Compute gradient importance maps and Q/K/V/O gradient-matrix dumps from a
tiny causal transformer checkpoint over a calibration set.

required:
  --model PATH        model checkpoint
  --calib PATH        calibration JSON
  --out DIR           output directory (importance.ckpt, grads.ckpt)

options:
  --samples N         sample cap, first N records (default ${JOB_DEFAULTS.sampleCap})
  --loss KIND         loss kind; only '${JOB_DEFAULTS.loss}' (next-token cross entropy)
  --mode MODE         importance | grads | both (default ${JOB_DEFAULTS.mode})
  --seed N            recorded in output provenance (default ${JOB_DEFAULTS.seed})
  --grad-mode MODE    mean | per-sample (default ${JOB_DEFAULTS.gradMode})
  --sample-index N    sample for per-sample grad mode (default ${JOB_DEFAULTS.sampleIndex})
  -h, --help          show this message
`;

function intFlag(raw: string, flag: string): number {
  if (!/^\d+$/.test(raw)) {
    throw new ValidationError(`${flag} must be a non-negative integer, got '${raw}'`);
  }
  return Number(raw);
}

export function main(argv: string[]): number {
  let args;
  try {
    args = parseArgs({
      args: argv,
      options: {
        model: { type: "string" },
        calib: { type: "string" },
        out: { type: "string" },
        samples: { type: "string", default: String(JOB_DEFAULTS.sampleCap) },
        loss: { type: "string", default: JOB_DEFAULTS.loss },
        mode: { type: "string", default: JOB_DEFAULTS.mode },
        seed: { type: "string", default: String(JOB_DEFAULTS.seed) },
        "grad-mode": { type: "string", default: JOB_DEFAULTS.gradMode },
        "sample-index": { type: "string", default: String(JOB_DEFAULTS.sampleIndex) },
        help: { type: "boolean", short: "h", default: false },
      },
      strict: true,
      allowPositionals: false,
    });
  } catch (err) {
    process.stderr.write(`validation: ${(err as Error).message}\n`);
    return 1;
  }
  if (args.values.help) {
    process.stdout.write(USAGE);
    return 0;
  }
  try {
    for (const flag of ["model", "calib", "out"] as const) {
      if (args.values[flag] === undefined) {
        throw new ValidationError(`missing required flag --${flag}`);
      }
    }
    const mode = args.values.mode as string;
    if (!(MODES as readonly string[]).includes(mode)) {
      throw new ValidationError(`mode must be one of ${MODES.join(", ")}, got '${mode}'`);
    }
    const gradMode = args.values["grad-mode"] as string;
    if (!(GRAD_MODES as readonly string[]).includes(gradMode)) {
      throw new ValidationError(
        `grad mode must be one of ${GRAD_MODES.join(", ")}, got '${gradMode}'`,
      );
    }
    const result = runExtraction({
      modelPath: args.values.model!,
      calibPath: args.values.calib!,
      outDir: args.values.out!,
      sampleCap: intFlag(args.values.samples!, "--samples"),
      loss: args.values.loss!,
      mode: mode as Mode,
      seed: intFlag(args.values.seed!, "--seed"),
      gradMode: gradMode as GradMode,
      sampleIndex: intFlag(args.values["sample-index"]!, "--sample-index"),
    });
    process.stderr.write(
      `accepted ${result.accepted} samples, skipped ${result.skipped}\n`,
    );
    for (const path of [result.importancePath, result.gradsPath]) {
      if (path !== undefined) process.stderr.write(`wrote ${path}\n`);
    }
    return 0;
  } catch (err) {
    if (err instanceof ExtractorError) {
      process.stderr.write(`${err.category}: ${err.message}\n`);
      return 1;
    }
    throw err;
  }
}

if (process.argv[1] !== undefined && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
