/** Extraction pipeline: importance maps and Q/K/V/O gradient-matrix dumps.
 *
 * Importance is the mean absolute per-sample gradient of the loss, one score
 * per parameter, accumulated in f64 and written f32 under the parameter's own
 * name. Gradient matrices are the per-layer Q/K/V/O weight gradients, written
 * as 2-D f32 tensors named {KIND}.{layer}; mean mode averages them over the
 * accepted samples, per-sample mode takes one designated sample's gradient.
 *
 * Samples are consumed in file order up to the cap; sequences that do not
 * tokenize, exceed the vocabulary, or are shorter than two tokens are skipped
 * and counted. Provenance (calibration id, counts, loss, seed) rides in the
 * output metadata. Fixed iteration order makes equal jobs byte-identical.
 */

import { mkdirSync } from "node:fs";
import { basename, join } from "node:path";
import { PendingTensor, writeCheckpoint } from "./checkpoint.js";
import { CalibrationSample, loadCalibration } from "./calibration.js";
import { IoError, ValidationError } from "./errors.js";
import {
  PROJECTION_KINDS,
  TinyModel,
  backward,
  loadModel,
  paramShapes,
  projectionName,
} from "./model.js";
import { checkTokenIds, tokenize } from "./tokenizer.js";

export const MODES = ["importance", "grads", "both"] as const;
export type Mode = (typeof MODES)[number];

export const GRAD_MODES = ["mean", "per-sample"] as const;
export type GradMode = (typeof GRAD_MODES)[number];

export const LOSS_CLM = "clm";

export interface ExtractionJob {
  modelPath: string;
  calibPath: string;
  sampleCap: number;
  loss: string;
  mode: Mode;
  outDir: string;
  seed: number;
  gradMode: GradMode;
  sampleIndex: number;
}

export const JOB_DEFAULTS = {
  sampleCap: 100,
  loss: LOSS_CLM,
  mode: "both" as Mode,
  seed: 0,
  gradMode: "mean" as GradMode,
  sampleIndex: 0,
};

export interface ExtractionResult {
  importancePath?: string;
  gradsPath?: string;
  accepted: number;
  skipped: number;
}

function checkJob(job: ExtractionJob): void {
  if (!Number.isInteger(job.sampleCap) || job.sampleCap < 1) {
    throw new ValidationError(`sample cap must be a positive integer, got ${job.sampleCap}`);
  }
  if (job.loss !== LOSS_CLM) {
    throw new ValidationError(`unsupported loss '${job.loss}'; expected '${LOSS_CLM}'`);
  }
  if (!MODES.includes(job.mode)) {
    throw new ValidationError(`mode must be one of ${MODES.join(", ")}, got '${job.mode}'`);
  }
  if (!GRAD_MODES.includes(job.gradMode)) {
    throw new ValidationError(
      `grad mode must be one of ${GRAD_MODES.join(", ")}, got '${job.gradMode}'`,
    );
  }
  if (!Number.isInteger(job.seed) || job.seed < 0) {
    throw new ValidationError(`seed must be a non-negative integer, got ${job.seed}`);
  }
  if (!Number.isInteger(job.sampleIndex) || job.sampleIndex < 0) {
    throw new ValidationError(`sample index must be a non-negative integer, got ${job.sampleIndex}`);
  }
}

function sampleTokens(model: TinyModel, sample: CalibrationSample): number[] | null {
  const ids =
    sample.text !== undefined
      ? tokenize(sample.text, model.config.vocabSize)
      : checkTokenIds(sample.tokens!, model.config.vocabSize);
  if (ids === null || ids.length < 2) return null;
  return ids;
}

export function runExtraction(job: ExtractionJob): ExtractionResult {
  checkJob(job);
  const model = loadModel(job.modelPath);
  const calib = loadCalibration(job.calibPath);

  const sequences: number[][] = [];
  let skipped = 0;
  for (const sample of calib.samples.slice(0, job.sampleCap)) {
    const ids = sampleTokens(model, sample);
    if (ids === null) {
      skipped += 1;
      continue;
    }
    sequences.push(ids);
  }
  if (sequences.length === 0) {
    throw new ValidationError(
      `no usable calibration samples: all ${skipped} within the cap were skipped`,
    );
  }
  const wantGrads = job.mode === "grads" || job.mode === "both";
  if (wantGrads && job.gradMode === "per-sample" && job.sampleIndex >= sequences.length) {
    throw new ValidationError(
      `sample index ${job.sampleIndex} out of range; ${sequences.length} samples were accepted`,
    );
  }

  const shapes = paramShapes(model.config);
  const absSum = new Map<string, Float64Array>();
  const gradSum = new Map<string, Float64Array>();
  for (const [name, values] of model.params) {
    try {
      absSum.set(name, new Float64Array(values.length));
    } catch (err) {
      throw new IoError(`cannot allocate accumulator for tensor ${name}: ${(err as Error).message}`);
    }
  }
  const matrixNames: { stored: string; param: string }[] = [];
  for (let layer = 0; layer < model.config.numLayers; layer++) {
    for (const kind of PROJECTION_KINDS) {
      const param = projectionName(layer, kind);
      matrixNames.push({ stored: `${kind.toUpperCase()}.${layer}`, param });
      gradSum.set(param, new Float64Array(model.params.get(param)!.length));
    }
  }

  for (let s = 0; s < sequences.length; s++) {
    const { grads } = backward(model, sequences[s]);
    for (const [name, grad] of grads) {
      const acc = absSum.get(name)!;
      for (let i = 0; i < grad.length; i++) acc[i] += Math.abs(grad[i]);
      if (wantGrads && gradSum.has(name)) {
        const keep =
          job.gradMode === "mean" ? 1 / sequences.length : s === job.sampleIndex ? 1 : 0;
        if (keep !== 0) {
          const sum = gradSum.get(name)!;
          for (let i = 0; i < grad.length; i++) sum[i] += grad[i] * keep;
        }
      }
    }
  }

  try {
    mkdirSync(job.outDir, { recursive: true });
  } catch (err) {
    throw new IoError(`cannot create output directory ${job.outDir}: ${(err as Error).message}`);
  }

  const provenance: Record<string, string> = {
    model_id: basename(job.modelPath),
    calibration_id: calib.id,
    sample_count: String(sequences.length),
    samples_skipped: String(skipped),
    loss: job.loss,
    seed: String(job.seed),
  };

  const result: ExtractionResult = { accepted: sequences.length, skipped };

  if (job.mode === "importance" || job.mode === "both") {
    const tensors = new Map<string, PendingTensor>();
    for (const [name, acc] of absSum) {
      const mean = new Float64Array(acc.length);
      for (let i = 0; i < acc.length; i++) mean[i] = acc[i] / sequences.length;
      tensors.set(name, { dtype: "F32", shape: shapes.get(name)!, values: mean });
    }
    const path = join(job.outDir, "importance.ckpt");
    writeCheckpoint(path, tensors, provenance);
    result.importancePath = path;
  }

  if (wantGrads) {
    const tensors = new Map<string, PendingTensor>();
    for (const { stored, param } of matrixNames) {
      tensors.set(stored, {
        dtype: "F32",
        shape: shapes.get(param)!,
        values: gradSum.get(param)!,
      });
    }
    const metadata: Record<string, string> = { ...provenance, grad_mode: job.gradMode };
    if (job.gradMode === "per-sample") {
      metadata.sample_index = String(job.sampleIndex);
    }
    const path = join(job.outDir, "grads.ckpt");
    writeCheckpoint(path, tensors, metadata);
    result.gradsPath = path;
  }
  return result;
}
