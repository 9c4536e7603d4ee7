/** Tiny causal transformer with exact Float64 forward and backward passes.
 *
 * Architecture per layer: RMSNorm gain, then single-head causal
 * self-attention through Q/K/V/O projection matrices, with a residual
 * connection. A final RMSNorm feeds an untied unembedding. The loss is
 * next-token cross entropy averaged over the sequence's predicted positions,
 * so every sequence needs at least two tokens.
 *
 * All math runs in f64 with a fixed summation order; given equal inputs the
 * gradients are bit-identical across runs.
 */

import { basename } from "node:path";
import {
  Checkpoint,
  PendingTensor,
  openCheckpoint,
  tensorValues,
} from "./checkpoint.js";
import { ValidationError } from "./errors.js";
import { SeededRng } from "./rng.js";

export const PROJECTION_KINDS = ["q", "k", "v", "o"] as const;
export type ProjectionKind = (typeof PROJECTION_KINDS)[number];

export const EMBED_NAME = "model.embed_tokens.weight";
export const FINAL_NORM_NAME = "model.norm.weight";
export const LM_HEAD_NAME = "lm_head.weight";
export const MODEL_TYPE = "tiny-causal-attention";

const RMS_EPS = 1e-6;

export function layerNormName(layer: number): string {
  return `model.layers.${layer}.input_layernorm.weight`;
}

export function projectionName(layer: number, kind: ProjectionKind): string {
  return `model.layers.${layer}.self_attn.${kind}_proj.weight`;
}

export interface ModelConfig {
  vocabSize: number;
  hiddenSize: number;
  numLayers: number;
}

export interface TinyModel {
  config: ModelConfig;
  /** Source file name when loaded from disk, empty for in-memory models. */
  id: string;
  params: Map<string, Float64Array>;
}

export function paramShapes(config: ModelConfig): Map<string, number[]> {
  const { vocabSize, hiddenSize, numLayers } = config;
  const shapes = new Map<string, number[]>();
  shapes.set(EMBED_NAME, [vocabSize, hiddenSize]);
  for (let layer = 0; layer < numLayers; layer++) {
    shapes.set(layerNormName(layer), [hiddenSize]);
    for (const kind of PROJECTION_KINDS) {
      shapes.set(projectionName(layer, kind), [hiddenSize, hiddenSize]);
    }
  }
  shapes.set(FINAL_NORM_NAME, [hiddenSize]);
  shapes.set(LM_HEAD_NAME, [vocabSize, hiddenSize]);
  return shapes;
}

export function initModel(config: ModelConfig, seed: number): TinyModel {
  const { vocabSize, hiddenSize, numLayers } = config;
  if (vocabSize < 2 || hiddenSize < 1 || numLayers < 1) {
    throw new ValidationError(
      `model config needs vocab >= 2, hidden >= 1, layers >= 1, got ` +
        `${vocabSize}/${hiddenSize}/${numLayers}`,
    );
  }
  const rng = new SeededRng(seed);
  const params = new Map<string, Float64Array>();
  const fill = (count: number, std: number) => {
    const out = new Float64Array(count);
    for (let i = 0; i < count; i++) out[i] = rng.gaussian() * std;
    return out;
  };
  const projStd = 1 / Math.sqrt(hiddenSize);
  params.set(EMBED_NAME, fill(vocabSize * hiddenSize, 0.6));
  for (let layer = 0; layer < numLayers; layer++) {
    params.set(layerNormName(layer), new Float64Array(hiddenSize).fill(1));
    for (const kind of PROJECTION_KINDS) {
      params.set(projectionName(layer, kind), fill(hiddenSize * hiddenSize, projStd));
    }
  }
  params.set(FINAL_NORM_NAME, new Float64Array(hiddenSize).fill(1));
  params.set(LM_HEAD_NAME, fill(vocabSize * hiddenSize, projStd));
  return { config, id: "", params };
}

/** Tensors ready for writeCheckpoint, f32 with the config in metadata. */
export function modelTensors(model: TinyModel): {
  tensors: Map<string, PendingTensor>;
  metadata: Record<string, string>;
} {
  const shapes = paramShapes(model.config);
  const tensors = new Map<string, PendingTensor>();
  for (const [name, shape] of shapes) {
    tensors.set(name, { dtype: "F32", shape, values: model.params.get(name)! });
  }
  return {
    tensors,
    metadata: {
      model_type: MODEL_TYPE,
      vocab_size: String(model.config.vocabSize),
      hidden_size: String(model.config.hiddenSize),
      num_layers: String(model.config.numLayers),
    },
  };
}

function metaInt(ckpt: Checkpoint, key: string): number {
  const raw = ckpt.metadata[key];
  if (raw === undefined) {
    throw new ValidationError(`model checkpoint is missing metadata key '${key}'`);
  }
  const value = Number(raw);
  if (!Number.isInteger(value) || value < 1) {
    throw new ValidationError(`model metadata '${key}' must be a positive integer, got '${raw}'`);
  }
  return value;
}

export function loadModel(path: string): TinyModel {
  const ckpt = openCheckpoint(path);
  const config: ModelConfig = {
    vocabSize: metaInt(ckpt, "vocab_size"),
    hiddenSize: metaInt(ckpt, "hidden_size"),
    numLayers: metaInt(ckpt, "num_layers"),
  };
  const shapes = paramShapes(config);
  const params = new Map<string, Float64Array>();
  for (const [name, shape] of shapes) {
    const view = ckpt.tensors.get(name);
    if (view === undefined) {
      const found = ckpt.names.slice(0, 8).join(", ");
      throw new ValidationError(`model is missing tensor '${name}'; found: ${found}`);
    }
    if (view.shape.length !== shape.length || view.shape.some((n, i) => n !== shape[i])) {
      throw new ValidationError(
        `model tensor '${name}' has shape [${view.shape}], expected [${shape}]`,
      );
    }
    params.set(name, tensorValues(view));
  }
  for (const name of ckpt.names) {
    if (!shapes.has(name)) {
      throw new ValidationError(`unexpected tensor '${name}' in model`);
    }
  }
  return { config, id: basename(path), params };
}

interface LayerCache {
  input: Float64Array;
  rms: Float64Array;
  normed: Float64Array;
  q: Float64Array;
  k: Float64Array;
  v: Float64Array;
  att: Float64Array;
  ctx: Float64Array;
}

interface ForwardCache {
  seqLen: number;
  layers: LayerCache[];
  final: Float64Array;
  finalRms: Float64Array;
  normedFinal: Float64Array;
  probs: Float64Array;
  loss: number;
}

function checkTokens(model: TinyModel, tokens: number[]): void {
  if (tokens.length < 2) {
    throw new ValidationError(`sequence needs at least 2 tokens, got ${tokens.length}`);
  }
  for (const id of tokens) {
    if (!Number.isInteger(id) || id < 0 || id >= model.config.vocabSize) {
      throw new ValidationError(`token id ${id} outside vocabulary of ${model.config.vocabSize}`);
    }
  }
}

/** y[t] = gain ⊙ x[t] / rms(x[t]); returns the per-position rms. */
function rmsNormRows(
  x: Float64Array,
  gain: Float64Array,
  seqLen: number,
  dim: number,
  out: Float64Array,
): Float64Array {
  const rms = new Float64Array(seqLen);
  for (let t = 0; t < seqLen; t++) {
    let sq = 0;
    for (let i = 0; i < dim; i++) sq += x[t * dim + i] ** 2;
    rms[t] = Math.sqrt(sq / dim + RMS_EPS);
    for (let i = 0; i < dim; i++) out[t * dim + i] = (gain[i] * x[t * dim + i]) / rms[t];
  }
  return rms;
}

/** dx and dgain for y = gain ⊙ x / rms, accumulating into both outputs. */
function rmsNormBackward(
  x: Float64Array,
  gain: Float64Array,
  rms: Float64Array,
  dy: Float64Array,
  seqLen: number,
  dim: number,
  dx: Float64Array,
  dgain: Float64Array,
): void {
  for (let t = 0; t < seqLen; t++) {
    let dot = 0;
    for (let i = 0; i < dim; i++) {
      const dxhat = dy[t * dim + i] * gain[i];
      dot += dxhat * x[t * dim + i];
      dgain[i] += (dy[t * dim + i] * x[t * dim + i]) / rms[t];
    }
    const shrink = dot / (dim * rms[t] ** 3);
    for (let i = 0; i < dim; i++) {
      dx[t * dim + i] += (dy[t * dim + i] * gain[i]) / rms[t] - x[t * dim + i] * shrink;
    }
  }
}

/** rows[t] = W @ x[t] for a row-major W of shape [out, in]. */
function matmulRows(
  w: Float64Array,
  x: Float64Array,
  seqLen: number,
  outDim: number,
  inDim: number,
): Float64Array {
  const out = new Float64Array(seqLen * outDim);
  for (let t = 0; t < seqLen; t++) {
    for (let j = 0; j < outDim; j++) {
      let acc = 0;
      for (let i = 0; i < inDim; i++) acc += w[j * inDim + i] * x[t * inDim + i];
      out[t * outDim + j] = acc;
    }
  }
  return out;
}

/** dW += dy ⊗ x and dx += W^T dy, rowwise. */
function matmulBackward(
  w: Float64Array,
  x: Float64Array,
  dy: Float64Array,
  seqLen: number,
  outDim: number,
  inDim: number,
  dw: Float64Array,
  dx: Float64Array | null,
): void {
  for (let t = 0; t < seqLen; t++) {
    for (let j = 0; j < outDim; j++) {
      const g = dy[t * outDim + j];
      if (g === 0) continue;
      for (let i = 0; i < inDim; i++) {
        dw[j * inDim + i] += g * x[t * inDim + i];
        if (dx !== null) dx[t * inDim + i] += g * w[j * inDim + i];
      }
    }
  }
}

function runForward(model: TinyModel, tokens: number[]): ForwardCache {
  checkTokens(model, tokens);
  const { hiddenSize: d, numLayers, vocabSize } = model.config;
  const seqLen = tokens.length;
  const embed = model.params.get(EMBED_NAME)!;

  let x = new Float64Array(seqLen * d);
  for (let t = 0; t < seqLen; t++) {
    for (let i = 0; i < d; i++) x[t * d + i] = embed[tokens[t] * d + i];
  }

  const scale = 1 / Math.sqrt(d);
  const layers: LayerCache[] = [];
  for (let layer = 0; layer < numLayers; layer++) {
    const gain = model.params.get(layerNormName(layer))!;
    const normed = new Float64Array(seqLen * d);
    const rms = rmsNormRows(x, gain, seqLen, d, normed);
    const q = matmulRows(model.params.get(projectionName(layer, "q"))!, normed, seqLen, d, d);
    const k = matmulRows(model.params.get(projectionName(layer, "k"))!, normed, seqLen, d, d);
    const v = matmulRows(model.params.get(projectionName(layer, "v"))!, normed, seqLen, d, d);

    const att = new Float64Array(seqLen * seqLen);
    const ctx = new Float64Array(seqLen * d);
    for (let t = 0; t < seqLen; t++) {
      let top = -Infinity;
      for (let u = 0; u <= t; u++) {
        let dot = 0;
        for (let i = 0; i < d; i++) dot += q[t * d + i] * k[u * d + i];
        att[t * seqLen + u] = dot * scale;
        if (att[t * seqLen + u] > top) top = att[t * seqLen + u];
      }
      let total = 0;
      for (let u = 0; u <= t; u++) {
        att[t * seqLen + u] = Math.exp(att[t * seqLen + u] - top);
        total += att[t * seqLen + u];
      }
      for (let u = 0; u <= t; u++) {
        att[t * seqLen + u] /= total;
        for (let i = 0; i < d; i++) ctx[t * d + i] += att[t * seqLen + u] * v[u * d + i];
      }
    }
    const out = matmulRows(model.params.get(projectionName(layer, "o"))!, ctx, seqLen, d, d);
    const next = new Float64Array(seqLen * d);
    for (let i = 0; i < seqLen * d; i++) next[i] = x[i] + out[i];
    layers.push({ input: x, rms, normed, q, k, v, att, ctx });
    x = next;
  }

  const finalGain = model.params.get(FINAL_NORM_NAME)!;
  const normedFinal = new Float64Array(seqLen * d);
  const finalRms = rmsNormRows(x, finalGain, seqLen, d, normedFinal);
  const logits = matmulRows(model.params.get(LM_HEAD_NAME)!, normedFinal, seqLen, vocabSize, d);

  const probs = new Float64Array(seqLen * vocabSize);
  let loss = 0;
  for (let t = 0; t < seqLen - 1; t++) {
    let top = -Infinity;
    for (let j = 0; j < vocabSize; j++) {
      if (logits[t * vocabSize + j] > top) top = logits[t * vocabSize + j];
    }
    let total = 0;
    for (let j = 0; j < vocabSize; j++) {
      total += Math.exp(logits[t * vocabSize + j] - top);
    }
    loss += top + Math.log(total) - logits[t * vocabSize + tokens[t + 1]];
    for (let j = 0; j < vocabSize; j++) {
      probs[t * vocabSize + j] = Math.exp(logits[t * vocabSize + j] - top) / total;
    }
  }
  loss /= seqLen - 1;
  return { seqLen, layers, final: x, finalRms, normedFinal, probs, loss };
}

export function forwardLoss(model: TinyModel, tokens: number[]): number {
  return runForward(model, tokens).loss;
}

export interface BackwardResult {
  loss: number;
  grads: Map<string, Float64Array>;
}

export function backward(model: TinyModel, tokens: number[]): BackwardResult {
  const cache = runForward(model, tokens);
  const { hiddenSize: d, numLayers, vocabSize } = model.config;
  const seqLen = cache.seqLen;
  const scale = 1 / Math.sqrt(d);

  const grads = new Map<string, Float64Array>();
  for (const [name, values] of model.params) {
    grads.set(name, new Float64Array(values.length));
  }

  const lmHead = model.params.get(LM_HEAD_NAME)!;
  const dLogits = new Float64Array(seqLen * vocabSize);
  const lossScale = 1 / (seqLen - 1);
  for (let t = 0; t < seqLen - 1; t++) {
    for (let j = 0; j < vocabSize; j++) {
      const indicator = j === tokens[t + 1] ? 1 : 0;
      dLogits[t * vocabSize + j] = (cache.probs[t * vocabSize + j] - indicator) * lossScale;
    }
  }
  const dNormedFinal = new Float64Array(seqLen * d);
  matmulBackward(
    lmHead, cache.normedFinal, dLogits, seqLen, vocabSize, d,
    grads.get(LM_HEAD_NAME)!, dNormedFinal,
  );

  let dx = new Float64Array(seqLen * d);
  rmsNormBackward(
    cache.final, model.params.get(FINAL_NORM_NAME)!, cache.finalRms,
    dNormedFinal, seqLen, d, dx, grads.get(FINAL_NORM_NAME)!,
  );

  for (let layer = numLayers - 1; layer >= 0; layer--) {
    const lc = cache.layers[layer];
    const dResidual = new Float64Array(dx);

    const dCtx = new Float64Array(seqLen * d);
    matmulBackward(
      model.params.get(projectionName(layer, "o"))!, lc.ctx, dx, seqLen, d, d,
      grads.get(projectionName(layer, "o"))!, dCtx,
    );

    const dQ = new Float64Array(seqLen * d);
    const dK = new Float64Array(seqLen * d);
    const dV = new Float64Array(seqLen * d);
    const dAttRow = new Float64Array(seqLen);
    for (let t = 0; t < seqLen; t++) {
      let weighted = 0;
      for (let u = 0; u <= t; u++) {
        let dot = 0;
        for (let i = 0; i < d; i++) {
          dot += lc.v[u * d + i] * dCtx[t * d + i];
          dV[u * d + i] += lc.att[t * seqLen + u] * dCtx[t * d + i];
        }
        dAttRow[u] = dot;
        weighted += lc.att[t * seqLen + u] * dot;
      }
      for (let u = 0; u <= t; u++) {
        const dScore = lc.att[t * seqLen + u] * (dAttRow[u] - weighted) * scale;
        for (let i = 0; i < d; i++) {
          dQ[t * d + i] += dScore * lc.k[u * d + i];
          dK[u * d + i] += dScore * lc.q[t * d + i];
        }
      }
    }

    const dNormed = new Float64Array(seqLen * d);
    matmulBackward(
      model.params.get(projectionName(layer, "q"))!, lc.normed, dQ, seqLen, d, d,
      grads.get(projectionName(layer, "q"))!, dNormed,
    );
    matmulBackward(
      model.params.get(projectionName(layer, "k"))!, lc.normed, dK, seqLen, d, d,
      grads.get(projectionName(layer, "k"))!, dNormed,
    );
    matmulBackward(
      model.params.get(projectionName(layer, "v"))!, lc.normed, dV, seqLen, d, d,
      grads.get(projectionName(layer, "v"))!, dNormed,
    );

    dx = dResidual;
    rmsNormBackward(
      lc.input, model.params.get(layerNormName(layer))!, lc.rms,
      dNormed, seqLen, d, dx, grads.get(layerNormName(layer))!,
    );
  }

  const dEmbed = grads.get(EMBED_NAME)!;
  for (let t = 0; t < seqLen; t++) {
    for (let i = 0; i < d; i++) dEmbed[tokens[t] * d + i] += dx[t * d + i];
  }
  return { loss: cache.loss, grads };
}
