/** Tensor checkpoint container.
 *
 * Layout: bytes 0..7 hold the unsigned 64-bit little-endian header length N,
 * bytes 8..8+N a UTF-8 JSON object mapping tensor name to
 * { dtype, shape, data_offsets } with an optional "__metadata__" string map,
 * and the remainder raw little-endian tensor data addressed relative to the
 * end of the header. Data ranges must be contiguous and ascending in header
 * order, so equal tensors always produce byte-identical files.
 */

import { readFileSync, writeFileSync, renameSync, rmSync } from "node:fs";
import { FormatError, IoError, ValidationError } from "./errors.js";

export type Dtype = "F64" | "F32" | "F16" | "BF16";

const DTYPE_BYTES: Record<Dtype, number> = { F64: 8, F32: 4, F16: 2, BF16: 2 };
const ENTRY_FIELDS = ["dtype", "shape", "data_offsets"];

export interface TensorView {
  dtype: Dtype;
  shape: number[];
  bytes: Uint8Array;
}

export interface Checkpoint {
  metadata: Record<string, string>;
  names: string[];
  tensors: Map<string, TensorView>;
}

function numel(shape: number[]): number {
  let total = 1;
  for (const extent of shape) total *= extent;
  return total;
}

function checkShape(name: string, shape: unknown): number[] {
  if (!Array.isArray(shape)) {
    throw new FormatError(`shape of '${name}' is not an array`);
  }
  for (const extent of shape) {
    if (!Number.isInteger(extent)) {
      throw new FormatError(`shape of '${name}' has a non-integer extent`);
    }
    if ((extent as number) < 0) {
      throw new FormatError(`shape of '${name}' has negative extent ${extent}`);
    }
  }
  return shape as number[];
}

export function openCheckpoint(path: string): Checkpoint {
  let buffer: Buffer;
  try {
    buffer = readFileSync(path);
  } catch (err) {
    throw new IoError(`cannot read checkpoint ${path}: ${(err as Error).message}`);
  }
  if (buffer.length < 8) {
    throw new FormatError("header length truncated");
  }
  const view = new DataView(buffer.buffer, buffer.byteOffset, buffer.byteLength);
  const headerLenBig = view.getBigUint64(0, true);
  if (headerLenBig > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new FormatError(`header declares ${headerLenBig} bytes, beyond addressable range`);
  }
  const headerLen = Number(headerLenBig);
  if (8 + headerLen > buffer.length) {
    throw new FormatError(`header declares ${headerLen} bytes but the file holds ${buffer.length - 8}`);
  }
  let headerText: string;
  try {
    headerText = new TextDecoder("utf-8", { fatal: true }).decode(
      buffer.subarray(8, 8 + headerLen),
    );
  } catch (err) {
    throw new FormatError(`header is not UTF-8: ${(err as Error).message}`);
  }
  let header: unknown;
  try {
    header = JSON.parse(headerText);
  } catch (err) {
    throw new FormatError(`header is not valid JSON: ${(err as Error).message}`);
  }
  if (header === null || typeof header !== "object" || Array.isArray(header)) {
    throw new FormatError("header is not a JSON object");
  }

  const data = buffer.subarray(8 + headerLen);
  const metadata: Record<string, string> = {};
  const tensors = new Map<string, TensorView>();
  const names: string[] = [];
  let cursor = 0;
  for (const [name, entry] of Object.entries(header as Record<string, unknown>)) {
    if (name === "__metadata__") {
      if (entry === null || typeof entry !== "object" || Array.isArray(entry)) {
        throw new FormatError("__metadata__ is not an object");
      }
      for (const [key, value] of Object.entries(entry as Record<string, unknown>)) {
        if (typeof value !== "string") {
          throw new FormatError(`__metadata__ value for '${key}' is not a string`);
        }
        metadata[key] = value;
      }
      continue;
    }
    if (entry === null || typeof entry !== "object" || Array.isArray(entry)) {
      throw new FormatError(`entry for '${name}' is not an object`);
    }
    const record = entry as Record<string, unknown>;
    for (const field of ENTRY_FIELDS) {
      if (!(field in record)) {
        throw new FormatError(`entry for '${name}' is missing field '${field}'`);
      }
    }
    for (const field of Object.keys(record)) {
      if (!ENTRY_FIELDS.includes(field)) {
        throw new FormatError(`entry for '${name}' has unknown field '${field}'`);
      }
    }
    const dtype = record.dtype as string;
    if (!(dtype in DTYPE_BYTES)) {
      throw new FormatError(`unknown dtype '${dtype}' for tensor '${name}'`);
    }
    const shape = checkShape(name, record.shape);
    const offsets = record.data_offsets;
    if (
      !Array.isArray(offsets) || offsets.length !== 2 ||
      !offsets.every((n) => Number.isInteger(n) && n >= 0)
    ) {
      throw new FormatError(`data_offsets of '${name}' is not a pair of non-negative integers`);
    }
    const [begin, end] = offsets as [number, number];
    const need = numel(shape) * DTYPE_BYTES[dtype as Dtype];
    if (end - begin !== need) {
      throw new FormatError(
        `data_offsets of '${name}' span ${end - begin} bytes, shape and dtype require ${need}`,
      );
    }
    if (begin !== cursor) {
      const relation = begin < cursor ? "overlaps previous data" : "leaves a gap";
      throw new FormatError(`data range of '${name}' ${relation} (begin ${begin}, expected ${cursor})`);
    }
    if (end > data.length) {
      throw new FormatError(`data range out of bounds for tensor '${name}'`);
    }
    cursor = end;
    names.push(name);
    tensors.set(name, { dtype: dtype as Dtype, shape, bytes: data.subarray(begin, end) });
  }
  if (cursor !== data.length) {
    throw new FormatError(`data ranges cover ${cursor} bytes but the data section holds ${data.length}`);
  }
  return { metadata, names, tensors };
}

function f16ToNumber(bits: number): number {
  const sign = bits & 0x8000 ? -1 : 1;
  const exponent = (bits >> 10) & 0x1f;
  const mantissa = bits & 0x3ff;
  if (exponent === 0) return sign * mantissa * 2 ** -24;
  if (exponent === 31) return mantissa ? NaN : sign * Infinity;
  return sign * (1024 + mantissa) * 2 ** (exponent - 25);
}

const scratch = new DataView(new ArrayBuffer(4));

function bf16ToNumber(bits: number): number {
  scratch.setUint32(0, (bits << 16) >>> 0, true);
  return scratch.getFloat32(0, true);
}

/** Numeric values of a stored tensor, widened to f64. */
export function tensorValues(view: TensorView): Float64Array {
  const copy = new Uint8Array(view.bytes).buffer;
  const out = new Float64Array(numel(view.shape));
  if (view.dtype === "F64") {
    out.set(new Float64Array(copy));
  } else if (view.dtype === "F32") {
    const narrow = new Float32Array(copy);
    for (let i = 0; i < narrow.length; i++) out[i] = narrow[i];
  } else {
    const half = new Uint16Array(copy);
    const decode = view.dtype === "F16" ? f16ToNumber : bf16ToNumber;
    for (let i = 0; i < half.length; i++) out[i] = decode(half[i]);
  }
  return out;
}

export interface PendingTensor {
  dtype: "F64" | "F32";
  shape: number[];
  values: Float64Array;
}

function encode(name: string, tensor: PendingTensor): Uint8Array {
  if (numel(tensor.shape) !== tensor.values.length) {
    throw new ValidationError(
      `tensor '${name}' has ${tensor.values.length} values but shape [${tensor.shape}]`,
    );
  }
  for (let i = 0; i < tensor.values.length; i++) {
    if (!Number.isFinite(tensor.values[i])) {
      throw new ValidationError(`non-finite value in tensor ${name}`);
    }
  }
  if (tensor.dtype === "F64") {
    return new Uint8Array(new Float64Array(tensor.values).buffer);
  }
  return new Uint8Array(Float32Array.from(tensor.values).buffer);
}

/** Write tensors in lexicographic name order, atomically. */
export function writeCheckpoint(
  path: string,
  tensors: Map<string, PendingTensor>,
  metadata: Record<string, string> = {},
): void {
  const header: Record<string, unknown> = {};
  if (Object.keys(metadata).length > 0) {
    header.__metadata__ = metadata;
  }
  const names = [...tensors.keys()].sort();
  const payloads: Uint8Array[] = [];
  let cursor = 0;
  for (const name of names) {
    const tensor = tensors.get(name)!;
    const payload = encode(name, tensor);
    header[name] = {
      dtype: tensor.dtype,
      shape: tensor.shape,
      data_offsets: [cursor, cursor + payload.length],
    };
    payloads.push(payload);
    cursor += payload.length;
  }
  const headerBytes = new TextEncoder().encode(JSON.stringify(header));
  const lengthBytes = new Uint8Array(8);
  new DataView(lengthBytes.buffer).setBigUint64(0, BigInt(headerBytes.length), true);
  const partial = path + ".partial";
  try {
    writeFileSync(partial, Buffer.concat([lengthBytes, headerBytes, ...payloads]));
    renameSync(partial, path);
  } catch (err) {
    rmSync(partial, { force: true });
    throw new IoError(`cannot write ${path}: ${(err as Error).message}`);
  }
}
