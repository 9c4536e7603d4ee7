/** Calibration file: JSON with an id and an ordered sample list.
 *
 * { "id": string, "samples": [ { "text": string } | { "tokens": [ints] } ] }
 *
 * Each sample carries exactly one of "text" or "tokens". Order matters: the
 * sample cap keeps a prefix, matching the convention of taking the first
 * records of a calibration corpus.
 */

import { readFileSync } from "node:fs";
import { FormatError, IoError, ValidationError } from "./errors.js";

export interface CalibrationSample {
  text?: string;
  tokens?: number[];
}

export interface CalibrationSet {
  id: string;
  samples: CalibrationSample[];
}

function checkSample(index: number, raw: unknown): CalibrationSample {
  if (raw === null || typeof raw !== "object" || Array.isArray(raw)) {
    throw new ValidationError(`calibration sample ${index} is not an object`);
  }
  const record = raw as Record<string, unknown>;
  for (const key of Object.keys(record)) {
    if (key !== "text" && key !== "tokens") {
      throw new ValidationError(`calibration sample ${index} has unknown key '${key}'`);
    }
  }
  const hasText = "text" in record;
  const hasTokens = "tokens" in record;
  if (hasText === hasTokens) {
    throw new ValidationError(`calibration sample ${index} needs exactly one of 'text' or 'tokens'`);
  }
  if (hasText) {
    if (typeof record.text !== "string") {
      throw new ValidationError(`calibration sample ${index} has a non-string 'text'`);
    }
    return { text: record.text };
  }
  const tokens = record.tokens;
  if (!Array.isArray(tokens) || !tokens.every((t) => Number.isInteger(t))) {
    throw new ValidationError(`calibration sample ${index} has a non-integer-array 'tokens'`);
  }
  return { tokens: tokens as number[] };
}

export function loadCalibration(path: string): CalibrationSet {
  let text: string;
  try {
    text = readFileSync(path, "utf-8");
  } catch (err) {
    throw new IoError(`cannot read calibration ${path}: ${(err as Error).message}`);
  }
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new FormatError(`calibration is not valid JSON: ${(err as Error).message}`);
  }
  if (raw === null || typeof raw !== "object" || Array.isArray(raw)) {
    throw new FormatError("calibration is not a JSON object");
  }
  const record = raw as Record<string, unknown>;
  for (const key of Object.keys(record)) {
    if (key !== "id" && key !== "samples") {
      throw new ValidationError(`calibration has unknown key '${key}'`);
    }
  }
  const id = record.id ?? "";
  if (typeof id !== "string") {
    throw new ValidationError("calibration id is not a string");
  }
  if (!Array.isArray(record.samples)) {
    throw new ValidationError("calibration 'samples' is not an array");
  }
  const samples = (record.samples as unknown[]).map((raw, i) => checkSample(i, raw));
  if (samples.length === 0) {
    throw new ValidationError("calibration set is empty");
  }
  return { id, samples };
}
