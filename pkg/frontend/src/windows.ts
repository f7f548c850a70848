// TR windowing and the pooling stages shared by the extractors.

import { DataError } from "./nmef.js";

/**
 * Number of complete repetition-time windows in an asset.
 *
 * The trailing incomplete window is discarded so every modality of the same
 * asset agrees on T. The small epsilon absorbs float division noise so that
 * e.g. a 14.9 s asset at tr = 1.49 yields exactly 10 windows.
 */
export function rowCount(durationSeconds: number, trSeconds: number): number {
  if (!(trSeconds > 0)) throw new DataError("tr must be positive");
  if (!(durationSeconds > 0)) throw new DataError("duration must be positive");
  return Math.floor(durationSeconds / trSeconds + 1e-9);
}

/**
 * Indices of `count` uniformly spaced items out of `available`.
 *
 * Uses segment midpoints: index i comes from the middle of the i-th of
 * `count` equal segments. Deterministic, and exact for count == available.
 */
export function uniformIndices(available: number, count: number): number[] {
  if (available < 1 || count < 1) {
    throw new DataError("need at least one frame and one sample");
  }
  const out: number[] = [];
  for (let i = 0; i < count; i++) {
    out.push(Math.min(available - 1, Math.floor(((i + 0.5) * available) / count)));
  }
  return out;
}

/**
 * Collapse a (frames x tokens x dim) hidden-state tensor to one dim-vector:
 * mean over the token axis first, then max over the frame axis.
 */
export function poolWindow(
  states: Float32Array,
  frames: number,
  tokens: number,
  dim: number,
): Float32Array {
  if (states.length !== frames * tokens * dim) {
    throw new DataError(
      `states length ${states.length} != ${frames}x${tokens}x${dim}`,
    );
  }
  const row = new Float32Array(dim).fill(-Infinity);
  for (let f = 0; f < frames; f++) {
    const frameBase = f * tokens * dim;
    for (let d = 0; d < dim; d++) {
      let sum = 0;
      for (let t = 0; t < tokens; t++) {
        sum += states[frameBase + t * dim + d];
      }
      const mean = sum / tokens;
      if (mean > row[d]) row[d] = mean;
    }
  }
  return row;
}

/** Mean over the leading axis of a (steps x dim) matrix. */
export function meanOverTime(
  states: Float32Array,
  steps: number,
  dim: number,
): Float32Array {
  if (steps < 1 || states.length !== steps * dim) {
    throw new DataError(`states length ${states.length} != ${steps}x${dim}`);
  }
  const row = new Float32Array(dim);
  for (let t = 0; t < steps; t++) {
    for (let d = 0; d < dim; d++) {
      row[d] += states[t * dim + d];
    }
  }
  for (let d = 0; d < dim; d++) row[d] /= steps;
  return row;
}
