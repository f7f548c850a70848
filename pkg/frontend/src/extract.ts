// The three extraction pipelines: raw asset in, NMEF file (plus a sidecar
// provenance JSON) out.

import { promises as fs } from "fs";
import path from "path";

import {
  getAudioBackbone,
  getTextBackbone,
  getVisualBackbone,
} from "./backbone.js";
import { DataError, FeatureMatrix, Modality, writeNmef } from "./nmef.js";
import { readVtt, windowTokens } from "./vtt.js";
import { TARGET_RATE, chunkSamples, readWav, resample } from "./wav.js";
import { meanOverTime, poolWindow, rowCount, uniformIndices } from "./windows.js";
import { MediaError, frameToRgbSquare, readY4m } from "./y4m.js";

export const FRAMES_PER_WINDOW = 8;
export const FRAME_SIZE = 224;
export const DEFAULT_TR = 1.49;
export const DEFAULT_VISUAL_LAYER = 23;

export interface ExtractionJob {
  inputPath: string;
  modality: Modality;
  outputPath: string;
  trSeconds?: number;
  model?: string;
  layer?: number;
}

export interface ExtractionResult {
  rows: number;
  dim: number;
  outputPath: string;
}

function sourceIdFrom(job: ExtractionJob): string {
  const stem = path.basename(job.inputPath).replace(/\.[^.]+$/, "");
  return stem.slice(0, 32) || "asset";
}

async function writeOutputs(
  job: ExtractionJob,
  rows: Float32Array[],
  dim: number,
  provenance: Record<string, unknown>,
): Promise<ExtractionResult> {
  const matrix: FeatureMatrix = {
    modality: job.modality,
    trSeconds: job.trSeconds ?? DEFAULT_TR,
    sourceId: sourceIdFrom(job),
    rows,
    dim,
  };
  await writeNmef(job.outputPath, matrix);
  const sidecar = {
    input: path.basename(job.inputPath),
    modality: job.modality,
    tr_seconds: matrix.trSeconds,
    rows: rows.length,
    dim,
    ...provenance,
  };
  await fs.writeFile(
    `${job.outputPath}.json`,
    JSON.stringify(sidecar, null, 2) + "\n",
  );
  return { rows: rows.length, dim, outputPath: job.outputPath };
}

/**
 * Per TR window: 8 uniformly sampled frames, resized to 224x224, encoded
 * by the vision backbone; block hidden states (8 x 257 x 1024 for the
 * production geometry) pooled token-mean then frame-max to one row.
 */
export async function extractVisual(job: ExtractionJob): Promise<ExtractionResult> {
  const tr = job.trSeconds ?? DEFAULT_TR;
  const layer = job.layer ?? DEFAULT_VISUAL_LAYER;
  const backbone = getVisualBackbone(job.model ?? "test");
  const video = await readY4m(job.inputPath);
  const t = rowCount(video.durationSeconds, tr);
  if (t < 1) throw new MediaError("video shorter than one TR window");

  const framesPerWindow = Math.floor(video.fps * tr + 1e-9);
  if (framesPerWindow < 1) throw new MediaError("fewer than one frame per window");
  const picks = uniformIndices(framesPerWindow, FRAMES_PER_WINDOW);

  const rows: Float32Array[] = [];
  for (let w = 0; w < t; w++) {
    const first = Math.round(w * video.fps * tr);
    const frames = picks.map((k) =>
      frameToRgbSquare(video, Math.min(video.frames.length - 1, first + k),
                       FRAME_SIZE));
    const states = backbone.encode(frames, layer);
    rows.push(poolWindow(states, FRAMES_PER_WINDOW, backbone.tokenCount,
                         backbone.hiddenDim));
  }
  return writeOutputs(job, rows, backbone.hiddenDim, {
    model: backbone.id,
    layer,
    frames_per_window: FRAMES_PER_WINDOW,
    frame_size: FRAME_SIZE,
    pooling: "token-mean then frame-max",
  });
}

/**
 * Mono 16 kHz chunks of one TR each, encoded and time-averaged over the
 * final encoder layer's steps. The hidden width is whatever the encoder
 * reports; it lands in the NMEF header like any other D.
 */
export async function extractAudio(job: ExtractionJob): Promise<ExtractionResult> {
  const tr = job.trSeconds ?? DEFAULT_TR;
  const backbone = getAudioBackbone(job.model ?? "test");
  const track = resample(await readWav(job.inputPath), TARGET_RATE);
  const chunks = chunkSamples(track, tr);
  if (chunks.length < 1) throw new MediaError("audio shorter than one TR window");

  const rows = chunks.map((chunk) => {
    const { states, steps } = backbone.encode(chunk);
    return meanOverTime(states, steps, backbone.hiddenDim);
  });
  return writeOutputs(job, rows, backbone.hiddenDim, {
    model: backbone.id,
    sample_rate: TARGET_RATE,
    pooling: "time-mean over final encoder layer",
  });
}

/**
 * Per TR window: current plus preceding transcript text, truncated to the
 * most recent 512 tokens, encoded and token-mean pooled. Windows with no
 * transcript yet get the model's empty-input embedding and are listed in
 * the sidecar's empty_windows mask.
 */
export async function extractText(
  job: ExtractionJob,
  durationSeconds?: number,
): Promise<ExtractionResult> {
  const tr = job.trSeconds ?? DEFAULT_TR;
  const backbone = getTextBackbone(job.model ?? "test");
  const cues = await readVtt(job.inputPath);
  // a transcript does not carry the asset length; without an explicit
  // duration, the last cue's end stands in for it
  const duration = durationSeconds ?? (cues.length
    ? Math.max(...cues.map((c) => c.end)) : 0);
  if (!(duration > 0)) {
    throw new DataError("text extraction needs the asset duration");
  }
  const t = rowCount(duration, tr);
  if (t < 1) throw new MediaError("asset shorter than one TR window");

  const rows: Float32Array[] = [];
  const emptyWindows: number[] = [];
  for (let w = 0; w < t; w++) {
    const tokens = windowTokens(cues, w, tr, backbone.maxTokens);
    if (tokens.length === 0) emptyWindows.push(w);
    rows.push(backbone.encode(tokens));
  }
  return writeOutputs(job, rows, backbone.hiddenDim, {
    model: backbone.id,
    max_tokens: backbone.maxTokens,
    pooling: "token-mean",
    empty_windows: emptyWindows,
  });
}
