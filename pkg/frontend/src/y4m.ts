// Minimal YUV4MPEG2 (.y4m) reader: uncompressed planar video with a plain
// text header, which keeps the visual pipeline free of external decoders.

import { promises as fs } from "fs";
import { DataError } from "./nmef.js";

export class MediaError extends Error {}

export interface Video {
  width: number;
  height: number;
  fps: number;
  /** Planar 4:2:0 frames: Y (w*h) then U, V (w/2 * h/2) each. */
  frames: Uint8Array[];
  durationSeconds: number;
}

export async function readY4m(path: string): Promise<Video> {
  let raw: Buffer;
  try {
    raw = await fs.readFile(path);
  } catch (err) {
    throw new MediaError(`cannot read video ${path}: ${(err as Error).message}`);
  }
  if (!raw.subarray(0, 9).toString("ascii").startsWith("YUV4MPEG2")) {
    throw new MediaError(`${path}: not a YUV4MPEG2 stream`);
  }
  const headerEnd = raw.indexOf(0x0a);
  if (headerEnd < 0) throw new MediaError(`${path}: no stream header`);
  const header = raw.subarray(0, headerEnd).toString("ascii");
  let width = 0;
  let height = 0;
  let fps = 0;
  let colourspace = "420";
  for (const field of header.split(" ").slice(1)) {
    const tag = field[0];
    const value = field.slice(1);
    if (tag === "W") width = parseInt(value, 10);
    else if (tag === "H") height = parseInt(value, 10);
    else if (tag === "F") {
      const [num, den] = value.split(":").map((v) => parseInt(v, 10));
      if (!(num > 0 && den > 0)) throw new MediaError(`${path}: bad frame rate`);
      fps = num / den;
    } else if (tag === "C") colourspace = value;
  }
  if (!(width > 0 && height > 0 && fps > 0)) {
    throw new MediaError(`${path}: incomplete stream header`);
  }
  if (!colourspace.startsWith("420")) {
    throw new MediaError(`${path}: only 4:2:0 colourspace is supported`);
  }
  if (width % 2 !== 0 || height % 2 !== 0) {
    throw new MediaError(`${path}: 4:2:0 needs even dimensions`);
  }

  const frameSize = width * height + 2 * ((width / 2) * (height / 2));
  const frames: Uint8Array[] = [];
  let pos = headerEnd + 1;
  while (pos < raw.length) {
    const markerEnd = raw.indexOf(0x0a, pos);
    if (markerEnd < 0) throw new MediaError(`${path}: truncated frame marker`);
    const marker = raw.subarray(pos, markerEnd).toString("ascii");
    if (!marker.startsWith("FRAME")) {
      throw new MediaError(`${path}: expected FRAME marker, got ${marker}`);
    }
    pos = markerEnd + 1;
    if (pos + frameSize > raw.length) {
      throw new MediaError(`${path}: truncated frame data`);
    }
    frames.push(raw.subarray(pos, pos + frameSize));
    pos += frameSize;
  }
  if (frames.length === 0) throw new MediaError(`${path}: no frames`);
  return { width, height, fps, frames, durationSeconds: frames.length / fps };
}

/**
 * Convert one 4:2:0 frame to RGB and bilinearly resize to size x size.
 * Returns size*size*3 floats in [0, 1].
 */
export function frameToRgbSquare(
  video: Video,
  frameIndex: number,
  size: number,
): Float32Array {
  const { width: w, height: h } = video;
  const frame = video.frames[frameIndex];
  if (!frame) throw new DataError(`frame ${frameIndex} out of range`);
  const cw = w / 2;
  const yPlane = frame.subarray(0, w * h);
  const uPlane = frame.subarray(w * h, w * h + cw * (h / 2));
  const vPlane = frame.subarray(w * h + cw * (h / 2));

  const out = new Float32Array(size * size * 3);
  for (let oy = 0; oy < size; oy++) {
    const sy = ((oy + 0.5) * h) / size - 0.5;
    const y0 = Math.max(0, Math.floor(sy));
    const y1 = Math.min(h - 1, y0 + 1);
    const fy = sy - y0;
    for (let ox = 0; ox < size; ox++) {
      const sx = ((ox + 0.5) * w) / size - 0.5;
      const x0 = Math.max(0, Math.floor(sx));
      const x1 = Math.min(w - 1, x0 + 1);
      const fx = sx - x0;
      const lum =
        (1 - fy) * ((1 - fx) * yPlane[y0 * w + x0] + fx * yPlane[y0 * w + x1]) +
        fy * ((1 - fx) * yPlane[y1 * w + x0] + fx * yPlane[y1 * w + x1]);
      const ci = Math.min(cw * (h / 2) - 1,
        (y0 >> 1) * cw + (x0 >> 1));
      const u = uPlane[ci] - 128;
      const v = vPlane[ci] - 128;
      const base = (oy * size + ox) * 3;
      out[base] = clamp01((lum + 1.402 * v) / 255);
      out[base + 1] = clamp01((lum - 0.344136 * u - 0.714136 * v) / 255);
      out[base + 2] = clamp01((lum + 1.772 * u) / 255);
    }
  }
  return out;
}

function clamp01(x: number): number {
  return x < 0 ? 0 : x > 1 ? 1 : x;
}
