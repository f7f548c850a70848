// RIFF/WAVE reader (PCM16 and float32), mono mixdown, and linear
// resampling to the encoder's 16 kHz input rate.

import { promises as fs } from "fs";
import { MediaError } from "./y4m.js";

export const TARGET_RATE = 16000;

export interface AudioTrack {
  sampleRate: number;
  /** Mono samples in [-1, 1]. */
  samples: Float32Array;
  durationSeconds: number;
}

export async function readWav(path: string): Promise<AudioTrack> {
  let raw: Buffer;
  try {
    raw = await fs.readFile(path);
  } catch (err) {
    throw new MediaError(`cannot read audio ${path}: ${(err as Error).message}`);
  }
  if (raw.length < 12 || raw.toString("ascii", 0, 4) !== "RIFF" ||
      raw.toString("ascii", 8, 12) !== "WAVE") {
    throw new MediaError(`${path}: not a RIFF/WAVE file`);
  }

  let fmt: { format: number; channels: number; rate: number; bits: number } | null = null;
  let data: Buffer | null = null;
  let pos = 12;
  while (pos + 8 <= raw.length) {
    const id = raw.toString("ascii", pos, pos + 4);
    const size = raw.readUInt32LE(pos + 4);
    const body = raw.subarray(pos + 8, pos + 8 + size);
    if (body.length < size) throw new MediaError(`${path}: truncated ${id} chunk`);
    if (id === "fmt ") {
      fmt = {
        format: body.readUInt16LE(0),
        channels: body.readUInt16LE(2),
        rate: body.readUInt32LE(4),
        bits: body.readUInt16LE(14),
      };
    } else if (id === "data") {
      data = body;
    }
    pos += 8 + size + (size % 2); // chunks are word aligned
  }
  if (!fmt || !data) throw new MediaError(`${path}: missing fmt or data chunk`);
  if (fmt.channels < 1 || fmt.rate < 1) {
    throw new MediaError(`${path}: malformed fmt chunk`);
  }

  const bytesPer = fmt.bits / 8;
  const frameCount = Math.floor(data.length / (bytesPer * fmt.channels));
  if (frameCount === 0) throw new MediaError(`${path}: empty data chunk`);
  const mono = new Float32Array(frameCount);
  for (let i = 0; i < frameCount; i++) {
    let acc = 0;
    for (let c = 0; c < fmt.channels; c++) {
      const off = (i * fmt.channels + c) * bytesPer;
      if (fmt.format === 1 && fmt.bits === 16) {
        acc += data.readInt16LE(off) / 32768;
      } else if (fmt.format === 3 && fmt.bits === 32) {
        acc += data.readFloatLE(off);
      } else {
        throw new MediaError(
          `${path}: unsupported encoding (format ${fmt.format}, ${fmt.bits} bit)`,
        );
      }
    }
    mono[i] = acc / fmt.channels;
  }
  return {
    sampleRate: fmt.rate,
    samples: mono,
    durationSeconds: frameCount / fmt.rate,
  };
}

/** Linear-interpolation resample; identity when the rates already match. */
export function resample(track: AudioTrack, targetRate: number): AudioTrack {
  if (track.sampleRate === targetRate) return track;
  const ratio = track.sampleRate / targetRate;
  const outLength = Math.floor(track.samples.length / ratio);
  const out = new Float32Array(outLength);
  for (let i = 0; i < outLength; i++) {
    const s = i * ratio;
    const i0 = Math.floor(s);
    const i1 = Math.min(track.samples.length - 1, i0 + 1);
    const frac = s - i0;
    out[i] = (1 - frac) * track.samples[i0] + frac * track.samples[i1];
  }
  return {
    sampleRate: targetRate,
    samples: out,
    durationSeconds: outLength / targetRate,
  };
}

/** Split into contiguous non-overlapping chunks; the remainder is dropped. */
export function chunkSamples(track: AudioTrack, chunkSeconds: number): Float32Array[] {
  const chunkLength = Math.round(chunkSeconds * track.sampleRate);
  if (chunkLength < 1) throw new MediaError("chunk shorter than one sample");
  const n = Math.floor(track.samples.length / chunkLength + 1e-9);
  const chunks: Float32Array[] = [];
  for (let i = 0; i < n; i++) {
    chunks.push(track.samples.subarray(i * chunkLength, (i + 1) * chunkLength));
  }
  return chunks;
}
