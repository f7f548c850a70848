// Synthetic asset writers used by the test suite (and handy for demos):
// tiny Y4M videos, PCM WAV files, and WebVTT transcripts.

export interface Y4mSpec {
  width: number;
  height: number;
  fps: number;
  frameCount: number;
  /** Luma value for frame i; chroma stays neutral. */
  luma?: (frame: number) => number;
}

export function makeY4m(spec: Y4mSpec): Buffer {
  const { width: w, height: h, fps, frameCount } = spec;
  const luma = spec.luma ?? ((f) => 16 + ((f * 13) % 220));
  const header = Buffer.from(
    `YUV4MPEG2 W${w} H${h} F${fps}:1 Ip A1:1 C420jpeg\n`, "ascii");
  const marker = Buffer.from("FRAME\n", "ascii");
  const chromaSize = (w / 2) * (h / 2);
  const parts: Buffer[] = [header];
  for (let f = 0; f < frameCount; f++) {
    const y = Buffer.alloc(w * h, Math.max(0, Math.min(255, luma(f))) | 0);
    const uv = Buffer.alloc(2 * chromaSize, 128);
    parts.push(marker, y, uv);
  }
  return Buffer.concat(parts);
}

export interface WavSpec {
  sampleRate: number;
  channels: number;
  durationSeconds: number;
  /** Sample value in [-1, 1] for (time index, channel). */
  sample?: (index: number, channel: number) => number;
  format?: "pcm16" | "float32";
}

export function makeWav(spec: WavSpec): Buffer {
  const frames = Math.round(spec.durationSeconds * spec.sampleRate);
  const sample = spec.sample ?? ((i) => 0.25 * Math.sin((2 * Math.PI * 440 * i) / spec.sampleRate));
  const isFloat = spec.format === "float32";
  const bytesPer = isFloat ? 4 : 2;
  const data = Buffer.alloc(frames * spec.channels * bytesPer);
  for (let i = 0; i < frames; i++) {
    for (let c = 0; c < spec.channels; c++) {
      const v = Math.max(-1, Math.min(1, sample(i, c)));
      const off = (i * spec.channels + c) * bytesPer;
      if (isFloat) data.writeFloatLE(v, off);
      else data.writeInt16LE(Math.round(v * 32767), off);
    }
  }
  const header = Buffer.alloc(44);
  header.write("RIFF", 0, "ascii");
  header.writeUInt32LE(36 + data.length, 4);
  header.write("WAVE", 8, "ascii");
  header.write("fmt ", 12, "ascii");
  header.writeUInt32LE(16, 16);
  header.writeUInt16LE(isFloat ? 3 : 1, 20);
  header.writeUInt16LE(spec.channels, 22);
  header.writeUInt32LE(spec.sampleRate, 24);
  header.writeUInt32LE(spec.sampleRate * spec.channels * bytesPer, 28);
  header.writeUInt16LE(spec.channels * bytesPer, 32);
  header.writeUInt16LE(bytesPer * 8, 34);
  header.write("data", 36, "ascii");
  header.writeUInt32LE(data.length, 40);
  return Buffer.concat([header, data]);
}

export function makeVtt(cues: Array<{ start: number; end: number; text: string }>): string {
  const stamp = (s: number) => {
    const minutes = Math.floor(s / 60);
    const seconds = s - minutes * 60;
    return `${String(minutes).padStart(2, "0")}:${seconds.toFixed(3).padStart(6, "0")}`;
  };
  const body = cues
    .map((c) => `${stamp(c.start)} --> ${stamp(c.end)}\n${c.text}`)
    .join("\n\n");
  return `WEBVTT\n\n${body}\n`;
}
