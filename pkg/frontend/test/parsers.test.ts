import { mkdtempSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import path from "path";
import { describe, expect, it } from "vitest";

import { makeVtt, makeWav, makeY4m } from "../src/testing.js";
import { parseVtt, windowTokens } from "../src/vtt.js";
import { chunkSamples, readWav, resample } from "../src/wav.js";
import { frameToRgbSquare, readY4m } from "../src/y4m.js";

function tempFile(name: string, data: Buffer | string): string {
  const dir = mkdtempSync(path.join(tmpdir(), "nmext-"));
  const p = path.join(dir, name);
  writeFileSync(p, data);
  return p;
}

describe("y4m", () => {
  it("reads dimensions, frame count, and duration", async () => {
    const p = tempFile("clip.y4m",
      makeY4m({ width: 32, height: 24, fps: 10, frameCount: 149 }));
    const video = await readY4m(p);
    expect(video.width).toBe(32);
    expect(video.frames.length).toBe(149);
    expect(video.durationSeconds).toBeCloseTo(14.9, 9);
  });

  it("resizes frames to the requested square", async () => {
    const p = tempFile("clip.y4m",
      makeY4m({ width: 32, height: 24, fps: 10, frameCount: 2, luma: () => 128 }));
    const video = await readY4m(p);
    const rgb = frameToRgbSquare(video, 0, 224);
    expect(rgb.length).toBe(224 * 224 * 3);
    // neutral chroma + uniform luma: every channel is luma/255
    for (let i = 0; i < 30; i++) expect(rgb[i]).toBeCloseTo(128 / 255, 5);
  });

  it("rejects non-y4m input", async () => {
    const p = tempFile("junk.y4m", Buffer.from("not a video"));
    await expect(readY4m(p)).rejects.toThrow(/YUV4MPEG2/);
  });

  it("rejects truncated frames", async () => {
    const full = makeY4m({ width: 16, height: 16, fps: 5, frameCount: 3 });
    const p = tempFile("cut.y4m", full.subarray(0, full.length - 10));
    await expect(readY4m(p)).rejects.toThrow(/truncated/);
  });
});

describe("wav", () => {
  it("mixes stereo to mono by channel mean", async () => {
    const left = (i: number) => 0.5 * Math.sin(i / 30);
    const right = (i: number) => 0.1 * Math.cos(i / 50);
    const stereo = await readWav(tempFile("s.wav", makeWav({
      sampleRate: 8000, channels: 2, durationSeconds: 1,
      sample: (i, c) => (c === 0 ? left(i) : right(i)),
    })));
    const premixed = await readWav(tempFile("m.wav", makeWav({
      sampleRate: 8000, channels: 1, durationSeconds: 1,
      sample: (i) => (left(i) + right(i)) / 2,
    })));
    expect(stereo.samples.length).toBe(premixed.samples.length);
    for (let i = 0; i < stereo.samples.length; i++) {
      // PCM16 rounds each channel before the mix, so allow one quantum
      expect(Math.abs(stereo.samples[i] - premixed.samples[i]))
        .toBeLessThanOrEqual(1 / 32768);
    }
  });

  it("resamples towards 16 kHz with matching duration", async () => {
    const track = await readWav(tempFile("r.wav", makeWav({
      sampleRate: 8000, channels: 1, durationSeconds: 2,
    })));
    const out = resample(track, 16000);
    expect(out.sampleRate).toBe(16000);
    expect(out.durationSeconds).toBeCloseTo(2, 3);
  });

  it("chunks drop the remainder", async () => {
    const track = await readWav(tempFile("c.wav", makeWav({
      sampleRate: 16000, channels: 1, durationSeconds: 14.9,
    })));
    const chunks = chunkSamples(track, 1.49);
    expect(chunks.length).toBe(10);
    expect(chunks[0].length).toBe(Math.round(1.49 * 16000));
    expect(chunkSamples(track, 4.0).length).toBe(3);
  });

  it("rejects non-wav input", async () => {
    await expect(readWav(tempFile("x.wav", Buffer.from("nope"))))
      .rejects.toThrow(/RIFF/);
  });
});

describe("vtt", () => {
  const transcript = makeVtt([
    { start: 0.0, end: 1.2, text: "hello there" },
    { start: 2.0, end: 3.5, text: "general conversation" },
    { start: 10.0, end: 12.0, text: "late words" },
  ]);

  it("parses cues with timings", () => {
    const cues = parseVtt(transcript);
    expect(cues.length).toBe(3);
    expect(cues[0]).toEqual({ start: 0, end: 1.2, text: "hello there" });
    expect(cues[2].start).toBe(10);
  });

  it("window context accumulates preceding cues", () => {
    const cues = parseVtt(transcript);
    expect(windowTokens(cues, 0, 1.49, 512)).toEqual(["hello", "there"]);
    expect(windowTokens(cues, 2, 1.49, 512)).toEqual(
      ["hello", "there", "general", "conversation"]);
    expect(windowTokens(cues, 7, 1.49, 512).length).toBe(6);
  });

  it("truncation keeps the most recent tokens", () => {
    const cues = parseVtt(transcript);
    expect(windowTokens(cues, 7, 1.49, 3)).toEqual(
      ["conversation", "late", "words"]);
  });

  it("rejects non-vtt input", () => {
    expect(() => parseVtt("hello\nworld")).toThrow(/WEBVTT/);
  });
});
