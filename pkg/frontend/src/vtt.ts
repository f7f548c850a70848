// WebVTT transcript parsing and the per-window sliding token context.

import { promises as fs } from "fs";
import { MediaError } from "./y4m.js";

export interface Cue {
  start: number;
  end: number;
  text: string;
}

const TIMING = /^(\d{2,}):(\d{2})(?::(\d{2}))?\.(\d{3})$/;

function parseTimestamp(raw: string): number {
  const m = TIMING.exec(raw.trim());
  if (!m) throw new MediaError(`bad VTT timestamp: ${raw}`);
  const [, a, b, c, ms] = m;
  const hours = c !== undefined ? parseInt(a, 10) : 0;
  const minutes = c !== undefined ? parseInt(b, 10) : parseInt(a, 10);
  const seconds = c !== undefined ? parseInt(c, 10) : parseInt(b, 10);
  return hours * 3600 + minutes * 60 + seconds + parseInt(ms, 10) / 1000;
}

export function parseVtt(content: string): Cue[] {
  const lines = content.split(/\r?\n/);
  if (!lines[0]?.startsWith("WEBVTT")) {
    throw new MediaError("transcript is not a WEBVTT file");
  }
  const cues: Cue[] = [];
  let i = 1;
  while (i < lines.length) {
    const line = lines[i].trim();
    if (!line || /^\d+$/.test(line) || line.startsWith("NOTE")) {
      i++;
      continue;
    }
    if (!line.includes("-->")) {
      throw new MediaError(`unexpected VTT line: ${line}`);
    }
    const [startRaw, endRaw] = line.split("-->");
    const start = parseTimestamp(startRaw);
    const end = parseTimestamp(endRaw.split(" ")[1] ?? endRaw);
    i++;
    const textLines: string[] = [];
    while (i < lines.length && lines[i].trim()) {
      textLines.push(lines[i].replace(/<[^>]+>/g, "").trim());
      i++;
    }
    if (!(end > start)) throw new MediaError(`cue ends before it starts: ${line}`);
    cues.push({ start, end, text: textLines.join(" ") });
  }
  return cues;
}

export async function readVtt(path: string): Promise<Cue[]> {
  let content: string;
  try {
    content = await fs.readFile(path, "utf-8");
  } catch (err) {
    throw new MediaError(`cannot read transcript ${path}: ${(err as Error).message}`);
  }
  return parseVtt(content);
}

/** Whitespace tokenization; punctuation stays attached to its word. */
export function tokenize(text: string): string[] {
  return text.split(/\s+/).filter(Boolean);
}

/**
 * Token context for window index `row`: every cue that starts before the
 * window's end, concatenated in order, truncated to the most recent
 * `maxTokens` tokens.
 */
export function windowTokens(
  cues: Cue[],
  row: number,
  trSeconds: number,
  maxTokens: number,
): string[] {
  const windowEnd = (row + 1) * trSeconds;
  const tokens: string[] = [];
  for (const cue of cues) {
    if (cue.start < windowEnd - 1e-9) {
      tokens.push(...tokenize(cue.text));
    }
  }
  return tokens.slice(Math.max(0, tokens.length - maxTokens));
}
