// NMEF binary writer. The layout mirrors the Python toolkit's reader:
// a 64-byte little-endian header followed by a row-major float32 payload.
//
//   magic "NMEF" (4) | version u16 | modality u8 | reserved u8 |
//   T u64 | D u64 | tr_microseconds u64 | source_id 32 bytes (NUL padded)

import { promises as fs } from "fs";
import { randomBytes } from "crypto";
import path from "path";

export const MODALITIES = ["visual", "audio", "text"] as const;
export type Modality = (typeof MODALITIES)[number];

const MAGIC = "NMEF";
const VERSION = 1;
const HEADER_SIZE = 64;
const SOURCE_ID_BYTES = 32;

export class DataError extends Error {}

export interface FeatureMatrix {
  modality: Modality;
  trSeconds: number;
  sourceId: string;
  /** Row-major T x D values; every row must have length `dim`. */
  rows: Float32Array[];
  dim: number;
}

export function encodeNmef(m: FeatureMatrix): Buffer {
  if (!MODALITIES.includes(m.modality)) {
    throw new DataError(`unknown modality ${m.modality}`);
  }
  const trUs = Math.round(m.trSeconds * 1e6);
  if (!(trUs > 0)) {
    throw new DataError("tr_seconds must be positive");
  }
  if (m.rows.length === 0 || m.dim < 1) {
    throw new DataError("feature matrix must be non-empty");
  }
  const sid = Buffer.from(m.sourceId, "utf-8");
  if (sid.length === 0 || sid.length > SOURCE_ID_BYTES) {
    throw new DataError(
      `source_id must encode to 1..${SOURCE_ID_BYTES} bytes`,
    );
  }

  const header = Buffer.alloc(HEADER_SIZE);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt16LE(VERSION, 4);
  header.writeUInt8(MODALITIES.indexOf(m.modality), 6);
  header.writeUInt8(0, 7);
  header.writeBigUInt64LE(BigInt(m.rows.length), 8);
  header.writeBigUInt64LE(BigInt(m.dim), 16);
  header.writeBigUInt64LE(BigInt(trUs), 24);
  sid.copy(header, 32);

  const payload = Buffer.alloc(m.rows.length * m.dim * 4);
  for (let i = 0; i < m.rows.length; i++) {
    const row = m.rows[i];
    if (row.length !== m.dim) {
      throw new DataError(`row ${i} has length ${row.length}, expected ${m.dim}`);
    }
    for (let j = 0; j < m.dim; j++) {
      if (!Number.isFinite(row[j])) {
        throw new DataError(`non-finite value at row ${i}, column ${j}`);
      }
      payload.writeFloatLE(row[j], (i * m.dim + j) * 4);
    }
  }
  return Buffer.concat([header, payload]);
}

/** Write the file atomically: temp file in the same directory, then rename. */
export async function writeNmef(outPath: string, m: FeatureMatrix): Promise<void> {
  const data = encodeNmef(m);
  const tmp = path.join(
    path.dirname(outPath),
    `.${path.basename(outPath)}.${randomBytes(6).toString("hex")}.tmp`,
  );
  await fs.writeFile(tmp, data);
  try {
    await fs.rename(tmp, outPath);
  } catch (err) {
    await fs.unlink(tmp).catch(() => {});
    throw err;
  }
}
