/**
 * Binary bundle formats shared with the training engine.
 *
 * Embedding file: magic "EMB1", u32-LE row count, u32-LE dimension, then
 * row-major float32-LE payload. Label file: magic "LBL1", u32-LE count,
 * u32-LE identities. manifest.json carries n, d, seed, source and a checksum
 * that is the first 8 bytes of the SHA-256 over the payload files in the
 * fixed order images, texts, aug_images, aug_texts, labels (hex-encoded).
 */

import { createHash } from "node:crypto";
import { existsSync, mkdirSync, readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

export const BUNDLE_FILES = [
  "images.emb",
  "texts.emb",
  "aug_images.emb",
  "aug_texts.emb",
  "labels.lbl",
] as const;

export interface Manifest {
  n: number;
  d: number;
  seed: number;
  source: string;
  checksum: string;
}

export function writeEmbeddings(path: string, rows: Float32Array[], dim: number): void {
  const header = Buffer.alloc(12);
  header.write("EMB1", 0, "ascii");
  header.writeUInt32LE(rows.length, 4);
  header.writeUInt32LE(dim, 8);
  const payload = Buffer.alloc(4 * rows.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) {
      throw new Error(`row ${i} has dim ${row.length}, expected ${dim}`);
    }
    for (let j = 0; j < dim; j++) {
      const v = row[j];
      if (!Number.isFinite(v)) throw new Error(`non-finite value at (${i}, ${j})`);
      payload.writeFloatLE(v, 4 * (i * dim + j));
    }
  });
  writeFileSync(path, Buffer.concat([header, payload]));
}

export function readEmbeddings(path: string): { n: number; d: number; rows: Float32Array[] } {
  const blob = readFileSync(path);
  if (blob.subarray(0, 4).toString("ascii") !== "EMB1") {
    throw new Error(`${path}: bad magic`);
  }
  const n = blob.readUInt32LE(4);
  const d = blob.readUInt32LE(8);
  if (blob.length - 12 !== 4 * n * d) {
    throw new Error(`${path}: payload is ${blob.length - 12} bytes, expects ${4 * n * d}`);
  }
  const rows: Float32Array[] = [];
  for (let i = 0; i < n; i++) {
    const row = new Float32Array(d);
    for (let j = 0; j < d; j++) row[j] = blob.readFloatLE(12 + 4 * (i * d + j));
    rows.push(row);
  }
  return { n, d, rows };
}

export function writeLabels(path: string, labels: number[]): void {
  const buf = Buffer.alloc(8 + 4 * labels.length);
  buf.write("LBL1", 0, "ascii");
  buf.writeUInt32LE(labels.length, 4);
  labels.forEach((label, i) => {
    if (label < 0 || !Number.isInteger(label)) {
      throw new Error(`label ${i} must be a non-negative integer, got ${label}`);
    }
    buf.writeUInt32LE(label, 8 + 4 * i);
  });
  writeFileSync(path, buf);
}

export function payloadChecksum(dir: string): string {
  const hash = createHash("sha256");
  for (const name of BUNDLE_FILES) {
    const path = join(dir, name);
    if (existsSync(path)) hash.update(readFileSync(path));
  }
  return hash.digest("hex").slice(0, 16);
}

export function writeManifest(dir: string, manifest: Omit<Manifest, "checksum">): Manifest {
  const full: Manifest = { ...manifest, checksum: payloadChecksum(dir) };
  const text = JSON.stringify(
    { n: full.n, d: full.d, seed: full.seed, source: full.source, checksum: full.checksum },
    null,
    2,
  );
  writeFileSync(join(dir, "manifest.json"), text);
  return full;
}

export function ensureDir(dir: string): void {
  mkdirSync(dir, { recursive: true });
}
