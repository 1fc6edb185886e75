/**
 * Export pipeline: read an image-caption manifest, encode clean and
 * augmented views with a frozen encoder, and write an embedding bundle
 * (images/texts/aug_images/aug_texts/labels plus checksummed manifest).
 */

import { readFileSync } from "node:fs";
import { dirname, isAbsolute, join } from "node:path";

import {
  DEFAULT_IMAGE_AUGMENT,
  ImageAugmentConfig,
  augmentImage,
  maskTokens,
  tokenize,
} from "./augment.js";
import { Encoder } from "./encoder.js";
import {
  Manifest,
  ensureDir,
  writeEmbeddings,
  writeLabels,
  writeManifest,
} from "./format.js";
import { loadImage, toStandardSize } from "./images.js";
import { Rng } from "./rng.js";

export const MAX_TOKENS = 77;

export interface PairRecord {
  imagePath: string;
  caption: string;
  identity?: number;
}

export interface ExportJob {
  records: PairRecord[];
  encoder: Encoder;
  outDir: string;
  seed: number;
  maskRatio: number;
  imageAugment?: ImageAugmentConfig;
}

/** One JSON object per line: {"image_path": ..., "caption": ..., "identity"?: ...} */
export function readPairManifest(path: string): PairRecord[] {
  const base = dirname(path);
  const lines = readFileSync(path, "utf-8").split("\n").filter((l) => l.trim().length > 0);
  if (lines.length === 0) throw new Error(`${path}: manifest is empty`);
  return lines.map((line, i) => {
    let raw: Record<string, unknown>;
    try {
      raw = JSON.parse(line);
    } catch (err) {
      throw new Error(`${path}:${i + 1}: not valid JSON: ${err}`);
    }
    const imagePath = raw["image_path"];
    const caption = raw["caption"];
    if (typeof imagePath !== "string" || typeof caption !== "string" || !caption.trim()) {
      throw new Error(`${path}:${i + 1}: need string image_path and non-empty caption`);
    }
    const identity = raw["identity"];
    if (identity !== undefined && (!Number.isInteger(identity) || (identity as number) < 0)) {
      throw new Error(`${path}:${i + 1}: identity must be a non-negative integer`);
    }
    return {
      imagePath: isAbsolute(imagePath) ? imagePath : join(base, imagePath),
      caption,
      identity: identity as number | undefined,
    };
  });
}

export function runExport(job: ExportJob): Manifest {
  const { records, encoder, outDir } = job;
  const augCfg = job.imageAugment ?? DEFAULT_IMAGE_AUGMENT;
  const rng = new Rng(job.seed);

  const images: Float32Array[] = [];
  const texts: Float32Array[] = [];
  const augImages: Float32Array[] = [];
  const augTexts: Float32Array[] = [];
  const labels: number[] = [];

  // fixed iteration order (manifest order) keeps the export reproducible
  records.forEach((record, row) => {
    const img = toStandardSize(loadImage(record.imagePath));
    const tokens = tokenize(record.caption, MAX_TOKENS);

    images.push(encoder.encodeImage(img));
    texts.push(encoder.encodeText(tokens));
    augImages.push(encoder.encodeImage(augmentImage(img, augCfg, rng)));
    augTexts.push(encoder.encodeText(maskTokens(tokens, job.maskRatio, rng)));
    labels.push(record.identity ?? row);
  });

  ensureDir(outDir);
  writeEmbeddings(join(outDir, "images.emb"), images, encoder.dim);
  writeEmbeddings(join(outDir, "texts.emb"), texts, encoder.dim);
  writeEmbeddings(join(outDir, "aug_images.emb"), augImages, encoder.dim);
  writeEmbeddings(join(outDir, "aug_texts.emb"), augTexts, encoder.dim);
  writeLabels(join(outDir, "labels.lbl"), labels);
  return writeManifest(outDir, {
    n: records.length,
    d: encoder.dim,
    seed: job.seed,
    source: `export:${encoder.name}`,
  });
}
