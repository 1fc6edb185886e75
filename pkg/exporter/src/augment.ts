/**
 * Raw-input augmentations that build the information-asymmetric view of each
 * pair: images get horizontal flipping, border padding with random cropping
 * and random erasing; captions get token masking with [MASK] substitutions.
 */

import { RgbImage } from "./images.js";
import { Rng } from "./rng.js";

export interface ImageAugmentConfig {
  flipProbability: number;
  padPixels: number;
  erase: { probability: number; minArea: number; maxArea: number };
}

export const DEFAULT_IMAGE_AUGMENT: ImageAugmentConfig = {
  flipProbability: 0.5,
  padPixels: 10,
  erase: { probability: 1.0, minArea: 0.02, maxArea: 0.2 },
};

export function horizontalFlip(img: RgbImage): RgbImage {
  const out = new Uint8Array(img.data.length);
  for (let y = 0; y < img.height; y++) {
    for (let x = 0; x < img.width; x++) {
      const src = 3 * (y * img.width + x);
      const dst = 3 * (y * img.width + (img.width - 1 - x));
      out[dst] = img.data[src];
      out[dst + 1] = img.data[src + 1];
      out[dst + 2] = img.data[src + 2];
    }
  }
  return { ...img, data: out };
}

/** Replicate-pad the border, then crop back to the original size at a random offset. */
export function padAndRandomCrop(img: RgbImage, pad: number, rng: Rng): RgbImage {
  const pw = img.width + 2 * pad;
  const ph = img.height + 2 * pad;
  const padded = new Uint8Array(3 * pw * ph);
  for (let y = 0; y < ph; y++) {
    const sy = Math.min(Math.max(y - pad, 0), img.height - 1);
    for (let x = 0; x < pw; x++) {
      const sx = Math.min(Math.max(x - pad, 0), img.width - 1);
      const src = 3 * (sy * img.width + sx);
      const dst = 3 * (y * pw + x);
      padded[dst] = img.data[src];
      padded[dst + 1] = img.data[src + 1];
      padded[dst + 2] = img.data[src + 2];
    }
  }
  const ox = rng.int(2 * pad + 1);
  const oy = rng.int(2 * pad + 1);
  const out = new Uint8Array(img.data.length);
  for (let y = 0; y < img.height; y++) {
    for (let x = 0; x < img.width; x++) {
      const src = 3 * ((y + oy) * pw + (x + ox));
      const dst = 3 * (y * img.width + x);
      out[dst] = padded[src];
      out[dst + 1] = padded[src + 1];
      out[dst + 2] = padded[src + 2];
    }
  }
  return { ...img, data: out };
}

/** Blank a random rectangle covering minArea..maxArea of the image. */
export function randomErase(img: RgbImage, minArea: number, maxArea: number, rng: Rng): RgbImage {
  const area = img.width * img.height;
  const targetArea = area * (minArea + rng.next() * (maxArea - minArea));
  const aspect = 0.3 + rng.next() * 3.0;
  let eh = Math.max(1, Math.round(Math.sqrt(targetArea * aspect)));
  let ew = Math.max(1, Math.round(Math.sqrt(targetArea / aspect)));
  eh = Math.min(eh, img.height);
  ew = Math.min(ew, img.width);
  const y0 = rng.int(img.height - eh + 1);
  const x0 = rng.int(img.width - ew + 1);
  const fill = [rng.int(256), rng.int(256), rng.int(256)];
  const out = new Uint8Array(img.data);
  for (let y = y0; y < y0 + eh; y++) {
    for (let x = x0; x < x0 + ew; x++) {
      const dst = 3 * (y * img.width + x);
      out[dst] = fill[0];
      out[dst + 1] = fill[1];
      out[dst + 2] = fill[2];
    }
  }
  return { ...img, data: out };
}

export function augmentImage(img: RgbImage, cfg: ImageAugmentConfig, rng: Rng): RgbImage {
  let out = img;
  if (rng.bool(cfg.flipProbability)) out = horizontalFlip(out);
  out = padAndRandomCrop(out, cfg.padPixels, rng);
  if (rng.bool(cfg.erase.probability)) {
    out = randomErase(out, cfg.erase.minArea, cfg.erase.maxArea, rng);
  }
  return out;
}

// --- text ---------------------------------------------------------------

export const MASK_TOKEN = "[MASK]";

export function tokenize(caption: string, maxTokens: number): string[] {
  const tokens = caption
    .toLowerCase()
    .split(/[^a-z0-9']+/)
    .filter((t) => t.length > 0);
  return tokens.slice(0, maxTokens);
}

/** Replace floor(ratio * n) tokens with the mask token. */
export function maskTokens(tokens: string[], ratio: number, rng: Rng): string[] {
  const nMask = Math.floor(ratio * tokens.length);
  const masked = [...tokens];
  for (const idx of rng.choose(tokens.length, nMask)) masked[idx] = MASK_TOKEN;
  return masked;
}
