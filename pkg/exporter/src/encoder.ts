/**
 * Frozen encoders producing unit-norm embeddings for images and captions.
 *
 * The built-in encoder family "seeded-projection-<d>" is fully deterministic
 * and offline: images are reduced to a patch-grid color descriptor and
 * captions to a hashed token histogram, then both are pushed through fixed
 * seeded Gaussian projections and L2-normalized. It stands in for a
 * pretrained vision-language tower wherever real checkpoint weights are
 * unavailable; anything implementing the Encoder interface (e.g. a CLIP
 * binding) can be swapped in without touching the export pipeline.
 */

import { RgbImage } from "./images.js";
import { Rng } from "./rng.js";

export interface Encoder {
  readonly name: string;
  readonly dim: number;
  encodeImage(img: RgbImage): Float32Array;
  encodeText(tokens: string[]): Float32Array;
}

export class EncoderLoadFailure extends Error {}

const GRID_ROWS = 12;
const GRID_COLS = 4;
const IMAGE_DESCRIPTOR = GRID_ROWS * GRID_COLS * 3;
const TEXT_BUCKETS = 512;

function l2normalize(v: Float32Array): Float32Array {
  let sq = 0;
  for (const x of v) sq += x * x;
  const norm = Math.sqrt(sq);
  if (norm === 0) throw new Error("cannot normalize a zero embedding");
  const out = new Float32Array(v.length);
  for (let i = 0; i < v.length; i++) out[i] = v[i] / norm;
  return out;
}

function fnv1a(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

export class SeededProjectionEncoder implements Encoder {
  readonly name: string;
  readonly dim: number;
  private imageProj: Float64Array;
  private textProj: Float64Array;

  constructor(dim: number, seed = 0x5eed) {
    if (dim < 8) throw new EncoderLoadFailure(`encoder dim must be >= 8, got ${dim}`);
    this.dim = dim;
    this.name = `seeded-projection-${dim}`;
    const rng = new Rng(seed);
    this.imageProj = new Float64Array(dim * IMAGE_DESCRIPTOR);
    for (let i = 0; i < this.imageProj.length; i++) this.imageProj[i] = rng.gaussian();
    this.textProj = new Float64Array(dim * TEXT_BUCKETS);
    for (let i = 0; i < this.textProj.length; i++) this.textProj[i] = rng.gaussian();
  }

  private project(desc: Float64Array, proj: Float64Array, inDim: number): Float32Array {
    const out = new Float32Array(this.dim);
    for (let i = 0; i < this.dim; i++) {
      let acc = 0;
      for (let j = 0; j < inDim; j++) acc += proj[i * inDim + j] * desc[j];
      out[i] = acc / Math.sqrt(inDim);
    }
    return l2normalize(out);
  }

  encodeImage(img: RgbImage): Float32Array {
    // mean color per grid cell, centered to [-0.5, 0.5]
    const desc = new Float64Array(IMAGE_DESCRIPTOR);
    const cellH = img.height / GRID_ROWS;
    const cellW = img.width / GRID_COLS;
    for (let gy = 0; gy < GRID_ROWS; gy++) {
      for (let gx = 0; gx < GRID_COLS; gx++) {
        const y0 = Math.floor(gy * cellH);
        const y1 = Math.max(y0 + 1, Math.floor((gy + 1) * cellH));
        const x0 = Math.floor(gx * cellW);
        const x1 = Math.max(x0 + 1, Math.floor((gx + 1) * cellW));
        const sums = [0, 0, 0];
        for (let y = y0; y < y1; y++) {
          for (let x = x0; x < x1; x++) {
            const src = 3 * (y * img.width + x);
            sums[0] += img.data[src];
            sums[1] += img.data[src + 1];
            sums[2] += img.data[src + 2];
          }
        }
        const count = (y1 - y0) * (x1 - x0);
        const base = 3 * (gy * GRID_COLS + gx);
        for (let c = 0; c < 3; c++) desc[base + c] = sums[c] / count / 255 - 0.5;
      }
    }
    return this.project(desc, this.imageProj, IMAGE_DESCRIPTOR);
  }

  encodeText(tokens: string[]): Float32Array {
    const desc = new Float64Array(TEXT_BUCKETS);
    const add = (term: string, weight: number) => {
      desc[fnv1a(term) % TEXT_BUCKETS] += weight;
    };
    tokens.forEach((token, i) => {
      add(token, 1.0);
      if (i + 1 < tokens.length) add(`${token}_${tokens[i + 1]}`, 0.5);
    });
    if (tokens.length === 0) desc[0] = 1.0;
    return this.project(desc, this.textProj, TEXT_BUCKETS);
  }
}

export function resolveEncoder(name: string): Encoder {
  const match = /^seeded-projection-(\d+)$/.exec(name);
  if (match) return new SeededProjectionEncoder(parseInt(match[1], 10));
  throw new EncoderLoadFailure(
    `unknown encoder ${JSON.stringify(name)}; available: seeded-projection-<dim>`,
  );
}
