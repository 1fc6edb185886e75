/**
 * Minimal raster handling: PNG (via pngjs) and binary PPM (P6) decode, and
 * bilinear resize to the fixed person-crop resolution of 384x128 (h x w).
 */

import { readFileSync } from "node:fs";
import { PNG } from "pngjs";

export const TARGET_HEIGHT = 384;
export const TARGET_WIDTH = 128;

export interface RgbImage {
  width: number;
  height: number;
  /** Interleaved RGB, row-major, 3 bytes per pixel. */
  data: Uint8Array;
}

export class DecodeFailure extends Error {
  constructor(public readonly path: string, reason: string) {
    super(`cannot decode ${path}: ${reason}`);
  }
}

function decodePpm(path: string, blob: Buffer): RgbImage {
  // P6 <width> <height> <maxval>\n followed by binary RGB triples
  const text = blob.subarray(0, 64).toString("latin1");
  if (!text.startsWith("P6")) throw new DecodeFailure(path, "not a P6 PPM");
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < blob.length && /\s/.test(String.fromCharCode(blob[pos]))) pos++;
    if (String.fromCharCode(blob[pos]) === "#") {
      while (pos < blob.length && blob[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < blob.length && !/\s/.test(String.fromCharCode(blob[pos]))) pos++;
    fields.push(parseInt(blob.subarray(start, pos).toString("latin1"), 10));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new DecodeFailure(path, `unsupported PPM header ${fields.join(" ")}`);
  }
  const expected = 3 * width * height;
  const data = blob.subarray(pos, pos + expected);
  if (data.length !== expected) throw new DecodeFailure(path, "truncated pixel data");
  return { width, height, data: new Uint8Array(data) };
}

function decodePng(path: string, blob: Buffer): RgbImage {
  let png: PNG;
  try {
    png = PNG.sync.read(blob);
  } catch (err) {
    throw new DecodeFailure(path, String(err));
  }
  const data = new Uint8Array(3 * png.width * png.height);
  for (let i = 0; i < png.width * png.height; i++) {
    data[3 * i] = png.data[4 * i];
    data[3 * i + 1] = png.data[4 * i + 1];
    data[3 * i + 2] = png.data[4 * i + 2];
  }
  return { width: png.width, height: png.height, data };
}

export function loadImage(path: string): RgbImage {
  let blob: Buffer;
  try {
    blob = readFileSync(path);
  } catch (err) {
    throw new DecodeFailure(path, String(err));
  }
  if (blob.length >= 8 && blob[0] === 0x89 && blob[1] === 0x50) return decodePng(path, blob);
  if (blob.length >= 2 && blob[0] === 0x50 && blob[1] === 0x36) return decodePpm(path, blob);
  throw new DecodeFailure(path, "unrecognized format (PNG and P6 PPM supported)");
}

export function resize(img: RgbImage, height: number, width: number): RgbImage {
  const out = new Uint8Array(3 * width * height);
  const sx = img.width / width;
  const sy = img.height / height;
  for (let y = 0; y < height; y++) {
    const fy = Math.min((y + 0.5) * sy - 0.5, img.height - 1);
    const y0 = Math.max(Math.floor(fy), 0);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = fy - y0;
    for (let x = 0; x < width; x++) {
      const fx = Math.min((x + 0.5) * sx - 0.5, img.width - 1);
      const x0 = Math.max(Math.floor(fx), 0);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = fx - x0;
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[3 * (y0 * img.width + x0) + c];
        const p01 = img.data[3 * (y0 * img.width + x1) + c];
        const p10 = img.data[3 * (y1 * img.width + x0) + c];
        const p11 = img.data[3 * (y1 * img.width + x1) + c];
        const top = p00 * (1 - wx) + p01 * wx;
        const bottom = p10 * (1 - wx) + p11 * wx;
        out[3 * (y * width + x) + c] = Math.round(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return { width, height, data: out };
}

export function toStandardSize(img: RgbImage): RgbImage {
  return resize(img, TARGET_HEIGHT, TARGET_WIDTH);
}
