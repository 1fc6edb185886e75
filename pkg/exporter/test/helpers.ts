import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { RgbImage } from "../src/images.js";
import { Rng } from "../src/rng.js";

/** Binary P6 PPM bytes for an RGB image. */
export function ppmBytes(img: RgbImage): Buffer {
  const header = Buffer.from(`P6\n${img.width} ${img.height}\n255\n`, "latin1");
  return Buffer.concat([header, Buffer.from(img.data)]);
}

export function syntheticImage(width: number, height: number, seed: number): RgbImage {
  const rng = new Rng(seed);
  const base = [rng.int(256), rng.int(256), rng.int(256)];
  const data = new Uint8Array(3 * width * height);
  for (let i = 0; i < width * height; i++) {
    for (let c = 0; c < 3; c++) {
      const v = base[c] + Math.round(40 * rng.gaussian());
      data[3 * i + c] = Math.min(255, Math.max(0, v));
    }
  }
  return { width, height, data };
}

const ADJECTIVES = ["red", "blue", "green", "tall", "short", "young", "old", "striped"];
const ITEMS = ["jacket", "backpack", "umbrella", "hat", "scarf", "boots", "jeans", "coat"];

/** Writes `pairs` toy PPM images plus a JSONL manifest; returns the manifest path. */
export function writeToyDataset(dir: string, pairs: number, identities = 8): string {
  mkdirSync(dir, { recursive: true });
  const lines: string[] = [];
  for (let i = 0; i < pairs; i++) {
    const identity = i % identities;
    const img = syntheticImage(32, 96, 1000 + identity * 7 + Math.floor(i / identities));
    const name = `img_${String(i).padStart(3, "0")}.ppm`;
    writeFileSync(join(dir, name), ppmBytes(img));
    const caption =
      `a person wearing a ${ADJECTIVES[identity % 8]} ${ITEMS[identity % 8]} ` +
      `walking down the street carrying a ${ITEMS[(identity + 3) % 8]}`;
    lines.push(JSON.stringify({ image_path: name, caption, identity }));
  }
  const manifestPath = join(dir, "pairs.jsonl");
  writeFileSync(manifestPath, lines.join("\n") + "\n");
  return manifestPath;
}
