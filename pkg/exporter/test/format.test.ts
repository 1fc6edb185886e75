import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import {
  payloadChecksum,
  readEmbeddings,
  writeEmbeddings,
  writeLabels,
  writeManifest,
} from "../src/format.js";

function tmp(): string {
  return mkdtempSync(join(tmpdir(), "xmexp-"));
}

describe("embedding format", () => {
  it("round-trips rows bitwise", () => {
    const dir = tmp();
    const rows = [new Float32Array([1.5, -2.25, 0.125]), new Float32Array([0, 3, -1])];
    writeEmbeddings(join(dir, "a.emb"), rows, 3);
    const back = readEmbeddings(join(dir, "a.emb"));
    expect(back.n).toBe(2);
    expect(back.d).toBe(3);
    expect(Array.from(back.rows[0])).toEqual([1.5, -2.25, 0.125]);
    expect(Array.from(back.rows[1])).toEqual([0, 3, -1]);
  });

  it("writes the 12-byte header layout", () => {
    const dir = tmp();
    writeEmbeddings(join(dir, "a.emb"), [new Float32Array([1, 0])], 2);
    const blob = readFileSync(join(dir, "a.emb"));
    expect(blob.subarray(0, 4).toString("ascii")).toBe("EMB1");
    expect(blob.readUInt32LE(4)).toBe(1);
    expect(blob.readUInt32LE(8)).toBe(2);
    expect(blob.length).toBe(12 + 8);
  });

  it("rejects non-finite values", () => {
    const dir = tmp();
    expect(() => writeEmbeddings(join(dir, "a.emb"), [new Float32Array([NaN])], 1)).toThrow();
  });

  it("labels carry the LBL1 header", () => {
    const dir = tmp();
    writeLabels(join(dir, "l.lbl"), [0, 7, 7]);
    const blob = readFileSync(join(dir, "l.lbl"));
    expect(blob.subarray(0, 4).toString("ascii")).toBe("LBL1");
    expect(blob.readUInt32LE(4)).toBe(3);
    expect(blob.readUInt32LE(8 + 8)).toBe(7);
  });

  it("manifest checksum covers payload files in fixed order", () => {
    const dir = tmp();
    writeEmbeddings(join(dir, "images.emb"), [new Float32Array([1, 0])], 2);
    writeEmbeddings(join(dir, "texts.emb"), [new Float32Array([0, 1])], 2);
    writeLabels(join(dir, "labels.lbl"), [0]);
    const manifest = writeManifest(dir, { n: 1, d: 2, seed: 3, source: "test" });
    expect(manifest.checksum).toBe(payloadChecksum(dir));
    expect(manifest.checksum).toMatch(/^[0-9a-f]{16}$/);
    // flipping payload bytes changes the checksum
    writeFileSync(join(dir, "labels.lbl"), Buffer.from("LBL1\x01\0\0\0\x01\0\0\0", "latin1"));
    expect(payloadChecksum(dir)).not.toBe(manifest.checksum);
  });
});
