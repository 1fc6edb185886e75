#!/usr/bin/env node
/** CLI wrapper: `export` encodes a JSONL manifest into a bundle directory. */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { EncoderLoadFailure, resolveEncoder } from "./encoder.js";
import { readPairManifest, runExport } from "./exporter.js";
import { DecodeFailure } from "./images.js";

async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .command("export", "encode image-caption pairs into an embedding bundle", (y) =>
      y
        .option("manifest", {
          type: "string",
          demandOption: true,
          describe: "JSONL file: one {image_path, caption, identity?} per line",
        })
        .option("out", { type: "string", demandOption: true, describe: "output directory" })
        .option("encoder", {
          type: "string",
          default: "seeded-projection-64",
          describe: "encoder name (seeded-projection-<dim>)",
        })
        .option("seed", { type: "number", default: 0, describe: "augmentation seed" })
        .option("mask-ratio", {
          type: "number",
          default: 0.5,
          describe: "fraction of caption tokens replaced by [MASK]",
        }),
    )
    .demandCommand(1)
    .strict()
    .parse();

  const command = String(argv._[0]);
  if (command !== "export") {
    console.error(`unknown command: ${command}`);
    return 1;
  }
  const maskRatio = argv["mask-ratio"] as number;
  if (!(maskRatio >= 0 && maskRatio < 1)) {
    console.error(`mask-ratio must be in [0, 1), got ${maskRatio}`);
    return 1;
  }

  try {
    const encoder = resolveEncoder(argv.encoder as string);
    const records = readPairManifest(argv.manifest as string);
    const manifest = runExport({
      records,
      encoder,
      outDir: argv.out as string,
      seed: argv.seed as number,
      maskRatio,
    });
    console.log(
      `exported ${manifest.n} pairs at dim ${manifest.d} to ${argv.out} ` +
        `(checksum ${manifest.checksum})`,
    );
    return 0;
  } catch (err) {
    if (err instanceof EncoderLoadFailure) {
      console.error(`encoder error: ${err.message}`);
      return 1;
    }
    if (err instanceof DecodeFailure) {
      console.error(`decode error: ${err.message}`);
      return 2;
    }
    console.error(String(err instanceof Error ? err.message : err));
    return 2;
  }
}

main().then((code) => {
  process.exitCode = code;
});
