// `nmenc-extract extract` command line: one asset in, one NMEF file out.

import yargs from "yargs";

import { ModelUnavailableError } from "./backbone.js";
import {
  DEFAULT_TR,
  ExtractionJob,
  extractAudio,
  extractText,
  extractVisual,
} from "./extract.js";
import { DataError, MODALITIES, Modality } from "./nmef.js";
import { MediaError } from "./y4m.js";

export async function runCli(argv: string[]): Promise<number> {
  const parser = yargs(argv)
    .command("extract", "extract one modality's features from a media asset",
      (y) =>
        y
          .option("modality", {
            choices: MODALITIES as unknown as Modality[],
            demandOption: true,
            describe: "feature stream to extract",
          })
          .option("in", {
            type: "string",
            demandOption: true,
            describe: "input asset (.y4m video, .wav audio, .vtt transcript)",
          })
          .option("out", {
            type: "string",
            demandOption: true,
            describe: "output NMEF path (a .json sidecar is written next to it)",
          })
          .option("tr", {
            type: "number",
            default: DEFAULT_TR,
            describe: "repetition time in seconds",
          })
          .option("model", {
            type: "string",
            default: "test",
            describe: "backbone identifier",
          })
          .option("layer", {
            type: "number",
            describe: "transformer block to read (visual only)",
          })
          .option("duration", {
            type: "number",
            describe: "asset duration in seconds (text only; defaults to the last cue end)",
          }),
    )
    .demandCommand(1)
    .strict()
    .exitProcess(false)
    .fail((msg, err) => {
      if (err) throw err;
      throw new UsageError(msg);
    });

  let args;
  try {
    args = await parser.parse();
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`nmenc-extract: code=2 usage-error: ${err.message}`);
      return 2;
    }
    throw err;
  }

  if (args.help || args.version) return 0;

  const job: ExtractionJob = {
    inputPath: args.in as string,
    outputPath: args.out as string,
    modality: args.modality as Modality,
    trSeconds: args.tr as number,
    model: args.model as string,
    layer: args.layer as number | undefined,
  };
  try {
    const result =
      job.modality === "visual" ? await extractVisual(job)
      : job.modality === "audio" ? await extractAudio(job)
      : await extractText(job, args.duration as number | undefined);
    console.log(
      `wrote ${result.rows} x ${result.dim} ${job.modality} features to ${result.outputPath}`,
    );
    return 0;
  } catch (err) {
    if (err instanceof ModelUnavailableError) {
      console.error(`nmenc-extract: code=2 model-error: ${err.message}`);
      return 2;
    }
    if (err instanceof MediaError || err instanceof DataError) {
      console.error(`nmenc-extract: code=3 data-error: ${err.message}`);
      return 3;
    }
    throw err;
  }
}

class UsageError extends Error {}
