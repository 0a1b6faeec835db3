#!/usr/bin/env node
/**
 * CLI entry point: serve a weights file (or seeded fallback weights) behind
 * the embedding wire protocol. The auth token, when used, comes from the
 * CORET_PROVIDER_TOKEN environment variable and is never printed.
 */

import { readFileSync } from "node:fs";
import { basename } from "node:path";

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { buildApp, TOKEN_ENV_VAR } from "./app.js";
import { fallbackParams, loadParams, type ToyParams } from "./encoder.js";

const argv = yargs(hideBin(process.argv))
  .option("port", { type: "number", default: 8707, describe: "port to listen on" })
  .option("model", {
    type: "string",
    describe: "path to a coret-toy-params weights file (seeded fallback weights when omitted)",
  })
  .option("vocab-size", { type: "number", default: 32768, describe: "fallback vocabulary size" })
  .option("dim", { type: "number", default: 64, describe: "fallback embedding dimension" })
  .option("max-tokens", { type: "number", default: 1024, describe: "fallback token cap per text" })
  .option("seed", { type: "number", default: 0, describe: "fallback weight seed" })
  .strict()
  .parseSync();

let params: ToyParams;
let model: string;
if (argv.model) {
  params = loadParams(readFileSync(argv.model));
  model = `toy:${basename(argv.model)}`;
} else {
  params = fallbackParams(argv.vocabSize, argv.dim, argv.maxTokens, argv.seed);
  model = `toy-fallback-seed${argv.seed}`;
}

const token = process.env[TOKEN_ENV_VAR];
const app = buildApp(params, model, { token });
app.listen(argv.port, () => {
  const auth = token ? "on" : "off";
  console.log(
    `embedding provider listening on :${argv.port} (model ${model}, dim ${params.dim}, auth ${auth})`,
  );
});
