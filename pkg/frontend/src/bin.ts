#!/usr/bin/env node
import { runCli } from "./cli.js";

runCli(process.argv.slice(2)).then(
  (code) => process.exit(code),
  (err) => {
    console.error(`nmenc-extract: unexpected failure: ${err}`);
    process.exit(1);
  },
);
