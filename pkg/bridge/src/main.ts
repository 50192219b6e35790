/**
 * Replay a recorded vehicle-state log through the detection service and
 * write the fused detected set per step as JSONL.
 *
 * node dist/main.js --log steps.jsonl --scene log --av-ids a,b \
 *   --model dropout --preset signal-control --seed 7 --out fused.jsonl
 */

import * as fs from "node:fs";

import { runBridge } from "./bridge.js";
import type { ModelName } from "./protocol.js";
import { DetectionService } from "./service.js";
import { LogReplaySimulator, loadStepLog } from "./simulator.js";

function parseArgs(argv: string[]): Map<string, string> {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key?.startsWith("--") || value === undefined) {
      throw new Error(`bad argument pair near ${key ?? "<end>"}`);
    }
    args.set(key.slice(2), value);
  }
  return args;
}

async function main(): Promise<number> {
  const args = parseArgs(process.argv.slice(2));
  const logPath = args.get("log");
  const outPath = args.get("out");
  const avIds = args.get("av-ids");
  if (!logPath || !outPath || !avIds) {
    console.error(
      "usage: main.js --log steps.jsonl --av-ids a,b --out fused.jsonl " +
        "[--scene log] [--model perfect|dropout|midar] [--preset name] " +
        "[--seed n] [--params params.json] [--python python3]",
    );
    return 1;
  }

  const model = (args.get("model") ?? "perfect") as ModelName;
  const service = new DetectionService({
    python: args.get("python") ?? "python3",
    paramsPath: args.get("params"),
    defaultModel: model,
  });
  const sim = new LogReplaySimulator(loadStepLog(logPath));
  try {
    const results = await runBridge(sim, service, {
      sceneId: args.get("scene") ?? "log",
      avIds: avIds.split(",").filter((s) => s.length > 0),
      model,
      preset: args.get("preset"),
      seed: args.has("seed") ? Number(args.get("seed")) : undefined,
    });
    const lines = results
      .filter((r) => !r.skipped)
      .map((r) =>
        JSON.stringify({
          scene_id: args.get("scene") ?? "log",
          frame_id: r.frameId,
          detected: r.detected,
        }),
      );
    fs.writeFileSync(outPath, lines.join("\n") + (lines.length ? "\n" : ""));
    console.log(`wrote ${lines.length} fused steps to ${outPath}`);
    return 0;
  } finally {
    service.close();
  }
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(err);
    process.exit(1);
  },
);
