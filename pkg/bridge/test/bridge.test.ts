/**
 * Bridge equivalence: replaying a recorded vehicle-state log through the
 * bridge + serve protocol must match the offline ingest -> apply -> fuse
 * pipeline record-for-record. Also exercises the bridge's error paths.
 */

import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { runBridge, stepBridge } from "../src/bridge.js";
import { DetectionService } from "../src/service.js";
import { LogReplaySimulator, type StepRecord, type VehicleState }
  from "../src/simulator.js";

const PYTHON = process.env.MIDAR_PYTHON ?? "python3";
const AV_IDS = ["av1", "av2"];
const SCENE = "log";
const SEED = 7;

// Deterministic multiplicative congruential stream so the generated log is
// stable across runs without extra dependencies.
function* lcg(seed: number): Generator<number> {
  let state = seed >>> 0;
  for (;;) {
    state = (1103515245 * state + 12345) % 2147483648;
    yield state / 2147483648;
  }
}

function buildLog(nSteps: number, nVehicles: number): StepRecord[] {
  const rand = lcg(99);
  const next = () => rand.next().value as number;
  const steps: StepRecord[] = [];
  for (let s = 0; s < nSteps; s++) {
    const vehicles: VehicleState[] = [];
    for (let v = 0; v < nVehicles; v++) {
      const id = v === 0 ? "av1" : v === 1 ? "av2" : `veh${v}`;
      vehicles.push({
        id,
        x: Math.round((next() * 160 - 80 + s * 0.5) * 100) / 100,
        y: Math.round((next() * 20 - 10) * 100) / 100,
        heading: Math.round((next() * 6 - 3) * 1000) / 1000,
        width: Math.round((1.6 + next() * 1.0) * 100) / 100,
        length: Math.round((3.8 + next() * 7.0) * 100) / 100,
        height: Math.round((1.4 + next() * 2.2) * 100) / 100,
      });
    }
    steps.push({ step: String(s), time: s * 0.1, vehicles });
  }
  return steps;
}

function logToCsv(steps: StepRecord[]): string {
  const rows = ["Frame,Veh,X,Y,Len,Wid,Hdg,Hgt"];
  for (const step of steps) {
    for (const v of step.vehicles) {
      rows.push(
        `${step.step},${v.id},${v.x},${v.y},${v.length},${v.width},` +
          `${v.heading},${v.height}`,
      );
    }
  }
  return rows.join("\n") + "\n";
}

function offlineFused(
  dir: string,
  steps: StepRecord[],
  model: string,
  preset?: string,
): Map<string, string[]> {
  const csvPath = path.join(dir, "traj.csv");
  fs.writeFileSync(csvPath, logToCsv(steps));
  const mappingPath = path.join(dir, "mapping.json");
  fs.writeFileSync(
    mappingPath,
    JSON.stringify({
      columns: {
        frame_id: "Frame", vehicle_id: "Veh", x: "X", y: "Y",
        length: "Len", width: "Wid", heading: "Hdg", height: "Hgt",
      },
    }),
  );
  const framesPath = path.join(dir, "frames.jsonl");
  execFileSync(PYTHON, [
    "-m", "midar.cli", "ingest", "--csv", csvPath, "--mapping", mappingPath,
    "--av-ids", AV_IDS.join(","), "--scene", SCENE, "--out", framesPath,
  ]);
  const outcomesPath = path.join(dir, "outcomes.jsonl");
  const applyArgs = [
    "-m", "midar.cli", "apply", "--frames", framesPath, "--model", model,
    "--seed", String(SEED), "--out", outcomesPath,
  ];
  if (preset) applyArgs.push("--preset", preset);
  execFileSync(PYTHON, applyArgs);
  const fusedPath = path.join(dir, "fused.jsonl");
  execFileSync(PYTHON, [
    "-m", "midar.cli", "fuse", "--outcomes", outcomesPath,
    "--frames", framesPath, "--out", fusedPath,
  ]);
  const fused = new Map<string, string[]>();
  for (const line of fs.readFileSync(fusedPath, "utf-8").split("\n")) {
    if (!line.trim()) continue;
    const rec = JSON.parse(line) as { frame_id: string; detected: string[] };
    fused.set(rec.frame_id, [...rec.detected].sort());
  }
  return fused;
}

let workDir: string;

beforeAll(() => {
  workDir = fs.mkdtempSync(path.join(os.tmpdir(), "midar-bridge-"));
});

afterAll(() => {
  fs.rmSync(workDir, { recursive: true, force: true });
});

describe("bridge equivalence with the offline pipeline", () => {
  it("matches apply+fuse record-for-record (dropout model)", async () => {
    const steps = buildLog(25, 12);
    const dir = path.join(workDir, "dropout");
    fs.mkdirSync(dir, { recursive: true });
    const offline = offlineFused(dir, steps, "dropout", "signal-control");
    const service = new DetectionService({ python: PYTHON });
    try {
      const results = await runBridge(
        new LogReplaySimulator(steps), service, {
          sceneId: SCENE, avIds: AV_IDS, model: "dropout",
          preset: "signal-control", seed: SEED,
        });
      expect(results.every((r) => !r.skipped)).toBe(true);
      expect(results.length).toBe(offline.size);
      for (const result of results) {
        expect(result.detected).toEqual(offline.get(result.frameId));
      }
    } finally {
      service.close();
    }
  }, 60_000);

  it("matches apply+fuse record-for-record (perfect model)", async () => {
    const steps = buildLog(10, 8);
    const dir = path.join(workDir, "perfect");
    fs.mkdirSync(dir, { recursive: true });
    const offline = offlineFused(dir, steps, "perfect");
    const service = new DetectionService({ python: PYTHON });
    try {
      const results = await runBridge(
        new LogReplaySimulator(steps), service, {
          sceneId: SCENE, avIds: AV_IDS, model: "perfect", seed: SEED,
        });
      for (const result of results) {
        expect(result.detected).toEqual(offline.get(result.frameId));
      }
    } finally {
      service.close();
    }
  }, 60_000);
});

describe("bridge behavior", () => {
  it("returns the empty set when no AVs are present", async () => {
    const steps: StepRecord[] = [{
      step: "0",
      vehicles: [{ id: "veh1", x: 5, y: 0, heading: 0, width: 2,
                   length: 4.5, height: 1.6 }],
    }];
    const service = new DetectionService({ python: PYTHON });
    try {
      const sim = new LogReplaySimulator(steps);
      sim.advance();
      const result = await stepBridge(sim, service, {
        sceneId: SCENE, avIds: AV_IDS, model: "perfect",
      });
      expect(result.detected).toEqual([]);
      expect(result.skipped).toBe(false);
    } finally {
      service.close();
    }
  }, 30_000);

  it("fuses overlapping AV ranges without duplicates", async () => {
    const vehicles: VehicleState[] = [
      { id: "av1", x: 0, y: 0, heading: 0, width: 2, length: 4.5, height: 1.6 },
      { id: "av2", x: 20, y: 0, heading: 0, width: 2, length: 4.5, height: 1.6 },
      { id: "veh1", x: 10, y: 5, heading: 0, width: 2, length: 4.5, height: 1.6 },
    ];
    const service = new DetectionService({ python: PYTHON });
    try {
      const sim = new LogReplaySimulator([{ step: "0", vehicles }]);
      sim.advance();
      const result = await stepBridge(sim, service, {
        sceneId: SCENE, avIds: AV_IDS, model: "perfect", colorize: true,
      });
      expect(result.detected).toEqual(["av1", "av2", "veh1"]);
      expect(sim.colors.get("av1")).toEqual([255, 0, 0]);
      expect(sim.colors.get("veh1")).toEqual([0, 0, 255]);
    } finally {
      service.close();
    }
  }, 30_000);

  it("skips the step with a warning on service errors", async () => {
    const steps: StepRecord[] = [{
      step: "0",
      vehicles: [{ id: "av1", x: 0, y: 0, heading: 0, width: 2,
                   length: 4.5, height: 1.6 }],
    }];
    const warnings: string[] = [];
    // model "midar" without loaded params yields an error response
    const service = new DetectionService({ python: PYTHON });
    try {
      const sim = new LogReplaySimulator(steps);
      sim.advance();
      const result = await stepBridge(sim, service, {
        sceneId: SCENE, avIds: ["av1"], model: "midar",
        warn: (m) => warnings.push(m),
      });
      expect(result.skipped).toBe(true);
      expect(warnings.some((w) => w.includes("missing-params"))).toBe(true);
    } finally {
      service.close();
    }
  }, 30_000);

  it("skips the step when the service is unreachable", async () => {
    const steps: StepRecord[] = [{
      step: "0",
      vehicles: [{ id: "av1", x: 0, y: 0, heading: 0, width: 2,
                   length: 4.5, height: 1.6 }],
    }];
    const warnings: string[] = [];
    const service = new DetectionService({ python: PYTHON });
    service.close(); // simulator keeps going, service is gone
    const sim = new LogReplaySimulator(steps);
    sim.advance();
    const result = await stepBridge(sim, service, {
      sceneId: SCENE, avIds: ["av1"], model: "perfect",
      warn: (m) => warnings.push(m),
    });
    expect(result.skipped).toBe(true);
    expect(warnings.length).toBe(1);
  }, 30_000);
});
