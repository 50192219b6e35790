/**
 * The per-step loop: read vehicle states, send one detection request per
 * AV, fuse the returned outcomes, and optionally recolor vehicles for
 * visual inspection. All detection semantics live behind the wire
 * protocol; the bridge adds none of its own.
 */

import { fuseOutcomes } from "./fuse.js";
import type {
  BoxRecord,
  DetectRequest,
  FrameRecord,
  ModelName,
  OutcomeRecord,
} from "./protocol.js";
import type { DetectionService } from "./service.js";
import type { Rgb, SimulatorHandle, VehicleState } from "./simulator.js";

export interface BridgeOptions {
  sceneId: string;
  avIds: string[];
  model: ModelName;
  preset?: string;
  seed?: number;
  /** Sensor mount height in meters (matches the offline ingest default). */
  zOffset?: number;
  colorize?: boolean;
  warn?: (message: string) => void;
}

export interface StepResult {
  frameId: string;
  detected: string[]; // sorted fused set
  skipped: boolean;
}

const COLOR_AV: Rgb = [255, 0, 0];
const COLOR_DETECTED: Rgb = [0, 0, 255];
const COLOR_UNOBSERVED: Rgb = [255, 255, 255];

const DEFAULT_Z_OFFSET = 1.7;

function toBox(state: VehicleState): BoxRecord {
  return {
    id: state.id,
    class: state.class ?? "car",
    x: state.x,
    y: state.y,
    z: state.height / 2, // box center sits at half height above ground
    w: state.width,
    l: state.length,
    h: state.height,
    heading: state.heading,
  };
}

function buildFrame(
  sim: SimulatorHandle,
  avId: string,
  opts: BridgeOptions,
): FrameRecord {
  const ego = sim.vehicleState(avId);
  const vehicles = sim
    .vehicleIds()
    .filter((id) => id !== avId)
    .map((id) => toBox(sim.vehicleState(id)));
  return {
    scene_id: opts.sceneId,
    frame_id: sim.stepId(),
    timestamp: sim.time(),
    ego: {
      id: avId,
      x: ego.x,
      y: ego.y,
      heading: ego.heading,
      z_offset: opts.zOffset ?? DEFAULT_Z_OFFSET,
      dims: { w: ego.width, l: ego.length, h: ego.height },
    },
    vehicles,
  };
}

/** One simulation step: request per AV, union-fuse, recolor. */
export async function stepBridge(
  sim: SimulatorHandle,
  service: DetectionService,
  opts: BridgeOptions,
): Promise<StepResult> {
  const warn = opts.warn ?? ((m) => console.warn(m));
  const frameId = sim.stepId();
  const present = new Set(sim.vehicleIds());
  const avsHere = opts.avIds.filter((id) => present.has(id));

  const perAv = new Map<string, OutcomeRecord[]>();
  for (const avId of avsHere) {
    const request: DetectRequest = {
      request_id: `${frameId}:${avId}`,
      model: opts.model,
      frame: buildFrame(sim, avId, opts),
    };
    if (opts.preset !== undefined) request.preset = opts.preset;
    if (opts.seed !== undefined) request.seed = opts.seed;

    let response;
    try {
      response = await service.request(request);
    } catch (e) {
      warn(`step ${frameId}: service unreachable (${(e as Error).message}); ` +
        "skipping step");
      return { frameId, detected: [], skipped: true };
    }
    if (response.error || !response.outcomes) {
      warn(`step ${frameId}: service error for AV ${avId}: ` +
        `${response.error?.code ?? "missing outcomes"}; skipping step`);
      return { frameId, detected: [], skipped: true };
    }
    perAv.set(avId, response.outcomes);
  }

  const fused = fuseOutcomes(perAv);
  if (opts.colorize) {
    const avSet = new Set(avsHere);
    for (const id of present) {
      if (avSet.has(id)) sim.setColor(id, COLOR_AV);
      else if (fused.has(id)) sim.setColor(id, COLOR_DETECTED);
      else sim.setColor(id, COLOR_UNOBSERVED);
    }
  }
  return { frameId, detected: [...fused].sort(), skipped: false };
}

/** Drive the simulator to completion, one fused set per step. */
export async function runBridge(
  sim: SimulatorHandle,
  service: DetectionService,
  opts: BridgeOptions,
): Promise<StepResult[]> {
  const results: StepResult[] = [];
  while (sim.advance()) {
    results.push(await stepBridge(sim, service, opts));
  }
  return results;
}
