/**
 * Minimal simulator-facing surface: what the bridge reads each step and
 * the one thing it writes back (vehicle colors). A live TraCI-style
 * client and the log-replay driver used for offline runs both fit it.
 */

import * as fs from "node:fs";

export interface VehicleState {
  id: string;
  class?: string;
  x: number;
  y: number;
  heading: number; // radians
  width: number;
  length: number;
  height: number;
}

export type Rgb = [number, number, number];

export interface SimulatorHandle {
  /** Advance one step; false when the simulation is over. */
  advance(): boolean;
  /** Identifier of the current step (stable across replays). */
  stepId(): string;
  time(): number;
  vehicleIds(): string[];
  vehicleState(id: string): VehicleState;
  setColor(id: string, color: Rgb): void;
}

export interface StepRecord {
  step: string | number;
  time?: number;
  vehicles: VehicleState[];
}

/** Replays a recorded vehicle-state log (JSONL, one step per line). */
export class LogReplaySimulator implements SimulatorHandle {
  private index = -1;
  readonly colors = new Map<string, Rgb>();

  constructor(private readonly steps: StepRecord[]) {}

  advance(): boolean {
    this.index += 1;
    return this.index < this.steps.length;
  }

  private current(): StepRecord {
    const step = this.steps[this.index];
    if (!step) throw new Error("advance() past the end of the log");
    return step;
  }

  stepId(): string {
    return String(this.current().step);
  }

  time(): number {
    return this.current().time ?? this.index * 0.1;
  }

  vehicleIds(): string[] {
    return this.current().vehicles.map((v) => v.id);
  }

  vehicleState(id: string): VehicleState {
    const state = this.current().vehicles.find((v) => v.id === id);
    if (!state) throw new Error(`unknown vehicle ${id} at step ${this.stepId()}`);
    return state;
  }

  setColor(id: string, color: Rgb): void {
    this.colors.set(id, color);
  }
}

export function loadStepLog(path: string): StepRecord[] {
  const steps: StepRecord[] = [];
  for (const line of fs.readFileSync(path, "utf-8").split("\n")) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    steps.push(JSON.parse(trimmed) as StepRecord);
  }
  return steps;
}
