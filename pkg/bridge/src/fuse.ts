/**
 * Union fusion of per-AV detection outcomes, mirroring the offline
 * pipeline exactly: a vehicle is in the fused set iff at least one AV
 * labeled it TP, or it is itself an AV.
 */

import type { OutcomeRecord } from "./protocol.js";

export function fuseOutcomes(
  perAv: Map<string, OutcomeRecord[]>,
): Set<string> {
  const detected = new Set<string>();
  for (const [avId, outcomes] of perAv) {
    detected.add(avId);
    for (const outcome of outcomes) {
      if (outcome.label === "TP") detected.add(outcome.vehicle_id);
    }
  }
  return detected;
}
