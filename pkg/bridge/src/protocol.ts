/**
 * Wire types for the detection service protocol: newline-delimited JSON
 * requests and responses over stdio (or TCP).
 */

export interface BoxRecord {
  id: string;
  class: string;
  x: number;
  y: number;
  z: number;
  w: number;
  l: number;
  h: number;
  heading: number;
}

export interface EgoRecord {
  id: string;
  x: number;
  y: number;
  heading: number;
  z_offset: number;
  dims: { w: number; l: number; h: number };
}

export interface FrameRecord {
  scene_id: string;
  frame_id: string;
  timestamp: number;
  ego: EgoRecord;
  vehicles: BoxRecord[];
}

export type ModelName = "midar" | "perfect" | "dropout";

export interface DetectRequest {
  request_id: string | number;
  model?: ModelName;
  preset?: string;
  seed?: number;
  frame: FrameRecord;
}

export interface OutcomeRecord {
  vehicle_id: string;
  label: "TP" | "FN";
  score: number;
}

export interface DetectResponse {
  request_id: string | number | null;
  outcomes?: OutcomeRecord[];
  error?: { code: string; message: string };
}
