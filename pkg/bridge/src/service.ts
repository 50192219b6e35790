/**
 * Client for the detection service. Spawns the Python CLI in serve mode
 * and correlates newline-delimited requests with responses, which arrive
 * strictly in request order.
 */

import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import * as readline from "node:readline";

import type { DetectRequest, DetectResponse } from "./protocol.js";

export interface ServiceOptions {
  python?: string;
  paramsPath?: string;
  defaultModel?: string;
  seed?: number;
  range?: number;
  threshold?: number;
}

interface Pending {
  resolve: (response: DetectResponse) => void;
  reject: (err: Error) => void;
}

export class DetectionService {
  private child: ChildProcessWithoutNullStreams;
  private pending: Pending[] = [];
  private closed = false;
  private stderrTail: string[] = [];

  constructor(options: ServiceOptions = {}) {
    const args = ["-m", "midar.cli", "serve"];
    if (options.paramsPath) args.push("--params", options.paramsPath);
    if (options.defaultModel) args.push("--default-model", options.defaultModel);
    if (options.seed !== undefined) args.push("--seed", String(options.seed));
    if (options.range !== undefined) args.push("--range", String(options.range));
    if (options.threshold !== undefined) {
      args.push("--threshold", String(options.threshold));
    }
    this.child = spawn(options.python ?? "python3", args, {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const lines = readline.createInterface({ input: this.child.stdout });
    lines.on("line", (line) => this.onLine(line));
    const err = readline.createInterface({ input: this.child.stderr });
    err.on("line", (line) => {
      this.stderrTail.push(line);
      if (this.stderrTail.length > 20) this.stderrTail.shift();
    });
    this.child.on("exit", () => this.failAll("detection service exited"));
    this.child.on("error", (e) =>
      this.failAll(`detection service unavailable: ${e.message}`),
    );
  }

  private onLine(line: string): void {
    const next = this.pending.shift();
    if (!next) return; // unsolicited output; nothing waits on it
    try {
      next.resolve(JSON.parse(line) as DetectResponse);
    } catch (e) {
      next.reject(new Error(`unparseable service response: ${line}`));
    }
  }

  private failAll(reason: string): void {
    if (this.closed) return;
    const detail = this.stderrTail.length
      ? `${reason}; stderr: ${this.stderrTail.join(" | ")}`
      : reason;
    for (const p of this.pending.splice(0)) {
      p.reject(new Error(detail));
    }
  }

  request(req: DetectRequest): Promise<DetectResponse> {
    return new Promise((resolve, reject) => {
      if (this.closed || this.child.exitCode !== null) {
        reject(new Error("detection service is not running"));
        return;
      }
      this.pending.push({ resolve, reject });
      this.child.stdin.write(JSON.stringify(req) + "\n");
    });
  }

  close(): void {
    this.closed = true;
    this.child.stdin.end();
    this.child.kill();
  }
}
