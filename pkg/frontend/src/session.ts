/** Client-side session state: a frame strip plus an action log.
 *
 * Every frame in the strip is the verbatim base64 PNG payload returned by the
 * service; the UI never synthesizes pixels. At most one step request is in
 * flight per session, and a failed step leaves the state untouched.
 */

import type { ServiceApi, SourceSpec, StepResponse } from "./api.js";

export type ActionSource = "manual" | "suggested" | "extracted" | "replay";

export interface LogEntry {
  indices: number[];
  source: ActionSource;
  latencyMs: number;
}

export class SessionBusyError extends Error {
  constructor() {
    super("a step is already in flight for this session");
  }
}

export class SessionController {
  readonly frames: string[];
  readonly log: LogEntry[] = [];
  private inFlight = false;
  private requestCounter = 0;

  private constructor(
    private readonly api: ServiceApi,
    readonly sessionId: string,
    initialFrame: string,
  ) {
    this.frames = [initialFrame];
  }

  static async create(api: ServiceApi, source: SourceSpec, seed = 0): Promise<SessionController> {
    const created = await api.createSession(source, seed);
    return new SessionController(api, created.session_id, created.frame_png);
  }

  get busy(): boolean {
    return this.inFlight;
  }

  get currentFrame(): string {
    const frame = this.frames[this.frames.length - 1];
    if (frame === undefined) throw new Error("session has no frames");
    return frame;
  }

  /** Strip length always equals log length + 1. */
  checkInvariant(): void {
    if (this.frames.length !== this.log.length + 1) {
      throw new Error(
        `invariant violated: ${this.frames.length} frames vs ${this.log.length} actions`,
      );
    }
  }

  async step(indices: number[], source: ActionSource): Promise<StepResponse> {
    if (this.inFlight) throw new SessionBusyError();
    this.inFlight = true;
    const requestId = `ui-${this.sessionId}-${this.requestCounter++}`;
    try {
      const response = await this.api.step(this.sessionId, { indices }, requestId);
      this.frames.push(response.frame_png);
      this.log.push({ indices: response.indices, source, latencyMs: response.latency_ms });
      this.checkInvariant();
      return response;
    } finally {
      this.inFlight = false;
    }
  }

  /** Policy suggestion for an instruction; does not step. */
  suggest(instruction: string): Promise<{ indices: number[] }> {
    return this.api.suggest(this.sessionId, instruction);
  }

  /** Replay a recorded action log onto this (fresh) session. */
  async replay(log: number[][]): Promise<void> {
    for (const indices of log) {
      await this.step(indices, "replay");
    }
  }
}

/** Validate a free-form index tuple against the codebook bounds. */
export function validateIndices(
  raw: string,
  numTokens: number,
  codebookSize: number,
): { indices?: number[]; error?: string } {
  const parts = raw
    .split(/[\s,]+/)
    .map((p) => p.trim())
    .filter((p) => p.length > 0);
  if (parts.length !== numTokens) {
    return { error: `need exactly ${numTokens} indices` };
  }
  const indices: number[] = [];
  for (const part of parts) {
    const value = Number(part);
    if (!Number.isInteger(value) || value < 0 || value >= codebookSize) {
      return { error: `indices must be integers in [0, ${codebookSize})` };
    }
    indices.push(value);
  }
  return { indices };
}
