/** End-to-end pass-through check against the real service.
 *
 * Replays a recorded 10-step action log through the UI session controller and
 * asserts the rendered strip is byte-identical to direct API responses, with
 * a sane median step round trip. Builds a miniature run directory (once) and
 * spawns the service on a scratch port.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { existsSync } from "node:fs";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { SessionController } from "../src/session.js";

const repoRoot = path.resolve(path.dirname(fileURLToPath(import.meta.url)), "..", "..");
const port = 8361;
const baseUrl = `http://127.0.0.1:${port}`;

let server: ChildProcess | null = null;

async function waitForService(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  let lastError: unknown = null;
  while (Date.now() < deadline) {
    try {
      const response = await fetch(`${baseUrl}/codebook`);
      if (response.ok) return;
    } catch (error) {
      lastError = error;
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error(`service did not come up: ${String(lastError)}`);
}

beforeAll(async () => {
  let runDir = process.env.LAMWORLD_DEMO_DIR;
  if (!runDir || !existsSync(path.join(runDir, "lowlevel", "done.txt"))) {
    runDir = runDir ?? mkdtempSync(path.join(tmpdir(), "lamworld-demo-"));
    const build = spawnSync(
      "python3",
      [path.join(repoRoot, "scripts", "make_demo_run.py"), runDir],
      { stdio: "inherit", timeout: 240_000 },
    );
    if (build.status !== 0) throw new Error("demo run build failed");
  }
  server = spawn(
    "python3",
    ["-m", "lamworld.cli", "serve", "--run-dir", runDir, "--port", String(port)],
    { cwd: repoRoot, stdio: "ignore" },
  );
  await waitForService(120_000);
}, 400_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("playground pass-through", () => {
  it("replays a 10-step log byte-identically to direct API calls", async () => {
    const api = new ApiClient(baseUrl);
    const info = await api.codebook();
    const log: number[][] = Array.from({ length: 10 }, (_, k) =>
      Array.from({ length: info.num_tokens }, (_, j) => (k * 3 + j) % info.size),
    );
    const source = { dataset: "val_arm_a", clip: 0, frame: 0 } as const;

    // direct API path
    const direct = await api.createSession(source, 7);
    const directFrames = [direct.frame_png];
    for (let k = 0; k < log.length; k++) {
      const stepped = await api.step(direct.session_id, { indices: log[k]! }, `direct-${k}`);
      directFrames.push(stepped.frame_png);
    }

    // UI path on a fresh session with the same source and seed
    const t0 = Date.now();
    const session = await SessionController.create(api, source, 7);
    await session.replay(log);
    const elapsed = Date.now() - t0;

    expect(session.frames).toEqual(directFrames);
    expect(session.log.length).toBe(10);
    const medianStepMs = session.log
      .map((entry) => entry.latencyMs)
      .sort((a, b) => a - b)[5]!;
    expect(medianStepMs).toBeLessThan(2000);
    expect(elapsed / log.length).toBeLessThan(2000);

    // the server agrees on the whole history
    const history = await api.history(session.sessionId);
    expect(history.frames).toEqual(session.frames);
    expect(history.actions).toEqual(log);
  }, 240_000);

  it("interactive migration: extract from a pair, step a session", async () => {
    const api = new ApiClient(baseUrl);
    const a = await api.createSession({ dataset: "val_arm_a", clip: 0, frame: 0 }, 0);
    const goal = await api.createSession({ dataset: "val_arm_a", clip: 0, frame: 3 }, 0);
    const extracted = await api.extract(a.frame_png, goal.frame_png);
    expect(extracted.indices.length).toBeGreaterThan(0);

    const target = await SessionController.create(
      api,
      { dataset: "val_arm_b", clip: 0, frame: 0 },
      0,
    );
    const stepped = await target.step(extracted.indices, "extracted");
    expect(stepped.indices).toEqual(extracted.indices);
    expect(target.frames.length).toBe(2);
  }, 120_000);
});
