// Annotation-flow test against a live service instance: seed three waiting
// cases, lease and adjudicate them through the same client the UI uses, and
// check the stats shift plus the stale-submission dialog path.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, TriageApi } from "../src/api.js";
import { initialState, reduce, type AppState } from "../src/state.js";

const PORT = 8300 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

const FLAGGING_STUB = {
  default_completion: "[Analysis] n/a",
  rules: [
    {
      contains: ["[Judgment Result]"],
      completion:
        "[Judgment Result]\nImproper Utilization of RAG\n[Judgment Reason]\nCites a note that does not exist.",
    },
  ],
};

function caseRow(index: number) {
  return {
    dialogue_id: `it-${index}`,
    history: [
      { role: "user", text: `I asked about order ${index} already.` },
      { role: "assistant", text: "Let me check." },
    ],
    query: `Where is order ${index}?`,
    snippets: [{ id: `kb-${index}`, content: `Order ${index} notes.` }],
    reference_response: null,
    response: `Your order ${index} ships tomorrow, guaranteed.`,
  };
}

let workdir: string;
let server: ChildProcess | null = null;
const api = new TriageApi(BASE);

async function waitForHealth(deadlineMs: number): Promise<void> {
  const start = Date.now();
  while (Date.now() - start < deadlineMs) {
    if (await api.health()) return;
    await new Promise((resolve) => setTimeout(resolve, 150));
  }
  throw new Error(`service did not come up on ${BASE}`);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "annotator-it-"));
  const stubPath = join(workdir, "stub.json");
  writeFileSync(stubPath, JSON.stringify(FLAGGING_STUB));
  const casesPath = join(workdir, "cases.jsonl");
  writeFileSync(casesPath, [0, 1, 2].map((i) => JSON.stringify(caseRow(i))).join("\n") + "\n");
  const configPath = join(workdir, "engine.json");
  writeFileSync(
    configPath,
    JSON.stringify({
      seed: 1,
      bind: `127.0.0.1:${PORT}`,
      store_path: join(workdir, "store"),
      stub: { path: stubPath },
      endpoints: { "stub-judge": { base_url: "stub://judge", model_id: "stub" } },
      judges: { hallucination_detector: ["stub-judge"] },
    }),
  );

  const seed = spawnSync(
    "python3",
    ["-m", "dialogforge.cli", "triage", "--config", configPath,
     "--input", casesPath, "--output", join(workdir, "curated.jsonl")],
    { encoding: "utf-8" },
  );
  if (seed.status !== 0) {
    throw new Error(`seeding failed: ${seed.stderr}\n${seed.stdout}`);
  }

  server = spawn("python3", ["-m", "dialogforge.cli", "serve", "--config", configPath], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  await waitForHealth(20_000);
}, 40_000);

afterAll(async () => {
  if (server) {
    server.kill();
    await new Promise((resolve) => server!.once("exit", resolve));
  }
  rmSync(workdir, { recursive: true, force: true });
});

describe("annotation flow against a live service", () => {
  it("leases, adjudicates, drains the queue, and surfaces stale submissions", async () => {
    const before = await api.stats();
    expect(before.queue_depth).toBe(3);
    expect(before.states["awaiting_human"]).toBe(3);

    // confirm the first case with a reason
    const first = await api.nextCase("session-a");
    expect(first).not.toBeNull();
    const confirm = await api.submitVerdict(
      first!.case_id, true, "promises a guaranteed date with no KB support", "annotator-a",
    );
    expect(confirm.state).toBe("verified_halluc");

    // overturn the second
    const second = await api.nextCase("session-a");
    expect(second).not.toBeNull();
    expect(second!.case_id).not.toBe(first!.case_id);
    const overturn = await api.submitVerdict(second!.case_id, false, "", "annotator-a");
    expect(overturn.state).toBe("hard_non_halluc");

    // lease the third, then let a second session adjudicate it out from under us
    const third = await api.nextCase("session-a");
    expect(third).not.toBeNull();
    await api.submitVerdict(third!.case_id, false, "", "annotator-b");

    // the stale submission maps onto the WrongState dialog in the UI state
    let ui: AppState = reduce(initialState(), { type: "login", annotatorId: "annotator-a", token: "" });
    ui = reduce(ui, { type: "case_loaded", item: third! });
    const error = await api
      .submitVerdict(third!.case_id, false, "", "annotator-a")
      .catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).isWrongState).toBe(true);
    ui = reduce(ui, { type: "wrong_state", detail: (error as ApiError).detail });
    expect(ui.phase).toBe("wrong_state");
    expect(ui.dialogMessage).toContain("not awaiting_human");

    // queue is drained
    expect(await api.nextCase("session-a")).toBeNull();
    const uiIdle = reduce(reduce(ui, { type: "dismiss_dialog" }), { type: "queue_empty" });
    expect(uiIdle.phase).toBe("idle");

    // stats shifted accordingly
    const after = await api.stats();
    expect(after.queue_depth).toBe(0);
    expect(after.states["awaiting_human"]).toBe(0);
    expect(after.states["verified_halluc"]).toBe(1);
    expect(after.states["hard_non_halluc"]).toBe(2);
  }, 30_000);

  it("direct verdicts without a lease also guard wrong states", async () => {
    const error = await api
      .submitVerdict("does-not-exist", false, "", "annotator-a")
      .catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(404);
  });
});
