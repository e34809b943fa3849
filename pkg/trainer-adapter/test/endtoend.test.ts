/**
 * The adapter consumed exactly the way the planner consumes it: as a spawned
 * process behind the wire protocol, checked by the planner's own conformance
 * suite, and driven through a full end-to-end plan on a 2x2 basic graph.
 * Requires the optplan CLI on PATH (pip install -e .. from the repo root).
 */

import { execFileSync, spawn } from "node:child_process";
import { createInterface } from "node:readline";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { describe, expect, it } from "vitest";

const ADAPTER = resolve(__dirname, "..", "dist", "main.js");
const ADAPTER_CMD = `node ${ADAPTER}`;

class LineClient {
  private proc = spawn("node", [ADAPTER], { stdio: ["pipe", "pipe", "inherit"] });
  private lines: Promise<string>[] = [];
  private resolvers: ((line: string) => void)[] = [];

  constructor() {
    const rl = createInterface({ input: this.proc.stdout });
    rl.on("line", (line) => {
      const resolver = this.resolvers.shift();
      if (resolver) resolver(line);
    });
  }

  request(obj: unknown): Promise<Record<string, unknown>> {
    const reply = new Promise<string>((resolveLine) => this.resolvers.push(resolveLine));
    this.proc.stdin.write(JSON.stringify(obj) + "\n");
    return reply.then((line) => JSON.parse(line));
  }

  async close(): Promise<number | null> {
    this.proc.stdin.end();
    return new Promise((resolveCode) => this.proc.on("exit", resolveCode));
  }
}

describe("spawned adapter", () => {
  it("handles a full dialog over stdio", async () => {
    const client = new LineClient();
    const ready = await client.request({ id: 1, type: "init", run_id: "e2e", seed: 3 });
    expect(ready.type).toBe("ready");
    const hp = { sampling: "uniform", clip_len: 32, clip_len_idx: 0, lr: 0.2, lr_idx: 0, extra: {} };
    const t0 = await client.request({
      id: 2, type: "train_epoch", checkpoint_ref: "init", hyperparams: hp, epoch_index: 0,
    });
    expect(t0.type).toBe("trained");
    const evaluated = await client.request({
      id: 3, type: "evaluate", checkpoint_ref: t0.checkpoint_ref,
    });
    expect(evaluated.metric).toBe(t0.metric);
    const bye = await client.request({ id: 4, type: "shutdown" });
    expect(bye.type).toBe("released");
    expect(await client.close()).toBe(0);
  }, 30_000);
});

function optplanAvailable(): boolean {
  try {
    execFileSync("optplan", ["--help"], { stdio: "ignore" });
    return true;
  } catch {
    return false;
  }
}

describe("against the planner", () => {
  it.skipIf(!optplanAvailable())("passes the full protocol conformance suite", () => {
    const out = execFileSync("optplan", ["conform", "--trainer-cmd", ADAPTER_CMD], {
      encoding: "utf-8",
    });
    expect(out).toContain("PASS  handshake");
    expect(out).not.toContain("FAIL");
  }, 120_000);

  it.skipIf(!optplanAvailable())("completes an end-to-end plan on a 2x2 basic graph", () => {
    const dir = mkdtempSync(join(tmpdir(), "adapter-e2e-"));
    const config = join(dir, "experiment.yaml");
    writeFileSync(
      config,
      [
        "run_id: adapter-e2e",
        "seed: 3",
        "clip_lengths: [16, 64]",
        "learning_rates: [0.3, 0.05]",
        "strategies: [consecutive, uniform]",
        "mode: basic",
        "trainer:",
        `  command: "${ADAPTER_CMD}"`,
        "  timeout_s: 120",
        "stopper:",
        "  delay_epochs: 10",
        "  horizon_cap: 40",
        `ledger: ${join(dir, "run.ledger.jsonl")}`,
        `plan_out: ${join(dir, "run.plan.json")}`,
      ].join("\n"),
    );
    const started = Date.now();
    execFileSync("optplan", ["plan", "--config", config], { encoding: "utf-8" });
    const elapsedMin = (Date.now() - started) / 60_000;
    expect(elapsedMin).toBeLessThan(10);

    const plan = JSON.parse(readFileSync(join(dir, "run.plan.json"), "utf-8"));
    expect(plan.path[0]).toBe(0);
    expect(plan.path.length).toBeGreaterThanOrEqual(3);
    expect(plan.epochs.length).toBe(plan.path.length - 1);
    expect(plan.final_value).toBeGreaterThan(0.5);
    expect(["consecutive", "uniform"]).toContain(plan.winning_strategy);
  }, 600_000);
});
