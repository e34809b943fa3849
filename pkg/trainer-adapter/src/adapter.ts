/**
 * Trainer process speaking the planner's line-delimited JSON protocol over
 * stdin/stdout: one compact JSON object per line, request ids echoed back,
 * metrics in [0, 1]. Checkpoints live in memory, keyed by opaque refs; the
 * reserved ref "init" names the untouched initialization and always exists.
 */

import * as readline from "node:readline";
import {
  Dataset,
  ModelState,
  cloneModel,
  featureMask,
  freshModel,
  makeDataset,
  trainOneEpoch,
  validationAccuracy,
} from "./learner";

const INIT_REF = "init";

interface Checkpoint {
  model: ModelState;
  metric: number;
  regimeKey: string;
  epochsInRegime: number;
}

type Json = { [key: string]: unknown };

export class AdapterEngine {
  private data: Dataset | null = null;
  private checkpoints = new Map<string, Checkpoint>();
  private counter = 0;
  shutdownRequested = false;

  handle(wire: unknown): Json {
    if (typeof wire !== "object" || wire === null || Array.isArray(wire)) {
      return error(null, "malformed_request", "message must be a JSON object");
    }
    const msg = wire as Json;
    const id = typeof msg.id === "number" && Number.isInteger(msg.id) ? (msg.id as number) : null;
    if (id === null) {
      return error(null, "malformed_request", "request id must be an integer");
    }
    switch (msg.type) {
      case "init":
        return this.onInit(id, msg);
      case "train_epoch":
        return this.onTrainEpoch(id, msg);
      case "evaluate":
        return this.onEvaluate(id, msg);
      case "release_checkpoint":
        return this.onRelease(id, msg);
      case "shutdown":
        this.shutdownRequested = true;
        return { id, type: "released" };
      default:
        return error(id, "malformed_request", `unknown request type ${String(msg.type)}`);
    }
  }

  private onInit(id: number, msg: Json): Json {
    const seed = typeof msg.seed === "number" ? Math.floor(msg.seed) : NaN;
    if (!Number.isFinite(seed) || typeof msg.run_id !== "string") {
      return error(id, "malformed_request", "init needs run_id and integer seed");
    }
    this.data = makeDataset(seed);
    this.checkpoints.clear();
    this.counter = 0;
    const initModel = freshModel();
    this.checkpoints.set(INIT_REF, {
      model: initModel,
      metric: validationAccuracy(initModel, this.data),
      regimeKey: "",
      epochsInRegime: 0,
    });
    return {
      id,
      type: "ready",
      capabilities: {
        trainer: "trainer-adapter",
        learner: "logistic-regression-sgd",
        deterministic: true,
        portable_checkpoints: false,
      },
    };
  }

  private requireData(id: number): Json | null {
    if (this.data === null) return error(id, "not_initialized", "send init first");
    return null;
  }

  private onTrainEpoch(id: number, msg: Json): Json {
    const gate = this.requireData(id);
    if (gate) return gate;
    const ref = msg.checkpoint_ref;
    const hp = msg.hyperparams as Json | undefined;
    const epochIndex = msg.epoch_index;
    if (typeof ref !== "string" || typeof hp !== "object" || hp === null || typeof epochIndex !== "number") {
      return error(id, "malformed_request", "train_epoch needs checkpoint_ref, hyperparams, epoch_index");
    }
    const sampling = hp.sampling;
    const clipLen = hp.clip_len;
    const lr = hp.lr;
    if (typeof sampling !== "string" || typeof clipLen !== "number" || typeof lr !== "number" || lr <= 0) {
      return error(id, "bad_hyperparams", "need sampling, clip_len and positive lr");
    }
    const source = this.checkpoints.get(ref);
    if (!source) return error(id, "unknown_checkpoint", `no checkpoint ${ref}`);

    const regimeKey = `${sampling}|${clipLen}|${lr}`;
    const continuing = source.regimeKey === regimeKey;
    const expected = continuing ? source.epochsInRegime : 0;
    if (epochIndex !== expected) {
      return error(id, "epoch_mismatch", `expected epoch_index ${expected}, got ${epochIndex}`);
    }

    const model = cloneModel(source.model);
    model.mask = featureMask(sampling, clipLen);
    trainOneEpoch(model, this.data!, lr);
    const metric = validationAccuracy(model, this.data!);
    const newRef = `ck-${++this.counter}`;
    this.checkpoints.set(newRef, {
      model,
      metric,
      regimeKey,
      epochsInRegime: expected + 1,
    });
    return { id, type: "trained", checkpoint_ref: newRef, metric };
  }

  private onEvaluate(id: number, msg: Json): Json {
    const gate = this.requireData(id);
    if (gate) return gate;
    const ref = msg.checkpoint_ref;
    if (typeof ref !== "string") return error(id, "malformed_request", "evaluate needs checkpoint_ref");
    const ckpt = this.checkpoints.get(ref);
    if (!ckpt) return error(id, "unknown_checkpoint", `no checkpoint ${ref}`);
    return { id, type: "evaluated", metric: ckpt.metric };
  }

  private onRelease(id: number, msg: Json): Json {
    const gate = this.requireData(id);
    if (gate) return gate;
    const ref = msg.checkpoint_ref;
    if (typeof ref !== "string") return error(id, "malformed_request", "release needs checkpoint_ref");
    if (ref === INIT_REF) return error(id, "protected_checkpoint", "the fresh state is never released");
    if (!this.checkpoints.delete(ref)) {
      return error(id, "unknown_checkpoint", `no checkpoint ${ref}`);
    }
    return { id, type: "released" };
  }
}

function error(id: number | null, code: string, message: string): Json {
  return { id, type: "error", code, message };
}

export function serve(input: NodeJS.ReadableStream, output: NodeJS.WritableStream): Promise<number> {
  const engine = new AdapterEngine();
  const rl = readline.createInterface({ input, terminal: false });
  return new Promise((resolve) => {
    rl.on("line", (line) => {
      const text = line.trim();
      if (!text) return;
      let response: Json;
      try {
        response = engine.handle(JSON.parse(text));
      } catch {
        response = error(null, "malformed_request", "invalid JSON");
      }
      output.write(JSON.stringify(sortKeys(response)) + "\n");
      if (engine.shutdownRequested) {
        rl.close();
        resolve(0);
      }
    });
    rl.on("close", () => resolve(0));
  });
}

function sortKeys(obj: Json): Json {
  const out: Json = {};
  for (const key of Object.keys(obj).sort()) out[key] = obj[key];
  return out;
}
