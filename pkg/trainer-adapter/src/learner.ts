/**
 * A tiny real learner: logistic regression with SGD on a seeded synthetic
 * binary-classification dataset.
 *
 * The planner's hyper-parameters map onto it honestly:
 *  - clip length -> how many input features the model may see (longer clips
 *    reveal more of the input), with the sampling strategy deciding whether
 *    the visible features are a contiguous prefix or an evenly spaced subset;
 *  - learning rate -> the SGD step size.
 *
 * Labels carry irreducible noise, so validation accuracy saturates and the
 * different masks reach genuinely different ceilings.
 */

export const N_FEATURES = 16;
const N_TRAIN = 160;
const N_VAL = 120;
const LABEL_FLIP = 0.12;

/** Deterministic 32-bit PRNG (mulberry32). */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussian(rand: () => number): number {
  // Box-Muller; rand() is in [0, 1), shift away from zero for the log
  const u = 1 - rand();
  const v = rand();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
}

export interface Dataset {
  trainX: Float64Array[];
  trainY: Uint8Array;
  valX: Float64Array[];
  valY: Uint8Array;
}

export function makeDataset(seed: number): Dataset {
  const rand = mulberry32(0x9e3779b9 ^ seed);
  const w = new Float64Array(N_FEATURES);
  for (let j = 0; j < N_FEATURES; j++) {
    w[j] = gaussian(rand) * (1 - (0.4 * j) / N_FEATURES); // early features matter most
  }
  const make = (n: number) => {
    const xs: Float64Array[] = [];
    const ys = new Uint8Array(n);
    for (let i = 0; i < n; i++) {
      const x = new Float64Array(N_FEATURES);
      let z = 0;
      for (let j = 0; j < N_FEATURES; j++) {
        x[j] = gaussian(rand);
        z += x[j] * w[j];
      }
      let label = z > 0 ? 1 : 0;
      if (rand() < LABEL_FLIP) label = 1 - label;
      xs.push(x);
      ys[i] = label;
    }
    return { xs, ys };
  };
  const train = make(N_TRAIN);
  const val = make(N_VAL);
  return { trainX: train.xs, trainY: train.ys, valX: val.xs, valY: val.ys };
}

/** Feature indices visible under the given hyper-parameters. */
export function featureMask(sampling: string, clipLen: number): number[] {
  const k = Math.min(N_FEATURES, Math.max(2, Math.round(clipLen / 4)));
  const idx: number[] = [];
  if (sampling === "uniform") {
    for (let i = 0; i < k; i++) idx.push(Math.floor((i * N_FEATURES) / k));
  } else {
    for (let i = 0; i < k; i++) idx.push(i);
  }
  return idx;
}

export interface ModelState {
  weights: Float64Array; // N_FEATURES + 1, last entry is the bias
  mask: number[];
}

export function freshModel(): ModelState {
  return { weights: new Float64Array(N_FEATURES + 1), mask: featureMask("consecutive", 4 * N_FEATURES) };
}

export function cloneModel(m: ModelState): ModelState {
  return { weights: Float64Array.from(m.weights), mask: [...m.mask] };
}

function predict(weights: Float64Array, mask: number[], x: Float64Array): number {
  let z = weights[N_FEATURES];
  for (const j of mask) z += weights[j] * x[j];
  return 1 / (1 + Math.exp(-z));
}

/** One full SGD pass in fixed order; mutates the model in place. */
export function trainOneEpoch(model: ModelState, data: Dataset, lr: number): void {
  const { weights, mask } = model;
  for (let i = 0; i < data.trainX.length; i++) {
    const x = data.trainX[i];
    const err = data.trainY[i] - predict(weights, mask, x);
    for (const j of mask) weights[j] += lr * err * x[j];
    weights[N_FEATURES] += lr * err;
  }
}

export function validationAccuracy(model: ModelState, data: Dataset): number {
  let correct = 0;
  for (let i = 0; i < data.valX.length; i++) {
    const p = predict(model.weights, model.mask, data.valX[i]);
    if ((p > 0.5 ? 1 : 0) === data.valY[i]) correct++;
  }
  return correct / data.valX.length;
}
