/** Training loop: soft Dice loss, Adam with polynomial learning-rate decay,
 * per-epoch validation Dice curves over folds x seeds. */

import * as tf from "@tensorflow/tfjs";
import { ArchitectureIR } from "./ir";
import { buildNetwork, countTrainableParams } from "./network";
import { Dataset, makeDataset, Sample, splitFold } from "./dataset";
import { argmaxLabels, dice } from "./metrics";
import { hash32, mulberry32, randInt, Rng } from "./rng";

const SOFT_DICE_EPS = 1e-5;

export interface AugmentFlags {
  flip: boolean;
  rotate: boolean;
  scale: boolean;
  shift: boolean;
  brightness: boolean;
}

export interface TrainConfig {
  epochs: number;
  learning_rate: number;
  lr_decay_exponent: number;
  batch_size: number;
  input_size: number;
  folds: number;
  seeds: number;
  dataset_id: string;
  augment: AugmentFlags;
}

export interface CurveRecord {
  fold: number;
  seed: number;
  dice: number[];
}

export interface MaskDump {
  fold: number;
  seed: number;
  patientId: string;
  pred: Uint8Array;
  gt: Uint8Array;
  size: number;
  dice: number;
}

export interface TrainOutcome {
  curves: CurveRecord[];
  paramsReported: number;
  dumps: MaskDump[];
}

export class TrainingDiverged extends Error {}

// ---------------------------------------------------------------------------
// Augmentation: the same seeded geometric transform is applied to the image
// and (nearest-neighbor) to the mask.

function transformIndices(size: number, rng: Rng, flags: AugmentFlags): Int32Array {
  const flipY = flags.flip && rng() < 0.5;
  const flipX = flags.flip && rng() < 0.5;
  const quarterTurns = flags.rotate ? randInt(rng, 4) : 0;
  const shiftY = flags.shift ? randInt(rng, 5) - 2 : 0;
  const shiftX = flags.shift ? randInt(rng, 5) - 2 : 0;
  const zoom = flags.scale ? 0.85 + 0.3 * rng() : 1.0;
  const center = (size - 1) / 2;

  const src = new Int32Array(size * size);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      // walk the output pixel back through the inverse transform
      let sy = flipY ? size - 1 - y : y;
      let sx = flipX ? size - 1 - x : x;
      for (let t = 0; t < quarterTurns; t++) {
        const ny = sx;
        const nx = size - 1 - sy;
        sy = ny;
        sx = nx;
      }
      sy = Math.round(center + (sy - center) / zoom) - shiftY;
      sx = Math.round(center + (sx - center) / zoom) - shiftX;
      sy = Math.min(size - 1, Math.max(0, sy));
      sx = Math.min(size - 1, Math.max(0, sx));
      src[y * size + x] = sy * size + sx;
    }
  }
  return src;
}

function augmentSample(sample: Sample, size: number, rng: Rng,
                       flags: AugmentFlags): { image: Float32Array; mask: Uint8Array } {
  const src = transformIndices(size, rng, flags);
  const image = new Float32Array(size * size);
  const mask = new Uint8Array(size * size);
  const delta = flags.brightness ? (rng() - 0.5) * 0.2 : 0;
  for (let i = 0; i < src.length; i++) {
    image[i] = Math.min(1, Math.max(0, sample.image[src[i]] + delta));
    mask[i] = sample.mask[src[i]];
  }
  return { image, mask };
}

// ---------------------------------------------------------------------------

function oneHot(mask: Uint8Array, classes: number): Float32Array {
  const out = new Float32Array(mask.length * classes);
  for (let i = 0; i < mask.length; i++) {
    out[i * classes + Math.min(mask[i], classes - 1)] = 1;
  }
  return out;
}

/** Foreground soft Dice loss over a batch: 1 - mean over classes >= 1. */
export function softDiceLoss(probs: tf.Tensor4D, target: tf.Tensor4D): tf.Scalar {
  return tf.tidy(() => {
    const classes = probs.shape[3];
    const dices: tf.Scalar[] = [];
    for (let c = 1; c < classes; c++) {
      const p = probs.slice([0, 0, 0, c], [-1, -1, -1, 1]);
      const g = target.slice([0, 0, 0, c], [-1, -1, -1, 1]);
      const num = p.mul(g).sum().mul(2).add(SOFT_DICE_EPS);
      const den = p.sum().add(g.sum()).add(SOFT_DICE_EPS);
      dices.push(num.div(den).asScalar());
    }
    const meanDice = tf.stack(dices).mean().asScalar();
    return tf.scalar(1).sub(meanDice).asScalar();
  });
}

function toBatchTensor(images: Float32Array[], size: number): tf.Tensor4D {
  const flat = new Float32Array(images.length * size * size);
  images.forEach((img, i) => flat.set(img, i * size * size));
  return tf.tensor4d(flat, [images.length, size, size, 1]);
}

function validationDice(model: tf.LayersModel, val: Sample[], size: number,
                        classes: number): { mean: number; perSample: number[] } {
  const per: number[] = [];
  for (const sample of val) {
    const scores = predictionDice(model, sample, size, classes).dice;
    per.push(scores);
  }
  return { mean: per.reduce((a, b) => a + b, 0) / per.length, perSample: per };
}

function predictionDice(model: tf.LayersModel, sample: Sample, size: number,
                        classes: number): { dice: number; pred: Uint8Array } {
  const input = toBatchTensor([sample.image], size);
  const probs = model.predict(input) as tf.Tensor4D;
  const data = probs.dataSync() as Float32Array;
  input.dispose();
  probs.dispose();
  const pred = argmaxLabels(data, size * size, classes);
  let total = 0;
  for (let c = 1; c < classes; c++) {
    total += dice(pred, sample.mask, c);
  }
  return { dice: total / (classes - 1), pred };
}

// ---------------------------------------------------------------------------

function trainOneRun(ir: ArchitectureIR, config: TrainConfig, dataset: Dataset,
                     fold: number, seed: number,
                     onEpoch?: (epoch: number) => void): {
  curve: number[];
  params: number;
  model: tf.LayersModel;
  val: Sample[];
} {
  const size = config.input_size;
  const classes = ir.num_classes;
  const { train, val } = splitFold(dataset, fold, config.folds);
  const initSeed = (hash32(`${ir.genotype_digest}|${fold}|${seed}`)) >>> 0;
  const model = buildNetwork(ir, initSeed);
  const params = countTrainableParams(model);
  const optimizer = tf.train.adam(config.learning_rate);
  const rng = mulberry32((initSeed ^ 0x9e3779b9) >>> 0);

  const curve: number[] = [];
  for (let epoch = 0; epoch < config.epochs; epoch++) {
    const decay = Math.pow(1 - epoch / config.epochs, config.lr_decay_exponent);
    (optimizer as unknown as { learningRate: number }).learningRate =
      config.learning_rate * decay;

    const order = train.map((_, i) => i);
    for (let i = order.length - 1; i > 0; i--) {
      const j = randInt(rng, i + 1);
      [order[i], order[j]] = [order[j], order[i]];
    }
    for (let start = 0; start < order.length; start += config.batch_size) {
      const indices = order.slice(start, start + config.batch_size);
      const images: Float32Array[] = [];
      const targets = new Float32Array(indices.length * size * size * classes);
      indices.forEach((idx, b) => {
        const aug = augmentSample(train[idx], size, rng, config.augment);
        images.push(aug.image);
        targets.set(oneHot(aug.mask, classes), b * size * size * classes);
      });
      const x = toBatchTensor(images, size);
      const y = tf.tensor4d(targets, [indices.length, size, size, classes]);
      const lossVal = optimizer.minimize(
        () => softDiceLoss(model.apply(x, { training: true }) as tf.Tensor4D, y),
        true,
      ) as tf.Scalar;
      const loss = lossVal.dataSync()[0];
      lossVal.dispose();
      x.dispose();
      y.dispose();
      if (!Number.isFinite(loss)) {
        optimizer.dispose();
        model.dispose();
        throw new TrainingDiverged(`non-finite loss at epoch ${epoch}`);
      }
    }
    curve.push(validationDice(model, val, size, classes).mean);
    if (onEpoch) onEpoch(epoch);
  }
  optimizer.dispose();
  return { curve, params, model, val };
}

export function runJob(ir: ArchitectureIR, config: TrainConfig,
                       onEpoch?: (fold: number, seed: number, epoch: number) => void,
                       dumpCount = 0): TrainOutcome {
  const datasetSeed = hash32(config.dataset_id);
  const dataset = makeDataset(config.input_size, datasetSeed);
  const curves: CurveRecord[] = [];
  const dumps: MaskDump[] = [];
  let paramsReported = 0;

  for (let fold = 0; fold < config.folds; fold++) {
    for (let seed = 0; seed < config.seeds; seed++) {
      const run = trainOneRun(ir, config, dataset, fold, seed,
        onEpoch ? (e) => onEpoch(fold, seed, e) : undefined);
      curves.push({ fold, seed, dice: run.curve });
      paramsReported = run.params;
      if (dumps.length < dumpCount) {
        for (const sample of run.val.slice(0, dumpCount - dumps.length)) {
          const { dice: d, pred } = predictionDice(
            run.model, sample, config.input_size, ir.num_classes);
          dumps.push({
            fold, seed, patientId: sample.patientId,
            pred, gt: sample.mask, size: config.input_size, dice: d,
          });
        }
      }
      run.model.dispose();
    }
  }
  return { curves, paramsReported, dumps };
}
