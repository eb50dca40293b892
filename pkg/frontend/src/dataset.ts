/** Seeded synthetic segmentation dataset: bright blobs on noisy background.
 *
 * Each "patient" is one grayscale image with a known binary mask (class 1
 * = a disk or annulus of seeded position/radius). Fold assignment is
 * patient-level via a deterministic hash of the patient id, so the same
 * patient never appears in both the training and validation split.
 */

import { hash32, mulberry32, randInt, Rng } from "./rng";

export interface Sample {
  patientId: string;
  image: Float32Array; // height * width, single channel, values in [0, 1]
  mask: Uint8Array; // height * width, labels {0, 1}
}

export interface Dataset {
  size: number;
  samples: Sample[];
}

export const DEFAULT_PATIENTS = 24;

export function makeSample(patientId: string, size: number, datasetSeed: number): Sample {
  const rng: Rng = mulberry32((hash32(patientId) ^ datasetSeed) >>> 0);
  const image = new Float32Array(size * size);
  const mask = new Uint8Array(size * size);

  const cy = 2 + randInt(rng, size - 4);
  const cx = 2 + randInt(rng, size - 4);
  const radius = 2 + rng() * (size / 4);
  const annulus = rng() < 0.3;
  const inner = annulus ? radius * (0.3 + 0.3 * rng()) : 0;
  const brightness = 0.6 + 0.3 * rng();

  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const i = y * size + x;
      const d = Math.hypot(y - cy, x - cx);
      const inside = d <= radius && d >= inner;
      mask[i] = inside ? 1 : 0;
      const noise = 0.1 * rng();
      image[i] = inside ? Math.min(1, brightness + noise) : noise;
    }
  }
  return { patientId, image, mask };
}

export function makeDataset(size: number, datasetSeed: number,
                            patients = DEFAULT_PATIENTS): Dataset {
  const samples: Sample[] = [];
  for (let p = 0; p < patients; p++) {
    samples.push(makeSample(`patient-${p}`, size, datasetSeed));
  }
  return { size, samples };
}

/** Deterministic patient-level fold id in [0, folds). */
export function foldOf(patientId: string, folds: number, foldSeed = 0): number {
  return hash32(`${patientId}|fold|${foldSeed}`) % folds;
}

export function splitFold(dataset: Dataset, fold: number, folds: number,
                          foldSeed = 0): { train: Sample[]; val: Sample[] } {
  const train: Sample[] = [];
  const val: Sample[] = [];
  for (const sample of dataset.samples) {
    (foldOf(sample.patientId, folds, foldSeed) === fold ? val : train).push(sample);
  }
  // guarantee both splits are non-empty even for unlucky hashes
  if (val.length === 0) {
    val.push(train.pop() as Sample);
  }
  if (train.length === 0) {
    train.push(val.pop() as Sample);
  }
  return { train, val };
}
