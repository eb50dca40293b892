/** NDJSON worker protocol: hello handshake, ping/pong heartbeats,
 * evaluate -> result. One job at a time. */

import * as fs from "fs";
import * as path from "path";
import { IrError, parseIr } from "./ir";
import { MaskDump, runJob, TrainConfig, TrainingDiverged } from "./train";

export const PROTOCOL_VERSION = 1;

export type Send = (message: Record<string, unknown>) => void;

interface EvaluateMessage {
  type: "evaluate";
  id: string;
  ir: unknown;
  train_config: Partial<TrainConfig> & { augment?: Partial<TrainConfig["augment"]> };
  dump_dir?: string;
  dump_count?: number;
}

const DEFAULT_CONFIG: TrainConfig = {
  epochs: 100,
  learning_rate: 1e-3,
  lr_decay_exponent: 0.9,
  batch_size: 32,
  input_size: 128,
  folds: 5,
  seeds: 3,
  dataset_id: "synthetic",
  augment: { flip: true, rotate: true, scale: true, shift: true, brightness: true },
};

export function normalizeTrainConfig(raw: EvaluateMessage["train_config"]): TrainConfig {
  return {
    ...DEFAULT_CONFIG,
    ...raw,
    augment: { ...DEFAULT_CONFIG.augment, ...(raw.augment ?? {}) },
  };
}

function writeMaskFile(dir: string, stem: string, labels: Uint8Array,
                       size: number, numClasses: number): string {
  const header = {
    shape: [size, size],
    spacing: [1.0, 1.0],
    num_classes: numClasses,
    dtype: "uint8",
    data: `${stem}.json.bin`,
  };
  fs.writeFileSync(path.join(dir, `${stem}.json`), JSON.stringify(header, null, 2) + "\n");
  fs.writeFileSync(path.join(dir, `${stem}.json.bin`), Buffer.from(labels));
  return `${stem}.json`;
}

function writeDumps(dir: string, dumps: MaskDump[], numClasses: number): void {
  fs.mkdirSync(dir, { recursive: true });
  const manifest = dumps.map((dump, i) => ({
    fold: dump.fold,
    seed: dump.seed,
    patient_id: dump.patientId,
    dice: dump.dice,
    pred: writeMaskFile(dir, `pred_${i}`, dump.pred, dump.size, numClasses),
    gt: writeMaskFile(dir, `gt_${i}`, dump.gt, dump.size, numClasses),
  }));
  fs.writeFileSync(path.join(dir, "dumps.json"), JSON.stringify(manifest, null, 2) + "\n");
}

export function handleMessage(message: Record<string, unknown>, send: Send): void {
  switch (message.type) {
    case "hello":
      send({ type: "hello", version: PROTOCOL_VERSION });
      return;
    case "ping":
      send({ type: "pong" });
      return;
    case "evaluate":
      handleEvaluate(message as unknown as EvaluateMessage, send);
      return;
    default:
      send({ type: "error", message: `unknown message type ${String(message.type)}` });
  }
}

function handleEvaluate(message: EvaluateMessage, send: Send): void {
  const id = message.id;
  let started = false;
  try {
    const ir = parseIr(message.ir); // throws before any training starts
    const config = normalizeTrainConfig(message.train_config ?? {});
    started = true;
    const outcome = runJob(
      ir,
      config,
      (fold, seed, epoch) => send({ type: "progress", id, fold, seed, epoch }),
      message.dump_dir ? message.dump_count ?? 4 : 0,
    );
    if (message.dump_dir) {
      writeDumps(message.dump_dir, outcome.dumps, ir.num_classes);
    }
    send({
      type: "result",
      id,
      status: "ok",
      curves: outcome.curves.map((c) => ({ fold: c.fold, seed: c.seed, dice: c.dice })),
      params_reported: outcome.paramsReported,
    });
  } catch (err) {
    const reason = err instanceof Error ? err.message : String(err);
    const startedFlag = started && !(err instanceof IrError);
    const diverged = err instanceof TrainingDiverged;
    send({
      type: "result",
      id,
      status: "failed",
      error: diverged ? `training diverged: ${reason}` : reason,
      started: startedFlag,
    });
  }
}
