import * as fs from "fs";
import * as path from "path";
import { describe, expect, it } from "vitest";

import { handleMessage, normalizeTrainConfig } from "../src/protocol";
import { softDiceLoss } from "../src/train";
import * as tf from "@tensorflow/tfjs";

const FIXTURES = path.join(__dirname, "fixtures");

function collect(): { send: (m: Record<string, unknown>) => void; out: Record<string, unknown>[] } {
  const out: Record<string, unknown>[] = [];
  return { send: (m) => out.push(m), out };
}

const TOY_CONFIG = {
  epochs: 2,
  batch_size: 8,
  input_size: 16,
  folds: 2,
  seeds: 1,
  dataset_id: "toy",
};

describe("protocol", () => {
  it("answers the handshake and heartbeats", () => {
    const { send, out } = collect();
    handleMessage({ type: "hello", version: 1 }, send);
    handleMessage({ type: "ping" }, send);
    expect(out).toEqual([{ type: "hello", version: 1 }, { type: "pong" }]);
  });

  it("reports unknown message types without dying", () => {
    const { send, out } = collect();
    handleMessage({ type: "dance" }, send);
    expect(out[0].type).toBe("error");
  });

  it("fills train-config defaults", () => {
    const config = normalizeTrainConfig({ epochs: 2, augment: { flip: false } });
    expect(config.epochs).toBe(2);
    expect(config.learning_rate).toBeCloseTo(1e-3);
    expect(config.lr_decay_exponent).toBeCloseTo(0.9);
    expect(config.augment.flip).toBe(false);
    expect(config.augment.rotate).toBe(true);
  });

  it("trains a toy job end to end: folds x seeds curves in [0, 1]", () => {
    const ir = JSON.parse(
      fs.readFileSync(path.join(FIXTURES, "random_0.json"), "utf-8"),
    );
    const { send, out } = collect();
    handleMessage(
      { type: "evaluate", id: "job-1", ir, train_config: TOY_CONFIG },
      send,
    );
    const result = out[out.length - 1] as {
      type: string; id: string; status: string;
      curves: { fold: number; seed: number; dice: number[] }[];
      params_reported: number;
    };
    expect(result.type).toBe("result");
    expect(result.id).toBe("job-1");
    expect(result.status).toBe("ok");
    expect(result.curves.length).toBe(2); // folds * seeds
    for (const curve of result.curves) {
      expect(curve.dice.length).toBe(2); // epochs
      for (const v of curve.dice) {
        expect(v).toBeGreaterThanOrEqual(0);
        expect(v).toBeLessThanOrEqual(1);
      }
    }
    expect(result.params_reported).toBeGreaterThan(0);
    // progress heartbeats were interleaved
    expect(out.some((m) => m.type === "progress")).toBe(true);
  }, 120_000);

  it("fails before training on an unbuildable IR (started=false)", () => {
    const ir = JSON.parse(
      fs.readFileSync(path.join(FIXTURES, "random_0.json"), "utf-8"),
    );
    ir.cells[0].layers[0].kind = "quantum";
    const { send, out } = collect();
    handleMessage(
      { type: "evaluate", id: "job-2", ir, train_config: TOY_CONFIG },
      send,
    );
    const result = out[out.length - 1] as Record<string, unknown>;
    expect(result.status).toBe("failed");
    expect(result.started).toBe(false);
    expect(String(result.error)).toContain("quantum");
  });
});

describe("soft dice loss", () => {
  it("is near zero for a perfect prediction and high for a wrong one", () => {
    const gt = tf.tensor4d([0, 1, 1, 0, 0, 1, 1, 0], [1, 2, 2, 2]);
    const perfect = softDiceLoss(gt as tf.Tensor4D, gt as tf.Tensor4D);
    expect(perfect.dataSync()[0]).toBeLessThan(1e-4);
    const wrong = tf.tensor4d([1, 0, 0, 1, 1, 0, 0, 1], [1, 2, 2, 2]);
    const bad = softDiceLoss(wrong as tf.Tensor4D, gt as tf.Tensor4D);
    expect(bad.dataSync()[0]).toBeGreaterThan(0.9);
    gt.dispose();
    wrong.dispose();
    perfect.dispose();
    bad.dispose();
  });
});
