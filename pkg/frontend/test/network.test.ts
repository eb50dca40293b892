import * as fs from "fs";
import * as path from "path";
import { describe, expect, it } from "vitest";
import * as tf from "@tensorflow/tfjs";

import { parseIr, IrError, ArchitectureIR } from "../src/ir";
import { buildNetwork, countTrainableParams } from "../src/network";

const FIXTURES = path.join(__dirname, "fixtures");
const cases: { file: string; expected_params: number }[] = JSON.parse(
  fs.readFileSync(path.join(FIXTURES, "cases.json"), "utf-8"),
);

function loadIr(file: string): ArchitectureIR {
  return parseIr(JSON.parse(fs.readFileSync(path.join(FIXTURES, file), "utf-8")));
}

describe("network materialization", () => {
  it("builds every fixture and matches the engine parameter count exactly", () => {
    for (const { file, expected_params } of cases) {
      const ir = loadIr(file);
      const model = buildNetwork(ir);
      expect(countTrainableParams(model), file).toBe(expected_params);
      model.dispose();
    }
  });

  it("produces per-pixel probabilities at the input resolution", () => {
    const ir = loadIr("random_0.json");
    const model = buildNetwork(ir);
    const [, h, w] = ir.input_shape;
    const input = tf.zeros([1, h, w, 1]);
    const out = model.predict(input) as tf.Tensor4D;
    expect(out.shape).toEqual([1, h, w, ir.num_classes]);
    const probs = out.dataSync();
    // softmax rows sum to one
    let rowSum = 0;
    for (let c = 0; c < ir.num_classes; c++) rowSum += probs[c];
    expect(rowSum).toBeCloseTo(1.0, 6);
    input.dispose();
    out.dispose();
    model.dispose();
  });

  it("is deterministic for a fixed seed", () => {
    const ir = loadIr("random_1.json");
    const a = buildNetwork(ir, 7);
    const b = buildNetwork(ir, 7);
    const c = buildNetwork(ir, 8);
    const wa = a.getWeights()[0].dataSync();
    const wb = b.getWeights()[0].dataSync();
    const wc = c.getWeights()[0].dataSync();
    expect(Array.from(wa)).toEqual(Array.from(wb));
    expect(Array.from(wa)).not.toEqual(Array.from(wc));
    a.dispose();
    b.dispose();
    c.dispose();
  });

  it("rejects unknown layer kinds before training starts", () => {
    const doc = JSON.parse(
      fs.readFileSync(path.join(FIXTURES, "random_0.json"), "utf-8"),
    );
    doc.cells[0].layers[0].kind = "quantum";
    expect(() => parseIr(doc)).toThrow(IrError);
  });

  it("rejects wrong IR versions", () => {
    const doc = JSON.parse(
      fs.readFileSync(path.join(FIXTURES, "random_0.json"), "utf-8"),
    );
    doc.version = 2;
    expect(() => parseIr(doc)).toThrow(IrError);
  });
});
