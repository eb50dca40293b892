/** Materialize an architecture IR into a trainable tf.LayersModel.
 *
 * Every IR layer maps 1:1 onto a Keras-style layer (channels-last):
 *   conv     -> Conv2D, padding "same", bias on
 *   norm     -> BatchNormalization (trainable gamma/beta; moving stats
 *               are non-trainable and excluded from the parameter count)
 *   relu     -> ReLU activation
 *   upsample -> 2x nearest-neighbor UpSampling2D
 *   avgpool  -> AveragePooling2D (2/2 downscale or 3/1 "same" branch pool)
 *   concat   -> channel concatenation
 *   add      -> element-wise sum
 */

import * as tf from "@tensorflow/tfjs";
import { ArchitectureIR, CellIR, LayerSpec, IrError, skipSources } from "./ir";
import { hash32 } from "./rng";

function conv(layer: LayerSpec, name: string, seed: number): tf.layers.Layer {
  if (layer.kernel === null) {
    throw new IrError(`conv layer ${name} has no kernel size`);
  }
  return tf.layers.conv2d({
    name,
    filters: layer.out_channels,
    kernelSize: layer.kernel,
    strides: layer.stride,
    padding: "same",
    useBias: true,
    kernelInitializer: tf.initializers.heNormal({ seed }),
    biasInitializer: "zeros",
  });
}

function applyLayer(
  layer: LayerSpec,
  name: string,
  inputs: tf.SymbolicTensor[],
  seed: number,
): tf.SymbolicTensor {
  switch (layer.kind) {
    case "conv":
      return conv(layer, name, seed).apply(inputs[0]) as tf.SymbolicTensor;
    case "norm":
      return tf.layers
        .batchNormalization({ name, axis: -1 })
        .apply(inputs[0]) as tf.SymbolicTensor;
    case "relu":
      return tf.layers.reLU({ name }).apply(inputs[0]) as tf.SymbolicTensor;
    case "upsample":
      return tf.layers
        .upSampling2d({ name, size: [2, 2] })
        .apply(inputs[0]) as tf.SymbolicTensor;
    case "avgpool":
      return tf.layers
        .averagePooling2d({
          name,
          poolSize: layer.kernel ?? 2,
          strides: layer.stride,
          padding: layer.stride === 1 ? "same" : "valid",
        })
        .apply(inputs[0]) as tf.SymbolicTensor;
    case "concat":
      return tf.layers
        .concatenate({ name, axis: -1 })
        .apply(inputs) as tf.SymbolicTensor;
    case "add":
      return tf.layers.add({ name }).apply(inputs) as tf.SymbolicTensor;
    default:
      throw new IrError(`unknown layer kind ${(layer as LayerSpec).kind}`);
  }
}

function buildCell(
  cell: CellIR,
  input: tf.SymbolicTensor,
  skip: tf.SymbolicTensor | null,
  seed: number,
): tf.SymbolicTensor {
  const byId = new Map<string, tf.SymbolicTensor>();
  byId.set("input", input);
  if (skip !== null) {
    byId.set("skip", skip);
  }
  let last: tf.SymbolicTensor = input;
  let aliasCount = 0;
  for (const layer of cell.layers) {
    const seen = new Set<tf.SymbolicTensor>();
    const inputs = layer.inputs.map((id) => {
      let t = byId.get(id);
      if (t === undefined) {
        throw new IrError(`cell ${cell.index}: layer ${layer.id} needs unknown input ${id}`);
      }
      // concat/add of a tensor with itself (skip source == predecessor):
      // alias duplicates through a parameter-free linear activation so the
      // merge layer sees distinct symbolic tensors
      if (seen.has(t)) {
        t = tf.layers
          .activation({
            activation: "linear",
            name: `cell${cell.index}_${layer.id}_alias${aliasCount++}`,
          })
          .apply(t) as tf.SymbolicTensor;
      }
      seen.add(t);
      return t;
    });
    const name = `cell${cell.index}_${layer.id}`;
    last = applyLayer(layer, name, inputs, (seed + hash32(name)) >>> 0);
    byId.set(layer.id, last);
  }
  return last;
}

/** Build the full model; output is per-pixel class probabilities (softmax). */
export function buildNetwork(ir: ArchitectureIR, seed = 0): tf.LayersModel {
  const [channels, height, width] = ir.input_shape;
  const image = tf.input({ shape: [height, width, channels], name: "image" });

  const stem = conv(ir.stem, "stem", (seed + hash32("stem")) >>> 0)
    .apply(image) as tf.SymbolicTensor;

  const skips = skipSources(ir);
  const outputs = new Map<number | "stem", tf.SymbolicTensor>();
  outputs.set("stem", stem);
  let current = stem;
  for (const cell of ir.cells) {
    const src = skips.get(cell.index);
    const skip = src === undefined ? null : outputs.get(src) ?? null;
    if (src !== undefined && skip === null) {
      throw new IrError(`cell ${cell.index}: skip source ${src} not built yet`);
    }
    current = buildCell(cell, current, skip, seed);
    outputs.set(cell.index, current);
  }

  const logits = conv(ir.head, "head", (seed + hash32("head")) >>> 0)
    .apply(current) as tf.SymbolicTensor;
  const probs = tf.layers
    .softmax({ name: "probs", axis: -1 })
    .apply(logits) as tf.SymbolicTensor;
  return tf.model({ inputs: image, outputs: probs });
}

/** Trainable parameter count: conv kernels+biases and norm gamma/beta. */
export function countTrainableParams(model: tf.LayersModel): number {
  let total = 0;
  for (const weight of model.trainableWeights) {
    total += weight.shape.reduce<number>((a, b) => a * (b ?? 1), 1);
  }
  return total;
}
