/** Architecture IR document types (version 1) and validation.
 *
 * The IR is the engine's framework-neutral network description: a stem
 * convolution, an ordered list of cells each holding an explicit layer
 * mini-graph, a 1x1 head convolution, and the cell-to-cell edges.
 */

export type LayerKind =
  | "conv"
  | "norm"
  | "relu"
  | "upsample"
  | "avgpool"
  | "concat"
  | "add";

export interface LayerSpec {
  id: string;
  kind: LayerKind;
  inputs: string[]; // local layer ids, or "input" / "skip"
  in_channels: number;
  out_channels: number;
  kernel: number | null;
  stride: number;
}

export interface CellIR {
  index: number; // 1-based
  block_type: string;
  conv_size: number;
  level: number;
  in_channels: number;
  skip_channels: number;
  out_channels: number;
  layers: LayerSpec[];
}

export interface EdgeIR {
  dst: number | "head";
  src: number | "stem";
  kind: "primary" | "skip";
}

export interface ArchitectureIR {
  version: number;
  input_shape: [number, number, number]; // (channels, height, width)
  num_classes: number;
  base_channels: number;
  genotype_digest: string;
  stem: LayerSpec;
  cells: CellIR[];
  head: LayerSpec;
  edges: EdgeIR[];
}

const KNOWN_KINDS = new Set<string>([
  "conv", "norm", "relu", "upsample", "avgpool", "concat", "add",
]);

export class IrError extends Error {}

/** Parse and sanity-check an IR document received over the wire. */
export function parseIr(doc: unknown): ArchitectureIR {
  if (typeof doc !== "object" || doc === null) {
    throw new IrError("IR document is not an object");
  }
  const ir = doc as ArchitectureIR;
  if (ir.version !== 1) {
    throw new IrError(`unsupported IR version ${ir.version}`);
  }
  if (!Array.isArray(ir.input_shape) || ir.input_shape.length !== 3) {
    throw new IrError("input_shape must be [channels, height, width]");
  }
  if (!Array.isArray(ir.cells) || !ir.stem || !ir.head) {
    throw new IrError("IR document is missing stem, cells, or head");
  }
  for (const cell of ir.cells) {
    for (const layer of cell.layers) {
      if (!KNOWN_KINDS.has(layer.kind)) {
        throw new IrError(`unknown layer kind ${layer.kind} in cell ${cell.index}`);
      }
    }
  }
  return ir;
}

/** Skip edges keyed by destination cell index. */
export function skipSources(ir: ArchitectureIR): Map<number, number | "stem"> {
  const map = new Map<number, number | "stem">();
  for (const edge of ir.edges) {
    if (edge.kind === "skip" && edge.dst !== "head") {
      map.set(edge.dst, edge.src);
    }
  }
  return map;
}
