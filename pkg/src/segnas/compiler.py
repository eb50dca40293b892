"""Expand a genotype into an explicit layer-level architecture graph.

The graph (ArchitectureIR) is framework-neutral: every layer carries its
kind, kernel, stride and channel counts, so a trainer can materialize it
1:1. Costs (parameters, multiply-accumulates) are computed from closed
forms over the same layer list.

Block internals follow minimal-depth templates of the classic families:
  vgg        [conv k -> norm -> relu] x 2
  residual   two conv-norm(-relu) layers with an additive shortcut;
             a single 1x1 projection on the shortcut when channels or
             resolution change
  dense      2 growth layers (growth = out_channels // 2) with running
             concatenation, then a 1x1 transition to out_channels
  inception  parallel 1x1 / 1x1->kxk / pool->1x1 branches at out/4,
             out/2, out/4 channels, concatenated

Scaling: up-cells start with a 2x nearest-neighbor resize; down-cells use
a stride-2 first conv for vgg/residual, and a parameter-free 2x2 stride-2
average pool for dense/inception or whenever a skip must be concatenated
at the reduced resolution first.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Union

from .space import (
    BlockType,
    ChannelMove,
    Genotype,
    SpaceConfig,
    genotype_digest,
    node_levels,
    validate,
)

IR_FORMAT_VERSION = 1


class CompileError(Exception):
    pass


class ShapeError(CompileError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str  # conv | norm | relu | upsample | avgpool | concat | add
    inputs: tuple[str, ...]  # local layer ids, or "input" / "skip"
    in_channels: int
    out_channels: int
    kernel: Optional[int] = None
    stride: int = 1

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            id=d["id"], kind=d["kind"], inputs=tuple(d["inputs"]),
            in_channels=int(d["in_channels"]), out_channels=int(d["out_channels"]),
            kernel=None if d.get("kernel") is None else int(d["kernel"]),
            stride=int(d.get("stride", 1)),
        )


@dataclass(frozen=True)
class CellIR:
    index: int  # 1-based
    block_type: str
    conv_size: int
    level: int
    in_channels: int
    skip_channels: int  # 0 when the cell has no skip edge
    out_channels: int
    layers: tuple[LayerSpec, ...]

    @property
    def output_layer(self) -> str:
        return self.layers[-1].id

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "block_type": self.block_type,
            "conv_size": self.conv_size,
            "level": self.level,
            "in_channels": self.in_channels,
            "skip_channels": self.skip_channels,
            "out_channels": self.out_channels,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellIR":
        return cls(
            index=int(d["index"]), block_type=d["block_type"],
            conv_size=int(d["conv_size"]), level=int(d["level"]),
            in_channels=int(d["in_channels"]), skip_channels=int(d["skip_channels"]),
            out_channels=int(d["out_channels"]),
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
        )


@dataclass(frozen=True)
class Edge:
    dst: Union[int, str]  # cell index or "head"
    src: Union[int, str]  # cell index or "stem"
    kind: str  # primary | skip

    def to_dict(self) -> dict:
        return {"dst": self.dst, "src": self.src, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Edge":
        return cls(dst=d["dst"], src=d["src"], kind=d["kind"])


@dataclass(frozen=True)
class ArchitectureIR:
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int
    base_channels: int
    genotype_digest: str
    stem: LayerSpec
    cells: tuple[CellIR, ...]
    head: LayerSpec
    edges: tuple[Edge, ...]

    def to_dict(self) -> dict:
        return {
            "version": IR_FORMAT_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "base_channels": self.base_channels,
            "genotype_digest": self.genotype_digest,
            "stem": self.stem.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
            "head": self.head.to_dict(),
            "edges": [e.to_dict() for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureIR":
        return cls(
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            base_channels=int(d["base_channels"]),
            genotype_digest=d["genotype_digest"],
            stem=LayerSpec.from_dict(d["stem"]),
            cells=tuple(CellIR.from_dict(c) for c in d["cells"]),
            head=LayerSpec.from_dict(d["head"]),
            edges=tuple(Edge.from_dict(e) for e in d["edges"]),
        )


# ---------------------------------------------------------------------------
# Cell construction

class _CellBuilder:
    def __init__(self):
        self.layers: list[LayerSpec] = []
        self._counters: dict[str, int] = {}

    def add(self, kind: str, inputs, in_channels: int, out_channels: int,
            kernel: Optional[int] = None, stride: int = 1, name: Optional[str] = None) -> str:
        if name is None:
            n = self._counters.get(kind, 0) + 1
            self._counters[kind] = n
            name = f"{kind}{n}"
        if isinstance(inputs, str):
            inputs = (inputs,)
        self.layers.append(LayerSpec(name, kind, tuple(inputs), in_channels,
                                     out_channels, kernel, stride))
        return name

    def conv_norm_relu(self, src: str, cin: int, cout: int, kernel: int, stride: int = 1) -> str:
        c = self.add("conv", src, cin, cout, kernel, stride)
        n = self.add("norm", c, cout, cout)
        return self.add("relu", n, cout, cout)


def _build_vgg(b: _CellBuilder, src: str, cx: int, cout: int, k: int, stride: int) -> None:
    mid = b.conv_norm_relu(src, cx, cout, k, stride)
    b.conv_norm_relu(mid, cout, cout, k, 1)


def _build_residual(b: _CellBuilder, src: str, cx: int, cout: int, k: int, stride: int) -> None:
    c1 = b.add("conv", src, cx, cout, k, stride)
    n1 = b.add("norm", c1, cout, cout)
    r1 = b.add("relu", n1, cout, cout)
    c2 = b.add("conv", r1, cout, cout, k, 1)
    n2 = b.add("norm", c2, cout, cout)
    if stride == 1 and cx == cout:
        shortcut = src
    else:
        shortcut = b.add("conv", src, cx, cout, 1, stride, name="proj")
    s = b.add("add", (n2, shortcut), cout, cout)
    b.add("relu", s, cout, cout)


def _build_dense(b: _CellBuilder, src: str, cx: int, cout: int, k: int, stride: int) -> None:
    assert stride == 1  # down-scaling is pooled before dense layers
    growth = max(1, cout // 2)
    d1 = b.conv_norm_relu(src, cx, growth, k)
    cat1 = b.add("concat", (src, d1), cx + growth, cx + growth)
    d2 = b.conv_norm_relu(cat1, cx + growth, growth, k)
    cat2 = b.add("concat", (cat1, d2), cx + 2 * growth, cx + 2 * growth)
    b.conv_norm_relu(cat2, cx + 2 * growth, cout, 1)


def _build_inception(b: _CellBuilder, src: str, cx: int, cout: int, k: int, stride: int) -> None:
    assert stride == 1
    if cout < 4:
        raise CompileError(f"inception cell needs at least 4 output channels, got {cout}")
    c1 = cout // 4
    c3 = cout // 4
    c2 = cout - c1 - c3
    b1 = b.conv_norm_relu(src, cx, c1, 1)
    b2a = b.conv_norm_relu(src, cx, c2, 1)
    b2b = b.conv_norm_relu(b2a, c2, c2, k)
    pool = b.add("avgpool", src, cx, cx, kernel=3, stride=1)
    b3 = b.conv_norm_relu(pool, cx, c3, 1)
    b.add("concat", (b1, b2b, b3), cout, cout)


_BLOCK_BUILDERS = {
    BlockType.VGG: _build_vgg,
    BlockType.RESIDUAL: _build_residual,
    BlockType.DENSE: _build_dense,
    BlockType.INCEPTION: _build_inception,
}

# Blocks whose first conv can absorb a stride-2 downscale.
_STRIDE_CAPABLE = {BlockType.VGG, BlockType.RESIDUAL}


def _build_cell(index: int, block_type: BlockType, conv_size: int, level: int,
                move: ChannelMove, in_channels: int, skip_channels: int,
                out_channels: int) -> CellIR:
    b = _CellBuilder()
    cur = "input"
    cur_ch = in_channels

    if move is ChannelMove.UP:
        cur = b.add("upsample", cur, cur_ch, cur_ch, stride=2, name="up")
    pool_down = move is ChannelMove.DOWN and (
        skip_channels > 0 or block_type not in _STRIDE_CAPABLE)
    if pool_down:
        cur = b.add("avgpool", cur, cur_ch, cur_ch, kernel=2, stride=2, name="pool")
    block_stride = 2 if (move is ChannelMove.DOWN and not pool_down) else 1

    if skip_channels > 0:
        cur = b.add("concat", (cur, "skip"), cur_ch + skip_channels,
                    cur_ch + skip_channels, name="cat")
        cur_ch += skip_channels

    _BLOCK_BUILDERS[block_type](b, cur, cur_ch, out_channels, conv_size, block_stride)

    return CellIR(
        index=index, block_type=block_type.value, conv_size=conv_size, level=level,
        in_channels=in_channels, skip_channels=skip_channels,
        out_channels=out_channels, layers=tuple(b.layers),
    )


# ---------------------------------------------------------------------------
# Compilation

def compile_architecture(genotype: Genotype, config: SpaceConfig,
                         input_shape: tuple[int, int, int],
                         num_classes: int) -> ArchitectureIR:
    verdict = validate(genotype, config)
    if not verdict.ok:
        raise CompileError(f"genotype is invalid: {verdict.violations}")
    c_in, height, width = input_shape
    div = 2 ** config.max_levels
    if height % div != 0 or width % div != 0:
        raise ShapeError(
            f"input dims {height}x{width} must be divisible by 2^max_levels = {div}")
    if num_classes < 1:
        raise CompileError("num_classes must be positive")

    levels = node_levels(genotype)
    base = config.base_channels

    stem = LayerSpec("stem", "conv", ("image",), c_in, base, kernel=3, stride=1)

    cells: list[CellIR] = []
    edges: list[Edge] = []
    prev_ch = base
    for idx, gene in enumerate(genotype.nodes, start=1):
        level = levels[idx - 1]
        out_ch = base * (2 ** level)
        skip_ch = base * (2 ** level) if gene.skip_source is not None else 0
        edges.append(Edge(dst=idx, src="stem" if idx == 1 else idx - 1, kind="primary"))
        if gene.skip_source is not None:
            edges.append(Edge(dst=idx, src=gene.skip_source, kind="skip"))
        cells.append(_build_cell(idx, gene.block_type, gene.conv_size, level,
                                 gene.channel_move, prev_ch, skip_ch, out_ch))
        prev_ch = out_ch

    head = LayerSpec("head", "conv", (f"cell{len(cells)}",), prev_ch, num_classes,
                     kernel=1, stride=1)
    edges.append(Edge(dst="head", src=len(cells), kind="primary"))

    return ArchitectureIR(
        input_shape=tuple(input_shape), num_classes=num_classes, base_channels=base,
        genotype_digest=genotype_digest(genotype),
        stem=stem, cells=tuple(cells), head=head, edges=tuple(edges),
    )


# ---------------------------------------------------------------------------
# Cost models

def _layer_params(layer: LayerSpec) -> int:
    if layer.kind == "conv":
        return layer.kernel * layer.kernel * layer.in_channels * layer.out_channels \
            + layer.out_channels
    if layer.kind == "norm":
        return 2 * layer.out_channels
    return 0


def _layer_macs(layer: LayerSpec, out_size: tuple[int, int]) -> int:
    if layer.kind == "conv":
        h, w = out_size
        return h * w * layer.out_channels * layer.kernel * layer.kernel * layer.in_channels
    return 0


@dataclass(frozen=True)
class CellCost:
    cell: Union[int, str]  # cell index, "stem" or "head"
    params: int
    macs: int


@dataclass(frozen=True)
class CostReport:
    total_params: int
    total_macs: int
    per_cell: tuple[CellCost, ...]

    @property
    def total_mmacs(self) -> float:
        return self.total_macs / 1e6

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "total_mmacs": self.total_mmacs,
            "per_cell": [
                {"cell": c.cell, "params": c.params, "macs": c.macs}
                for c in self.per_cell
            ],
        }


def _propagate_cell_sizes(cell: CellIR, in_size: tuple[int, int],
                          skip_size: tuple[int, int]) -> dict[str, tuple[int, int]]:
    """Spatial size after each layer, keyed by layer id."""
    sizes: dict[str, tuple[int, int]] = {"input": in_size, "skip": skip_size}
    for layer in cell.layers:
        src_sizes = [sizes[i] for i in layer.inputs]
        if layer.kind == "upsample":
            h, w = src_sizes[0]
            sizes[layer.id] = (h * 2, w * 2)
        elif layer.kind in ("conv", "avgpool"):
            h, w = src_sizes[0]
            if h % layer.stride or w % layer.stride:
                raise ShapeError(f"layer {layer.id}: size {h}x{w} not divisible by stride")
            sizes[layer.id] = (h // layer.stride, w // layer.stride)
        else:  # norm, relu, concat, add keep spatial dims
            if any(s != src_sizes[0] for s in src_sizes):
                raise ShapeError(f"layer {layer.id}: mismatched input sizes {src_sizes}")
            sizes[layer.id] = src_sizes[0]
    return sizes


def cell_spatial_sizes(ir: ArchitectureIR,
                       input_shape: Optional[tuple[int, int, int]] = None
                       ) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Per cell: (input size, output size) at the given input shape."""
    shape = input_shape or ir.input_shape
    _, height, width = shape
    out = []
    prev_level = 0
    for cell in ir.cells:
        in_size = (height >> prev_level, width >> prev_level)
        out_size = (height >> cell.level, width >> cell.level)
        if min(in_size) < 1 or min(out_size) < 1:
            raise ShapeError(f"cell {cell.index}: input too small for level {cell.level}")
        out.append((in_size, out_size))
        prev_level = cell.level
    return out


def _cost(ir: ArchitectureIR, input_shape: tuple[int, int, int]) -> CostReport:
    _, height, width = input_shape
    per_cell: list[CellCost] = []

    stem_params = _layer_params(ir.stem)
    stem_macs = _layer_macs(ir.stem, (height, width))
    per_cell.append(CellCost("stem", stem_params, stem_macs))

    sizes = cell_spatial_sizes(ir, input_shape)
    for cell, (in_size, out_size) in zip(ir.cells, sizes):
        layer_sizes = _propagate_cell_sizes(cell, in_size, out_size)
        if layer_sizes[cell.output_layer] != out_size:
            raise ShapeError(
                f"cell {cell.index}: propagated output {layer_sizes[cell.output_layer]} "
                f"!= expected {out_size}")
        params = sum(_layer_params(l) for l in cell.layers)
        macs = sum(_layer_macs(l, layer_sizes[l.id]) for l in cell.layers)
        per_cell.append(CellCost(cell.index, params, macs))

    last_size = sizes[-1][1] if ir.cells else (height, width)
    head_params = _layer_params(ir.head)
    head_macs = _layer_macs(ir.head, last_size)
    per_cell.append(CellCost("head", head_params, head_macs))

    return CostReport(
        total_params=sum(c.params for c in per_cell),
        total_macs=sum(c.macs for c in per_cell),
        per_cell=tuple(per_cell),
    )


def count_params(ir: ArchitectureIR) -> CostReport:
    return _cost(ir, ir.input_shape)


def count_mmacs(ir: ArchitectureIR,
                input_shape: Optional[tuple[int, int, int]] = None) -> CostReport:
    return _cost(ir, tuple(input_shape) if input_shape else ir.input_shape)


# ---------------------------------------------------------------------------
# Serialization

def export_ir(ir: ArchitectureIR) -> str:
    """Self-contained JSON document with stable field ordering."""
    return json.dumps(ir.to_dict(), sort_keys=True, separators=(",", ":"))


def import_ir(document: str) -> ArchitectureIR:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise CompileError(f"bad IR document: {exc}") from exc
    if doc.get("version") != IR_FORMAT_VERSION:
        raise CompileError(f"unsupported IR version {doc.get('version')!r}")
    return ArchitectureIR.from_dict(doc)


def ir_digest(ir: ArchitectureIR) -> str:
    return hashlib.sha256(export_ir(ir).encode()).hexdigest()
