"""Genotype encoding of encoder-decoder segmentation networks.

A network is a chain of cells. Each cell is described by four categorical
genes: a channel move (down/same/up relative to the predecessor), a block
type, a convolution kernel size, and an optional skip-connection source.
Resolution levels follow the channel moves: a down move halves the spatial
resolution and doubles the channels, an up move does the opposite.

Node indices are 1-based everywhere (genotype files, skip sources, error
messages).
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

GENOTYPE_FORMAT_VERSION = 1


class ChannelMove(enum.Enum):
    DOWN = "down"
    SAME = "same"
    UP = "up"


class BlockType(enum.Enum):
    VGG = "vgg"
    RESIDUAL = "residual"
    DENSE = "dense"
    INCEPTION = "inception"


class SpaceMode(enum.Enum):
    MIXED_BLOCK = "mixed_block"
    MACRO = "macro"
    MICRO = "micro"
    BILEVEL_TOPOLOGY = "bilevel_topology"
    BILEVEL_CELL = "bilevel_cell"


# Level delta implied by each channel move.
_MOVE_DELTA = {ChannelMove.DOWN: +1, ChannelMove.SAME: 0, ChannelMove.UP: -1}

_BLOCK_ORDER = [BlockType.VGG, BlockType.RESIDUAL, BlockType.DENSE, BlockType.INCEPTION]


class SpaceError(Exception):
    """Base class for search-space errors."""


class SpaceConfigError(SpaceError):
    """The space configuration itself is inconsistent."""


class GenotypeStructureError(SpaceError):
    """Genotype is malformed (wrong length, out-of-range category).

    Distinct from a constraint violation on a well-formed genotype.
    """


class UnsatisfiableSpaceError(SpaceError):
    """No valid genotype exists under the configuration."""


class UnsupportedFixtureError(SpaceError):
    """A built-in fixture is not defined for this configuration."""


@dataclass(frozen=True)
class NodeGene:
    channel_move: ChannelMove
    block_type: BlockType
    conv_size: int
    skip_source: Optional[int] = None  # 1-based index of an earlier node


@dataclass(frozen=True)
class Genotype:
    nodes: tuple[NodeGene, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    def replace_gene(self, node_index: int, **changes) -> "Genotype":
        """Return a copy with one node's gene(s) substituted. 1-based index."""
        nodes = list(self.nodes)
        nodes[node_index - 1] = replace(nodes[node_index - 1], **changes)
        return Genotype(tuple(nodes))


@dataclass(frozen=True)
class SpaceConfig:
    num_nodes: int = 10
    base_channels: int = 32
    max_levels: int = 4
    conv_sizes: tuple[int, ...] = (3, 5, 7)
    block_pool: tuple[BlockType, ...] = tuple(_BLOCK_ORDER)
    require_full_resolution_output: bool = True
    mode: SpaceMode = SpaceMode.MIXED_BLOCK
    reference_topology: Optional[Genotype] = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise SpaceConfigError("num_nodes must be positive")
        if self.base_channels < 1:
            raise SpaceConfigError("base_channels must be positive")
        if self.max_levels < 0:
            raise SpaceConfigError("max_levels must be non-negative")
        if not self.conv_sizes:
            raise SpaceConfigError("conv_sizes must be non-empty")
        if any(k < 1 or k % 2 == 0 for k in self.conv_sizes):
            raise SpaceConfigError("conv_sizes must be odd positive integers")
        if not self.block_pool:
            raise SpaceConfigError("block_pool must be non-empty")
        object.__setattr__(self, "conv_sizes", tuple(sorted(set(self.conv_sizes))))
        object.__setattr__(
            self, "block_pool",
            tuple(b for b in _BLOCK_ORDER if b in set(self.block_pool)),
        )
        if self.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
            if self.reference_topology is None:
                raise SpaceConfigError(f"mode {self.mode.value} requires a reference_topology")
            if len(self.reference_topology) != self.num_nodes:
                raise SpaceConfigError("reference_topology length does not match num_nodes")
        if self.mode in (SpaceMode.MACRO, SpaceMode.BILEVEL_TOPOLOGY):
            if BlockType.VGG not in self.block_pool:
                raise SpaceConfigError(f"mode {self.mode.value} requires VGG in the block pool")


# ---------------------------------------------------------------------------
# Level arithmetic

def node_levels(genotype: Genotype) -> list[int]:
    """Resolution level of each node's output, starting from level 0 input.

    Levels are reported even when they violate bounds (validation flags
    those separately).
    """
    levels = []
    level = 0
    for gene in genotype.nodes:
        level += _MOVE_DELTA[gene.channel_move]
        levels.append(level)
    return levels


def node_channels(genotype: Genotype, config: SpaceConfig) -> list[int]:
    """Output channels per node: base_channels * 2**level."""
    return [config.base_channels * (2 ** lv) for lv in node_levels(genotype)]


# ---------------------------------------------------------------------------
# Mode restrictions: per-variable domains

def _channel_domain(config: SpaceConfig, node_index: int) -> list[ChannelMove]:
    if config.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
        return [config.reference_topology.nodes[node_index - 1].channel_move]
    return [ChannelMove.DOWN, ChannelMove.SAME, ChannelMove.UP]


def _block_domain(config: SpaceConfig, node_index: int) -> list[BlockType]:
    if config.mode in (SpaceMode.MACRO, SpaceMode.BILEVEL_TOPOLOGY):
        return [BlockType.VGG]
    if config.mode is SpaceMode.BILEVEL_CELL:
        return [config.reference_topology.nodes[node_index - 1].block_type]
    return list(config.block_pool)


def _conv_domain(config: SpaceConfig, node_index: int) -> list[int]:
    if config.mode in (SpaceMode.MACRO, SpaceMode.BILEVEL_TOPOLOGY):
        return [min(config.conv_sizes)]
    return list(config.conv_sizes)


def _skip_domain(config: SpaceConfig, node_index: int) -> list[Optional[int]]:
    if config.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
        return [config.reference_topology.nodes[node_index - 1].skip_source]
    return [None] + list(range(1, node_index))


# ---------------------------------------------------------------------------
# Validation

@dataclass(frozen=True)
class Violation:
    node: int  # 1-based; 0 for genotype-wide rules
    rule: str
    detail: str


@dataclass(frozen=True)
class Validity:
    ok: bool
    violations: tuple[Violation, ...] = ()


def _check_structure(genotype: Genotype, config: SpaceConfig) -> None:
    if not isinstance(genotype, Genotype):
        raise GenotypeStructureError("not a Genotype")
    if len(genotype) != config.num_nodes:
        raise GenotypeStructureError(
            f"genotype has {len(genotype)} nodes, config requires {config.num_nodes}")
    for idx, gene in enumerate(genotype.nodes, start=1):
        if not isinstance(gene.channel_move, ChannelMove):
            raise GenotypeStructureError(f"node {idx}: bad channel_move {gene.channel_move!r}")
        if not isinstance(gene.block_type, BlockType):
            raise GenotypeStructureError(f"node {idx}: bad block_type {gene.block_type!r}")
        if not isinstance(gene.conv_size, int) or gene.conv_size < 1 or gene.conv_size % 2 == 0:
            raise GenotypeStructureError(f"node {idx}: bad conv_size {gene.conv_size!r}")
        if gene.skip_source is not None:
            if not isinstance(gene.skip_source, int) or not (1 <= gene.skip_source < idx):
                raise GenotypeStructureError(
                    f"node {idx}: skip_source {gene.skip_source!r} must reference an earlier node")


def validate(genotype: Genotype, config: SpaceConfig) -> Validity:
    """Check a structurally well-formed genotype against all space constraints.

    Raises GenotypeStructureError for malformed input; returns a verdict
    listing every violated constraint otherwise.
    """
    _check_structure(genotype, config)
    violations: list[Violation] = []
    levels = node_levels(genotype)

    prev_level = 0
    for idx, gene in enumerate(genotype.nodes, start=1):
        level = levels[idx - 1]
        if gene.channel_move is ChannelMove.UP and prev_level == 0:
            violations.append(Violation(idx, "resolution-floor",
                                        "up move at level 0 would exceed input resolution"))
        if gene.channel_move is ChannelMove.DOWN and prev_level == config.max_levels:
            violations.append(Violation(idx, "resolution-ceiling",
                                        f"down move at level {prev_level} exceeds max_levels"))
        if gene.block_type not in config.block_pool:
            violations.append(Violation(idx, "block-pool",
                                        f"{gene.block_type.value} not in block pool"))
        if gene.conv_size not in config.conv_sizes:
            violations.append(Violation(idx, "conv-size-domain",
                                        f"conv size {gene.conv_size} not in {config.conv_sizes}"))
        if gene.skip_source is not None:
            if levels[gene.skip_source - 1] != level:
                violations.append(Violation(
                    idx, "skip-resolution-mismatch",
                    f"node {gene.skip_source} is at level {levels[gene.skip_source - 1]}, "
                    f"node {idx} at level {level}"))

        # Mode restrictions.
        if gene.channel_move not in _channel_domain(config, idx):
            violations.append(Violation(idx, "mode-channel-fixed",
                                        "channel move is fixed by the search mode"))
        if gene.block_type not in _block_domain(config, idx):
            violations.append(Violation(idx, "mode-block-fixed",
                                        "block type is fixed by the search mode"))
        if gene.conv_size not in _conv_domain(config, idx):
            violations.append(Violation(idx, "mode-conv-fixed",
                                        "conv size is fixed by the search mode"))
        if config.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
            if gene.skip_source != config.reference_topology.nodes[idx - 1].skip_source:
                violations.append(Violation(idx, "mode-skip-fixed",
                                            "skip source is fixed by the search mode"))
        prev_level = level

    if config.require_full_resolution_output and levels[-1] != 0:
        violations.append(Violation(len(genotype), "output-resolution",
                                    f"last node at level {levels[-1]}, must be 0"))

    return Validity(ok=not violations, violations=tuple(violations))


# ---------------------------------------------------------------------------
# Sampling

def _feasible_moves(config: SpaceConfig, node_index: int, prev_level: int) -> list[ChannelMove]:
    """Channel moves at this node that keep a valid completion reachable."""
    remaining = config.num_nodes - node_index
    moves = []
    for move in _channel_domain(config, node_index):
        level = prev_level + _MOVE_DELTA[move]
        if level < 0 or level > config.max_levels:
            continue
        if config.require_full_resolution_output and level > remaining:
            continue
        moves.append(move)
    return moves


def random_genotype(config: SpaceConfig, rng_seed: int) -> Genotype:
    """Sample a valid genotype, uniform per variable given the sampled prefix."""
    rng = random.Random(rng_seed)
    nodes: list[NodeGene] = []
    levels: list[int] = []
    prev_level = 0
    for idx in range(1, config.num_nodes + 1):
        moves = _feasible_moves(config, idx, prev_level)
        if not moves:
            raise UnsatisfiableSpaceError(f"no feasible channel move at node {idx}")
        move = rng.choice(moves)
        level = prev_level + _MOVE_DELTA[move]

        block = rng.choice(_block_domain(config, idx))
        conv = rng.choice(_conv_domain(config, idx))
        skips = [s for s in _skip_domain(config, idx)
                 if s is None or levels[s - 1] == level]
        if not skips:
            raise UnsatisfiableSpaceError(f"no feasible skip source at node {idx}")
        skip = rng.choice(skips)

        nodes.append(NodeGene(move, block, conv, skip))
        levels.append(level)
        prev_level = level
    genotype = Genotype(tuple(nodes))
    verdict = validate(genotype, config)
    if not verdict.ok:  # reference topology can force an invalid sample
        raise UnsatisfiableSpaceError(
            f"sampled genotype violates constraints: {verdict.violations}")
    return genotype


# ---------------------------------------------------------------------------
# Local-search neighborhood

_VARIABLES = ("channel_move", "block_type", "conv_size", "skip_source")


def variable_options(genotype: Genotype, node_index: int, variable: str,
                     config: SpaceConfig) -> list:
    """All values of one variable whose plain substitution keeps the genotype valid.

    Includes the current value. No downstream repair is attempted: a channel
    move that shifts later levels out of bounds, breaks a skip, or moves the
    output off full resolution is simply excluded.
    """
    if variable not in _VARIABLES:
        raise ValueError(f"unknown variable {variable!r}")
    if not (1 <= node_index <= len(genotype)):
        raise ValueError(f"node_index {node_index} out of range")
    if not validate(genotype, config).ok:
        raise ValueError("genotype must be valid")

    if variable == "channel_move":
        domain = _channel_domain(config, node_index)
    elif variable == "block_type":
        domain = _block_domain(config, node_index)
    elif variable == "conv_size":
        domain = _conv_domain(config, node_index)
    else:
        domain = _skip_domain(config, node_index)

    options = []
    for value in domain:
        candidate = genotype.replace_gene(node_index, **{variable: value})
        if validate(candidate, config).ok:
            options.append(value)
    return options


def substitute(genotype: Genotype, node_index: int, variable: str, value) -> Genotype:
    return genotype.replace_gene(node_index, **{variable: value})


# ---------------------------------------------------------------------------
# Cardinality

def cardinality(config: SpaceConfig) -> int:
    """Exact number of valid genotypes, as an arbitrary-precision integer.

    Enumerates channel-move sequences depth-first (pruned by level bounds and
    output-level reachability) and multiplies per-node cell and skip option
    counts along the way.
    """
    block_counts = [len(_block_domain(config, i)) for i in range(1, config.num_nodes + 1)]
    conv_counts = [len(_conv_domain(config, i)) for i in range(1, config.num_nodes + 1)]
    skip_free = config.mode not in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL)

    total = 0

    def descend(idx: int, prev_level: int, levels: list[int], partial: int) -> None:
        nonlocal total
        if idx > config.num_nodes:
            total += partial
            return
        for move in _feasible_moves(config, idx, prev_level):
            level = prev_level + _MOVE_DELTA[move]
            if skip_free:
                same = sum(1 for lv in levels[: idx - 1] if lv == level)
                skip_count = 1 + same
            else:
                skip_count = 1
            factor = block_counts[idx - 1] * conv_counts[idx - 1] * skip_count
            levels.append(level)
            descend(idx + 1, level, levels, partial * factor)
            levels.pop()

    descend(1, 0, [], 1)
    return total


# ---------------------------------------------------------------------------
# Fixtures

def canonical_unet(config: SpaceConfig) -> Genotype:
    """The classic symmetric encoder-decoder shape as a 10-node genotype.

    Level sequence [0,1,2,3,4,3,2,1,0,0], mirror-symmetric skips, VGG blocks
    with 3x3 convolutions throughout.
    """
    if config.num_nodes != 10:
        raise UnsupportedFixtureError("canonical encoder-decoder fixture requires num_nodes=10")
    moves = [ChannelMove.SAME] + [ChannelMove.DOWN] * 4 + [ChannelMove.UP] * 4 + [ChannelMove.SAME]
    skips = {6: 4, 7: 3, 8: 2, 9: 1}
    nodes = [
        NodeGene(moves[i - 1], BlockType.VGG, 3, skips.get(i))
        for i in range(1, 11)
    ]
    return Genotype(tuple(nodes))


# ---------------------------------------------------------------------------
# Serialization

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def node_to_dict(gene: NodeGene) -> dict:
    return {
        "channel_move": gene.channel_move.value,
        "block_type": gene.block_type.value,
        "conv_size": gene.conv_size,
        "skip_source": gene.skip_source,
    }


def node_from_dict(d: dict) -> NodeGene:
    try:
        return NodeGene(
            channel_move=ChannelMove(d["channel_move"]),
            block_type=BlockType(d["block_type"]),
            conv_size=int(d["conv_size"]),
            skip_source=None if d.get("skip_source") is None else int(d["skip_source"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise GenotypeStructureError(f"bad node record: {exc}") from exc


def genotype_to_dict(genotype: Genotype, config: Optional[SpaceConfig] = None) -> dict:
    doc = {
        "version": GENOTYPE_FORMAT_VERSION,
        "config_digest": config_digest(config) if config is not None else None,
        "nodes": [node_to_dict(g) for g in genotype.nodes],
    }
    return doc


def genotype_from_dict(doc: dict) -> Genotype:
    if "nodes" not in doc:
        raise GenotypeStructureError("genotype document missing 'nodes'")
    return Genotype(tuple(node_from_dict(n) for n in doc["nodes"]))


def genotype_digest(genotype: Genotype) -> str:
    payload = _canonical_json([node_to_dict(g) for g in genotype.nodes])
    return hashlib.sha256(payload.encode()).hexdigest()


def config_to_dict(config: SpaceConfig) -> dict:
    return {
        "num_nodes": config.num_nodes,
        "base_channels": config.base_channels,
        "max_levels": config.max_levels,
        "conv_sizes": list(config.conv_sizes),
        "block_pool": [b.value for b in config.block_pool],
        "require_full_resolution_output": config.require_full_resolution_output,
        "mode": config.mode.value,
        "reference_topology": (
            None if config.reference_topology is None
            else [node_to_dict(g) for g in config.reference_topology.nodes]),
    }


def config_from_dict(doc: dict) -> SpaceConfig:
    try:
        ref = doc.get("reference_topology")
        return SpaceConfig(
            num_nodes=int(doc.get("num_nodes", 10)),
            base_channels=int(doc.get("base_channels", 32)),
            max_levels=int(doc.get("max_levels", 4)),
            conv_sizes=tuple(doc.get("conv_sizes", (3, 5))),
            block_pool=tuple(BlockType(b) for b in doc.get(
                "block_pool", [b.value for b in _BLOCK_ORDER])),
            require_full_resolution_output=bool(doc.get("require_full_resolution_output", True)),
            mode=SpaceMode(doc.get("mode", "mixed_block")),
            reference_topology=(
                None if ref is None
                else Genotype(tuple(node_from_dict(n) for n in ref))),
        )
    except (ValueError, TypeError) as exc:
        raise SpaceConfigError(f"bad space config: {exc}") from exc


def config_digest(config: SpaceConfig) -> str:
    return hashlib.sha256(_canonical_json(config_to_dict(config)).encode()).hexdigest()
