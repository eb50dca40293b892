"""Shared test helpers.

`enumerate_valid_genotypes` is an independent brute-force oracle: it builds
genotypes node by node from the raw variable domains and applies the
constraints directly, with no counting shortcuts, no reachability lookahead
and no reuse of the package's cardinality logic.
"""

from __future__ import annotations

from typing import Iterator

import pytest

from segnas.space import (
    BlockType,
    ChannelMove,
    Genotype,
    NodeGene,
    SpaceConfig,
    SpaceMode,
)

_DELTA = {ChannelMove.DOWN: +1, ChannelMove.SAME: 0, ChannelMove.UP: -1}


def _move_domain(cfg: SpaceConfig, idx: int):
    if cfg.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
        return [cfg.reference_topology.nodes[idx - 1].channel_move]
    return [ChannelMove.DOWN, ChannelMove.SAME, ChannelMove.UP]


def _block_domain(cfg: SpaceConfig, idx: int):
    if cfg.mode in (SpaceMode.MACRO, SpaceMode.BILEVEL_TOPOLOGY):
        return [BlockType.VGG]
    if cfg.mode is SpaceMode.BILEVEL_CELL:
        return [cfg.reference_topology.nodes[idx - 1].block_type]
    return list(cfg.block_pool)


def _conv_domain(cfg: SpaceConfig, idx: int):
    if cfg.mode in (SpaceMode.MACRO, SpaceMode.BILEVEL_TOPOLOGY):
        return [min(cfg.conv_sizes)]
    return list(cfg.conv_sizes)


def _skip_domain(cfg: SpaceConfig, idx: int, levels: list[int], level: int):
    if cfg.mode in (SpaceMode.MICRO, SpaceMode.BILEVEL_CELL):
        return [cfg.reference_topology.nodes[idx - 1].skip_source]
    return [None] + [j for j in range(1, idx) if levels[j - 1] == level]


def enumerate_valid_genotypes(cfg: SpaceConfig) -> Iterator[Genotype]:
    nodes: list[NodeGene] = []
    levels: list[int] = []

    def recurse(idx: int, prev_level: int) -> Iterator[Genotype]:
        if idx > cfg.num_nodes:
            if not cfg.require_full_resolution_output or prev_level == 0:
                yield Genotype(tuple(nodes))
            return
        for move in _move_domain(cfg, idx):
            level = prev_level + _DELTA[move]
            if level < 0 or level > cfg.max_levels:
                continue
            for skip in _skip_domain(cfg, idx, levels, level):
                for block in _block_domain(cfg, idx):
                    for conv in _conv_domain(cfg, idx):
                        nodes.append(NodeGene(move, block, conv, skip))
                        levels.append(level)
                        yield from recurse(idx + 1, level)
                        nodes.pop()
                        levels.pop()

    yield from recurse(1, 0)


def count_valid_genotypes(cfg: SpaceConfig) -> int:
    return sum(1 for _ in enumerate_valid_genotypes(cfg))


@pytest.fixture
def default_config() -> SpaceConfig:
    return SpaceConfig()


@pytest.fixture
def small_config() -> SpaceConfig:
    return SpaceConfig(num_nodes=3, conv_sizes=(3, 5))
