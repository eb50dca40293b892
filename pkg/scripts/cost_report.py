#!/usr/bin/env python3
"""Parameter / MMAC report for the canonical network and random samples.

Prints the closed-form cost of the canonical encoder-decoder fixture at a
chosen input size and base width, followed by the cost distribution over
randomly sampled genotypes, split per block type.

Usage:
    python3 scripts/cost_report.py --input-size 128 --base-channels 32 --samples 50
"""

import statistics

import click

from segnas.compiler import compile_architecture, count_mmacs
from segnas.space import BlockType, SpaceConfig, canonical_unet, random_genotype


@click.command()
@click.option("--input-size", type=int, default=128, show_default=True)
@click.option("--base-channels", type=int, default=32, show_default=True)
@click.option("--classes", type=int, default=2, show_default=True)
@click.option("--samples", type=int, default=50, show_default=True)
def main(input_size, base_channels, classes, samples):
    shape = (1, input_size, input_size)
    cfg = SpaceConfig(base_channels=base_channels)

    ir = compile_architecture(canonical_unet(cfg), cfg, shape, classes)
    report = count_mmacs(ir)
    click.echo(f"canonical encoder-decoder @ {input_size}x{input_size}, "
               f"base {base_channels}:")
    click.echo(f"  params = {report.total_params:,}")
    click.echo(f"  mmacs  = {report.total_mmacs:,.1f}")
    click.echo("  per cell:")
    for cell in report.per_cell:
        click.echo(f"    {str(cell.cell):>5}  params {cell.params:>12,}  "
                   f"mmacs {cell.macs / 1e6:>10.1f}")

    click.echo(f"\nrandom genotypes ({samples} per block pool):")
    pools = [("mixed", tuple(BlockType))] + [(b.value, (b,)) for b in BlockType]
    for label, pool in pools:
        space = SpaceConfig(base_channels=base_channels, block_pool=pool)
        params, mmacs = [], []
        for seed in range(samples):
            g = random_genotype(space, seed)
            r = count_mmacs(compile_architecture(g, space, shape, classes))
            params.append(r.total_params)
            mmacs.append(r.total_mmacs)
        click.echo(f"  {label:<10} params {statistics.mean(params):>14,.0f} "
                   f"(min {min(params):,}, max {max(params):,})  "
                   f"mmacs {statistics.mean(mmacs):>10.1f}")


if __name__ == "__main__":
    main()
