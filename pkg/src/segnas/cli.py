"""Operator command line: count, sample, compile, search, score, stats."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click

from . import __version__
from .compiler import (
    CompileError,
    compile_architecture,
    count_mmacs,
    export_ir,
)
from .engine import (
    SearchTrace,
    bilevel_search,
    local_search,
    random_search,
    read_events,
)
from .evaluation import (
    EvaluationCache,
    ExternalEvaluator,
    SurrogateConfig,
    SurrogateEvaluator,
    TrainConfig,
    WorkerClient,
    WorkerError,
    open_transport,
)
from .metrics import (
    DegenerateTestError,
    MetricError,
    UndefinedMetricError,
    dsc,
    friedman_test,
    hd95,
    load_mask,
    surface_dice,
    wilcoxon_signed_rank,
)
from .space import (
    SpaceConfig,
    SpaceError,
    SpaceMode,
    canonical_unet,
    cardinality,
    config_digest,
    config_from_dict,
    config_to_dict,
    genotype_from_dict,
    genotype_to_dict,
    random_genotype,
    validate,
)

EXIT_CONFIG_ERROR = 2
EXIT_WORKER_ERROR = 3
EXIT_METRIC_UNDEFINED = 4


def _fail(code: int, kind: str, message: str):
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    sys.exit(code)


def _load_space(config_path: str | None) -> SpaceConfig:
    if config_path is None:
        return SpaceConfig()
    try:
        return config_from_dict(json.loads(Path(config_path).read_text()))
    except (OSError, json.JSONDecodeError, SpaceError) as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", f"cannot load space config: {exc}")


def _load_genotype(path: str):
    try:
        return genotype_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, SpaceError) as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", f"cannot load genotype: {exc}")


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
        _fail(EXIT_CONFIG_ERROR, "config-error",
              f"--input-shape must be CxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


def _manifest(command: str, params: dict, seed: int | None, out_dir: str | None) -> dict:
    manifest = {
        "command": command,
        "params": params,
        "seed": seed,
        "output_dir": out_dir,
        "engine_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    stable = {k: v for k, v in manifest.items() if k != "created"}
    digest = hashlib.sha256(
        json.dumps(stable, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    manifest["manifest_digest"] = digest
    return manifest


@click.group()
@click.version_option(__version__)
def main():
    """Architecture search engine for encoder-decoder segmentation networks."""


# ---------------------------------------------------------------------------

@main.command("count")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Space config JSON (defaults to the built-in configuration).")
def cmd_count(config_path):
    """Print the exact size of the search space with the config echoed."""
    space = _load_space(config_path)
    try:
        total = cardinality(space)
    except SpaceError as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", str(exc))
    echo = config_to_dict(space)
    echo.pop("reference_topology", None)
    click.echo(json.dumps({
        "cardinality": str(total),
        "cardinality_scientific": f"{float(total):.3e}" if total else "0",
        "config": echo,
        "config_digest": config_digest(space),
    }, indent=2))


@main.command("sample")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_sample(config_path, seed, count, out_dir):
    """Sample valid genotypes and write them as JSON files."""
    space = _load_space(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest("sample", {"config": config_path, "count": count}, seed, out_dir)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    try:
        for i in range(count):
            genotype = random_genotype(space, seed + i)
            doc = genotype_to_dict(genotype, space)
            doc["manifest_digest"] = manifest["manifest_digest"]
            (out / f"genotype_{seed + i}.json").write_text(json.dumps(doc, indent=2) + "\n")
    except SpaceError as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", str(exc))
    click.echo(f"wrote {count} genotype(s) to {out}")


@main.command("compile")
@click.argument("genotype_path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--input-shape", default="1x128x128", show_default=True)
@click.option("--classes", type=int, default=2, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the IR document here (default: print a summary only).")
@click.option("--stats", is_flag=True, help="Print the parameter / MMAC report.")
def cmd_compile(genotype_path, config_path, input_shape, classes, out_path, stats):
    """Compile a genotype into the layer-level architecture graph."""
    space = _load_space(config_path)
    genotype = _load_genotype(genotype_path)
    shape = _parse_shape(input_shape)
    try:
        ir = compile_architecture(genotype, space, shape, classes)
    except CompileError as exc:
        _fail(EXIT_CONFIG_ERROR, "compile-error", str(exc))
    if out_path:
        Path(out_path).write_text(export_ir(ir) + "\n")
        click.echo(f"wrote IR to {out_path}")
    report = count_mmacs(ir)
    summary = {
        "cells": len(ir.cells),
        "levels": [c.level for c in ir.cells],
        "total_params": report.total_params,
        "total_mmacs": round(report.total_mmacs, 3),
    }
    if stats:
        summary["per_cell"] = [
            {"cell": c.cell, "params": c.params, "mmacs": round(c.macs / 1e6, 3)}
            for c in report.per_cell
        ]
    click.echo(json.dumps(summary, indent=2))


# ---------------------------------------------------------------------------

_SPACE_MODES = {
    "mb": SpaceMode.MIXED_BLOCK,
    "macro": SpaceMode.MACRO,
    "micro": SpaceMode.MICRO,
    "bilevel": SpaceMode.BILEVEL_TOPOLOGY,
}


@main.command("search")
@click.option("--space", "space_kind", type=click.Choice(list(_SPACE_MODES)), default="mb",
              show_default=True)
@click.option("--algo", type=click.Choice(["local", "random"]), default="local",
              show_default=True)
@click.option("--budget", type=int, default=150, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--evaluator", "evaluator_spec", default="surrogate", show_default=True,
              help="'surrogate' or 'external:<endpoint>' (tcp://host:port or a command).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--reference-topology", "reference_path", type=click.Path(exists=True),
              default=None, help="Reference genotype for micro mode.")
@click.option("--stage-split", type=float, default=0.5, show_default=True)
@click.option("--surrogate-seed", type=int, default=0, show_default=True)
@click.option("--surrogate-noise", type=float, default=0.0, show_default=True)
@click.option("--surrogate-interaction", type=float, default=0.0, show_default=True)
@click.option("--train-config", "train_config_path", type=click.Path(exists=True),
              default=None, help="Train config JSON for external evaluation.")
@click.option("--input-shape", default="1x128x128", show_default=True)
@click.option("--classes", type=int, default=2, show_default=True)
@click.option("--resume", is_flag=True, help="Continue from the event log in --out.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def cmd_search(space_kind, algo, budget, seed, evaluator_spec, config_path,
               reference_path, stage_split, surrogate_seed, surrogate_noise,
               surrogate_interaction, train_config_path, input_shape, classes,
               resume, out_dir):
    """Run a budgeted architecture search and write the full trace."""
    base = _load_space(config_path)
    mode = _SPACE_MODES[space_kind]
    reference = None
    if mode is SpaceMode.MICRO:
        if reference_path:
            reference = _load_genotype(reference_path)
        else:
            try:
                reference = canonical_unet(base)
            except SpaceError as exc:
                _fail(EXIT_CONFIG_ERROR, "config-error", str(exc))
            click.echo("micro mode: no --reference-topology given, "
                       "using the canonical encoder-decoder fixture")
    try:
        space = replace(base, mode=mode, reference_topology=reference)
    except SpaceError as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", str(exc))
    if mode is SpaceMode.BILEVEL_TOPOLOGY and algo != "local":
        _fail(EXIT_CONFIG_ERROR, "config-error", "bilevel space requires --algo local")

    shape = _parse_shape(input_shape)
    client = None
    if evaluator_spec == "surrogate":
        surrogate = SurrogateConfig(table_seed=surrogate_seed,
                                    noise_amplitude=surrogate_noise,
                                    interaction_strength=surrogate_interaction)
        evaluator = SurrogateEvaluator(surrogate, rng_seed=seed)
    elif evaluator_spec.startswith("external:"):
        endpoint = evaluator_spec[len("external:"):]
        train_config = TrainConfig()
        if train_config_path:
            try:
                raw = json.loads(Path(train_config_path).read_text())
                aug = raw.pop("augment", {})
                raw.update({f"augment_{k}": v for k, v in aug.items()})
                train_config = TrainConfig(**raw)
            except (OSError, json.JSONDecodeError, TypeError) as exc:
                _fail(EXIT_CONFIG_ERROR, "config-error", f"bad train config: {exc}")
        cache_dir = os.environ.get("SEGNAS_CACHE_DIR")
        cache = EvaluationCache(Path(cache_dir)) if cache_dir else None
        try:
            client = WorkerClient(open_transport(endpoint))
            client.handshake()
        except WorkerError as exc:
            _fail(EXIT_WORKER_ERROR, "worker-error", str(exc))
        evaluator = ExternalEvaluator(client, space, train_config, shape, classes,
                                      cache=cache)
    else:
        _fail(EXIT_CONFIG_ERROR, "config-error",
              f"--evaluator must be 'surrogate' or 'external:<endpoint>', "
              f"got {evaluator_spec!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest("search", {
        "space": space_kind, "algo": algo, "budget": budget,
        "evaluator": evaluator_spec, "config": config_path,
        "config_digest": config_digest(space), "stage_split": stage_split,
        "surrogate_seed": surrogate_seed, "surrogate_noise": surrogate_noise,
        "surrogate_interaction": surrogate_interaction,
        "input_shape": list(shape), "classes": classes,
    }, seed, out_dir)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    replay = None
    if resume:
        log_path = out / "events.ndjson"
        if log_path.exists():
            # error events (score None) are dropped so they get retried live
            replay = [e for e in read_events(log_path) if e.score is not None]

    try:
        if mode is SpaceMode.BILEVEL_TOPOLOGY:
            trace = bilevel_search(space, evaluator, budget, seed, stage_split)
        elif algo == "local":
            trace = local_search(space, evaluator, budget, seed, replay_events=replay)
        else:
            trace = random_search(space, evaluator, budget, seed, replay_events=replay)
    except SpaceError as exc:
        _fail(EXIT_CONFIG_ERROR, "config-error", str(exc))
    finally:
        if client is not None:
            client.close()

    from .engine import write_trace
    write_trace(trace, out)

    best = trace.best_genotype
    if best is not None:
        best_dir = out / "best"
        best_dir.mkdir(exist_ok=True)
        doc = genotype_to_dict(best, space)
        doc["manifest_digest"] = manifest["manifest_digest"]
        (best_dir / "genotype.json").write_text(json.dumps(doc, indent=2) + "\n")
        try:
            ir = compile_architecture(best, space, shape, classes)
            (best_dir / "ir.json").write_text(export_ir(ir) + "\n")
            report = count_mmacs(ir)
            (best_dir / "cost.json").write_text(json.dumps({
                "manifest_digest": manifest["manifest_digest"],
                **report.to_dict(),
            }, indent=2) + "\n")
        except CompileError as exc:
            click.echo(f"warning: could not compile best genotype: {exc}", err=True)

    # machine-readable search curve: step vs. running best score
    with (out / "series.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "score", "best_score"])
        running = float("-inf")
        for event in trace.events:
            if event.score is None:
                continue
            running = max(running, event.score)
            writer.writerow([event.step, event.score, running])

    click.echo(json.dumps({
        "status": trace.status,
        "budget_used": trace.budget_used,
        "best_score": trace.best_score,
        "out": str(out),
    }, indent=2))
    if trace.status == "error":
        _fail(EXIT_WORKER_ERROR, "worker-error",
              "search aborted on evaluator failure; trace preserved")


# ---------------------------------------------------------------------------

@main.command("score")
@click.argument("pred_path", type=click.Path(exists=True))
@click.argument("gt_path", type=click.Path(exists=True))
@click.option("--class-id", type=int, default=1, show_default=True)
@click.option("--tolerance", type=float, default=2.0, show_default=True,
              help="Surface-Dice tolerance in physical units.")
def cmd_score(pred_path, gt_path, class_id, tolerance):
    """Compute DSC / HD95 / surface Dice between two mask files."""
    try:
        pred = load_mask(pred_path)
        gt = load_mask(gt_path)
        result = {
            "dsc": dsc(pred, gt, class_id),
            "hd95": hd95(pred, gt, class_id),
            "surface_dice": surface_dice(pred, gt, class_id, tolerance),
            "class_id": class_id,
            "tolerance": tolerance,
        }
    except UndefinedMetricError as exc:
        _fail(EXIT_METRIC_UNDEFINED, "metric-undefined", str(exc))
    except MetricError as exc:
        _fail(EXIT_CONFIG_ERROR, "input-error", str(exc))
    click.echo(json.dumps(result, indent=2))


@main.command("stats")
@click.argument("table_path", type=click.Path(exists=True))
def cmd_stats(table_path):
    """Friedman test plus pairwise Wilcoxon post-hoc on a score table CSV.

    First row: model names. Each following row: one (fold, seed) block.
    """
    try:
        with open(table_path, newline="") as fh:
            rows = list(csv.reader(fh))
        names = [c.strip() for c in rows[0]]
        table = [[float(v) for v in row] for row in rows[1:] if row]
    except (OSError, ValueError, IndexError) as exc:
        _fail(EXIT_CONFIG_ERROR, "input-error", f"bad score table: {exc}")
    import numpy as np
    scores = np.asarray(table, dtype=float)
    if scores.ndim != 2 or scores.shape[1] != len(names):
        _fail(EXIT_CONFIG_ERROR, "input-error", "score table is not rectangular")
    try:
        fr = friedman_test(scores)
    except DegenerateTestError as exc:
        _fail(EXIT_CONFIG_ERROR, "input-error", str(exc))
    pairwise = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            try:
                w = wilcoxon_signed_rank(scores[:, i], scores[:, j])
                pairwise.append({
                    "a": names[i], "b": names[j],
                    "statistic": w.statistic, "p_value": w.p_value,
                    "n": w.n, "method": w.method,
                })
            except DegenerateTestError as exc:
                pairwise.append({"a": names[i], "b": names[j], "error": str(exc)})
    click.echo(json.dumps({
        "friedman": {
            "statistic": fr.statistic,
            "degrees_of_freedom": fr.degrees_of_freedom,
            "p_value": fr.p_value,
        },
        "pairwise_wilcoxon": pairwise,
    }, indent=2))


if __name__ == "__main__":
    main()
