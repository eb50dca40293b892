import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from segnas.cli import main
from segnas.metrics import LabelMask, write_mask
from segnas.space import (
    SpaceConfig,
    canonical_unet,
    cardinality,
    config_to_dict,
    genotype_to_dict,
)

ECHO_WORKER = Path(__file__).parent / "echo_worker.py"


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, **kw):
    cfg = SpaceConfig(**kw)
    path = tmp_path / "space.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    return path, cfg


def write_canonical_genotype(tmp_path):
    cfg = SpaceConfig()
    path = tmp_path / "genotype.json"
    path.write_text(json.dumps(genotype_to_dict(canonical_unet(cfg), cfg)))
    return path


class TestCount:
    def test_default_config(self, runner):
        result = runner.invoke(main, ["count"])
        assert result.exit_code == 0
        doc = json.loads(result.output)
        assert int(doc["cardinality"]) == cardinality(SpaceConfig())
        assert doc["config"]["num_nodes"] == 10
        assert "e+18" in doc["cardinality_scientific"]

    def test_custom_config(self, runner, tmp_path):
        path, cfg = write_config(tmp_path, num_nodes=3, conv_sizes=(3, 5))
        result = runner.invoke(main, ["count", "--config", str(path)])
        assert result.exit_code == 0
        assert int(json.loads(result.output)["cardinality"]) == cardinality(cfg)

    def test_bad_config_exits_2(self, runner, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        result = runner.invoke(main, ["count", "--config", str(path)])
        assert result.exit_code == 2


class TestSample:
    def test_writes_valid_genotypes_and_manifest(self, runner, tmp_path):
        out = tmp_path / "samples"
        result = runner.invoke(main, ["sample", "--seed", "5", "--count", "3",
                                      "--out", str(out)])
        assert result.exit_code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        files = sorted(out.glob("genotype_*.json"))
        assert [f.name for f in files] == [f"genotype_{s}.json" for s in (5, 6, 7)]
        from segnas.space import genotype_from_dict, validate
        for f in files:
            doc = json.loads(f.read_text())
            assert doc["manifest_digest"] == manifest["manifest_digest"]
            assert validate(genotype_from_dict(doc), SpaceConfig()).ok

    def test_deterministic_across_invocations(self, runner, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            runner.invoke(main, ["sample", "--seed", "1", "--out", str(out)])
        da = json.loads((a / "genotype_1.json").read_text())
        db = json.loads((b / "genotype_1.json").read_text())
        assert da["nodes"] == db["nodes"]


class TestCompile:
    def test_summary_and_ir_output(self, runner, tmp_path):
        genotype = write_canonical_genotype(tmp_path)
        ir_path = tmp_path / "ir.json"
        result = runner.invoke(main, ["compile", str(genotype),
                                      "--out", str(ir_path), "--stats"])
        assert result.exit_code == 0
        summary = json.loads(result.output.split("\n", 1)[1])
        assert summary["cells"] == 10
        assert summary["total_params"] == 7_879_874
        assert len(summary["per_cell"]) == 12  # stem + 10 cells + head
        from segnas.compiler import import_ir
        ir = import_ir(ir_path.read_text())
        assert len(ir.cells) == 10

    def test_bad_shape_exits_2(self, runner, tmp_path):
        genotype = write_canonical_genotype(tmp_path)
        result = runner.invoke(main, ["compile", str(genotype),
                                      "--input-shape", "128x128"])
        assert result.exit_code == 2

    def test_indivisible_shape_exits_2(self, runner, tmp_path):
        genotype = write_canonical_genotype(tmp_path)
        result = runner.invoke(main, ["compile", str(genotype),
                                      "--input-shape", "1x120x128"])
        assert result.exit_code == 2


class TestSearch:
    def test_surrogate_search_outputs(self, runner, tmp_path):
        path, _ = write_config(tmp_path, num_nodes=3)
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "search", "--config", str(path), "--budget", "30", "--seed", "4",
            "--input-shape", "1x16x16", "--out", str(out)])
        assert result.exit_code == 0, result.output
        status = json.loads(result.output)
        assert status["status"] in ("local_optimum", "budget_exhausted")
        assert status["budget_used"] <= 30
        for name in ("manifest.json", "events.ndjson", "summary.json",
                     "series.csv", "best/genotype.json", "best/ir.json",
                     "best/cost.json"):
            assert (out / name).exists(), name
        with (out / "series.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "score", "best_score"]
        best_col = [float(r[2]) for r in rows[1:]]
        assert best_col == sorted(best_col)
        assert best_col[-1] == pytest.approx(status["best_score"])

    def test_deterministic_event_logs(self, runner, tmp_path):
        path, _ = write_config(tmp_path, num_nodes=3)
        logs = []
        for name in ("x", "y"):
            out = tmp_path / name
            result = runner.invoke(main, [
                "search", "--config", str(path), "--budget", "20", "--seed", "8",
                "--input-shape", "1x16x16", "--out", str(out)])
            assert result.exit_code == 0
            logs.append((out / "events.ndjson").read_bytes())
        assert logs[0] == logs[1]

    def test_resume_reproduces_uninterrupted_run(self, runner, tmp_path):
        path, _ = write_config(tmp_path, num_nodes=3)
        full_out, resumed_out = tmp_path / "full", tmp_path / "resumed"
        args = ["search", "--config", str(path), "--budget", "40", "--seed", "2",
                "--input-shape", "1x16x16"]
        assert runner.invoke(main, args + ["--out", str(full_out)]).exit_code == 0
        full_events = (full_out / "events.ndjson").read_text().splitlines()
        resumed_out.mkdir()
        (resumed_out / "events.ndjson").write_text(
            "\n".join(full_events[: len(full_events) // 2]) + "\n")
        assert runner.invoke(
            main, args + ["--resume", "--out", str(resumed_out)]).exit_code == 0
        assert (resumed_out / "events.ndjson").read_text().splitlines() == full_events

    def test_micro_mode_defaults_to_canonical_reference(self, runner, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "search", "--space", "micro", "--budget", "10", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "canonical" in result.output

    def test_bilevel_search_runs(self, runner, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "search", "--space", "bilevel", "--budget", "20", "--out", str(out)])
        assert result.exit_code == 0, result.output
        events = [json.loads(l) for l in
                  (out / "events.ndjson").read_text().splitlines()]
        assert {e["stage"] for e in events} <= {1, 2}

    def test_bilevel_rejects_random_algo(self, runner, tmp_path):
        result = runner.invoke(main, [
            "search", "--space", "bilevel", "--algo", "random",
            "--budget", "10", "--out", str(tmp_path / "run")])
        assert result.exit_code == 2

    def test_unknown_evaluator_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, [
            "search", "--evaluator", "psychic", "--budget", "5",
            "--out", str(tmp_path / "run")])
        assert result.exit_code == 2

    def test_unreachable_worker_exits_3(self, runner, tmp_path):
        result = runner.invoke(main, [
            "search", "--evaluator", "external:tcp://127.0.0.1:1",
            "--budget", "5", "--out", str(tmp_path / "run")])
        assert result.exit_code == 3

    def test_external_worker_end_to_end(self, runner, tmp_path):
        path, _ = write_config(tmp_path, num_nodes=3)
        train = tmp_path / "train.json"
        train.write_text(json.dumps({"epochs": 5, "folds": 2, "seeds": 1,
                                     "input_size": 16}))
        out = tmp_path / "run"
        endpoint = f"external:{sys.executable} {ECHO_WORKER} ok"
        result = runner.invoke(main, [
            "search", "--config", str(path), "--evaluator", endpoint,
            "--train-config", str(train), "--budget", "8",
            "--input-shape", "1x16x16", "--out", str(out)])
        assert result.exit_code == 0, result.output
        status = json.loads(result.output)
        assert status["budget_used"] <= 8
        assert 0.0 < status["best_score"] <= 1.0

    def test_failing_worker_preserves_trace_and_exits_3(self, runner, tmp_path):
        path, _ = write_config(tmp_path, num_nodes=3)
        out = tmp_path / "run"
        endpoint = f"external:{sys.executable} {ECHO_WORKER} fail"
        result = runner.invoke(main, [
            "search", "--config", str(path), "--evaluator", endpoint,
            "--budget", "8", "--input-shape", "1x16x16", "--out", str(out)])
        assert result.exit_code == 3
        events = (out / "events.ndjson").read_text().splitlines()
        assert events  # the failed attempt is on record
        last = json.loads(events[-1])
        assert last["score"] is None and last["error"]


class TestScore:
    def _write(self, tmp_path, name, labels):
        path = tmp_path / name
        write_mask(LabelMask(np.asarray(labels, dtype=np.int32)), path)
        return path

    def test_scores_two_masks(self, runner, tmp_path):
        pred = self._write(tmp_path, "pred.json", [[0, 1], [1, 1]])
        gt = self._write(tmp_path, "gt.json", [[0, 1], [1, 0]])
        result = runner.invoke(main, ["score", str(pred), str(gt)])
        assert result.exit_code == 0
        doc = json.loads(result.output)
        assert doc["dsc"] == pytest.approx(0.8)
        assert doc["hd95"] >= 0.0
        assert 0.0 <= doc["surface_dice"] <= 1.0

    def test_empty_region_exits_4(self, runner, tmp_path):
        pred = self._write(tmp_path, "pred.json", [[0, 0], [0, 0]])
        gt = self._write(tmp_path, "gt.json", [[0, 1], [1, 0]])
        result = runner.invoke(main, ["score", str(pred), str(gt)])
        assert result.exit_code == 4

    def test_shape_mismatch_exits_2(self, runner, tmp_path):
        pred = self._write(tmp_path, "pred.json", [[1]])
        gt = self._write(tmp_path, "gt.json", [[0, 1], [1, 0]])
        result = runner.invoke(main, ["score", str(pred), str(gt)])
        assert result.exit_code == 2

    def test_pgm_input(self, runner, tmp_path):
        pgm = tmp_path / "m.pgm"
        pgm.write_bytes(b"P5\n2 2\n255\n\x00\x01\x01\x00")
        result = runner.invoke(main, ["score", str(pgm), str(pgm)])
        assert result.exit_code == 0
        assert json.loads(result.output)["dsc"] == 1.0


class TestStats:
    def _table(self, tmp_path, rows, names=("a", "b", "c")):
        path = tmp_path / "scores.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            writer.writerows(rows)
        return path

    def test_friedman_and_pairwise(self, runner, tmp_path):
        rng = np.random.default_rng(0)
        rows = rng.random((8, 3)).tolist()
        result = runner.invoke(main, ["stats", str(self._table(tmp_path, rows))])
        assert result.exit_code == 0
        doc = json.loads(result.output)
        assert doc["friedman"]["degrees_of_freedom"] == 2
        assert len(doc["pairwise_wilcoxon"]) == 3
        assert all(0.0 < p["p_value"] <= 1.0 for p in doc["pairwise_wilcoxon"])

    def test_degenerate_pair_reported_not_fatal(self, runner, tmp_path):
        rows = [[i, i, i + 1] for i in range(8)]  # a == b everywhere
        result = runner.invoke(main, ["stats", str(self._table(tmp_path, rows))])
        assert result.exit_code == 0
        doc = json.loads(result.output)
        ab = next(p for p in doc["pairwise_wilcoxon"] if p["a"] == "a" and p["b"] == "b")
        assert "error" in ab

    def test_non_numeric_table_exits_2(self, runner, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("a,b\n1,x\n")
        result = runner.invoke(main, ["stats", str(path)])
        assert result.exit_code == 2
