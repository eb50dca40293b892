import json
import math
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segnas.compiler import compile_architecture
from segnas.evaluation import (
    Curve,
    EvalJobSpec,
    EvaluationCache,
    EvaluationResult,
    ExternalEvaluator,
    ProtocolError,
    SubprocessTransport,
    SurrogateConfig,
    SurrogateEvaluator,
    TrainConfig,
    WorkerClient,
    WorkerError,
    aggregate_score,
    external_evaluate,
    open_transport,
    surrogate_evaluate,
    surrogate_fitness,
)
from segnas.space import SpaceConfig, canonical_unet, genotype_digest, random_genotype

ECHO_WORKER = Path(__file__).parent / "echo_worker.py"


def worker_client(mode: str = "ok", **kw) -> WorkerClient:
    transport = SubprocessTransport([sys.executable, str(ECHO_WORKER), mode])
    return WorkerClient(transport, heartbeat_timeout=kw.pop("heartbeat_timeout", 10.0), **kw)


def make_job(train_config=None) -> EvalJobSpec:
    cfg = SpaceConfig()
    ir = compile_architecture(canonical_unet(cfg), cfg, (1, 128, 128), 2)
    return EvalJobSpec(ir_document=ir.to_dict(),
                       train_config=train_config or TrainConfig(epochs=10, folds=2, seeds=2))


class TestAggregateScore:
    def test_tail_window_is_last_twenty_percent(self):
        # 10 epochs -> last 2: mean(0.8, 1.0) = 0.9
        curve = [0.1] * 8 + [0.8, 1.0]
        assert aggregate_score([curve]) == pytest.approx(0.9)

    def test_tail_length_rounds_up(self):
        # 5 epochs -> ceil(1.0) = 1 epoch tail
        assert aggregate_score([[0.0, 0.0, 0.0, 0.0, 0.7]]) == pytest.approx(0.7)
        # 6 epochs -> ceil(1.2) = 2 epoch tail
        assert aggregate_score([[0.0] * 4 + [0.6, 0.8]]) == pytest.approx(0.7)

    def test_mean_over_runs(self):
        a = [0.0] * 8 + [0.9, 0.9]
        b = [0.0] * 8 + [0.7, 0.7]
        assert aggregate_score([a, b]) == pytest.approx(0.8)

    def test_permutation_invariance(self):
        curves = [[0.1] * 9 + [v] for v in (0.2, 0.5, 0.9)]
        assert aggregate_score(curves) == pytest.approx(aggregate_score(curves[::-1]))

    def test_single_epoch_curve(self):
        assert aggregate_score([[0.42]]) == pytest.approx(0.42)

    def test_rejects_empty_inputs(self):
        with pytest.raises(ProtocolError):
            aggregate_score([])
        with pytest.raises(ProtocolError):
            aggregate_score([[]])

    def test_rejects_out_of_range_dice(self):
        with pytest.raises(ProtocolError):
            aggregate_score([[0.5, 1.2]])
        with pytest.raises(ProtocolError):
            aggregate_score([[-0.1, 0.5]])

    @given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=30),
                    min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_oracle_agreement(self, curves):
        # independent computation with numpy-free arithmetic
        tails = [sum(c[-math.ceil(0.2 * len(c)):]) / math.ceil(0.2 * len(c)) for c in curves]
        assert aggregate_score(curves) == pytest.approx(sum(tails) / len(tails))


class TestSurrogate:
    def test_deterministic(self):
        cfg = SpaceConfig()
        g = random_genotype(cfg, 3)
        sc = SurrogateConfig(table_seed=5)
        assert surrogate_fitness(g, sc) == surrogate_fitness(g, sc)

    def test_fitness_in_open_unit_interval(self):
        cfg = SpaceConfig()
        sc = SurrogateConfig(table_seed=1)
        for seed in range(50):
            f = surrogate_fitness(random_genotype(cfg, seed), sc)
            assert 0.0 < f < 1.0

    def test_zero_weights_give_half(self):
        cfg = SpaceConfig()
        sc = SurrogateConfig(topology_weight=0.0, cell_weight=0.0)
        assert surrogate_fitness(random_genotype(cfg, 0), sc) == pytest.approx(0.5)

    def test_table_seed_changes_landscape(self):
        cfg = SpaceConfig()
        g = random_genotype(cfg, 9)
        assert surrogate_fitness(g, SurrogateConfig(table_seed=1)) != \
            surrogate_fitness(g, SurrogateConfig(table_seed=2))

    def test_noise_depends_on_rng_seed(self):
        cfg = SpaceConfig()
        g = random_genotype(cfg, 9)
        sc = SurrogateConfig(noise_amplitude=0.5)
        assert surrogate_fitness(g, sc, rng_seed=1) != surrogate_fitness(g, sc, rng_seed=2)
        quiet = SurrogateConfig(noise_amplitude=0.0)
        assert surrogate_fitness(g, quiet, rng_seed=1) == surrogate_fitness(g, quiet, rng_seed=2)

    def test_curve_aggregate_equals_fitness_exactly(self):
        cfg = SpaceConfig()
        for seed in range(10):
            g = random_genotype(cfg, seed)
            sc = SurrogateConfig(table_seed=seed)
            result = surrogate_evaluate(g, sc)
            assert result.status == "ok"
            assert result.aggregate == surrogate_fitness(g, sc)
            assert aggregate_score([c.dice for c in result.curves]) == result.aggregate

    def test_evaluator_digest_tracks_config(self):
        a = SurrogateEvaluator(SurrogateConfig(table_seed=1))
        b = SurrogateEvaluator(SurrogateConfig(table_seed=2))
        assert a.digest() != b.digest()


class TestEvaluationCache:
    def _result(self, digest="d" * 64, aggregate=0.8):
        return EvaluationResult(
            genotype_digest=digest,
            curves=(Curve(0, 0, (0.1, aggregate)),),
            aggregate=aggregate, status="ok")

    def test_miss_then_hit(self, tmp_path):
        cache = EvaluationCache(tmp_path)
        assert cache.lookup("d" * 64, "cfg") is None
        result = self._result()
        cache.store(result, "cfg")
        assert cache.lookup("d" * 64, "cfg") == result

    def test_entries_keyed_by_config(self, tmp_path):
        cache = EvaluationCache(tmp_path)
        cache.store(self._result(aggregate=0.6), "cfg-a")
        assert cache.lookup("d" * 64, "cfg-b") is None

    def test_store_is_idempotent(self, tmp_path):
        cache = EvaluationCache(tmp_path)
        result = self._result()
        cache.store(result, "cfg")
        cache.store(result, "cfg")
        assert cache.lookup("d" * 64, "cfg") == result
        assert len(list(tmp_path.glob("*.json"))) == 1

    def test_corrupt_entry_is_a_miss(self, tmp_path):
        cache = EvaluationCache(tmp_path)
        cache.store(self._result(), "cfg")
        entry = next(tmp_path.glob("*.json"))
        entry.write_text("{broken")
        assert cache.lookup("d" * 64, "cfg") is None

    def test_digest_mismatch_is_a_miss(self, tmp_path):
        cache = EvaluationCache(tmp_path)
        cache.store(self._result(), "cfg")
        entry = next(tmp_path.glob("*.json"))
        doc = json.loads(entry.read_text())
        doc["genotype_digest"] = "e" * 64
        entry.write_text(json.dumps(doc))
        assert cache.lookup("d" * 64, "cfg") is None


class TestWorkerProtocol:
    def test_handshake_and_ping(self):
        client = worker_client()
        try:
            client.handshake()
            client.ping()
        finally:
            client.close()

    def test_successful_evaluation(self):
        client = worker_client()
        job = make_job()
        try:
            result = external_evaluate(job, client)
        finally:
            client.close()
        assert result.status == "ok"
        assert len(result.curves) == 4  # folds * seeds
        assert result.budget_consumed
        # aggregate recomputed locally from the raw curves
        assert result.aggregate == pytest.approx(
            aggregate_score([c.dice for c in result.curves]))

    def test_tolerates_progress_heartbeats(self):
        client = worker_client("slow-ok")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "ok"

    def test_curve_count_mismatch_fails(self):
        client = worker_client("short-curves")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert "curve-count-mismatch" in result.error
        assert result.budget_consumed  # training ran; budget is spent

    def test_out_of_range_dice_fails(self):
        client = worker_client("out-of-range")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert "out-of-range" in result.error

    def test_failure_before_training_does_not_bill_budget(self):
        client = worker_client("fail")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert not result.budget_consumed

    def test_failure_after_training_bills_budget(self):
        client = worker_client("fail-late")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert result.budget_consumed

    def test_version_mismatch_rejected(self):
        client = worker_client("bad-version")
        try:
            with pytest.raises(WorkerError):
                client.handshake()
        finally:
            client.close()

    def test_malformed_line_is_a_worker_error(self):
        client = worker_client("malformed", heartbeat_timeout=2.0)
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert not result.budget_consumed

    def test_wrong_result_id_rejected(self):
        client = worker_client("wrong-id")
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert not result.budget_consumed

    def test_dead_worker_is_not_billed(self):
        transport = SubprocessTransport([sys.executable, "-c", "pass"])
        client = WorkerClient(transport, heartbeat_timeout=5.0)
        try:
            result = external_evaluate(make_job(), client)
        finally:
            client.close()
        assert result.status == "failed"
        assert not result.budget_consumed

    def test_bad_tcp_endpoint_rejected(self):
        with pytest.raises(WorkerError):
            open_transport("tcp://nohost")


class TestExternalEvaluator:
    def test_cache_short_circuits_worker(self, tmp_path):
        space = SpaceConfig()
        train = TrainConfig(epochs=10, folds=2, seeds=2)
        genotype = canonical_unet(space)
        client = worker_client()
        cache = EvaluationCache(tmp_path)
        evaluator = ExternalEvaluator(client, space, train, (1, 128, 128), 2, cache=cache)
        try:
            first = evaluator(genotype)
        finally:
            client.close()
        assert first.status == "ok"
        # worker process is gone; only the cache can answer now
        dead = ExternalEvaluator(
            WorkerClient(SubprocessTransport([sys.executable, "-c", "pass"]),
                         heartbeat_timeout=5.0),
            space, train, (1, 128, 128), 2, cache=cache)
        second = dead(genotype)
        assert second == first

    def test_failed_results_not_cached(self, tmp_path):
        space = SpaceConfig()
        train = TrainConfig(epochs=10, folds=2, seeds=2)
        client = worker_client("fail")
        cache = EvaluationCache(tmp_path)
        evaluator = ExternalEvaluator(client, space, train, (1, 128, 128), 2, cache=cache)
        try:
            result = evaluator(canonical_unet(space))
        finally:
            client.close()
        assert result.status == "failed"
        assert cache.lookup(genotype_digest(canonical_unet(space)), train.digest()) is None
