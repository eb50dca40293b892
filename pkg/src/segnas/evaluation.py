"""Fitness evaluation: score aggregation, desk-scale surrogate, worker client.

The fitness of an architecture is the mean, over every (fold, seed)
training run, of the mean validation Dice over the last 20% of that run's
epochs. The aggregate is always recomputed engine-side from raw curves.

The surrogate evaluator is a deterministic stand-in for network training:
a seeded lookup table assigns a utility to every (node, variable, value)
choice; the fitness is a squashed weighted sum of those utilities plus
optional pairwise interactions and seeded noise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import queue
import shlex
import socket
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .space import Genotype, SpaceConfig, genotype_digest

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class ProtocolError(Exception):
    pass


class WorkerError(Exception):
    """Worker unreachable, timed out, or spoke a malformed protocol."""


@dataclass(frozen=True)
class Curve:
    fold: int
    seed: int
    dice: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"fold": self.fold, "seed": self.seed, "dice": list(self.dice)}


@dataclass(frozen=True)
class EvaluationResult:
    genotype_digest: str
    curves: tuple[Curve, ...]
    aggregate: Optional[float]
    status: str  # "ok" | "failed"
    wall_time: float = 0.0
    error: Optional[str] = None
    # False when the failure happened before any training started
    # (e.g. connection refused); such failures must not spend budget.
    budget_consumed: bool = True

    def to_dict(self) -> dict:
        return {
            "genotype_digest": self.genotype_digest,
            "curves": [c.to_dict() for c in self.curves],
            "aggregate": self.aggregate,
            "status": self.status,
            "wall_time": self.wall_time,
            "error": self.error,
            "budget_consumed": self.budget_consumed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationResult":
        return cls(
            genotype_digest=d["genotype_digest"],
            curves=tuple(Curve(int(c["fold"]), int(c["seed"]), tuple(float(v) for v in c["dice"]))
                         for c in d["curves"]),
            aggregate=d["aggregate"],
            status=d["status"],
            wall_time=float(d.get("wall_time", 0.0)),
            error=d.get("error"),
            budget_consumed=bool(d.get("budget_consumed", True)),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    lr_decay_exponent: float = 0.9
    batch_size: int = 32
    input_size: int = 128
    folds: int = 5
    seeds: int = 3
    dataset_id: str = "synthetic"
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_scale: bool = True
    augment_shift: bool = True
    augment_brightness: bool = True

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "lr_decay_exponent": self.lr_decay_exponent,
            "batch_size": self.batch_size,
            "input_size": self.input_size,
            "folds": self.folds,
            "seeds": self.seeds,
            "dataset_id": self.dataset_id,
            "augment": {
                "flip": self.augment_flip,
                "rotate": self.augment_rotate,
                "scale": self.augment_scale,
                "shift": self.augment_shift,
                "brightness": self.augment_brightness,
            },
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class EvalJobSpec:
    ir_document: dict
    train_config: TrainConfig
    job_id: str = field(default_factory=lambda: uuid.uuid4().hex)


# ---------------------------------------------------------------------------
# Aggregation

def aggregate_score(curves: Sequence[Sequence[float]]) -> float:
    """Mean over runs of the mean of each run's last ceil(0.2 * epochs) values."""
    if not curves:
        raise ProtocolError("no curves to aggregate")
    tail_means = []
    for curve in curves:
        if not curve:
            raise ProtocolError("empty epoch curve")
        if any(v < 0.0 or v > 1.0 for v in curve):
            raise ProtocolError("dice value outside [0, 1]")
        tail = math.ceil(0.2 * len(curve))
        tail_means.append(sum(curve[-tail:]) / tail)
    return sum(tail_means) / len(tail_means)


# ---------------------------------------------------------------------------
# Surrogate evaluator

@dataclass(frozen=True)
class SurrogateConfig:
    table_seed: int = 0
    topology_weight: float = 1.0
    cell_weight: float = 1.0
    interaction_strength: float = 0.0
    noise_amplitude: float = 0.0
    squash_scale: float = 0.25
    epochs: int = 10

    def digest(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def _unit(*key) -> float:
    """Deterministic pseudo-random value in [-1, 1] keyed by the arguments."""
    raw = "|".join(str(k) for k in key).encode()
    h = hashlib.sha256(raw).digest()
    v = int.from_bytes(h[:8], "big") / float(1 << 64)
    return 2.0 * v - 1.0


def surrogate_fitness(genotype: Genotype, config: SurrogateConfig, rng_seed: int = 0) -> float:
    s = config.table_seed
    raw = 0.0
    for idx, gene in enumerate(genotype.nodes, start=1):
        raw += config.topology_weight * _unit(s, "u", idx, "channel_move",
                                              gene.channel_move.value)
        raw += config.topology_weight * _unit(s, "u", idx, "skip_source", gene.skip_source)
        raw += config.cell_weight * _unit(s, "u", idx, "block_type", gene.block_type.value)
        raw += config.cell_weight * _unit(s, "u", idx, "conv_size", gene.conv_size)
    if config.interaction_strength != 0.0:
        for idx in range(1, len(genotype)):
            a, b = genotype.nodes[idx - 1], genotype.nodes[idx]
            raw += config.interaction_strength * _unit(
                s, "pair", idx, a.block_type.value, a.conv_size,
                b.block_type.value, b.conv_size)
    if config.noise_amplitude != 0.0:
        raw += config.noise_amplitude * _unit(s, "noise", rng_seed, genotype_digest(genotype))
    return 1.0 / (1.0 + math.exp(-raw * config.squash_scale))


def surrogate_evaluate(genotype: Genotype, config: SurrogateConfig,
                       rng_seed: int = 0) -> EvaluationResult:
    fitness = surrogate_fitness(genotype, config, rng_seed)
    epochs = config.epochs
    tail = math.ceil(0.2 * epochs)
    ramp = [fitness * (i + 1) / (epochs - tail + 1) for i in range(epochs - tail)]
    curve = tuple(ramp + [fitness] * tail)
    curves = (Curve(fold=0, seed=0, dice=curve),)
    aggregate = aggregate_score([c.dice for c in curves])
    return EvaluationResult(
        genotype_digest=genotype_digest(genotype),
        curves=curves, aggregate=aggregate, status="ok",
    )


class SurrogateEvaluator:
    """Callable evaluator backed by the deterministic surrogate."""

    def __init__(self, config: SurrogateConfig, rng_seed: int = 0):
        self.config = config
        self.rng_seed = rng_seed

    def __call__(self, genotype: Genotype) -> EvaluationResult:
        return surrogate_evaluate(genotype, self.config, self.rng_seed)

    def digest(self) -> str:
        return hashlib.sha256(
            f"surrogate|{self.config.digest()}|{self.rng_seed}".encode()).hexdigest()


# ---------------------------------------------------------------------------
# Result cache

class EvaluationCache:
    """Digest-keyed persistent store of evaluation results.

    Keys combine the genotype digest with a configuration digest, so the
    same genotype under different training setups gets independent entries.
    Writes are idempotent; a corrupted entry is treated as a miss.
    """

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, geno_digest: str, config_digest: str) -> Path:
        key = hashlib.sha256(f"{geno_digest}|{config_digest}".encode()).hexdigest()
        return self.directory / f"{key}.json"

    def lookup(self, geno_digest: str, config_digest: str) -> Optional[EvaluationResult]:
        path = self._path(geno_digest, config_digest)
        if not path.exists():
            return None
        try:
            doc = json.loads(path.read_text())
            result = EvaluationResult.from_dict(doc)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            log.warning("corrupted cache entry %s (%s); treating as miss", path, exc)
            return None
        if result.genotype_digest != geno_digest:
            log.warning("cache entry %s has mismatched digest; treating as miss", path)
            return None
        return result

    def store(self, result: EvaluationResult, config_digest: str) -> None:
        path = self._path(result.genotype_digest, config_digest)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(result.to_dict(), sort_keys=True))
        tmp.replace(path)


# ---------------------------------------------------------------------------
# Worker transport and protocol client

class _LineTransport:
    """Newline-delimited JSON messages over a byte stream, with a reader thread."""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue()
        self._closed = False

    def _start_reader(self, stream):
        def pump():
            try:
                for line in stream:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        self._queue.put(json.loads(line))
                    except json.JSONDecodeError:
                        self._queue.put({"type": "_malformed", "raw": line[:200]})
            except (OSError, ValueError):
                pass
            self._queue.put(None)  # EOF marker

        t = threading.Thread(target=pump, daemon=True)
        t.start()

    def send(self, message: dict) -> None:
        raise NotImplementedError

    def recv(self, timeout: float) -> Optional[dict]:
        """Next message, or None on timeout. Raises WorkerError on EOF."""
        try:
            msg = self._queue.get(timeout=timeout)
        except queue.Empty:
            return None
        if msg is None:
            raise WorkerError("worker closed the connection")
        return msg

    def close(self) -> None:
        self._closed = True


class SubprocessTransport(_LineTransport):
    def __init__(self, command: list[str]):
        super().__init__()
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as exc:
            raise WorkerError(f"cannot start worker {command!r}: {exc}") from exc
        self._start_reader(self._proc.stdout)

    def send(self, message: dict) -> None:
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (OSError, BrokenPipeError, ValueError) as exc:
            raise WorkerError(f"worker pipe broken: {exc}") from exc

    def close(self) -> None:
        super().close()
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()


class TcpTransport(_LineTransport):
    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        super().__init__()
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise WorkerError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._sock.settimeout(None)
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._writer = self._sock.makefile("w", encoding="utf-8")
        self._start_reader(self._reader)

    def send(self, message: dict) -> None:
        try:
            self._writer.write(json.dumps(message) + "\n")
            self._writer.flush()
        except OSError as exc:
            raise WorkerError(f"socket write failed: {exc}") from exc

    def close(self) -> None:
        super().close()
        for closer in (self._writer.close, self._reader.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass


def open_transport(endpoint: str) -> _LineTransport:
    """tcp://host:port opens a socket; anything else is a worker command line."""
    if endpoint.startswith("tcp://"):
        rest = endpoint[len("tcp://"):]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise WorkerError(f"bad tcp endpoint {endpoint!r}")
        return TcpTransport(host, int(port))
    return SubprocessTransport(shlex.split(endpoint))


class WorkerClient:
    """Blocking client for the evaluate/result worker protocol."""

    def __init__(self, transport: _LineTransport, heartbeat_timeout: float = 30.0,
                 job_timeout: Optional[float] = None):
        self.transport = transport
        self.heartbeat_timeout = heartbeat_timeout
        self.job_timeout = job_timeout
        self._handshaken = False

    def handshake(self) -> None:
        self.transport.send({"type": "hello", "version": PROTOCOL_VERSION})
        msg = self._wait_message()
        if msg.get("type") != "hello":
            raise WorkerError(f"expected hello, got {msg.get('type')!r}")
        if msg.get("version") != PROTOCOL_VERSION:
            raise WorkerError(f"protocol version mismatch: {msg.get('version')!r}")
        self._handshaken = True

    def ping(self) -> None:
        self.transport.send({"type": "ping"})
        msg = self._wait_message()
        if msg.get("type") != "pong":
            raise WorkerError(f"expected pong, got {msg.get('type')!r}")

    def _wait_message(self) -> dict:
        msg = self.transport.recv(self.heartbeat_timeout)
        if msg is None:
            raise WorkerError("worker timed out")
        if msg.get("type") == "_malformed":
            raise WorkerError(f"malformed message from worker: {msg.get('raw')!r}")
        return msg

    def request_result(self, request: dict) -> dict:
        """Send one request and wait for its result, tolerating heartbeats."""
        if not self._handshaken:
            self.handshake()
        self.transport.send(request)
        start = time.monotonic()
        pinged = False
        while True:
            if self.job_timeout is not None and time.monotonic() - start > self.job_timeout:
                raise WorkerError("job timeout exceeded")
            msg = self.transport.recv(self.heartbeat_timeout)
            if msg is None:
                if pinged:
                    raise WorkerError("worker heartbeat timed out")
                self.transport.send({"type": "ping"})
                pinged = True
                continue
            if msg.get("type") == "_malformed":
                raise WorkerError(f"malformed message from worker: {msg.get('raw')!r}")
            if msg.get("type") in ("pong", "progress"):
                pinged = False
                continue
            if msg.get("type") == "result":
                if msg.get("id") != request.get("id"):
                    raise WorkerError(f"result id {msg.get('id')!r} does not match request")
                return msg
            raise WorkerError(f"unexpected message type {msg.get('type')!r}")

    def close(self) -> None:
        self.transport.close()


def _validate_response(msg: dict, job: EvalJobSpec) -> tuple[Curve, ...]:
    status = msg.get("status")
    if status == "failed":
        raise ProtocolError(f"worker reported failure: {msg.get('error', 'unknown')}")
    if status != "ok":
        raise ProtocolError(f"bad result status {status!r}")
    raw_curves = msg.get("curves")
    if not isinstance(raw_curves, list):
        raise ProtocolError("result has no curves")
    expected = job.train_config.folds * job.train_config.seeds
    if len(raw_curves) != expected:
        raise ProtocolError(
            f"curve-count-mismatch: got {len(raw_curves)}, expected {expected}")
    curves = []
    for rec in raw_curves:
        try:
            dice = tuple(float(v) for v in rec["dice"])
            curve = Curve(fold=int(rec["fold"]), seed=int(rec["seed"]), dice=dice)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed curve record: {exc}") from exc
        if len(dice) == 0:
            raise ProtocolError("empty curve")
        if any(v < 0.0 or v > 1.0 for v in dice):
            raise ProtocolError("out-of-range: dice value outside [0, 1]")
        curves.append(curve)
    return tuple(curves)


def external_evaluate(job: EvalJobSpec, client: WorkerClient,
                      geno_digest: Optional[str] = None) -> EvaluationResult:
    """Run one job on a worker. The aggregate is recomputed locally from the
    returned raw curves; a worker-computed aggregate is never trusted."""
    digest = geno_digest or job.ir_document.get("genotype_digest", "")
    start = time.monotonic()
    request = {
        "type": "evaluate",
        "id": job.job_id,
        "ir": job.ir_document,
        "train_config": job.train_config.to_dict(),
    }
    try:
        msg = client.request_result(request)
    except WorkerError as exc:
        return EvaluationResult(
            genotype_digest=digest, curves=(), aggregate=None, status="failed",
            wall_time=time.monotonic() - start, error=str(exc),
            budget_consumed=False)
    try:
        curves = _validate_response(msg, job)
        aggregate = aggregate_score([c.dice for c in curves])
    except ProtocolError as exc:
        started = bool(msg.get("started", True))
        return EvaluationResult(
            genotype_digest=digest, curves=(), aggregate=None, status="failed",
            wall_time=time.monotonic() - start, error=str(exc),
            budget_consumed=started)
    return EvaluationResult(
        genotype_digest=digest, curves=curves, aggregate=aggregate, status="ok",
        wall_time=time.monotonic() - start)


class ExternalEvaluator:
    """Callable evaluator that compiles genotypes and ships them to a worker."""

    def __init__(self, client: WorkerClient, space_config: SpaceConfig,
                 train_config: TrainConfig, input_shape: tuple[int, int, int],
                 num_classes: int, cache: Optional[EvaluationCache] = None):
        from .compiler import compile_architecture  # local import to avoid cycle
        self._compile = compile_architecture
        self.client = client
        self.space_config = space_config
        self.train_config = train_config
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.cache = cache

    def digest(self) -> str:
        payload = f"external|{self.train_config.digest()}|{self.input_shape}|{self.num_classes}"
        return hashlib.sha256(payload.encode()).hexdigest()

    def __call__(self, genotype: Genotype) -> EvaluationResult:
        d = genotype_digest(genotype)
        if self.cache is not None:
            hit = self.cache.lookup(d, self.train_config.digest())
            if hit is not None:
                return hit
        ir = self._compile(genotype, self.space_config, self.input_shape, self.num_classes)
        job = EvalJobSpec(ir_document=ir.to_dict(), train_config=self.train_config)
        result = external_evaluate(job, self.client, geno_digest=d)
        if self.cache is not None and result.status == "ok":
            self.cache.store(result, self.train_config.digest())
        return result
