"""Budgeted architecture search with full trace logging.

Local search is first-improvement over a 1-variable neighborhood: the
(node, variable) pairs are visited in a seeded random order; for each
variable every alternative value is probed and the best-scoring one is
accepted immediately if it strictly beats the incumbent. A pass with no
accepted move means every neighbor has been probed without improvement,
so the search stops at a verified local optimum.

Every completed evaluation becomes one trace event; a per-run cache
guarantees no genotype is ever evaluated (or billed against the budget)
twice. Traces are deterministic given (space, evaluator, budget, seed)
and can be resumed by replaying the event log.
"""

from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

from .evaluation import EvaluationResult
from .space import (
    Genotype,
    SpaceConfig,
    SpaceMode,
    config_digest,
    genotype_digest,
    genotype_from_dict,
    node_to_dict,
    random_genotype,
    substitute,
    variable_options,
)

_VARIABLES = ("channel_move", "block_type", "conv_size", "skip_source")

Evaluator = Callable[[Genotype], EvaluationResult]


class SearchError(Exception):
    pass


class ReplayMismatchError(SearchError):
    """Event log does not match the deterministic replay of the search."""


@dataclass
class TraceEvent:
    step: int
    genotype_digest: str
    genotype: list  # node dicts
    score: Optional[float]  # None for non-billable error events
    accepted: bool
    variable_probed: Optional[tuple[int, str]]  # None = initialisation
    stage: Optional[int] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "genotype_digest": self.genotype_digest,
            "genotype": self.genotype,
            "score": self.score,
            "accepted": self.accepted,
            "variable_probed": (
                "initialisation" if self.variable_probed is None
                else list(self.variable_probed)),
            "stage": self.stage,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        vp = d.get("variable_probed")
        return cls(
            step=int(d["step"]),
            genotype_digest=d["genotype_digest"],
            genotype=d["genotype"],
            score=None if d.get("score") is None else float(d["score"]),
            accepted=bool(d["accepted"]),
            variable_probed=None if vp in (None, "initialisation") else (int(vp[0]), vp[1]),
            stage=d.get("stage"),
            error=d.get("error"),
        )


@dataclass
class SearchTrace:
    config_digest: str
    rng_seed: int
    algorithm: str
    budget: int
    events: list[TraceEvent] = field(default_factory=list)
    status: str = "incomplete"  # local_optimum | budget_exhausted | error | incomplete

    @property
    def budget_used(self) -> int:
        return sum(1 for e in self.events if e.score is not None)

    @property
    def best_event(self) -> Optional[TraceEvent]:
        scored = [e for e in self.events if e.score is not None]
        if not scored:
            return None
        return max(scored, key=lambda e: (e.score, -e.step))

    @property
    def best_score(self) -> Optional[float]:
        e = self.best_event
        return None if e is None else e.score

    @property
    def best_genotype(self) -> Optional[Genotype]:
        e = self.best_event
        return None if e is None else genotype_from_dict({"nodes": e.genotype})

    def summary_dict(self) -> dict:
        e = self.best_event
        return {
            "config_digest": self.config_digest,
            "rng_seed": self.rng_seed,
            "algorithm": self.algorithm,
            "budget": self.budget,
            "budget_used": self.budget_used,
            "status": self.status,
            "best_score": self.best_score,
            "best_genotype_digest": None if e is None else e.genotype_digest,
            "best_genotype": None if e is None else e.genotype,
        }

    def to_json(self) -> str:
        doc = self.summary_dict()
        doc["events"] = [e.to_dict() for e in self.events]
        return json.dumps(doc, sort_keys=True)


# ---------------------------------------------------------------------------
# Trace persistence

def write_trace(trace: SearchTrace, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "events.ndjson").open("w") as fh:
        for event in trace.events:
            fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
    (directory / "summary.json").write_text(
        json.dumps(trace.summary_dict(), sort_keys=True, indent=2) + "\n")


def read_events(path: Path) -> list[TraceEvent]:
    events = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(TraceEvent.from_dict(json.loads(line)))
    return events


# ---------------------------------------------------------------------------
# Evaluation brokering (cache + budget + replay)

class _BudgetExhausted(Exception):
    pass


class _EvaluatorFailed(Exception):
    pass


class _Broker:
    def __init__(self, evaluator: Evaluator, trace: SearchTrace,
                 replay_events: Optional[Iterable[TraceEvent]] = None,
                 seed_cache: Optional[dict[str, float]] = None,
                 event_sink: Optional[Callable[[TraceEvent], None]] = None):
        self.evaluator = evaluator
        self.trace = trace
        self.cache: dict[str, float] = dict(seed_cache or {})
        self.replay = deque(replay_events or [])
        self.event_sink = event_sink
        self.pending: list[TraceEvent] = []

    def _next_step(self) -> int:
        return len(self.trace.events) + len(self.pending)

    def score(self, genotype: Genotype, variable_probed: Optional[tuple[int, str]],
              stage: Optional[int], accepted: bool = False
              ) -> tuple[float, Optional[TraceEvent]]:
        """Score a genotype. Returns (score, pending event or None for cache hits).

        Replayed events are consumed in order and verified against the
        deterministic control flow.
        """
        digest = genotype_digest(genotype)
        # Consume the log lazily so the cache mirrors the original run's
        # state: a call that was a cache hit originally must not pop an
        # event, and a call that was a live evaluation must match the log.
        if self.replay and self.replay[0].genotype_digest == digest:
            event = self.replay.popleft()
            self.trace.events.append(event)
            if event.score is None:
                raise _EvaluatorFailed(event.error or "logged failure")
            self.cache[digest] = event.score
            return event.score, None
        if digest in self.cache:
            return self.cache[digest], None
        if self.replay:
            event = self.replay[0]
            raise ReplayMismatchError(
                f"step {event.step}: log has {event.genotype_digest[:12]}, "
                f"replay produced {digest[:12]}")
        if self.trace.budget_used + sum(1 for e in self.pending if e.score is not None) \
                >= self.trace.budget:
            raise _BudgetExhausted()
        result = self._evaluate(genotype, digest, variable_probed, stage)
        if result.status == "ok":
            score = result.aggregate
            error = None
        else:
            if not result.budget_consumed:
                step = self._next_step()
                self.flush()  # keep events in step order ahead of the error
                self._emit(TraceEvent(step, digest,
                                      [node_to_dict(g) for g in genotype.nodes],
                                      None, False, variable_probed, stage, result.error))
                raise _EvaluatorFailed(result.error or "evaluation failed")
            score = float("-inf")
            error = result.error or "evaluation failed"
        self.cache[digest] = score
        event = TraceEvent(self._next_step(), digest,
                           [node_to_dict(g) for g in genotype.nodes],
                           score, accepted, variable_probed, stage, error)
        self.pending.append(event)
        return score, event

    def _evaluate(self, genotype, digest, variable_probed, stage) -> EvaluationResult:
        try:
            return self.evaluator(genotype)
        except Exception as exc:  # evaluator crash: keep the trace, stop the run
            step = self._next_step()
            self.flush()
            self._emit(TraceEvent(step, digest,
                                  [node_to_dict(g) for g in genotype.nodes],
                                  None, False, variable_probed, stage, repr(exc)))
            raise _EvaluatorFailed(repr(exc)) from exc

    def flush(self) -> None:
        for event in self.pending:
            self._emit(event)
        self.pending = []

    def _emit(self, event: TraceEvent) -> None:
        self.trace.events.append(event)
        if self.event_sink is not None:
            self.event_sink(event)


# ---------------------------------------------------------------------------
# Local search

def local_search(space: SpaceConfig, evaluator: Evaluator, budget: int, rng_seed: int,
                 *, initial: Optional[Genotype] = None, stage: Optional[int] = None,
                 replay_events: Optional[list[TraceEvent]] = None,
                 seed_cache: Optional[dict[str, float]] = None,
                 event_sink: Optional[Callable[[TraceEvent], None]] = None,
                 trace: Optional[SearchTrace] = None) -> SearchTrace:
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if trace is None:
        trace = SearchTrace(config_digest=config_digest(space), rng_seed=rng_seed,
                            algorithm="local", budget=budget)
    broker = _Broker(evaluator, trace, replay_events, seed_cache, event_sink)

    genotype = initial if initial is not None else random_genotype(space, rng_seed)
    rng = random.Random(rng_seed)

    try:
        incumbent_score, event = broker.score(genotype, None, stage, accepted=True)
        broker.flush()
    except _BudgetExhausted:
        broker.flush()
        trace.status = "incomplete"
        return trace
    except _EvaluatorFailed:
        trace.status = "error"
        return trace

    try:
        while True:
            pairs = [(node, var) for node in range(1, space.num_nodes + 1)
                     for var in _VARIABLES]
            rng.shuffle(pairs)
            improved_in_pass = False
            for node, var in pairs:
                current = getattr(genotype.nodes[node - 1], var)
                options = variable_options(genotype, node, var, space)
                best_score = None
                best_value = None
                best_event = None
                for value in options:
                    if value == current:
                        continue
                    candidate = substitute(genotype, node, var, value)
                    score, event = broker.score(candidate, (node, var), stage)
                    if best_score is None or score > best_score:
                        best_score, best_value, best_event = score, value, event
                if best_score is not None and best_score > incumbent_score:
                    genotype = substitute(genotype, node, var, best_value)
                    incumbent_score = best_score
                    improved_in_pass = True
                    if best_event is not None:
                        best_event.accepted = True
                broker.flush()
            if not improved_in_pass:
                trace.status = "local_optimum"
                break
    except _BudgetExhausted:
        broker.flush()
        trace.status = "budget_exhausted"
    except _EvaluatorFailed:
        broker.flush()
        trace.status = "error"
    return trace


# ---------------------------------------------------------------------------
# Random search baseline

def random_search(space: SpaceConfig, evaluator: Evaluator, budget: int, rng_seed: int,
                  *, replay_events: Optional[list[TraceEvent]] = None,
                  event_sink: Optional[Callable[[TraceEvent], None]] = None
                  ) -> SearchTrace:
    if budget < 1:
        raise ValueError("budget must be >= 1")
    trace = SearchTrace(config_digest=config_digest(space), rng_seed=rng_seed,
                        algorithm="random", budget=budget)
    broker = _Broker(evaluator, trace, replay_events, None, event_sink)
    rng = random.Random(rng_seed)
    best = float("-inf")
    try:
        while trace.budget_used + len(broker.pending) < budget:
            genotype = None
            for _ in range(10000):
                candidate = random_genotype(space, rng.randrange(2 ** 32))
                if genotype_digest(candidate) not in broker.cache:
                    genotype = candidate
                    break
            if genotype is None:  # space smaller than the budget
                trace.status = "local_optimum"
                broker.flush()
                return trace
            score, event = broker.score(genotype, None, None)
            if score > best:
                best = score
                if event is not None:
                    event.accepted = True
            broker.flush()
        trace.status = "budget_exhausted"
    except _BudgetExhausted:
        broker.flush()
        trace.status = "budget_exhausted"
    except _EvaluatorFailed:
        broker.flush()
        trace.status = "error"
    return trace


# ---------------------------------------------------------------------------
# Bilevel orchestration

def bilevel_search(space: SpaceConfig, evaluator: Evaluator, budget: int,
                   rng_seed: int, stage_split: float = 0.5,
                   event_sink: Optional[Callable[[TraceEvent], None]] = None
                   ) -> SearchTrace:
    """Topology first (blocks and conv sizes frozen), then conv sizes only."""
    if space.mode is not SpaceMode.BILEVEL_TOPOLOGY:
        raise SearchError("bilevel_search requires a space in bilevel_topology mode")
    if not 0.0 < stage_split < 1.0:
        raise ValueError("stage_split must be in (0, 1)")
    budget_stage1 = max(1, int(budget * stage_split))
    budget_stage2 = budget - budget_stage1

    stage1 = local_search(space, evaluator, budget_stage1, rng_seed,
                          stage=1, event_sink=event_sink)
    merged = SearchTrace(config_digest=config_digest(space), rng_seed=rng_seed,
                         algorithm="bilevel", budget=budget,
                         events=list(stage1.events), status=stage1.status)
    winner = stage1.best_genotype
    if winner is None or stage1.status == "error" or budget_stage2 < 1:
        return merged

    cell_space = replace(space, mode=SpaceMode.BILEVEL_CELL, reference_topology=winner)
    stage1_cache = {e.genotype_digest: e.score for e in stage1.events
                    if e.score is not None}
    stage2_trace = SearchTrace(config_digest=config_digest(space), rng_seed=rng_seed,
                               algorithm="local", budget=budget)
    stage2_trace.events = merged.events  # shared list: steps continue, budget is global
    stage2 = local_search(cell_space, evaluator, budget, rng_seed,
                          initial=winner, stage=2, seed_cache=stage1_cache,
                          event_sink=event_sink, trace=stage2_trace)
    merged.events = stage2.events
    merged.status = stage2.status
    return merged
