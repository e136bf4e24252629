"""Asynchronous successive halving for random search with early stopping.

Rung ``k`` trains to ``min(r * eta**k, R)`` epochs; the top rung is the first
``K`` with ``r * eta**K >= R``. Whenever a worker frees up, :func:`next_job`
scans rungs from ``K - 1`` down to 0 and promotes the best entry that ranks
in the top ``floor(n_k / eta)`` of its rung and is not yet promoted; with
nothing promotable it starts a fresh configuration at rung 0. Promoted
configurations resume from their rung checkpoint.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Any, Callable

from .cellnet import Dataset, NetConfig, ScratchRun, TrainConfig
from .numcore import Rng, split_stream
from .searchspace import Architecture, SearchSpace, sample_architecture

RUNNING = "running"
COMPLETED = "completed"
PROMOTED = "promoted"
FAILED = "failed"


class AshaDone(Exception):
    """Raised by :func:`next_job` once the stop criterion is met."""


@dataclass(frozen=True)
class AshaParams:
    r: int = 1
    eta: int = 4
    max_resource: int = 300
    max_jobs: int | None = None
    max_total_epochs: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.eta, int) or self.eta < 2:
            raise ValueError("eta must be ≥ 2")
        if self.r < 1:
            raise ValueError("r must be ≥ 1")
        if self.max_resource < self.r:
            raise ValueError("max_resource must be ≥ r")
        if self.max_jobs is None and self.max_total_epochs is None:
            raise ValueError("set max_jobs or max_total_epochs")

    @property
    def top_rung(self) -> int:
        k = 0
        while self.r * self.eta**k < self.max_resource:
            k += 1
        return k


def rung_resource(params: AshaParams, k: int) -> int:
    if k < 0 or k > params.top_rung:
        raise ValueError(f"rung {k} outside 0..{params.top_rung}")
    return min(params.r * params.eta**k, params.max_resource)


@dataclass
class ConfigEntry:
    id: int
    arch: Any
    status: dict[int, str] = field(default_factory=dict)
    metrics: dict[int, float] = field(default_factory=dict)
    checkpoint: Any = None

    @property
    def rung(self) -> int:
        return max(self.status)


@dataclass(frozen=True)
class Job:
    config_id: int
    from_rung: int | None
    to_rung: int
    resume_from: int
    train_to: int


@dataclass
class Event:
    event: str  # start | promote | complete | fail
    config: int
    rung: int
    epochs: int
    metric: float | None = None
    wall_seconds: float = 0.0

    def key(self) -> tuple:
        """Deterministic fields, for trace comparison."""
        return (self.event, self.config, self.rung, self.epochs, self.metric)

    def to_dict(self) -> dict:
        doc = {"event": self.event, "config": self.config, "rung": self.rung, "epochs": self.epochs}
        if self.metric is not None:
            doc["metric"] = self.metric
        doc["wall_seconds"] = self.wall_seconds
        return doc


class AshaState:
    def __init__(self, params: AshaParams, space: SearchSpace | None = None):
        self.params = params
        self.space = space
        self.rungs: list[list[int]] = [[] for _ in range(params.top_rung + 1)]
        self.entries: dict[int, ConfigEntry] = {}
        self.next_id = 0
        self.events: list[Event] = []
        self.jobs_issued = 0
        self.epochs_committed = 0
        self._t0 = time.perf_counter()

    def resources(self) -> list[int]:
        return [rung_resource(self.params, k) for k in range(len(self.rungs))]

    def done(self) -> bool:
        p = self.params
        if p.max_jobs is not None and self.jobs_issued >= p.max_jobs:
            return True
        return p.max_total_epochs is not None and self.epochs_committed >= p.max_total_epochs

    def _log(self, event: str, config: int, rung: int, metric: float | None = None) -> None:
        self.events.append(Event(event, config, rung, rung_resource(self.params, rung), metric,
                                 time.perf_counter() - self._t0))

    def promotable(self, k: int) -> list[ConfigEntry]:
        """Unpromoted entries in the top ``floor(n_k / eta)`` of rung ``k``, best first."""
        finished = [self.entries[i] for i in self.rungs[k]
                    if self.entries[i].status[k] in (COMPLETED, PROMOTED)]
        finished.sort(key=lambda e: (e.metrics[k], e.id))
        top = finished[: len(finished) // self.params.eta]
        return [e for e in top if e.status[k] == COMPLETED]

    def distinct_configs(self) -> int:
        return len(self.entries)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)


def next_job(state: AshaState, rng: Rng | None = None) -> Job:
    if state.done():
        raise AshaDone("done")
    params = state.params
    for k in range(params.top_rung - 1, -1, -1):
        cands = state.promotable(k)
        if cands:
            entry = cands[0]
            entry.status[k] = PROMOTED
            entry.status[k + 1] = RUNNING
            state.rungs[k + 1].append(entry.id)
            job = Job(entry.id, k, k + 1, rung_resource(params, k), rung_resource(params, k + 1))
            state._log("promote", entry.id, k + 1)
            break
    else:
        arch = sample_architecture(state.space, rng) if state.space is not None else None
        entry = ConfigEntry(state.next_id, arch, {0: RUNNING})
        state.entries[entry.id] = entry
        state.rungs[0].append(entry.id)
        state.next_id += 1
        job = Job(entry.id, None, 0, 0, rung_resource(params, 0))
        state._log("start", entry.id, 0)
    state.jobs_issued += 1
    state.epochs_committed += job.train_to - job.resume_from
    return job


def _running_entry(state: AshaState, config_id: int, rung: int) -> ConfigEntry:
    if config_id not in state.entries:
        raise KeyError(f"unknown config {config_id}")
    entry = state.entries[config_id]
    status = entry.status.get(rung)
    if status in (COMPLETED, PROMOTED):
        raise ValueError(f"config {config_id} rung {rung} already completed")
    if status != RUNNING:
        raise ValueError(f"config {config_id} is not running at rung {rung}")
    return entry


def report(state: AshaState, config_id: int, rung: int, metric: float) -> AshaState:
    entry = _running_entry(state, config_id, rung)
    if not math.isfinite(metric):
        raise ValueError(f"non-finite metric {metric!r}")
    entry.status[rung] = COMPLETED
    entry.metrics[rung] = float(metric)
    state._log("complete", config_id, rung, float(metric))
    return state


def report_failure(state: AshaState, config_id: int, rung: int) -> AshaState:
    entry = _running_entry(state, config_id, rung)
    entry.status[rung] = FAILED
    state._log("fail", config_id, rung)
    return state


def best_entry(state: AshaState) -> ConfigEntry | None:
    """Highest rung reached with a metric; ties by metric then id."""
    best, best_key = None, None
    for e in state.entries.values():
        if not e.metrics:
            continue
        k = max(e.metrics)
        key = (-k, e.metrics[k], e.id)
        if best_key is None or key < best_key:
            best, best_key = e, key
    return best


JobRunner = Callable[[Job, ConfigEntry], float]


def training_runner(data: Dataset, net_cfg: NetConfig,
                    train_cfg_for: Callable[[int], TrainConfig], master_seed: int) -> JobRunner:
    """Partial from-scratch training, resuming from the entry's checkpoint.

    ``train_cfg_for(config_id)`` supplies the per-configuration stream labels.
    """

    def run(job: Job, entry: ConfigEntry) -> float:
        if entry.checkpoint is None:
            entry.checkpoint = ScratchRun(entry.arch, data, net_cfg, train_cfg_for(entry.id),
                                          master_seed)
        if entry.checkpoint.epochs_done != job.resume_from:
            raise RuntimeError("checkpoint does not match job resume point")
        return entry.checkpoint.train_to(job.train_to).evaluate("val")

    return run


@dataclass
class AshaResult:
    best: Architecture | None
    best_id: int | None
    state: AshaState

    @property
    def trace(self) -> list[Event]:
        return self.state.events

    @property
    def total_epochs(self) -> int:
        return self.state.epochs_committed

    @property
    def wall_seconds(self) -> float:
        return self.state.events[-1].wall_seconds if self.state.events else 0.0


def run_asha(space: SearchSpace | None, params: AshaParams, runner: JobRunner,
             workers: int = 1, master_seed: int = 0) -> AshaResult:
    """Drive ``workers`` in-process workers until the stop criterion.

    Only this loop touches the state; workers just execute ``runner``. With
    one worker the trace is a deterministic function of the seed and runner.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    state = AshaState(params, space)
    rng = split_stream(master_seed, "asha/arch-sampler")

    def finish(job: Job, outcome: float | BaseException) -> None:
        if isinstance(outcome, BaseException):
            report_failure(state, job.config_id, job.to_rung)
        else:
            report(state, job.config_id, job.to_rung, outcome)

    def call(job: Job) -> float | BaseException:
        try:
            metric = runner(job, state.entries[job.config_id])
        except Exception as exc:  # a failed trial must not stop the search
            return exc
        return metric if math.isfinite(metric) else FloatingPointError("non-finite metric")

    if workers == 1:
        while not state.done():
            job = next_job(state, rng)
            finish(job, call(job))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = {}
            while True:
                while len(pending) < workers and not state.done():
                    job = next_job(state, rng)
                    pending[pool.submit(call, job)] = job
                if not pending:
                    break
                finished, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in sorted(finished, key=lambda f: pending[f].config_id):
                    finish(pending.pop(fut), fut.result())
    best = best_entry(state)
    return AshaResult(best.arch if best else None, best.id if best else None, state)


def run_reference_sim(metric_table, params: AshaParams) -> list[tuple]:
    """Plain single-worker replay of the promotion rule, for testing.

    ``metric_table[c][k]`` is the metric config ``c`` (in creation order)
    reports at rung ``k``. Returns event keys as in :meth:`Event.key`.
    """
    res = []
    k = 0
    while True:
        res.append(min(params.r * params.eta**k, params.max_resource))
        if params.r * params.eta**k >= params.max_resource:
            break
        k += 1
    top = len(res) - 1
    finished = [[] for _ in res]  # (metric, config) pairs per rung
    promoted = [set() for _ in res]
    trace = []
    jobs = epochs = created = 0
    while True:
        if params.max_jobs is not None and jobs >= params.max_jobs:
            break
        if params.max_total_epochs is not None and epochs >= params.max_total_epochs:
            break
        chosen = None
        for k in reversed(range(top)):
            ranked = sorted(finished[k])
            for metric, c in ranked[: len(ranked) // params.eta]:
                if c not in promoted[k]:
                    chosen = (c, k + 1)
                    break
            if chosen:
                break
        if chosen:
            c, k = chosen
            promoted[k - 1].add(c)
            trace.append(("promote", c, k, res[k], None))
            epochs += res[k] - res[k - 1]
        else:
            c, k = created, 0
            created += 1
            trace.append(("start", c, 0, res[0], None))
            epochs += res[0]
        jobs += 1
        metric = float(metric_table[c][k])
        finished[k].append((metric, c))
        trace.append(("complete", c, k, res[k], metric))
    return trace


def trace_violations(events: list[Event], params: AshaParams) -> list[str]:
    """Check promotion soundness, single occupancy and monotone resources."""
    problems = []
    finished: dict[int, dict[int, float]] = {}  # rung -> config -> metric
    promoted: dict[int, set[int]] = {}
    running: dict[int, int] = {}
    last_epochs: dict[int, int] = {}
    for n, ev in enumerate(events):
        c, k = ev.config, ev.rung
        if ev.event == "start":
            if c in running or c in last_epochs:
                problems.append(f"event {n}: config {c} started twice")
            running[c] = k
            last_epochs[c] = ev.epochs
        elif ev.event == "promote":
            if c in running:
                problems.append(f"event {n}: config {c} running in two rungs")
            rung = finished.get(k - 1, {})
            if c not in rung:
                problems.append(f"event {n}: config {c} promoted without completing rung {k - 1}")
            else:
                ranked = sorted(rung, key=lambda i: (rung[i], i))
                if ranked.index(c) >= len(ranked) // params.eta:
                    problems.append(f"event {n}: config {c} outside top 1/eta of rung {k - 1}")
                if c in promoted.setdefault(k - 1, set()):
                    problems.append(f"event {n}: config {c} promoted twice from rung {k - 1}")
                promoted[k - 1].add(c)
            if ev.epochs <= last_epochs.get(c, 0):
                problems.append(f"event {n}: promotion of {c} does not increase epochs")
            running[c] = k
            last_epochs[c] = ev.epochs
        elif ev.event in ("complete", "fail"):
            if running.get(c) != k:
                problems.append(f"event {n}: config {c} reported at rung {k} while not running there")
            running.pop(c, None)
            if ev.event == "complete":
                finished.setdefault(k, {})[c] = ev.metric
    return problems
