"""Three-stage search protocol, the early-stopping baseline, sweeps and cost accounting.

Stream labels (all split from ``seeds.master``):

* ``stage1/trial{t}/{arch-sampler,init,data-order,select}``
* ``stage2/{genotype hash}/{init,data-order}``: keyed by genotype, so the
  stage-2 outcome of an architecture does not depend on trial order
* ``stage3/seed{s}/{init,data-order}``
* ``asha/arch-sampler`` and ``asha/config{id}/{init,data-order}``
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import asha as asha_mod
from .cellnet import (
    CellNet,
    Dataset,
    SelectionAudit,
    TrainLog,
    select_final,
    train_from_scratch,
    train_shared,
)
from .config import PipelineConfig
from .numcore import StreamLedger, split_stream
from .reproharness import (
    MANIFEST_NAME,
    RESULTS_NAME,
    RunRecord,
    Summary,
    build_manifest,
    canonical_json,
    sha256,
    summarize,
    write_manifest,
    write_records,
)
from .searchspace import Architecture, SearchSpace, parse_genotype
from .tasks import make_dataset, oracle_train_all

log = logging.getLogger(__name__)


def run_id_for(command: str, cfg: PipelineConfig) -> str:
    return sha256(command + canonical_json(cfg.to_flat()))[:12]


def genotype_tag(genotype: str) -> str:
    return sha256(genotype)[:16]


@dataclass
class CostReport:
    total_search_seconds: float
    num_archs_evaluated: int
    amortized_seconds_per_arch: float

    def to_dict(self) -> dict:
        return {
            "total_search_seconds": self.total_search_seconds,
            "num_archs_evaluated": self.num_archs_evaluated,
            "amortized_seconds_per_arch": self.amortized_seconds_per_arch,
        }


def amortized_cost(total_seconds: float, num_archs: int) -> CostReport:
    if num_archs <= 0:
        raise ValueError("num_archs must be > 0")
    return CostReport(total_seconds, num_archs, total_seconds / num_archs)


@dataclass
class StageReport:
    stage: str
    metric_name: str
    labels: list[str]
    values: list[float]
    genotypes: list[str] = field(default_factory=list)
    winner: str | None = None

    @property
    def summary(self) -> Summary:
        return summarize(self.values)

    @property
    def best(self) -> float:
        return self.summary.best

    @property
    def average(self) -> float:
        return self.summary.average

    @property
    def std(self) -> float:
        return self.summary.std

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "metric_name": self.metric_name,
            "labels": self.labels,
            "values": self.values,
            "genotypes": self.genotypes,
            "winner": self.winner,
            "best": self.best,
            "average": self.average,
            "std": self.std,
        }

    def render(self) -> str:
        cols = self.labels + (["Best", "Average"] if self.stage != "3" else ["Mean", "Std", "Best"])
        if self.stage == "3":
            vals = self.values + [self.average, self.std, self.best]
        else:
            vals = self.values + [self.best, self.average]
        cells = [f"{v:.5f}" for v in vals]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        title = f"Stage {self.stage} ({self.metric_name})"
        return "\n".join([
            title,
            " | ".join(c.rjust(w) for c, w in zip(cols, widths)),
            " | ".join(v.rjust(w) for v, w in zip(cells, widths)),
        ])


@dataclass
class Stage1Result:
    trial: int
    arch: Architecture
    audit: SelectionAudit
    train_log: TrainLog
    search_seconds: float


@dataclass
class RunOutput:
    """Everything a run-producing command emits."""

    command: str
    config: PipelineConfig
    records: list[RunRecord]
    genotypes: dict[str, str]
    ledger: StreamLedger
    reports: dict[str, dict] = field(default_factory=dict)
    text: list[str] = field(default_factory=list)
    wall_seconds: float = 0.0

    def manifest(self):
        return build_manifest(self.command, self.config.to_flat(), dict(self.ledger.entries),
                              self.config.space().to_dict(), self.genotypes, self.records)


# --- stages ---------------------------------------------------------------------


def run_stage1(space: SearchSpace, data: Dataset, cfg: PipelineConfig,
               ledger: StreamLedger) -> list[Stage1Result]:
    out = []
    for t in range(cfg["pipeline.trials"]):
        prefix = f"stage1/trial{t}/"
        for part in ("arch-sampler", "init", "data-order", "select"):
            ledger.claim(prefix + part, f"stage1 trial {t} {part}")
        train_cfg = cfg.stage1_train(prefix)
        start = time.perf_counter()
        weights = CellNet.shared(space, data.in_dim, cfg.proxy_net(),
                                 split_stream(cfg.master_seed, train_cfg.init_label))
        weights, tlog = train_shared(space, weights, data, train_cfg)
        arch, audit = select_final(space, weights, data.x_val, data.y_val, cfg.select(),
                                   split_stream(cfg.master_seed, prefix + "select"))
        seconds = time.perf_counter() - start
        log.info("stage1 trial %d: %s (shared val %.5f)", t, arch, audit.winner[2])
        out.append(Stage1Result(t, arch, audit, tlog, seconds))
    return out


def _scratch(arch: Architecture, data: Dataset, cfg: PipelineConfig, ledger: StreamLedger,
             prefix: str, consumer: str, epochs: int | None = None):
    ledger.claim(prefix + "init", consumer)
    ledger.claim(prefix + "data-order", consumer)
    return train_from_scratch(arch, data, cfg.proxyless_net(), cfg.scratch_train(prefix, epochs),
                              cfg.master_seed)


def run_stage2(archs: list[Architecture], data: Dataset, cfg: PipelineConfig,
               ledger: StreamLedger) -> tuple[StageReport, Architecture, dict[str, tuple[float, float]]]:
    """Retrain each trial's architecture at proxyless width; lowest val loss wins."""
    if not archs:
        raise ValueError("stage 2 needs at least one architecture")
    results: dict[str, tuple[float, float]] = {}
    for arch in archs:
        g = str(arch)
        if g not in results:
            res = _scratch(arch, data, cfg, ledger, f"stage2/{genotype_tag(g)}/", f"stage2 {g}")
            results[g] = (res.val, res.test)
    genotypes = [str(a) for a in archs]
    values = [results[g][0] for g in genotypes]
    winner = min(results, key=lambda g: (results[g][0], g))
    report = StageReport("2", "val", [f"Trial {i + 1}" for i in range(len(archs))], values,
                         genotypes, winner)
    return report, parse_genotype(winner), results


def run_stage3(arch: Architecture, data: Dataset, cfg: PipelineConfig,
               ledger: StreamLedger) -> StageReport:
    """More seeds (default) or one longer run; reports test loss."""
    values, labels = [], []
    if cfg["stage3.mode"] == "epochs":
        res = _scratch(arch, data, cfg, ledger, "stage3/long/", "stage3 long run",
                       epochs=cfg.stage3_epochs())
        values.append(res.test)
        labels.append(f"{cfg.stage3_epochs()} epochs")
    else:
        for s in range(cfg["stage3.seeds"]):
            res = _scratch(arch, data, cfg, ledger, f"stage3/seed{s}/", f"stage3 seed {s}")
            values.append(res.test)
            labels.append(f"Seed {s + 1}")
    return StageReport("3", "test", labels, values, [str(arch)] * len(values), str(arch))


def _stage3_records(run_id: str, cfg: PipelineConfig, report: StageReport) -> list[RunRecord]:
    epochs = cfg.stage3_epochs() if cfg["stage3.mode"] == "epochs" else cfg["stage2.epochs"]
    return [RunRecord(run_id, "3", 0, s, report.winner, epochs, "test", v)
            for s, v in enumerate(report.values)]


# --- composite commands ------------------------------------------------------------


def search_ws(cfg: PipelineConfig, data: Dataset | None = None) -> RunOutput:
    t0 = time.perf_counter()
    data = data if data is not None else make_dataset(cfg.task())
    ledger = StreamLedger(cfg.master_seed)
    run_id = run_id_for("search-ws", cfg)
    s1 = run_stage1(cfg.space(), data, cfg, ledger)
    records = [RunRecord(run_id, "1", r.trial, 0, str(r.arch), cfg["train.epochs"], "ws_val",
                         r.audit.winner[2], r.search_seconds) for r in s1]
    cost = amortized_cost(sum(r.search_seconds for r in s1), sum(r.audit.num_archs for r in s1))
    out = RunOutput("search-ws", cfg, records, {f"trial{r.trial}": str(r.arch) for r in s1}, ledger)
    out.reports["stage1"] = {"trials": [_stage1_dict(r) for r in s1]}
    out.reports["cost"] = cost.to_dict()
    out.wall_seconds = time.perf_counter() - t0
    return out


def _stage1_dict(r: Stage1Result) -> dict:
    return {
        "trial": r.trial,
        "genotype": str(r.arch),
        "train_log": r.train_log.to_dict(),
        "search_seconds": r.search_seconds,
        "audit": r.audit.to_dict(),
    }


def run_pipeline(cfg: PipelineConfig, data: Dataset | None = None) -> RunOutput:
    """Stage 1 per trial, stage 2 across trials, stage 3 on the stage-2 winner."""
    t0 = time.perf_counter()
    data = data if data is not None else make_dataset(cfg.task())
    ledger = StreamLedger(cfg.master_seed)
    run_id = run_id_for("pipeline", cfg)
    s1 = run_stage1(cfg.space(), data, cfg, ledger)
    s2, winner, s2_results = run_stage2([r.arch for r in s1], data, cfg, ledger)
    s3 = run_stage3(winner, data, cfg, ledger)

    records = [RunRecord(run_id, "1", r.trial, 0, str(r.arch), cfg["train.epochs"], "ws_val",
                         r.audit.winner[2], r.search_seconds) for r in s1]
    for t, g in enumerate(s2.genotypes):
        val, test = s2_results[g]
        records.append(RunRecord(run_id, "2", t, 0, g, cfg["stage2.epochs"], "val", val))
        records.append(RunRecord(run_id, "2", t, 0, g, cfg["stage2.epochs"], "test", test))
    records.extend(_stage3_records(run_id, cfg, s3))

    cost = amortized_cost(sum(r.search_seconds for r in s1), sum(r.audit.num_archs for r in s1))
    genotypes = {f"trial{r.trial}": str(r.arch) for r in s1}
    genotypes["winner"] = str(winner)
    out = RunOutput("pipeline", cfg, records, genotypes, ledger)
    out.reports = {
        "stage1": {"trials": [_stage1_dict(r) for r in s1]},
        "stage2": s2.to_dict(),
        "stage3": s3.to_dict(),
        "cost": cost.to_dict(),
    }
    out.text = [s2.render(), s3.render(), render_cost(cost, METHOD_LABELS["pipeline"])]
    out.wall_seconds = time.perf_counter() - t0
    return out


def run_asha_baseline(cfg: PipelineConfig, data: Dataset | None = None,
                      runner: asha_mod.JobRunner | None = None) -> RunOutput:
    """ASHA over proxyless networks, then stage 3 on its winner."""
    t0 = time.perf_counter()
    data = data if data is not None else make_dataset(cfg.task())
    ledger = StreamLedger(cfg.master_seed)
    run_id = run_id_for("asha", cfg)
    ledger.claim("asha/arch-sampler", "asha architecture sampler")
    if runner is None:
        runner = asha_mod.training_runner(
            data, cfg.proxyless_net(), lambda cid: cfg.scratch_train(f"asha/config{cid}/"),
            cfg.master_seed)
    result = asha_mod.run_asha(cfg.space(), cfg.asha(), runner, cfg["asha.workers"], cfg.master_seed)
    for cid in sorted(result.state.entries):
        ledger.claim(f"asha/config{cid}/init", f"asha config {cid}")
        ledger.claim(f"asha/config{cid}/data-order", f"asha config {cid}")
    if result.best is None:
        raise RuntimeError("ASHA produced no completed configuration")
    records = []
    for ev in result.trace:
        if ev.event == "complete":
            arch = result.state.entries[ev.config].arch
            records.append(RunRecord(run_id, "asha", ev.config, 0, str(arch), ev.epochs, "val",
                                     ev.metric, ev.wall_seconds))
    s3 = run_stage3(result.best, data, cfg, ledger)
    records.extend(_stage3_records(run_id, cfg, s3))
    cost = amortized_cost(result.wall_seconds, result.state.distinct_configs())
    out = RunOutput("asha", cfg, records, {"winner": str(result.best)}, ledger)
    out.reports = {
        "asha": {
            "best_config": result.best_id,
            "best_rung": max(result.state.entries[result.best_id].metrics),
            "distinct_configs": result.state.distinct_configs(),
            "total_epochs": result.total_epochs,
            "trace": [e.to_dict() for e in result.trace],
        },
        "stage3": s3.to_dict(),
        "cost": cost.to_dict(),
    }
    out.text = [s3.render(), render_cost(cost, METHOD_LABELS["asha"])]
    out.wall_seconds = time.perf_counter() - t0
    return out


@dataclass
class SweepRow:
    label: str
    values: list[float]
    genotypes: list[str]

    @property
    def best(self) -> float:
        return min(self.values)

    @property
    def average(self) -> float:
        return summarize(self.values).average


def render_sweep(rows: list[SweepRow]) -> str:
    trials = max(len(r.values) for r in rows)
    head = ["Setting"] + [str(i + 1) for i in range(trials)] + ["Best", "Average"]
    body = [[r.label] + [f"{v:.5f}" for v in r.values] + [""] * (trials - len(r.values))
            + [f"{r.best:.5f}", f"{r.average:.5f}"] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(b) for b in body])


def run_sweep(base: PipelineConfig, settings: list[tuple[str, dict]],
              data: Dataset | None = None) -> tuple[list[SweepRow], RunOutput]:
    """Stage 1 + stage 2 per labelled setting; one table row each, in input order."""
    t0 = time.perf_counter()
    ledger = StreamLedger(base.master_seed)
    run_id = run_id_for("sweep", base)
    rows, records, genotypes = [], [], {}
    for n, (label, overrides) in enumerate(settings):
        cfg = base.with_overrides(overrides)
        d = data if data is not None else make_dataset(cfg.task())
        sub = StreamLedger(cfg.master_seed)
        s1 = run_stage1(cfg.space(), d, cfg, sub)
        s2, winner, results = run_stage2([r.arch for r in s1], d, cfg, sub)
        for k, v in sub.entries.items():
            ledger.entries[f"setting{n}:{k}"] = v
        rows.append(SweepRow(label, s2.values, s2.genotypes))
        for t, g in enumerate(s2.genotypes):
            records.append(RunRecord(f"{run_id}:{n}", "2", t, 0, g, cfg["stage2.epochs"],
                                     "val", results[g][0]))
        genotypes[f"{label}/winner"] = str(winner)
    out = RunOutput("sweep", base, records, genotypes, ledger)
    out.reports["sweep"] = [
        {"label": r.label, "values": r.values, "genotypes": r.genotypes, "best": r.best,
         "average": r.average, "overrides": dict(o)}
        for r, (_, o) in zip(rows, settings)
    ]
    out.text = [render_sweep(rows)]
    out.wall_seconds = time.perf_counter() - t0
    return rows, out


METHOD_LABELS = {"pipeline": "random search with weight-sharing",
                 "search-ws": "random search with weight-sharing", "asha": "ASHA"}


def render_cost(cost: CostReport, method: str) -> str:
    return (f"Cost ({method}): total {cost.total_search_seconds:.3f} s / "
            f"{cost.num_archs_evaluated} architectures = "
            f"{cost.amortized_seconds_per_arch:.5f} s per architecture")


def run_given_stage(command: str, cfg: PipelineConfig, data: Dataset | None = None) -> RunOutput:
    """``stage2`` / ``stage3`` on architectures listed under ``arch.genotypes``."""
    t0 = time.perf_counter()
    data = data if data is not None else make_dataset(cfg.task())
    archs = [parse_genotype(g) for g in cfg["arch.genotypes"]]
    if not archs:
        raise ValueError("arch.genotypes: at least one genotype is required")
    ledger = StreamLedger(cfg.master_seed)
    run_id = run_id_for(command, cfg)
    out = RunOutput(command, cfg, [], {}, ledger)
    if command == "stage2":
        s2, winner, results = run_stage2(archs, data, cfg, ledger)
        for t, g in enumerate(s2.genotypes):
            out.records.append(RunRecord(run_id, "2", t, 0, g, cfg["stage2.epochs"], "val", results[g][0]))
            out.records.append(RunRecord(run_id, "2", t, 0, g, cfg["stage2.epochs"], "test", results[g][1]))
        out.genotypes["winner"] = str(winner)
        out.reports["stage2"] = s2.to_dict()
        out.text = [s2.render()]
    else:
        s3 = run_stage3(archs[0], data, cfg, ledger)
        out.records = _stage3_records(run_id, cfg, s3)
        out.genotypes["winner"] = str(archs[0])
        out.reports["stage3"] = s3.to_dict()
        out.text = [s3.render()]
    out.wall_seconds = time.perf_counter() - t0
    return out


def run_oracle(cfg: PipelineConfig, data: Dataset | None = None, limit: int = 500) -> RunOutput:
    """Train every architecture of the space under the stage-2 protocol."""
    t0 = time.perf_counter()
    data = data if data is not None else make_dataset(cfg.task())
    ledger = StreamLedger(cfg.master_seed)
    ledger.claim("oracle/init", "oracle (shared by all architectures)")
    ledger.claim("oracle/data-order", "oracle (shared by all architectures)")
    table = oracle_train_all(cfg.space(), data, cfg.proxyless_net(), cfg.scratch_train("oracle/"),
                             cfg.master_seed, limit)
    run_id = run_id_for("oracle", cfg)
    records = []
    for rank, (g, val, test) in enumerate(table.ranked()):
        records.append(RunRecord(run_id, "oracle", rank, 0, g, cfg["stage2.epochs"], "val", val))
        records.append(RunRecord(run_id, "oracle", rank, 0, g, cfg["stage2.epochs"], "test", test))
    out = RunOutput("oracle", cfg, records, {"best": table.ranked()[0][0]}, ledger)
    out.reports["oracle"] = {"rows": [list(r) for r in table.ranked()], "protocol": table.protocol}
    out.wall_seconds = time.perf_counter() - t0
    return out


COMMANDS = ("search-ws", "asha", "stage2", "stage3", "pipeline", "sweep", "oracle")


def execute(command: str, config: dict | PipelineConfig) -> RunOutput:
    """Run a command from its flat config; used by the CLI and by reruns."""
    cfg = config if isinstance(config, PipelineConfig) else PipelineConfig.from_flat(config)
    if command == "pipeline":
        return run_pipeline(cfg)
    if command == "search-ws":
        return search_ws(cfg)
    if command == "asha":
        return run_asha_baseline(cfg)
    if command in ("stage2", "stage3"):
        return run_given_stage(command, cfg)
    if command == "oracle":
        return run_oracle(cfg)
    if command == "sweep":
        settings = [(s["label"], s["overrides"]) for s in cfg["sweep.settings"]]
        if not settings:
            raise ValueError("sweep.settings: at least one setting is required")
        return run_sweep(cfg, settings)[1]
    raise ValueError(f"unknown command {command!r}")


def write_outputs(out: RunOutput, directory: str | Path) -> Path:
    """Write manifest, results.jsonl, report.txt and report.json atomically.

    Refuses to touch a directory that already holds a completed run.
    """
    target = Path(directory)
    if (target / MANIFEST_NAME).exists():
        raise FileExistsError(f"{target} already holds a completed run")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=target.parent))
    try:
        write_records(tmp / RESULTS_NAME, out.records)
        manifest = out.manifest()
        write_manifest(tmp / MANIFEST_NAME, manifest)
        (tmp / "report.json").write_text(
            json.dumps({"command": out.command, "wall_seconds": out.wall_seconds, **out.reports}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        (tmp / "report.txt").write_text("\n\n".join(out.text) + "\n", encoding="utf-8")
        if target.exists():
            if any(target.iterdir()):
                raise FileExistsError(f"{target} is not empty")
            target.rmdir()
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target
