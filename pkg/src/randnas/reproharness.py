"""Run records, seed manifests, exact-rerun verification and reporting helpers.

Hashes are SHA-256 over canonical JSON (sorted keys, no whitespace). Wall-clock
times stay out of manifests and out of every comparison. The records hash is taken over the
sorted canonical records, so reordering ``results.jsonl`` does not change it.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from . import __version__

MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.jsonl"

TUNING_NOTE = (
    "No hyperparameter tuning of final architectures; search meta-hyperparameters "
    "are exactly the recorded config."
)
SEARCH_CODE = ("searchspace.py", "cellnet.py", "asha.py", "pipeline.py")
EVALUATION_CODE = ("cellnet.py", "pipeline.py")


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunRecord:
    run_id: str
    stage: str  # "1" | "2" | "3" | "asha" | "oracle"
    trial: int
    seed: int
    genotype: str
    epoch: int
    metric_name: str
    metric: float
    wall_seconds: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.metric):
            raise ValueError(f"non-finite metric in record {self.key()}")

    def key(self) -> tuple:
        return (self.run_id, self.stage, self.trial, self.seed, self.epoch, self.metric_name)

    def deterministic(self) -> dict:
        doc = asdict(self)
        doc.pop("wall_seconds")
        return doc

    def to_json(self) -> str:
        return canonical_json(asdict(self))


def check_unique(records: Iterable[RunRecord]) -> None:
    seen = set()
    for r in records:
        if r.key() in seen:
            raise ValueError(f"duplicate record key {r.key()}")
        seen.add(r.key())


def write_records(path: str | Path, records: list[RunRecord]) -> None:
    check_unique(records)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RunRecord(**json.loads(line)) for line in fh if line.strip()]


def records_hash(records: Iterable[RunRecord]) -> str:
    lines = sorted(canonical_json(r.deterministic()) for r in records)
    return sha256("\n".join(lines))


# --- manifest -----------------------------------------------------------------

UNHASHED_FIELDS = ("hash",)


@dataclass
class Manifest:
    doc: dict

    @property
    def command(self) -> str:
        return self.doc["command"]

    @property
    def config(self) -> dict:
        return self.doc["config"]

    @property
    def genotypes(self) -> dict[str, str]:
        return self.doc.get("genotypes", {})

    @property
    def stored_hash(self) -> str | None:
        return self.doc.get("hash")

    def compute_hash(self) -> str:
        return sha256(canonical_json({k: v for k, v in self.doc.items() if k not in UNHASHED_FIELDS}))

    def hash_ok(self) -> bool:
        return self.stored_hash == self.compute_hash()

    def text(self) -> str:
        return canonical_json(self.doc) + "\n"


def build_manifest(command: str, config: dict, streams: dict[str, str], space: dict | None,
                   genotypes: dict[str, str], records: list[RunRecord]) -> Manifest:
    doc = {
        "artifact_version": __version__,
        "command": command,
        "config": config,
        "master_seed": config.get("seeds.master"),
        "streams": streams,
        "space": space,
        "genotypes": genotypes,
        "records_hash": records_hash(records),
        "num_records": len(records),
        "code": {"search": list(SEARCH_CODE), "evaluation": list(EVALUATION_CODE)},
        "tuning": TUNING_NOTE,
    }
    manifest = Manifest(doc)
    doc["hash"] = manifest.compute_hash()
    return manifest


def write_manifest(path: str | Path, manifest: Manifest) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    path.write_text(manifest.text(), encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return Manifest(json.loads(path.read_text(encoding="utf-8")))


# --- exact reproduction -----------------------------------------------------------------


@dataclass
class ReproReport:
    exact: bool
    diffs: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = ["exactly reproducible" if self.exact else "NOT exactly reproducible"]
        lines += [f"warning: {w}" for w in self.warnings]
        lines += [f"diff: {d}" for d in self.diffs]
        return "\n".join(lines)


ORDER_DEPENDENT = "order-dependent, exactness not guaranteed"


def diff_records(expected: list[RunRecord], actual: list[RunRecord]) -> list[str]:
    exp = {r.key(): r.deterministic() for r in expected}
    act = {r.key(): r.deterministic() for r in actual}
    diffs = []
    for key in sorted(set(exp) | set(act), key=str):
        if key not in act:
            diffs.append(f"record {key} missing from rerun")
        elif key not in exp:
            diffs.append(f"record {key} only in rerun")
        elif exp[key] != act[key]:
            changed = [f for f in exp[key] if exp[key][f] != act[key][f]]
            for f in changed:
                diffs.append(f"record {key} field {f}: {exp[key][f]!r} != {act[key][f]!r}")
    return diffs


def verify_exact(manifest: Manifest, records: list[RunRecord] | None = None) -> ReproReport:
    """Re-execute the manifest's run and compare every deterministic output."""
    from .pipeline import execute  # deferred: pipeline imports this module

    report = ReproReport(exact=True)
    if manifest.command == "asha" and int(manifest.config.get("asha.workers", 1)) > 1:
        report.exact = False
        report.warnings.append(ORDER_DEPENDENT)
        return report
    if not manifest.hash_ok():
        report.diffs.append("manifest content hash mismatch (manifest edited after writing)")
    rerun = execute(manifest.command, manifest.config)
    for name in sorted(set(manifest.genotypes) | set(rerun.genotypes)):
        old, new = manifest.genotypes.get(name), rerun.genotypes.get(name)
        if old != new:
            report.diffs.append(f"genotype {name}: {old} != {new}")
    if records is not None:
        report.diffs.extend(diff_records(records, rerun.records))
    if records_hash(rerun.records) != manifest.doc.get("records_hash"):
        report.diffs.append("records hash differs")
    report.exact = not report.diffs
    return report


# --- aggregation ----------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    n: int
    best: float
    average: float
    std: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(values: list[float]) -> Summary:
    """Best = min, Average = arithmetic mean, std = population std (0 for n=1)."""
    if not values:
        raise ValueError("cannot summarize an empty list")
    return Summary(len(values), min(values), statistics.fmean(values), statistics.pstdev(values))


def aggregate(records: list[RunRecord]) -> dict[tuple[str, str], Summary]:
    """Summaries per ``(stage, metric_name)`` over all matching records."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.stage, r.metric_name), []).append(r.metric)
    return {k: summarize(v) for k, v in sorted(groups.items())}


# --- reproducibility checklist -----------------------------------------------------


@dataclass
class Checklist:
    search_code: bool
    evaluation_code: bool
    random_seeds: bool
    tuning_docs: bool

    @property
    def exactly_reproducible(self) -> bool:
        return self.search_code and self.evaluation_code and self.random_seeds and self.tuning_docs

    def render(self, name: str = "this artifact") -> str:
        yn = lambda b: "Yes" if b else "No"  # noqa: E731
        head = ("Run", "Architecture Search Code", "Model Evaluation Code", "Random Seeds",
                "Hyperparameter Tuning")
        row = (name, yn(self.search_code), yn(self.evaluation_code), yn(self.random_seeds),
               "Documented" if self.tuning_docs else "Undocumented")
        widths = [max(len(h), len(c)) for h, c in zip(head, row)]
        fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
        verdict = "exactly reproducible" if self.exactly_reproducible else "not exactly reproducible"
        return "\n".join([fmt(head), "-+-".join("-" * w for w in widths), fmt(row),
                          f"verdict: {verdict}"])


def checklist_report(manifest: Manifest | None, tree: str | Path | None = None) -> Checklist:
    """Fill the four criteria from a manifest and a source tree.

    ``tree`` defaults to this package's own directory.
    """
    root = Path(tree) if tree is not None else Path(__file__).parent
    doc = manifest.doc if manifest is not None else {}
    code = doc.get("code", {})

    def present(files) -> bool:
        return bool(files) and all(any(root.rglob(f)) for f in files)

    seeds = doc.get("master_seed") is not None and bool(doc.get("streams"))
    if doc.get("command") == "asha" and int(doc.get("config", {}).get("asha.workers", 1)) > 1:
        seeds = False  # completion order, not the seeds, decides promotions
    tuning = bool(doc.get("tuning")) or any(root.rglob("TUNING.md"))
    return Checklist(present(code.get("search")), present(code.get("evaluation")), seeds, tuning)
