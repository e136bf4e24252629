"""Desk-scale benchmark tasks and the brute-force oracle over small spaces."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cellnet import CellNet, Dataset, NetConfig, TrainConfig, train_from_scratch
from .numcore import Rng, split_stream
from .searchspace import (
    PTB_OPS,
    SINGLE,
    Architecture,
    SearchSpace,
    enumerate_architectures,
    parse_genotype,
    sample_architecture,
    space_from_dict,
)

TEACHER = "teacher-regression"
SPIRALS = "two-spirals"


@dataclass(frozen=True)
class TaskSpec:
    kind: str = TEACHER
    dim: int = 4
    n_train: int = 256
    n_val: int = 256
    n_test: int = 256
    noise: float = 0.05
    teacher_space: SearchSpace = field(default_factory=lambda: SearchSpace(SINGLE, 3, PTB_OPS))
    teacher_width: int = 8
    teacher_gain: float = 2.0
    teacher_seed: int = 1
    teacher_genotype: str | None = None  # realizable mode: use this architecture as teacher
    data_seed: int = 0
    turns: float = 1.5  # two-spirals only

    def __post_init__(self) -> None:
        if self.kind not in (TEACHER, SPIRALS):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if min(self.dim, self.n_train, self.n_val, self.n_test, self.teacher_width) < 1:
            raise ValueError("task sizes must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.kind == SPIRALS and self.dim != 2:
            raise ValueError("two-spirals requires dim = 2")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["teacher_space"] = self.teacher_space.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> TaskSpec:
        doc = dict(doc)
        if isinstance(doc.get("teacher_space"), dict):
            doc["teacher_space"] = space_from_dict(doc["teacher_space"])
        return cls(**doc)


def _uniform_matrix(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return rng.uniform_array(rows * cols, -1.0, 1.0).reshape(rows, cols)


def teacher_network(spec: TaskSpec) -> tuple[Architecture, CellNet]:
    if spec.teacher_genotype is not None:
        arch = parse_genotype(spec.teacher_genotype)
    else:
        arch = sample_architecture(spec.teacher_space, split_stream(spec.teacher_seed, "teacher/arch"))
    net = CellNet.standalone(arch, spec.dim, NetConfig(spec.teacher_width),
                             split_stream(spec.teacher_seed, "teacher/init"))
    # sharper nonlinearities so architectures are distinguishable
    for p in net.params.values():
        if p.key.role != "readout":
            p.values *= spec.teacher_gain
    return arch, net


def gen_teacher_regression(spec: TaskSpec) -> Dataset:
    """``y = teacher(x) + N(0, noise^2)`` with ``x ~ U[-1, 1]^d``.

    The teacher output is standardised to unit variance on the training inputs
    before noise is added, so ``noise`` is a signal-to-noise knob.
    """
    arch, net = teacher_network(spec)
    splits = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        x = _uniform_matrix(split_stream(spec.data_seed, f"task/x/{name}"), n, spec.dim)
        splits[name] = (x, net.predict(arch, x))
    y_train = splits["train"][1]
    mean, std = float(y_train.mean()), float(y_train.std()) or 1.0
    out = {}
    for name, (x, y) in splits.items():
        noise = split_stream(spec.data_seed, f"task/noise/{name}").normal_array(len(x))
        out[name] = (x, (y - mean) / std + spec.noise * noise.reshape(-1, 1))
    return Dataset(TEACHER, *out["train"], *out["val"], *out["test"], out_dim=1)


def spiral_point(t: float, label: int, turns: float, angle_noise: float = 0.0) -> tuple[float, float]:
    """Point at parameter ``t`` in (0, 1] of spiral ``label`` (radius ``t``)."""
    theta = 2.0 * math.pi * turns * t + math.pi * label + angle_noise
    return t * math.cos(theta), t * math.sin(theta)


def gen_two_spirals(spec: TaskSpec) -> Dataset:
    """Two interleaved spirals; labels alternate 0, 1, 0, ... so classes balance."""
    out = {}
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        rng = split_stream(spec.data_seed, f"task/spiral/{name}")
        xs = np.empty((n, 2))
        labels = np.arange(n, dtype=np.int64) % 2
        for k in range(n):
            t = rng.random()
            jitter = spec.noise * rng.normal()
            xs[k] = spiral_point(t, int(labels[k]), spec.turns, jitter)
        out[name] = (xs, labels)
    return Dataset(SPIRALS, *out["train"], *out["val"], *out["test"], out_dim=2)


def make_dataset(spec: TaskSpec) -> Dataset:
    return gen_two_spirals(spec) if spec.kind == SPIRALS else gen_teacher_regression(spec)


@dataclass
class OracleTable:
    space: SearchSpace
    protocol: dict
    rows: dict[str, tuple[float, float]]  # genotype -> (val, test)

    def ranked(self) -> list[tuple[str, float, float]]:
        return sorted(((g, v, t) for g, (v, t) in self.rows.items()), key=lambda r: (r[1], r[0]))

    def rank_of(self, genotype: str) -> int:
        """1-based rank by validation metric."""
        for pos, (g, _, _) in enumerate(self.ranked(), start=1):
            if g == genotype:
                return pos
        raise KeyError(genotype)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"space": self.space.to_dict(), "protocol": self.protocol},
                                sort_keys=True) + "\n")
            for g, v, t in self.ranked():
                fh.write(json.dumps({"genotype": g, "val": v, "test": t}, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> OracleTable:
        with open(path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        head, rest = lines[0], lines[1:]
        rows = {r["genotype"]: (r["val"], r["test"]) for r in rest}
        return cls(space_from_dict(head["space"]), head["protocol"], rows)


def oracle_train_all(space: SearchSpace, data: Dataset, net_cfg: NetConfig,
                     train_cfg: TrainConfig, seed: int, limit: int = 500) -> OracleTable:
    """Train every architecture from scratch under one protocol and one seed."""
    rows = {}
    for arch in enumerate_architectures(space, limit):
        res = train_from_scratch(arch, data, net_cfg, train_cfg, seed)
        rows[str(arch)] = (res.val, res.test)
    protocol = {
        "width": net_cfg.width,
        "epochs": train_cfg.epochs,
        "batch_size": train_cfg.batch_size,
        "lr": train_cfg.lr,
        "clip": train_cfg.clip,
        "seed": seed,
    }
    return OracleTable(space, protocol, rows)
