"""Flat dotted-key configuration shared by the pipeline, manifests and CLI.

Config files are line oriented::

    # comment
    space.num_nodes = 2
    space.ops = tanh, relu, sigmoid, identity
    train.clip = 0.25

Precedence is ``--set`` flag > config file > built-in default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .asha import AshaParams
from .cellnet import NetConfig, SelectConfig, TrainConfig
from .searchspace import PTB_OPS, SearchSpace, validate_space
from .tasks import TaskSpec


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _ops(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


def _genotypes(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(s.strip() for s in str(text).split("|") if s.strip())


def _settings(value) -> tuple[dict, ...]:
    """Sweep settings: a JSON-style list, or ``label:key=v;key=v`` items joined by ``|``."""
    if isinstance(value, str):
        items = []
        for chunk in (c.strip() for c in value.split("|")):
            if not chunk:
                continue
            label, _, body = chunk.partition(":")
            overrides = {}
            for pair in filter(None, (p.strip() for p in body.split(";"))):
                key, _, raw = pair.partition("=")
                overrides[key.strip()] = raw.strip()
            items.append({"label": label.strip(), "overrides": overrides})
        value = items
    out = []
    for item in value:
        for key, raw in item["overrides"].items():
            if key not in SCHEMA or key == "sweep.settings":
                raise ValueError(f"unknown sweep key {key!r}")
            SCHEMA[key][0](raw)
        out.append({"label": str(item["label"]), "overrides": dict(item["overrides"])})
    return tuple(out)


def _opt_str(text):
    return None if text in (None, "", "none", "None") else str(text)


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "space.family": (str, "single"),
    "space.num_nodes": (int, 2),
    "space.ops": (_ops, PTB_OPS),
    "space.num_cells": (int, 1),
    "task.kind": (str, "teacher-regression"),
    "task.dim": (int, 4),
    "task.n_train": (int, 256),
    "task.n_val": (int, 256),
    "task.n_test": (int, 256),
    "task.noise": (float, 0.05),
    "task.teacher_family": (str, "single"),
    "task.teacher_nodes": (int, 3),
    "task.teacher_ops": (_ops, PTB_OPS),
    "task.teacher_cells": (int, 1),
    "task.teacher_width": (int, 8),
    "task.teacher_gain": (float, 2.0),
    "task.teacher_seed": (int, 1),
    "task.teacher_genotype": (_opt_str, None),
    "task.data_seed": (int, 0),
    "task.turns": (float, 1.5),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 16),
    "train.lr": (float, 0.1),
    "train.clip": (float, 1.0),
    "net.proxy_width": (int, 16),
    "net.proxyless_width": (int, 32),
    "select.num_archs": (int, 64),
    "select.cheap_batches": (int, 10),
    "select.shard_size": (int, 1000),
    "select.top_per_shard": (int, 10),
    "select.eval_batch_size": (int, 16),
    "stage2.epochs": (int, 30),
    "stage2.batch_size": (int, 16),
    "stage2.lr": (float, 0.05),
    "stage2.clip": (float, 1.0),
    "stage3.seeds": (int, 10),
    "stage3.mode": (str, "seeds"),
    "stage3.epochs": (_opt_int, None),
    "asha.r": (int, 1),
    "asha.eta": (int, 4),
    "asha.max_resource": (int, 64),
    "asha.workers": (int, 1),
    "asha.budget_epochs": (int, 256),
    "pipeline.trials": (int, 4),
    "arch.genotypes": (_genotypes, ()),
    "sweep.settings": (_settings, ()),
    "seeds.master": (int, 0),
}

DEFAULTS = {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key: str, raw: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def parse_assignment(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "expected key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    return key, parse_value(key, raw)


@dataclass(frozen=True)
class PipelineConfig:
    values: dict

    @classmethod
    def default(cls) -> PipelineConfig:
        return cls(dict(DEFAULTS))

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> PipelineConfig:
        cfg = cls.default().with_overrides(flat)
        return cfg

    def with_overrides(self, overrides: dict[str, Any]) -> PipelineConfig:
        merged = dict(self.values)
        for key, raw in overrides.items():
            merged[key] = parse_value(key, raw)
        cfg = PipelineConfig(merged)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def master_seed(self) -> int:
        return self.values["seeds.master"]

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for k, v in self.values.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    # --- typed views -------------------------------------------------------

    def space(self) -> SearchSpace:
        v = self.values
        return SearchSpace(v["space.family"], v["space.num_nodes"], v["space.ops"], v["space.num_cells"])

    def task(self) -> TaskSpec:
        v = self.values
        teacher = SearchSpace(v["task.teacher_family"], v["task.teacher_nodes"],
                              v["task.teacher_ops"], v["task.teacher_cells"])
        return TaskSpec(
            kind=v["task.kind"], dim=v["task.dim"], n_train=v["task.n_train"],
            n_val=v["task.n_val"], n_test=v["task.n_test"], noise=v["task.noise"],
            teacher_space=teacher, teacher_width=v["task.teacher_width"],
            teacher_gain=v["task.teacher_gain"], teacher_seed=v["task.teacher_seed"],
            teacher_genotype=v["task.teacher_genotype"], data_seed=v["task.data_seed"],
            turns=v["task.turns"],
        )

    def out_dim(self) -> int:
        return 2 if self.values["task.kind"] == "two-spirals" else 1

    def proxy_net(self) -> NetConfig:
        return NetConfig(self.values["net.proxy_width"], self.out_dim(), proxy=True)

    def proxyless_net(self) -> NetConfig:
        return NetConfig(self.values["net.proxyless_width"], self.out_dim(), proxy=False)

    def stage1_train(self, label_prefix: str = "") -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.epochs"], v["train.batch_size"], v["train.lr"], v["train.clip"],
                           seed=self.master_seed,
                           arch_label=f"{label_prefix}arch-sampler",
                           init_label=f"{label_prefix}init",
                           order_label=f"{label_prefix}data-order")

    def scratch_train(self, label_prefix: str = "", epochs: int | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(v["stage2.epochs"] if epochs is None else epochs, v["stage2.batch_size"],
                           v["stage2.lr"], v["stage2.clip"], seed=self.master_seed,
                           init_label=f"{label_prefix}init", order_label=f"{label_prefix}data-order")

    def select(self) -> SelectConfig:
        v = self.values
        return SelectConfig(v["select.num_archs"], v["select.cheap_batches"], v["select.shard_size"],
                            v["select.top_per_shard"], v["select.eval_batch_size"])

    def asha(self) -> AshaParams:
        v = self.values
        return AshaParams(v["asha.r"], v["asha.eta"], v["asha.max_resource"],
                          max_total_epochs=v["asha.budget_epochs"])

    def stage3_epochs(self) -> int:
        e = self.values["stage3.epochs"]
        return 3 * self.values["stage2.epochs"] if e is None else e

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first offending key."""
        v = self.values
        problems = validate_space(self.space())
        if problems:
            raise ConfigError("space." + problems[0].split(":")[0], problems[0])
        checks = [
            ("asha.eta", lambda: self.asha()),
            ("asha.r", lambda: self.asha()),
            ("task.kind", lambda: self.task()),
            ("train.lr", lambda: self.stage1_train()),
            ("stage2.lr", lambda: self.scratch_train()),
            ("select.num_archs", lambda: self.select()),
            ("net.proxy_width", lambda: self.proxy_net()),
        ]
        for key, build in checks:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(_blame(key, str(exc)), str(exc)) from None
        if v["net.proxy_width"] >= v["net.proxyless_width"]:
            raise ConfigError("net.proxy_width", "proxy width must be smaller than proxyless width")
        if v["pipeline.trials"] < 1:
            raise ConfigError("pipeline.trials", "must be ≥ 1")
        if v["stage3.seeds"] < 1:
            raise ConfigError("stage3.seeds", "must be ≥ 1")
        if v["stage3.mode"] not in ("seeds", "epochs"):
            raise ConfigError("stage3.mode", "must be 'seeds' or 'epochs'")
        if v["asha.workers"] < 1:
            raise ConfigError("asha.workers", "must be ≥ 1")
        if v["asha.budget_epochs"] < 1:
            raise ConfigError("asha.budget_epochs", "must be ≥ 1")


def _blame(default_key: str, message: str) -> str:
    section = default_key.split(".")[0]
    for key in SCHEMA:
        if key.startswith(section + ".") and message.startswith(key.split(".")[1]):
            return key
    return default_key
