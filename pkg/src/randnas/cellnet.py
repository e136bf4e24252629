"""Cell networks, weight-sharing training/evaluation and from-scratch training.

Network shape (row-vector convention, ``W`` is ``(out, in)``):

* single family: ``h0 = tanh(x W_stem^T)``; node ``i`` = ``op(h_pred W_edge^T)``
* dual family: ``h0 = x W_a^T``, ``h1 = x W_b^T``; node ``i`` is the sum of its
  two slot terms, a zero op contributing nothing
* cell output is the mean of the N node outputs; a second cell reads the first
  cell's output; prediction = ``cell_out W_readout^T``. No biases.

A :class:`CellNet` built with :meth:`CellNet.shared` holds one ``h x h`` edge
matrix for every legal ``(cell, node, pred, slot)``; one built with
:meth:`CellNet.standalone` holds only the edges its architecture activates.
Initialisation order: per cell the stems (slot order), then edges in
``(node, pred, slot)`` order, then the readout.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .numcore import ParamKey, ParamTensor, Rng, split_stream
from .searchspace import DUAL, SINGLE, Architecture, SearchSpace, require_valid, sample_architecture

log = logging.getLogger(__name__)

ZERO = "zero"


@dataclass(frozen=True)
class NetConfig:
    width: int
    out_dim: int = 1
    proxy: bool = False

    def __post_init__(self) -> None:
        if self.width < 1 or self.out_dim < 1:
            raise ValueError("width and out_dim must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    clip: float
    seed: int = 0
    arch_label: str = "arch-sampler"
    init_label: str = "init"
    order_label: str = "data-order"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        numcore.SgdConfig(self.lr, self.clip)


@dataclass(frozen=True)
class SelectConfig:
    num_archs: int = 64
    cheap_batches: int = 10
    shard_size: int = 1000
    top_per_shard: int = 10
    eval_batch_size: int = 16

    def __post_init__(self) -> None:
        if self.num_archs < 1:
            raise ValueError("num_archs must be >= 1")
        if self.top_per_shard > self.shard_size:
            raise ValueError("top_per_shard must be <= shard_size")
        if min(self.cheap_batches, self.shard_size, self.top_per_shard, self.eval_batch_size) < 1:
            raise ValueError("select sizes must be >= 1")


@dataclass
class Dataset:
    kind: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    out_dim: int = 1

    @property
    def loss_kind(self) -> str:
        return "xent" if self.kind == "two-spirals" else "mse"

    @property
    def in_dim(self) -> int:
        return self.x_train.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"x_{name}"), getattr(self, f"y_{name}")


class LossError(FloatingPointError):
    pass


def compute_loss(pred: np.ndarray, y: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``pred``."""
    if kind == "mse":
        diff = pred - y.reshape(pred.shape)
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if kind == "xent":
        z = pred - pred.max(axis=1, keepdims=True)
        ez = np.exp(z)
        total = ez.sum(axis=1, keepdims=True)
        labels = y.astype(np.int64)
        rows = np.arange(len(labels))
        loss = float(np.mean(np.log(total[:, 0]) - z[rows, labels]))
        grad = ez / total
        grad[rows, labels] -= 1.0
        return loss, grad / len(labels)
    raise ValueError(f"unknown loss kind {kind!r}")


def param_count(space: SearchSpace, in_dim: int, width: int, out_dim: int) -> int:
    """Closed-form parameter count of the shared-weights network.

    single: ``h*d + h^2 * N(N+1)/2 + out*h``
    dual:   sum over cells of ``2*h*d_c + h^2 * N(N+3)``, with ``d_0 = d`` and
            ``d_1 = h``, plus ``out*h``.
    """
    n, h = space.num_nodes, width
    if space.family == SINGLE:
        return h * in_dim + h * h * n * (n + 1) // 2 + out_dim * h
    total = out_dim * h
    for c in range(space.num_cells):
        total += 2 * h * (in_dim if c == 0 else h) + h * h * n * (n + 3)
    return total


def legal_edges(space: SearchSpace) -> list[ParamKey]:
    keys = []
    slots = range(space.edges_per_node)
    for c in range(space.num_cells):
        for i in range(1, space.num_nodes + 1):
            for p in range(space.num_preds(i)):
                keys.extend(ParamKey("edge", c, i, p, s) for s in slots)
    return keys


class CellNet:
    """Parameter store plus forward/backward for one search space."""

    def __init__(self, space: SearchSpace, in_dim: int, cfg: NetConfig,
                 params: dict[ParamKey, ParamTensor], arch: Architecture | None = None):
        self.space = space
        self.in_dim = in_dim
        self.cfg = cfg
        self.params = params
        self.arch = arch  # fixed architecture for standalone networks

    @property
    def space_id(self) -> str:
        return self.space.space_id

    @property
    def width(self) -> int:
        return self.cfg.width

    @classmethod
    def shared(cls, space: SearchSpace, in_dim: int, cfg: NetConfig, rng: Rng) -> CellNet:
        require_valid(space)
        return cls(space, in_dim, cfg, cls._init(space, in_dim, cfg, legal_edges(space), rng))

    @classmethod
    def standalone(cls, arch: Architecture, in_dim: int, cfg: NetConfig, rng: Rng) -> CellNet:
        space = arch.space
        edges = sorted(ParamKey("edge", c, i, p, s) for c, i, p, s, _ in arch.active_edges())
        return cls(space, in_dim, cfg, cls._init(space, in_dim, cfg, edges, rng), arch)

    @staticmethod
    def _init(space, in_dim, cfg, edges, rng) -> dict[ParamKey, ParamTensor]:
        h = cfg.width
        params: dict[ParamKey, ParamTensor] = {}
        by_cell: dict[int, list[ParamKey]] = {}
        for key in edges:
            by_cell.setdefault(key.cell, []).append(key)
        for c in range(space.num_cells):
            d = in_dim if c == 0 else h
            for s in range(space.edges_per_node):
                key = ParamKey("stem", c, slot=s)
                params[key] = numcore.init_uniform(key, (h, d), d, rng)
            for key in by_cell.get(c, []):
                params[key] = numcore.init_uniform(key, (h, h), h, rng)
        key = ParamKey("readout")
        params[key] = numcore.init_uniform(key, (cfg.out_dim, h), h, rng)
        return params

    def num_params(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def edge_keys(self) -> list[ParamKey]:
        return [k for k in self.params if k.role == "edge"]

    def active_keys(self, arch: Architecture) -> list[ParamKey]:
        keys = [k for k in self.params if k.role != "edge"]
        keys.extend(ParamKey("edge", c, i, p, s) for c, i, p, s, _ in arch.active_edges())
        return keys

    def active_params(self, arch: Architecture) -> list[ParamTensor]:
        return [self.params[k] for k in self.active_keys(arch)]

    def copy(self) -> CellNet:
        return CellNet(self.space, self.in_dim, self.cfg,
                       {k: p.copy() for k, p in self.params.items()}, self.arch)

    def _resolve(self, arch: Architecture | None) -> Architecture:
        arch = arch if arch is not None else self.arch
        if arch is None:
            raise ValueError("a shared network needs an architecture")
        if arch.space_id != self.space_id:
            raise ValueError("architecture does not belong to this network's search space")
        return arch

    def forward(self, arch: Architecture | None, x: np.ndarray):
        """Predictions and the activation cache needed by :meth:`backward`."""
        arch = self._resolve(arch)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        P = self.params
        n = self.space.num_nodes
        first = 1 if self.space.family == SINGLE else 2
        caches = []
        inp = x
        for c, cell in enumerate(arch.cells):
            if self.space.family == SINGLE:
                states = [np.tanh(inp @ P[ParamKey("stem", c)].values.T)]
            else:
                states = [inp @ P[ParamKey("stem", c, slot=0)].values.T,
                          inp @ P[ParamKey("stem", c, slot=1)].values.T]
            edges = []
            for i, decision in enumerate(cell, start=1):
                total = None
                for slot, (pred, op) in enumerate(decision):
                    if op == ZERO:
                        continue
                    key = ParamKey("edge", c, i, pred, slot)
                    s = states[pred] @ P[key].values.T
                    o = numcore.apply_op(op, s)
                    edges.append((first + i - 1, key, pred, op, s, o))
                    total = o if total is None else total + o
                states.append(total if total is not None else np.zeros((len(x), self.width)))
            out = sum(states[first:]) / n
            caches.append((inp, states, edges))
            inp = out
        pred = inp @ P[ParamKey("readout")].values.T
        return pred, (caches, inp)

    def backward(self, cache, d_pred: np.ndarray) -> None:
        """Accumulate parameter gradients; touches only activated edges."""
        caches, final = cache
        P = self.params
        readout = P[ParamKey("readout")]
        readout.grad += d_pred.T @ final
        d_in = d_pred @ readout.values
        n = self.space.num_nodes
        first = 1 if self.space.family == SINGLE else 2
        for c in range(len(caches) - 1, -1, -1):
            inp, states, edges = caches[c]
            d_states = [np.zeros_like(s) for s in states]
            for j in range(first, len(states)):
                d_states[j] += d_in / n
            for j, key, pred, op, s, o in reversed(edges):
                ds = numcore.op_backward(op, s, o, d_states[j])
                W = P[key]
                W.grad += ds.T @ states[pred]
                d_states[pred] += ds @ W.values
            if self.space.family == SINGLE:
                stem = P[ParamKey("stem", c)]
                da = d_states[0] * (1.0 - states[0] * states[0])
                stem.grad += da.T @ inp
                if c > 0:
                    d_in = da @ stem.values
            else:
                sa, sb = P[ParamKey("stem", c, slot=0)], P[ParamKey("stem", c, slot=1)]
                sa.grad += d_states[0].T @ inp
                sb.grad += d_states[1].T @ inp
                if c > 0:
                    d_in = d_states[0] @ sa.values + d_states[1] @ sb.values

    def predict(self, arch: Architecture | None, x: np.ndarray) -> np.ndarray:
        return self.forward(arch, x)[0]

    def loss(self, arch: Architecture | None, x: np.ndarray, y: np.ndarray, kind: str) -> float:
        return compute_loss(self.predict(arch, x), y, kind)[0]

    def loss_and_grads(self, arch: Architecture | None, x: np.ndarray, y: np.ndarray,
                       kind: str) -> float:
        """Zero all gradients, then fill those of the active parameters."""
        numcore.zero_grads(self.params.values())
        pred, cache = self.forward(arch, x)
        loss, d_pred = compute_loss(pred, y, kind)
        if not np.isfinite(loss):
            raise LossError("non-finite loss")
        self.backward(cache, d_pred)
        return loss


def init_shared(space: SearchSpace, in_dim: int, cfg: NetConfig, rng: Rng) -> CellNet:
    return CellNet.shared(space, in_dim, cfg, rng)


# --- training -------------------------------------------------------------


@dataclass
class TrainLog:
    iterations: int = 0
    sampled_arch_events: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "sampled_arch_events": self.sampled_arch_events,
            "epoch_losses": self.epoch_losses,
            "wall_seconds": self.wall_seconds,
        }


def minibatches(n: int, batch_size: int, order: list[int] | None = None):
    idx = order if order is not None else list(range(n))
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _step(net: CellNet, arch: Architecture, x, y, kind: str, lr: float, clip: float) -> float:
    loss = net.loss_and_grads(arch, x, y, kind)
    active = net.active_params(arch)
    numcore.clip_global_norm(active, clip)
    numcore.sgd_step(active, lr)
    return loss


def train_shared(space: SearchSpace, weights: CellNet, data: Dataset,
                 cfg: TrainConfig) -> tuple[CellNet, TrainLog]:
    """One freshly sampled architecture per minibatch; weights updated in place."""
    arch_rng = split_stream(cfg.seed, cfg.arch_label)
    order_rng = split_stream(cfg.seed, cfg.order_label)
    trace = TrainLog()
    start = time.perf_counter()
    n = len(data.x_train)
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in minibatches(n, cfg.batch_size, order_rng.permutation(n)):
            arch = sample_architecture(space, arch_rng)
            trace.sampled_arch_events += 1
            try:
                loss = _step(weights, arch, data.x_train[idx], data.y_train[idx],
                             data.loss_kind, cfg.lr, cfg.clip)
            except FloatingPointError as exc:
                raise LossError(f"iteration {trace.iterations}: {exc}") from exc
            trace.iterations += 1
            total += loss * len(idx)
            seen += len(idx)
        trace.epoch_losses.append(total / seen)
        log.debug("shared epoch %d loss %.5f", epoch, trace.epoch_losses[-1])
    trace.wall_seconds = time.perf_counter() - start
    return weights, trace


def score_archs(weights: CellNet, archs: list[Architecture], x: np.ndarray, y: np.ndarray,
                batch_size: int = 16, batches_limit: int | None = None) -> list[float]:
    """Mean minibatch loss of each architecture, in input order. Pure."""
    if len(x) == 0:
        raise ValueError("empty evaluation data")
    batches = list(minibatches(len(x), batch_size))
    if batches_limit is not None:
        batches = batches[:batches_limit]
    kind = _loss_kind(y)
    return [float(np.mean([weights.loss(a, x[b], y[b], kind) for b in batches])) for a in archs]


def evaluate_with_shared(weights: CellNet, archs: list[Architecture], x: np.ndarray,
                         y: np.ndarray, batch_size: int = 16,
                         batches_limit: int | None = None) -> list[tuple[Architecture, float]]:
    """Mean minibatch loss per architecture, ascending; ties keep input order."""
    if not archs:
        raise ValueError("archs must be non-empty")
    metrics = score_archs(weights, archs, x, y, batch_size, batches_limit)
    order = sorted(range(len(archs)), key=lambda i: (metrics[i], i))
    return [(archs[i], metrics[i]) for i in order]


def _loss_kind(y: np.ndarray) -> str:
    return "xent" if np.issubdtype(y.dtype, np.integer) else "mse"


@dataclass
class ShardAudit:
    shard: int
    candidates: list[tuple[int, str, float]]   # (sample index, genotype, cheap metric)
    finalists: list[tuple[int, str, float]]    # (sample index, genotype, full metric)


@dataclass
class SelectionAudit:
    num_archs: int
    shards: list[ShardAudit]
    winner: tuple[int, str, float]

    @property
    def full_evaluations(self) -> int:
        return sum(len(s.finalists) for s in self.shards)

    def to_dict(self) -> dict:
        return {
            "num_archs": self.num_archs,
            "winner": list(self.winner),
            "shards": [
                {"shard": s.shard,
                 "candidates": [list(c) for c in s.candidates],
                 "finalists": [list(f) for f in s.finalists]}
                for s in self.shards
            ],
        }


def select_final(space: SearchSpace, weights: CellNet, x_val: np.ndarray, y_val: np.ndarray,
                 cfg: SelectConfig, rng: Rng) -> tuple[Architecture, SelectionAudit]:
    """Sharded two-level selection: cheap score on a few batches, full score on the best."""
    archs = [sample_architecture(space, rng) for _ in range(cfg.num_archs)]
    shards = []
    best = None
    for s, start in enumerate(range(0, len(archs), cfg.shard_size)):
        chunk = list(range(start, min(start + cfg.shard_size, len(archs))))
        cheap = score_archs(weights, [archs[i] for i in chunk], x_val, y_val,
                            cfg.eval_batch_size, cfg.cheap_batches)
        ranked = sorted(zip(chunk, cheap), key=lambda t: (t[1], t[0]))
        top = [i for i, _ in ranked[:cfg.top_per_shard]]
        full = score_archs(weights, [archs[i] for i in top], x_val, y_val, cfg.eval_batch_size)
        finalists = sorted(zip(top, full), key=lambda t: (t[1], t[0]))
        for i, metric in finalists:
            if best is None or (metric, i) < (best[2], best[0]):
                best = (i, str(archs[i]), metric)
        shards.append(ShardAudit(s, [(i, str(archs[i]), m) for i, m in ranked],
                                 [(i, str(archs[i]), m) for i, m in finalists]))
    assert best is not None
    return archs[best[0]], SelectionAudit(len(archs), shards, best)


# --- from-scratch training ------------------------------------------------------


class ScratchRun:
    """A standalone network with its own data-order stream; resumable by epochs."""

    def __init__(self, arch: Architecture, data: Dataset, net_cfg: NetConfig,
                 train_cfg: TrainConfig, master_seed: int):
        self.arch = arch
        self.data = data
        self.train_cfg = train_cfg
        self.model = CellNet.standalone(arch, data.in_dim, net_cfg,
                                        split_stream(master_seed, train_cfg.init_label))
        self.order_rng = split_stream(master_seed, train_cfg.order_label)
        self.epochs_done = 0
        self.log = TrainLog()

    def train_to(self, epochs: int) -> ScratchRun:
        cfg, data = self.train_cfg, self.data
        start = time.perf_counter()
        n = len(data.x_train)
        while self.epochs_done < epochs:
            total = 0.0
            for idx in minibatches(n, cfg.batch_size, self.order_rng.permutation(n)):
                total += len(idx) * _step(self.model, self.arch, data.x_train[idx],
                                          data.y_train[idx], data.loss_kind, cfg.lr, cfg.clip)
                self.log.iterations += 1
            self.log.epoch_losses.append(total / n)
            self.epochs_done += 1
        self.log.wall_seconds += time.perf_counter() - start
        return self

    def evaluate(self, split: str = "val") -> float:
        x, y = self.data.split(split)
        loss = self.model.loss(self.arch, x, y, self.data.loss_kind)
        if not np.isfinite(loss):
            raise LossError(f"non-finite {split} loss")
        return loss


@dataclass
class ScratchResult:
    val: float
    test: float
    model: CellNet
    log: TrainLog


def train_from_scratch(arch: Architecture, data: Dataset, net_cfg: NetConfig,
                       train_cfg: TrainConfig, master_seed: int,
                       epochs: int | None = None) -> ScratchResult:
    """Train only the architecture's own edges; final-epoch val and test loss."""
    run = ScratchRun(arch, data, net_cfg, train_cfg, master_seed)
    run.train_to(train_cfg.epochs if epochs is None else epochs)
    return ScratchResult(run.evaluate("val"), run.evaluate("test"), run.model, run.log)
