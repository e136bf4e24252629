"""Deterministic numeric kernel.

Everything stochastic in the package draws from :class:`Rng`, a SplitMix64
generator. Streams are derived from a master seed and a text label:

    state = mix64(master_seed XOR fnv1a64(label))

where ``fnv1a64`` is the 64-bit FNV-1a hash of the UTF-8 label and ``mix64`` is
the SplitMix64 output finalizer (the step below without the increment).
Each draw then advances the state by the golden-gamma constant and returns the
finalized value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


class Rng:
    """SplitMix64 stream. Mutable: every draw advances ``state``."""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & MASK64

    def __repr__(self) -> str:
        return f"Rng(state=0x{self.state:016x})"

    def copy(self) -> Rng:
        return Rng(self.state)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def uniform_int(self, n: int) -> int:
        return rng_uniform_int(self, n)

    def random(self) -> float:
        """Float in the open interval (0, 1): ``((x >> 12) + 0.5) * 2**-52``.

        52 bits so the largest value, ``1 - 2**-53``, is exactly representable.
        """
        return ((self.next_u64() >> 12) + 0.5) * (1.0 / (1 << 52))

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes exactly two draws."""
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            out[i] = low + (high - low) * self.random()
        return out

    def normal_array(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            out[i] = self.normal()
        return out

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the back."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.uniform_int(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def split_stream(master_seed: int, label: str) -> Rng:
    return Rng(mix64((master_seed & MASK64) ^ fnv1a64(label)))


def derive_seed(master_seed: int, label: str) -> int:
    """64-bit child seed; equal to the initial state of ``split_stream``."""
    return split_stream(master_seed, label).state


def rng_uniform_int(rng: Rng, n: int) -> int:
    """Unbiased integer in [0, n) by Lemire's multiply-shift with rejection.

    ``m = x * n`` (128-bit); the low 64 bits ``l`` are rejected while
    ``l < (2**64 - n) % n``; the result is ``m >> 64``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    m = rng.next_u64() * n
    low = m & MASK64
    if low < n:
        threshold = ((1 << 64) - n) % n
        while low < threshold:
            m = rng.next_u64() * n
            low = m & MASK64
    return m >> 64


class StreamLedger:
    """Hands out labelled child streams and refuses to give one label twice."""

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self.entries: dict[str, str] = {}

    def claim(self, label: str, consumer: str) -> int:
        if label in self.entries:
            raise RuntimeError(
                f"stream {label!r} already claimed by {self.entries[label]!r}"
            )
        self.entries[label] = consumer
        return derive_seed(self.master_seed, label)

    def stream(self, label: str, consumer: str) -> Rng:
        return Rng(self.claim(label, consumer))


# --- parameters -------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ParamKey:
    role: str  # "stem" | "edge" | "readout"
    cell: int = 0
    node: int = 0
    pred: int = 0
    slot: int = 0

    def __str__(self) -> str:
        if self.role == "edge":
            return f"edge/c{self.cell}/n{self.node}/p{self.pred}/s{self.slot}"
        if self.role == "stem":
            return f"stem/c{self.cell}/s{self.slot}"
        return "readout"


@dataclass
class ParamTensor:
    key: ParamKey
    values: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError(f"{self.key}: expected a non-empty 2-d array")
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> ParamTensor:
        out = ParamTensor(self.key, self.values.copy())
        out.grad[...] = self.grad
        return out


def init_uniform(key: ParamKey, shape: tuple[int, int], fan_in: int, rng: Rng) -> ParamTensor:
    """Entries iid U(-1/sqrt(fan_in), 1/sqrt(fan_in)), filled row-major."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError(f"zero-sized shape {shape}")
    bound = 1.0 / math.sqrt(fan_in)
    values = rng.uniform_array(rows * cols, -bound, bound).reshape(rows, cols)
    return ParamTensor(key, values)


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    clip: float

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.clip > 0:
            raise ValueError("clip must be > 0")


# Norms within this relative slack of max_norm count as already clipped, so a
# second clip after rounding is a no-op.
CLIP_SLACK = 1e-9


def global_norm(params: Sequence[ParamTensor]) -> float:
    total = 0.0
    for p in params:
        total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
    return math.sqrt(total)


def clip_global_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the scale applied (1.0 when untouched).
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.key}")
    norm = global_norm(params)
    if norm <= max_norm * (1.0 + CLIP_SLACK):
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


def sgd_step(params: Iterable[ParamTensor], lr: float) -> None:
    """``value -= lr * grad`` then zero the gradient, in place."""
    for p in params:
        p.values -= lr * p.grad
        p.grad.fill(0.0)


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
    num_coords: int = 50,
    rng: Rng | None = None,
) -> float:
    """Max relative error between stored ``grad`` and central differences.

    ``params[*].grad`` must already hold the analytic gradient at the current
    values; ``loss_fn`` re-evaluates the loss from the current values. Checks
    every coordinate when there are at most ``num_coords`` of them, otherwise
    ``num_coords`` coordinates drawn uniformly with ``rng``.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.values.size)]
    if len(coords) > num_coords:
        rng = rng or Rng(0)
        picked = []
        pool = list(range(len(coords)))
        for i in range(num_coords):
            k = i + rng.uniform_int(len(pool) - i)
            pool[i], pool[k] = pool[k], pool[i]
            picked.append(coords[pool[i]])
        coords = picked
    worst = 0.0
    for pi, j in coords:
        flat = params[pi].values.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = loss_fn()
        flat[j] = orig - eps
        f_minus = loss_fn()
        flat[j] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise FloatingPointError("non-finite loss during finite differences")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(params[pi].grad.reshape(-1)[j])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


# --- elementwise ops ---------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_op(name: str, s: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(s)
    if name == "relu":
        return np.maximum(s, 0.0)
    if name == "sigmoid":
        return sigmoid(s)
    if name == "identity":
        return s
    if name == "zero":
        return np.zeros_like(s)
    raise ValueError(f"unknown op {name!r}")


def op_backward(name: str, s: np.ndarray, out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``s`` given the op output ``out``."""
    if name == "tanh":
        return d_out * (1.0 - out * out)
    if name == "relu":
        return d_out * (s > 0.0)
    if name == "sigmoid":
        return d_out * out * (1.0 - out)
    if name == "identity":
        return d_out
    if name == "zero":
        return np.zeros_like(d_out)
    raise ValueError(f"unknown op {name!r}")
