"""DAG cell search spaces, uniform sampling, enumeration and genotype text.

Indexing. Single-input family: node ``i`` (1..N) reads one of ``0..i-1``,
where 0 is the cell input stem. Dual-input family: indices 0 and 1 are the two
input stems and node ``i`` (1..N) lives at index ``i + 1``; each of its two
edges reads one of ``0..i``.

A node decision is a tuple of edges ``(pred, op)``: one edge for the
single-input family, two for the dual-input family, stored sorted by
``(pred, position of op in space.ops)``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

from .numcore import Rng

SINGLE = "single"
DUAL = "dual"


class OpKind(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"
    ZERO = "zero"

    @classmethod
    def parse(cls, tag: str) -> OpKind:
        try:
            return cls(tag)
        except ValueError:
            raise GenotypeError(f"unknown op {tag!r}") from None


PTB_OPS = ("tanh", "relu", "sigmoid", "identity")


class GenotypeError(ValueError):
    pass


class SpaceError(ValueError):
    pass


Edge = tuple[int, str]
NodeDecision = tuple[Edge, ...]
Cell = tuple[NodeDecision, ...]


@dataclass(frozen=True)
class SearchSpace:
    family: str
    num_nodes: int
    ops: tuple[str, ...]
    num_cells: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(str(getattr(o, "value", o)) for o in self.ops))

    @property
    def space_id(self) -> str:
        text = json.dumps(self.to_dict(), separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def edges_per_node(self) -> int:
        return 1 if self.family == SINGLE else 2

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "num_nodes": self.num_nodes,
            "ops": list(self.ops),
            "num_cells": self.num_cells,
        }

    def num_preds(self, node: int) -> int:
        """Number of legal predecessors of 1-based ``node``."""
        return node if self.family == SINGLE else node + 1

    def op_index(self, op: str) -> int:
        return self.ops.index(op)


def ptb_space(num_nodes: int = 8) -> SearchSpace:
    return SearchSpace(SINGLE, num_nodes, PTB_OPS, 1)


def validate_space(space: SearchSpace) -> list[str]:
    """Every invariant violation as ``"<field>: <rule>"``; empty means ok."""
    problems = []
    if space.family not in (SINGLE, DUAL):
        problems.append(f"family: must be 'single' or 'dual', got {space.family!r}")
    if not isinstance(space.num_nodes, int) or space.num_nodes < 1:
        problems.append("num_nodes: must be an integer >= 1")
    if len(space.ops) < 1:
        problems.append("ops: must list at least one op")
    if len(set(space.ops)) != len(space.ops):
        problems.append("ops: duplicates not allowed")
    known = {o.value for o in OpKind}
    for op in space.ops:
        if op not in known:
            problems.append(f"ops: unknown op {op!r}")
    if space.num_cells not in (1, 2):
        problems.append("num_cells: must be 1 or 2")
    if space.family == SINGLE:
        if space.num_cells != 1:
            problems.append("num_cells: single-input family requires num_cells = 1")
        if OpKind.ZERO.value in space.ops:
            problems.append("ops: zero forbidden in single-input family")
    return problems


def require_valid(space: SearchSpace) -> None:
    problems = validate_space(space)
    if problems:
        raise SpaceError("validate_space failed: " + "; ".join(problems))


@dataclass(frozen=True)
class Architecture:
    space: SearchSpace
    cells: tuple[Cell, ...]

    @property
    def space_id(self) -> str:
        return self.space.space_id

    def active_edges(self) -> Iterator[tuple[int, int, int, int, str]]:
        """Yield ``(cell, node, pred, slot, op)`` for every non-zero edge."""
        for c, cell in enumerate(self.cells):
            for i, decision in enumerate(cell, start=1):
                for slot, (pred, op) in enumerate(decision):
                    if op != OpKind.ZERO.value:
                        yield c, i, pred, slot, op

    def __str__(self) -> str:
        return serialize_genotype(self)


def _canonical(space: SearchSpace, edges: list[Edge]) -> NodeDecision:
    return tuple(sorted(edges, key=lambda e: (e[0], space.op_index(e[1]))))


def validate_architecture(arch: Architecture) -> list[str]:
    space = arch.space
    problems = validate_space(space)
    if problems:
        return problems
    if len(arch.cells) != space.num_cells:
        problems.append(f"cells: expected {space.num_cells}, got {len(arch.cells)}")
    for c, cell in enumerate(arch.cells):
        if len(cell) != space.num_nodes:
            problems.append(f"cell {c}: wrong node count {len(cell)} (expected {space.num_nodes})")
            continue
        for i, decision in enumerate(cell, start=1):
            if len(decision) != space.edges_per_node:
                problems.append(f"cell {c} node {i}: expected {space.edges_per_node} edges")
                continue
            for pred, op in decision:
                if op not in space.ops:
                    problems.append(f"cell {c} node {i}: op {op!r} not in space")
                if not (isinstance(pred, int) and 0 <= pred < space.num_preds(i)):
                    problems.append(f"cell {c} node {i}: predecessor out of range ({pred})")
            if not problems and space.family == DUAL and _canonical(space, list(decision)) != decision:
                problems.append(f"cell {c} node {i}: edges not in canonical order")
    return problems


def make_architecture(space: SearchSpace, cells) -> Architecture:
    """Build an architecture from nested lists, canonicalising dual pairs."""
    built = []
    for cell in cells:
        nodes = []
        for decision in cell:
            edges = [(int(p), str(getattr(o, "value", o))) for p, o in decision]
            if space.family == DUAL and all(o in space.ops for _, o in edges):
                nodes.append(_canonical(space, edges))
            else:
                nodes.append(tuple(edges))
        built.append(tuple(nodes))
    arch = Architecture(space, tuple(built))
    problems = validate_architecture(arch)
    if problems:
        raise GenotypeError("; ".join(problems))
    return arch


def sample_architecture(space: SearchSpace, rng: Rng) -> Architecture:
    """Draw every decision independently and uniformly from ``rng``.

    Per node and edge: predecessor first, then op. Dual-input pairs are
    sorted afterwards.
    """
    require_valid(space)
    n_ops = len(space.ops)
    cells = []
    for _ in range(space.num_cells):
        nodes = []
        for i in range(1, space.num_nodes + 1):
            edges = []
            for _slot in range(space.edges_per_node):
                pred = rng.uniform_int(space.num_preds(i))
                op = space.ops[rng.uniform_int(n_ops)]
                edges.append((pred, op))
            nodes.append(_canonical(space, edges) if space.family == DUAL else tuple(edges))
        cells.append(tuple(nodes))
    return Architecture(space, tuple(cells))


def count_architectures(space: SearchSpace) -> int:
    require_valid(space)
    n_ops = len(space.ops)
    per_cell = 1
    for i in range(1, space.num_nodes + 1):
        k = space.num_preds(i) * n_ops
        per_cell *= k if space.family == SINGLE else k * (k + 1) // 2
    return per_cell**space.num_cells


class TooManyArchitectures(ValueError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"space has {count} architectures, more than the limit {limit}")
        self.count = count
        self.limit = limit


def _node_choices(space: SearchSpace, node: int) -> list[NodeDecision]:
    edges = [(p, op) for p in range(space.num_preds(node)) for op in space.ops]
    if space.family == SINGLE:
        return [(e,) for e in edges]
    return list(itertools.combinations_with_replacement(edges, 2))


def enumerate_architectures(space: SearchSpace, limit: int = 10_000) -> list[Architecture]:
    """All architectures, lexicographic in (cell, node, pred, op position)."""
    count = count_architectures(space)
    if count > limit:
        raise TooManyArchitectures(count, limit)
    per_node = [_node_choices(space, i) for i in range(1, space.num_nodes + 1)]
    cells = [tuple(c) for c in itertools.product(*per_node)]
    return [Architecture(space, combo) for combo in itertools.product(cells, repeat=space.num_cells)]


def serialize_genotype(arch: Architecture) -> str:
    """Single-line canonical text, keys ordered family, n, ops, cells."""
    space = arch.space
    if space.family == SINGLE:
        cells = [[[d[0][0], d[0][1]] for d in cell] for cell in arch.cells]
    else:
        cells = [[[[p, o] for p, o in d] for d in cell] for cell in arch.cells]
    doc = {"family": space.family, "n": space.num_nodes, "ops": list(space.ops), "cells": cells}
    return json.dumps(doc, separators=(",", ":"))


def parse_genotype(text: str) -> Architecture:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"malformed genotype text: {exc}") from None
    if not isinstance(doc, dict) or list(doc) != ["family", "n", "ops", "cells"]:
        raise GenotypeError("genotype must have exactly the keys family, n, ops, cells")
    for tag in doc["ops"]:
        OpKind.parse(tag)
    cells = doc["cells"]
    if not isinstance(cells, list) or not cells:
        raise GenotypeError("cells must be a non-empty list")
    space = SearchSpace(doc["family"], doc["n"], tuple(doc["ops"]), len(cells))
    problems = validate_space(space)
    if problems:
        raise GenotypeError("; ".join(problems))
    parsed = []
    for cell in cells:
        if not isinstance(cell, list) or len(cell) != space.num_nodes:
            raise GenotypeError(f"wrong node count: expected {space.num_nodes}")
        nodes = []
        for node in cell:
            decision = [node] if space.family == SINGLE else node
            for edge in decision:
                if not (isinstance(edge, list) and len(edge) == 2):
                    raise GenotypeError(f"malformed edge {edge!r}")
                OpKind.parse(edge[1])
            nodes.append([(e[0], e[1]) for e in decision])
        parsed.append(nodes)
    return make_architecture(space, parsed)


def space_from_dict(doc: dict) -> SearchSpace:
    return SearchSpace(doc["family"], int(doc["num_nodes"]), tuple(doc["ops"]), int(doc.get("num_cells", 1)))
