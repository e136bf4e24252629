from __future__ import annotations

import itertools
import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from randnas.numcore import Rng, split_stream
from randnas.searchspace import (
    DUAL,
    PTB_OPS,
    SINGLE,
    GenotypeError,
    OpKind,
    SearchSpace,
    SpaceError,
    TooManyArchitectures,
    count_architectures,
    enumerate_architectures,
    make_architecture,
    parse_genotype,
    ptb_space,
    sample_architecture,
    serialize_genotype,
    validate_architecture,
    validate_space,
)

SMALL_SPACES = [
    SearchSpace(SINGLE, 1, ("tanh",)),
    SearchSpace(SINGLE, 2, PTB_OPS),
    SearchSpace(SINGLE, 3, ("tanh", "relu")),
    SearchSpace(SINGLE, 4, ("relu",)),
    SearchSpace(DUAL, 1, ("tanh", "zero")),
    SearchSpace(DUAL, 1, ("tanh", "zero"), 2),
    SearchSpace(DUAL, 2, ("relu", "identity", "zero")),
]


def brute_force_count(space: SearchSpace) -> int:
    """Count distinct canonical genotypes by expanding every ordered decision."""
    per_node = []
    for i in range(1, space.num_nodes + 1):
        edges = [(p, o) for p in range(space.num_preds(i)) for o in space.ops]
        if space.family == SINGLE:
            per_node.append(len(edges))
        else:
            per_node.append(len({tuple(sorted(pair, key=lambda e: (e[0], space.op_index(e[1]))))
                                 for pair in itertools.product(edges, repeat=2)}))
    per_cell = 1
    for k in per_node:
        per_cell *= k
    return per_cell**space.num_cells


def test_validate_space_examples():
    assert validate_space(ptb_space(8)) == []
    assert validate_space(SearchSpace(SINGLE, 1, ("tanh",))) == []
    problems = validate_space(SearchSpace(SINGLE, 2, ("tanh", "zero")))
    assert any("zero forbidden in single-input" in p for p in problems)


def test_validate_space_other_rules():
    assert validate_space(SearchSpace(SINGLE, 2, ("tanh",), 2))
    assert validate_space(SearchSpace("triple", 2, ("tanh",)))
    assert validate_space(SearchSpace(SINGLE, 0, ("tanh",)))
    assert validate_space(SearchSpace(SINGLE, 2, ("tanh", "tanh")))
    assert validate_space(SearchSpace(SINGLE, 2, ("softsign",)))
    assert validate_space(SearchSpace(DUAL, 2, ("tanh", "zero"), 2)) == []


def test_opkind_parse():
    assert OpKind.parse("relu") is OpKind.RELU
    with pytest.raises(GenotypeError, match="unknown op"):
        OpKind.parse("conv3x3")


def test_count_examples():
    assert count_architectures(SearchSpace(SINGLE, 1, ("tanh",))) == 1
    assert count_architectures(SearchSpace(SINGLE, 2, PTB_OPS)) == 32
    assert count_architectures(ptb_space(8)) == 2_642_411_520
    assert count_architectures(SearchSpace(DUAL, 1, ("tanh", "zero"), 2)) == 100


def test_ptb_count_closed_form():
    assert count_architectures(ptb_space(8)) == 40320 * 4**8


@pytest.mark.parametrize("space", SMALL_SPACES, ids=lambda s: f"{s.family}-{s.num_nodes}-{len(s.ops)}-{s.num_cells}")
def test_count_matches_enumeration_and_brute_force(space):
    archs = enumerate_architectures(space)
    assert len(archs) == count_architectures(space) == brute_force_count(space)
    assert len({str(a) for a in archs}) == len(archs)
    assert all(validate_architecture(a) == [] for a in archs)


def test_count_matches_enumeration_up_to_n3():
    for n in (1, 2, 3):
        space = ptb_space(n)
        assert len(enumerate_architectures(space)) == count_architectures(space)


def test_invalid_space_refused():
    with pytest.raises(SpaceError, match="zero forbidden"):
        count_architectures(SearchSpace(SINGLE, 2, ("tanh", "zero")))


def test_enumerate_minimal_and_sorted():
    (only,) = enumerate_architectures(SearchSpace(SINGLE, 1, ("tanh",)), limit=10)
    assert only.cells == ((((0, "tanh"),),),)
    archs = enumerate_architectures(SearchSpace(SINGLE, 2, PTB_OPS), limit=100)
    keys = [[(p, PTB_OPS.index(o)) for d in a.cells[0] for p, o in d] for a in archs]
    assert keys == sorted(keys)


def test_enumerate_refuses_large_space():
    with pytest.raises(TooManyArchitectures) as err:
        enumerate_architectures(ptb_space(8), limit=10**6)
    assert err.value.count == 2_642_411_520
    assert "2642411520" in str(err.value)


def test_sampler_respects_bounds():
    space = ptb_space(8)
    rng = split_stream(0, "bounds")
    for _ in range(200):
        arch = sample_architecture(space, rng)
        for i, ((pred, op),) in enumerate(arch.cells[0], start=1):
            assert 0 <= pred < i
            assert op in PTB_OPS


def test_sampler_minimal_space():
    space = SearchSpace(SINGLE, 1, ("tanh",))
    arch = sample_architecture(space, Rng(3))
    assert arch.cells == ((((0, "tanh"),),),)


def test_sampler_chi_square_uniform():
    space = SearchSpace(SINGLE, 2, PTB_OPS)
    rng = split_stream(0, "chi2")
    counts = Counter(str(sample_architecture(space, rng)) for _ in range(64_000))
    assert len(counts) == 32
    assert chisquare(list(counts.values())).pvalue > 0.001


def test_sampler_marginals_within_bound():
    space = SearchSpace(DUAL, 2, ("tanh", "relu", "zero"))
    rng = split_stream(4, "marginals")
    S = 20_000
    tally = Counter()
    for _ in range(S):
        arch = sample_architecture(space, rng)
        tally.update(arch.cells[0][0])  # node 1, both slots; pred in {0, 1}
    # each slot picks pred uniformly from 2 options and op from 3, so each edge
    # appears with probability 1/6 per slot
    p = 1 / 6
    for edge in [(pr, op) for pr in range(2) for op in space.ops]:
        freq = tally[edge] / (2 * S)
        assert abs(freq - p) < 4 * (p * (1 - p) / (2 * S)) ** 0.5


def test_sampler_deterministic():
    space = SearchSpace(DUAL, 3, ("tanh", "relu", "zero"), 2)
    a = sample_architecture(space, split_stream(9, "det"))
    b = sample_architecture(space, split_stream(9, "det"))
    assert serialize_genotype(a) == serialize_genotype(b)


def test_dual_pairs_canonical_in_either_order():
    space = SearchSpace(DUAL, 1, ("tanh", "relu", "zero"))
    a = make_architecture(space, [[[(1, "relu"), (0, "zero")]]])
    b = make_architecture(space, [[[(0, "zero"), (1, "relu")]]])
    assert str(a) == str(b)
    assert a.cells[0][0] == ((0, "zero"), (1, "relu"))


def test_genotype_fixed_string():
    arch = make_architecture(SearchSpace(SINGLE, 1, ("tanh",)), [[[(0, "tanh")]]])
    assert str(arch) == '{"family":"single","n":1,"ops":["tanh"],"cells":[[[0,"tanh"]]]}'


@pytest.mark.parametrize("space", [ptb_space(8), SearchSpace(DUAL, 4, ("tanh", "relu", "identity", "zero"), 2)])
def test_genotype_round_trip(space):
    rng = split_stream(1, "round-trip")
    for _ in range(500):
        arch = sample_architecture(space, rng)
        text = serialize_genotype(arch)
        assert parse_genotype(text) == arch
        assert serialize_genotype(parse_genotype(text)) == text


def test_parse_rejects_out_of_range_pred():
    text = json.dumps({"family": "single", "n": 2, "ops": ["tanh"], "cells": [[[5, "tanh"], [0, "tanh"]]]})
    with pytest.raises(GenotypeError, match="predecessor out of range"):
        parse_genotype(text)


def test_parse_rejects_malformed():
    with pytest.raises(GenotypeError):
        parse_genotype("{not json")
    with pytest.raises(GenotypeError, match="unknown op"):
        parse_genotype(json.dumps({"family": "single", "n": 1, "ops": ["conv"], "cells": [[[0, "conv"]]]}))
    with pytest.raises(GenotypeError, match="wrong node count"):
        parse_genotype(json.dumps({"family": "single", "n": 2, "ops": ["tanh"], "cells": [[[0, "tanh"]]]}))
    with pytest.raises(GenotypeError):
        parse_genotype(json.dumps({"n": 1, "family": "single", "ops": ["tanh"], "cells": [[[0, "tanh"]]]}))


@given(st.integers(0, 2**63), st.sampled_from(SMALL_SPACES))
@settings(max_examples=60)
def test_sampled_architectures_are_valid(seed, space):
    arch = sample_architecture(space, Rng(seed))
    assert validate_architecture(arch) == []
    assert arch in set(enumerate_architectures(space))
