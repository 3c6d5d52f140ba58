from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bolt.encode import (
    AMINO_ACIDS,
    DimensionMismatch,
    EditedSeq,
    EmptySeed,
    InvalidPlan,
    JoinOp,
    JoinPlan,
    decode_plan,
    decode_seq,
    encode_plan,
    encode_seq,
    is_feasible,
    levenshtein,
    max_edits,
    plan_dim,
    repair,
    similarity,
    strip_plan_text,
    strip_seq_text,
)


def dp_levenshtein(a: str, b: str) -> int:
    """Textbook Wagner-Fischer table, independent of the library backend."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def all_plans(n):
    for order in itertools.permutations(range(n)):
        for ops in itertools.product(list(JoinOp), repeat=n - 1):
            yield JoinPlan(order, ops)


aa_text = st.text(alphabet=AMINO_ACIDS, min_size=0, max_size=12)


def test_plan_dim():
    assert [plan_dim(n) for n in (1, 2, 8)] == [1, 3, 15]


def test_decode_known_point():
    plan = decode_plan([0.9, 0.1, 0.5, 0.2, 0.7], 3)
    assert plan.order == (1, 2, 0)
    assert plan.ops == (JoinOp.HASH_JOIN, JoinOp.NESTED_LOOP)


def test_decode_ties_keep_index_order():
    assert decode_plan([0.5, 0.5, 0.5, 0.0, 0.0], 3).order == (0, 1, 2)


def test_op_boundary_is_nested_loop():
    assert decode_plan([0.1, 0.2, 0.5], 2).ops == (JoinOp.NESTED_LOOP,)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_decode_encode_identity_exhaustive(n):
    seen = 0
    for plan in all_plans(n):
        z = encode_plan(plan)
        assert z.shape == (plan_dim(n),)
        assert np.all((z > 0) & (z < 1))
        assert decode_plan(z, n) == plan
        seen += 1
    assert seen == __import__("math").factorial(n) * 2 ** (n - 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_decode_total_on_random_points(n, seed):
    z = np.random.default_rng(seed).random(plan_dim(n))
    plan = decode_plan(z, n)
    assert sorted(plan.order) == list(range(n))
    assert decode_plan(encode_plan(plan), n) == plan


def test_decode_plan_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        decode_plan(np.zeros(4), 3)


def test_plan_text_round_trip():
    plan = JoinPlan((2, 0, 1), (JoinOp.NESTED_LOOP, JoinOp.HASH_JOIN))
    assert plan.to_text() == "2 0 1 | 1 0"
    assert JoinPlan.from_text("2 0 1 | 1 0") == plan


@pytest.mark.parametrize("text", ["2 0 0 | 1 0", "0 1 2 | 1", "0 1 | 2", "0 1 2 1 0", "a | b"])
def test_plan_text_rejects(text):
    with pytest.raises(InvalidPlan):
        JoinPlan.from_text(text)


def test_strip_helpers():
    assert strip_plan_text("order: 2, 0, 1 | 1 0.") == " 2 0 1 | 1 0"
    assert strip_seq_text("AC!DE xyz") == "ACDE"


@settings(max_examples=300, deadline=None)
@given(aa_text, aa_text)
def test_levenshtein_matches_dp_oracle(a, b):
    assert levenshtein(a, b) == dp_levenshtein(a, b)


@pytest.mark.parametrize("length,expected", [(4, 1), (20, 5), (15, 3), (29, 7), (30, 7)])
def test_max_edits(length, expected):
    assert max_edits(length, 0.75) == expected
    # brute-force: the largest d with 1 - d/len >= 0.75, in exact rationals
    assert expected == max(d for d in range(length + 1) if 4 * (length - d) >= 3 * length)


def test_similarity_and_feasibility():
    assert similarity("ACDE", "ACDE") == 1.0
    assert similarity("ACDE", "ACDF") == 0.75
    assert is_feasible("ACDE", "ACDF")
    assert not is_feasible("ACDE", "ACFF")
    with pytest.raises(EmptySeed):
        similarity("", "A")


def test_repair_reverts_lowest_positions_first():
    seed = "AAAAAAAA"  # 8 letters -> at most 2 edits
    assert repair(seed, "CCCCAAAA") == "AACCAAAA"


def test_repair_leaves_feasible_alone():
    assert repair("ACDEFGHI", "ACDEFGHK") == "ACDEFGHK"


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_decode_seq_always_feasible(length, seed):
    rng = np.random.default_rng(seed)
    s = "".join(rng.choice(list(AMINO_ACIDS), length))
    out = decode_seq(rng.random(length), s, "p")
    assert len(out.seq) == length
    assert similarity(s, out.seq) >= 0.75
    assert dp_levenshtein(s, out.seq) <= max_edits(length, 0.75)


def test_decode_seq_letter_bins():
    seed = "A" * 20
    z = (np.arange(20) + 0.5) / 20
    z[5:] = 0.0  # keep 5 edits, the most 20 letters allow
    assert decode_seq(z, seed).seq == "ACDEF" + "A" * 15
    # z = 1 clamps to the last letter; repair keeps the highest 5 positions
    assert decode_seq(np.ones(20), seed).seq == "A" * 15 + "Y" * 5


def test_encode_seq_round_trip():
    seq = AMINO_ACIDS
    assert decode_seq(encode_seq(seq), seq).seq == seq


def test_edited_seq_alphabet():
    with pytest.raises(ValueError):
        EditedSeq("ACB")
