"""Codecs between structured candidates and points in the unit hypercube.

Join plans use random-key decoding: the first ``n`` coordinates are argsorted
to get a left-deep join order, the remaining ``n - 1`` pick an operator per
join step. Peptide-like sequences use one coordinate per position, mapped to
the amino-acid alphabet and then repaired back inside the similarity
constraint.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np
from rapidfuzz.distance import Levenshtein as _rf_levenshtein

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
_AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}

DEFAULT_SIMILARITY = 0.75


class DimensionMismatch(ValueError):
    pass


class EmptySeed(ValueError):
    pass


class InvalidPlan(ValueError):
    pass


class JoinOp(enum.IntEnum):
    HASH_JOIN = 0
    NESTED_LOOP = 1


@dataclass(frozen=True)
class JoinPlan:
    """Left-deep join order over relations ``0..n-1`` plus one operator per join."""

    order: tuple[int, ...]
    ops: tuple[JoinOp, ...]

    def __post_init__(self):
        order = tuple(int(o) for o in self.order)
        ops = tuple(JoinOp(int(o)) for o in self.ops)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "ops", ops)
        n = len(order)
        if n < 1 or sorted(order) != list(range(n)):
            raise InvalidPlan(f"order {order} is not a permutation of 0..{n - 1}")
        if len(ops) != n - 1:
            raise InvalidPlan(f"expected {n - 1} operators, got {len(ops)}")

    @property
    def n(self) -> int:
        return len(self.order)

    def to_text(self) -> str:
        left = " ".join(str(o) for o in self.order)
        right = " ".join(str(int(b)) for b in self.ops)
        return f"{left} | {right}"

    @classmethod
    def from_text(cls, text: str) -> "JoinPlan":
        if text.count("|") != 1:
            raise InvalidPlan(f"plan text needs exactly one '|': {text!r}")
        left, right = text.split("|")
        try:
            order = [int(t) for t in left.split()]
            ops = [int(t) for t in right.split()]
        except ValueError as exc:
            raise InvalidPlan(str(exc)) from None
        if any(b not in (0, 1) for b in ops):
            raise InvalidPlan(f"operator bits must be 0/1: {ops}")
        return cls(tuple(order), tuple(JoinOp(b) for b in ops))


@dataclass(frozen=True)
class EditedSeq:
    seq: str
    seed_id: str = ""

    def __post_init__(self):
        bad = set(self.seq) - set(AMINO_ACIDS)
        if bad:
            raise ValueError(f"letters outside the amino-acid alphabet: {sorted(bad)}")

    def to_text(self) -> str:
        return self.seq


def plan_dim(n: int) -> int:
    return 2 * n - 1


def _as_point(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.shape[0] != dim:
        raise DimensionMismatch(f"expected a {dim}-dim point, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent point has non-finite coordinates")
    return z


def decode_plan(z, n: int) -> JoinPlan:
    z = _as_point(z, plan_dim(n))
    order = np.argsort(z[:n], kind="stable")
    ops = [JoinOp.HASH_JOIN if c < 0.5 else JoinOp.NESTED_LOOP for c in z[n:]]
    return JoinPlan(tuple(int(o) for o in order), tuple(ops))


def encode_plan(plan: JoinPlan) -> np.ndarray:
    n = plan.n
    keys = np.empty(n)
    for pos, rel in enumerate(plan.order):
        keys[rel] = pos / n + 1.0 / (2 * n)
    ops = np.array([0.25 if op == JoinOp.HASH_JOIN else 0.75 for op in plan.ops])
    return np.concatenate([keys, ops])


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance."""
    return _rf_levenshtein.distance(a, b)


def max_edits(seed_len: int, threshold: float) -> int:
    # largest d with 1 - d/len >= threshold; the epsilon absorbs float error in
    # products like 0.25 * 20
    return math.floor((1.0 - threshold) * seed_len + 1e-9)


def similarity(seed: str, cand: str) -> float:
    if not seed:
        raise EmptySeed("similarity is undefined for an empty seed")
    return 1.0 - levenshtein(seed, cand) / len(seed)


def is_feasible(seed: str, cand: str, threshold: float = DEFAULT_SIMILARITY) -> bool:
    if not seed:
        raise EmptySeed("similarity is undefined for an empty seed")
    return levenshtein(seed, cand) <= max_edits(len(seed), threshold)


def repair(seed: str, cand: str, threshold: float = DEFAULT_SIMILARITY) -> str:
    """Revert substituted positions, lowest index first, until ``cand`` is feasible."""
    if len(cand) != len(seed):
        raise DimensionMismatch("repair needs equal-length strings")
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    limit = max_edits(len(seed), threshold)
    letters = list(cand)
    mismatches = [i for i, (s, c) in enumerate(zip(seed, cand)) if s != c]
    remaining = len(mismatches)
    for i in mismatches:
        # Hamming distance bounds Levenshtein from above for equal lengths.
        if remaining <= limit or levenshtein(seed, "".join(letters)) <= limit:
            break
        letters[i] = seed[i]
        remaining -= 1
    return "".join(letters)


def decode_seq(z, seed: str, seed_id: str = "", threshold: float = DEFAULT_SIMILARITY) -> EditedSeq:
    z = _as_point(z, len(seed))
    idx = np.minimum(np.floor(z * len(AMINO_ACIDS)).astype(int), len(AMINO_ACIDS) - 1)
    idx = np.maximum(idx, 0)
    raw = "".join(AMINO_ACIDS[i] for i in idx)
    return EditedSeq(repair(seed, raw, threshold), seed_id)


def encode_seq(seq: str) -> np.ndarray:
    return np.array([(_AA_INDEX[a] + 0.5) / len(AMINO_ACIDS) for a in seq])


_PLAN_JUNK = re.compile(r"[^0-9|\s]")
_SEQ_JUNK = re.compile(f"[^{AMINO_ACIDS}]")


def strip_plan_text(raw: str) -> str:
    return _PLAN_JUNK.sub("", raw)


def strip_seq_text(raw: str) -> str:
    return _SEQ_JUNK.sub("", raw)
