from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bolt.core import (
    Censored,
    Domain,
    Exact,
    Observation,
    Trajectory,
    Workload,
    best_so_far_curve,
    candidate_from_dict,
    candidate_to_dict,
    incumbent,
    observation_from_dict,
    observation_to_dict,
    top_k,
)
from bolt.encode import EditedSeq, JoinOp, JoinPlan
from bolt.oracle import gen_query_task

P = JoinPlan((0, 1), (JoinOp.HASH_JOIN,))


def traj(outcomes):
    plans = [JoinPlan((i % 2, 1 - i % 2), (JoinOp(i // 2 % 2),)) for i in range(len(outcomes))]
    return Trajectory("t", [Observation(plans[i], o, i + 1) for i, o in enumerate(outcomes)])


def test_top_k_example():
    t = traj([Exact(5.0), Exact(2.0), Censored(10.0), Exact(3.0)])
    assert [v for _, v in top_k(t, 2)] == [2.0, 3.0]
    assert [v for _, v in top_k(t, 1)] == [2.0]
    assert [v for _, v in top_k(t, 10)] == [2.0, 3.0, 5.0]
    assert top_k(Trajectory("t"), 3) == []
    with pytest.raises(ValueError):
        top_k(t, 0)


def test_top_k_ties_prefer_earlier_calls():
    t = traj([Exact(1.0), Exact(1.0)])
    assert top_k(t, 1)[0][0] == t.observations[0].candidate


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=100), st.integers(1, 10))
def test_top_k_matches_sort_oracle(values, k):
    t = traj([Exact(v) for v in values])
    ref = sorted(range(len(values)), key=lambda i: (values[i], i))[:k]
    assert [v for _, v in top_k(t, k)] == [values[i] for i in ref]


def test_incumbent_examples():
    assert incumbent(Trajectory("t")) is None
    assert incumbent(traj([Exact(4.2)])) == 4.2
    assert incumbent(traj([Censored(10.0), Exact(7.0), Exact(3.0)])) == 3.0
    assert incumbent(traj([Censored(1.0)])) is None


def test_best_so_far_examples():
    assert best_so_far_curve(traj([Exact(5.0), Exact(7.0), Exact(2.0)])) == [(1, 5.0), (2, 5.0), (3, 2.0)]
    assert best_so_far_curve(traj([Censored(10.0), Exact(4.0)])) == [(1, None), (2, 4.0)]


def test_best_so_far_matches_prefix_min():
    rng = np.random.default_rng(0)
    outcomes = [Censored(5.0) if rng.random() < 0.3 else Exact(rng.random()) for _ in range(50)]
    curve = best_so_far_curve(traj(outcomes))
    for i, (_, best) in enumerate(curve):
        exact = [o.value for o in outcomes[: i + 1] if isinstance(o, Exact)]
        assert best == (min(exact) if exact else None)


def test_invariants():
    with pytest.raises(ValueError):
        Censored(0.0)
    with pytest.raises(ValueError):
        Trajectory("t", [Observation(P, Exact(1.0), 2), Observation(P, Exact(1.0), 2)])


def test_serialization_round_trip():
    seq = EditedSeq("ACDE", "p1")
    for cand in (P, seq):
        d = candidate_to_dict(cand)
        assert candidate_from_dict(json.loads(json.dumps(d))) == cand
    for out in (Exact(1.5), Censored(3.0)):
        obs = Observation(P, out, 7)
        d = observation_to_dict(obs)
        assert observation_from_dict(json.loads(json.dumps(d))) == obs
    assert observation_to_dict(Observation(P, Censored(3.0), 1))["outcome"] == {"kind": "censored", "tau": 3.0}
    with pytest.raises(ValueError):
        candidate_from_dict({"kind": "tree"})


def test_workload_split():
    tasks = [gen_query_task(i, 4, task_id=f"q{i}") for i in range(5)]
    w = Workload(Domain.QUERY, tasks, {"q3", "q4"})
    assert [t.task_id for t in w.train] == ["q0", "q1", "q2"]
    assert [t.task_id for t in w.validation] == ["q3", "q4"]
    assert w.task("q2") is tasks[2]
    with pytest.raises(ValueError):
        Workload(Domain.QUERY, tasks, {"zz"})
    with pytest.raises(ValueError):
        Workload(Domain.QUERY, tasks + tasks[:1])
