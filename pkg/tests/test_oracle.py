from __future__ import annotations

import math
import pickle
import threading

import numpy as np
import pytest

from bolt.core import Censored, Domain, Exact
from bolt.encode import AMINO_ACIDS, EditedSeq, InvalidPlan, JoinOp, JoinPlan, max_edits, similarity
from bolt.oracle import (
    Budget,
    BudgetExhausted,
    ConstraintViolated,
    QueryTaskSpec,
    all_plans,
    charge,
    eval_plan,
    eval_seq,
    evaluate,
    fallback_candidates,
    gen_query_task,
    gen_seq_task,
    gen_workload,
    heuristic_plan,
    parse_query_context,
    plan_cost,
    seq_score,
    task_from_dict,
    task_to_dict,
)


def two_relation_spec(tau=1e9):
    return QueryTaskSpec("t", 2, (10.0, 100.0), ((1.0, 0.1), (0.1, 1.0)), ((1.0, 0.5), (0.5, 1.0)), tau)


def naive_cost(spec, plan):
    """Recompute the left-deep cost from scratch at every step."""
    total = 0.0
    for step in range(1, plan.n):
        joined = plan.order[: step + 1]
        size = 1.0
        for r in joined:
            size *= spec.cardinalities[r]
        for a in range(len(joined)):
            for b in range(a + 1, len(joined)):
                size *= spec.selectivity[joined[a]][joined[b]]
        rel = plan.order[step]
        if plan.ops[step - 1] == JoinOp.NESTED_LOOP:
            m = min(spec.nl_multiplier[rel][p] for p in plan.order[:step])
            size *= m * (1 + math.log10(spec.cardinalities[rel]))
        total += size
    return total


def subset_dp_optimum(spec):
    """Exact left-deep optimum by dynamic programming over relation subsets."""
    n = spec.n_relations
    card, sel, nl = spec.card, spec.sel, spec.nl
    size = {}
    best = {}
    for r in range(n):
        size[1 << r] = card[r]
        best[1 << r] = 0.0
    for mask in range(1, 1 << n):
        if mask in best:
            continue
        members = [r for r in range(n) if mask >> r & 1]
        cands = []
        for r in members:
            prev = mask & ~(1 << r)
            others = [p for p in members if p != r]
            out = size[prev] * card[r] * np.prod(sel[r, others])
            size[mask] = out
            op = min(1.0, nl[r, others].min() * (1 + math.log10(card[r])))
            cands.append(best[prev] + op * out)
        best[mask] = min(cands)
    return best[(1 << n) - 1]


def test_two_relation_hash_join_example():
    spec = two_relation_spec()
    assert eval_plan(spec, JoinPlan((0, 1), (JoinOp.HASH_JOIN,)), Budget(1)) == Exact(100.0)


def test_nested_loop_multiplier():
    spec = two_relation_spec()
    plan = JoinPlan((0, 1), (JoinOp.NESTED_LOOP,))
    assert plan_cost(spec, plan) == pytest.approx(100.0 * 0.5 * (1 + 2))


def test_cost_matches_naive_recomputation():
    rng = np.random.default_rng(0)
    for s in range(5):
        spec = gen_query_task(s, 6)
        for plan in list(all_plans(6))[:: 97]:
            assert plan_cost(spec, plan) == pytest.approx(naive_cost(spec, plan), rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_exhaustive_optimum_matches_subset_dp(seed):
    spec = gen_query_task(seed, 5)
    plans = list(all_plans(5))
    assert len(plans) == math.factorial(5) * 2**4
    assert min(plan_cost(spec, p) for p in plans) == pytest.approx(subset_dp_optimum(spec), rel=1e-12)


def test_censoring_above_tau():
    spec = two_relation_spec(tau=50.0)
    budget = Budget(2)
    assert eval_plan(spec, JoinPlan((0, 1), (JoinOp.HASH_JOIN,)), budget) == Censored(50.0)
    assert budget.used == 1


def test_generation_is_deterministic_and_structured():
    a, b = gen_query_task(7, 4), gen_query_task(7, 4)
    assert a == b
    assert len(a.cardinalities) == 4
    assert all(100 <= c <= 1e6 for c in a.cardinalities)
    assert len(a.edges) >= 3
    sel = np.array(a.selectivity)
    assert np.allclose(sel, sel.T) and np.all((sel > 0) & (sel <= 1))


def test_predicate_graph_connected():
    for s in range(10):
        spec = gen_query_task(s, 9)
        reach, frontier = {0}, [0]
        while frontier:
            i = frontier.pop()
            for a, b in spec.edges:
                for u, v in ((a, b), (b, a)):
                    if u == i and v not in reach:
                        reach.add(v)
                        frontier.append(v)
        assert reach == set(range(9))


def test_tau_is_twenty_times_heuristic():
    for s in range(5):
        spec = gen_query_task(s, 6)
        h = plan_cost(spec, heuristic_plan(spec))
        assert spec.timeout_tau == pytest.approx(20 * h)
        assert spec.timeout_tau > h


def test_context_text_round_trip():
    spec = gen_query_task(3, 5)
    assert spec.context_text.startswith("relations: r0=")
    assert parse_query_context(spec.context_text) == pytest.approx(spec.cardinalities, rel=1e-2)
    assert task_from_dict(task_to_dict(spec)) == spec


def test_n_range_enforced():
    with pytest.raises(ValueError):
        gen_query_task(0, 3)
    with pytest.raises(ValueError):
        gen_query_task(0, 13)


def test_eval_plan_is_pure_and_checks_size():
    spec = gen_query_task(1, 4)
    plan = heuristic_plan(spec)
    b = Budget(3)
    assert eval_plan(spec, plan, b) == eval_plan(spec, plan, b)
    with pytest.raises(InvalidPlan):
        eval_plan(spec, JoinPlan((0, 1, 2), (JoinOp.HASH_JOIN,) * 2), b)
    assert b.used == 2


def test_noise_hook_off_by_default():
    spec = gen_query_task(1, 4)
    plan = heuristic_plan(spec)
    noisy = eval_plan(spec, plan, Budget(1), noise_sd=0.5, rng=np.random.default_rng(0))
    assert noisy != eval_plan(spec, plan, Budget(1))


# -- budget -------------------------------------------------------------------------


def test_budget_single_call():
    b = Budget(1)
    charge(b)
    assert b.used == 1
    with pytest.raises(BudgetExhausted):
        charge(b)
    assert b.used == 1


def test_censored_calls_are_counted():
    spec = gen_query_task(2, 6)
    plans = list(all_plans(6))
    bad = [p for p in plans if plan_cost(spec, p) > spec.timeout_tau][:4]
    good = [p for p in plans if plan_cost(spec, p) <= spec.timeout_tau][:6]
    assert len(bad) == 4 and len(good) == 6
    b = Budget(10)
    outcomes = [eval_plan(spec, p, b) for p in bad + good]
    assert b.used == 10
    assert sum(isinstance(o, Censored) for o in outcomes) == 4


def test_budget_is_thread_safe():
    b = Budget(1000)

    def work():
        for _ in range(250):
            b.charge()

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert b.used == 1000
    with pytest.raises(BudgetExhausted):
        b.charge()


def test_budget_pickles():
    b = Budget(5, 2)
    c = pickle.loads(pickle.dumps(b))
    assert (c.limit, c.used) == (5, 2)
    c.charge()


def test_budget_validation():
    with pytest.raises(ValueError):
        Budget(2, 3)


# -- sequences ----------------------------------------------------------------------


def test_seed_scores_stored_value():
    spec = gen_seq_task(0, 20)
    assert eval_seq(spec, EditedSeq(spec.seed), Budget(1)) == Exact(spec.seed_score)


def test_single_substitution_is_additive():
    spec = gen_seq_task(1, 18)
    w = spec.weights
    p = 4
    old = spec.seed[p]
    new = next(a for a in AMINO_ACIDS if a != old)
    seq = spec.seed[:p] + new + spec.seed[p + 1:]
    delta = w[p, AMINO_ACIDS.index(new)] - w[p, AMINO_ACIDS.index(old)]
    assert seq_score(spec, seq) == pytest.approx(spec.seed_score + delta)


def test_best_single_substitution_brute_force():
    spec = gen_seq_task(2, 15)
    best_val, best_seq = math.inf, None
    for p in range(15):
        for a in AMINO_ACIDS:
            if a == spec.seed[p]:
                continue
            seq = spec.seed[:p] + a + spec.seed[p + 1:]
            v = seq_score(spec, seq)
            if v < best_val:
                best_val, best_seq = v, seq
    # the additive score makes the best neighbor the best per-position improvement
    gains = spec.weights - spec.weights[np.arange(15), [AMINO_ACIDS.index(c) for c in spec.seed]][:, None]
    assert best_val == pytest.approx(spec.seed_score + gains.min())


def test_constraint_violation_charges():
    spec = gen_seq_task(3, 16)
    far = "".join("A" if c != "A" else "C" for c in spec.seed)
    b = Budget(2)
    with pytest.raises(ConstraintViolated):
        eval_seq(spec, EditedSeq(far), b)
    assert b.used == 1


def test_seq_length_range():
    with pytest.raises(ValueError):
        gen_seq_task(0, 14)
    assert 15 <= len(gen_seq_task(5).seed) <= 30


# -- fallback initializer and workloads ---------------------------------------------


def test_query_fallback_starts_with_greedy_and_is_distinct():
    spec = gen_query_task(4, 6)
    cands = fallback_candidates(spec, 30, np.random.default_rng(0))
    assert cands[0] == heuristic_plan(spec)
    assert len(set(cands)) == 30


def test_query_fallback_saturates_small_spaces():
    spec = gen_query_task(4, 4)
    cands = fallback_candidates(spec, 500, np.random.default_rng(0))
    assert len(cands) == math.factorial(4) * 8


def test_sequence_fallback_sits_on_the_boundary():
    spec = gen_seq_task(5, 20)
    cands = fallback_candidates(spec, 40, np.random.default_rng(0))
    assert len(set(cands)) == 40
    for c in cands:
        assert similarity(spec.seed, c.seq) == pytest.approx(1 - max_edits(20, 0.75) / 20)


def test_fallback_respects_exclude():
    spec = gen_query_task(4, 6)
    greedy = heuristic_plan(spec)
    assert greedy not in fallback_candidates(spec, 10, np.random.default_rng(0), exclude={greedy})


def test_workload_split_and_determinism():
    w = gen_workload(Domain.QUERY, 12, 3, n_val=4, n_relations=5)
    assert [t.task_id for t in w.validation] == ["q0008", "q0009", "q0010", "q0011"]
    assert len(w.train) == 8
    assert w == gen_workload(Domain.QUERY, 12, 3, n_val=4, n_relations=5)
    s = gen_workload(Domain.SEQUENCE, 8, 1)
    assert len(s.validation) == 2 and s.tasks[0].task_id == "p0000"


def test_shared_schema_keeps_the_predicate_graph():
    w = gen_workload(Domain.QUERY, 5, 0, n_relations=6)
    assert len({tuple(t.edges) for t in w.tasks}) == 1
    ind = gen_workload(Domain.QUERY, 5, 0, n_relations=6, shared_schema=False)
    assert len({tuple(t.edges) for t in ind.tasks}) > 1


def test_sequence_weights_marked_hidden():
    d = task_to_dict(gen_seq_task(0, 15))
    assert "motif_weights" not in d and "motif_weights" in d["hidden"]


def test_evaluate_dispatch():
    q = gen_query_task(0, 4)
    s = gen_seq_task(0, 15)
    b = Budget(2)
    assert isinstance(evaluate(q, heuristic_plan(q), b), Exact)
    assert evaluate(s, EditedSeq(s.seed), b) == Exact(s.seed_score)
