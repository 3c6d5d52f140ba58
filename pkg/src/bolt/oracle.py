"""Synthetic task families and their oracles.

Two families stand in for real workloads:

* query tasks: a left-deep join-order cost model over relations with
  cardinalities, pairwise predicate selectivities and per-edge nested-loop
  multipliers. Plans costing more than the task's timeout come back censored.
* sequence tasks: a position-additive fitness over edits of a seed string,
  with a hard similarity constraint to the seed.

Every oracle call is charged against a :class:`Budget`.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import re
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .core import Censored, Domain, Exact, Outcome, Workload
from .encode import (
    AMINO_ACIDS,
    DEFAULT_SIMILARITY,
    EditedSeq,
    InvalidPlan,
    JoinOp,
    JoinPlan,
    is_feasible,
    max_edits,
)

MIN_RELATIONS, MAX_RELATIONS = 4, 12
LOG_CARD_RANGE = (2.0, 6.0)
LOG_SEL_RANGE = (-4.0, 0.0)
NL_MULT_RANGE = (0.05, 2.0)
EXTRA_EDGE_PROB = 0.2
TIMEOUT_FACTOR = 20.0

SEQ_LEN_RANGE = (15, 30)
SEED_SCORE = 32.0
MOTIF_SCALE = 2.0

SeedLike = Union[int, Sequence[int]]


class BudgetExhausted(RuntimeError):
    pass


class ConstraintViolated(ValueError):
    pass


@dataclass
class Budget:
    """Oracle-call counter. ``charge`` is atomic so budgets can be shared across threads."""

    limit: int
    used: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.limit < 0 or not 0 <= self.used <= self.limit:
            raise ValueError(f"invalid budget state used={self.used} limit={self.limit}")

    @property
    def remaining(self) -> int:
        return self.limit - self.used

    def charge(self) -> "Budget":
        with self._lock:
            if self.used >= self.limit:
                raise BudgetExhausted(f"budget of {self.limit} oracle calls exhausted")
            self.used += 1
        return self

    def __getstate__(self):
        return {"limit": self.limit, "used": self.used}

    def __setstate__(self, state):
        self.limit = state["limit"]
        self.used = state["used"]
        self._lock = threading.Lock()


def charge(budget: Budget) -> Budget:
    return budget.charge()


# -- query tasks ------------------------------------------------------------------


@dataclass(frozen=True)
class QueryTaskSpec:
    task_id: str
    n_relations: int
    cardinalities: tuple[float, ...]
    selectivity: tuple[tuple[float, ...], ...]
    nl_multiplier: tuple[tuple[float, ...], ...]
    timeout_tau: float

    domain = Domain.QUERY

    @cached_property
    def card(self) -> np.ndarray:
        return np.array(self.cardinalities)

    @cached_property
    def sel(self) -> np.ndarray:
        return np.array(self.selectivity)

    @cached_property
    def nl(self) -> np.ndarray:
        return np.array(self.nl_multiplier)

    @property
    def edges(self) -> list[tuple[int, int]]:
        n = self.n_relations
        return [(i, j) for i in range(n) for j in range(i + 1, n) if self.selectivity[i][j] < 1.0]

    @property
    def context_text(self) -> str:
        rels = " ".join(f"r{i}={c:.3g}" for i, c in enumerate(self.cardinalities))
        joins = " ".join(f"r{i}-r{j}={self.selectivity[i][j]:.3g}" for i, j in self.edges)
        return f"relations: {rels}\njoins: {joins}"


_REL_RE = re.compile(r"r(\d+)=([0-9.e+-]+)")


def parse_query_context(text: str) -> list[float]:
    """Cardinalities listed on the ``relations:`` line of a query context."""
    line = next((ln for ln in text.splitlines() if ln.startswith("relations:")), "")
    pairs = sorted((int(i), float(c)) for i, c in _REL_RE.findall(line))
    return [c for _, c in pairs]


@dataclass(frozen=True)
class QuerySchema:
    """Join graph shared by a family of query tasks; tasks jitter its statistics."""

    n_relations: int
    log_card: tuple[float, ...]
    edges: tuple[tuple[int, int], ...]
    log_sel: tuple[float, ...]
    nl_mult: tuple[float, ...]
    card_jitter: float = 0.75
    sel_jitter: float = 0.5


def _random_connected_edges(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    perm = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        a, b = int(perm[k]), int(perm[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    for i, j in itertools.combinations(range(n), 2):
        if (i, j) not in edges and rng.random() < EXTRA_EDGE_PROB:
            edges.add((i, j))
    return sorted(edges)


def _seed_tag(seed: SeedLike) -> str:
    return hashlib.sha256(repr(seed).encode()).hexdigest()[:8]


def _log_uniform(rng, lo, hi, size=None):
    return 10.0 ** rng.uniform(math.log10(lo), math.log10(hi), size)


def gen_query_schema(seed: SeedLike, n: int) -> QuerySchema:
    if not MIN_RELATIONS <= n <= MAX_RELATIONS:
        raise ValueError(f"n_relations must be in [{MIN_RELATIONS}, {MAX_RELATIONS}], got {n}")
    rng = np.random.default_rng(seed)
    log_card = rng.uniform(*LOG_CARD_RANGE, n)
    edges = _random_connected_edges(rng, n)
    log_sel = rng.uniform(*LOG_SEL_RANGE, len(edges))
    nl = _log_uniform(rng, *NL_MULT_RANGE, len(edges))
    return QuerySchema(
        n_relations=n,
        log_card=tuple(float(x) for x in log_card),
        edges=tuple(edges),
        log_sel=tuple(float(x) for x in log_sel),
        nl_mult=tuple(float(x) for x in nl),
    )


def _build_query_spec(task_id, n, card, edges, sel_vals, nl_vals) -> QueryTaskSpec:
    sel = np.ones((n, n))
    nl = np.ones((n, n))
    for (i, j), s, m in zip(edges, sel_vals, nl_vals):
        sel[i, j] = sel[j, i] = s
        nl[i, j] = nl[j, i] = m
    draft = QueryTaskSpec(
        task_id=task_id,
        n_relations=n,
        cardinalities=tuple(float(c) for c in card),
        selectivity=tuple(tuple(float(x) for x in row) for row in sel),
        nl_multiplier=tuple(tuple(float(x) for x in row) for row in nl),
        timeout_tau=math.inf,
    )
    tau = TIMEOUT_FACTOR * plan_cost(draft, heuristic_plan(draft))
    spec = QueryTaskSpec(
        task_id=task_id,
        n_relations=n,
        cardinalities=draft.cardinalities,
        selectivity=draft.selectivity,
        nl_multiplier=draft.nl_multiplier,
        timeout_tau=float(tau),
    )
    _check_non_degenerate(spec)
    return spec


def _check_non_degenerate(spec: QueryTaskSpec, samples: int = 16):
    rng = np.random.default_rng(0)
    costs = {plan_cost(spec, random_plan(spec.n_relations, rng)) for _ in range(samples)}
    costs.add(plan_cost(spec, heuristic_plan(spec)))
    if len(costs) < 2:
        raise ValueError(f"task {spec.task_id} has a flat cost landscape")


def gen_query_task(seed: SeedLike, n: int, task_id: Optional[str] = None,
                   schema: Optional[QuerySchema] = None) -> QueryTaskSpec:
    """Generate a query task deterministically from ``seed``.

    Without a schema every statistic is drawn independently: cardinalities
    log-uniform in [1e2, 1e6], selectivities log-uniform in [1e-4, 1] on a
    random connected predicate graph. With a schema the graph is shared and
    the statistics are jittered around the schema's values (clipped to the
    same ranges), so tasks from one workload resemble each other the way
    queries over a common database do.
    """
    if not MIN_RELATIONS <= n <= MAX_RELATIONS:
        raise ValueError(f"n_relations must be in [{MIN_RELATIONS}, {MAX_RELATIONS}], got {n}")
    rng = np.random.default_rng(seed)
    task_id = task_id if task_id is not None else "q" + _seed_tag(seed)
    if schema is None:
        card = _log_uniform(rng, 10**LOG_CARD_RANGE[0], 10**LOG_CARD_RANGE[1], n)
        edges = _random_connected_edges(rng, n)
        sel = _log_uniform(rng, 10**LOG_SEL_RANGE[0], 10**LOG_SEL_RANGE[1], len(edges))
        nl = _log_uniform(rng, *NL_MULT_RANGE, len(edges))
    else:
        if schema.n_relations != n:
            raise ValueError("schema and task disagree on n_relations")
        log_card = np.clip(np.array(schema.log_card) + rng.normal(0, schema.card_jitter, n), *LOG_CARD_RANGE)
        log_sel = np.clip(
            np.array(schema.log_sel) + rng.normal(0, schema.sel_jitter, len(schema.edges)), *LOG_SEL_RANGE
        )
        card, edges, sel, nl = 10.0**log_card, list(schema.edges), 10.0**log_sel, schema.nl_mult
    return _build_query_spec(task_id, n, card, edges, sel, nl)


def plan_cost(spec: QueryTaskSpec, plan: JoinPlan) -> float:
    """Sum of per-step output cardinalities, weighted by the operator cost."""
    card, sel, nl = spec.card, spec.sel, spec.nl
    first = plan.order[0]
    acc_rels = [first]
    acc = card[first]
    total = 0.0
    for rel, op in zip(plan.order[1:], plan.ops):
        out = acc * card[rel] * float(np.prod(sel[rel, acc_rels]))
        if op == JoinOp.HASH_JOIN:
            mult = 1.0
        else:
            mult = float(np.min(nl[rel, acc_rels])) * (1.0 + math.log10(card[rel]))
        total += mult * out
        acc = out
        acc_rels.append(rel)
    return float(total)


def heuristic_plan(spec: QueryTaskSpec) -> JoinPlan:
    """Greedy plan: smallest relation first, then always the smallest next intermediate."""
    card, sel, nl = spec.card, spec.sel, spec.nl
    n = spec.n_relations
    first = int(np.argmin(card))
    order, ops = [first], []
    acc = card[first]
    left = set(range(n)) - {first}
    while left:
        outs = {r: acc * card[r] * float(np.prod(sel[r, order])) for r in sorted(left)}
        rel = min(outs, key=lambda r: (outs[r], r))
        nl_mult = float(np.min(nl[rel, order])) * (1.0 + math.log10(card[rel]))
        ops.append(JoinOp.NESTED_LOOP if nl_mult < 1.0 else JoinOp.HASH_JOIN)
        order.append(rel)
        acc = outs[rel]
        left.remove(rel)
    return JoinPlan(tuple(order), tuple(ops))


def random_plan(n: int, rng: np.random.Generator) -> JoinPlan:
    order = rng.permutation(n)
    ops = rng.integers(0, 2, n - 1)
    return JoinPlan(tuple(int(o) for o in order), tuple(JoinOp(int(b)) for b in ops))


def all_plans(n: int):
    for order in itertools.permutations(range(n)):
        for bits in itertools.product((0, 1), repeat=n - 1):
            yield JoinPlan(order, tuple(JoinOp(b) for b in bits))


def eval_plan(spec: QueryTaskSpec, plan: JoinPlan, budget: Budget,
              noise_sd: float = 0.0, rng: Optional[np.random.Generator] = None) -> Outcome:
    if plan.n != spec.n_relations:
        raise InvalidPlan(f"plan over {plan.n} relations for a task with {spec.n_relations}")
    budget.charge()
    cost = plan_cost(spec, plan)
    if noise_sd > 0:
        rng = rng if rng is not None else np.random.default_rng()
        cost *= math.exp(noise_sd * rng.standard_normal())
    if cost > spec.timeout_tau:
        return Censored(spec.timeout_tau)
    return Exact(cost)


# -- sequence tasks ---------------------------------------------------------------


@dataclass(frozen=True)
class SeqTaskSpec:
    task_id: str
    seed: str
    motif_weights: tuple[tuple[float, ...], ...]
    seed_score: float = SEED_SCORE
    threshold: float = DEFAULT_SIMILARITY

    domain = Domain.SEQUENCE

    def __post_init__(self):
        if set(self.seed) - set(AMINO_ACIDS) or not self.seed:
            raise ValueError("seed must be a non-empty amino-acid string")
        if len(self.motif_weights) != len(self.seed):
            raise ValueError("need one weight row per seed position")

    @property
    def context_text(self) -> str:
        return self.seed

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array(self.motif_weights)


_AA_POS = {a: i for i, a in enumerate(AMINO_ACIDS)}


def gen_seq_landscape(seed: SeedLike, max_len: int = SEQ_LEN_RANGE[1]) -> np.ndarray:
    """Per-position, per-letter weights shared by every task of a workload."""
    return np.random.default_rng(seed).normal(0.0, MOTIF_SCALE, (max_len, len(AMINO_ACIDS)))


def gen_seq_task(seed: SeedLike, length: Optional[int] = None, task_id: Optional[str] = None,
                 landscape: Optional[np.ndarray] = None) -> SeqTaskSpec:
    rng = np.random.default_rng(seed)
    if length is None:
        length = int(rng.integers(SEQ_LEN_RANGE[0], SEQ_LEN_RANGE[1] + 1))
    if not SEQ_LEN_RANGE[0] <= length <= SEQ_LEN_RANGE[1]:
        raise ValueError(f"seed length must be in {SEQ_LEN_RANGE}, got {length}")
    seq = "".join(AMINO_ACIDS[i] for i in rng.integers(0, len(AMINO_ACIDS), length))
    if landscape is None:
        weights = rng.normal(0.0, MOTIF_SCALE, (length, len(AMINO_ACIDS)))
    else:
        weights = np.asarray(landscape)[:length]
    task_id = task_id if task_id is not None else "p" + _seed_tag(seed)
    return SeqTaskSpec(task_id, seq, tuple(tuple(float(w) for w in row) for row in weights))


def seq_score(spec: SeqTaskSpec, seq: str) -> float:
    w = spec.weights
    delta = sum(w[i, _AA_POS[c]] - w[i, _AA_POS[s]] for i, (c, s) in enumerate(zip(seq, spec.seed)) if c != s)
    return float(spec.seed_score + delta)


def eval_seq(spec: SeqTaskSpec, cand: EditedSeq, budget: Budget) -> Outcome:
    budget.charge()
    if len(cand.seq) != len(spec.seed) or not is_feasible(spec.seed, cand.seq, spec.threshold):
        raise ConstraintViolated(f"candidate violates the {spec.threshold:.0%} similarity constraint")
    return Exact(seq_score(spec, cand.seq))


def evaluate(spec, cand, budget: Budget) -> Outcome:
    if isinstance(spec, QueryTaskSpec):
        return eval_plan(spec, cand, budget)
    return eval_seq(spec, cand, budget)


# -- fallback initializers -------------------------------------------------------


def fallback_candidates(spec, count: int, rng: np.random.Generator, exclude=()) -> list:
    """The null-policy initializer.

    Query tasks: the greedy heuristic plan followed by random plans.
    Sequence tasks: random substitutions right at the similarity boundary.
    Candidates are distinct and avoid ``exclude``.
    """
    seen = set(exclude)
    out = []
    if isinstance(spec, QueryTaskSpec):
        n = spec.n_relations
        space = math.factorial(n) * 2 ** (n - 1)
        greedy = heuristic_plan(spec)
        if count > 0 and greedy not in seen:
            out.append(greedy)
            seen.add(greedy)
        while len(out) < count and len(seen) < space:
            plan = random_plan(n, rng)
            if plan not in seen:
                out.append(plan)
                seen.add(plan)
        return out
    seed = spec.seed
    edits = max(1, max_edits(len(seed), spec.threshold))
    attempts = 0
    while len(out) < count and attempts < 50 * max(count, 1):
        attempts += 1
        letters = list(seed)
        for pos in rng.choice(len(seed), size=min(edits, len(seed)), replace=False):
            choices = [a for a in AMINO_ACIDS if a != seed[pos]]
            letters[pos] = choices[rng.integers(0, len(choices))]
        cand = EditedSeq("".join(letters), spec.task_id)
        if cand not in seen and is_feasible(seed, cand.seq, spec.threshold):
            out.append(cand)
            seen.add(cand)
    return out


# -- workloads --------------------------------------------------------------------


def gen_workload(domain: Domain, n_tasks: int, seed: int, n_val: Optional[int] = None,
                 n_relations: int = 8, shared_schema: bool = True,
                 seq_len: Optional[int] = None) -> Workload:
    """A seeded workload; the last ``n_val`` tasks (default 25%) are held out for validation."""
    domain = Domain(domain)
    if n_tasks < 1:
        raise ValueError("n_tasks must be positive")
    n_val = n_tasks // 4 if n_val is None else n_val
    if not 0 <= n_val <= n_tasks:
        raise ValueError("n_val must lie in [0, n_tasks]")
    tasks = []
    if domain == Domain.QUERY:
        schema = gen_query_schema([seed, 0xD8], n_relations) if shared_schema else None
        for i in range(n_tasks):
            tasks.append(gen_query_task([seed, i], n_relations, task_id=f"q{i:04d}", schema=schema))
    else:
        landscape = gen_seq_landscape([seed, 0xA3]) if shared_schema else None
        for i in range(n_tasks):
            tasks.append(gen_seq_task([seed, i], seq_len, task_id=f"p{i:04d}", landscape=landscape))
    val_ids = {t.task_id for t in tasks[n_tasks - n_val:]}
    return Workload(domain, tuple(tasks), frozenset(val_ids), seed)


def task_to_dict(spec) -> dict:
    if isinstance(spec, QueryTaskSpec):
        return {
            "cardinalities": list(spec.cardinalities),
            "context": spec.context_text,
            "domain": Domain.QUERY.value,
            "n_relations": spec.n_relations,
            "nl_multiplier": [list(r) for r in spec.nl_multiplier],
            "selectivity": [list(r) for r in spec.selectivity],
            "task_id": spec.task_id,
            "timeout_tau": spec.timeout_tau,
        }
    return {
        "context": spec.context_text,
        "domain": Domain.SEQUENCE.value,
        # only the oracle may read this block
        "hidden": {"motif_weights": [list(r) for r in spec.motif_weights]},
        "seed": spec.seed,
        "seed_score": spec.seed_score,
        "task_id": spec.task_id,
        "threshold": spec.threshold,
    }


def task_from_dict(d: dict):
    if d["domain"] == Domain.QUERY.value:
        return QueryTaskSpec(
            task_id=d["task_id"],
            n_relations=int(d["n_relations"]),
            cardinalities=tuple(float(c) for c in d["cardinalities"]),
            selectivity=tuple(tuple(float(x) for x in r) for r in d["selectivity"]),
            nl_multiplier=tuple(tuple(float(x) for x in r) for r in d["nl_multiplier"]),
            timeout_tau=float(d["timeout_tau"]),
        )
    return SeqTaskSpec(
        task_id=d["task_id"],
        seed=d["seed"],
        motif_weights=tuple(tuple(float(x) for x in r) for r in d["hidden"]["motif_weights"]),
        seed_score=float(d["seed_score"]),
        threshold=float(d["threshold"]),
    )
