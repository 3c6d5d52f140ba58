"""The closed loop: policy-initialized BO per task, fine-tune rounds over
trajectories, self-augmentation, and few-shot Best@k evaluation."""

from __future__ import annotations

import enum
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .acquire import AcquisitionConfig, propose_batch
from .core import Candidate, Censored, Domain, Exact, Observation, Outcome, Trajectory, Workload, incumbent, top_k
from .encode import decode_plan, decode_seq, encode_plan, encode_seq, plan_dim
from .oracle import Budget, BudgetExhausted, QueryTaskSpec, evaluate, fallback_candidates
from .policy import (
    FinetuneRecord,
    NGramPolicy,
    Policy,
    RemoteLLMConfig,
    RemotePolicy,
    Rejected,
    _raw_samples,
    propose,
    sanitize,
    train_ngram,
)
from .surrogate import fit, fit_censored_arrays

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = {Domain.QUERY: 0.7, Domain.SEQUENCE: 1.0}


class InsufficientTasks(ValueError):
    pass


class AwaitingFinetune(RuntimeError):
    """Raised when the remote backend needs an operator-run fine-tune before the next round."""

    def __init__(self, round_index: int, dataset_path):
        super().__init__(f"round {round_index} done; fine-tune on {dataset_path} and resume with the new model name")
        self.round_index = round_index
        self.dataset_path = dataset_path


class DatasetMode(str, enum.Enum):
    APPEND = "append"
    REPLACE_OLDEST = "replace_oldest"


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def task_domain(task) -> Domain:
    return Domain.QUERY if isinstance(task, QueryTaskSpec) else Domain.SEQUENCE


def final_value(traj: Trajectory, task) -> float:
    """Incumbent, or the timeout when every call was censored."""
    inc = incumbent(traj)
    if inc is not None:
        return inc
    return float(task.timeout_tau) if isinstance(task, QueryTaskSpec) else math.inf


def outcome_value(outcome: Outcome) -> float:
    return outcome.value if isinstance(outcome, Exact) else outcome.tau


# -- inner loop -------------------------------------------------------------------


@dataclass(frozen=True)
class InnerConfig:
    budget: int = 300
    batch: int = 10
    init_count: int = 50
    top_k: int = 5
    rng_seed: int = 0
    temperature: Optional[float] = None
    pool_size: int = 512
    local_fraction: float = 0.5
    perturb_sigma: float = 0.1

    def __post_init__(self):
        if not (self.budget >= self.init_count >= 1 and self.batch >= 1 and self.top_k >= 1):
            raise ValueError("need budget >= init_count >= 1, batch >= 1, top_k >= 1")

    @property
    def acquisition(self) -> AcquisitionConfig:
        return AcquisitionConfig(self.batch, max(self.pool_size, self.batch), self.local_fraction,
                                 self.perturb_sigma)


class _Codec:
    """Latent codec and target transform for one task."""

    def __init__(self, task):
        self.task = task
        if isinstance(task, QueryTaskSpec):
            self.dim = plan_dim(task.n_relations)
        else:
            self.dim = len(task.seed)

    def decode(self, z) -> Candidate:
        t = self.task
        if isinstance(t, QueryTaskSpec):
            return decode_plan(z, t.n_relations)
        return decode_seq(z, t.seed, t.task_id, t.threshold)

    def encode(self, cand) -> np.ndarray:
        return encode_plan(cand) if isinstance(self.task, QueryTaskSpec) else encode_seq(cand.seq)

    def transform(self, value: float) -> float:
        # plan costs span many orders of magnitude; model them in log space
        return math.log10(value) if isinstance(self.task, QueryTaskSpec) else value


@dataclass(frozen=True)
class InnerRun:
    trajectory: Trajectory
    pad_count: int
    init_size: int
    oracle_calls: int


def run_inner(task, policy: Optional[Policy], cfg: InnerConfig, budget: Optional[Budget] = None) -> InnerRun:
    """Initialize from ``policy`` (or the fallback initializer when it is None), then BO."""
    rng = np.random.default_rng(cfg.rng_seed)
    budget = budget if budget is not None else Budget(cfg.budget)
    codec = _Codec(task)
    domain = task_domain(task)
    temperature = cfg.temperature if cfg.temperature is not None else DEFAULT_TEMPERATURE[domain]

    if policy is None:
        init, pads = fallback_candidates(task, cfg.init_count, rng), 0
    else:
        prop = propose(policy, task, cfg.init_count, temperature, rng)
        init, pads = list(prop.candidates), prop.pad_count

    observations: list[Observation] = []
    Z: list[np.ndarray] = []
    y: list[float] = []
    censored: list[bool] = []
    seen = set()

    def record(cand):
        outcome = evaluate(task, cand, budget)
        observations.append(Observation(cand, outcome, len(observations) + 1))
        seen.add(cand)
        Z.append(codec.encode(cand))
        y.append(codec.transform(outcome_value(outcome)))
        censored.append(isinstance(outcome, Censored))

    def accept(z) -> bool:
        cand = codec.decode(z)
        if cand in seen or cand in pending:
            return False
        pending.add(cand)
        return True

    acq = cfg.acquisition
    try:
        for cand in init:
            record(cand)
        steps = budget.remaining // cfg.batch
        for _ in range(steps):
            pending: set = set()
            traj = Trajectory(task.task_id, observations, cfg.rng_seed)
            if not any(not c for c in censored):
                batch = rng.random((cfg.batch, codec.dim))
            else:
                X = np.array(Z)
                model = fit_censored_arrays(X, y, censored) if any(censored) else fit(X, y)
                anchors = np.array([codec.encode(c) for c, _ in top_k(traj, acq.n_anchors)])
                best = min(v for v, c in zip(y, censored) if not c)
                batch = propose_batch(model, anchors, best, acq, rng, accept)
            for z in batch:
                record(codec.decode(z))
    except BudgetExhausted:
        log.info("budget exhausted on task %s after %d calls", task.task_id, budget.used)
    traj = Trajectory(task.task_id, observations, cfg.rng_seed)
    return InnerRun(traj, pads, len(init), budget.used)


def inner_loop(task, policy: Optional[Policy], cfg: InnerConfig, budget: Optional[Budget] = None) -> Trajectory:
    return run_inner(task, policy, cfg, budget).trajectory


# -- fine-tune datasets -----------------------------------------------------------


def build_finetune_dataset(trajectories: Sequence[Trajectory], contexts: Mapping[str, str], k: int,
                           domain: Domain, mode: DatasetMode = DatasetMode.APPEND,
                           prior: Sequence[FinetuneRecord] = ()) -> list[FinetuneRecord]:
    """Top-``k`` exact solutions of every trajectory as records, merged into ``prior``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    new = [
        FinetuneRecord.for_candidate(domain, contexts[traj.task], cand)
        for traj in trajectories
        for cand, _ in top_k(traj, k)
    ]
    prior = list(prior)
    if DatasetMode(mode) == DatasetMode.REPLACE_OLDEST:
        prior = prior[min(len(new), len(prior)):]
    return prior + new


# -- outer loop -------------------------------------------------------------------


@dataclass(frozen=True)
class OuterConfig:
    rounds: int = 3
    tasks_per_round: int = 20
    retrain_each_round: bool = True
    dataset_mode: DatasetMode = DatasetMode.APPEND
    seed: int = 0
    ngram_order: int = 3
    ngram_alpha: float = 0.5
    epochs: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dataset_mode", DatasetMode(self.dataset_mode))
        if self.rounds < 1 or self.tasks_per_round < 1:
            raise ValueError("need rounds >= 1 and tasks_per_round >= 1")


@dataclass(frozen=True)
class TaskResult:
    task: str
    final_value: float
    pad_count: int
    init_size: int
    init_best: float
    oracle_calls: int


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    policy_id: str  # policy that initialized this round's runs
    trained_policy_id: str  # policy produced at the end of the round
    cumulative_tasks: int
    dataset_size: int
    tasks: tuple[TaskResult, ...]

    @property
    def summed_incumbent(self) -> float:
        return float(sum(t.final_value for t in self.tasks))

    @property
    def pad_rate(self) -> float:
        total = sum(t.init_size for t in self.tasks)
        return sum(t.pad_count for t in self.tasks) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "cumulative_tasks": self.cumulative_tasks,
            "dataset_size": self.dataset_size,
            "pad_rate": self.pad_rate,
            "policy_id": self.policy_id,
            "round_index": self.round_index,
            "summed_incumbent": self.summed_incumbent,
            "tasks": [
                {
                    "final_value": t.final_value,
                    "init_best": t.init_best,
                    "init_size": t.init_size,
                    "oracle_calls": t.oracle_calls,
                    "pad_count": t.pad_count,
                    "task": t.task,
                }
                for t in self.tasks
            ],
            "trained_policy_id": self.trained_policy_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        tasks = tuple(
            TaskResult(t["task"], float(t["final_value"]), int(t["pad_count"]), int(t["init_size"]),
                       float(t["init_best"]), int(t["oracle_calls"]))
            for t in d["tasks"]
        )
        return cls(int(d["round_index"]), d["policy_id"], d["trained_policy_id"],
                   int(d["cumulative_tasks"]), int(d["dataset_size"]), tasks)


def init_best(run: InnerRun, task) -> float:
    """Best value among the evaluated initialization alone (timeout if all censored)."""
    head = Trajectory(run.trajectory.task, run.trajectory.observations[: run.init_size])
    return final_value(head, task)


def task_result(run: InnerRun, task) -> TaskResult:
    return TaskResult(task.task_id, final_value(run.trajectory, task), run.pad_count, run.init_size,
                      init_best(run, task), run.oracle_calls)


def _run_one(args):
    task, policy, cfg = args
    return run_inner(task, policy, cfg)


def run_tasks(tasks: Sequence, policy: Optional[Policy], inner: InnerConfig, seed_parts: tuple,
              workers: int = 1) -> list[InnerRun]:
    """Inner loops over ``tasks`` with per-task seeds derived from ``seed_parts`` and the task id."""
    jobs = [(t, policy, replace(inner, rng_seed=derive_seed(*seed_parts, t.task_id))) for t in tasks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def policy_name(cumulative_tasks: int) -> str:
    return f"BOLT-{cumulative_tasks}"


@dataclass
class OuterState:
    """Everything needed to continue the outer loop at a round barrier."""

    completed_rounds: int = 0
    policy: Optional[Policy] = None
    dataset: list = field(default_factory=list)
    history: list = field(default_factory=list)  # [(policy, RoundReport)]
    awaiting_round: Optional[int] = None


def outer_loop(workload: Workload, policy0: Optional[Policy], outer: OuterConfig, inner: InnerConfig,
               run_dir=None, workers: int = 1, remote: Optional[RemoteLLMConfig] = None,
               finetuned_model: Optional[str] = None, stop_after: Optional[int] = None):
    """Rounds of inner loops on fresh training tasks, each followed by a policy update.

    Returns ``[(policy_after_round, report), ...]``. With ``run_dir`` every
    round is persisted and an existing run resumes at its last completed
    round. With ``remote`` the retrain step exports the round's dataset and
    raises :class:`AwaitingFinetune`; call again with ``finetuned_model`` set
    to the name of the model fine-tuned on it. ``stop_after`` ends the call
    once that many rounds are complete.
    """
    train = workload.train
    need = outer.rounds * outer.tasks_per_round
    if need > len(train):
        raise InsufficientTasks(f"{outer.rounds} rounds x {outer.tasks_per_round} tasks need {need} "
                                f"training tasks, workload has {len(train)}")
    if remote is not None and run_dir is None:
        raise ValueError("the remote backend needs a run directory")
    if run_dir is None:
        return _outer_rounds(workload, OuterState(policy=policy0), outer, inner, None, workers, remote,
                             finetuned_model, stop_after)
    from . import store

    with store.run_lock(run_dir):
        state = store.begin_or_resume(run_dir, workload, outer, inner, policy0, remote)
        state = state or OuterState(policy=policy0)
        return _outer_rounds(workload, state, outer, inner, run_dir, workers, remote, finetuned_model,
                             stop_after)


def _outer_rounds(workload, state: OuterState, outer, inner, run_dir, workers, remote, finetuned_model,
                  stop_after):
    if run_dir is not None:
        from . import store
    domain = workload.domain
    train = workload.train
    contexts = {t.task_id: t.context_text for t in workload.tasks}

    if state.awaiting_round is not None:
        r = state.awaiting_round
        if not finetuned_model:
            raise AwaitingFinetune(r, store.round_dir(run_dir, r) / "finetune.jsonl")
        dataset, draft = store.load_pending(run_dir, r)
        policy = RemotePolicy(replace(remote, model_name=finetuned_model), domain)
        report = replace(draft, trained_policy_id=policy.name)
        store.save_round(run_dir, r, [], dataset, report, policy)
        state.completed_rounds, state.policy, state.dataset = r, policy, dataset
        state.history.append((policy, report))
        state.awaiting_round = None

    for r in range(state.completed_rounds + 1, outer.rounds + 1):
        if stop_after is not None and state.completed_rounds >= stop_after:
            break
        tasks = train[(r - 1) * outer.tasks_per_round: r * outer.tasks_per_round]
        current = state.policy
        runs = run_tasks(tasks, current, inner, (outer.seed, "round", r), workers)
        cumulative = r * outer.tasks_per_round
        dataset = build_finetune_dataset([run.trajectory for run in runs], contexts, inner.top_k, domain,
                                         outer.dataset_mode, state.dataset)
        retrain = outer.retrain_each_round or r == outer.rounds
        if retrain and remote is not None:
            report = _report(r, current, "pending", cumulative, dataset, runs, tasks)
            path = store.save_round(run_dir, r, runs, dataset, report, None, awaiting=True)
            raise AwaitingFinetune(r, path)
        if retrain:
            new_policy = train_ngram(dataset, epochs=outer.epochs, order=outer.ngram_order,
                                     alpha=outer.ngram_alpha, name=policy_name(cumulative))
        else:
            new_policy = current
        report = _report(r, current, _pid(new_policy), cumulative, dataset, runs, tasks)
        if run_dir is not None:
            store.save_round(run_dir, r, runs, dataset, report, new_policy)
        state.completed_rounds, state.policy, state.dataset = r, new_policy, dataset
        state.history.append((new_policy, report))
    return state.history


def _pid(policy: Optional[Policy]) -> str:
    if policy is None:
        return "null"
    return policy.name


def _report(r, current, trained_id, cumulative, dataset, runs, tasks) -> RoundReport:
    results = sorted((task_result(run, t) for run, t in zip(runs, tasks)), key=lambda x: x.task)
    return RoundReport(r, _pid(current), trained_id, cumulative, len(dataset), tuple(results))


# -- self-augmentation ------------------------------------------------------------

Criterion = Callable[[object, Candidate, Outcome], bool]


def beats_reference(thresholds: Mapping[str, float]) -> Criterion:
    """Keep exact results strictly better than a per-task reference value."""
    return lambda task, cand, outcome: isinstance(outcome, Exact) and outcome.value < thresholds[task.task_id]


def below(threshold: float) -> Criterion:
    """Keep exact results strictly below an absolute threshold."""
    return lambda task, cand, outcome: isinstance(outcome, Exact) and outcome.value < threshold


def reject_all(task, cand, outcome) -> bool:
    return False


def accept_all(task, cand, outcome) -> bool:
    return True


def fallback_reference(tasks: Sequence, count: int, seed: int, budget: Budget) -> dict[str, float]:
    """Best value of each task's fallback initializer (every evaluation is charged)."""
    ref = {}
    for t in tasks:
        rng = np.random.default_rng(derive_seed(seed, "reference", t.task_id))
        vals = [outcome_value(evaluate(t, c, budget)) for c in fallback_candidates(t, count, rng)]
        ref[t.task_id] = min(vals)
    return ref


@dataclass(frozen=True)
class SelfAugmentResult:
    delta: tuple
    policy: NGramPolicy
    dataset: tuple
    scored: int
    exhausted: bool


def self_augment(policy: NGramPolicy, dataset: Sequence[FinetuneRecord], tasks: Sequence,
                 samples_per_task: int, criterion: Criterion, budget: Optional[Budget] = None,
                 temperature: Optional[float] = None, seed: int = 0, iterations: int = 1) -> SelfAugmentResult:
    """Sample from the policy, score with the oracle, keep what passes ``criterion``, retrain.

    ``dataset`` must be the data ``policy`` was trained on. Every scoring call
    is charged to ``budget``; when it runs out the accepted samples so far are
    kept and the policy is retrained on them.
    """
    if not tasks:
        return SelfAugmentResult((), policy, tuple(dataset), 0, False)
    budget = budget if budget is not None else Budget(len(tasks) * samples_per_task * iterations)
    domain = policy.domain
    temperature = DEFAULT_TEMPERATURE[domain] if temperature is None else temperature
    data = list(dataset)
    delta: list[FinetuneRecord] = []
    scored = 0
    exhausted = False
    current = policy
    for it in range(iterations):
        added = []
        try:
            for t in tasks:
                rng = np.random.default_rng(derive_seed(seed, "sa", it, t.task_id))
                for raw in _raw_samples(current, t, samples_per_task, temperature, rng):
                    cand = sanitize(raw, t)
                    if isinstance(cand, Rejected):
                        continue
                    outcome = evaluate(t, cand, budget)
                    scored += 1
                    if criterion(t, cand, outcome):
                        added.append(FinetuneRecord.for_candidate(domain, t.context_text, cand))
        except BudgetExhausted:
            exhausted = True
        delta += added
        data += added
        current = train_ngram(data, epochs=policy.epochs, order=policy.order, alpha=policy.alpha,
                              name=policy.name, constrained=policy.constrained)
        if exhausted:
            break
    return SelfAugmentResult(tuple(delta), current, tuple(data), scored, exhausted)


# -- few-shot evaluation ----------------------------------------------------------


@dataclass(frozen=True)
class FewShotTable:
    ks: tuple[int, ...]
    best_at: dict  # k -> summed best value over tasks
    scores: dict  # task id -> per-sample values in draw order
    substituted: dict  # task id -> number of rejected samples replaced by fallback candidates

    def recompute(self) -> dict:
        return {k: float(sum(min(v[:k]) for v in self.scores.values())) for k in self.ks}

    def to_dict(self) -> dict:
        return {
            "best_at": {str(k): v for k, v in self.best_at.items()},
            "ks": list(self.ks),
            "scores": self.scores,
            "substituted": self.substituted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FewShotTable":
        return cls(tuple(int(k) for k in d["ks"]), {int(k): float(v) for k, v in d["best_at"].items()},
                   {t: [float(x) for x in v] for t, v in d["scores"].items()},
                   {t: int(v) for t, v in d["substituted"].items()})


def eval_fewshot(policy: Optional[Policy], tasks: Sequence, ks: Sequence[int],
                 temperature: Optional[float] = None, seed: int = 0,
                 budget: Optional[Budget] = None) -> FewShotTable:
    """Best@k: per task, the best of the first ``k`` samples, summed over tasks.

    One stream of ``max(ks)`` samples per task serves every ``k``. Rejected
    samples are replaced by the next fallback-initializer candidate; censored
    outcomes count at their timeout. ``policy=None`` evaluates the fallback
    initializer itself.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    kmax = ks[-1]
    budget = budget if budget is not None else Budget(len(tasks) * kmax)
    scores, substituted = {}, {}
    for t in tasks:
        rng = np.random.default_rng(derive_seed(seed, "fewshot", t.task_id))
        domain = task_domain(t)
        temp = DEFAULT_TEMPERATURE[domain] if temperature is None else temperature
        spare = iter(fallback_candidates(t, kmax, rng))
        if policy is None:
            cands = list(spare)
            n_sub = 0
        else:
            cands, n_sub = [], 0
            for raw in _raw_samples(policy, t, kmax, temp, rng):
                cand = sanitize(raw, t)
                if isinstance(cand, Rejected):
                    cand = next(spare)
                    n_sub += 1
                cands.append(cand)
        scores[t.task_id] = [outcome_value(evaluate(t, c, budget)) for c in cands]
        substituted[t.task_id] = n_sub
    table = FewShotTable(ks, {}, scores, substituted)
    return replace(table, best_at=table.recompute())
