"""Value types shared across the package: outcomes, observations, trajectories, workloads."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional, Union

from .encode import EditedSeq, JoinOp, JoinPlan

if TYPE_CHECKING:
    from .oracle import QueryTaskSpec, SeqTaskSpec

    TaskSpec = Union[QueryTaskSpec, SeqTaskSpec]

Candidate = Union[JoinPlan, EditedSeq]


class Domain(str, enum.Enum):
    QUERY = "query"
    SEQUENCE = "sequence"


@dataclass(frozen=True)
class Exact:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Censored:
    """The oracle timed out: the true value is only known to be >= tau."""

    tau: float

    def __post_init__(self):
        object.__setattr__(self, "tau", float(self.tau))
        if not self.tau > 0:
            raise ValueError(f"censoring threshold must be positive, got {self.tau}")


Outcome = Union[Exact, Censored]


@dataclass(frozen=True)
class Observation:
    candidate: Candidate
    outcome: Outcome
    call_index: int


@dataclass(frozen=True)
class Trajectory:
    task: str
    observations: tuple[Observation, ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        calls = [o.call_index for o in self.observations]
        if any(b <= a for a, b in zip(calls, calls[1:])):
            raise ValueError("call indices must be strictly increasing")

    def __len__(self):
        return len(self.observations)

    def exact(self) -> list[Observation]:
        return [o for o in self.observations if isinstance(o.outcome, Exact)]


@dataclass(frozen=True)
class Workload:
    domain: Domain
    tasks: tuple[Any, ...]
    validation_ids: frozenset[str] = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "validation_ids", frozenset(self.validation_ids))
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique within a workload")
        if not self.validation_ids <= set(ids):
            raise ValueError("validation ids must name tasks of the workload")

    @property
    def train(self) -> list:
        return [t for t in self.tasks if t.task_id not in self.validation_ids]

    @property
    def validation(self) -> list:
        return [t for t in self.tasks if t.task_id in self.validation_ids]

    def task(self, task_id: str):
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def top_k(traj: Trajectory, k: int) -> list[tuple[Candidate, float]]:
    """The ``k`` best exact observations, ascending; ties go to the earlier call."""
    if k < 1:
        raise ValueError("k must be >= 1")
    exact = sorted(traj.exact(), key=lambda o: (o.outcome.value, o.call_index))
    return [(o.candidate, o.outcome.value) for o in exact[:k]]


def incumbent(traj: Trajectory) -> Optional[float]:
    values = [o.outcome.value for o in traj.exact()]
    return min(values) if values else None


def best_so_far_curve(traj: Trajectory) -> list[tuple[int, Optional[float]]]:
    curve = []
    best = None
    for obs in traj.observations:
        if isinstance(obs.outcome, Exact) and (best is None or obs.outcome.value < best):
            best = obs.outcome.value
        curve.append((obs.call_index, best))
    return curve


# -- JSON-ready conversion -------------------------------------------------------


def candidate_to_dict(cand: Candidate) -> dict:
    if isinstance(cand, JoinPlan):
        return {"kind": "plan", "ops": [int(o) for o in cand.ops], "order": list(cand.order)}
    return {"kind": "seq", "seed_id": cand.seed_id, "seq": cand.seq}


def candidate_from_dict(d: dict) -> Candidate:
    if d["kind"] == "plan":
        return JoinPlan(tuple(d["order"]), tuple(JoinOp(b) for b in d["ops"]))
    if d["kind"] == "seq":
        return EditedSeq(d["seq"], d.get("seed_id", ""))
    raise ValueError(f"unknown candidate kind {d['kind']!r}")


def outcome_to_dict(outcome: Outcome) -> dict:
    if isinstance(outcome, Exact):
        return {"kind": "exact", "value": outcome.value}
    return {"kind": "censored", "tau": outcome.tau}


def outcome_from_dict(d: dict) -> Outcome:
    if d["kind"] == "exact":
        return Exact(d["value"])
    if d["kind"] == "censored":
        return Censored(d["tau"])
    raise ValueError(f"unknown outcome kind {d['kind']!r}")


def observation_to_dict(obs: Observation) -> dict:
    return {
        "call": obs.call_index,
        "candidate": candidate_to_dict(obs.candidate),
        "outcome": outcome_to_dict(obs.outcome),
    }


def observation_from_dict(d: dict) -> Observation:
    return Observation(candidate_from_dict(d["candidate"]), outcome_from_dict(d["outcome"]), int(d["call"]))
