"""Canonical on-disk formats and run directories with resume.

Single documents are JSON objects carrying ``schema_version``, ``kind``,
``payload`` and the SHA-256 of the canonical payload bytes. Line-delimited
files (trajectories, fine-tune datasets) hold bare records so that exported
datasets stay byte-compatible with hosted fine-tuning; their version, kind and
hash live in a ``<file>.meta.json`` sidecar.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from filelock import FileLock, Timeout

from .core import Domain, Trajectory, Workload, observation_from_dict, observation_to_dict
from .oracle import task_from_dict, task_to_dict
from .policy import FinetuneRecord, NGramPolicy, RemoteLLMConfig, RemotePolicy

SCHEMA_VERSION = 1


class CorruptFile(ValueError):
    pass


class SchemaVersionMismatch(ValueError):
    pass


class ConfigMismatch(SchemaVersionMismatch):
    """A run directory was started with a different configuration or workload."""


class RunLocked(RuntimeError):
    pass


# -- canonical JSON ---------------------------------------------------------------


def _float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = format(x, ".17g")
    return s if any(c in s for c in ".eEn") else s + ".0"


def _emit(obj, out: list):
    if obj is None or isinstance(obj, bool):
        out.append(json.dumps(obj))
    elif isinstance(obj, int):
        out.append(str(int(obj)))
    elif isinstance(obj, float):
        out.append(_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, k in enumerate(sorted(obj)):
            if not isinstance(k, str):
                raise TypeError(f"JSON object keys must be strings, got {type(k).__name__}")
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _emit(obj[k], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    elif hasattr(obj, "item"):  # numpy scalar
        _emit(obj.item(), out)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, floats at 17 significant digits."""
    out: list[str] = []
    _emit(obj, out)
    return "".join(out)


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def content_hash(obj) -> str:
    return sha256_hex(canonical_json(obj))


def _write_atomic(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _parse(path: Path, text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CorruptFile(f"{path}: not valid JSON ({e.msg})") from None


# -- generic document / line-file formats ------------------------------------------


def save_json(path, kind: str, payload) -> str:
    """Write a single-document artifact; returns the payload hash."""
    digest = content_hash(payload)
    doc = {"kind": kind, "payload": payload, "schema_version": SCHEMA_VERSION, "sha256": digest}
    _write_atomic(Path(path), (canonical_json(doc) + "\n").encode())
    return digest


def load_json(path, kind: str):
    path = Path(path)
    doc = _parse(path, path.read_text())
    if not isinstance(doc, dict) or {"kind", "payload", "schema_version", "sha256"} - doc.keys():
        raise CorruptFile(f"{path}: missing envelope fields")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"{path}: schema_version {doc['schema_version']}, expected {SCHEMA_VERSION}")
    if doc["kind"] != kind:
        raise CorruptFile(f"{path}: holds a {doc['kind']!r}, expected {kind!r}")
    if content_hash(doc["payload"]) != doc["sha256"]:
        raise CorruptFile(f"{path}: content hash mismatch")
    return doc["payload"]


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_jsonl(path, kind: str, rows: Iterable, meta: Optional[dict] = None) -> str:
    """Write one canonical JSON object per line plus a hash-bearing sidecar."""
    path = Path(path)
    data = "".join(canonical_json(r) + "\n" for r in rows).encode()
    digest = sha256_hex(data)
    _write_atomic(path, data)
    save_json(_meta_path(path), kind + "-meta", {"file_sha256": digest, "meta": meta or {}})
    return digest


def load_jsonl(path, kind: str) -> tuple[list, dict]:
    path = Path(path)
    info = load_json(_meta_path(path), kind + "-meta")
    data = path.read_bytes()
    if sha256_hex(data) != info["file_sha256"]:
        raise CorruptFile(f"{path}: content hash mismatch")
    rows = [_parse(path, line) for line in data.decode().splitlines() if line.strip()]
    return rows, info["meta"]


# -- typed artifacts --------------------------------------------------------------


def workload_to_dict(w: Workload) -> dict:
    return {
        "domain": w.domain.value,
        "seed": w.seed,
        "tasks": [task_to_dict(t) for t in w.tasks],
        "validation_ids": sorted(w.validation_ids),
    }


def workload_from_dict(d: dict) -> Workload:
    return Workload(Domain(d["domain"]), tuple(task_from_dict(t) for t in d["tasks"]),
                    frozenset(d["validation_ids"]), int(d["seed"]))


def save_workload(path, w: Workload) -> str:
    return save_json(path, "workload", workload_to_dict(w))


def load_workload(path) -> Workload:
    try:
        return workload_from_dict(load_json(path, "workload"))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (CorruptFile, SchemaVersionMismatch)):
            raise
        raise CorruptFile(f"{path}: invalid workload ({e})") from None


def save_trajectory(path, traj: Trajectory) -> str:
    return save_jsonl(path, "trajectory", (observation_to_dict(o) for o in traj.observations),
                      {"rng_seed": traj.rng_seed, "task": traj.task})


def load_trajectory(path) -> Trajectory:
    rows, meta = load_jsonl(path, "trajectory")
    try:
        return Trajectory(meta["task"], tuple(observation_from_dict(r) for r in rows), int(meta["rng_seed"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path}: invalid trajectory ({e})") from None


def save_finetune(path, records: Sequence[FinetuneRecord]) -> str:
    return save_jsonl(path, "finetune", (r.to_dict() for r in records), {"records": len(records)})


def load_finetune(path) -> list[FinetuneRecord]:
    rows, _ = load_jsonl(path, "finetune")
    try:
        return [FinetuneRecord.from_dict(r) for r in rows]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path}: invalid fine-tune record ({e})") from None


def save_policy(path, policy: NGramPolicy) -> str:
    return save_json(path, "ngram-policy", policy.to_dict())


def load_policy(path) -> NGramPolicy:
    try:
        return NGramPolicy.from_dict(load_json(path, "ngram-policy"))
    except (KeyError, TypeError) as e:
        raise CorruptFile(f"{path}: invalid policy ({e})") from None


def save_report(path, report) -> str:
    return save_json(path, "round-report", report.to_dict())


def load_report(path):
    from .loop import RoundReport

    return RoundReport.from_dict(load_json(path, "round-report"))


# -- run directories --------------------------------------------------------------


@dataclass
class RunManifest:
    name: str
    config_hash: str
    workload_hash: str
    config: dict
    completed_rounds: int = 0
    lineage: list = field(default_factory=list)  # [[policy id, cumulative tasks], ...]
    dataset_hashes: list = field(default_factory=list)  # fine-tune file hash per completed round
    awaiting_round: Optional[int] = None  # remote backend: round waiting for an external fine-tune

    def __post_init__(self):
        counts = [c for _, c in self.lineage]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("policy lineage must grow strictly in task count")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["name"], d["config_hash"], d["workload_hash"], d["config"], int(d["completed_rounds"]),
                   [list(x) for x in d["lineage"]], list(d["dataset_hashes"]), d["awaiting_round"])


def manifest_path(run_dir) -> Path:
    return Path(run_dir) / "manifest.json"


def save_manifest(run_dir, m: RunManifest) -> str:
    return save_json(manifest_path(run_dir), "manifest", m.to_dict())


def load_manifest(run_dir) -> RunManifest:
    try:
        return RunManifest.from_dict(load_json(manifest_path(run_dir), "manifest"))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (CorruptFile, SchemaVersionMismatch)):
            raise
        raise CorruptFile(f"{run_dir}: invalid manifest ({e})") from None


def round_dir(run_dir, r: int) -> Path:
    return Path(run_dir) / f"round_{r}"


@contextlib.contextmanager
def run_lock(run_dir):
    """Advisory single-writer lock on a run directory."""
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(Path(run_dir) / "run.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLocked(f"{run_dir} is being written by another process") from None
    try:
        yield
    finally:
        lock.release()


def run_config(outer, inner, policy0, remote: Optional[RemoteLLMConfig]) -> dict:
    """Effective configuration recorded in the manifest; its hash guards resume."""
    cfg = {
        "inner": dataclasses.asdict(inner),
        "outer": {**dataclasses.asdict(outer), "dataset_mode": outer.dataset_mode.value},
        "policy0": None,
        "remote": None,
    }
    if isinstance(policy0, NGramPolicy):
        cfg["policy0"] = {"name": policy0.name, "sha256": content_hash(policy0.to_dict())}
    elif isinstance(policy0, RemotePolicy):
        cfg["policy0"] = {"model_name": policy0.name}
    if remote is not None:
        # the model name changes every round by design, so it is not part of the config
        r = dataclasses.asdict(remote)
        r.pop("model_name")
        cfg["remote"] = r
    return cfg


def _policy_for_round(run_dir, r: int, domain: Domain, remote: Optional[RemoteLLMConfig]):
    d = round_dir(run_dir, r)
    if (d / "policy.json").exists():
        return load_policy(d / "policy.json")
    name = load_json(d / "model.json", "remote-model")["model_name"]
    if remote is None:
        raise ConfigMismatch(f"round {r} used a remote model; resume needs the remote configuration")
    return RemotePolicy(dataclasses.replace(remote, model_name=name), domain)


def begin_or_resume(run_dir, workload: Workload, outer, inner, policy0, remote=None):
    """Create a fresh run directory (returns None) or rebuild the state at its last round barrier."""
    from .loop import OuterState

    run_dir = Path(run_dir)
    cfg = run_config(outer, inner, policy0, remote)
    chash = content_hash(cfg)
    whash = content_hash(workload_to_dict(workload))
    if not manifest_path(run_dir).exists():
        run_dir.mkdir(parents=True, exist_ok=True)
        save_workload(run_dir / "workload.json", workload)
        save_manifest(run_dir, RunManifest(run_dir.name, chash, whash, cfg))
        return None
    m = load_manifest(run_dir)
    if m.config_hash != chash:
        raise ConfigMismatch(f"{run_dir} was started with a different configuration")
    if m.workload_hash != whash:
        raise ConfigMismatch(f"{run_dir} was started with a different workload")
    state = OuterState(policy=policy0)
    for r in range(1, m.completed_rounds + 1):
        policy = _policy_for_round(run_dir, r, workload.domain, remote)
        report = load_report(round_dir(run_dir, r) / "report.json")
        state.history.append((policy, report))
        state.policy = policy
    state.completed_rounds = m.completed_rounds
    if m.completed_rounds:
        state.dataset = load_finetune(round_dir(run_dir, m.completed_rounds) / "finetune.jsonl")
    state.awaiting_round = m.awaiting_round
    return state


def save_round(run_dir, r: int, runs, dataset, report, policy, awaiting: bool = False) -> Path:
    """Persist one round; the manifest update comes last and commits it."""
    d = round_dir(run_dir, r)
    for run in runs:
        save_trajectory(d / "trajectories" / f"{run.trajectory.task}.jsonl", run.trajectory)
    ft = d / "finetune.jsonl"
    ft_hash = save_finetune(ft, dataset)
    m = load_manifest(run_dir)
    if awaiting:
        save_report(d / "pending_report.json", report)
        m.awaiting_round = r
    else:
        if isinstance(policy, NGramPolicy):
            save_policy(d / "policy.json", policy)
        elif isinstance(policy, RemotePolicy):
            save_json(d / "model.json", "remote-model", {"model_name": policy.name})
        save_report(d / "report.json", report)
        m.completed_rounds = r
        m.awaiting_round = None
        m.dataset_hashes = m.dataset_hashes[: r - 1] + [ft_hash]
        if not m.lineage or m.lineage[-1][0] != report.trained_policy_id:
            m.lineage.append([report.trained_policy_id, report.cumulative_tasks])
    save_manifest(run_dir, m)
    return ft


def load_round_trajectories(run_dir, r: int) -> list[Trajectory]:
    files = sorted((round_dir(run_dir, r) / "trajectories").glob("*.jsonl"))
    return [load_trajectory(f) for f in files]


def load_pending(run_dir, r: int):
    """Trajectories, dataset and draft report of a round awaiting a remote fine-tune."""
    d = round_dir(run_dir, r)
    return load_finetune(d / "finetune.jsonl"), load_report(d / "pending_report.json")
