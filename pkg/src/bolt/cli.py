"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 oracle
budget exhausted. Failures print one line ``error: <category>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import store
from .core import Domain, best_so_far_curve
from .loop import (
    AwaitingFinetune,
    DatasetMode,
    FewShotTable,
    InnerConfig,
    InsufficientTasks,
    OuterConfig,
    below,
    beats_reference,
    accept_all,
    reject_all,
    eval_fewshot,
    fallback_reference,
    outer_loop,
    run_tasks,
    self_augment,
    build_finetune_dataset,
)
from .oracle import Budget, BudgetExhausted, gen_workload
from .policy import AuthMissing, RemoteError, RemoteLLMConfig, RemotePolicy

log = logging.getLogger("bolt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_BUDGET = 0, 2, 3, 4
SEQ_THRESHOLD = 8.0


class ConfigError(ValueError):
    pass


# -- config helpers ---------------------------------------------------------------


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict) or set(cfg) - {"inner", "outer", "remote"}:
        raise ConfigError("config must be an object with optional 'inner', 'outer', 'remote' sections")
    return cfg


def _build(cls, section: dict, overrides: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from None


def _inner(args, cfg) -> InnerConfig:
    return _build(InnerConfig, cfg.get("inner", {}), {
        "budget": args.budget, "batch": args.batch, "init_count": args.init_count, "top_k": args.top_k,
        "temperature": args.temperature, "rng_seed": args.seed,
    })


def _remote(args, cfg) -> Optional[RemoteLLMConfig]:
    section = dict(cfg.get("remote", {}))
    if getattr(args, "endpoint", None):
        section["endpoint_url"] = args.endpoint
    if getattr(args, "model", None):
        section["model_name"] = args.model
    if not section:
        return None
    remote = _build(RemoteLLMConfig, section, {})
    # the key is read once here so a missing credential fails before any work starts
    if not os.environ.get(remote.api_key_env):
        raise AuthMissing(f"environment variable {remote.api_key_env} is not set")
    return remote


def _load_policy(path: Optional[str], domain: Domain, remote: Optional[RemoteLLMConfig]):
    if path:
        policy = store.load_policy(path)
        if policy.domain != domain:
            raise ConfigError(f"policy is for {policy.domain.value}, workload is {domain.value}")
        return policy
    if remote is not None:
        return RemotePolicy(remote, domain)
    return None


def _select(workload, which: str):
    if which == "train":
        return workload.train
    if which == "validation":
        return workload.validation
    if which == "all":
        return list(workload.tasks)
    ids = [s for s in which.split(",") if s]
    try:
        return [workload.task(i) for i in ids]
    except KeyError as e:
        raise ConfigError(f"unknown task id {e}") from None


def _ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--ks needs positive integers")
    return ks


def _refuse_existing(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


# -- subcommands ------------------------------------------------------------------


def cmd_gen_workload(args) -> int:
    w = gen_workload(Domain(args.domain), args.n_tasks, args.seed, n_val=args.n_val,
                     n_relations=args.n_relations, shared_schema=not args.independent)
    out = Path(args.out)
    if out.exists() and not args.force:
        try:
            same = store.workload_to_dict(store.load_workload(out)) == store.workload_to_dict(w)
        except (store.CorruptFile, store.SchemaVersionMismatch):
            same = False
        if same:
            log.info("%s already holds this workload", out)
            return EXIT_OK
        raise ConfigError(f"{out} exists with different content; pass --force to overwrite")
    store.save_workload(out, w)
    print(out)
    return EXIT_OK


def cmd_run_inner(args) -> int:
    cfg = _load_config(args.config)
    w = store.load_workload(args.workload)
    inner = _inner(args, cfg)
    remote = _remote(args, cfg)
    policy = _load_policy(args.policy, w.domain, remote)
    tasks = _select(w, args.tasks)
    out = Path(args.out)
    for t in tasks:
        _refuse_existing(out / f"{t.task_id}.jsonl", args.force)
    runs = run_tasks(tasks, policy, inner, (inner.rng_seed, "inner"), args.workers)
    for run in runs:
        store.save_trajectory(out / f"{run.trajectory.task}.jsonl", run.trajectory)
    print(out)
    return EXIT_OK


def cmd_run_outer(args) -> int:
    cfg = _load_config(args.config)
    w = store.load_workload(args.workload)
    inner = _inner(args, cfg)
    outer = _build(OuterConfig, cfg.get("outer", {}), {
        "rounds": args.rounds, "tasks_per_round": args.tasks_per_round, "seed": args.seed,
        "dataset_mode": args.dataset_mode, "retrain_each_round": False if args.no_retrain else None,
    })
    remote = _remote(args, cfg)
    policy0 = _load_policy(args.policy, w.domain, None)
    hist = outer_loop(w, policy0, outer, inner, run_dir=args.run_dir, workers=args.workers, remote=remote,
                      finetuned_model=args.finetuned_model, stop_after=args.stop_after)
    for policy, report in hist:
        print(f"round {report.round_index}\t{report.trained_policy_id}\t{report.summed_incumbent!r}")
    return EXIT_OK


def _final_policy_and_dataset(run_dir):
    m = store.load_manifest(run_dir)
    if not m.completed_rounds:
        raise ConfigError(f"{run_dir} has no completed round")
    d = store.round_dir(run_dir, m.completed_rounds)
    if not (d / "policy.json").exists():
        raise ConfigError(f"{run_dir} ends with a remote model; self-augmentation needs an n-gram policy")
    return store.load_policy(d / "policy.json"), store.load_finetune(d / "finetune.jsonl")


def cmd_self_augment(args) -> int:
    w = store.load_workload(args.workload)
    if args.run_dir:
        policy, dataset = _final_policy_and_dataset(args.run_dir)
    elif args.policy and args.dataset:
        policy, dataset = store.load_policy(args.policy), store.load_finetune(args.dataset)
    else:
        raise ConfigError("give --run-dir, or both --policy and --dataset")
    tasks = _select(w, args.tasks)
    out = Path(args.out)
    _refuse_existing(out / "policy.json", args.force)
    n_calls = len(tasks) * args.samples_per_task
    if args.criterion == "reference":
        budget = Budget(args.budget or 2 * n_calls)
        criterion = beats_reference(fallback_reference(tasks, args.samples_per_task, args.seed, budget))
    else:
        budget = Budget(args.budget or n_calls)
        criterion = {
            "threshold": below(args.threshold),
            "none": reject_all,
            "all": accept_all,
        }[args.criterion]
    res = self_augment(policy, dataset, tasks, args.samples_per_task, criterion, budget,
                       temperature=args.temperature, seed=args.seed)
    store.save_policy(out / "policy.json", res.policy)
    store.save_finetune(out / "finetune.jsonl", res.dataset)
    print(f"added {len(res.delta)} records from {res.scored} scored samples ({budget.used} oracle calls)")
    if res.exhausted:
        raise BudgetExhausted(f"budget of {budget.limit} calls ran out; partial results saved to {out}")
    return EXIT_OK


def cmd_eval_fewshot(args) -> int:
    cfg = _load_config(args.config)
    w = store.load_workload(args.workload)
    remote = _remote(args, cfg)
    if args.run_dir:
        policy, _ = _final_policy_and_dataset(args.run_dir)
    else:
        policy = _load_policy(args.policy, w.domain, remote)
    ks = _ks(args.ks)
    tasks = _select(w, args.tasks)
    out = Path(args.out)
    _refuse_existing(out, args.force)
    budget = Budget(args.budget) if args.budget else None
    table = eval_fewshot(policy, tasks, ks, temperature=args.temperature, seed=args.seed, budget=budget)
    write_fewshot_csv(out, table)
    if args.scores:
        store.save_json(args.scores, "fewshot", table.to_dict())
    print(out)
    return EXIT_OK


def write_fewshot_csv(path, table: FewShotTable):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow([str(k) for k in table.ks])
        wr.writerow([repr(table.best_at[k]) for k in table.ks])


def cmd_export_finetune(args) -> int:
    out = Path(args.out)
    _refuse_existing(out, args.force)
    if args.run_dir:
        m = store.load_manifest(args.run_dir)
        r = args.round or m.awaiting_round or m.completed_rounds
        if not r:
            raise ConfigError(f"{args.run_dir} has no round to export")
        records = store.load_finetune(store.round_dir(args.run_dir, r) / "finetune.jsonl")
    else:
        if not (args.workload and args.trajectories):
            raise ConfigError("give --run-dir, or --workload with --trajectories")
        w = store.load_workload(args.workload)
        trajs = [store.load_trajectory(p) for p in sorted(Path(args.trajectories).glob("*.jsonl"))]
        contexts = {t.task_id: t.context_text for t in w.tasks}
        records = build_finetune_dataset(trajs, contexts, args.top_k, w.domain)
    store.save_finetune(out, records)
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.run_dir:
        m = store.load_manifest(args.run_dir)
        per_task, agg = out / "best_so_far.csv", out / "best_so_far_summed.csv"
        write_curve_csvs(args.run_dir, m.completed_rounds, per_task, agg)
        written += [per_task, agg]
    if args.fewshot:
        if not args.baseline:
            raise ConfigError("--fewshot needs --baseline for the scatter")
        pol = FewShotTable.from_dict(store.load_json(args.fewshot, "fewshot"))
        base = FewShotTable.from_dict(store.load_json(args.baseline, "fewshot"))
        path = out / "fewshot_scatter.csv"
        write_scatter_csv(path, pol, base)
        written.append(path)
    if not written:
        raise ConfigError("nothing to report: give --run-dir and/or --fewshot with --baseline")
    for p in written:
        print(p)
    return EXIT_OK


def write_curve_csvs(run_dir, rounds: int, per_task_path, summed_path):
    """Best-so-far against oracle calls, per task and summed per round.

    A task contributes to the summed curve from its first exact result on.
    """
    with open(per_task_path, "w", newline="") as f1:
        w1 = csv.writer(f1)
        w1.writerow(["round", "task", "call", "best_so_far"])
        summed_rows = []
        for r in range(1, rounds + 1):
            totals: dict[int, float] = {}
            for traj in store.load_round_trajectories(run_dir, r):
                for call, best in best_so_far_curve(traj):
                    w1.writerow([r, traj.task, call, "" if best is None else repr(best)])
                    if best is not None:
                        totals[call] = totals.get(call, 0.0) + best
            summed_rows += [[r, c, repr(v)] for c, v in sorted(totals.items())]
    with open(summed_path, "w", newline="") as f2:
        w2 = csv.writer(f2)
        w2.writerow(["round", "call", "summed_best_so_far"])
        w2.writerows(summed_rows)


def write_scatter_csv(path, pol: FewShotTable, base: FewShotTable):
    ks = [k for k in pol.ks if k in base.ks]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["task", "k", "policy_best", "baseline_best"])
        for task in sorted(pol.scores):
            if task not in base.scores:
                continue
            for k in ks:
                wr.writerow([task, k, repr(min(pol.scores[task][:k])), repr(min(base.scores[task][:k]))])


# -- argument parsing -------------------------------------------------------------


def _add_inner_flags(p):
    p.add_argument("--config", help="JSON file with inner/outer/remote sections")
    p.add_argument("--budget", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--init-count", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--temperature", type=float, help="default 0.7 for query, 1.0 for sequence; 0 = greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)


def _add_remote_flags(p):
    p.add_argument("--endpoint", help="chat-completion endpoint URL (enables the remote policy)")
    p.add_argument("--model", help="remote model name")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bolt", description="Policy-initialized Bayesian optimization with a policy fine-tuning loop.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-workload", help="write a seeded synthetic workload")
    p.add_argument("--domain", choices=[d.value for d in Domain], required=True)
    p.add_argument("--n-tasks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-val", type=int, help="validation tasks (default: a quarter)")
    p.add_argument("--n-relations", type=int, default=8)
    p.add_argument("--independent", action="store_true", help="draw every query task independently")
    p.add_argument("--out", default="workload.json")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_workload)

    p = sub.add_parser("run-inner", help="initialize-then-BO on selected tasks")
    p.add_argument("--workload", required=True)
    p.add_argument("--policy", help="n-gram policy file (default: fallback initializer)")
    p.add_argument("--tasks", default="validation", help="train | validation | all | comma-separated ids")
    p.add_argument("--out", required=True, help="directory for trajectory files")
    p.add_argument("--force", action="store_true")
    _add_inner_flags(p)
    _add_remote_flags(p)
    p.set_defaults(func=cmd_run_inner)

    p = sub.add_parser("run-outer", help="fine-tune rounds over training tasks (resumable)")
    p.add_argument("--workload", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--policy", help="initial n-gram policy (default: fallback initializer)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--tasks-per-round", type=int)
    p.add_argument("--dataset-mode", choices=[m.value for m in DatasetMode])
    p.add_argument("--no-retrain", action="store_true", help="train only after the last round")
    p.add_argument("--finetuned-model", help="remote backend: model fine-tuned on the exported round")
    p.add_argument("--stop-after", type=int, help="stop once this many rounds are complete")
    _add_inner_flags(p)
    _add_remote_flags(p)
    p.set_defaults(func=cmd_run_outer)

    p = sub.add_parser("self-augment", help="add the policy's own good samples and retrain")
    p.add_argument("--workload", required=True)
    p.add_argument("--run-dir", help="take the final policy and dataset of this run")
    p.add_argument("--policy")
    p.add_argument("--dataset")
    p.add_argument("--tasks", default="train")
    p.add_argument("--samples-per-task", type=int, default=50)
    p.add_argument("--criterion", choices=["reference", "threshold", "none", "all"], default="reference",
                   help="reference: beat the fallback initializer's best; threshold: below --threshold")
    p.add_argument("--threshold", type=float, default=SEQ_THRESHOLD)
    p.add_argument("--budget", type=int, help="oracle calls (default: exactly what the criterion needs)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for the new policy and dataset")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_self_augment)

    p = sub.add_parser("eval-fewshot", help="Best@k table as CSV")
    p.add_argument("--workload", required=True)
    p.add_argument("--policy", help="n-gram policy file (default: fallback initializer)")
    p.add_argument("--run-dir", help="evaluate the final policy of this run")
    p.add_argument("--config")
    p.add_argument("--ks", default="1,2,5,10,20,50")
    p.add_argument("--tasks", default="validation")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--scores", help="also store per-sample scores (JSON) for the report")
    p.add_argument("--force", action="store_true")
    _add_remote_flags(p)
    p.set_defaults(func=cmd_eval_fewshot)

    p = sub.add_parser("export-finetune", help="write a fine-tune dataset as JSONL")
    p.add_argument("--run-dir")
    p.add_argument("--round", type=int)
    p.add_argument("--workload")
    p.add_argument("--trajectories", help="directory of trajectory files")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export_finetune)

    p = sub.add_parser("report", help="CSV views of stored runs and few-shot scores")
    p.add_argument("--run-dir")
    p.add_argument("--fewshot", help="few-shot scores of the policy")
    p.add_argument("--baseline", help="few-shot scores of the baseline")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def _category(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, BudgetExhausted):
        return "budget_exhausted", EXIT_BUDGET
    if isinstance(exc, AwaitingFinetune):
        return "awaiting_finetune", EXIT_RUNTIME
    if isinstance(exc, AuthMissing):
        return "auth_missing", EXIT_CONFIG
    if isinstance(exc, store.ConfigMismatch):
        return "config_mismatch", EXIT_CONFIG
    if isinstance(exc, (store.CorruptFile, store.SchemaVersionMismatch)):
        return "corrupt_file", EXIT_RUNTIME
    if isinstance(exc, store.RunLocked):
        return "run_locked", EXIT_RUNTIME
    if isinstance(exc, RemoteError):
        return "remote_error", EXIT_RUNTIME
    if isinstance(exc, FileNotFoundError):
        return "missing_input", EXIT_CONFIG
    if isinstance(exc, (ConfigError, InsufficientTasks, ValueError)):
        return "config_error", EXIT_CONFIG
    return "runtime_error", EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parseable line, no traceback
        category, code = _category(exc)
        msg = " ".join(str(exc).split())
        print(f"error: {category}: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return code


if __name__ == "__main__":
    sys.exit(main())
