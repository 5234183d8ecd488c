"""Command-line harness: ``safe-ars {train,eval,baseline,compare}``.

Exit codes: 0 success, 2 configuration error, 3 checkpoint/load error,
4 runtime failure. Every file a command writes goes under ``--out``.

Trajectory CSV columns (fixed order): ``t``, ``V_bus<b>`` per monitored
bus, ``L_bus<b>`` (remaining load fraction) and ``a_bus<b>`` (commanded
action) per load bus, then ``r`` (base reward), ``B`` (barrier), ``R``
(combined reward) and ``threshold`` (envelope level, ``nan`` while the fault
is on). With the default grid that is
``t,V_bus4,V_bus7,V_bus8,V_bus18,L_bus4,L_bus7,L_bus18,a_bus4,a_bus7,a_bus18,r,B,R,threshold``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .ars import greedy_evaluate, train
from .config import ExperimentConfig, load_config, parse_task
from .errors import CheckpointError, ConfigError, SafeArsError
from .gridsim import GridEnv, GridModel, Task
from .parallel import RolloutResult
from .policy import PolicyParams, RunningStats, load_checkpoint
from .reward import RewardWeights

log = logging.getLogger("safe_ars")

EXIT_OK, EXIT_CONFIG, EXIT_LOAD, EXIT_RUNTIME = 0, 2, 3, 4


def trajectory_columns(model: GridModel) -> list[str]:
    return (["t"] + [f"V_bus{b}" for b in model.monitored_buses]
            + [f"L_bus{b}" for b in model.load_buses]
            + [f"a_bus{b}" for b in model.load_buses]
            + ["r", "B", "R", "threshold"])


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory(path: Path, model: GridModel, traj: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_columns(model))
        for i in range(len(traj["t"])):
            row = [traj["t"][i], *traj["voltages"][i], *traj["load_fractions"][i], *traj["action"][i],
                   traj["r"][i], traj["B"][i], traj["R"][i], traj["threshold"][i]]
            w.writerow([_fmt(x) for x in row])


def task_filename(task: Task) -> str:
    return f"traj_bus{task.fault_bus}_dur{task.fault_duration:g}.csv"


@dataclass(frozen=True)
class TaskRow:
    task: str
    episode_return: float
    shed_pu: float
    violations: int
    recovered: bool


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[TaskRow, ...]

    @property
    def passed(self) -> int:
        return sum(r.recovered for r in self.rows)

    @property
    def total(self) -> int:
        return len(self.rows)

    def to_json(self) -> str:
        return json.dumps({"tasks": [asdict(r) for r in self.rows],
                           "passed": self.passed, "total": self.total}, indent=2)

    def to_text(self) -> str:
        out = [f"{'task':<16}{'return':>14}{'shed_pu':>10}{'violations':>12}  recovered"]
        for r in self.rows:
            out.append(f"{r.task:<16}{r.episode_return:>14.4f}{r.shed_pu:>10.4f}{r.violations:>12d}  "
                       f"{'yes' if r.recovered else 'NO'}")
        out.append(f"passed {self.passed}/{self.total}")
        return "\n".join(out) + "\n"


def _row(task: Task, res: RolloutResult) -> TaskRow:
    shed = float(np.sum(res.trajectory["shed"])) if res.steps else 0.0
    return TaskRow(task.label, res.episode_return, shed, res.violation_steps, res.violation_steps == 0)


def _zero_policy(model: GridModel) -> PolicyParams:
    n = model.n_act * (model.n_obs + 1)
    return PolicyParams("linear", model.n_obs, model.n_act, np.zeros(n))


def evaluate_policy(env: GridEnv, tasks: Sequence[Task], params: PolicyParams,
                    stats: RunningStats | None, workers: int | None = 1,
                    bounds="default") -> list[RolloutResult]:
    from .parallel import JobPool
    kw = {} if bounds == "default" else {"bounds": bounds}
    with JobPool(workers) as pool:
        return greedy_evaluate(params, stats, env, list(tasks), pool=pool, retain=True, **kw).results


def resolve_tasks(spec: Sequence[str] | None, cfg: ExperimentConfig, default: str = "all") -> list[Task]:
    specs = list(spec) if spec else [default]
    tasks: list[Task] = []
    for s in specs:
        key = s.strip().lower()
        if key == "all":
            tasks += cfg.train_tasks() + cfg.held_out_tasks()
        elif key == "train":
            tasks += cfg.train_tasks()
        elif key in ("held_out", "heldout", "held-out"):
            tasks += cfg.held_out_tasks()
        else:
            tasks.append(parse_task(s, cfg.tasks.fault_start))
    model = cfg.model()
    for t in tasks:
        if t.fault_bus not in model.fault_buses:
            raise ConfigError(f"fault bus {t.fault_bus} not among grid fault_buses {model.fault_buses}")
    return list(dict.fromkeys(tasks))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if args.workers is not None:
        sets.append(f"workers={args.workers}")
    return load_config(args.config, sets)


def run_metadata(cfg: ExperimentConfig) -> dict:
    return {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    (out / "run.yaml").write_text(yaml.safe_dump(run_metadata(cfg), sort_keys=False))
    env = GridEnv(cfg.model(), cfg.reward)
    params, stats, history = train(
        cfg.ars_config(), env, cfg.train_tasks(), cfg.policy.arch, cfg.policy.hidden_size,
        workers=cfg.workers, checkpoint_dir=out)
    last = history.records[-1] if history.records else None
    if last is not None:
        print(f"trained {cfg.ars.iterations} iterations: greedy return {last.greedy_return:.4f}, "
              f"violations {last.violations}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    params, stats = load_checkpoint(args.checkpoint)
    tasks = resolve_tasks(args.tasks, cfg)
    out = _out_dir(args, cfg)
    env = GridEnv(cfg.model(), cfg.reward)
    results = evaluate_policy(env, tasks, params, stats, cfg.workers)
    for task, res in zip(tasks, results):
        write_trajectory(out / task_filename(task), env.model, res.trajectory)
    report = EvalReport(tuple(_row(t, r) for t, r in zip(tasks, results)))
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    tasks = resolve_tasks(args.tasks, cfg, default="bus=4,dur=0.15")
    out = _out_dir(args, cfg)
    env = GridEnv(cfg.model(), cfg.reward)
    results = evaluate_policy(env, tasks, _zero_policy(env.model), None, cfg.workers, bounds=None)
    for task, res in zip(tasks, results):
        write_trajectory(out / task_filename(task), env.model, res.trajectory)
    report = EvalReport(tuple(_row(t, r) for t, r in zip(tasks, results)))
    (out / "baseline.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


COMPARE_COLUMNS = ("task", "violations_safe", "violations_standard", "return_safe", "return_standard",
                   "shed_safe", "shed_standard", "violates", "winner")


def compare_rows(tasks: Sequence[Task], safe: Sequence[RolloutResult],
                 standard: Sequence[RolloutResult]) -> list[dict]:
    """One row per task; ``winner`` is the policy with fewer violation steps,
    then higher return, else ``tie``."""
    rows = []
    for task, a, b in zip(tasks, safe, standard):
        ra, rb = _row(task, a), _row(task, b)
        violates = {(False, False): "none", (True, False): "safe",
                    (False, True): "standard", (True, True): "both"}[(ra.violations > 0, rb.violations > 0)]
        ka, kb = (-ra.violations, ra.episode_return), (-rb.violations, rb.episode_return)
        winner = "safe" if ka > kb else "standard" if kb > ka else "tie"
        rows.append({"task": task.label, "violations_safe": ra.violations, "violations_standard": rb.violations,
                     "return_safe": ra.episode_return, "return_standard": rb.episode_return,
                     "shed_safe": ra.shed_pu, "shed_standard": rb.shed_pu,
                     "violates": violates, "winner": winner})
    return rows


def format_compare(rows: Sequence[dict]) -> str:
    out = [f"{'task':<16}{'viol_safe':>10}{'viol_std':>10}{'ret_safe':>12}{'ret_std':>12}"
           f"{'shed_safe':>11}{'shed_std':>11}  {'violates':<9}winner"]
    for r in rows:
        out.append(f"{r['task']:<16}{r['violations_safe']:>10d}{r['violations_standard']:>10d}"
                   f"{r['return_safe']:>12.3f}{r['return_standard']:>12.3f}"
                   f"{r['shed_safe']:>11.4f}{r['shed_standard']:>11.4f}  {r['violates']:<9}{r['winner']}")
    return "\n".join(out) + "\n"


def cmd_compare(args) -> int:
    cfg = _config(args)
    safe = load_checkpoint(args.safe)
    standard = load_checkpoint(args.standard)
    tasks = resolve_tasks(args.tasks, cfg, default="train")
    out = _out_dir(args, cfg)
    # both policies are scored on the plain objective so returns are comparable
    env = GridEnv(cfg.model(), replace(cfg.reward, c4=0.0))
    rows = compare_rows(tasks, evaluate_policy(env, tasks, *safe, cfg.workers),
                        evaluate_policy(env, tasks, *standard, cfg.workers))
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = format_compare(rows)
    (out / "compare.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults built in)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="rollout worker processes")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. ars.iterations=50 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safe-ars", description="Barrier-shaped ARS for load shedding")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--tasks", nargs="+", help="'all', 'train', 'held_out' or bus=N,dur=S (default all)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", parents=[common], help="zero-action rollouts")
    b.add_argument("--tasks", nargs="+", help="task specs (default bus=4,dur=0.15)")
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", parents=[common], help="safe vs standard checkpoints")
    c.add_argument("safe")
    c.add_argument("standard")
    c.add_argument("--tasks", nargs="+", help="task specs (default train)")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except (SafeArsError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted; latest checkpoint flushed", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
