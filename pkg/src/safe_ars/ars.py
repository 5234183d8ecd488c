"""Augmented Random Search training loop with optional barrier-shaped reward.

Each iteration samples ``N`` Gaussian directions in weight space, evaluates
``theta +/- nu * delta`` on ``m`` tasks each, keeps the ``b`` directions with
the best ``max(R+, R-)``, and steps along the reward-weighted sum of those
directions scaled by the spread of their returns. Step size and noise decay
geometrically. Whether the objective is the plain or the barrier-augmented
reward is decided entirely by the environment's reward weights.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, TrainingError
from .parallel import JobPool, RolloutContext, RolloutJob, RolloutResult
from .policy import (ActionBounds, PolicyParams, RunningStats, init_params, perturb,
                     save_checkpoint)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "greedy_return", "violations", "alpha", "nu")
TIMING_COLUMNS = ("iteration", "wall_seconds")

# spawn_key prefixes keeping the random streams of different purposes apart
_STREAM_INIT, _STREAM_DIRECTIONS, _STREAM_TASKS, _STREAM_JOBS = 0, 1, 2, 3


@dataclass(frozen=True)
class ArsConfig:
    alpha: float = 0.02
    num_directions: int = 16
    nu: float = 0.03
    top_b: int = 8
    rollouts_per_direction: int | None = None
    epsilon: float = 0.997
    iterations: int = 300
    seed: int = 0
    eval_every: int = 5
    sigma_floor: float = 1e-8
    init_scale: float = 0.01
    normalize_observations: bool = True

    def __post_init__(self):
        if self.num_directions < 1:
            raise ContractError("num_directions must be >= 1")
        if not 1 <= self.top_b <= self.num_directions:
            raise ContractError("top_b must lie in [1, num_directions]")
        if self.rollouts_per_direction is not None and self.rollouts_per_direction < 1:
            raise ContractError("rollouts_per_direction must be >= 1")
        if not (self.alpha > 0 and self.nu > 0):
            raise ContractError("alpha and nu must be positive")
        if not 0 < self.epsilon <= 1:
            raise ContractError("epsilon must lie in (0, 1]")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")
        if not self.sigma_floor > 0:
            raise ContractError("sigma_floor must be positive")


@dataclass
class DirectionResult:
    index: int
    delta: np.ndarray
    r_plus: float
    r_minus: float

    @property
    def score(self) -> float:
        return max(self.r_plus, self.r_minus)


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    greedy_return: float
    violations: int
    alpha: float
    nu: float
    wall_seconds: float


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def greedy_returns(self) -> np.ndarray:
        return np.array([r.greedy_return for r in self.records])

    def to_csv(self, path, timing: bool = False) -> None:
        """Write the history; ``timing=True`` appends the wall-clock column.

        Without timing the file is a pure function of the configuration and
        seed, so reruns are byte-identical.
        """
        cols = HISTORY_COLUMNS + (("wall_seconds",) if timing else ())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [r.iteration, repr(r.greedy_return), r.violations, repr(r.alpha), repr(r.nu)]
                if timing:
                    row.append(f"{r.wall_seconds:.3f}")
                w.writerow(row)

    def timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_COLUMNS)
            for r in self.records:
                w.writerow([r.iteration, f"{r.wall_seconds:.3f}"])


def _seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def sample_directions(n_directions: int, n_theta: int, rng) -> list[np.ndarray]:
    """``n_directions`` i.i.d. standard-normal vectors of length ``n_theta``.

    ``rng`` may be a Generator (one draw of shape ``(N, n_theta)``), a
    SeedSequence (one child stream per direction index) or an int seed.
    """
    if n_directions < 1:
        raise ContractError("need at least one direction")
    if isinstance(rng, np.random.SeedSequence):
        return [np.random.default_rng(child).standard_normal(n_theta)
                for child in rng.spawn(n_directions)]
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return list(gen.standard_normal((n_directions, n_theta)))


def _direction_jobs(params, delta, nu, tasks, stats, ctx, iteration, index, seed):
    jobs = []
    for sign in (1, -1):
        p = perturb(params, delta, nu, sign)
        for j, task in enumerate(tasks):
            stream = int(_seed_sequence(seed, _STREAM_JOBS, iteration, index, sign + 1, j)
                         .generate_state(1)[0])
            jobs.append(RolloutJob(iteration, index, sign, j, task, p, stats, ctx, stream))
    return jobs


def _reduce_direction(index, delta, by_id, iteration, m) -> DirectionResult | None:
    means = []
    for sign in (1, -1):
        rs = [by_id[(iteration, index, sign, j)] for j in range(m)]
        if any(r.failed for r in rs):
            bad = next(r for r in rs if r.failed)
            log.warning("direction %d excluded at iteration %d: %s", index, iteration, bad.error)
            return None
        means.append(math.fsum(r.episode_return for r in rs) / m)
    return DirectionResult(index, delta, means[0], means[1])


def evaluate_direction(params: PolicyParams, delta, nu: float, tasks: Sequence, stats: RunningStats | None,
                       env, bounds: ActionBounds | None = ActionBounds(), pool: JobPool | None = None,
                       iteration: int = 0, index: int = 0, seed: int = 0) -> DirectionResult | None:
    """Mean return of ``theta + nu*delta`` and ``theta - nu*delta`` over ``tasks``.

    Returns None when any of the ``2m`` rollouts failed.
    """
    ctx = RolloutContext(env=env, bounds=bounds)
    jobs = _direction_jobs(params, np.asarray(delta, dtype=float), nu, list(tasks), stats, ctx,
                           iteration, index, seed)
    own = pool is None
    pool = pool or JobPool(1)
    try:
        results = pool.run(jobs)
    finally:
        if own:
            pool.close()
    by_id = {r.job_id: r for r in results}
    return _reduce_direction(index, np.asarray(delta, dtype=float), by_id, iteration, len(tasks))


def select_top(results: Sequence[DirectionResult], b: int,
               sigma_floor: float = 1e-8) -> tuple[list[DirectionResult], float]:
    """Top ``b`` directions by ``max(R+, R-)`` and the std of their ``2b`` returns.

    Ties go to the lower direction index. A spread below ``sigma_floor`` is
    replaced by 1.0.
    """
    if not results:
        raise TrainingError("no direction results to select from")
    if not 1 <= b <= len(results):
        raise ContractError(f"b={b} outside [1, {len(results)}]")
    ranked = sorted(results, key=lambda d: (-d.score, d.index))
    chosen = ranked[:b]
    rewards = np.array([r for d in chosen for r in (d.r_plus, d.r_minus)])
    sigma = float(np.std(rewards))
    if not sigma >= sigma_floor:
        sigma = 1.0
    return chosen, sigma


def update_weights(theta, selected: Sequence[DirectionResult], alpha: float, b: int,
                   sigma_b: float) -> np.ndarray:
    """``theta + alpha / (b * sigma_b) * sum_i (R+_i - R-_i) * delta_i``."""
    if len(selected) != b:
        raise ContractError(f"expected {b} selected directions, got {len(selected)}")
    if not sigma_b > 0:
        raise ContractError("sigma_b must be positive")
    step = np.zeros_like(np.asarray(theta, dtype=float))
    with np.errstate(over="ignore", invalid="ignore"):
        for d in selected:
            step += (d.r_plus - d.r_minus) * d.delta
        new = np.asarray(theta, dtype=float) + (alpha / (b * sigma_b)) * step
    if not np.all(np.isfinite(new)):
        raise NumericError("weight update produced non-finite values")
    return new


def decay(alpha: float, nu: float, epsilon: float) -> tuple[float, float]:
    if not 0 < epsilon <= 1:
        raise ContractError("epsilon must lie in (0, 1]")
    return epsilon * alpha, epsilon * nu


@dataclass
class GreedyEval:
    mean_return: float
    violations: int
    results: list[RolloutResult]


def greedy_evaluate(params: PolicyParams, stats: RunningStats | None, env, tasks: Sequence,
                    bounds: ActionBounds | None = ActionBounds(), pool: JobPool | None = None,
                    iteration: int = 0, retain: bool = False) -> GreedyEval:
    """Unperturbed policy on every task; mean return and total violation steps."""
    ctx = RolloutContext(env=env, bounds=bounds, retain=retain)
    jobs = [RolloutJob(iteration, 0, 0, j, task, params, stats, ctx) for j, task in enumerate(tasks)]
    own = pool is None
    pool = pool or JobPool(1)
    try:
        results = pool.run(jobs)
    finally:
        if own:
            pool.close()
    failed = [r for r in results if r.failed]
    if failed:
        raise TrainingError(f"greedy evaluation failed: {failed[0].error}")
    mean = math.fsum(r.episode_return for r in results) / len(results)
    return GreedyEval(mean, sum(r.violation_steps for r in results), results)


def _better(candidate: HistoryRecord, best: HistoryRecord | None) -> bool:
    if best is None:
        return True
    return (candidate.violations == 0, candidate.greedy_return) > (best.violations == 0, best.greedy_return)


def train(config: ArsConfig, env, tasks: Sequence, arch: str = "lstm", hidden_size: int = 32, *,
          bounds: ActionBounds | None = ActionBounds(), workers: int | None = 1,
          eval_tasks: Sequence | None = None, checkpoint_dir: str | Path | None = None,
          params: PolicyParams | None = None, stats: RunningStats | None = None,
          on_record: Callable[[HistoryRecord], None] | None = None,
          ) -> tuple[PolicyParams, RunningStats, TrainHistory]:
    """Run ``config.iterations`` ARS iterations and return the final policy.

    With ``checkpoint_dir`` set, ``latest.ckpt``, ``best.ckpt`` and
    ``history.csv``/``timing.csv`` are kept up to date after every greedy
    evaluation, and ``latest.ckpt`` is flushed if training aborts.
    """
    tasks = list(tasks)
    if not tasks:
        raise ContractError("training needs at least one task")
    eval_tasks = list(eval_tasks) if eval_tasks is not None else tasks
    m = config.rollouts_per_direction or len(tasks)
    if m > len(tasks):
        raise ContractError(f"rollouts_per_direction={m} exceeds the {len(tasks)} available tasks")
    if params is None:
        rng = np.random.default_rng(_seed_sequence(config.seed, _STREAM_INIT))
        params = init_params(arch, env.obs_dim, env.act_dim,
                             hidden_size if arch == "lstm" else 0, rng, config.init_scale)
    if stats is None:
        stats = RunningStats.empty(env.obs_dim)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = TrainHistory()
    best: HistoryRecord | None = None
    alpha, nu = config.alpha, config.nu
    ctx = RolloutContext(env=env, bounds=bounds)
    t_start = time.perf_counter()

    def flush(final: bool = False):
        if ckpt_dir is None:
            return
        save_checkpoint(ckpt_dir / "latest.ckpt", params, stats)
        history.to_csv(ckpt_dir / "history.csv")
        history.timing_csv(ckpt_dir / "timing.csv")

    with JobPool(workers) as pool:
        try:
            for it in range(config.iterations):
                frozen = stats if config.normalize_observations else None
                if m == len(tasks):
                    it_tasks = tasks
                else:
                    pick = np.random.default_rng(_seed_sequence(config.seed, _STREAM_TASKS, it))
                    it_tasks = [tasks[i] for i in sorted(pick.choice(len(tasks), m, replace=False))]
                deltas = sample_directions(config.num_directions, params.n_theta,
                                           _seed_sequence(config.seed, _STREAM_DIRECTIONS, it))
                jobs = []
                for i, delta in enumerate(deltas):
                    jobs.extend(_direction_jobs(params, delta, nu, it_tasks, frozen, ctx, it, i,
                                                config.seed))
                results = pool.run(jobs)
                by_id = {r.job_id: r for r in results}
                directions = [d for i, delta in enumerate(deltas)
                              if (d := _reduce_direction(i, delta, by_id, it, m)) is not None]
                if not directions:
                    raise TrainingError(f"every direction failed at iteration {it}")
                b = min(config.top_b, len(directions))
                chosen, sigma = select_top(directions, b, config.sigma_floor)
                params = params.with_theta(update_weights(params.theta, chosen, alpha, b, sigma))

                if config.normalize_observations:
                    for r in results:
                        if not r.failed:
                            stats = stats.merge(r.obs_stats)

                if it % config.eval_every == 0 or it == config.iterations - 1:
                    g = greedy_evaluate(params, stats if config.normalize_observations else None,
                                        env, eval_tasks, bounds, pool, iteration=it)
                    rec = HistoryRecord(it + 1, g.mean_return, g.violations, alpha, nu,
                                        time.perf_counter() - t_start)
                    history.records.append(rec)
                    log.info("iter %d  greedy %.4f  violations %d  alpha %.4g  nu %.4g",
                             rec.iteration, rec.greedy_return, rec.violations, alpha, nu)
                    if ckpt_dir is not None and _better(rec, best):
                        save_checkpoint(ckpt_dir / "best.ckpt", params, stats)
                    if _better(rec, best):
                        best = rec
                    flush()
                    if on_record is not None:
                        on_record(rec)
                alpha, nu = decay(alpha, nu, config.epsilon)
        except BaseException:
            flush()
            raise
    flush(final=True)
    return params, stats, history
