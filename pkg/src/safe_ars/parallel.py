"""Rollout jobs and their deterministic parallel execution.

A job is one episode: one task under one (possibly perturbed) policy, with
observation statistics frozen for the whole batch. Jobs that share a policy
snapshot and differ only in task form a *group* and are simulated in lockstep
as one vectorised batch. Groups are fixed by job identity, never by worker
count, and results come back sorted by job id, so the output of
:func:`run_jobs` does not depend on scheduling.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .policy import ActionBounds, PolicyParams, RunningStats, policy_forward, squash_action, zero_hidden

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RolloutContext:
    """Settings shared by every job of a batch."""

    env: Any
    bounds: ActionBounds | None = field(default_factory=ActionBounds)
    max_steps: int | None = None
    retain: bool = False


@dataclass(frozen=True, eq=False)
class RolloutJob:
    iteration: int
    direction: int
    sign: int
    task_index: int
    task: Any
    params: PolicyParams
    stats: RunningStats | None
    context: RolloutContext
    stream: int = 0

    @property
    def id(self) -> tuple[int, int, int, int]:
        return (self.iteration, self.direction, self.sign, self.task_index)

    @property
    def group_key(self) -> tuple[int, int, int, int]:
        return (self.iteration, self.direction, self.sign, id(self.params))


@dataclass(eq=False)
class RolloutResult:
    job_id: tuple
    episode_return: float = 0.0
    steps: int = 0
    violation_steps: int = 0
    terminated_early: bool = False
    obs_stats: RunningStats | None = None
    trajectory: dict[str, np.ndarray] | None = None
    failed: bool = False
    error: str | None = None


def _rollout_lockstep(jobs: Sequence[RolloutJob]) -> list[RolloutResult]:
    first = jobs[0]
    ctx = first.context
    env = ctx.env
    params = first.params
    stats = first.stats
    n = len(jobs)
    limit = env.max_steps if ctx.max_steps is None else min(ctx.max_steps, env.max_steps)

    state, obs = env.reset_batch([j.task for j in jobs], [j.stream for j in jobs])
    if stats is not None:
        mean, std = stats.mean, stats.std
    hidden = zero_hidden(params, n)
    blocks = params.unpack()

    ret = np.zeros(n)
    steps = np.zeros(n, dtype=int)
    viol = np.zeros(n, dtype=int)
    early = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    seen_obs, seen_mask, records = [], [], []
    for k in range(limit):
        if not alive.any():
            break
        x = (obs - mean) / std if stats is not None else obs
        raw, hidden = policy_forward(params, x, hidden, blocks)
        action = squash_action(raw, ctx.bounds) if ctx.bounds is not None else raw
        state, obs, reward, done, rec = env.step_batch(state, action)
        ret += np.where(alive, reward, 0.0)
        steps += alive
        viol += alive & np.asarray(rec.get("violation", False), dtype=bool)
        early |= alive & done & (k + 1 < env.max_steps)
        seen_obs.append(obs)
        seen_mask.append(alive.copy())
        if ctx.retain:
            records.append(rec)
        alive &= ~done

    if not np.all(np.isfinite(ret)):
        raise FloatingPointError("non-finite episode return")
    results = []
    for r, job in enumerate(jobs):
        if seen_obs:
            rows = np.stack([o[r] for o, m in zip(seen_obs, seen_mask) if m[r]])
            ostats = RunningStats.from_batch(rows)
        else:
            ostats = RunningStats.empty(env.obs_dim)
        traj = None
        if ctx.retain:
            traj = {key: np.stack([np.asarray(rec[key])[r] for rec in records[:steps[r]]])
                    if steps[r] else np.empty((0,)) for key in (records[0] if records else {})}
        results.append(RolloutResult(
            job_id=job.id,
            episode_return=float(ret[r]),
            steps=int(steps[r]),
            violation_steps=int(viol[r]),
            terminated_early=bool(early[r]),
            obs_stats=ostats,
            trajectory=traj,
        ))
    return results


def _failed(job: RolloutJob, exc: BaseException) -> RolloutResult:
    return RolloutResult(job_id=job.id, failed=True, error=f"{type(exc).__name__}: {exc}")


def run_group(jobs: Sequence[RolloutJob]) -> list[RolloutResult]:
    """Simulate jobs sharing one policy in lockstep; isolate failures per job."""
    try:
        return _rollout_lockstep(jobs)
    except Exception as exc:  # noqa: BLE001 - any simulator fault becomes a failed result
        if len(jobs) == 1:
            log.warning("rollout %s failed: %s", jobs[0].id, exc)
            return [_failed(jobs[0], exc)]
    out = []
    for job in jobs:
        out.extend(run_group([job]))
    return out


def rollout(env, task, params: PolicyParams, stats: RunningStats | None,
            bounds: ActionBounds | None = ActionBounds(), max_steps: int | None = None,
            retain: bool = False, seed: int = 0) -> RolloutResult:
    """Run one episode: normalise with frozen stats, act, step, accumulate reward."""
    ctx = RolloutContext(env=env, bounds=bounds, max_steps=max_steps, retain=retain)
    job = RolloutJob(0, 0, 0, 0, task, params, stats, ctx, seed)
    return run_group([job])[0]


def group_jobs(jobs: Sequence[RolloutJob]) -> list[list[RolloutJob]]:
    groups: dict[tuple, list[RolloutJob]] = {}
    for job in jobs:
        groups.setdefault(job.group_key, []).append(job)
    return list(groups.values())


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


class JobPool:
    """Reusable executor for rollout batches.

    ``worker_count == 1`` runs in-process; otherwise groups are dispatched to
    a process pool. Either way results are returned sorted by job id.
    """

    def __init__(self, worker_count: int | None = None):
        self.worker_count = default_workers() if worker_count is None else int(worker_count)
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        self._executor: ProcessPoolExecutor | None = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None

    def run(self, jobs: Sequence[RolloutJob]) -> list[RolloutResult]:
        jobs = list(jobs)
        if not jobs:
            return []
        ids = [j.id for j in jobs]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate job ids in batch")
        groups = group_jobs(jobs)
        results: list[RolloutResult] = []
        if self.worker_count == 1:
            for g in groups:
                results.extend(run_group(g))
        else:
            if self._executor is None:
                self._executor = ProcessPoolExecutor(max_workers=self.worker_count)
            futures = [(g, self._executor.submit(run_group, g)) for g in groups]
            for g, fut in futures:
                try:
                    results.extend(fut.result())
                except Exception as exc:  # noqa: BLE001 - a dead worker must not hang the batch
                    log.warning("worker failed on group %s: %s", g[0].group_key[:3], exc)
                    results.extend(_failed(j, exc) for j in g)
        results.sort(key=lambda r: r.job_id)
        return results


def run_jobs(jobs: Sequence[RolloutJob], worker_count: int | None = None) -> list[RolloutResult]:
    with JobPool(worker_count) as pool:
        return pool.run(jobs)
