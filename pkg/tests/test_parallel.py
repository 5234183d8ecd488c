import numpy as np
import pytest

from safe_ars.gridsim import GridEnv, GridModel, Task, check_violation, step_infos
from safe_ars.parallel import JobPool, RolloutContext, RolloutJob, rollout, run_jobs
from safe_ars.policy import RunningStats, init_params, perturb
from safe_ars.sanity import QuadraticEnv

TASKS = [Task(4, 0.15), Task(15, 0.0), Task(21, 0.28)]


@pytest.fixture(scope="module")
def env():
    return GridEnv(GridModel.default())


@pytest.fixture(scope="module")
def params():
    return init_params("lstm", 7, 3, 6, np.random.default_rng(9), 0.3)


def iteration_jobs(env, params, n_dirs=3):
    ctx = RolloutContext(env=env)
    stats = RunningStats.empty(7)
    jobs = []
    for i in range(n_dirs):
        delta = np.random.default_rng(i).standard_normal(params.n_theta)
        for sign in (1, -1):
            p = perturb(params, delta, 0.05, sign)
            jobs += [RolloutJob(0, i, sign, j, t, p, stats, ctx) for j, t in enumerate(TASKS)]
    return jobs


def test_no_fault_rollout_is_clean(env, params):
    res = rollout(env, Task(4, 0.0), params, RunningStats.empty(7), retain=True)
    assert res.violation_steps == 0 and not res.failed
    assert check_violation(step_infos(res.trajectory)).ok


def test_horizon_zero(env, params):
    res = rollout(env, Task(4, 0.15), params, None, max_steps=0, retain=True)
    assert res.episode_return == 0.0 and res.steps == 0


def test_same_job_twice_identical(env, params):
    a = rollout(env, Task(21, 0.28), params, RunningStats.empty(7), retain=True)
    b = rollout(env, Task(21, 0.28), params, RunningStats.empty(7), retain=True)
    assert a.episode_return == b.episode_return
    assert all(np.array_equal(a.trajectory[k], b.trajectory[k], equal_nan=True) for k in a.trajectory)


def test_result_count_and_order(env, params):
    jobs = iteration_jobs(env, params)
    shuffled = [jobs[i] for i in np.random.default_rng(0).permutation(len(jobs))]
    res = run_jobs(shuffled, 1)
    assert len(res) == 2 * 3 * len(TASKS)
    assert [r.job_id for r in res] == sorted(j.id for j in jobs)
    assert run_jobs([], 1) == []


def test_worker_count_invariance(env, params):
    jobs = iteration_jobs(env, params)
    one = run_jobs(jobs, 1)
    many = run_jobs(jobs, 8)
    assert [r.job_id for r in one] == [r.job_id for r in many]
    assert [r.episode_return for r in one] == [r.episode_return for r in many]
    assert all(np.array_equal(a.obs_stats.m2, b.obs_stats.m2) for a, b in zip(one, many))


def test_duplicate_ids_rejected(env, params):
    jobs = iteration_jobs(env, params, 1)
    with pytest.raises(ValueError):
        run_jobs(jobs + jobs[:1], 1)
    with pytest.raises(ValueError):
        JobPool(0)


class FlakyEnv(QuadraticEnv):
    """Fails whenever a batch contains the poisoned observation value."""

    def step_batch(self, state, actions):
        if np.any(state[:, 0] == 13.0):
            raise FloatingPointError("simulated divergence")
        return super().step_batch(state, actions)


def test_failures_are_isolated():
    env = FlakyEnv(xs=[[1.0], [13.0], [2.0]], target=[0.0])
    p = init_params("linear", 1, 1)
    ctx = RolloutContext(env=env, bounds=None)
    jobs = [RolloutJob(0, 0, 1, j, j, p, None, ctx) for j in range(3)]
    for workers in (1, 2):
        res = run_jobs(jobs, workers)
        assert [r.failed for r in res] == [False, True, False]
        assert "FloatingPointError" in res[1].error


def test_obs_stats_cover_visited_states(env, params):
    res = rollout(env, Task(4, 0.15), params, None, retain=True)
    assert res.obs_stats.count == res.steps
    obs = np.hstack([res.trajectory["voltages"], res.trajectory["load_fractions"]])
    assert np.allclose(res.obs_stats.mean, obs.mean(axis=0), rtol=1e-12)
