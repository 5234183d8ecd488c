import math

import numpy as np
import pytest

from safe_ars.ars import (ArsConfig, DirectionResult, TrainHistory, decay, evaluate_direction,
                          sample_directions, select_top, train, update_weights)
from safe_ars.errors import ContractError, NumericError, TrainingError
from safe_ars.gridsim import GridEnv, GridModel, Task
from safe_ars.policy import RunningStats, init_params, load_checkpoint
from safe_ars.sanity import QuadraticEnv


def d(i, rp, rm, delta):
    return DirectionResult(i, np.asarray(delta, float), rp, rm)


def test_sample_directions_reproducible():
    a = sample_directions(3, 2, np.random.SeedSequence(7))
    b = sample_directions(3, 2, np.random.SeedSequence(7))
    c = sample_directions(3, 2, np.random.SeedSequence(8))
    assert len(a) == 3 and all(x.shape == (2,) for x in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    with pytest.raises(ContractError):
        sample_directions(0, 2, 0)


def test_sample_directions_standard_normal():
    x = np.array(sample_directions(100_000, 3, np.random.default_rng(11)))
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    assert np.all((0.98 < x.var(axis=0)) & (x.var(axis=0) < 1.02))


def test_select_top_example():
    res = [d(0, 1, 5, [0]), d(1, 2, 0, [0]), d(2, 0, 0, [0])]
    chosen, sigma = select_top(res, 2)
    assert [c.index for c in chosen] == [0, 1]
    assert sigma == pytest.approx(math.sqrt(3.5), abs=1e-12)


def test_select_top_ties_and_floor():
    res = [d(i, 1.0, 1.0, [0]) for i in (3, 1, 2)]
    chosen, sigma = select_top(res, 2)
    assert [c.index for c in chosen] == [1, 2] and sigma == 1.0
    full, _ = select_top([d(0, 0, 1, [0]), d(1, 3, 0, [0])], 2)
    assert [c.index for c in full] == [1, 0]
    with pytest.raises(TrainingError):
        select_top([], 1)
    with pytest.raises(ContractError):
        select_top(res, 4)


def test_selection_dominance():
    rng = np.random.default_rng(0)
    res = [d(i, *rng.normal(size=2), [0]) for i in range(20)]
    chosen, sigma = select_top(res, 7)
    rest = [r for r in res if r not in chosen]
    assert min(c.score for c in chosen) >= max(r.score for r in rest)
    assert sigma >= 1e-8


def test_update_hand_example():
    sel = [d(0, 2, 0, [1, 0]), d(1, 1, 1, [0, 1])]
    sigma = float(np.std([2, 0, 1, 1]))
    theta = np.array([0.5, -0.5])
    new = update_weights(theta, sel, 0.1, 2, sigma)
    assert new - theta == pytest.approx([0.1 / (2 * math.sqrt(0.5)) * 2, 0.0], abs=1e-9)
    assert new[0] - theta[0] == pytest.approx(0.141421, abs=1e-6)


def test_update_second_example_from_selection():
    # select from (1,5),(2,0),(0,0) then step: (1-5)*e1 + (2-0)*e2 over b*sigma
    res = [d(0, 1, 5, [1, 0, 0]), d(1, 2, 0, [0, 1, 0]), d(2, 0, 0, [0, 0, 1])]
    chosen, sigma = select_top(res, 2)
    new = update_weights(np.zeros(3), chosen, 0.2, 2, sigma)
    scale = 0.2 / (2 * math.sqrt(3.5))
    assert new == pytest.approx([-4 * scale, 2 * scale, 0.0], abs=1e-9)


def test_update_properties():
    sel = [d(0, 1.5, 1.5, [1, 2]), d(1, -1, -1, [3, 4])]
    assert np.array_equal(update_weights(np.ones(2), sel, 0.1, 2, 1.0), np.ones(2))
    sel = [d(0, 3.0, 1.0, [0.3, -1.2]), d(1, 0.5, 2.0, [2.0, 0.1])]
    s1 = update_weights(np.zeros(2), sel, 0.1, 2, 0.7)
    s2 = update_weights(np.zeros(2), sel, 0.2, 2, 0.7)
    assert np.array_equal(s2, 2 * s1)
    # only one informative direction: move along its +delta
    sel = [d(0, 0.0, 0.0, [1, 1]), d(1, 2.0, 1.0, [0, 1])]
    step = update_weights(np.zeros(2), sel, 0.1, 2, 1.0)
    assert step[0] == 0 and step[1] > 0
    with pytest.raises(NumericError):
        update_weights(np.zeros(2), [d(0, 1e308, -1e308, [1e10, 0])], 1e10, 1, 1e-300)
    with pytest.raises(ContractError):
        update_weights(np.zeros(2), sel, 0.1, 3, 1.0)


def test_decay():
    assert decay(0.1, 0.05, 0.99) == pytest.approx((0.099, 0.0495), rel=1e-15)
    assert decay(0.1, 0.05, 1.0) == (0.1, 0.05)
    a, n = 0.3, 0.2
    for _ in range(50):
        a, n = decay(a, n, 0.97)
    assert a == pytest.approx(0.3 * 0.97 ** 50, rel=1e-12)
    with pytest.raises(ContractError):
        decay(0.1, 0.1, 0.0)


@pytest.mark.parametrize("kw", [dict(top_b=20), dict(num_directions=0), dict(alpha=0.0),
                                dict(epsilon=1.5), dict(rollouts_per_direction=0), dict(eval_every=0)])
def test_config_invariants(kw):
    with pytest.raises(ContractError):
        ArsConfig(**kw)


@pytest.fixture(scope="module")
def grid_env():
    return GridEnv(GridModel.default())


def test_evaluate_direction_examples(grid_env):
    p = init_params("lstm", 7, 3, 4, np.random.default_rng(0), 0.1)
    delta = np.random.default_rng(1).standard_normal(p.n_theta)
    stats = RunningStats.empty(7)
    tasks = [Task(4, 0.15), Task(15, 0.0), Task(21, 0.28)]
    r0 = evaluate_direction(p, delta, 0.0, tasks, stats, grid_env)
    assert r0.r_plus == r0.r_minus
    r = evaluate_direction(p, delta, 0.05, tasks, stats, grid_env)
    r_rev = evaluate_direction(p, delta, 0.05, tasks[::-1], stats, grid_env)
    assert r.r_plus == pytest.approx(r_rev.r_plus, abs=1e-12)
    assert r.r_minus == pytest.approx(r_rev.r_minus, abs=1e-12)
    single = evaluate_direction(p, delta, 0.05, tasks[:1], stats, grid_env)
    from safe_ars.parallel import rollout
    from safe_ars.policy import perturb
    assert single.r_plus == rollout(grid_env, tasks[0], perturb(p, delta, 0.05, 1), stats).episode_return


def test_train_zero_iterations_returns_init(grid_env):
    p0 = init_params("lstm", 7, 3, 4, np.random.default_rng(0), 0.1)
    p, s, h = train(ArsConfig(iterations=0), grid_env, [Task(4, 0.0)], params=p0)
    assert np.array_equal(p.theta, p0.theta) and len(h) == 0 and s.count == 0


def test_train_writes_artifacts(tmp_path, grid_env):
    cfg = ArsConfig(iterations=3, num_directions=2, top_b=1, eval_every=2, seed=3)
    p, s, h = train(cfg, grid_env, [Task(4, 0.15), Task(15, 0.0)], "lstm", 4, checkpoint_dir=tmp_path)
    assert [r.iteration for r in h.records] == [1, 3]
    assert s.count > 0
    for name in ("latest.ckpt", "best.ckpt", "history.csv", "timing.csv"):
        assert (tmp_path / name).exists()
    q, _ = load_checkpoint(tmp_path / "latest.ckpt")
    assert np.array_equal(q.theta, p.theta)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "iteration,greedy_return,violations,alpha,nu" and len(lines) == 3


def test_train_task_subsampling_is_seeded(grid_env):
    tasks = [Task(4, 0.15), Task(15, 0.0), Task(21, 0.28), Task(4, 0.0)]
    cfg = ArsConfig(iterations=2, num_directions=2, top_b=1, rollouts_per_direction=2, seed=5)
    a = train(cfg, grid_env, tasks, "linear")[0]
    b = train(cfg, grid_env, tasks, "linear")[0]
    assert np.array_equal(a.theta, b.theta)
    with pytest.raises(ContractError):
        train(ArsConfig(rollouts_per_direction=9, iterations=1), grid_env, tasks[:2])


class _Boom(QuadraticEnv):
    def step_batch(self, state, actions):
        raise FloatingPointError("diverged")


def test_all_directions_failing_aborts_and_flushes(tmp_path):
    env = _Boom(xs=[[1.0]], target=[0.0])
    with pytest.raises(TrainingError):
        train(ArsConfig(iterations=2, num_directions=2, top_b=1), env, env.tasks, "linear",
              bounds=None, checkpoint_dir=tmp_path)
    assert (tmp_path / "latest.ckpt").exists()


def test_quadratic_sanity_converges():
    env = QuadraticEnv(xs=[[1.0, -0.5, 2.0]], target=[0.3, -0.7])
    cfg = ArsConfig(alpha=0.02, nu=0.05, num_directions=8, top_b=4, iterations=300, epsilon=0.995,
                    seed=1, eval_every=50, normalize_observations=False, init_scale=0.0)
    _, _, h = train(cfg, env, env.tasks, "linear", bounds=None)
    assert h.records[-1].greedy_return > env.optimal_return() - 1e-2


def test_history_csv_timing_column(tmp_path):
    from safe_ars.ars import HistoryRecord
    h = TrainHistory([HistoryRecord(1, -1.5, 0, 0.02, 0.03, 1.234)])
    h.to_csv(tmp_path / "a.csv", timing=True)
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "1,-1.5,0,0.02,0.03,1.234"
