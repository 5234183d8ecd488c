"""One-step quadratic environment with a known optimum, for optimizer checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class QuadraticEnv:
    """Observation ``x`` (fixed per task), reward ``-||a - c||^2``, one step.

    Tasks are indices into ``xs``. The best achievable return is 0 whenever
    the policy can map every ``x`` to ``c``, which an affine policy can.
    """

    xs: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xs", np.atleast_2d(np.asarray(self.xs, dtype=float)))
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    @property
    def obs_dim(self) -> int:
        return self.xs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.target.size

    @property
    def max_steps(self) -> int:
        return 1

    @property
    def tasks(self) -> list[int]:
        return list(range(len(self.xs)))

    def reset_batch(self, tasks, seeds=None):
        obs = self.xs[np.asarray(tasks, dtype=int)]
        return obs, obs.copy()

    def step_batch(self, state, actions):
        err = np.asarray(actions) - self.target
        reward = -np.einsum("ij,ij->i", err, err)
        done = np.ones(len(reward), dtype=bool)
        return state, state.copy(), reward, done, {"reward": reward}

    def optimal_return(self) -> float:
        return 0.0
