"""Step reward for emergency load shedding, with an optional voltage barrier.

The base reward penalises voltage shortfall against the recovery envelope,
shed load and invalid shed commands, and pays a one-off terminal penalty when
voltages are still low four seconds after clearance. The safe variant
subtracts a weighted inverse-square barrier on the distance to the envelope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envelope import DEFAULT_ENVELOPE, TIME_TOL, SafetyEnvelope
from .errors import ContractError

TERMINAL_DELAY = 4.0
TERMINAL_VOLTAGE = 0.95


@dataclass(frozen=True)
class RewardWeights:
    c1: float = 1.0
    c2: float = 5.0
    c3: float = 1.0
    c4: float = 2.5e-5
    terminal_penalty: float = -1000.0
    barrier_margin: float = 1e-3

    def __post_init__(self):
        for name in ("c1", "c2", "c3", "c4"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ContractError(f"reward weight {name} must be finite and >= 0, got {v}")
        if not self.barrier_margin > 0.0:
            raise ContractError("barrier_margin must be positive")

    @property
    def barrier_cap(self) -> float:
        return self.barrier_margin ** -2

    @property
    def safe(self) -> bool:
        return self.c4 > 0.0


@dataclass(frozen=True)
class RewardBreakdown:
    delta_v_term: float
    shed_term: float
    invalid_term: float
    barrier_term: float
    terminal_term: float
    base: float
    total: float
    barrier_capped: bool = False
    terminal: bool = False


def _post_clearance(t: float, t_clear: float) -> bool:
    return t > t_clear + TIME_TOL


def delta_v(v: float, t: float, t_clear: float, envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> float:
    """Shortfall ``min(v - threshold, 0)`` against the envelope at time ``t``."""
    if not _post_clearance(t, t_clear):
        raise ContractError(f"delta_v defined only after clearance (t={t}, t_clear={t_clear})")
    return min(v - envelope.threshold_at_offset(t - t_clear), 0.0)


def terminal_condition(voltages: Sequence[float], t: float, t_clear: float) -> bool:
    """True when any voltage is below 0.95 p.u. more than 4 s after clearance."""
    if t <= t_clear + TERMINAL_DELAY + TIME_TOL:
        return False
    return min(voltages) < TERMINAL_VOLTAGE


def barrier_terms(voltages, t, t_clear, weights: RewardWeights,
                  envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> tuple[float, bool]:
    """Barrier value and whether any per-bus term hit the cap."""
    if not _post_clearance(t, t_clear):
        return 0.0, False
    theta = envelope.threshold_at_offset(t - t_clear)
    margin = weights.barrier_margin
    cap = weights.barrier_cap
    total = 0.0
    capped = False
    for v in voltages:
        gap = v - theta
        if gap <= margin:
            total += cap
            capped = True
        else:
            total += 1.0 / (gap * gap)
    return total, capped


def barrier(voltages, t, t_clear, weights: RewardWeights,
            envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> float:
    return barrier_terms(voltages, t, t_clear, weights, envelope)[0]


def _base_parts(info, weights, envelope):
    if not _post_clearance(info.t, info.t_clear):
        return 0.0, 0.0, 0.0, 0.0, 0.0, False
    if terminal_condition(info.voltages, info.t, info.t_clear):
        return weights.terminal_penalty, 0.0, 0.0, 0.0, weights.terminal_penalty, True
    theta = envelope.threshold_at_offset(info.t - info.t_clear)
    dv = sum(min(v - theta, 0.0) for v in info.voltages)
    shed = float(sum(info.shed_amounts))
    inv = float(info.invalid_action_count)
    r = weights.c1 * dv - weights.c2 * shed - weights.c3 * inv
    return r, dv, shed, inv, 0.0, False


def base_reward(info, weights: RewardWeights, envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> float:
    """Standard (non-barrier) step reward for a :class:`~safe_ars.gridsim.StepInfo`.

    Zero before clearance. More than 4 s after clearance any voltage below
    0.95 p.u. yields ``terminal_penalty`` in place of the shaped terms.
    """
    return _base_parts(info, weights, envelope)[0]


def combined_reward(info, weights: RewardWeights,
                    envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> RewardBreakdown:
    r, dv, shed, inv, term, is_terminal = _base_parts(info, weights, envelope)
    b, capped = barrier_terms(info.voltages, info.t, info.t_clear, weights, envelope)
    if weights.c4 == 0.0:
        total = r
    else:
        total = r - weights.c4 * b
    return RewardBreakdown(
        delta_v_term=dv,
        shed_term=shed,
        invalid_term=inv,
        barrier_term=b,
        terminal_term=term,
        base=r,
        total=total,
        barrier_capped=capped,
        terminal=is_terminal,
    )


@dataclass(frozen=True, eq=False)
class BatchReward:
    """Per-row reward components for a batch of episodes advanced in lockstep."""

    base: np.ndarray
    barrier: np.ndarray
    total: np.ndarray
    threshold: np.ndarray
    capped: np.ndarray
    terminal: np.ndarray


def thresholds_batch(t: float, t_clear: np.ndarray,
                     envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> np.ndarray:
    """Envelope threshold per row, NaN where the fault has not cleared yet."""
    offset = t - t_clear
    idx = np.searchsorted(envelope.offset_array, offset + TIME_TOL, side="right") - 1
    theta = envelope.level_array[np.maximum(idx, 0)]
    return np.where(offset > TIME_TOL, theta, np.nan)


def combined_reward_batch(voltages: np.ndarray, t: float, t_clear: np.ndarray, shed: np.ndarray,
                          invalid: np.ndarray, weights: RewardWeights,
                          envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> BatchReward:
    """Vectorised :func:`combined_reward` over rows sharing the clock ``t``."""
    theta = thresholds_batch(t, t_clear, envelope)
    post = ~np.isnan(theta)
    th = np.where(post, theta, 0.0)[:, None]
    terminal = post & (t > t_clear + TERMINAL_DELAY + TIME_TOL) & (voltages.min(axis=1) < TERMINAL_VOLTAGE)

    dv = np.minimum(voltages - th, 0.0).sum(axis=1)
    shaped = weights.c1 * dv - weights.c2 * shed.sum(axis=1) - weights.c3 * invalid
    base = np.where(terminal, weights.terminal_penalty, np.where(post, shaped, 0.0))

    gap = voltages - th
    near = gap <= weights.barrier_margin
    safe_gap = np.where(near, 1.0, gap)
    per_bus = np.where(near, weights.barrier_cap, 1.0 / (safe_gap * safe_gap))
    b = np.where(post, per_bus.sum(axis=1), 0.0)
    capped = post & near.any(axis=1)
    total = base if weights.c4 == 0.0 else base - weights.c4 * b
    return BatchReward(base=base, barrier=b, total=total, threshold=theta,
                       capped=capped, terminal=terminal)
