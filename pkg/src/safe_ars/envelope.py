"""Time-dependent post-fault voltage recovery envelope."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# Simulation clocks are built from float sums; comparisons against window
# edges absorb this much roundoff.
TIME_TOL = 1e-9


@dataclass(frozen=True)
class SafetyEnvelope:
    """Piecewise-constant minimum voltage as a function of time since clearance.

    ``breakpoints`` holds ``(offset_seconds, min_voltage_pu)`` pairs; the
    threshold of a pair holds on ``[offset, next_offset)``.
    """

    breakpoints: tuple[tuple[float, float], ...] = (
        (0.0, 0.7),
        (0.33, 0.8),
        (0.5, 0.9),
        (1.5, 0.95),
    )

    def __post_init__(self):
        bps = tuple((float(o), float(v)) for o, v in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        if not bps:
            raise ContractError("envelope needs at least one breakpoint")
        if bps[0][0] != 0.0:
            raise ContractError("first envelope offset must be 0.0")
        for (o0, v0), (o1, v1) in zip(bps, bps[1:]):
            if not o1 > o0:
                raise ContractError("envelope offsets must be strictly increasing")
            if not v1 > v0:
                raise ContractError("envelope thresholds must be strictly increasing")
        for _, v in bps:
            if not 0.0 < v < 1.0:
                raise ContractError(f"envelope threshold {v} outside (0, 1)")
        object.__setattr__(self, "_offsets", tuple(o for o, _ in bps))
        object.__setattr__(self, "_levels", tuple(v for _, v in bps))
        object.__setattr__(self, "offset_array", np.array(self._offsets))
        object.__setattr__(self, "level_array", np.array(self._levels))

    @property
    def final_threshold(self) -> float:
        return self._levels[-1]

    def threshold_at_offset(self, offset: float) -> float:
        if offset < -TIME_TOL:
            raise ContractError(f"negative offset {offset} after clearance")
        idx = bisect.bisect_right(self._offsets, offset + TIME_TOL) - 1
        return self._levels[max(idx, 0)]


DEFAULT_ENVELOPE = SafetyEnvelope()


def envelope_threshold(envelope: SafetyEnvelope, t: float, t_clear: float) -> float:
    """Minimum admissible voltage at time ``t`` for a fault cleared at ``t_clear``.

    Undefined while the fault is on, so ``t < t_clear`` raises ContractError.
    """
    if t < t_clear - TIME_TOL:
        raise ContractError(f"threshold undefined during fault (t={t} < t_clear={t_clear})")
    return envelope.threshold_at_offset(t - t_clear)
