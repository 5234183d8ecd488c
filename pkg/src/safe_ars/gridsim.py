"""Surrogate power-grid environment with fault-induced delayed voltage recovery.

A handful of monitored buses carry a voltage magnitude and a stalled-motor
"drag" state. During a short-circuit the voltages sit at a fault-dependent dip
and drag accumulates wherever the voltage is below the stall threshold. After
clearance each voltage relaxes toward nominal, is pulled down by drag times the
load still connected at that bus, and is coupled to its neighbours. Drag only
decays once a bus climbs above the recovery threshold, so a long enough fault
leaves the grid stuck at depressed voltage unless load is shed.

Bus numbering and the topology used for default coupling and dip depths follow
the IEEE 39-bus test system.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from .envelope import DEFAULT_ENVELOPE, TIME_TOL, SafetyEnvelope, envelope_threshold
from .errors import ConfigError, ContractError, NumericError
from .reward import (TERMINAL_DELAY, TERMINAL_VOLTAGE, RewardWeights, combined_reward_batch,
                     thresholds_batch)

IEEE39_BRANCHES = (
    (1, 2), (1, 39), (2, 3), (2, 25), (2, 30), (3, 4), (3, 18), (4, 5), (4, 14),
    (5, 6), (5, 8), (6, 7), (6, 11), (6, 31), (7, 8), (8, 9), (9, 39), (10, 11),
    (10, 13), (10, 32), (11, 12), (12, 13), (13, 14), (14, 15), (15, 16), (16, 17),
    (16, 19), (16, 21), (16, 24), (17, 18), (17, 27), (19, 20), (19, 33), (20, 34),
    (21, 22), (22, 23), (22, 35), (23, 24), (23, 36), (25, 26), (25, 37), (26, 27),
    (26, 28), (26, 29), (28, 29), (29, 38),
)

# Base-case active demand at the shed-capable buses, MW on a 100 MVA base.
IEEE39_LOAD_PU = {4: 5.00, 7: 2.338, 18: 1.58}


def hop_distances(buses_from: Sequence[int], buses_to: Sequence[int],
                  branches=IEEE39_BRANCHES) -> np.ndarray:
    """Unweighted graph distance (number of branches) between two bus lists."""
    n = max(max(b) for b in branches)
    rows = [a - 1 for a, _ in branches]
    cols = [b - 1 for _, b in branches]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    dist = shortest_path(adj, directed=False, unweighted=True)
    return dist[np.ix_([b - 1 for b in buses_from], [b - 1 for b in buses_to])]


@dataclass(frozen=True)
class Task:
    """One fault scenario: a short-circuit at ``fault_bus`` from ``fault_start``."""

    fault_bus: int
    fault_duration: float = 0.0
    fault_start: float = 1.0

    def __post_init__(self):
        if not self.fault_duration >= 0.0:
            raise ContractError(f"fault_duration must be >= 0, got {self.fault_duration}")
        if not self.fault_start > 0.0:
            raise ContractError(f"fault_start must be > 0, got {self.fault_start}")

    @property
    def t_clear(self) -> float:
        return self.fault_start + self.fault_duration

    @property
    def label(self) -> str:
        return f"bus={self.fault_bus},dur={self.fault_duration:g}"


@dataclass(frozen=True, eq=False)
class GridModel:
    """Immutable surrogate-grid parameters; safe to share between rollouts.

    Rates are per second, voltages in p.u. ``dip_depth[f, i]`` is the voltage
    drop at monitored bus ``i`` while a fault sits on ``fault_buses[f]``.
    """

    coupling: np.ndarray
    dip_depth: np.ndarray
    load_buses: tuple[int, ...] = (4, 7, 18)
    monitored_buses: tuple[int, ...] = (4, 7, 8, 18)
    fault_buses: tuple[int, ...] = (4, 7, 15, 21)
    load_pu: tuple[float, ...] = (5.00, 2.338, 1.58)
    recovery_rate: float = 50.0
    drag_gain: float = 12.5
    stall_rate: float = 8.0
    drag_decay: float = 10.0
    v_stall: float = 0.75
    v_rec: float = 0.9
    v_nom: float = 1.0
    dt: float = 0.02
    action_interval: float = 0.1
    horizon: float = 10.0
    action_epsilon: float = 1e-3
    action_min: float = -0.2
    action_max: float = 0.0
    arm_at_clearance: bool = True
    envelope: SafetyEnvelope = field(default=DEFAULT_ENVELOPE)

    def __post_init__(self):
        nm, nl, nf = len(self.monitored_buses), len(self.load_buses), len(self.fault_buses)
        coupling = np.array(self.coupling, dtype=float)
        dip = np.array(self.dip_depth, dtype=float)
        if coupling.shape != (nm, nm):
            raise ConfigError(f"coupling must be {nm}x{nm}, got {coupling.shape}")
        if not np.allclose(coupling, coupling.T, rtol=0, atol=0) or np.any(np.diag(coupling) != 0):
            raise ConfigError("coupling must be symmetric with zero diagonal")
        if np.any(coupling < 0):
            raise ConfigError("coupling weights must be nonnegative")
        if dip.shape != (nf, nm):
            raise ConfigError(f"dip_depth must be {nf}x{nm}, got {dip.shape}")
        if np.any(dip < 0) or np.any(dip >= 1):
            raise ConfigError("dip_depth entries must lie in [0, 1)")
        if len(self.load_pu) != nl:
            raise ConfigError("load_pu must have one entry per load bus")
        if not set(self.load_buses) <= set(self.monitored_buses):
            raise ConfigError("every load bus must also be monitored")
        if not self.v_stall < self.v_rec <= self.v_nom:
            raise ConfigError("need v_stall < v_rec <= v_nom")
        for name in ("recovery_rate", "drag_gain", "stall_rate", "drag_decay", "dt",
                     "action_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.action_min < self.action_max:
            raise ConfigError("action_min must be below action_max")
        ratio = self.action_interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("action_interval must be an integer multiple of dt")
        coupling.setflags(write=False)
        dip.setflags(write=False)
        object.__setattr__(self, "coupling", coupling)
        object.__setattr__(self, "dip_depth", dip)
        load_map = np.array([self.monitored_buses.index(b) for b in self.load_buses])
        load_map.setflags(write=False)
        object.__setattr__(self, "_load_idx", load_map)
        object.__setattr__(self, "_substeps", int(round(ratio)))
        object.__setattr__(self, "_coupling_rowsum", coupling.sum(axis=1))

    @classmethod
    def default(cls, **overrides) -> "GridModel":
        """Calibrated default model; keyword overrides replace scalar parameters.

        Coupling between monitored buses is ``coupling_gain / hops**2`` and the
        fault dip decays with hop distance from the faulted bus,
        ``dip_near * exp(-dip_decay * hops)``.
        """
        coupling_gain = overrides.pop("coupling_gain", 4.0)
        dip_near = overrides.pop("dip_near", 0.7)
        dip_decay = overrides.pop("dip_decay", 0.147)
        monitored = tuple(overrides.get("monitored_buses", cls.monitored_buses))
        faults = tuple(overrides.get("fault_buses", cls.fault_buses))
        loads = tuple(overrides.get("load_buses", cls.load_buses))
        if "coupling" not in overrides:
            hops = hop_distances(monitored, monitored)
            with np.errstate(divide="ignore"):
                c = np.where(hops > 0, coupling_gain / np.maximum(hops, 1) ** 2, 0.0)
            overrides["coupling"] = c
        if "dip_depth" not in overrides:
            overrides["dip_depth"] = dip_near * np.exp(-dip_decay * hop_distances(faults, monitored))
        if "load_pu" not in overrides:
            overrides["load_pu"] = tuple(IEEE39_LOAD_PU.get(b, 1.0) for b in loads)
        return cls(**overrides)

    @property
    def n_obs(self) -> int:
        return len(self.monitored_buses) + len(self.load_buses)

    @property
    def n_act(self) -> int:
        return len(self.load_buses)

    @property
    def substeps(self) -> int:
        return self._substeps

    def validate_task(self, task: Task) -> None:
        if task.fault_bus not in self.fault_buses:
            raise ConfigError(f"bus {task.fault_bus} is not a fault location of this model "
                              f"(allowed: {list(self.fault_buses)})")




@dataclass(frozen=True, eq=False)
class GridState:
    """Single-episode grid state (``s_t``); owned by one rollout at a time."""

    task: Task
    substep: int
    t: float
    voltages: np.ndarray
    load_fractions: np.ndarray
    drag: np.ndarray
    cumulative_shed: np.ndarray


@dataclass(frozen=True, eq=False)
class StepInfo:
    t: float
    t_clear: float
    voltages: np.ndarray
    shed_amounts: np.ndarray
    invalid_action_count: int
    terminated: bool
    violation: bool


@dataclass
class ViolationReport:
    per_bus: dict[int, list[tuple[float, float, float]]]
    total_violation_steps: int
    max_deficit: float

    @property
    def n_violations(self) -> int:
        return sum(len(v) for v in self.per_bus.values())

    @property
    def ok(self) -> bool:
        return self.total_violation_steps == 0


@dataclass(frozen=True, eq=False)
class BatchState:
    """Several independent episodes that share one simulation clock.

    Row ``r`` evolves exactly as a single episode of ``tasks[r]`` would; rows
    never read each other's state.
    """

    tasks: tuple[Task, ...]
    substep: int
    t: float
    voltages: np.ndarray
    load_fractions: np.ndarray
    drag: np.ndarray
    cumulative_shed: np.ndarray
    dip: np.ndarray
    fault_start: np.ndarray
    t_clear: np.ndarray

    def row(self, r: int) -> GridState:
        return GridState(self.tasks[r], self.substep, self.t, self.voltages[r],
                         self.load_fractions[r], self.drag[r], self.cumulative_shed[r])


@dataclass(frozen=True, eq=False)
class BatchStepInfo:
    t: float
    t_clear: np.ndarray
    voltages: np.ndarray
    shed_amounts: np.ndarray
    invalid_action_count: np.ndarray
    terminated: np.ndarray
    violation: np.ndarray
    threshold: np.ndarray

    def row(self, r: int) -> StepInfo:
        return StepInfo(self.t, float(self.t_clear[r]), self.voltages[r], self.shed_amounts[r],
                        int(self.invalid_action_count[r]), bool(self.terminated[r]),
                        bool(self.violation[r]))


def make_task_set(buses: Iterable[int], durations: Iterable[float], model: GridModel | None = None,
                  fault_start: float = 1.0) -> list[Task]:
    """Bus-major Cartesian product of fault locations and durations."""
    buses = list(buses)
    durations = list(durations)
    if not buses or not durations:
        raise ConfigError("task set needs at least one bus and one duration")
    allowed = (model or GridModel.default()).fault_buses
    for b in buses:
        if b not in allowed:
            raise ConfigError(f"unknown fault bus {b} (allowed: {list(allowed)})")
    return [Task(int(b), float(d), fault_start) for b, d in product(buses, durations)]


def _observe(voltages: np.ndarray, loads: np.ndarray) -> np.ndarray:
    return np.concatenate([voltages, loads], axis=-1)


def reset_batch(model: GridModel, tasks: Sequence[Task]) -> tuple[BatchState, np.ndarray]:
    tasks = tuple(tasks)
    for task in tasks:
        model.validate_task(task)
    n, nm, nl = len(tasks), len(model.monitored_buses), len(model.load_buses)
    dip = np.zeros((n, nm))
    for r, task in enumerate(tasks):
        if task.fault_duration > 0:
            dip[r] = model.dip_depth[model.fault_buses.index(task.fault_bus)]
    state = BatchState(
        tasks=tasks,
        substep=0,
        t=0.0,
        voltages=np.full((n, nm), model.v_nom),
        load_fractions=np.ones((n, nl)),
        drag=np.zeros((n, nm)),
        cumulative_shed=np.zeros((n, nl)),
        dip=dip,
        fault_start=np.array([task.fault_start for task in tasks]),
        t_clear=np.array([task.t_clear for task in tasks]),
    )
    return state, _observe(state.voltages, state.load_fractions)


def _check_actions(model: GridModel, a: np.ndarray) -> None:
    # NaN fails both comparisons, so a single pass covers the common case.
    if ((a >= model.action_min - 1e-12) & (a <= model.action_max + 1e-12)).all():
        return
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite action")
    raise ContractError(f"action outside [{model.action_min}, {model.action_max}]: {a}")


def step_batch(model: GridModel, state: BatchState, actions) -> tuple[BatchState, np.ndarray, BatchStepInfo]:
    """Advance every row of ``state`` by one action interval."""
    a = np.asarray(actions, dtype=float)
    n = len(state.tasks)
    if a.shape != (n, model.n_act):
        raise ContractError(f"actions must have shape ({n}, {model.n_act}), got {a.shape}")
    _check_actions(model, a)

    prev = state.load_fractions
    if model.arm_at_clearance:
        armed = (state.t >= state.t_clear - TIME_TOL)[:, None]
    else:
        armed = np.ones((n, 1), dtype=bool)
    cut = armed & (a < -model.action_epsilon) & (prev <= 0.0)
    invalid = cut.sum(axis=1)
    loads = np.where(armed, np.maximum(0.0, prev + a), prev)
    shed = (prev - loads) * np.asarray(model.load_pu)

    v, d = _integrate(model, state, loads)
    k = state.substep + model.substeps
    t = k * model.dt
    if not np.isfinite(v.sum() + d.sum()):
        raise NumericError(f"surrogate dynamics diverged at t={t:.3f}")

    new_state = replace(state, substep=k, t=t, voltages=v, load_fractions=loads, drag=d,
                        cumulative_shed=state.cumulative_shed + shed)
    theta = thresholds_batch(t, state.t_clear, model.envelope)
    violation = (v < np.where(np.isnan(theta), -np.inf, theta)[:, None]).any(axis=1)
    late = t > state.t_clear + TERMINAL_DELAY + TIME_TOL
    terminated = (t >= model.horizon - TIME_TOL) | (late & (v.min(axis=1) < TERMINAL_VOLTAGE))
    info = BatchStepInfo(t=t, t_clear=state.t_clear, voltages=v, shed_amounts=shed,
                         invalid_action_count=invalid, terminated=terminated,
                         violation=violation, threshold=theta)
    return new_state, _observe(v, loads), info


def _integrate(model: GridModel, state: BatchState, loads: np.ndarray):
    """Explicit Euler over the substeps of one action interval."""
    v, d = state.voltages, state.drag
    dt = model.dt
    lmon = np.zeros_like(v)
    lmon[:, model._load_idx] = loads
    drag_pull = model.drag_gain * lmon
    coupling = model.coupling
    kr, ks, kd = model.recovery_rate, model.stall_rate, model.drag_decay
    v_nom, v_stall, v_rec = model.v_nom, model.v_stall, model.v_rec

    times = (state.substep + np.arange(model.substeps)) * dt
    has_fault = state.t_clear > state.fault_start
    on = (has_fault & (state.fault_start - TIME_TOL <= times[:, None])
          & (times[:, None] < state.t_clear - TIME_TOL))
    on_any = on.any(axis=1).tolist()
    if any(on_any):
        v_fault = v_nom - state.dip
        fault_stall = dt * ks * np.maximum(0.0, v_stall - v_fault)
    for s in range(model.substeps):
        # elementwise reduction, not matmul: a row's result must not depend
        # on how many other rows share the batch
        flow = ((v[:, :, None] - v[:, None, :]) * coupling).sum(axis=2)
        dv = kr * (v_nom - v) - drag_pull * d - flow
        dd = ks * np.maximum(0.0, v_stall - v) - kd * np.maximum(0.0, v - v_rec) * d
        v_next = np.maximum(v + dt * dv, 0.0)
        d_next = np.maximum(d + dt * dd, 0.0)
        if on_any[s]:
            mask = on[s][:, None]
            v_next = np.where(mask, v_fault, v_next)
            d_next = np.where(mask, d + fault_stall, d_next)
        v, d = v_next, d_next
    return v, d


def observe(model: GridModel, state: GridState) -> np.ndarray:
    return _observe(state.voltages, state.load_fractions)


def reset(model: GridModel, task: Task, seed: int = 0) -> tuple[GridState, np.ndarray]:
    """Flat start: nominal voltages, full load, no drag.

    The surrogate is deterministic; ``seed`` is accepted so stochastic
    environments can share the interface and does not affect the state.
    """
    batch, obs = reset_batch(model, [task])
    return batch.row(0), obs[0]


def _as_batch(model: GridModel, state: GridState) -> BatchState:
    template, _ = reset_batch(model, [state.task])
    return replace(template, substep=state.substep, t=state.t,
                   voltages=state.voltages[None, :], load_fractions=state.load_fractions[None, :],
                   drag=state.drag[None, :], cumulative_shed=state.cumulative_shed[None, :])


def step(model: GridModel, state: GridState, action) -> tuple[GridState, np.ndarray, StepInfo]:
    """Apply one shed command and integrate over one action interval.

    ``action`` gives, per load bus, the fraction of *initial* load to shed,
    within ``[action_min, action_max]``. With ``arm_at_clearance`` (default)
    commands issued before the fault clears are ignored.
    """
    a = np.asarray(action, dtype=float)
    if a.shape != (model.n_act,):
        raise ContractError(f"action must have shape ({model.n_act},), got {a.shape}")
    batch, obs, info = step_batch(model, _as_batch(model, state), a[None, :])
    return batch.row(0), obs[0], info.row(0)


def check_violation(trajectory: Sequence[StepInfo], envelope: SafetyEnvelope = DEFAULT_ENVELOPE,
                    buses: Sequence[int] | None = None) -> ViolationReport:
    """Every (bus, step) whose voltage is strictly below the envelope after clearance."""
    per_bus: dict[int, list[tuple[float, float, float]]] = {}
    steps = 0
    worst = 0.0
    for info in trajectory:
        if info.t <= info.t_clear + TIME_TOL:
            continue
        thr = envelope_threshold(envelope, info.t, info.t_clear)
        hit = False
        for i, v in enumerate(info.voltages):
            if v < thr:
                bus = buses[i] if buses is not None else i
                per_bus.setdefault(bus, []).append((info.t, float(v), thr))
                worst = max(worst, thr - float(v))
                hit = True
        steps += hit
    return ViolationReport(per_bus=per_bus, total_violation_steps=steps, max_deficit=worst)


def total_deficit(trajectory: Sequence[StepInfo], envelope: SafetyEnvelope = DEFAULT_ENVELOPE) -> float:
    """Sum over post-clearance steps and buses of ``max(0, threshold - V)``."""
    total = 0.0
    for info in trajectory:
        if info.t <= info.t_clear + TIME_TOL:
            continue
        thr = envelope_threshold(envelope, info.t, info.t_clear)
        total += float(np.sum(np.maximum(0.0, thr - np.asarray(info.voltages))))
    return total


def simulate(model: GridModel, task: Task, controller) -> list[StepInfo]:
    """Run one episode under a plain ``obs -> action`` controller."""
    state, obs = reset(model, task)
    traj = []
    while True:
        state, obs, info = step(model, state, controller(obs))
        traj.append(info)
        if info.terminated:
            return traj


def zero_policy(model: GridModel):
    return lambda obs: np.zeros(model.n_act)


def max_shed_policy(model: GridModel):
    """Shed the largest admissible step at every load bus (effective from clearance)."""
    return lambda obs: np.full(model.n_act, model.action_min)


@dataclass(frozen=True, eq=False)
class GridEnv:
    """Episodic environment: surrogate grid plus a reward weighting.

    Episode state is passed in and out explicitly, so a single instance can
    serve any number of concurrent rollouts.
    """

    model: GridModel = field(default_factory=GridModel.default)
    weights: RewardWeights = field(default_factory=RewardWeights)

    @property
    def obs_dim(self) -> int:
        return self.model.n_obs

    @property
    def act_dim(self) -> int:
        return self.model.n_act

    @property
    def max_steps(self) -> int:
        return int(round(self.model.horizon / self.model.action_interval))

    def reset_batch(self, tasks: Sequence[Task], seeds=None):
        return reset_batch(self.model, tasks)

    def step_batch(self, state: BatchState, actions: np.ndarray):
        new_state, obs, info = step_batch(self.model, state, actions)
        rw = combined_reward_batch(info.voltages, info.t, info.t_clear, info.shed_amounts,
                                   info.invalid_action_count, self.weights, self.model.envelope)
        done = info.terminated | rw.terminal
        record = {
            "t": np.full(len(state.tasks), info.t),
            "t_clear": info.t_clear,
            "voltages": info.voltages,
            "load_fractions": new_state.load_fractions,
            "action": np.asarray(actions, dtype=float),
            "shed": info.shed_amounts,
            "invalid": info.invalid_action_count,
            "violation": info.violation,
            "terminated": done,
            "r": rw.base,
            "B": rw.barrier,
            "R": rw.total,
            "threshold": rw.threshold,
        }
        return new_state, obs, rw.total, done, record


def step_infos(trajectory: dict) -> list[StepInfo]:
    """Rebuild StepInfo records from a retained rollout trajectory."""
    return [
        StepInfo(float(trajectory["t"][i]), float(trajectory["t_clear"][i]),
                 trajectory["voltages"][i], trajectory["shed"][i],
                 int(trajectory["invalid"][i]), bool(trajectory["terminated"][i]),
                 bool(trajectory["violation"][i]))
        for i in range(len(trajectory["t"]))
    ]
