"""Experiment configuration: YAML file, environment overrides, validation.

The file is a YAML mapping with sections ``grid``, ``reward``, ``ars``,
``policy`` and ``tasks`` plus top-level ``seed``, ``workers`` and
``out_dir``. Any key can be overridden from the environment as
``SAFE_ARS__<SECTION>__<KEY>=value`` (top-level keys: ``SAFE_ARS__SEED``),
or on the command line with ``--set section.key=value``. Override values
are parsed as YAML scalars, so ``0.1``, ``true`` and ``[4, 15]`` work.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .ars import ArsConfig
from .envelope import SafetyEnvelope
from .errors import ConfigError, ContractError
from .gridsim import GridModel, Task
from .reward import RewardWeights

ENV_PREFIX = "SAFE_ARS__"

# scalar knobs of GridModel.default that are not dataclass fields
_GRID_EXTRAS = {"coupling_gain", "dip_near", "dip_decay"}
_GRID_FIELDS = {f.name for f in dataclasses.fields(GridModel)} | _GRID_EXTRAS
_ARS_FIELDS = {f.name for f in dataclasses.fields(ArsConfig)} - {"seed"}
_REWARD_FIELDS = {f.name for f in dataclasses.fields(RewardWeights)}
_POLICY_FIELDS = {"arch", "hidden_size"}
_TASK_FIELDS = {"train_buses", "train_durations", "held_out", "fault_start", "disjoint"}
_TOP_FIELDS = {"seed", "workers", "out_dir", "grid", "reward", "ars", "policy", "tasks"}
_SECTIONS = {"grid": _GRID_FIELDS, "reward": _REWARD_FIELDS, "ars": _ARS_FIELDS,
             "policy": _POLICY_FIELDS, "tasks": _TASK_FIELDS}

_TASK_RE = re.compile(r"^\s*bus\s*=\s*(\d+)\s*,\s*dur\s*=\s*([0-9.eE+-]+)\s*$")


def parse_task(spec: str, fault_start: float = 1.0) -> Task:
    """``"bus=7,dur=0.15"`` -> ``Task(7, 0.15)``."""
    m = _TASK_RE.match(spec)
    if not m:
        raise ConfigError(f"bad task spec {spec!r}; expected 'bus=N,dur=SECONDS'")
    try:
        return Task(int(m.group(1)), float(m.group(2)), fault_start)
    except (ValueError, ContractError) as exc:
        raise ConfigError(f"bad task spec {spec!r}: {exc}") from exc


@dataclass(frozen=True)
class PolicySection:
    arch: str = "lstm"
    hidden_size: int = 32

    def __post_init__(self):
        if self.arch not in ("lstm", "linear"):
            raise ConfigError(f"policy.arch must be 'lstm' or 'linear', got {self.arch!r}")
        if self.arch == "lstm" and self.hidden_size < 1:
            raise ConfigError("policy.hidden_size must be >= 1 for lstm")


@dataclass(frozen=True)
class TaskSection:
    train_buses: tuple[int, ...] = (4, 15, 21)
    train_durations: tuple[float, ...] = (0.0, 0.15, 0.28)
    held_out: tuple[str, ...] = ("bus=7,dur=0.15",)
    fault_start: float = 1.0
    disjoint: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workers: int | None = None
    out_dir: str = "runs/default"
    grid: Mapping[str, Any] = field(default_factory=dict)
    reward: RewardWeights = field(default_factory=RewardWeights)
    ars: ArsConfig = field(default_factory=ArsConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    tasks: TaskSection = field(default_factory=TaskSection)

    def model(self) -> GridModel:
        kw = {}
        for k, v in self.grid.items():
            if k == "envelope":
                v = SafetyEnvelope(tuple(tuple(p) for p in v))
            elif isinstance(v, list) and k not in ("coupling", "dip_depth"):
                v = tuple(v)
            kw[k] = v
        return GridModel.default(**kw)

    def train_tasks(self) -> list[Task]:
        return [Task(b, d, self.tasks.fault_start)
                for b in self.tasks.train_buses for d in self.tasks.train_durations]

    def held_out_tasks(self) -> list[Task]:
        return [parse_task(s, self.tasks.fault_start) for s in self.tasks.held_out]

    def ars_config(self) -> ArsConfig:
        return dataclasses.replace(self.ars, seed=self.seed)

    def to_dict(self) -> dict:
        ars = dataclasses.asdict(self.ars)
        ars.pop("seed")
        return {
            "seed": self.seed,
            "workers": self.workers,
            "out_dir": self.out_dir,
            "grid": {k: _plain(v) for k, v in self.grid.items()},
            "reward": dataclasses.asdict(self.reward),
            "ars": ars,
            "policy": dataclasses.asdict(self.policy),
            "tasks": {k: _plain(v) for k, v in dataclasses.asdict(self.tasks).items()},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if hasattr(v, "tolist"):
        return v.tolist()
    return v


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """1-based line of every mapping key, addressed by its path."""
    lines: dict[tuple[str, ...], int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, ())
    return lines


def _coerce_int(name, v, line):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}", line)
    return v


def from_dict(data: Mapping[str, Any] | None, lines: Mapping[tuple[str, ...], int] | None = None,
              ) -> ExperimentConfig:
    """Validate a parsed mapping into an :class:`ExperimentConfig`."""
    lines = lines or {}
    data = dict(data or {})
    for key in data:
        if key not in _TOP_FIELDS:
            raise ConfigError(f"unknown config key '{key}'", lines.get((key,)))
    sections = {}
    for name, allowed in _SECTIONS.items():
        sec = data.get(name) or {}
        if not isinstance(sec, Mapping):
            raise ConfigError(f"section '{name}' must be a mapping", lines.get((name,)))
        for key in sec:
            if key not in allowed:
                raise ConfigError(f"unknown config key '{name}.{key}'", lines.get((name, key)))
        sections[name] = dict(sec)

    def build(name, factory):
        kw = sections[name]
        try:
            return factory(**kw)
        except (TypeError, ValueError, ConfigError) as exc:
            line = min((lines[(name, k)] for k in kw if (name, k) in lines), default=lines.get((name,)))
            raise ConfigError(f"invalid '{name}' section: {exc}", line) from exc

    seed = _coerce_int("seed", data.get("seed", 0), lines.get(("seed",)))
    workers = data.get("workers")
    if workers is not None:
        workers = _coerce_int("workers", workers, lines.get(("workers",)))
        if workers < 1:
            raise ConfigError("workers must be >= 1", lines.get(("workers",)))
    if "held_out" in sections["tasks"] and isinstance(sections["tasks"]["held_out"], str):
        sections["tasks"]["held_out"] = [sections["tasks"]["held_out"]]
    for k in ("train_buses", "train_durations", "held_out"):
        if k in sections["tasks"]:
            sections["tasks"][k] = tuple(sections["tasks"][k])

    cfg = ExperimentConfig(
        seed=seed,
        workers=workers,
        out_dir=str(data.get("out_dir", ExperimentConfig.out_dir)),
        grid=sections["grid"],
        reward=build("reward", RewardWeights),
        ars=build("ars", ArsConfig),
        policy=build("policy", PolicySection),
        tasks=build("tasks", TaskSection),
    )
    validate(cfg, lines)
    return cfg


def validate(cfg: ExperimentConfig, lines: Mapping[tuple[str, ...], int] | None = None) -> None:
    """Cross-section checks: grid builds, buses exist, task sets are sane."""
    lines = lines or {}
    try:
        model = cfg.model()
    except (TypeError, ValueError, ConfigError) as exc:
        raise ConfigError(f"invalid 'grid' section: {exc}", lines.get(("grid",))) from exc
    train = cfg.train_tasks() if cfg.tasks.train_buses and cfg.tasks.train_durations else []
    if not train:
        raise ConfigError("training task set is empty", lines.get(("tasks",)))
    held = cfg.held_out_tasks()
    for t in train + held:
        if t.fault_bus not in model.fault_buses:
            raise ConfigError(f"fault bus {t.fault_bus} not among grid fault_buses {model.fault_buses}",
                              lines.get(("tasks",)))
    if cfg.tasks.disjoint and set(train) & set(held):
        clash = sorted(t.label for t in set(train) & set(held))
        raise ConfigError(f"held-out tasks overlap training tasks: {clash}", lines.get(("tasks", "held_out")))
    m = cfg.ars.rollouts_per_direction
    if m is not None and m > len(train):
        raise ConfigError(f"ars.rollouts_per_direction={m} exceeds {len(train)} training tasks",
                          lines.get(("ars", "rollouts_per_direction")))


def _set_path(data: dict, path: list[str], raw: str, source: str) -> None:
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override {source}: {exc}") from exc
    if len(path) == 1:
        data[path[0]] = value
    elif len(path) == 2:
        sec = data.setdefault(path[0], {})
        if not isinstance(sec, dict):
            raise ConfigError(f"override {source}: '{path[0]}' is not a section")
        sec[path[1]] = value
    else:
        raise ConfigError(f"override {source}: expected 'key' or 'section.key'")


def apply_overrides(data: dict, sets: list[str] = (), environ: Mapping[str, str] | None = None) -> dict:
    """Fold environment variables, then ``key=value`` pairs, into ``data``."""
    environ = os.environ if environ is None else environ
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            path = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
            _set_path(data, path, environ[name], name)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(data, key.strip().split("."), raw, item)
    return data


def load_config(path: str | Path | None = None, sets: list[str] = (),
                environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read, override and validate a config. ``path=None`` starts from defaults."""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) if text else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping", 1)
    data = apply_overrides(data, list(sets), environ)
    return from_dict(data, _key_lines(text))
