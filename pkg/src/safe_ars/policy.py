"""Deterministic policies (linear or single-layer LSTM) over a flat weight vector.

Only forward inference is needed: random search never differentiates the
policy. Everything here accepts either one observation ``(n,)`` or a batch
``(B, n)`` that shares the same weights.

Flat weight layout (row-major blocks, in this order):

* linear: ``W (out, in)``, ``b (out,)``
* lstm:   ``W_ih (4H, in)``, ``W_hh (4H, H)``, ``b (4H,)``, ``W_out (out, H)``,
  ``b_out (out,)`` with gate rows ordered input, forget, cell, output.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, ContractError, NumericError

ARCHS = ("linear", "lstm")
STD_FLOOR = 1e-8


def n_theta(arch: str, input_dim: int, output_dim: int, hidden_size: int = 0) -> int:
    if arch == "linear":
        return output_dim * input_dim + output_dim
    if arch == "lstm":
        h = hidden_size
        return 4 * h * input_dim + 4 * h * h + 4 * h + output_dim * h + output_dim
    raise ContractError(f"unknown policy arch {arch!r}")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Policy weights ``theta`` plus the topology needed to interpret them."""

    arch: str
    input_dim: int
    output_dim: int
    theta: np.ndarray
    hidden_size: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"unknown policy arch {self.arch!r}")
        if self.arch == "linear" and self.hidden_size != 0:
            raise ContractError("linear policy has no hidden layer")
        if self.arch == "lstm" and self.hidden_size < 1:
            raise ContractError("lstm policy needs hidden_size >= 1")
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        expected = n_theta(self.arch, self.input_dim, self.output_dim, self.hidden_size)
        if theta.size != expected:
            raise ContractError(f"theta has {theta.size} entries, {self.arch} needs {expected}")
        if not np.all(np.isfinite(theta)):
            raise NumericError("policy weights must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def n_theta(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.arch, self.input_dim, self.output_dim, theta, self.hidden_size)

    def same_arch(self, other: "PolicyParams") -> bool:
        return (self.arch, self.input_dim, self.output_dim, self.hidden_size) == (
            other.arch, other.input_dim, other.output_dim, other.hidden_size)

    def unpack(self) -> dict[str, np.ndarray]:
        """Named weight blocks as read-only views into ``theta``."""
        n, m, h = self.input_dim, self.output_dim, self.hidden_size
        if self.arch == "linear":
            shapes = [("W", (m, n)), ("b", (m,))]
        else:
            shapes = [("W_ih", (4 * h, n)), ("W_hh", (4 * h, h)), ("b", (4 * h,)),
                      ("W_out", (m, h)), ("b_out", (m,))]
        out, pos = {}, 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            out[name] = self.theta[pos:pos + size].reshape(shape)
            pos += size
        return out


def init_params(arch: str, input_dim: int, output_dim: int, hidden_size: int = 0,
                rng: np.random.Generator | None = None, scale: float = 0.0) -> PolicyParams:
    """Zero weights, or ``N(0, scale^2)`` entries when ``scale > 0``."""
    size = n_theta(arch, input_dim, output_dim, hidden_size)
    if scale > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        theta = scale * rng.standard_normal(size)
    else:
        theta = np.zeros(size)
    return PolicyParams(arch, input_dim, output_dim, theta, hidden_size)


@dataclass(frozen=True)
class ActionBounds:
    a_min: float = -0.2
    a_max: float = 0.0

    def __post_init__(self):
        if not self.a_min < self.a_max:
            raise ContractError("a_min must be below a_max")


@dataclass(frozen=True, eq=False)
class HiddenState:
    """LSTM hidden and cell vectors; both ``None`` for a linear policy."""

    h: np.ndarray | None = None
    c: np.ndarray | None = None


def zero_hidden(params: PolicyParams, batch: int | None = None) -> HiddenState:
    if params.arch == "linear":
        return HiddenState()
    shape = (params.hidden_size,) if batch is None else (batch, params.hidden_size)
    return HiddenState(np.zeros(shape), np.zeros(shape))


def policy_forward(params: PolicyParams, x, hidden: HiddenState | None = None,
                   blocks: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, HiddenState]:
    """One inference step; returns the raw (unsquashed) output and next hidden state.

    ``blocks`` may carry a cached :meth:`PolicyParams.unpack` to skip the
    reshape on hot paths.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ContractError(f"input has {x.shape[-1]} features, policy expects {params.input_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite policy input")
    w = blocks if blocks is not None else params.unpack()
    if params.arch == "linear":
        return x @ w["W"].T + w["b"], HiddenState()

    if hidden is None or hidden.h is None:
        hidden = zero_hidden(params, None if x.ndim == 1 else x.shape[0])
    if hidden.h.shape[-1] != params.hidden_size or hidden.h.shape[:-1] != x.shape[:-1]:
        raise ContractError("hidden state does not match the policy/input")
    hs = params.hidden_size
    z = x @ w["W_ih"].T + hidden.h @ w["W_hh"].T + w["b"]
    i = expit(z[..., :hs])
    f = expit(z[..., hs:2 * hs])
    g = np.tanh(z[..., 2 * hs:3 * hs])
    o = expit(z[..., 3 * hs:])
    c = f * hidden.c + i * g
    h = o * np.tanh(c)
    return h @ w["W_out"].T + w["b_out"], HiddenState(h, c)


def squash_action(raw, bounds: ActionBounds = ActionBounds()) -> np.ndarray:
    """Map any real output smoothly into ``[a_min, a_max]`` via tanh."""
    frac = (np.tanh(np.asarray(raw, dtype=np.float64)) + 1.0) * 0.5
    a = bounds.a_min + frac * (bounds.a_max - bounds.a_min)
    return np.clip(a, bounds.a_min, bounds.a_max)


def perturb(params: PolicyParams, delta, nu: float, sign: int) -> PolicyParams:
    """``theta + sign * nu * delta`` as new params; ``params`` is left untouched."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != params.theta.shape:
        raise ContractError(f"delta length {delta.size} != n_theta {params.n_theta}")
    if sign not in (1, -1):
        raise ContractError("sign must be +1 or -1")
    if nu < 0:
        raise ContractError("nu must be nonnegative")
    return params.with_theta(params.theta + sign * nu * delta)


@dataclass(frozen=True, eq=False)
class RunningStats:
    """Running per-coordinate mean and population variance of observations."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "RunningStats":
        return cls(0, np.zeros(dim), np.zeros(dim))

    @classmethod
    def from_batch(cls, x) -> "RunningStats":
        """Exact summary of a ``(k, dim)`` batch (two-pass)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            return cls.empty(x.shape[1])
        mean = x.mean(axis=0)
        return cls(int(x.shape[0]), mean, ((x - mean) ** 2).sum(axis=0))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def var(self) -> np.ndarray:
        if self.count < 1:
            return np.zeros(self.dim)
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        if self.count <= 1:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.var), STD_FLOOR)

    def merge(self, other: "RunningStats") -> "RunningStats":
        """Combine two disjoint summaries (Chan et al. pairwise update)."""
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return RunningStats(n, mean, m2)


def stats_update(stats: RunningStats, obs) -> RunningStats:
    """Single-observation Welford update."""
    x = np.asarray(obs, dtype=np.float64)
    if x.shape != stats.mean.shape:
        raise ContractError(f"observation shape {x.shape} != stats shape {stats.mean.shape}")
    n = stats.count + 1
    delta = x - stats.mean
    mean = stats.mean + delta / n
    m2 = stats.m2 + delta * (x - mean)
    return RunningStats(n, mean, m2)


def normalize(obs, stats: RunningStats) -> np.ndarray:
    return (np.asarray(obs, dtype=np.float64) - stats.mean) / stats.std


# Checkpoint layout, all little-endian:
#   magic 8s | version u16 | arch u8 | pad | hidden u32 | input u32 | output u32 | n_theta u64
#   theta f64[n_theta]
#   count u64 | dim u32 | mean f64[dim] | m2 f64[dim]
#   crc32 u32 over every preceding byte
MAGIC = b"SAFEARS\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHBxIIIQ")
_STATS_HEADER = struct.Struct("<QI")
_CRC = struct.Struct("<I")


def serialize(params: PolicyParams, stats: RunningStats) -> bytes:
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, ARCHS.index(params.arch), params.hidden_size,
                     params.input_dim, params.output_dim, params.n_theta),
        params.theta.astype("<f8").tobytes(),
        _STATS_HEADER.pack(stats.count, stats.dim),
        np.asarray(stats.mean, dtype="<f8").tobytes(),
        np.asarray(stats.m2, dtype="<f8").tobytes(),
    ]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def deserialize(data: bytes, expect_arch: str | None = None) -> tuple[PolicyParams, RunningStats]:
    """Inverse of :func:`serialize`; every malformed input raises CheckpointError."""
    data = bytes(data)
    if len(data) < _HEADER.size + _STATS_HEADER.size + _CRC.size:
        raise CheckpointError("checkpoint truncated (shorter than its header)")
    magic, version, arch_code, hidden, n_in, n_out, size = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a policy checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if arch_code >= len(ARCHS):
        raise CheckpointError(f"unknown arch code {arch_code}")
    arch = ARCHS[arch_code]
    try:
        expected = n_theta(arch, n_in, n_out, hidden)
    except ContractError as exc:
        raise CheckpointError(str(exc)) from None
    if size != expected:
        raise CheckpointError(f"header says {size} weights, {arch} topology needs {expected}")
    pos = _HEADER.size
    need = pos + 8 * size + _STATS_HEADER.size
    if len(data) < need:
        raise CheckpointError("checkpoint truncated inside the weights")
    theta = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
    pos += 8 * size
    count, dim = _STATS_HEADER.unpack_from(data, pos)
    pos += _STATS_HEADER.size
    if len(data) != pos + 16 * dim + _CRC.size:
        raise CheckpointError("checkpoint truncated or has trailing bytes")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if crc != zlib.crc32(data[:-_CRC.size]):
        raise CheckpointError("checkpoint checksum mismatch (corrupted file)")
    mean = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
    m2 = np.frombuffer(data, dtype="<f8", count=dim, offset=pos + 8 * dim).astype(np.float64)
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"checkpoint holds a {arch} policy, expected {expect_arch}")
    try:
        params = PolicyParams(arch, n_in, n_out, theta, hidden)
    except (ContractError, NumericError) as exc:
        raise CheckpointError(f"invalid weights in checkpoint: {exc}") from None
    return params, RunningStats(int(count), mean, m2)


def save_checkpoint(path, params: PolicyParams, stats: RunningStats) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params, stats))


def load_checkpoint(path, expect_arch: str | None = None) -> tuple[PolicyParams, RunningStats]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return deserialize(data, expect_arch)
