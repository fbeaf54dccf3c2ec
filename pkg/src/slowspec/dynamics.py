"""Benchmark potentials and Euler-discretized Smoluchowski dynamics.

Three analytic families are supported:

* ``double_gaussian``: the stationary density is an equal-weight mixture of
  two normalized Gaussians, ``mu(x) = 1/2 sum_i exp(-(x - a_i)^2 / s_i^2) /
  (s_i sqrt(pi))``, and the potential is ``U = -ln mu``.
* ``quartic``: ``V(x) = c4 x^4 + c2 x^2 + c0`` with ``mu = exp(-V) / Z``.
* ``flat``: zero potential (free diffusion, no stationary density).

Trajectories are generated with the Euler scheme
``x_{k+1} = x_k + dt f(x_k) + sqrt(2 dt) eta_k``. The normal variates come
from a Philox counter stream in which variate ``k`` is a pure function of
``(seed, k)``, so the stream can be produced in any chunking.
"""

from __future__ import annotations

import enum
import functools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import integrate

__all__ = [
    "PotentialKind",
    "PotentialSpec",
    "Trajectory",
    "DivergenceError",
    "potential_energy",
    "force",
    "stationary_density",
    "log_stationary_density",
    "quartic_normalization",
    "normal_variates",
    "simulate",
    "load_trajectory",
]

TRAJ_MAGIC = b"SLOWTRAJ"
TRAJ_VERSION = 1
_HEADER = struct.Struct("<8sIQdQ")

_SQRT_PI = math.sqrt(math.pi)


class DivergenceError(RuntimeError):
    """Raised when an Euler trajectory leaves the guard domain."""


class PotentialKind(str, enum.Enum):
    DOUBLE_GAUSSIAN = "double_gaussian"
    QUARTIC = "quartic"
    FLAT = "flat"


@dataclass(frozen=True)
class PotentialSpec:
    """A one-dimensional potential together with its stationary density.

    Parameters
    ----------
    kind : PotentialKind
        Analytic family.
    params : tuple of float
        ``(a1, a2, s1, s2)`` for ``double_gaussian``, ``(c4, c2, c0)`` for
        ``quartic`` and ``()`` for ``flat``.
    """

    kind: PotentialKind
    params: tuple = ()

    def __post_init__(self):
        kind = PotentialKind(self.kind)
        params = tuple(float(v) for v in self.params)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", params)
        expected = {PotentialKind.DOUBLE_GAUSSIAN: 4, PotentialKind.QUARTIC: 3, PotentialKind.FLAT: 0}
        if len(params) != expected[kind]:
            raise ValueError(f"{kind.value} potential takes {expected[kind]} parameters, got {len(params)}")
        if not all(math.isfinite(v) for v in params):
            raise ValueError("potential parameters must be finite")
        if kind is PotentialKind.DOUBLE_GAUSSIAN and min(params[2:]) <= 0:
            raise ValueError("double-Gaussian widths must be strictly positive")
        if kind is PotentialKind.QUARTIC and params[0] <= 0:
            raise ValueError("quartic coefficient c4 must be positive (confining potential)")

    @classmethod
    def double_gaussian(cls, centers=(-2.0, 2.0), widths=(1.0, 1.0)):
        return cls(PotentialKind.DOUBLE_GAUSSIAN, (*centers, *widths))

    @classmethod
    def quartic(cls, c4=3.0, c2=-6.0, c0=3.0):
        return cls(PotentialKind.QUARTIC, (c4, c2, c0))

    @classmethod
    def flat(cls):
        return cls(PotentialKind.FLAT, ())

    def energy(self, x):
        return potential_energy(self, x)

    def force(self, x):
        return force(self, x)

    def density(self, x):
        return stationary_density(self, x)

    def to_dict(self):
        return {"kind": self.kind.value, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d):
        kind = PotentialKind(d["kind"])
        if "params" in d:
            return cls(kind, tuple(d["params"]))
        if kind is PotentialKind.DOUBLE_GAUSSIAN:
            return cls.double_gaussian(d.get("centers", (-2.0, 2.0)), d.get("widths", (1.0, 1.0)))
        if kind is PotentialKind.QUARTIC:
            c = d.get("coefficients", (3.0, -6.0, 3.0))
            return cls.quartic(*c)
        return cls.flat()


def _as_finite(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("positions must be finite")
    return arr


def _ret(arr, x):
    return float(arr) if np.ndim(x) == 0 else arr


def _dg_log_terms(params, x):
    a1, a2, s1, s2 = params
    t1 = -((x - a1) / s1) ** 2 - math.log(2.0 * s1 * _SQRT_PI)
    t2 = -((x - a2) / s2) ** 2 - math.log(2.0 * s2 * _SQRT_PI)
    return t1, t2


def _log_density_unnormalized(p: PotentialSpec, x):
    if p.kind is PotentialKind.DOUBLE_GAUSSIAN:
        return np.logaddexp(*_dg_log_terms(p.params, x))
    if p.kind is PotentialKind.QUARTIC:
        c4, c2, c0 = p.params
        return -(c4 * x**4 + c2 * x**2 + c0)
    return np.zeros_like(x)


def potential_energy(p: PotentialSpec, x):
    """Dimensionless potential ``U(x)``.

    For the double-Gaussian family ``U = -ln mu`` is evaluated in the log
    domain, so it stays finite where ``mu`` itself underflows.
    """
    arr = _as_finite(x)
    if p.kind is PotentialKind.DOUBLE_GAUSSIAN:
        out = -_log_density_unnormalized(p, arr)
    elif p.kind is PotentialKind.QUARTIC:
        c4, c2, c0 = p.params
        out = c4 * arr**4 + c2 * arr**2 + c0
    else:
        out = np.zeros_like(arr)
    return _ret(out, x)


def force(p: PotentialSpec, x):
    """Force ``f = -dU/dx``."""
    arr = _as_finite(x)
    if p.kind is PotentialKind.DOUBLE_GAUSSIAN:
        a1, a2, s1, s2 = p.params
        t1, t2 = _dg_log_terms(p.params, arr)
        top = np.maximum(t1, t2)
        w1, w2 = np.exp(t1 - top), np.exp(t2 - top)
        out = (w1 * (-2.0 * (arr - a1) / s1**2) + w2 * (-2.0 * (arr - a2) / s2**2)) / (w1 + w2)
    elif p.kind is PotentialKind.QUARTIC:
        c4, c2, _ = p.params
        out = -(4.0 * c4 * arr**3 + 2.0 * c2 * arr)
    else:
        out = np.zeros_like(arr)
    return _ret(out, x)


@functools.lru_cache(maxsize=64)
def _quartic_log_z(c4, c2, c0, bound):
    # integrate exp(-(V - Vmin)) to keep the integrand O(1)
    vmin = min(c0, c0 - c2**2 / (4.0 * c4)) if c2 < 0 else c0
    val, _ = integrate.quad(
        lambda t: math.exp(-(c4 * t**4 + c2 * t**2 + c0 - vmin)),
        -bound, bound, epsabs=0.0, epsrel=1e-13, limit=200,
    )
    return math.log(val) - vmin


def quartic_normalization(p: PotentialSpec, bound: float = 3.0) -> float:
    """Partition function ``Z = int exp(-V) dx`` over ``[-bound, bound]``."""
    if p.kind is not PotentialKind.QUARTIC:
        raise ValueError("normalization constant only defined for quartic potentials")
    return math.exp(_quartic_log_z(*p.params, float(bound)))


def log_stationary_density(p: PotentialSpec, x):
    """``ln mu(x)``, finite even where ``mu`` underflows."""
    arr = _as_finite(x)
    if p.kind is PotentialKind.FLAT:
        raise ValueError("flat potential has no normalizable stationary density")
    logmu = _log_density_unnormalized(p, arr)
    if p.kind is PotentialKind.QUARTIC:
        logmu = logmu - _quartic_log_z(*p.params, 3.0)
    return _ret(logmu, x)


def stationary_density(p: PotentialSpec, x):
    """Normalized stationary density ``mu(x)``."""
    return np.exp(log_stationary_density(p, x))


# --- simulation ----------------------------------------------------------

_KIND_CODE = {PotentialKind.FLAT: 0, PotentialKind.DOUBLE_GAUSSIAN: 1, PotentialKind.QUARTIC: 2}


@numba.njit(cache=True)
def _force_scalar(kind, params, x):
    if kind == 1:
        a1, a2, s1, s2 = params[0], params[1], params[2], params[3]
        t1 = -((x - a1) / s1) ** 2 - math.log(2.0 * s1)
        t2 = -((x - a2) / s2) ** 2 - math.log(2.0 * s2)
        top = max(t1, t2)
        w1 = math.exp(t1 - top)
        w2 = math.exp(t2 - top)
        return (w1 * (-2.0 * (x - a1) / (s1 * s1)) + w2 * (-2.0 * (x - a2) / (s2 * s2))) / (w1 + w2)
    elif kind == 2:
        return -(4.0 * params[0] * x**3 + 2.0 * params[1] * x)
    return 0.0


@numba.njit(cache=True)
def _euler_chunk(x, kind, params, dt, noise, step0, stride, guard, out):
    """Advance ``len(noise)`` steps; return (x, failing step or -1)."""
    amp = math.sqrt(2.0 * dt)
    for i in range(noise.shape[0]):
        x = x + dt * _force_scalar(kind, params, x) + amp * noise[i]
        step = step0 + i + 1
        if not (abs(x) <= guard):
            return x, step
        if step % stride == 0:
            out[step // stride] = x
    return x, -1


def normal_variates(seed: int, start: int, count: int) -> np.ndarray:
    """Standard normals ``start .. start+count-1`` of the stream keyed by ``seed``.

    Variate ``k`` is built by Box-Muller from raw Philox words ``k`` and
    ``k ^ 1``, so any slice of the stream can be generated independently.
    ``start`` must be even.
    """
    if start % 2:
        raise ValueError("start index must be even")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    n = count + (count % 2)
    bg = np.random.Philox(key=seed)
    bg.advance(start // 4)
    offset = start % 4
    raw = bg.random_raw(offset + n)[offset:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(n)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled scalar trajectory.

    ``dt`` is the time between recorded frames.
    """

    states: np.ndarray
    dt: float
    seed: int = 0
    potential: PotentialSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=np.float64)
        if states.ndim != 1 or states.size == 0:
            raise ValueError("trajectory states must be a non-empty 1D sequence")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory states must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    def __len__(self):
        return self.states.size

    @property
    def n_frames(self):
        return self.states.size

    def save(self, path):
        """Write the ``SLOWTRAJ`` binary format."""
        path = Path(path)
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, self.n_frames, float(self.dt), int(self.seed)))
            fh.write(self.states.astype("<f8").tobytes())
        return path

    def to_csv(self, path):
        path = Path(path)
        with path.open("w") as fh:
            fh.write("x\n")
            for v in self.states:
                fh.write(f"{v:.17g}\n")
        return path

    def sidecar(self):
        return {
            "n_frames": self.n_frames,
            "dt": self.dt,
            "seed": int(self.seed),
            "potential": None if self.potential is None else self.potential.to_dict(),
            **self.meta,
        }


def load_trajectory(path, potential: PotentialSpec | None = None) -> Trajectory:
    """Read a ``SLOWTRAJ`` file.

    If ``potential`` is not given and a ``.json`` sidecar exists next to the
    file, the potential recorded there is attached.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated trajectory header")
    magic, version, count, dt, seed = _HEADER.unpack_from(data)
    if magic != TRAJ_MAGIC:
        raise ValueError(f"{path}: not a SLOWTRAJ file")
    if version != TRAJ_VERSION:
        raise ValueError(f"{path}: unsupported trajectory version {version}")
    body = data[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} frames, found {len(body) // 8}")
    states = np.frombuffer(body, dtype="<f8").astype(np.float64)
    sidecar = path.with_suffix(".json")
    if potential is None and sidecar.exists():
        pot = json.loads(sidecar.read_text()).get("potential")
        if pot is not None:
            potential = PotentialSpec.from_dict(pot)
    return Trajectory(states, dt, seed, potential)


def simulate(
    p: PotentialSpec,
    x0: float,
    dt: float,
    n_steps: int,
    seed: int,
    stride: int = 1,
    guard: float = 100.0,
    chunk_size: int = 1 << 20,
) -> Trajectory:
    """Integrate ``n_steps`` Euler steps of overdamped diffusion in ``p``.

    Every ``stride``-th state is recorded, starting with ``x0``; the returned
    trajectory has ``n_steps // stride + 1`` frames and frame spacing
    ``stride * dt``.

    Raises
    ------
    DivergenceError
        If ``|x|`` exceeds ``guard``, which usually means ``dt`` is too large.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not math.isfinite(x0) or abs(x0) > guard:
        raise ValueError("x0 must be finite and inside the guard domain")
    chunk_size = max(4, chunk_size - chunk_size % 4)
    kind = _KIND_CODE[p.kind]
    params = np.asarray(p.params if p.params else (0.0,), dtype=np.float64)
    out = np.empty(n_steps // stride + 1)
    out[0] = x0
    x = float(x0)
    for start in range(0, n_steps, chunk_size):
        count = min(chunk_size, n_steps - start)
        noise = normal_variates(seed, start, count)
        x, bad = _euler_chunk(x, kind, params, float(dt), noise, start, stride, float(guard), out)
        if bad >= 0:
            raise DivergenceError(f"trajectory diverged at step {bad}")
    return Trajectory(out, dt * stride, seed, p, {"x0": float(x0), "n_steps": int(n_steps), "stride": int(stride), "step_dt": float(dt)})
