"""Trajectory estimators for the variational principle.

All estimators treat basis functions as half-weighted functions ``phi`` and
correlate the weighted functions ``g = phi / sqrt(mu_hat)``::

    h_ij = 1/(N-m) sum_k g_i(x_k) g_j(x_{k+m})
    s_ij = 1/N     sum_k g_i(x_k) g_j(x_k)

Sums run over fixed-size chunks of frames in index order and the chunk
partials are combined with compensated (Neumaier) summation, so results do
not depend on how the frames are split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSet, bin_index, eval_basis
from .dynamics import Trajectory
from .eigensolver import implied_timescales, ritz_solve, roothaan_hall_solve

__all__ = [
    "DensityEstimate",
    "CorrelationMatrices",
    "MsmMatrices",
    "BootstrapResult",
    "EstimationError",
    "estimate_stationary_density",
    "estimate_H",
    "estimate_S",
    "estimate_H_lags",
    "data_edges",
    "estimate_correlation_matrices",
    "rayleigh_coefficient",
    "estimate_msm_transition_matrix",
    "msm_density_matrix",
    "msm_from_counts",
    "msm_spectrum",
    "block_bootstrap",
    "bootstrap_rayleigh",
    "save_matrix",
    "load_matrix",
]

CHUNK = 1 << 18
MAX_SKIP_FRACTION = 0.01


class EstimationError(ValueError):
    """Inputs to an estimator are inconsistent."""


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Piecewise-constant histogram density ``mu_hat``."""

    edges: np.ndarray
    masses: np.ndarray

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def values(self):
        return self.masses / self.widths

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        idx = bin_index(self.edges, flat)
        out = np.zeros(flat.shape)
        inside = idx >= 0
        out[inside] = self.values[idx[inside]]
        return float(out[0]) if x.ndim == 0 else out.reshape(x.shape)

    def to_csv(self, path):
        table = np.column_stack([self.edges[:-1], self.edges[1:], self.masses, self.values])
        np.savetxt(path, table, delimiter=",", fmt="%.17g", header="bin_left,bin_right,mass,density", comments="")
        return Path(path)


@dataclass(frozen=True, eq=False)
class CorrelationMatrices:
    """Estimated density matrix ``H`` and overlap ``S`` at one lag."""

    H: np.ndarray
    S: np.ndarray
    lag: int
    frames_used: int
    basis: BasisSet | None = None
    symmetrized: bool = True
    skipped: int = 0


@dataclass(frozen=True, eq=False)
class MsmMatrices:
    """Count and transition matrices of a Markov state model.

    Rows of ``T`` for bins without outgoing counts are left at zero and
    listed in ``unvisited``; spectral quantities use the visited bins only.
    """

    counts: np.ndarray
    T: np.ndarray
    pi: np.ndarray
    lag: int
    unvisited: tuple = ()

    @property
    def active(self):
        mask = np.ones(self.T.shape[0], dtype=bool)
        mask[list(self.unvisited)] = False
        return mask

    def eigenvalues(self):
        """Eigenvalues of ``T`` on the visited bins, non-ascending."""
        return msm_spectrum(self)

    def timescales(self, frame_dt):
        return implied_timescales(self.eigenvalues(), self.lag * frame_dt)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap replicates of a set of estimated eigenvalues."""

    replicates: np.ndarray
    estimate: np.ndarray
    block_length: int

    @property
    def std(self):
        return self.replicates.std(axis=0, ddof=1)


# -- helpers ----------------------------------------------------------------


def _neumaier_add(total, comp, x):
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp += np.where(big, (total - t) + x, (x - t) + total)
    return t, comp


def _weighted_values(b: BasisSet, mu, x):
    """Basis values divided by ``sqrt(mu_hat)``; invalid frames get NaN."""
    vals = eval_basis(b, x)
    dens = np.asarray(mu(x), dtype=float)
    ok = dens > 0
    out = np.full(vals.shape, np.nan)
    out[:, ok] = vals[:, ok] / np.sqrt(dens[ok])
    return out


def _lagged_sums(states, fn, lags, chunk=CHUNK):
    """Per lag, ``(sum_k g(x_k) g(x_{k+lag})^T, n_pairs_used, n_skipped)``.

    ``g`` is evaluated once per chunk and shared between all lags.
    """
    lags = [int(m) for m in lags]
    top = max(lags)
    acc = {m: [None, None, 0, 0] for m in lags}
    for start in range(0, states.size - min(lags), chunk):
        G = fn(states[start: min(start + chunk + top, states.size)])
        finite = np.all(np.isfinite(G), axis=0)
        for m in lags:
            n = min(chunk, states.size - m - start)
            if n <= 0:
                continue
            X, Y = G[:, :n], G[:, m: m + n]
            good = finite[:n] & finite[m: m + n]
            nbad = int(n - good.sum())
            if nbad:
                X, Y = X[:, good], Y[:, good]
            part = X @ Y.T
            a = acc[m]
            if a[0] is None:
                a[0], a[1] = part, np.zeros_like(part)
            else:
                a[0], a[1] = _neumaier_add(a[0], a[1], part)
            a[2] += n - nbad
            a[3] += nbad
    return {m: (a[0] + a[1], a[2], a[3]) for m, a in acc.items()}


def _lagged_sum(states, fn, lag, chunk=CHUNK, stride=1):
    if stride == 1:
        return _lagged_sums(states, fn, [lag], chunk)[int(lag)]
    # pairs starting every `stride` frames
    n_pairs = states.size - lag
    x0, x1 = states[:n_pairs:stride], states[lag: lag + n_pairs: stride]
    total = comp = None
    used = skipped = 0
    for start in range(0, x0.size, chunk):
        X, Y = fn(x0[start: start + chunk]), fn(x1[start: start + chunk])
        good = np.all(np.isfinite(X), axis=0) & np.all(np.isfinite(Y), axis=0)
        part = X[:, good] @ Y[:, good].T
        if total is None:
            total, comp = part, np.zeros_like(part)
        else:
            total, comp = _neumaier_add(total, comp, part)
        used += int(good.sum())
        skipped += int((~good).sum())
    return total + comp, used, skipped


def _check_skips(skipped, n_pairs):
    if skipped > MAX_SKIP_FRACTION * n_pairs:
        raise EstimationError("density estimate inconsistent with trajectory")


# -- density ---------------------------------------------------------------


def estimate_stationary_density(traj: Trajectory, edges, clamp=True) -> DensityEstimate:
    """Histogram estimate of the stationary density.

    With ``clamp`` (default) frames outside the edges are counted in the
    first or last bin; otherwise they raise.
    """
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if states.size == 0:
        raise EstimationError("empty trajectory")
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing")
    idx = bin_index(edges, states)
    out = idx < 0
    if out.any():
        if not clamp:
            raise EstimationError(f"{int(out.sum())} frames fall outside the bin edges")
        idx[out & (states < edges[0])] = 0
        idx[out & (states > edges[-1])] = edges.size - 2
    counts = np.bincount(idx, minlength=edges.size - 1)
    return DensityEstimate(edges, counts / states.size)


def data_edges(traj: Trajectory, bins: int) -> np.ndarray:
    """``bins`` equal-width bins spanning the sampled range of ``traj``."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    lo, hi = float(states.min()), float(states.max())
    if not hi > lo:
        raise EstimationError("trajectory has zero spread")
    return np.linspace(lo, hi, int(bins) + 1)


# -- correlation matrices ----------------------------------------------------


def estimate_H(traj: Trajectory, b: BasisSet, mu, lag: int, symmetrize=True, stride: int = 1) -> np.ndarray:
    """Time-lagged density matrix ``H`` from one trajectory.

    By default all overlapping lagged pairs are used; ``stride > 1`` keeps
    only pairs starting every ``stride`` frames (non-overlapping when
    ``stride >= lag``), for error analysis. Frames where ``mu_hat``
    vanishes are skipped; more than 1 % skipped pairs raises
    :class:`EstimationError`.
    """
    return _estimate_H(traj, b, mu, lag, symmetrize, stride)[0]


def _estimate_H(traj, b, mu, lag, symmetrize, stride=1):
    states = traj.states
    if lag < 0:
        raise ValueError("lag must be non-negative")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if lag >= states.size:
        raise EstimationError(f"lag {lag} not shorter than trajectory ({states.size} frames)")
    total, used, skipped = _lagged_sum(states, lambda x: _weighted_values(b, mu, x), lag, stride=stride)
    _check_skips(skipped, used + skipped)
    H = total / used
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H, skipped


def estimate_S(traj: Trajectory, b: BasisSet, mu) -> np.ndarray:
    """Overlap matrix ``S`` estimated from the trajectory; exactly symmetric."""
    return estimate_H(traj, b, mu, 0, symmetrize=True)


def estimate_H_lags(traj: Trajectory, b: BasisSet, mu, lags, symmetrize=True) -> dict:
    """:func:`estimate_H` for several lags in one pass over the trajectory.

    Returns ``{lag: H}``; each matrix is identical to the single-lag result.
    """
    states = traj.states
    lags = sorted({int(m) for m in lags})
    if not lags or lags[0] < 0:
        raise ValueError("lags must be non-negative")
    if lags[-1] >= states.size:
        raise EstimationError(f"lag {lags[-1]} not shorter than trajectory ({states.size} frames)")
    out = {}
    for m, (total, used, skipped) in _lagged_sums(states, lambda x: _weighted_values(b, mu, x), lags).items():
        _check_skips(skipped, states.size - m)
        H = total / used
        out[m] = 0.5 * (H + H.T) if symmetrize else H
    return out


def estimate_correlation_matrices(traj: Trajectory, b: BasisSet, mu, lag: int, symmetrize=True) -> CorrelationMatrices:
    H, skipped = _estimate_H(traj, b, mu, lag, symmetrize)
    S = estimate_S(traj, b, mu)
    return CorrelationMatrices(H, S, lag, traj.n_frames - lag, b, symmetrize, skipped)


def rayleigh_coefficient(traj: Trajectory, f, mu=None, lag: int = 1, normalize=False) -> float:
    """Sampled Rayleigh coefficient (autocorrelation) of a test function.

    Parameters
    ----------
    f : callable
        Weighted test function ``f = phi / sqrt(mu)``. If ``mu`` is given,
        ``f`` is instead taken as the half-weighted ``phi`` and divided by
        ``sqrt(mu_hat)``.
    normalize : bool
        Divide by the estimated ``<f, f>_mu``, i.e. the lag-0 value.
    """
    if mu is None:
        fn = lambda x: np.asarray(f(x), dtype=float)[None, :]  # noqa: E731
    else:
        fn = lambda x: np.where(mu(x) > 0, f(x) / np.sqrt(np.maximum(mu(x), 1e-300)), np.nan)[None, :]  # noqa: E731
    states = traj.states
    if lag >= states.size:
        raise EstimationError(f"lag {lag} not shorter than trajectory ({states.size} frames)")
    num, used, skipped = _lagged_sum(states, fn, lag)
    _check_skips(skipped, states.size - lag)
    value = float(num[0, 0] / used)
    if normalize:
        den, used0, _ = _lagged_sum(states, fn, 0)
        value /= float(den[0, 0] / used0)
    return value


# -- Markov state models -----------------------------------------------------


def estimate_msm_transition_matrix(traj: Trajectory, edges, lag: int, symmetrize=True, clamp=True) -> MsmMatrices:
    """Count lagged bin-to-bin transitions and row-normalize them."""
    if lag < 1:
        raise ValueError("lag must be >= 1")
    states = traj.states
    if lag >= states.size:
        raise EstimationError(f"lag {lag} not shorter than trajectory ({states.size} frames)")
    edges = np.asarray(edges, dtype=float)
    n = edges.size - 1
    idx = bin_index(edges, states)
    out = idx < 0
    if out.any():
        if not clamp:
            raise EstimationError(f"{int(out.sum())} frames fall outside the bin edges")
        idx[out & (states < edges[0])] = 0
        idx[out & (states > edges[-1])] = n - 1
    pair = idx[:-lag] * n + idx[lag:]
    C = np.bincount(pair, minlength=n * n).reshape(n, n).astype(float)
    if symmetrize:
        C = 0.5 * (C + C.T)
    return msm_from_counts(C, lag)


def msm_from_counts(C, lag=1) -> MsmMatrices:
    """Build :class:`MsmMatrices` from a (possibly symmetrized) count matrix."""
    C = np.asarray(C, dtype=float)
    if np.any(C < 0):
        raise ValueError("counts must be non-negative")
    rows = C.sum(axis=1)
    unvisited = tuple(int(i) for i in np.nonzero(rows == 0)[0])
    T = np.zeros_like(C)
    ok = rows > 0
    T[ok] = C[ok] / rows[ok, None]
    pi = rows / rows.sum()
    return MsmMatrices(C, T, pi, lag, unvisited)


def msm_density_matrix(msm: MsmMatrices) -> np.ndarray:
    """Indicator-basis density matrix ``h_ij = T_ij sqrt(pi_i / pi_j)``.

    Restricted to visited bins. For symmetric counts this is the
    symmetric matrix ``c_ij / sqrt(c_i c_j)``, similar to ``T``.
    """
    a = msm.active
    T = msm.T[np.ix_(a, a)]
    s = np.sqrt(msm.pi[a])
    H = T * s[:, None] / s[None, :]
    return H


def msm_spectrum(msm: MsmMatrices) -> np.ndarray:
    a = msm.active
    C = msm.counts[np.ix_(a, a)]
    if np.array_equal(C, C.T):
        return ritz_solve(msm_density_matrix(msm)).eigenvalues
    ev = np.linalg.eigvals(msm.T[np.ix_(a, a)])
    return np.sort(ev.real)[::-1]


# -- error bars ------------------------------------------------------------


def _block_sums(states, fn, lag, sub):
    """Per-sub-block sums of lagged and instantaneous outer products."""
    n_pairs = states.size - lag
    nsb = n_pairs // sub
    Hs, Ss = [], []
    for k in range(nsb):
        lo = k * sub
        G = fn(states[lo: lo + sub + lag])
        X, Y = G[:, :sub], G[:, lag: lag + sub]
        good = np.all(np.isfinite(X), axis=0) & np.all(np.isfinite(Y), axis=0)
        X, Y = X[:, good], Y[:, good]
        Hs.append(X @ Y.T)
        Ss.append(X @ X.T)
    return np.array(Hs), np.array(Ss)


def _circular_resample(Hs, Ss, k, rng):
    nsb = Hs.shape[0]
    nblocks = max(1, nsb // k)
    starts = rng.integers(0, nsb, size=nblocks)
    idx = (starts[:, None] + np.arange(k)[None, :]) % nsb
    return Hs[idx].sum(axis=(0, 1)), Ss[idx].sum(axis=(0, 1)), idx.size


def block_bootstrap(
    traj: Trajectory,
    b: BasisSet,
    mu,
    lag: int,
    n_boot: int = 100,
    block_length: int | None = None,
    seed: int = 0,
    solver: str = "roothaan-hall",
    max_subblocks: int = 20000,
) -> BootstrapResult:
    """Circular block bootstrap of the estimated eigenvalues.

    Blocks of ``block_length`` lagged pairs (default ``10 * lag``) are
    drawn with wrap-around. Block starts are aligned to sub-blocks of at
    least ``n_pairs / max_subblocks`` pairs to bound memory, so the
    effective block length can exceed the requested one.
    """
    states = traj.states
    n_pairs = states.size - lag
    block_length = 10 * max(lag, 1) if block_length is None else int(block_length)
    sub = max(1, block_length // 8, math.ceil(n_pairs / max_subblocks))
    k = max(1, round(block_length / sub))
    fn = lambda x: _weighted_values(b, mu, x)  # noqa: E731
    Hs, Ss = _block_sums(states, fn, lag, sub)
    rng = np.random.default_rng(seed)

    def solve(H, S):
        H = 0.5 * (H + H.T)
        S = 0.5 * (S + S.T)
        if solver == "ritz":
            return ritz_solve(H).eigenvalues
        return roothaan_hall_solve(H, S).eigenvalues

    nsb = Hs.shape[0]
    estimate = solve(Hs.sum(0) / (nsb * sub), Ss.sum(0) / (nsb * sub))
    reps = []
    for _ in range(n_boot):
        H, S, count = _circular_resample(Hs, Ss, k, rng)
        reps.append(solve(H / (count * sub), S / (count * sub)))
    return BootstrapResult(np.array(reps), estimate, k * sub)


def bootstrap_rayleigh(traj: Trajectory, f, lag: int, n_boot=200, block_length=None, seed=0, normalize=True, max_subblocks=20000) -> BootstrapResult:
    """Circular block bootstrap of :func:`rayleigh_coefficient`."""
    states = traj.states
    n_pairs = states.size - lag
    block_length = 10 * max(lag, 1) if block_length is None else int(block_length)
    sub = max(1, block_length // 8, math.ceil(n_pairs / max_subblocks))
    k = max(1, round(block_length / sub))
    fn = lambda x: np.asarray(f(x), dtype=float)[None, :]  # noqa: E731
    Hs, Ss = _block_sums(states, fn, lag, sub)
    rng = np.random.default_rng(seed)

    def value(H, S, count):
        return H[0, 0] / S[0, 0] if normalize else H[0, 0] / (count * sub)

    est = value(Hs.sum(0), Ss.sum(0), Hs.shape[0])
    reps = [value(*_circular_resample(Hs, Ss, k, rng)) for _ in range(n_boot)]
    return BootstrapResult(np.array(reps)[:, None], np.array([est]), k * sub)


# -- matrix files --------------------------------------------------------------


def save_matrix(path, M):
    """Write ``M`` as CSV (``.csv``) or JSON (``.json``) at full precision."""
    path = Path(path)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if path.suffix == ".json":
        path.write_text(json.dumps({"rows": M.shape[0], "cols": M.shape[1], "data": [float(v) for v in M.ravel()]}))
    else:
        np.savetxt(path, M, delimiter=",", fmt="%.17g")
    return path


def load_matrix(path):
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return np.asarray(d["data"], dtype=float).reshape(d["rows"], d["cols"])
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
