"""Grid discretization of the Euler transition kernel as a reference oracle.

The one-step kernel of the Euler scheme is the Gaussian
``p(x, y; tau) = N(y; x + tau f(x), 2 tau)``. On a grid with quadrature
weights ``w`` it becomes the row-stochastic matrix ``K_gh ~ p(x_g, x_h) w_h``.

The Euler kernel is reversible only up to O(tau) terms, so ``K`` is replaced
by its additive reversibilization with respect to its own stationary vector
``pi``::

    K_rev = (K + diag(pi)^-1 K^T diag(pi)) / 2

which keeps ``pi`` stationary, satisfies detailed balance to rounding error
and makes the half-weighted kernel ``diag(pi)^1/2 K_rev diag(pi)^-1/2``
exactly symmetric. The grid stationary density is ``mu_g = pi_g / w_g``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np
from scipy import linalg

from .basis import BasisKind, BasisSet, eval_basis
from .dynamics import PotentialKind, PotentialSpec, force, log_stationary_density
from .eigensolver import fix_signs, implied_timescales

__all__ = [
    "Grid",
    "GridPropagator",
    "GridSpectrum",
    "GridError",
    "build_grid_propagator",
    "reference_spectrum",
    "quadrature_H",
    "propagator_matrices",
    "grid_indicator_basis",
    "default_grid",
]


class GridError(ValueError):
    """The grid cannot represent the requested propagator."""


@dataclass(frozen=True)
class Grid:
    """Uniform quadrature grid on ``[a, b]`` with ``n`` nodes."""

    a: float
    b: float
    n: int
    rule: str = "trapezoid"

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("grid needs a < b")
        if self.n < 3:
            raise ValueError("grid needs at least 3 nodes")
        if self.rule not in ("trapezoid", "simpson"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")
        if self.rule == "simpson" and self.n % 2 == 0:
            raise ValueError("Simpson's rule needs an odd node count")

    @cached_property
    def nodes(self):
        return np.linspace(self.a, self.b, self.n)

    @property
    def spacing(self):
        return (self.b - self.a) / (self.n - 1)

    @cached_property
    def weights(self):
        h = self.spacing
        if self.rule == "trapezoid":
            w = np.full(self.n, h)
            w[[0, -1]] = 0.5 * h
        else:
            w = np.full(self.n, 2.0 * h / 3.0)
            w[1::2] = 4.0 * h / 3.0
            w[[0, -1]] = h / 3.0
        return w

    def refined(self, factor=2):
        return Grid(self.a, self.b, factor * (self.n - 1) + 1, self.rule)

    def to_dict(self):
        return {"a": self.a, "b": self.b, "n": self.n, "rule": self.rule}


def default_grid(p: PotentialSpec) -> Grid:
    """Default reference grid for the benchmark potentials."""
    if p.kind is PotentialKind.QUARTIC:
        return Grid(-2.5, 2.5, 1001)
    return Grid(-7.0, 7.0, 1401)


@dataclass(frozen=True, eq=False)
class GridPropagator:
    """Reversible grid transition matrix at lag ``tau``.

    Attributes
    ----------
    K : (n, n) ndarray
        Row-stochastic, reversible with respect to ``pi``.
    log_pi : (n,) ndarray
        Log stationary probabilities of the grid nodes. Kept in log form
        because the tails of a confining potential span dozens of decades.
    half_weighted_kernel : (n, n) ndarray
        Symmetric ``diag(pi)^1/2 K diag(pi)^-1/2``.
    leak : float
        Stationary probability lost off-grid in one step before
        renormalization.
    irreversibility : float
        ``max |K_euler - K|``, the size of the reversibilization correction.
    """

    grid: Grid
    tau: float
    K: np.ndarray
    log_pi: np.ndarray
    half_weighted_kernel: np.ndarray
    leak: float = 0.0
    irreversibility: float = 0.0
    potential: PotentialSpec | None = None

    @property
    def pi(self):
        return np.exp(self.log_pi)

    @property
    def mu(self):
        """Grid stationary density ``pi_g / w_g``."""
        return self.pi / self.grid.weights

    def detailed_balance_residual(self):
        F = self.pi[:, None] * self.K
        return float(np.abs(F - F.T).max() / np.abs(F).max())

    def power(self, k: int) -> "GridPropagator":
        """The ``k``-step propagator ``K^k`` (Chapman-Kolmogorov composition)."""
        if k < 1:
            raise ValueError("power must be >= 1")
        evals, V = linalg.eigh(self.half_weighted_kernel)
        Ak = (V * evals**k) @ V.T
        Ak = 0.5 * (Ak + Ak.T)
        Kk = Ak * np.exp(0.5 * (self.log_pi[None, :] - self.log_pi[:, None]))
        return GridPropagator(self.grid, self.tau * k, Kk, self.log_pi, Ak, self.leak, self.irreversibility, self.potential)


def _log_reference_density(p, grid):
    if p.kind is PotentialKind.FLAT:
        return np.full(grid.n, -math.log(grid.b - grid.a))
    return log_stationary_density(p, grid.nodes)


@numba.njit(cache=True)
def _gth(P):
    """In-place Grassmann-Taksar-Heyman elimination; returns unnormalized pi."""
    n = P.shape[0]
    for k in range(n - 1, 0, -1):
        s = 0.0
        for j in range(k):
            s += P[k, j]
        if not s > 0.0:
            return np.zeros(n)
        for i in range(k):
            P[i, k] /= s
        for i in range(k):
            f = P[i, k]
            if f != 0.0:
                for j in range(k):
                    P[i, j] += f * P[k, j]
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        acc = 0.0
        for i in range(k):
            acc += pi[i] * P[i, k]
        pi[k] = acc
    return pi


def _log_stationary_vector(K):
    """``ln pi`` for row-stochastic ``K`` by Grassmann-Taksar-Heyman elimination.

    The elimination uses no subtractions, so every entry of ``pi`` keeps full
    relative precision, including tail entries dozens of decades below the
    maximum that a direct linear solve would lose to absolute round-off.
    """
    pi = _gth(np.array(K, dtype=float, order="C"))
    if not np.all(np.isfinite(pi)) or np.any(~(pi > 0)):
        raise GridError("stationary vector of the grid kernel is not positive")
    log_pi = np.log(pi)
    top = log_pi.max()
    return log_pi - (top + math.log(np.exp(log_pi - top).sum()))


def build_grid_propagator(p: PotentialSpec, tau: float, grid: Grid | None = None, max_leak=1e-6, edge_tol=1e-10) -> GridPropagator:
    """Discretize the Euler transition density of ``p`` at lag ``tau``.

    Raises
    ------
    GridError
        If the stationary density at the grid ends exceeds ``edge_tol`` times
        its maximum, or if more than ``max_leak`` of the stationary mass
        leaves the grid in one step.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    grid = default_grid(p) if grid is None else grid
    x, w = grid.nodes, grid.weights
    logw = np.log(w)
    log_mu = _log_reference_density(p, grid)
    if p.kind is not PotentialKind.FLAT and max(log_mu[0], log_mu[-1]) > math.log(edge_tol) + log_mu.max():
        raise GridError(f"grid domain too small: stationary density at the ends exceeds {edge_tol:g} of its maximum")
    mean = x + tau * force(p, x)
    logP = -((x[None, :] - mean[:, None]) ** 2) / (4.0 * tau) - 0.5 * math.log(4.0 * math.pi * tau) + logw[None, :]
    rows = np.exp(logP).sum(axis=1)
    mass = np.exp(log_mu - log_mu.max()) * w
    leak = float(np.sum(mass * (1.0 - rows)) / mass.sum())
    if leak >= max_leak:
        raise GridError(f"grid domain too small for tau={tau:g} (off-grid leak {leak:.3g})")
    logK = logP - np.log(rows)[:, None]
    K = np.exp(logK)
    log_pi = _log_stationary_vector(K)
    Krev = 0.5 * (K + np.exp(log_pi[None, :] - log_pi[:, None] + logK.T))
    A = np.exp(0.5 * (log_pi[:, None] - log_pi[None, :]) + logK)
    A = 0.5 * (A + A.T)
    gp = GridPropagator(grid, float(tau), Krev, log_pi, A, leak, float(np.abs(Krev - K).max()), p)
    resid = gp.detailed_balance_residual()
    if resid > 1e-8:
        raise GridError(f"detailed-balance residual {resid:.3g} too large")
    return gp


@functools.lru_cache(maxsize=16)
def _cached_propagator(p, tau, grid):
    return build_grid_propagator(p, tau, grid)


@dataclass(frozen=True, eq=False)
class GridSpectrum:
    """Reference eigenpairs sampled on a grid.

    ``eigenfunctions[i]`` holds the half-weighted eigenfunction ``phi_i`` at
    the grid nodes, normalized so that ``sum_g phi_i(x_g)^2 w_g = 1``.
    """

    grid: Grid
    tau: float
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mu: np.ndarray

    def phi(self, i, x):
        """Half-weighted eigenfunction ``phi_i`` (``i = 1 .. k``), interpolated."""
        return np.interp(x, self.grid.nodes, self.eigenfunctions[i - 1], left=0.0, right=0.0)

    def r(self, i, x):
        """Weighted eigenfunction ``phi_i / sqrt(mu)`` (``i = 1 .. k``)."""
        return np.interp(x, self.grid.nodes, self.eigenfunctions[i - 1] / np.sqrt(self.mu))

    def timescales(self):
        return implied_timescales(self.eigenvalues, self.tau)

    def eigenvalues_at(self, tau):
        """Eigenvalues at lag ``tau``, a whole multiple of ``self.tau``."""
        k = tau / self.tau
        if abs(k - round(k)) > 1e-9 * max(1.0, k) or round(k) < 1:
            raise ValueError(f"lag {tau:g} is not a multiple of the reference lag {self.tau:g}")
        return self.eigenvalues ** int(round(k))

    def to_dict(self, full=True):
        d = {
            "kind": "reference",
            "tau": self.tau,
            "grid": self.grid.to_dict(),
            "eigenvalues": self.eigenvalues.tolist(),
        }
        if full:
            d["eigenfunctions"] = self.eigenfunctions.tolist()
            d["mu"] = self.mu.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "reference" or "eigenfunctions" not in d:
            raise ValueError("not a full reference spectrum record")
        g = d["grid"]
        grid = Grid(g["a"], g["b"], g["n"], g.get("rule", "trapezoid"))
        return cls(grid, float(d["tau"]), np.asarray(d["eigenvalues"], dtype=float),
                   np.asarray(d["eigenfunctions"], dtype=float), np.asarray(d["mu"], dtype=float))

    def eigenfunction_table(self, path=None):
        table = np.column_stack([self.grid.nodes, self.eigenfunctions.T])
        if path is not None:
            header = ",".join(["x"] + [f"phi{i + 1}" for i in range(self.eigenfunctions.shape[0])])
            np.savetxt(path, table, delimiter=",", fmt="%.17g", header=header, comments="")
        return table


def reference_spectrum(gp: GridPropagator, k: int = 4) -> GridSpectrum:
    """Top-``k`` eigenpairs of the grid propagator."""
    n = gp.grid.n
    if not 1 <= k <= n:
        raise ValueError("k must be between 1 and the grid size")
    evals, V = linalg.eigh(gp.half_weighted_kernel, subset_by_index=[n - k, n - 1])
    evals, V = evals[::-1], V[:, ::-1]
    V = fix_signs(V)
    phi = (V / np.sqrt(gp.grid.weights)[:, None]).T
    return GridSpectrum(gp.grid, gp.tau, evals, phi, gp.mu)


def grid_indicator_basis(gp: GridPropagator, edges) -> BasisSet:
    """Half-weighted indicator basis consistent with the grid quadrature.

    Bin weights are the grid stationary masses, and the half-weighting uses
    the grid density, so the basis is exactly orthonormal under the grid
    quadrature.
    """
    from .basis import bin_index

    edges = np.asarray(edges, dtype=float)
    idx = bin_index(edges, gp.grid.nodes)
    inside = idx >= 0
    weights = np.bincount(idx[inside], weights=gp.pi[inside], minlength=edges.size - 1)
    nodes, mu = gp.grid.nodes, gp.mu

    def density(x):
        return np.interp(x, nodes, mu, left=0.0, right=0.0)

    return BasisSet.indicator(edges, weights, density=density, potential=gp.potential, weight_source="grid")


def propagator_matrices(gp: GridPropagator, b: BasisSet):
    """Quadrature ``(H, S)`` of basis ``b`` against the grid propagator.

    ``h_ij = sum_gh chi_i(x_g) S(x_g, x_h) chi_j(x_h) w_g w_h`` with the
    half-weighted correlation density ``S``. The overlap ``S`` is the
    matching quadrature Gram matrix. Both are exactly symmetric.
    """
    sw = np.sqrt(gp.grid.weights)
    Phi = eval_basis(b, gp.grid.nodes) * sw
    H = Phi @ gp.half_weighted_kernel @ Phi.T
    S = Phi @ Phi.T
    return 0.5 * (H + H.T), 0.5 * (S + S.T)


def quadrature_H(p: PotentialSpec, b: BasisSet, tau: float, grid: Grid | None = None) -> np.ndarray:
    """Density matrix ``H`` of basis ``b`` by direct numerical integration.

    Indicator functions are re-normalized with the grid bin masses and grid
    density: nodal quadrature of a step function is only first-order
    accurate, enough to push the top eigenvalue visibly above one.
    """
    grid = default_grid(p) if grid is None else grid
    gp = _cached_propagator(p, float(tau), grid)
    if b.kind is BasisKind.INDICATOR:
        b = grid_indicator_basis(gp, b.edges)
    return propagator_matrices(gp, b)[0]
