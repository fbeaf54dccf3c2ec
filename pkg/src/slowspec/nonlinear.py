"""Nonlinear two-parameter ansatz for the second half-weighted eigenfunction.

The ansatz is the odd Gaussian pair

    phi_2(x) = (gh(x, y, s) - gh(x, -y, s)) / Z,   gh(x, a, s) = exp(-(x - a)^2 / (2 s^2))

which is orthogonal to the even first eigenfunction of a symmetric double
well. Its parameters are chosen by maximizing the Rayleigh coefficient, which
is bounded above by the true second eigenvalue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .dynamics import PotentialSpec
from .reference import Grid, GridPropagator, _cached_propagator, default_grid

__all__ = [
    "AntisymmetricAnsatz",
    "ScanResult",
    "eval_ansatz",
    "ansatz_rayleigh",
    "rayleigh_quotient",
    "scan_ansatz",
    "optimize_ansatz",
]


@dataclass(frozen=True)
class AntisymmetricAnsatz:
    """Normalized odd Gaussian pair with center ``y`` and width ``s``."""

    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("ansatz width must be positive")
        if not math.isfinite(self.center):
            raise ValueError("ansatz center must be finite")
        if self.norm < 1e-12:
            raise ValueError("degenerate ansatz")

    @property
    def norm(self):
        """``Z = ||gh(., y, s) - gh(., -y, s)||_2`` in closed form."""
        y, s = self.center, self.width
        # int gh(y)^2 = s sqrt(pi), int gh(y) gh(-y) = s sqrt(pi) exp(-y^2/s^2)
        return math.sqrt(2.0 * s * math.sqrt(math.pi) * -math.expm1(-(y / s) ** 2))

    def __call__(self, x):
        return eval_ansatz(self, x)


def _pair(x, y, s):
    return np.exp(-((x - y) ** 2) / (2.0 * s * s)) - np.exp(-((x + y) ** 2) / (2.0 * s * s))


def eval_ansatz(a: AntisymmetricAnsatz, x):
    """Normalized ansatz values; exactly odd in ``x``."""
    x = np.asarray(x, dtype=float)
    return _pair(x, a.center, a.width) / a.norm


def rayleigh_quotient(gp: GridPropagator, phi_values) -> np.ndarray:
    """Quadrature Rayleigh quotient of half-weighted functions on the grid.

    ``phi_values`` holds one function per row (or a single vector) sampled at
    the grid nodes. The quotient is normalized by the quadrature norm, so the
    inputs need not be normalized.
    """
    V = np.atleast_2d(np.asarray(phi_values, dtype=float)) * np.sqrt(gp.grid.weights)
    num = np.einsum("ij,ij->i", V @ gp.half_weighted_kernel, V)
    den = np.einsum("ij,ij->i", V, V)
    out = num / den
    return out if np.ndim(phi_values) > 1 else float(out[0])


def _propagator(p, tau, grid):
    return _cached_propagator(p, float(tau), default_grid(p) if grid is None else grid)


def ansatz_rayleigh(a: AntisymmetricAnsatz, p: PotentialSpec, tau: float, grid: Grid | None = None) -> float:
    """Rayleigh coefficient of the ansatz for the grid propagator of ``p``."""
    gp = _propagator(p, tau, grid)
    return rayleigh_quotient(gp, eval_ansatz(a, gp.grid.nodes))


@dataclass(frozen=True, eq=False)
class ScanResult:
    """Outcome of :func:`optimize_ansatz`.

    ``center``, ``width`` and ``value`` describe the best refined maximum;
    ``local_maxima`` lists every refined local maximum of the scan as
    ``(center, width, value)``, best first. Unpacks as
    ``(center, width, value)``.
    """

    center: float
    width: float
    value: float
    centers: np.ndarray
    widths: np.ndarray
    surface: np.ndarray
    local_maxima: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.center, self.width, self.value))

    def to_csv(self, path):
        """Write the scan surface as rows ``y2,s2,rayleigh``."""
        Y, S = np.meshgrid(self.centers, self.widths, indexing="ij")
        table = np.column_stack([Y.ravel(), S.ravel(), self.surface.ravel()])
        np.savetxt(path, table, delimiter=",", fmt="%.17g", header="y2,s2,rayleigh", comments="")
        return Path(path)

    def to_dict(self):
        return {
            "center": self.center,
            "width": self.width,
            "rayleigh": self.value,
            "local_maxima": [list(m) for m in self.local_maxima],
        }


def scan_ansatz(p: PotentialSpec, tau: float, grid: Grid | None, centers, widths) -> np.ndarray:
    """Rayleigh coefficients on the ``centers x widths`` parameter grid.

    Degenerate points (``y = 0``) are ``nan``.
    """
    gp = _propagator(p, tau, grid)
    x = gp.grid.nodes
    out = np.full((len(centers), len(widths)), np.nan)
    for i, y in enumerate(centers):
        rows, cols = [], []
        for j, s in enumerate(widths):
            try:
                a = AntisymmetricAnsatz(float(y), float(s))
            except ValueError:
                continue
            rows.append(eval_ansatz(a, x))
            cols.append(j)
        if rows:
            out[i, cols] = rayleigh_quotient(gp, np.array(rows))
    return out


def _local_maxima(Z, prominence):
    """Indices of scan points not below any 8-neighbour and above the lowest by ``prominence``."""
    n, m = Z.shape
    found = []
    for i in range(n):
        for j in range(m):
            v = Z[i, j]
            if not np.isfinite(v):
                continue
            nb = Z[max(i - 1, 0): i + 2, max(j - 1, 0): j + 2]
            nb = nb[np.isfinite(nb)]
            if v >= nb.max() and v - nb.min() > prominence:
                found.append((i, j))
    return found


def _refine(f, y, s, y_bounds, s_bounds, dy, ds, tol, max_sweeps=50):
    """Cyclic coordinate ascent with bounded 1D searches in a moving window."""
    val = f(y, s)
    for _ in range(max_sweeps):
        y_old, s_old = y, s
        lo, hi = max(y_bounds[0], y - 2 * dy), min(y_bounds[1], y + 2 * dy)
        r = optimize.minimize_scalar(lambda t: -f(t, s), bounds=(lo, hi), method="bounded", options={"xatol": tol})
        if -r.fun > val:
            y, val = float(r.x), -float(r.fun)
        lo, hi = max(s_bounds[0], s - 2 * ds), min(s_bounds[1], s + 2 * ds)
        r = optimize.minimize_scalar(lambda t: -f(y, t), bounds=(lo, hi), method="bounded", options={"xatol": tol})
        if -r.fun > val:
            s, val = float(r.x), -float(r.fun)
        if abs(y - y_old) < tol and abs(s - s_old) < tol:
            break
    return y, s, val


def optimize_ansatz(
    p: PotentialSpec,
    tau: float,
    grid: Grid | None = None,
    y_range=(0.2, 3.0),
    s_range=(0.2, 3.0),
    n_scan: int = 41,
    tol: float = 1e-4,
    prominence: float = 1e-9,
) -> ScanResult:
    """Maximize the ansatz Rayleigh coefficient by scan and local refinement.

    A regular ``n_scan x n_scan`` scan over the parameter ranges locates the
    local maxima; each is refined by coordinate-wise bounded line searches to
    ``tol`` in both parameters. All refined maxima are reported because the
    surface can have several.
    """
    for name, (lo, hi) in (("y_range", y_range), ("s_range", s_range)):
        if not (lo < hi):
            raise ValueError(f"{name} must be ordered (lo < hi)")
    if not s_range[0] > 0:
        raise ValueError("s_range must be positive")
    if n_scan < 3:
        raise ValueError("n_scan must be >= 3")
    ys = np.linspace(y_range[0], y_range[1], n_scan)
    ss = np.linspace(s_range[0], s_range[1], n_scan)
    Z = scan_ansatz(p, tau, grid, ys, ss)
    if not np.any(np.isfinite(Z)):
        raise ValueError("all scan points are degenerate")
    gp = _propagator(p, tau, grid)
    x = gp.grid.nodes

    def f(y, s):
        try:
            a = AntisymmetricAnsatz(y, s)
        except ValueError:
            return -np.inf
        return rayleigh_quotient(gp, eval_ansatz(a, x))

    dy, ds = ys[1] - ys[0], ss[1] - ss[0]
    peaks = _local_maxima(Z, prominence) or [np.unravel_index(np.nanargmax(Z), Z.shape)]
    maxima = []
    for i, j in peaks:
        y, s, v = _refine(f, float(ys[i]), float(ss[j]), y_range, s_range, dy, ds, tol)
        maxima.append((y, s, v))
    maxima.sort(key=lambda m: -m[2])
    # plateau neighbours refine to the same peak
    unique = []
    for m in maxima:
        if all(abs(m[0] - u[0]) > 0.5 * dy or abs(m[1] - u[1]) > 0.5 * ds for u in unique):
            unique.append(m)
    maxima = unique
    best = maxima[0]
    return ScanResult(best[0], best[1], best[2], ys, ss, Z, maxima)
