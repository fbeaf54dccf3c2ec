"""Scalar basis sets for half-weighted eigenfunction models.

Basis functions model the half-weighted functions ``phi = l / sqrt(mu)``,
so every inner product between them is the plain (unweighted) L2 product.

Three families are available:

``indicator``
    ``chi_i(x) = 1_{[e_i, e_{i+1})}(x) sqrt(mu(x)) / sqrt(pi_i)`` where ``mu``
    is a stationary density (analytic or estimated) and
    ``pi_i = int_{bin i} mu``. Without a density the raw functions
    ``1_{bin i} / sqrt(pi_i)`` are returned (diagnostic mode).
``hermite``
    Normalized Hermite functions ``psi_0 .. psi_{n-1}``.
``gaussian``
    Unnormalized Gaussians ``exp(-(x - y_i)^2 / (2 sigma_i^2))``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .dynamics import PotentialSpec

__all__ = [
    "BasisKind",
    "BasisSet",
    "GridWarning",
    "eval_basis",
    "overlap_matrix_analytic",
    "overlap_matrix_quadrature",
    "hermite_functions",
    "gaussian_overlap",
]


class GridWarning(UserWarning):
    """Quadrature grid does not cover the support of the basis."""


class BasisKind(str, enum.Enum):
    INDICATOR = "indicator"
    HERMITE = "hermite"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True, eq=False)
class BasisSet:
    """An ordered family of scalar basis functions.

    Use the :meth:`indicator`, :meth:`hermite` and :meth:`gaussian`
    constructors rather than instantiating directly.
    """

    kind: BasisKind
    edges: np.ndarray | None = None
    weights: np.ndarray | None = None
    density: Callable | None = None
    n: int = 0
    centers: np.ndarray | None = None
    sigmas: np.ndarray | None = None
    potential: PotentialSpec | None = None
    weight_source: str | None = None

    def __len__(self):
        return self.size

    @property
    def size(self):
        if self.kind is BasisKind.INDICATOR:
            return self.edges.size - 1
        if self.kind is BasisKind.HERMITE:
            return self.n
        return self.centers.size

    @property
    def half_weighted(self):
        return self.kind is not BasisKind.INDICATOR or self.density is not None

    def __call__(self, x):
        return eval_basis(self, x)

    # -- constructors ----------------------------------------------------

    @classmethod
    def indicator(cls, edges, weights=None, density=None, potential=None, weight_source=None):
        """Indicator basis on the bins defined by ``edges``.

        Parameters
        ----------
        edges : array_like
            Strictly increasing bin edges.
        weights : array_like, optional
            Stationary bin probabilities ``pi_i``. If omitted they are
            integrated from ``density`` (or from ``potential``).
        density : callable, optional
            Stationary density used for half-weighting. Defaults to the
            stationary density of ``potential`` if one is given.
        potential : PotentialSpec, optional
            Source of the density and weights; stored for serialization.
        weight_source : str, optional
            Label recording where given ``weights`` came from (for example
            ``"estimated"``). Integrated weights are labelled ``"exact"``.
        """
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("indicator edges must be strictly increasing with at least two entries")
        if density is None and potential is not None:
            density = potential.density
        source = weight_source or "given"
        if weights is None:
            source = "exact"
            if density is None:
                raise ValueError("indicator weights need either weights, density or potential")
            weights = np.array([
                integrate.quad(density, a, b, epsabs=0.0, epsrel=1e-12, limit=200)[0]
                for a, b in zip(edges[:-1], edges[1:])
            ])
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (edges.size - 1,):
            raise ValueError("need one weight per bin")
        if np.any(~(weights > 0)):
            raise ValueError("all indicator weights must be positive")
        return cls(BasisKind.INDICATOR, edges=edges, weights=weights, density=density, potential=potential,
                   weight_source=source)

    @classmethod
    def hermite(cls, n):
        if n < 1:
            raise ValueError("need at least one Hermite function")
        return cls(BasisKind.HERMITE, n=int(n))

    @classmethod
    def gaussian(cls, centers, sigmas):
        centers = np.atleast_1d(np.asarray(centers, dtype=float))
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), centers.shape).copy()
        if centers.ndim != 1 or centers.size == 0:
            raise ValueError("need at least one Gaussian center")
        if np.any(~(sigmas > 0)):
            raise ValueError("Gaussian widths must be positive")
        pairs = set()
        for y, s in zip(centers, sigmas):
            if (y, s) in pairs:
                raise ValueError("singular overlap: duplicate Gaussian basis function")
            pairs.add((y, s))
        return cls(BasisKind.GAUSSIAN, centers=centers, sigmas=sigmas)

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        if self.kind is BasisKind.HERMITE:
            return {"kind": "hermite", "n": self.n}
        if self.kind is BasisKind.GAUSSIAN:
            return {"kind": "gaussian", "centers": self.centers.tolist(), "sigmas": self.sigmas.tolist()}
        d = {"kind": "indicator", "edges": self.edges.tolist(), "weights": self.weights.tolist(),
             "weight_source": self.weight_source}
        if self.potential is not None:
            d["potential"] = self.potential.to_dict()
        return d

    @classmethod
    def from_dict(cls, d, density=None):
        kind = BasisKind(d["kind"])
        if kind is BasisKind.HERMITE:
            return cls.hermite(d["n"])
        if kind is BasisKind.GAUSSIAN:
            return cls.gaussian(d["centers"], d["sigmas"])
        if "edges" in d:
            edges = d["edges"]
        else:
            edges = np.linspace(d["range"][0], d["range"][1], int(d["bins"]) + 1)
        potential = PotentialSpec.from_dict(d["potential"]) if d.get("potential") else None
        return cls.indicator(edges, d.get("weights"), density=density, potential=potential,
                             weight_source=d.get("weight_source"))


def hermite_functions(n, x):
    """Normalized Hermite functions ``psi_0 .. psi_{n-1}`` at ``x``.

    Uses the three-term recurrence on the functions themselves,
    ``psi_{k+1} = sqrt(2/(k+1)) x psi_k - sqrt(k/(k+1)) psi_{k-1}``, which
    avoids the overflow of evaluating polynomial and Gaussian separately.
    Returns an array of shape ``(n,) + x.shape``.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((n,) + x.shape)
    out[0] = math.pi**-0.25 * np.exp(-0.5 * x**2)
    if n > 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for k in range(1, n - 1):
        out[k + 1] = math.sqrt(2.0 / (k + 1)) * x * out[k] - math.sqrt(k / (k + 1)) * out[k - 1]
    return out


def eval_basis(b: BasisSet, x):
    """Evaluate all basis functions at ``x``.

    Returns shape ``(m,)`` for scalar ``x`` and ``(m, len(x))`` for arrays.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("positions must be finite")
    flat = np.atleast_1d(x).ravel()
    if b.kind is BasisKind.HERMITE:
        vals = hermite_functions(b.n, flat)
    elif b.kind is BasisKind.GAUSSIAN:
        vals = np.exp(-((flat[None, :] - b.centers[:, None]) ** 2) / (2.0 * b.sigmas[:, None] ** 2))
    else:
        vals = np.zeros((b.size, flat.size))
        idx = bin_index(b.edges, flat)
        inside = idx >= 0
        scale = 1.0 / np.sqrt(b.weights)
        if b.density is not None:
            amp = np.sqrt(np.asarray(b.density(flat[inside]), dtype=float))
        else:
            amp = 1.0
        vals[idx[inside], np.nonzero(inside)[0]] = scale[idx[inside]] * amp
    if x.ndim == 0:
        return vals[:, 0]
    return vals.reshape((b.size,) + x.shape)


def bin_index(edges, x):
    """Bin of each ``x`` for half-open bins, last bin closed; -1 outside."""
    edges = np.asarray(edges)
    idx = np.searchsorted(edges, x, side="right") - 1
    idx[x == edges[-1]] = edges.size - 2
    idx[(idx < 0) | (idx > edges.size - 2)] = -1
    return idx


def gaussian_overlap(c1, s1, c2, s2):
    """``int exp(-(x-c1)^2/(2 s1^2)) exp(-(x-c2)^2/(2 s2^2)) dx``."""
    v = np.asarray(s1) ** 2 + np.asarray(s2) ** 2
    return np.sqrt(2.0 * np.pi * s1**2 * s2**2 / v) * np.exp(-((np.asarray(c1) - c2) ** 2) / (2.0 * v))


def overlap_matrix_analytic(b: BasisSet, raw: bool = False) -> np.ndarray:
    """Closed-form overlap matrix ``S_ij = int chi_i chi_j dx``.

    For half-weighted indicator bases the overlap is the identity; with
    ``raw=True`` (or a basis without density) the unweighted indicator
    overlap ``diag(width_i / pi_i)`` is returned instead.
    """
    if b.kind is BasisKind.HERMITE:
        return np.eye(b.n)
    if b.kind is BasisKind.GAUSSIAN:
        c, s = b.centers, b.sigmas
        S = gaussian_overlap(c[:, None], s[:, None], c[None, :], s[None, :])
        S = 0.5 * (S + S.T)
        if np.linalg.matrix_rank(S) < S.shape[0]:
            raise np.linalg.LinAlgError("singular overlap")
        return S
    if raw or b.density is None:
        return np.diag(np.diff(b.edges) / b.weights)
    return np.eye(b.size)


def overlap_matrix_quadrature(b: BasisSet, grid, tol: float = 1e-10) -> np.ndarray:
    """Overlap matrix by quadrature on ``grid`` (an oracle for the closed forms).

    Emits :class:`GridWarning` when a basis function exceeds ``tol`` in
    magnitude at either end of the grid.
    """
    vals = eval_basis(b, grid.nodes)
    edge = np.abs(vals[:, [0, -1]]).max()
    if edge > tol:
        warnings.warn(f"grid too narrow: basis value {edge:.3g} at the boundary", GridWarning, stacklevel=2)
    weighted = vals * grid.weights
    S = weighted @ vals.T
    return 0.5 * (S + S.T)
