"""Ritz and Roothaan-Hall eigensolvers and spectral models."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .basis import BasisSet, eval_basis

__all__ = [
    "SpectralModel",
    "ritz_solve",
    "roothaan_hall_solve",
    "implied_timescale",
    "implied_timescales",
    "eval_model",
    "fix_signs",
]


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Eigenvalues and expansion coefficients of an eigenfunction model.

    Attributes
    ----------
    eigenvalues : (k,) ndarray
        Sorted non-ascending.
    coefficients : (m, k) ndarray
        Column ``i`` holds the expansion of the ``i``-th half-weighted
        eigenfunction in the basis.
    basis : BasisSet or None
    tau : float or None
        Lag time in physical units.
    solver : str
    metadata : dict
        Diagnostics such as the retained rank, the overlap condition number,
        the pencil residual and eigenvalue flags.
    """

    eigenvalues: np.ndarray
    coefficients: np.ndarray
    basis: BasisSet | None = None
    tau: float | None = None
    solver: str = "ritz"
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.eigenvalues.size

    @property
    def timescales(self):
        if self.tau is None:
            raise ValueError("model has no lag time")
        return implied_timescales(self.eigenvalues, self.tau)

    def __call__(self, i, x, unweighted=False):
        return eval_model(self, i, x, unweighted=unweighted)

    def to_dict(self):
        return {
            "solver": self.solver,
            "tau": self.tau,
            "eigenvalues": self.eigenvalues.tolist(),
            "coefficients": self.coefficients.tolist(),
            "basis": None if self.basis is None else self.basis.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        basis = None if d.get("basis") is None else BasisSet.from_dict(d["basis"])
        return cls(
            np.asarray(d["eigenvalues"], dtype=float),
            np.asarray(d["coefficients"], dtype=float),
            basis,
            d.get("tau"),
            d.get("solver", "ritz"),
            d.get("metadata", {}),
        )

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def eigenfunction_table(self, x, path=None):
        """Rows ``(x, phi_1(x), phi_2(x), ...)``; written as CSV if ``path``."""
        x = np.asarray(x, dtype=float)
        vals = self.coefficients.T @ eval_basis(self.basis, x)
        table = np.column_stack([x, vals.T])
        if path is not None:
            header = ",".join(["x"] + [f"phi{i + 1}" for i in range(vals.shape[0])])
            np.savetxt(path, table, delimiter=",", fmt="%.17g", header=header, comments="")
        return table


def fix_signs(vectors, rtol=1e-6):
    """Flip columns so each column's largest-magnitude entry is positive.

    Near-ties (within ``rtol`` of the maximum, as for odd eigenfunctions on a
    symmetric grid) are resolved towards the last such entry so the choice
    does not hinge on round-off.
    """
    vectors = np.array(vectors, dtype=float)
    mag = np.abs(vectors)
    near = mag >= (1.0 - rtol) * mag.max(axis=0)
    idx = vectors.shape[0] - 1 - np.argmax(near[::-1], axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _check_square(name, M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def _symmetrize(name, M, tol):
    scale = max(np.abs(M).max(), 1.0)
    asym = np.abs(M - M.T).max()
    if asym > tol * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3g})")
    return 0.5 * (M + M.T)


def _flags(evals):
    flags = {}
    above = np.nonzero(evals > 1.0)[0]
    negative = np.nonzero(evals < 0.0)[0]
    if above.size:
        flags["above_one"] = above.tolist()
    if negative.size:
        flags["negative"] = negative.tolist()
    return flags


def _sorted_eigh(A):
    evals, vecs = linalg.eigh(A)
    order = np.argsort(evals, kind="stable")[::-1]
    return evals[order], vecs[:, order]


def ritz_solve(H, basis=None, tau=None, sym_tol=1e-8) -> SpectralModel:
    """Solve ``H B = B Lambda`` for an orthonormal basis."""
    H = _symmetrize("H", _check_square("H", H), sym_tol)
    evals, B = _sorted_eigh(H)
    B = fix_signs(B)
    meta = {"retained_rank": H.shape[0], "flags": _flags(evals)}
    return SpectralModel(evals, B, basis, tau, "ritz", meta)


def _banded_cholesky(S, cutoff):
    """Lower Cholesky factor of ``S`` after zeroing entries below ``cutoff``.

    Uses banded storage when the thresholded matrix is banded enough to
    benefit; returns a dense lower-triangular factor either way.
    """
    Sc = np.where(np.abs(S) < cutoff, 0.0, S)
    m = Sc.shape[0]
    rows, cols = np.nonzero(Sc)
    bw = int(np.abs(rows - cols).max()) if rows.size else 0
    if bw >= m // 2:
        return linalg.cholesky(Sc, lower=True), bw
    ab = np.zeros((bw + 1, m))
    for k in range(bw + 1):
        ab[k, : m - k] = np.diagonal(Sc, -k)
    cb = linalg.cholesky_banded(ab, lower=True)
    L = np.zeros_like(Sc)
    for k in range(bw + 1):
        L += np.diag(cb[k, : m - k], -k)
    return L, bw


def roothaan_hall_solve(H, S, basis=None, tau=None, rank_tol=1e-10, cutoff=1e-12, sym_tol=1e-8) -> SpectralModel:
    """Solve the symmetric-definite pencil ``H B = S B Lambda``.

    ``S`` is reduced by Cholesky factorization ``S = L L^T`` and the
    symmetric problem ``L^-1 H L^-T`` is solved. If ``S`` is not positive
    definite to relative precision ``rank_tol``, eigendirections of ``S``
    below ``rank_tol * max(eig S)`` are dropped and the pencil is solved in
    the retained subspace; the retained rank is reported in the metadata.

    Parameters
    ----------
    cutoff : float or None
        Overlap entries with magnitude below ``cutoff`` are treated as zero
        and a banded factorization is used when possible. ``None`` keeps
        every entry.
    """
    H = _symmetrize("H", _check_square("H", H), sym_tol)
    S = _symmetrize("S", _check_square("S", S), sym_tol)
    if H.shape != S.shape:
        raise ValueError("H and S must have the same shape")
    m = H.shape[0]
    s_evals, s_vecs = linalg.eigh(S)
    smax = s_evals[-1]
    if not smax > 0:
        raise np.linalg.LinAlgError("overlap matrix has no positive eigenvalues")
    meta = {"overlap_condition": float(smax / s_evals[0]) if s_evals[0] > 0 else math.inf}
    if s_evals[0] > rank_tol * smax:
        if cutoff is not None:
            L, bw = _banded_cholesky(S, cutoff)
            meta["cutoff"] = cutoff
            meta["bandwidth"] = bw
        else:
            L = linalg.cholesky(S, lower=True)
        tmp = linalg.solve_triangular(L, H, lower=True)
        A = linalg.solve_triangular(L, tmp.T, lower=True)
        A = 0.5 * (A + A.T)
        evals, V = _sorted_eigh(A)
        B = linalg.solve_triangular(L.T, V, lower=False)
        meta["retained_rank"] = m
    else:
        keep = s_evals > rank_tol * smax
        X = s_vecs[:, keep] / np.sqrt(s_evals[keep])
        A = X.T @ H @ X
        A = 0.5 * (A + A.T)
        evals, V = _sorted_eigh(A)
        B = X @ V
        meta["retained_rank"] = int(keep.sum())
        warnings.warn(f"overlap matrix rank-deficient; solved in rank-{keep.sum()} subspace", RuntimeWarning, stacklevel=2)
    B = fix_signs(B)
    resid = np.abs(H @ B - S @ B * evals).max()
    meta["pencil_residual"] = float(resid / max(np.abs(H).max(), np.finfo(float).tiny))
    meta["flags"] = _flags(evals)
    return SpectralModel(evals, B, basis, tau, "roothaan-hall", meta)


# eigenvalues this close to 1 are 1 up to rounding
_UNIT_TOL = 4 * np.finfo(float).eps


def implied_timescale(lam, tau):
    """Implied timescale ``-tau / ln(lambda)``.

    Returns ``inf`` for ``lambda >= 1`` (no decay), including eigenvalues
    within a few ulps below 1.

    Raises
    ------
    ValueError
        For ``lambda <= 0``.
    """
    lam = float(lam)
    if not lam > 0:
        raise ValueError("negative eigenvalue has no implied timescale")
    if lam >= 1.0 - _UNIT_TOL:
        return math.inf
    return -tau / math.log(lam)


def implied_timescales(eigenvalues, tau):
    """Vectorized :func:`implied_timescale`; ``nan`` where ``lambda <= 0``."""
    lam = np.asarray(eigenvalues, dtype=float)
    out = np.full(lam.shape, np.nan)
    pos = lam > 0
    with np.errstate(divide="ignore"):
        out[pos] = -tau / np.log(lam[pos])
    out[lam >= 1.0 - _UNIT_TOL] = np.inf
    return out


def eval_model(model: SpectralModel, i: int, x, unweighted=False, threshold=1e-12):
    """Evaluate the ``i``-th model eigenfunction at ``x`` (``i = 1 .. m``).

    Returns the half-weighted function ``phi_i = sum_j B_ji chi_j``. With
    ``unweighted=True`` returns ``phi_i / phi_1`` instead, which is only
    defined where ``|phi_1|`` exceeds ``threshold``.
    """
    if not 1 <= i <= model.coefficients.shape[1]:
        raise IndexError(f"eigenfunction index {i} out of range 1..{model.coefficients.shape[1]}")
    chi = eval_basis(model.basis, x)
    phi = np.tensordot(model.coefficients[:, i - 1], chi, axes=1)
    if not unweighted:
        return phi
    phi1 = np.tensordot(model.coefficients[:, 0], chi, axes=1)
    if np.any(np.abs(phi1) < threshold):
        raise ValueError("undefined outside density support")
    return phi / phi1
