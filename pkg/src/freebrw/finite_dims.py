"""Dimensions under the block metric for free products of finite groups.

Both dimensions are ``-log(eigenvalue) / log a`` for the Perron-Frobenius
eigenvalue of an ``r x r`` matrix with zero diagonal whose ``(i, j)`` entry
(``i != j``) depends only on the column factor ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConvergenceError, ValidationError
from .genfun import radius_R, script_Fi_plus_series, xi_solve
from .group_model import FreeProductSpec

PF_TOL = 1e-12
PF_MAX_ITER = 100_000


@dataclass(frozen=True)
class PFMatrix:
    """Nonnegative matrix tagged ``"M"`` (walk entries) or ``"D"`` (counting entries)."""

    values: np.ndarray
    role: str = "M"

    def __post_init__(self):
        m = np.array(self.values, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("PFMatrix must be square")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValidationError("PFMatrix entries must be finite and nonnegative")
        if self.role not in ("M", "D"):
            raise ValidationError(f"unknown role {self.role!r}")
        m.setflags(write=False)
        object.__setattr__(self, "values", m)

    @classmethod
    def from_columns(cls, col, role="M"):
        """Zero-diagonal matrix with ``m[i, j] = col[j]`` off the diagonal."""
        col = np.asarray(col, dtype=float)
        m = np.tile(col, (len(col), 1))
        np.fill_diagonal(m, 0.0)
        return cls(m, role)

    @property
    def size(self):
        return self.values.shape[0]


def is_irreducible(m) -> bool:
    a = np.asarray(m) > 0
    if a.shape[0] == 1:
        return bool(a[0, 0])
    n, _ = connected_components(a.astype(np.int8), directed=True, connection="strong")
    return n == 1


def _balance(a, sweeps=50):
    """Diagonal ``d`` making ``diag(1/d) a diag(d)`` roughly balanced (Osborne's scheme)."""
    n = a.shape[0]
    d = np.ones(n)
    off = a * (1 - np.eye(n))
    for _ in range(sweeps):
        changed = False
        for i in range(n):
            # column and row sums of entry i in diag(1/d) a diag(d)
            col = float(np.sum(off[:, i] / d)) * d[i]
            row = float(np.sum(off[i, :] * d)) / d[i]
            if col > 0 and row > 0:
                f = math.sqrt(row / col)
                if abs(f - 1) > 1e-3:
                    d[i] *= f
                    changed = True
        if not changed:
            break
    return d


def pf_eigenvalue(m: PFMatrix, tol=PF_TOL, max_iter=PF_MAX_ITER):
    """Perron-Frobenius eigenvalue and positive eigenvector (max entry 1).

    The matrix is first balanced by a diagonal similarity.  Power iteration on
    ``(A + I)/2`` (same eigenvector, aperiodic) starts from the all-ones vector
    and stops once successive Rayleigh quotients agree to ``tol`` and the
    eigen-residual is below ``tol`` as well.
    """
    if not isinstance(m, PFMatrix):
        m = PFMatrix(m)
    a = m.values
    if not is_irreducible(a):
        raise ValidationError("matrix is reducible")
    n = a.shape[0]
    d = _balance(a)
    ab = a * d[None, :] / d[:, None]
    scale = float(ab.max())
    b = 0.5 * (ab / scale + np.eye(n))
    v = np.ones(n) / math.sqrt(n)
    prev = -1.0
    for _ in range(max_iter):
        w = b @ v
        rq = float(v @ w)
        if abs(rq - prev) <= tol * abs(rq) and np.linalg.norm(w - rq * v) <= tol * abs(rq):
            break
        prev = rq
        v = w / np.linalg.norm(w)
    else:
        raise ConvergenceError("power iteration did not converge")
    v = v * d
    v = v / v.max()
    lam = float(np.dot(a @ v, v) / np.dot(v, v))
    return lam, v


@dataclass(frozen=True)
class FinDimensions:
    lam: float
    hd_lambda: float
    hd_omega: float
    theta: float
    rho: float
    M: PFMatrix
    D: PFMatrix
    xi_at_R: tuple
    xi_R_below_one: bool

    def as_dict(self):
        return {
            "lambda": self.lam, "HD_fin_Lambda": self.hd_lambda, "HD_fin_Omega": self.hd_omega,
            "theta": self.theta, "rho": self.rho, "xi_R_below_one": self.xi_R_below_one,
        }


def hd_fin(spec: FreeProductSpec, lam: float) -> FinDimensions:
    """``(HD^fin(Lambda), HD^fin(Omega))`` from the Perron-Frobenius eigenvalues."""
    if spec.has_truncated or not all(f.is_finite for f in spec.factors):
        raise ValidationError(
            "block-metric dimensions need finite factors; use genfun.dimensions for the word-length metric")
    R = radius_R(spec).value
    if lam <= 0 or lam > R:
        raise ValidationError(f"lambda={lam} outside (0, R={R}]")
    series = script_Fi_plus_series(spec, lam)
    M = PFMatrix.from_columns([s(1.0) for s in series], "M")
    D = PFMatrix.from_columns([f.order - 1 for f in spec.factors], "D")
    theta, _ = pf_eigenvalue(M)
    rho, _ = pf_eigenvalue(D)
    a = spec.metric_base
    xi_R = xi_solve(spec, R).xi
    return FinDimensions(
        lam=float(lam),
        hd_lambda=-math.log(theta) / math.log(a),
        hd_omega=-math.log(rho) / math.log(a),
        theta=theta, rho=rho, M=M, D=D,
        xi_at_R=tuple(float(v) for v in xi_R),
        xi_R_below_one=bool(np.all(xi_R < 1.0)),
    )
