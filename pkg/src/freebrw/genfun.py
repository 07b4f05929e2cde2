"""Generating functions of the random walk and the dimension roots.

Notation follows the usual free-product setup: ``F_i(x, y | w)`` is the
first-visit generating function of the factor walk ``mu_i``, ``xi_i(z)`` the
generating function of the first visit of ``Gamma_i^x`` by the free-product
walk, ``R`` the radius of convergence of the Green function, ``z*`` the
dimension root of the limit set and ``z*_S`` the one of the whole boundary.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import (ConvergenceError, DivergedAtW, InsufficientResolution,
                     InternalConsistencyError, TruncationDepthError, ValidationError)
from .group_model import FactorGroup, FreeProductSpec, Word

RESIDUAL_TOL = 1e-13
BRACKET_TOL = 1e-12
MAX_ITER = 100_000
DIVERGENCE_BOUND = 1e9
R_CAP = 2.0 ** 16
_DENSE_LIMIT = 400


# ---------------------------------------------------------------------------
# factor linear algebra

class _Resolvent:
    """Factorisation of ``I - w Q`` for repeated solves."""

    def __init__(self, Q, w, dense):
        m = Q.shape[0]
        if dense:
            self._lu = scipy.linalg.lu_factor(np.eye(m) - w * Q, check_finite=False)
            self._solve = lambda b, t: scipy.linalg.lu_solve(self._lu, b, trans=t, check_finite=False)
        else:
            A = (sparse.identity(m, format="csc") - w * Q).tocsc()
            lu = spla.splu(A)
            self._solve = lambda b, t: lu.solve(b, trans="T" if t else "N")

    def solve(self, b):
        return self._solve(b, 0)

    def solve_t(self, b):
        return self._solve(b, 1)


class _TargetSystem:
    """First-visit system of a factor for a fixed target element."""

    def __init__(self, factor: FactorGroup, target: int):
        P = factor.transition_matrix()
        keep = np.array([k for k in range(factor.order) if k != target])
        self.keep = keep
        self.dense = len(keep) <= _DENSE_LIMIT
        Q = P[keep][:, keep]
        self.b = np.asarray(P[keep][:, [target]].todense()).ravel()
        self.p = np.asarray(P[[target]][:, keep].todense()).ravel()
        if self.dense:
            self.Q = Q.toarray()
            rho = float(np.max(np.abs(np.linalg.eigvals(self.Q)))) if len(keep) else 0.0
        else:
            self.Q = Q.tocsr()
            rho = float(spla.eigsh(self.Q, k=1, which="LA", return_eigenvectors=False)[0])
        self.rho = rho
        self.w_max = math.inf if rho <= 0 else 1.0 / rho

    def resolvent(self, w):
        if w >= self.w_max * (1 - 1e-14):
            raise DivergedAtW(w, self.w_max)
        return _Resolvent(self.Q, w, self.dense)


@functools.lru_cache(maxsize=None)
def _target_system(factor: FactorGroup, target: int) -> _TargetSystem:
    return _TargetSystem(factor, target)


def factor_radius(factor: FactorGroup) -> float:
    """Radius of convergence of ``w -> F_i(s, e_i | w)``."""
    if factor.exact is not None:
        return factor.exact.radius
    return _target_system(factor, 0).w_max


class FactorFirstVisit:
    """First-visit generating functions of one factor at a point ``w``.

    ``to_identity[x] = F_i(x, e | w)`` and ``last_from_identity[x] =
    L_i(e, x | w)``, the generating function of paths from ``e`` to ``x``
    that never return to ``e``.  For finite groups the two coincide after
    inversion; for truncated factors they differ and both are kept.
    Factors with an exact model take every value from its closed forms.
    """

    def __init__(self, factor: FactorGroup, w: float):
        if w < 0:
            raise ValidationError("evaluation point must be nonnegative")
        self.factor = factor
        self.w = float(w)
        self._cols = {}
        if factor.exact is not None:
            self._init_exact(factor.exact)
            return
        sysm = _target_system(factor, 0)
        n = factor.order
        if w == 0:
            f = np.zeros(n - 1)
            df = sysm.b.copy()
            last = np.zeros(n - 1)
        else:
            res = sysm.resolvent(self.w)
            f = res.solve(self.w * sysm.b)
            df = res.solve(sysm.b + sysm.Q @ f)
            last = res.solve_t(self.w * sysm.p)
            if np.any(f < -1e-12) or np.any(last < -1e-12):
                raise DivergedAtW(self.w, sysm.w_max)
        self.to_identity = np.concatenate([[1.0], np.maximum(f, 0.0)])
        self.last_from_identity = np.concatenate([[1.0], np.maximum(last, 0.0)])
        self._dto = np.concatenate([[0.0], df])
        mu = factor.pmf
        self.phi = float(mu @ self.to_identity)
        self.dphi = float(mu @ self._dto)

    def _init_exact(self, model):
        if self.w > model.radius:
            raise DivergedAtW(self.w, model.radius)
        f = model.F(self.w)
        self.to_identity = f ** self.factor.lengths.astype(float)
        self.last_from_identity = self.to_identity
        self.phi = f
        self.dphi = model.dF(self.w)

    @property
    def U(self):
        """First-return generating function ``U_i(e, e | w)``."""
        return self.w * self.phi

    @property
    def G(self):
        """Green function ``G_i(e, e | w)``."""
        u = self.U
        if u >= 1:
            raise DivergedAtW(self.w, self.w)
        return 1.0 / (1.0 - u)

    def _column(self, y):
        if y == 0:
            return self.to_identity
        if y not in self._cols:
            f = self.factor
            if f.exact is not None:
                y_label = f.labels[y]
                d = [len(f._mul(f._inv(x), y_label)) for x in f.labels]
                col = self.phi ** np.array(d, dtype=float)
            elif f.is_finite:
                col = self.to_identity[f._table[f.inv[y]]] if f._table is not None else \
                    np.array([self.to_identity[f.mult(int(f.inv[y]), x)] for x in range(f.order)])
            else:
                sysm = _target_system(f, y)
                vals = sysm.resolvent(self.w).solve(self.w * sysm.b) if self.w > 0 else np.zeros(len(sysm.keep))
                if np.any(vals < -1e-12):
                    raise DivergedAtW(self.w, sysm.w_max)
                col = np.ones(f.order)
                col[sysm.keep] = np.maximum(vals, 0.0)
            self._cols[y] = col
        return self._cols[y]

    def first_visit(self, x, y):
        """``F_i(x, y | w)``."""
        return float(self._column(y)[x])

    def table(self):
        """Full matrix ``F_i(x, y | w)``, rows ``x``, columns ``y``."""
        return np.column_stack([self._column(y) for y in range(self.factor.order)])

    def from_identity(self):
        """``F_i(e, x | w)`` for every element ``x``."""
        f = self.factor
        if f.is_finite or f.exact is not None:
            return self.to_identity[f.inv]
        return np.array([self.first_visit(0, y) for y in range(f.order)])


@functools.lru_cache(maxsize=8192)
def factor_first_visit(factor: FactorGroup, w: float) -> FactorFirstVisit:
    return FactorFirstVisit(factor, float(w))


# ---------------------------------------------------------------------------
# the xi system

@dataclass(frozen=True)
class XiSolution:
    """Minimal nonnegative fixed point ``xi(z)``."""

    z: float
    xi: np.ndarray
    residual: float
    iterations: int
    converged: bool
    status: str
    method: str
    depths: tuple
    spec: FreeProductSpec = field(repr=False, compare=False)

    def require(self):
        if not self.converged:
            raise ConvergenceError(f"xi system at z={self.z!r}: {self.status}")
        return self

    @property
    def phi(self):
        """``phi_j(xi_j) = sum_s mu_j(s) F_j(s, e | xi_j)`` per factor."""
        return np.array([factor_first_visit(f, x).phi for f, x in zip(self.spec.factors, self.xi)])

    @property
    def green(self):
        """``G(e, e | z)`` of the free-product walk."""
        s = float(np.dot(self.spec.weights, self.phi))
        return 1.0 / (1.0 - self.z * s)


def _xi_map(spec, z, xi, derivative):
    alpha = spec.weights
    fv = [factor_first_visit(f, x) for f, x in zip(spec.factors, xi)]
    phi = np.array([v.phi for v in fv])
    wphi = alpha * phi
    den = 1.0 - z * (wphi.sum() - wphi)
    if np.any(den <= 0):
        raise DivergedAtW(z, math.nan)
    T = alpha * z / den
    if not derivative:
        return T, None
    dphi = np.array([v.dphi for v in fv])
    J = (alpha * z / den ** 2)[:, None] * (z * alpha * dphi)[None, :]
    np.fill_diagonal(J, 0.0)
    return T, J


def _solution(spec, z, xi, res, it, status, method):
    xi = np.array(xi, dtype=float)
    xi.setflags(write=False)
    return XiSolution(float(z), xi, float(res), it, status == "converged", status,
                      method, spec.depths, spec)


def _radii(spec):
    return np.array([factor_radius(f) for f in spec.factors])


def _xi_newton(spec, z, tol, max_iter):
    xi = np.zeros(spec.r)
    wmax = _radii(spec)
    res = math.inf
    for it in range(1, max_iter + 1):
        try:
            T, J = _xi_map(spec, z, xi, True)
        except DivergedAtW:
            return _solution(spec, z, xi, math.inf, it, "diverged", "newton")
        r = T - xi
        res = float(np.max(np.abs(r)))
        if res <= tol:
            return _solution(spec, z, xi, res, it, "converged", "newton")
        A = np.eye(spec.r) - J
        try:
            step = np.linalg.solve(A, r)
        except np.linalg.LinAlgError:
            return _solution(spec, z, xi, res, it, "diverged", "newton")
        if np.max(np.abs(np.linalg.eigvals(J))) >= 1 or np.any(step < -1e-12):
            # iterates below the least fixed point keep rho(J) < 1; otherwise none exists
            return _solution(spec, z, xi, res, it, "diverged", "newton")
        new = xi + np.maximum(step, 0.0)
        if np.any(new >= wmax) or np.any(new > DIVERGENCE_BOUND):
            return _solution(spec, z, new, math.inf, it, "diverged", "newton")
        if np.array_equal(new, xi):
            status = "converged" if res <= 1e3 * tol else "slow-convergence"
            return _solution(spec, z, xi, res, it, status, "newton")
        xi = new
    return _solution(spec, z, xi, res, max_iter, "slow-convergence", "newton")


def _xi_picard(spec, z, tol, max_iter):
    xi = np.zeros(spec.r)
    wmax = _radii(spec)
    growth = 0
    res = math.inf
    for it in range(1, max_iter + 1):
        try:
            T, _ = _xi_map(spec, z, xi, False)
        except DivergedAtW:
            return _solution(spec, z, xi, math.inf, it, "diverged", "picard")
        res = float(np.max(np.abs(T - xi)))
        if res <= tol:
            return _solution(spec, z, T, res, it, "converged", "picard")
        if np.any(T > DIVERGENCE_BOUND) or np.any(T >= wmax):
            return _solution(spec, z, T, math.inf, it, "diverged", "picard")
        rel = np.max(T / np.maximum(xi, 1e-300))
        growth = growth + 1 if it > 1 and rel > 10 else 0
        if growth >= 3:
            return _solution(spec, z, T, res, it, "diverged", "picard")
        xi = T
    return _solution(spec, z, xi, res, max_iter, "slow-convergence", "picard")


@functools.lru_cache(maxsize=4096)
def xi_solve(spec: FreeProductSpec, z: float, method="newton", tol=RESIDUAL_TOL,
             max_iter=None) -> XiSolution:
    """Minimal nonnegative solution of ``xi_i = alpha_i z / (1 - z sum_{j!=i} alpha_j phi_j(xi_j))``.

    Starts from ``xi = 0``.  ``method="newton"`` uses Newton steps, which for
    this monotone convex system stay below the least fixed point and converge
    to it whenever it exists; ``"picard"`` is the plain monotone iteration.
    The returned solution carries ``status`` in ``{"converged", "diverged",
    "slow-convergence"}``.
    """
    z = float(z)
    if z < 0:
        raise ValidationError("z must be nonnegative")
    if z == 0:
        return _solution(spec, 0.0, np.zeros(spec.r), 0.0, 0, "converged", method)
    if method == "newton":
        return _xi_newton(spec, z, tol, max_iter or 500)
    if method == "picard":
        return _xi_picard(spec, z, tol, max_iter or MAX_ITER)
    raise ValidationError(f"unknown method {method!r}")


def _converges(spec, z):
    return xi_solve(spec, z).converged


@dataclass(frozen=True)
class Radius:
    """Bracket ``lo < R <= hi``; ``value`` is the convergent end ``lo``."""

    lo: float
    hi: float

    @property
    def value(self):
        return self.lo

    @property
    def width(self):
        return self.hi - self.lo


@functools.lru_cache(maxsize=256)
def radius_R(spec: FreeProductSpec, tol=BRACKET_TOL, cap=R_CAP) -> Radius:
    """Radius of convergence ``R`` of the Green function, by bisection."""
    if not _converges(spec, 1.0):
        raise InternalConsistencyError("xi system does not converge at z = 1")
    lo, hi = 1.0, 2.0
    while _converges(spec, hi):
        lo, hi = hi, 2 * hi
        if hi > cap:
            raise ConvergenceError("R exceeds search cap")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _converges(spec, mid):
            lo = mid
        else:
            hi = mid
    if not lo > 1:
        raise InternalConsistencyError("radius of convergence must exceed 1")
    return Radius(lo, hi)


def green_identity_residuals(spec: FreeProductSpec, z: float) -> np.ndarray:
    """``|alpha_i z G(z) - xi_i G_i(xi_i)|`` per factor at a convergent ``z``."""
    sol = xi_solve(spec, z).require()
    G = sol.green
    out = []
    for i, f in enumerate(spec.factors):
        gi = factor_first_visit(f, sol.xi[i]).G
        out.append(abs(spec.weights[i] * z * G - sol.xi[i] * gi))
    return np.array(out)


# ---------------------------------------------------------------------------
# F-values and the series F_i^+

def _xi_at(spec, lam):
    sol = xi_solve(spec, float(lam))
    if not sol.converged:
        R = radius_R(spec)
        raise ConvergenceError(
            f"xi system {sol.status} at lambda={lam!r}; R lies in [{R.lo!r}, {R.hi!r}]")
    return sol


def f_word(spec: FreeProductSpec, xi: XiSolution, x: Word) -> float:
    """``F(e, x | lambda)`` as the product of factor first-visit values."""
    xi.require()
    val = 1.0
    for i, e in x.blocks:
        val *= factor_first_visit(spec.factors[i - 1], xi.xi[i - 1]).first_visit(0, e)
    return val


@dataclass(frozen=True)
class ScriptFPlus:
    """Series ``F_i^+(lambda | z) = sum_m H_i(m) z^m``.

    ``coeffs[m]`` is the sum of ``F(e, x | lambda)`` (finite factors) or of
    the last-exit values ``L^(d)`` (truncated factors) over the elements of
    length ``m``.  ``depth`` is ``None`` for finite factors.  Factors with an
    exact model carry the full series in ``closed`` and its radius.
    """

    factor_id: int
    lam: float
    coeffs: np.ndarray
    depth: int | None
    closed: object = field(default=None, repr=False, compare=False)
    radius: float = math.inf

    def __call__(self, z):
        if self.closed is not None:
            return self.closed(z)
        return np.polynomial.polynomial.polyval(z, self.coeffs)

    def fekete_radius(self):
        """Radius of the untruncated series (estimated for truncated factors)."""
        if self.closed is not None:
            return self.radius
        if self.depth is None:
            return math.inf
        top = max(1, self.depth // 2)
        c = self.coeffs[1: top + 1]
        m = np.arange(1, len(c) + 1)
        ok = c > 0
        if not ok.any():
            return math.inf
        return float(1.0 / np.min(c[ok] ** (1.0 / m[ok])))


def script_Fi_plus_series(spec: FreeProductSpec, lam: float, xi: XiSolution | None = None):
    """The series ``F_i^+(lambda | .)`` for every factor."""
    xi = (xi or _xi_at(spec, lam)).require()
    out = []
    for i, f in enumerate(spec.factors, start=1):
        fv = factor_first_visit(f, xi.xi[i - 1])
        vals = fv.last_from_identity if f.is_truncated else fv.from_identity()
        coeffs = np.bincount(f.lengths[1:], weights=vals[1:], minlength=int(f.lengths.max()) + 1)
        coeffs[0] = 0.0
        coeffs.setflags(write=False)
        if f.exact is not None:
            closed, radius = f.exact.sphere_series(xi.xi[i - 1])
            out.append(ScriptFPlus(i, float(lam), coeffs, f.depth, closed, radius))
        else:
            out.append(ScriptFPlus(i, float(lam), coeffs, f.depth))
    return out


def script_Fi_plus(spec: FreeProductSpec, lam: float, z: float, i: int | None = None):
    """``F_i^+(lambda | z)`` for factor ``i`` or, with ``i=None``, for all factors."""
    series = script_Fi_plus_series(spec, lam)
    if i is not None:
        return float(series[i - 1](z))
    return np.array([s(z) for s in series])


def _bisect_increasing(h, target, lo, hi, tol):
    """Root of the increasing function ``h = target`` in ``[lo, hi]``."""
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if h(mid) < target:
            lo = mid
        else:
            hi = mid
    return lo, hi


def _dimension_root(parts, radius, tol):
    """Root of ``sum_i p_i(z) / (1 + p_i(z)) = 1`` for increasing ``p_i`` with ``p_i(0)=0``."""
    def h(z):
        vals = np.array([p(z) for p in parts], dtype=float)
        with np.errstate(invalid="ignore"):
            return float(np.sum(np.where(np.isinf(vals), 1.0, vals / (1.0 + vals))))

    if math.isinf(radius):
        hi = 1.0
        while h(hi) <= 1.0:
            hi *= 2
            if hi > 2.0 ** 60:
                raise ConvergenceError("no-root: the dimension equation never exceeds 1")
        lo = 0.0
    else:
        lo, hi = 0.0, None
        for k in range(1, 60):
            b = radius * (1 - 2.0 ** -k)
            with np.errstate(all="ignore"):
                val = h(b)
            if val > 1.0:
                hi = b
                break
            lo = b
        if hi is None:
            raise ConvergenceError("no-root: the dimension equation never exceeds 1 below the series radius")
    lo, hi = _bisect_increasing(h, 1.0, lo, hi, tol)
    z = 0.5 * (lo + hi)
    return z, lo, hi, abs(h(z) - 1.0)


def z_star(spec: FreeProductSpec, lam: float, tol=BRACKET_TOL) -> float:
    """Dimension root ``z*(lambda)`` of ``sum_i F_i^+/(1 + F_i^+) = 1``."""
    return _z_star_details(spec, lam, tol)[0]


def _z_star_details(spec, lam, tol=BRACKET_TOL):
    if lam < 1:
        warnings.warn("z* is intended for lambda >= 1", RuntimeWarning, stacklevel=3)
    series = script_Fi_plus_series(spec, lam)
    radius = min(s.radius for s in series)
    return _dimension_root(series, radius, tol) + (series,)


def _sphere_series(f: FactorGroup, allow_truncated):
    if f.is_finite:
        counts = f.sphere_sizes().astype(float)
        counts[0] = 0.0
        return (lambda z, c=counts: np.polynomial.polynomial.polyval(z, c)), math.inf, False
    if f.sphere_tail is not None:
        return f.sphere_tail, f.tail_radius, False
    if not allow_truncated:
        raise TruncationDepthError(
            f"{f.name}: no closed-form sphere tail; pass allow_truncated=True to use the ball only")
    counts = f.sphere_sizes().astype(float)
    counts[0] = 0.0
    return (lambda z, c=counts: np.polynomial.polynomial.polyval(z, c)), math.inf, True


def z_star_S(spec: FreeProductSpec, tol=BRACKET_TOL, allow_truncated=False) -> float:
    """Root ``z*_S`` of ``sum_i S_i^+/(1 + S_i^+) = 1`` with the sphere series ``S_i^+``."""
    return _z_star_S_details(spec, tol, allow_truncated)[0]


def _z_star_S_details(spec, tol=BRACKET_TOL, allow_truncated=False):
    parts, radius, truncated = [], math.inf, False
    for f in spec.factors:
        p, rad, tr = _sphere_series(f, allow_truncated)
        parts.append(p)
        radius = min(radius, rad)
        truncated |= tr
    z, lo, hi, res = _dimension_root(parts, radius, tol)
    return z, lo, hi, res, truncated


def radius_Fi_plus(spec: FreeProductSpec, lam: float, i: int) -> float:
    """Radius of convergence of ``F_i^+(lambda | .)`` (estimate for truncated factors)."""
    return script_Fi_plus_series(spec, lam)[i - 1].fekete_radius()


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class DimensionReport:
    lam: float
    R: Radius
    regime: str
    z_star: float
    z_star_bracket: tuple
    z_star_S: float
    phi: float
    phi_raw: float
    hd_omega: float
    xi: tuple
    phase_flags: tuple
    radius_Fi_plus: tuple
    factor_bounds: tuple
    depths: tuple
    omega_truncated: bool
    checks: dict
    tolerances: dict

    def as_dict(self):
        return {
            "lambda": self.lam, "R": self.R.value, "regime": self.regime,
            "z_star": self.z_star, "z_star_S": self.z_star_S, "phi": self.phi,
            "hd_omega": self.hd_omega, "xi": list(self.xi),
            "phase_flags": list(self.phase_flags),
            "radius_Fi_plus": list(self.radius_Fi_plus),
            "factor_bounds": list(self.factor_bounds), "depths": list(self.depths),
            **{f"check_{k}": v for k, v in self.checks.items()},
        }


def _log_ratio(x, a):
    return math.log(x) / math.log(a)


def _phase_flags(spec, xi):
    return tuple(None if f.is_finite else bool(x > 1.0) for f, x in zip(spec.factors, xi))


def dimensions(spec: FreeProductSpec, lam: float, tol=BRACKET_TOL) -> DimensionReport:
    """``Phi(lambda) = log z* / log a`` together with ``HD(Omega)`` and diagnostics."""
    lam = float(lam)
    if lam < 1:
        raise ValidationError("lambda must be >= 1")
    a = spec.metric_base
    R = radius_R(spec)
    zs, zs_lo, zs_hi, zs_res, omega_trunc = _z_star_S_details(spec, tol, allow_truncated=True)
    hd = _log_ratio(zs, a)
    if lam > R.value and not xi_solve(spec, lam).converged:
        return DimensionReport(
            lam, R, "recurrent", math.nan, (math.nan, math.nan), zs, hd, hd, hd, (),
            tuple(None if f.is_finite else True for f in spec.factors), (), (), spec.depths,
            omega_trunc, {}, {"bracket": tol})
    z, lo, hi, res, series = _z_star_details(spec, lam, tol)
    raw = _log_ratio(z, a)
    phi = 0.0 if lam == 1.0 else max(raw, 0.0)
    xi = xi_solve(spec, lam)
    radii = tuple(s.fekete_radius() for s in series)
    bounds = tuple(max(0.0, _log_ratio(rr, a)) if math.isfinite(rr) else 0.0 for rr in radii)
    checks = {
        "root_residual": res,
        "below_Fi_radius": bool(all(z < rr for rr in radii)),
        "z_in_unit_interval": bool(0 < z < 1) if lam > 1 else True,
        "half_bound": bool(phi <= hd / 2 + 1e-9),
        "factor_bounds_below_phi": bool(phi == 0 or all(b < phi for b in bounds)),
    }
    return DimensionReport(
        lam, R, "transient", z, (lo, hi), zs, phi, raw, hd, tuple(xi.xi.tolist()),
        _phase_flags(spec, xi.xi), radii, bounds, spec.depths, omega_trunc, checks,
        {"residual": RESIDUAL_TOL, "bracket": tol})


@dataclass(frozen=True)
class PhaseReport:
    lam: float
    regime: str
    xi: tuple
    flags: tuple

    def describe(self, i):
        flag = self.flags[i - 1]
        if flag is None:
            return "finite"
        return "nonempty" if flag else "empty"


def phase_classify(spec: FreeProductSpec, lam: float) -> PhaseReport:
    """Whether the limit set meets the ends of each infinite factor."""
    lam = float(lam)
    if lam <= 1:
        raise ValidationError("lambda must be > 1")
    sol = xi_solve(spec, lam)
    if not sol.converged:
        flags = tuple(None if f.is_finite else True for f in spec.factors)
        return PhaseReport(lam, "recurrent", (), flags)
    return PhaseReport(lam, "transient", tuple(sol.xi.tolist()), _phase_flags(spec, sol.xi))


def xi_crossing(spec: FreeProductSpec, i: int, tol=1e-10):
    """``lambda`` in ``(1, R]`` where ``xi_i(lambda) = 1``, or ``None`` if ``xi_i(R) <= 1``."""
    R = radius_R(spec)
    if xi_solve(spec, R.value).xi[i - 1] <= 1.0:
        return None
    lo, hi = _bisect_increasing(lambda t: xi_solve(spec, t).xi[i - 1], 1.0, 1.0, R.value, tol)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    z_star: float
    phi: float
    hd_omega: float
    phase_flags: tuple
    R: float
    regime: str
    increasing: bool
    jump: bool

    def flags_text(self):
        return "".join("-" if f is None else ("1" if f else "0") for f in self.phase_flags)


def phi_sweep(spec: FreeProductSpec, grid, jump_factor=10.0) -> list:
    """Rows of ``Phi(lambda)`` on a sorted grid with monotonicity and jump diagnostics."""
    grid = [float(x) for x in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("grid must be strictly increasing")
    reports = [dimensions(spec, lam) for lam in grid]
    phis = [rep.phi for rep in reports]
    slopes = [(phis[k] - phis[k - 1]) / (grid[k] - grid[k - 1]) for k in range(1, len(grid))]
    rows = []
    for k, rep in enumerate(reports):
        inc = k == 0 or phis[k] > phis[k - 1]
        jump = False
        if 0 < k and rep.regime == "transient":
            nb = [slopes[j] for j in (k - 2, k) if 0 <= j < len(slopes)]
            if nb and slopes[k - 1] > jump_factor * max(max(nb), 0.0) > 0:
                jump = True
        rows.append(SweepRow(rep.lam, rep.z_star, rep.phi, rep.hd_omega, rep.phase_flags,
                             rep.R.value, rep.regime, inc, jump))
    return rows


@dataclass(frozen=True)
class ExponentFit:
    exponent: float
    intercept: float
    residual: float
    eps: np.ndarray
    gaps: np.ndarray


def fit_exponent(eps, gaps) -> ExponentFit:
    """Least-squares slope of ``log gap`` against ``log eps``."""
    eps = np.asarray(eps, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    if np.any(gaps <= 0):
        raise InsufficientResolution("nonpositive differences cannot be fitted on a log scale")
    x, y = np.log(eps), np.log(gaps)
    slope, icpt = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    return ExponentFit(float(slope), float(icpt), resid, eps, gaps)


def critical_exponent_fit(spec: FreeProductSpec, eps_grid=None, floor=1e-11) -> ExponentFit:
    """Exponent ``c`` in ``Phi(R) - Phi(R - eps) ~ C eps^c``."""
    R = radius_R(spec)
    if eps_grid is None:
        eps_grid = np.logspace(-3, -6, 10) * (R.value - 1)
    eps = np.asarray(sorted(eps_grid, reverse=True), dtype=float)
    if eps.max() / eps.min() < 100:
        raise ValidationError("eps grid must span at least two decades")
    if eps.min() < 1e3 * R.width:
        raise InsufficientResolution("eps grid reaches below the certified width of R")
    a = spec.metric_base
    phi_R = _log_ratio(z_star(spec, R.value), a)
    gaps = np.array([phi_R - _log_ratio(z_star(spec, R.value - e), a) for e in eps])
    if np.any(gaps < floor):
        raise InsufficientResolution("Phi(R) - Phi(lambda) below the numerical floor")
    return fit_exponent(eps, gaps)


@dataclass(frozen=True)
class TruncationTable:
    depths: tuple
    z: tuple
    gaps: tuple
    ratios: tuple


def truncation_convergence(spec: FreeProductSpec, depths, lam=1.0) -> TruncationTable:
    """``z*_d`` for truncation depths ``d``; strictly decreasing when a factor is approximated by its ball."""
    depths = tuple(int(d) for d in depths)
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValidationError("depths must be strictly increasing")
    # factors with an exact model do not depend on the depth
    approx = any(f.is_truncated and f.exact is None for f in spec.factors)
    zs = []
    for d in depths:
        zs.append(z_star(spec.with_depth(d), lam) if approx else z_star(spec, lam))
    gaps = tuple(a - b for a, b in zip(zs, zs[1:]))
    if approx and any(g <= 0 for g in gaps):
        raise InternalConsistencyError(f"z*_d is not strictly decreasing: {zs}")
    ratios = tuple(g2 / g1 if g1 else math.nan for g1, g2 in zip(gaps, gaps[1:]))
    return TruncationTable(depths, tuple(zs), gaps, ratios)
