"""Free products of finite groups amalgamated over a common subgroup ``H``.

Elements are stored in normal form ``x_1 ... x_n h``: each ``x_k`` is a
non-trivial coset representative of some factor (consecutive factors
differ) and ``h`` is an element of the abstract group ``H``.  Factor
elements and elements of ``H`` are integer indices into multiplication
tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DivergedAtW, ValidationError
from .finite_dims import PFMatrix, pf_eigenvalue
from .group_model import FactorGroup

FH_TOL = 1e-14
FH_MAX_ITER = 200
FH_DIVERGENCE = 1e6
FH_FLOOR = 1e-11


def _table_of(group):
    if isinstance(group, FactorGroup):
        if group.is_truncated:
            raise ValidationError("amalgams need finite factors")
        n = group.order
        return np.array([[group.mult(x, y) for y in range(n)] for x in range(n)], dtype=np.int64)
    table = np.asarray(group, dtype=np.int64)
    if table.ndim != 2 or table.shape[0] != table.shape[1]:
        raise ValidationError("subgroup table must be square")
    return table


@dataclass(frozen=True)
class AmalgamWord:
    """Normal form ``x_1 ... x_n h``; ``blocks`` holds ``(factor, representative)`` pairs."""

    blocks: tuple
    h: int
    spec: "AmalgamSpec" = field(repr=False, compare=False, hash=False)

    @property
    def block_length(self):
        return len(self.blocks)

    def __mul__(self, other):
        return self.spec.multiply(self, other)


class AmalgamSpec:
    """``Gamma_1 *_H ... *_H Gamma_r`` with the lifted step distribution.

    Parameters
    ----------
    factors : list of FactorGroup
        Finite factor groups with symmetric step distributions ``mu_i``.
    subgroup : array-like
        Multiplication table of ``H`` (identity at index 0).
    embeddings : list of sequences
        ``embeddings[i][h]`` is the index of ``phi_i(h)`` in factor ``i``.
    weights : sequence
        Mixing weights ``alpha_i``.
    transversals : list of sequences, optional
        Coset representatives per factor; the default takes the minimal
        element index of every left coset ``x H_i``.
    """

    def __init__(self, factors, subgroup, embeddings, weights, metric_base=0.5, *,
                 transversals=None, name=""):
        self.name = name
        self.factors = list(factors)
        r = len(self.factors)
        if r < 2:
            raise ValidationError("need at least two factors")
        w = np.asarray(weights, dtype=float)
        if w.shape != (r,) or np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValidationError("weights must be positive and sum to 1")
        if not 0 < metric_base < 1:
            raise ValidationError("metric base must lie in (0, 1)")
        self.r = r
        self.weights = w
        self.metric_base = float(metric_base)
        self.H = _table_of(subgroup)
        nh = self.H.shape[0]
        if not np.array_equal(self.H[0], np.arange(nh)):
            raise ValidationError("subgroup identity must be index 0")
        self.tables = [_table_of(f) for f in self.factors]
        for i, f in enumerate(self.factors, 1):
            if not f.symmetric:
                raise ValidationError(f"factor {i}: step distribution must be symmetric")
        self.phi = [np.asarray(e, dtype=np.int64) for e in embeddings]
        if len(self.phi) != r:
            raise ValidationError("one embedding per factor required")
        for i, (t, p) in enumerate(zip(self.tables, self.phi), 1):
            if p.shape != (nh,) or p.min() < 0 or p.max() >= t.shape[0]:
                raise ValidationError(f"embedding {i}: wrong shape or range")
            if len(set(p.tolist())) != nh:
                raise ValidationError(f"embedding {i} is not injective")
            if p[0] != 0:
                raise ValidationError(f"embedding {i} does not fix the identity")
            if not np.array_equal(t[p[:, None], p[None, :]], p[self.H]):
                raise ValidationError(f"embedding {i} is not a homomorphism")
        self.inv = [np.argmax(t == 0, axis=1) for t in self.tables]
        self.h_inv = np.argmax(self.H == 0, axis=1)
        # phi_inv[i][x] = h if x = phi_i(h), else -1
        self.phi_inv = []
        for t, p in zip(self.tables, self.phi):
            q = np.full(t.shape[0], -1, dtype=np.int64)
            q[p] = np.arange(nh)
            self.phi_inv.append(q)
        self._build_cosets(transversals)
        self._build_steps()
        self.identity = AmalgamWord((), 0, self)

    def _build_cosets(self, transversals):
        self.reps = []
        self.split = []   # split[i][x] = (rep, h) with x = rep * phi_i(h)
        for k, (t, p) in enumerate(zip(self.tables, self.phi)):
            n = t.shape[0]
            coset = {x: frozenset(t[x, p].tolist()) for x in range(n)}
            classes = sorted(set(coset.values()), key=min)
            if transversals is None:
                reps = [min(c) for c in classes]
            else:
                reps = sorted(int(v) for v in transversals[k])
                if len(reps) != len(classes) or {coset[g] for g in reps} != set(classes):
                    raise ValidationError(f"factor {k + 1}: not a transversal of the cosets")
                if 0 not in reps:
                    raise ValidationError(f"factor {k + 1}: transversal must contain the identity")
            rep_of = {coset[g]: g for g in reps}
            split = np.zeros((n, 2), dtype=np.int64)
            for x in range(n):
                g = rep_of[coset[x]]
                y = t[self.inv[k][g], x]           # g^-1 x lies in H_i
                split[x] = (g, self.phi_inv[k][y])
            self.reps.append(reps)
            self.split.append(split)

    def _build_steps(self):
        """Steps ``(i, s, prob)`` and the lifted measure on ``H``."""
        self.steps = []
        self.h_mass = np.zeros(self.H.shape[0])
        for i, f in enumerate(self.factors, 1):
            for s, p in zip(f.support, f.support_probs):
                q = self.weights[i - 1] * p
                self.steps.append((i, int(s), q))
                h = self.phi_inv[i - 1][s]
                if h >= 0:
                    self.h_mass[h] += q
        total = sum(q for _, _, q in self.steps)
        if abs(total - 1) > 1e-12:
            raise ValidationError(f"lifted step distribution sums to {total}")

    # -- words ----------------------------------------------------------------

    def index(self, i):
        """``[Gamma_i : H_i]``."""
        return len(self.reps[i - 1])

    def letter(self, i, x):
        """The factor element ``x`` of ``Gamma_i`` as a normal-form word."""
        g, h = self.split[i - 1][x]
        blocks = () if g == 0 else ((i, int(g)),)
        return AmalgamWord(blocks, int(h), self)

    def word(self, blocks, h=0):
        blocks = tuple((int(i), int(g)) for i, g in blocks)
        for k, (i, g) in enumerate(blocks):
            if g == 0 or g not in self.reps[i - 1]:
                raise ValidationError(f"{g} is not a non-trivial representative of factor {i}")
            if k and blocks[k - 1][0] == i:
                raise ValidationError("consecutive blocks from the same factor")
        return AmalgamWord(blocks, int(h), self)

    def right_mul(self, w: AmalgamWord, i, x) -> AmalgamWord:
        """``w * x`` for ``x`` an element of factor ``i``."""
        k = i - 1
        y = self.tables[k][self.phi[k][w.h], x]
        blocks = w.blocks
        if blocks and blocks[-1][0] == i:
            y = self.tables[k][blocks[-1][1], y]
            blocks = blocks[:-1]
        g, h = self.split[k][y]
        if g != 0:
            blocks = blocks + ((i, int(g)),)
        return AmalgamWord(blocks, int(h), self)

    def multiply(self, u: AmalgamWord, v: AmalgamWord) -> AmalgamWord:
        out = u
        for i, g in v.blocks:
            out = self.right_mul(out, i, g)
        return self.right_mul(out, 1, self.phi[0][v.h])

    def inverse(self, w: AmalgamWord) -> AmalgamWord:
        out = self.right_mul(self.identity, 1, self.phi[0][self.h_inv[w.h]])
        for i, g in reversed(w.blocks):
            out = self.right_mul(out, i, self.inv[i - 1][g])
        return out

    def expand(self, w: AmalgamWord):
        """Letters ``[(i, x), ...]`` whose product is ``w``."""
        return [(i, g) for i, g in w.blocks] + [(1, int(self.phi[0][w.h]))]

    def renormalize(self, w: AmalgamWord) -> AmalgamWord:
        out = self.identity
        for i, x in self.expand(w):
            out = self.right_mul(out, i, x)
        return out

    def with_transversals(self, transversals):
        return AmalgamSpec(self.factors, self.H, self.phi, self.weights, self.metric_base,
                           transversals=transversals, name=self.name)

    # -- unknowns of the first-passage system ---------------------------------

    def unknowns(self):
        """``[(i, y)]`` for every ``y`` in ``Gamma_i`` outside ``H_i``."""
        out = []
        for i, p in enumerate(self.phi, 1):
            for y in range(self.tables[i - 1].shape[0]):
                if self.phi_inv[i - 1][y] < 0:
                    out.append((i, y))
        return out


@dataclass
class FHSystem:
    """``F = z (c + L F + quad(F, F))`` in index form."""

    unknowns: list
    const: np.ndarray
    lin: tuple
    quad: tuple

    def rhs(self, z, F):
        r, c, v = self.lin
        out = self.const + np.bincount(r, weights=v * F[c], minlength=len(F))
        qr, a, b, qv = self.quad
        out += np.bincount(qr, weights=qv * F[a] * F[b], minlength=len(F))
        return z * out

    def jacobian(self, z, F):
        n = len(F)
        J = np.zeros((n, n))
        r, c, v = self.lin
        np.add.at(J, (r, c), v)
        qr, a, b, qv = self.quad
        np.add.at(J, (qr, a), qv * F[b])
        np.add.at(J, (qr, b), qv * F[a])
        return z * J


def build_fh_system(spec: AmalgamSpec) -> FHSystem:
    """First-step equations for ``F_H(y | z)`` over all ``y`` outside ``H``."""
    unk = spec.unknowns()
    pos = {u: k for k, u in enumerate(unk)}
    const = np.zeros(len(unk))
    lin, quad = {}, {}
    nh = spec.H.shape[0]
    for row, (tau, y) in enumerate(unk):
        t = tau - 1
        tab, inv = spec.tables[t], spec.inv[t]
        ycos = set(tab[y, spec.phi[t]].tolist())
        # one step straight to y
        const[row] = sum(q for i, s, q in spec.steps if i == tau and s == y and spec.phi_inv[t][s] < 0)
        # steps inside Gamma_tau away from the target coset, including steps in H
        mass = {}
        for i, s, q in spec.steps:
            if spec.phi_inv[i - 1][s] >= 0:
                g0 = int(spec.phi[t][spec.phi_inv[i - 1][s]])
            elif i == tau:
                g0 = s
            else:
                continue
            mass[g0] = mass.get(g0, 0.0) + q
        for g0, q in mass.items():
            if g0 in ycos:
                continue
            col = pos[(tau, int(tab[inv[g0], y]))]
            lin[(row, col)] = lin.get((row, col), 0.0) + q
        # excursions through another factor, returning through H
        for i, s, q in spec.steps:
            k = i - 1
            if i == tau or spec.phi_inv[k][s] >= 0:
                continue
            for h0 in range(nh):
                a = pos[(i, int(spec.tables[k][spec.inv[k][s], spec.phi[k][h0]]))]
                b = pos[(tau, int(tab[inv[spec.phi[t][h0]], y]))]
                quad[(row, a, b)] = quad.get((row, a, b), 0.0) + q
    lr = np.array([k[0] for k in lin], dtype=np.int64)
    lc = np.array([k[1] for k in lin], dtype=np.int64)
    lv = np.array(list(lin.values()))
    qr = np.array([k[0] for k in quad], dtype=np.int64)
    qa = np.array([k[1] for k in quad], dtype=np.int64)
    qb = np.array([k[2] for k in quad], dtype=np.int64)
    qv = np.array(list(quad.values()))
    return FHSystem(unk, const, (lr, lc, lv), (qr, qa, qb, qv))


@dataclass(frozen=True)
class FHTable:
    z: float
    values: dict
    residual: float
    converged: bool
    iterations: int

    def __getitem__(self, key):
        return self.values[key]

    def script_F(self, i):
        """``sum`` of ``F_H(y)`` over ``y`` in ``Gamma_i`` outside ``H_i``."""
        return sum(v for (j, _), v in self.values.items() if j == i)


def fh_solve(spec: AmalgamSpec, z: float, tol=FH_TOL, max_iter=FH_MAX_ITER) -> FHTable:
    """Minimal nonnegative solution of the first-passage system at ``z``.

    Newton's method from 0; for this convex polynomial map the iterates
    increase monotonically to the minimal fixed point while the Jacobian has
    spectral radius below one.
    """
    z = float(z)
    if z < 0:
        raise ValidationError("z must be nonnegative")
    sys_ = build_fh_system(spec)
    n = len(sys_.unknowns)
    F = np.zeros(n)
    it = 0
    prev = math.inf
    converged = False
    for it in range(1, max_iter + 1):
        G = sys_.rhs(z, F) - F
        J = sys_.jacobian(z, F)
        rho = max(abs(np.linalg.eigvals(J))) if n else 0.0
        if rho >= 1.0:
            raise DivergedAtW(z, None)
        step = np.linalg.solve(np.eye(n) - J, G)
        if np.any(step < -1e-12) or not np.all(np.isfinite(step)):
            raise DivergedAtW(z, None)
        F = F + step
        if np.any(F > FH_DIVERGENCE):
            raise DivergedAtW(z, None)
        size = float(np.max(np.abs(step), initial=0.0))
        # near the fold the steps bottom out at the rounding floor instead of reaching tol
        if size <= tol or (size <= FH_FLOOR and size >= 0.5 * prev):
            converged = True
            break
        prev = size
    res = float(np.max(np.abs(sys_.rhs(z, F) - F), initial=0.0))
    if not converged:
        raise ConvergenceError(f"F_H iteration did not converge at z={z}")
    values = {u: float(v) for u, v in zip(sys_.unknowns, F)}
    return FHTable(z, values, res, converged, it)


def fh_divergence_onset(spec: AmalgamSpec, tol=1e-10, cap=64.0) -> float:
    """Empirical largest ``z`` where :func:`fh_solve` still converges (bisection)."""
    lo, hi = 1.0, 2.0

    def ok(z):
        try:
            fh_solve(spec, z)
            return True
        except ConvergenceError:
            return False

    if not ok(lo):
        lo, hi = 0.0, 1.0
    else:
        while ok(hi):
            lo, hi = hi, 2 * hi
            if hi > cap:
                return math.inf
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class AmalgamDimensions:
    lam: float
    hd_lambda: float
    hd_omega: float
    theta: float
    rho: float
    script_F: tuple
    fh: FHTable

    def as_dict(self):
        return {"lambda": self.lam, "HD_H_Lambda": self.hd_lambda, "HD_H_Omega": self.hd_omega,
                "theta_H": self.theta, "rho_H": self.rho}


def hd_amalgam(spec: AmalgamSpec, lam: float) -> AmalgamDimensions:
    fh = fh_solve(spec, lam)
    cols = [fh.script_F(i) for i in range(1, spec.r + 1)]
    theta, _ = pf_eigenvalue(PFMatrix.from_columns(cols, "M"))
    rho, _ = pf_eigenvalue(PFMatrix.from_columns([spec.index(i) - 1 for i in range(1, spec.r + 1)], "D"))
    la = math.log(spec.metric_base)
    return AmalgamDimensions(float(lam), -math.log(theta) / la, -math.log(rho) / la,
                             theta, rho, tuple(cols), fh)


def z6_z2_z6():
    """``Z/6 *_{Z/2} Z/6`` with simple random walks on both factors."""
    from .group_model import cyclic
    return AmalgamSpec([cyclic(6), cyclic(6)], [[0, 1], [1, 0]], [[0, 3], [0, 3]], [0.5, 0.5],
                       0.5, name="Z6 *_Z2 Z6")
