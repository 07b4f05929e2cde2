"""Brute-force path series for the random walk on a free product.

Everything here is computed by pushing probability mass along explicit
words, one step at a time, without any generating-function identity.  The
state space is the set of words reached so far; a word is identified by a
pair of 64-bit polynomial hashes of its block codes, updated incrementally
from the parent word, and only unique successors are materialised.

When the number of states exceeds ``state_cap`` the lightest states are
dropped.  Dropping mass can only lower every coefficient, so partial sums
stay certified lower bounds; the discarded probability per step is kept in
``dropped``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalConsistencyError, TruncationDepthError, ValidationError
from .group_model import BlockStepper, FreeProductSpec, Word

_B1 = np.uint64(0x9E3779B97F4A7C15)
_B2 = np.uint64(0xC2B2AE3D27D4EB4F)
DEFAULT_STATE_CAP = 400_000


@dataclass(frozen=True)
class SeriesTable:
    """Coefficients ``coeffs[n]`` (``n = 0..N``) of a first-passage series.

    ``dropped[n]`` is the probability mass removed by the state cap at step
    ``n`` and ``killed[n]`` the mass lost to truncation tombs.
    """

    horizon: int
    target: object
    coeffs: np.ndarray
    dropped: np.ndarray
    killed: np.ndarray

    @property
    def exact(self):
        return not np.any(self.dropped > 0)

    def partial_sums(self, lam):
        return np.cumsum(self.coeffs * float(lam) ** np.arange(self.horizon + 1))

    def value(self, lam):
        """Partial sum ``sum_{n<=N} f^(n) lam^n``."""
        return float(self.partial_sums(lam)[-1])

    def dropped_weight(self, lam):
        """``sum_n dropped[n] lam^n``; bounds the loss from pruning when ``lam <= 1``."""
        return float(np.sum(self.dropped * float(lam) ** np.arange(self.horizon + 1)))


class _Walker:
    """Mass distribution over words with incremental hashing."""

    def __init__(self, spec: FreeProductSpec, horizon: int):
        for f in spec.factors:
            if f.is_truncated and f.depth < 1:
                raise TruncationDepthError(f"{f.name}: depth must be positive")
        self.spec = spec
        self.st = BlockStepper(spec)
        self.width = 8
        self.p1 = self._powers(_B1, horizon + 2)
        self.p2 = self._powers(_B2, horizon + 2)
        self.rows = np.zeros((1, self.width), dtype=self.st.dtype)
        self.nb = np.zeros(1, dtype=np.int64)
        self.h1 = np.zeros(1, dtype=np.uint64)
        self.h2 = np.zeros(1, dtype=np.uint64)
        self.mass = np.ones(1)

    @staticmethod
    def _powers(base, n):
        out = np.ones(n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            for k in range(1, n):
                out[k] = out[k - 1] * base
        return out

    def key_of(self, w: Word):
        h1 = h2 = np.uint64(0)
        for k, (i, x) in enumerate(w.blocks):
            c = np.uint64(self.st.code(i, x))
            with np.errstate(over="ignore"):
                h1 = h1 + c * self.p1[k]
                h2 = h2 + c * self.p2[k]
        return h1, h2, w.block_length

    def successors(self):
        """Successor descriptors for every (state, step) pair."""
        st = self.st
        S, G = len(self.nb), st.nsteps
        src = np.repeat(np.arange(S), G)
        g = np.tile(np.arange(G), S)
        nb = self.nb[src]
        top = np.where(nb > 0, self.rows[src, np.maximum(nb - 1, 0)], 0).astype(np.int64)
        below = np.where(nb > 1, self.rows[src, np.maximum(nb - 2, 0)], 0).astype(np.int64)
        same = st.code_factor[top] == st.step_factor[g]
        new = np.where(same, st.trans[top, g], st.step_code[g])
        alive = new >= 0
        push = ~same
        pop = same & (new == 0)
        nb2 = nb + push - pop
        pos = np.where(push, nb, nb - 1)
        delta = np.where(push, new, new - top).astype(np.uint64)
        delta[~alive] = 0
        with np.errstate(over="ignore"):
            h1 = self.h1[src] + delta * self.p1[np.maximum(pos, 0)]
            h2 = self.h2[src] + delta * self.p2[np.maximum(pos, 0)]
        newtop = np.where(pop, below, new)
        w = self.mass[src] * st.step_prob[g]
        return dict(src=src, g=g, alive=alive, nb=nb2, top=newtop, h1=h1, h2=h2, w=w)

    def advance(self, succ, keep, cap):
        """Aggregate kept successors into the new state set; returns dropped mass."""
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            self.rows = self.rows[:0]
            self.nb = self.nb[:0]
            self.h1 = self.h1[:0]
            self.h2 = self.h2[:0]
            self.mass = self.mass[:0]
            return 0.0
        h1, h2 = succ["h1"][idx], succ["h2"][idx]
        with np.errstate(over="ignore"):
            key = h1 ^ (succ["nb"][idx].astype(np.uint64) * _B2)
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        inv = inv.ravel()
        if np.any(h2 != h2[first][inv]):
            raise InternalConsistencyError("hash collision between distinct words")
        mass = np.bincount(inv, weights=succ["w"][idx], minlength=len(first))
        rep = idx[first]
        uniq = np.stack([h1[first], h2[first]], axis=1)
        dropped = 0.0
        if cap is not None and len(rep) > cap:
            order = np.argpartition(-mass, cap - 1)[:cap]
            order.sort()
            dropped = float(mass.sum() - mass[order].sum())
            rep, mass, uniq = rep[order], mass[order], uniq[order]
        src, g = succ["src"][rep], succ["g"][rep]
        rows = self.rows[src].copy()
        nb = self.nb[src].copy()
        lens = np.zeros(len(src), dtype=np.int64)
        rows, alive = self.st.apply(rows, nb, lens, g)
        width = int(nb.max()) + 1 if len(nb) else 1
        if rows.shape[1] < width:
            rows = np.concatenate([rows, np.zeros((len(rows), width - rows.shape[1]), rows.dtype)], 1)
        self.rows = rows
        self.nb = nb
        self.h1 = uniq[:, 0].copy()
        self.h2 = uniq[:, 1].copy()
        self.mass = mass
        return dropped

    def words(self):
        return [self.st.decode(r, n) for r, n in zip(self.rows, self.nb)]


@dataclass
class ConvolutionTable:
    """Distributions ``p^(n)(e, .)`` for ``n = 0..N``."""

    spec: FreeProductSpec = field(repr=False)
    dists: list
    dropped: np.ndarray

    def distribution(self, n) -> dict:
        return self.dists[n]

    def prob(self, n, w: Word) -> float:
        return self.dists[n].get(w, 0.0)


def convolution_powers(spec: FreeProductSpec, N: int, state_cap=None) -> ConvolutionTable:
    """Exact step distributions ``mu^(n)`` up to ``n = N`` on the reachable ball."""
    if N < 0:
        raise ValidationError("N must be nonnegative")
    for f in spec.factors:
        if f.is_truncated and f.depth < N:
            raise TruncationDepthError(f"{f.name}: depth {f.depth} below horizon {N}")
    wk = _Walker(spec, N)
    dists = [{spec.identity: 1.0}]
    dropped = np.zeros(N + 1)
    for n in range(1, N + 1):
        succ = wk.successors()
        dropped[n] = wk.advance(succ, succ["alive"], state_cap)
        dists.append(dict(zip(wk.words(), wk.mass.tolist())))
    return ConvolutionTable(spec, dists, dropped)


def _taboo_series(spec, N, absorbed, target, state_cap):
    wk = _Walker(spec, N)
    coeffs = np.zeros(N + 1)
    dropped = np.zeros(N + 1)
    killed = np.zeros(N + 1)
    for n in range(1, N + 1):
        if len(wk.nb) == 0:
            break
        succ = wk.successors()
        alive = succ["alive"]
        hit = alive & absorbed(wk, succ)
        coeffs[n] = succ["w"][hit].sum()
        killed[n] = succ["w"][~alive].sum()
        dropped[n] = wk.advance(succ, alive & ~hit, state_cap)
    return SeriesTable(N, target, coeffs, dropped, killed)


def first_visit_series(spec: FreeProductSpec, x: Word, N: int,
                       state_cap=DEFAULT_STATE_CAP) -> SeriesTable:
    """Coefficients ``f^(n)(e, x)``: probability that the first visit to ``x`` happens at step ``n``.

    Computed by killing the walk on arrival at ``x`` (taboo dynamic program).
    """
    if x.spec is not spec:
        raise ValidationError("word belongs to another spec")
    if x.block_length == 0:
        raise ValidationError("target must differ from the identity")
    wk0 = _Walker(spec, N)
    k1, k2, kb = wk0.key_of(x)

    def absorbed(wk, succ):
        return (succ["nb"] == kb) & (succ["h1"] == k1) & (succ["h2"] == k2)

    return _taboo_series(spec, N, absorbed, x, state_cap)


def first_visit_series_deconvolution(spec: FreeProductSpec, x: Word, N: int) -> SeriesTable:
    """Same coefficients via ``f^(n) = p^(n)(e,x) - sum_{k<n} f^(k) p^(n-k)(e,e)`` (exact states only)."""
    conv = convolution_powers(spec, N)
    p_x = np.array([conv.prob(n, x) for n in range(N + 1)])
    p_e = np.array([conv.prob(n, spec.identity) for n in range(N + 1)])
    f = np.zeros(N + 1)
    for n in range(1, N + 1):
        f[n] = p_x[n] - np.dot(f[1:n], p_e[n - 1:0:-1])
    neg = f < -1e-9
    if neg.any():
        warnings.warn("negative first-visit coefficients from cancellation", RuntimeWarning, stacklevel=2)
    f = np.maximum(f, 0.0)
    return SeriesTable(N, x, f, conv.dropped, np.zeros(N + 1))


def first_passage_set_series(spec: FreeProductSpec, i: int, N: int,
                             state_cap=DEFAULT_STATE_CAP) -> SeriesTable:
    """Coefficients of the first passage from ``e`` to ``Gamma_i^x`` (series of ``xi_i``)."""
    if not 1 <= i <= spec.r:
        raise ValidationError(f"unknown factor {i}")

    def absorbed(wk, succ):
        return (succ["nb"] == 1) & (wk.st.code_factor[succ["top"]] == i)

    return _taboo_series(spec, N, absorbed, ("factor", i), state_cap)


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def sample_walk_positions(spec: FreeProductSpec, n: int, samples: int, rng) -> dict:
    """Empirical law of ``X_n`` from independent walks (for Monte Carlo cross-checks)."""
    st = BlockStepper(spec)
    rows = np.zeros((samples, max(n, 1) + 1), dtype=st.dtype)
    nb = np.zeros(samples, dtype=np.int64)
    lens = np.zeros(samples, dtype=np.int64)
    alive = np.ones(samples, dtype=bool)
    cdf = np.cumsum(st.step_prob)
    for _ in range(n):
        g = np.minimum(np.searchsorted(cdf, rng.random(samples), side="right"), st.nsteps - 1)
        rows, ok = st.apply(rows, nb, lens, g)
        alive &= ok
    keys, counts = np.unique(np.column_stack([rows[alive], nb[alive]]), axis=0, return_counts=True)
    return {st.decode(k[:-1], int(k[-1])): c / samples for k, c in zip(keys, counts)}


def amalgam_coset_series(aspec, i: int, g: int, N: int, lam=1.0, prune=0.0) -> dict:
    """First passage to the coset ``g H_i`` of an amalgam, split by arrival point.

    Returns ``{(i, y): coefficients}`` for the elements ``y`` of the coset;
    ``coefficients[n]`` is the probability of first entering the coset at
    time ``n`` and at ``y``.  States whose weighted mass ``m lam^n`` falls
    below ``prune`` are discarded.
    """
    if g == 0 or g not in aspec.reps[i - 1]:
        raise ValidationError(f"{g} is not a non-trivial representative of factor {i}")
    tab, phi = aspec.tables[i - 1], aspec.phi[i - 1]
    out = {(i, int(tab[g, phi[h]])): np.zeros(N + 1) for h in range(aspec.H.shape[0])}
    target = ((i, g),)
    states = {aspec.identity: 1.0}
    for n in range(1, N + 1):
        nxt = {}
        for w, m in states.items():
            for j, s, q in aspec.steps:
                v = aspec.right_mul(w, j, s)
                if v.blocks == target:
                    out[(i, int(tab[g, phi[v.h]]))][n] += m * q
                else:
                    nxt[v] = nxt.get(v, 0.0) + m * q
        cut = prune / float(lam) ** n
        states = {w: m for w, m in nxt.items() if m > cut}
    return out
