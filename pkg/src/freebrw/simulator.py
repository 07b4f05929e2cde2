"""Seeded Monte Carlo for branching random walks on free products.

Replicas are processed in fixed-size batches; batch ``b`` draws from
``PCG64(SeedSequence((seed, b)))`` so aggregate statistics depend only on
``(seed, reps, batch)`` and not on the number of worker processes.  Within a
batch all particles of all replicas are advanced together as rows of block
codes (see :class:`~freebrw.group_model.BlockStepper`).

In every generation each living particle first produces offspring according
to ``nu`` and dies; then every offspring moves one step according to ``mu``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .group_model import BlockStepper, FreeProductSpec, Word

DEFAULT_BATCH = 2000
DEFAULT_PARTICLE_CAP = 10_000_000
STABILIZATION_FRACTION = 0.01
_H1 = np.uint64(0x9E3779B97F4A7C15)
_H2 = np.uint64(0xC2B2AE3D27D4EB4F)


# ---------------------------------------------------------------------------
# offspring law

@dataclass(frozen=True)
class OffspringDistribution:
    """Offspring law ``nu`` on ``{0, ..., K}`` given by its probability vector."""

    pmf: tuple

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ValidationError("offspring pmf needs at least two entries")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("offspring probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(f"offspring probabilities sum to {p.sum()}, expected 1")
        if p[0] > 0:
            raise ValidationError("nu(0) > 0 is excluded")
        if p[1] == 1.0:
            raise ValidationError("nu(1) = 1 is excluded")
        object.__setattr__(self, "pmf", tuple(float(v) for v in p))

    @classmethod
    def point(cls, k):
        p = np.zeros(int(k) + 1)
        p[int(k)] = 1.0
        return cls(tuple(p))

    @classmethod
    def geometric_truncated(cls, mean, kmax=64):
        """``nu(k)`` proportional to ``q^(k-1)`` on ``{1, ..., kmax}`` with the given mean."""
        mean = float(mean)
        if not 1.0 < mean < (kmax + 1) / 2:
            raise ValidationError(f"mean {mean} not attainable on 1..{kmax}")
        k = np.arange(1, kmax + 1)

        def m(q):
            w = q ** (k - 1)
            return float((k * w).sum() / w.sum())

        lo, hi = 0.0, 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if m(mid) < mean else (lo, mid)
        w = lo ** (k - 1)
        return cls(tuple(np.concatenate([[0.0], w / w.sum()])))

    @property
    def probs(self):
        return np.asarray(self.pmf)

    @property
    def mean(self):
        return float(np.dot(np.arange(len(self.pmf)), self.pmf))

    @property
    def second_moment(self):
        return float(np.dot(np.arange(len(self.pmf)) ** 2, self.pmf))

    @property
    def variance(self):
        return self.second_moment - self.mean ** 2

    def sample(self, rng, n):
        cdf = np.cumsum(self.pmf)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)


# ---------------------------------------------------------------------------
# targets

@dataclass(frozen=True)
class Target:
    """Freezing set: a finite set of words, or ``Gamma_i^x`` when ``factor`` is set."""

    words: frozenset = frozenset()
    factor: int | None = None
    label: str = ""

    @classmethod
    def of_words(cls, words, label=""):
        words = frozenset(words)
        if not words:
            raise ValidationError("empty target set")
        return cls(words, None, label or ",".join(sorted(w.spec.format_word(w) for w in words)))

    @classmethod
    def of_factor(cls, i, label=""):
        return cls(frozenset(), int(i), label or f"Gamma_{i}^x")


class _TargetIndex:
    """Vectorised membership tests for a list of targets."""

    def __init__(self, st: BlockStepper, targets):
        self.st = st
        self.targets = list(targets)
        if len(self.targets) > 63:
            raise ValidationError("at most 63 simultaneous targets")
        self.base = st.ncodes + 1
        kmax = max([w.block_length for t in self.targets for w in t.words] + [0])
        if kmax and self.base ** kmax >= 2 ** 62:
            raise ValidationError("target words too long for the key encoding")
        self.kmax = kmax
        self.keys = []
        for t in self.targets:
            ks = [self._key_word(w) for w in t.words]
            self.keys.append(np.array(sorted(ks), dtype=np.int64))

    def _key_word(self, w: Word):
        k = 0
        for j, (i, x) in enumerate(w.blocks):
            k += self.st.code(i, x) * self.base ** j
        return k

    def row_keys(self, rows, nb, sel):
        out = np.full(len(nb), -1, dtype=np.int64)
        if self.kmax == 0:
            out[sel & (nb == 0)] = 0
            return out
        cand = np.flatnonzero(sel & (nb <= self.kmax))
        if cand.size:
            width = min(self.kmax, rows.shape[1])
            part = rows[cand, :width].astype(np.int64)
            out[cand] = part @ (self.base ** np.arange(width, dtype=np.int64))
        return out

    def hits(self, rows, nb, sel):
        """Boolean matrix ``(n, K)`` of target membership for selected rows."""
        keys = self.row_keys(rows, nb, sel) if self.kmax or any(t.words for t in self.targets) else None
        out = np.zeros((len(nb), len(self.targets)), dtype=bool)
        for k, t in enumerate(self.targets):
            if t.factor is not None:
                first = rows[:, 0].astype(np.int64) if rows.shape[1] else np.zeros(len(nb), np.int64)
                out[:, k] = sel & (nb == 1) & (self.st.code_factor[first] == t.factor)
            else:
                out[:, k] = sel & (keys >= 0) & np.isin(keys, self.keys[k])
        return out


# ---------------------------------------------------------------------------
# batched engine

def _hash_prefix(rows, nb, width):
    """Hash of the first ``width`` block codes (zero padded) and the block count."""
    vals = np.zeros((len(nb), width), dtype=np.uint64)
    w = min(width, rows.shape[1])
    vals[:, :w] = rows[:, :w]
    h = np.zeros(len(nb), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in range(width):
            h = h * _H1 + vals[:, k]
        h = h * _H2 + nb.astype(np.uint64)
    return h


@dataclass
class _Job:
    spec: FreeProductSpec
    nu: OffspringDistribution
    G: int
    particle_cap: int
    reps: int
    batch: int
    seed: int
    targets: tuple = ()
    marginal_gens: tuple = ()
    trace_radius: int = -1


@dataclass
class BrwRun:
    """Aggregated output of a batch of independent replicas.

    ``frozen[r, k]`` counts the particles of replica ``r`` frozen on target
    ``k``; ``population[n]`` is the total number of particles born in
    generation ``n`` over the included replicas.
    """

    seed: int
    reps: int
    G: int
    particle_cap: int
    targets: tuple
    population: np.ndarray
    population_sq: np.ndarray
    frozen: np.ndarray
    frozen_by_gen: np.ndarray
    truncated: np.ndarray
    alive_at_cap: np.ndarray
    marginals: dict = field(default_factory=dict)
    visited: np.ndarray | None = None
    spec: FreeProductSpec | None = field(default=None, repr=False)

    @property
    def included(self):
        return ~self.truncated

    @property
    def n_truncated(self):
        return int(self.truncated.sum())

    @property
    def gen_cap_hit(self):
        return bool(self.alive_at_cap.any())


def _run_batch(job: _Job, b: int):
    spec = job.spec
    st = BlockStepper(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((job.seed, b))))
    n_rep = min(job.batch, job.reps - b * job.batch)
    tix = _TargetIndex(st, job.targets) if job.targets else None
    K = len(job.targets)
    full = np.uint64((1 << K) - 1) if K else np.uint64(0)
    cdf = np.cumsum(st.step_prob)
    cdf[-1] = 1.0

    rows = np.zeros((n_rep, 4), dtype=st.dtype)
    nb = np.zeros(n_rep, dtype=np.int64)
    lens = np.zeros(n_rep, dtype=np.int64)
    rep = np.arange(n_rep, dtype=np.int64)
    mask = np.zeros(n_rep, dtype=np.uint64)

    pop = np.zeros((job.G + 1, n_rep), dtype=np.int64)
    pop[0] = 1
    frozen = np.zeros((n_rep, K), dtype=np.int64)
    frozen_gen = np.zeros((job.G + 1, K), dtype=np.int64)
    truncated = np.zeros(n_rep, dtype=bool)
    marg = {}
    visited = []

    def freeze(n):
        nonlocal rows, nb, lens, rep, mask
        if not K:
            return
        hit = tix.hits(rows, nb, np.ones(len(nb), dtype=bool))
        for k in range(K):
            bit = np.uint64(1 << k)
            new = hit[:, k] & ((mask & bit) == 0)
            if new.any():
                frozen[:, k] += np.bincount(rep[new], minlength=n_rep)
                frozen_gen[n, k] += int(new.sum())
                mask[new] |= bit
        keep = mask != full
        if not keep.all():
            rows, nb, lens, rep, mask = rows[keep], nb[keep], lens[keep], rep[keep], mask[keep]

    def record(n):
        if n in job.marginal_gens:
            ok = ~truncated[rep]
            if ok.any():
                w = max(1, int(nb[ok].max()))
                key = np.column_stack([rows[ok, :w].astype(np.int64), nb[ok]])
                u, c = np.unique(key, axis=0, return_counts=True)
                marg[n] = (u, c)
        if job.trace_radius >= 0:
            sel = lens <= job.trace_radius
            if sel.any():
                h = _hash_prefix(rows[sel], nb[sel], max(1, job.trace_radius))
                visited.append(np.column_stack([rep[sel].astype(np.uint64), h, lens[sel].astype(np.uint64)]))
        if len(visited) > 8:
            visited[:] = [np.unique(np.concatenate(visited), axis=0)]

    freeze(0)
    record(0)
    G_done = 0
    for n in range(1, job.G + 1):
        if len(nb) == 0:
            break
        G_done = n
        counts = job.nu.sample(rng, len(nb))
        idx = np.repeat(np.arange(len(nb)), counts)
        rows, nb, lens, rep, mask = rows[idx], nb[idx], lens[idx], rep[idx], mask[idx]
        per = np.bincount(rep, minlength=n_rep)
        pop[n] = per
        over = per > job.particle_cap
        if over.any():
            truncated |= over
            keep = ~truncated[rep]
            rows, nb, lens, rep, mask = rows[keep], nb[keep], lens[keep], rep[keep], mask[keep]
        g = np.searchsorted(cdf, rng.random(len(nb)), side="right")
        rows, alive = st.apply(rows, nb, lens, g)
        if not alive.all():
            rows, nb, lens, rep, mask = rows[alive], nb[alive], lens[alive], rep[alive], mask[alive]
        freeze(n)
        record(n)
        if len(nb) and rows.shape[1] > 2 * int(nb.max()) + 8:
            rows = np.ascontiguousarray(rows[:, : int(nb.max()) + 4])
    alive_at_cap = np.zeros(n_rep, dtype=bool)
    if G_done == job.G and len(rep):
        alive_at_cap[np.unique(rep)] = True
    vis = None
    if job.trace_radius >= 0:
        allv = np.unique(np.concatenate(visited), axis=0) if visited else np.zeros((0, 3), np.uint64)
        vis = np.zeros((n_rep, job.trace_radius + 1), dtype=np.int64)
        np.add.at(vis, (allv[:, 0].astype(np.int64), allv[:, 2].astype(np.int64)), 1)
    ok = ~truncated
    return dict(pop=pop[:, ok].sum(1), pop_sq=(pop[:, ok].astype(float) ** 2).sum(1),
                frozen=frozen, frozen_gen=frozen_gen, truncated=truncated,
                alive_at_cap=alive_at_cap, marg=marg, visited=vis)


_CTX = {}


def _worker(b):
    return _run_batch(_CTX["job"], b)


def _default_jobs():
    try:
        return max(1, int(os.environ.get("FREEBRW_JOBS", "1")))
    except ValueError:
        return 1


def _execute(job: _Job, jobs=None):
    nbatch = -(-job.reps // job.batch)
    jobs = jobs or _default_jobs()
    if jobs > 1 and nbatch > 1:
        import multiprocessing as mp
        _CTX["job"] = job
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as ex:
            parts = list(ex.map(_worker, range(nbatch)))
    else:
        parts = [_run_batch(job, b) for b in range(nbatch)]
    st = BlockStepper(job.spec)
    marg = {}
    for p in parts:
        for n, (u, c) in p["marg"].items():
            d = marg.setdefault(n, {})
            for row, cnt in zip(u, c):
                w = st.decode(row[:-1], int(row[-1]))
                d[w] = d.get(w, 0) + int(cnt)
    vis = np.concatenate([p["visited"] for p in parts]) if job.trace_radius >= 0 else None
    return BrwRun(
        seed=job.seed, reps=job.reps, G=job.G, particle_cap=job.particle_cap, targets=job.targets,
        population=sum(p["pop"] for p in parts), population_sq=sum(p["pop_sq"] for p in parts),
        frozen=np.concatenate([p["frozen"] for p in parts]),
        frozen_by_gen=sum(p["frozen_gen"] for p in parts),
        truncated=np.concatenate([p["truncated"] for p in parts]),
        alive_at_cap=np.concatenate([p["alive_at_cap"] for p in parts]),
        marginals=marg, visited=vis, spec=job.spec,
    )


def _check(spec, nu, G, reps, particle_cap):
    if not isinstance(nu, OffspringDistribution):
        raise ValidationError("nu must be an OffspringDistribution")
    if G < 0 or reps < 1 or particle_cap < 1:
        raise ValidationError("caps and replica count must be positive")


def run_brw(spec: FreeProductSpec, nu: OffspringDistribution, G: int, P=DEFAULT_PARTICLE_CAP,
            seed=0, *, reps=1, targets=(), marginal_gens=(), trace_radius=-1,
            batch=DEFAULT_BATCH, jobs=None) -> BrwRun:
    """Simulate ``reps`` independent BRWs from ``e`` for ``G`` generations.

    Particles arriving in a target are counted once for it; a particle is
    removed once it has been counted for every target.
    """
    _check(spec, nu, G, reps, P)
    job = _Job(spec, nu, int(G), int(P), int(reps), int(batch), int(seed), tuple(targets),
               tuple(marginal_gens), int(trace_radius))
    return _execute(job, jobs)


# ---------------------------------------------------------------------------
# estimators

@dataclass(frozen=True)
class ZEstimate:
    target: str
    mean: float
    stderr: float
    n: int
    tail_fraction: float
    stabilized: bool
    truncated: int

    def z_score(self, exact):
        return (self.mean - exact) / self.stderr if self.stderr > 0 else math.inf


def _stabilization(by_gen, G):
    total = by_gen.sum()
    if total == 0:
        return 0.0
    window = max(1, G // 4)
    return float(by_gen[-window:].sum() / total)


def z_estimates(run: BrwRun):
    out = []
    ok = run.included
    for k, t in enumerate(run.targets):
        x = run.frozen[ok, k].astype(float)
        n = len(x)
        sd = float(x.std(ddof=1)) if n > 1 else math.inf
        tail = _stabilization(run.frozen_by_gen[:, k], run.G)
        out.append(ZEstimate(t.label, float(x.mean()), sd / math.sqrt(n), n, tail,
                             tail < STABILIZATION_FRACTION, run.n_truncated))
    return out


def estimate_Z_infty(spec, nu, M, reps, G, seed, **kw):
    """Mean and standard error of the frozen count on ``M`` (a word set or :class:`Target`)."""
    target = M if isinstance(M, Target) else Target.of_words(M)
    run = run_brw(spec, nu, G, seed=seed, reps=reps, targets=(target,), **kw)
    return z_estimates(run)[0]


def estimate_Z_infty_many(spec, nu, targets, reps, G, seed, **kw):
    """Several freezing sets evaluated on one set of trajectories."""
    targets = tuple(t if isinstance(t, Target) else Target.of_words(t) for t in targets)
    run = run_brw(spec, nu, G, seed=seed, reps=reps, targets=targets, **kw)
    return z_estimates(run), run


def marginal_distribution(spec, nu, n, particles, seed, batch=DEFAULT_BATCH, jobs=None):
    """Pooled empirical law of generation-``n`` positions from about ``particles`` samples."""
    reps = max(1, int(math.ceil(particles / nu.mean ** n)))
    run = run_brw(spec, nu, n, seed=seed, reps=reps, marginal_gens=(n,), batch=batch, jobs=jobs)
    counts = run.marginals.get(n, {})
    total = sum(counts.values())
    return {w: c / total for w, c in counts.items()}, total


# ---------------------------------------------------------------------------
# embedded Galton-Watson process

@dataclass(frozen=True)
class GWResult:
    factor: int
    stages: int
    reps: int
    stage_sizes: np.ndarray          # (reps, stages + 1)
    capped: np.ndarray
    gen_cap_hits: int

    @property
    def stage1_mean(self):
        return float(self.stage_sizes[:, 1].mean())

    @property
    def stage1_stderr(self):
        return float(self.stage_sizes[:, 1].std(ddof=1) / math.sqrt(self.reps))

    @property
    def survival(self):
        """Fraction of replicas with a nonempty final stage (capped ones count as surviving)."""
        return float(np.mean((self.stage_sizes[:, -1] > 0) | self.capped))

    @property
    def extinction(self):
        return 1.0 - self.survival

    def stage_means(self):
        return self.stage_sizes.mean(axis=0)

    def offspring_pmf(self):
        """Empirical offspring law of the embedded process (stage-1 sizes)."""
        return np.bincount(self.stage_sizes[:, 1]) / self.reps

    def predicted_survival(self, iterations=100_000):
        """``1 - q`` with ``q`` the smallest fixed point of the empirical generating function."""
        p = self.offspring_pmf()
        q = 0.0
        for _ in range(iterations):
            q_new = float(np.polynomial.polynomial.polyval(q, p))
            if abs(q_new - q) < 1e-15:
                break
            q = q_new
        return 1.0 - q


def _gw_batch(ctx, b):
    spec, nu, i, stages, reps, batch, seed, G, stage_cap, pcap = ctx
    st = BlockStepper(spec)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, b))))
    n_rep = min(batch, reps - b * batch)
    cdf = np.cumsum(st.step_prob)
    cdf[-1] = 1.0
    sizes = np.zeros((n_rep, stages + 1), dtype=np.int64)
    sizes[:, 0] = 1
    capped = np.zeros(n_rep, dtype=bool)
    gen_hits = 0
    # stage particles: replica and arrival code in Gamma_i
    s_rep = np.arange(n_rep, dtype=np.int64)
    s_code = np.zeros(n_rep, dtype=np.int64)
    for stage in range(1, stages + 1):
        rows = np.zeros((len(s_rep), 4), dtype=st.dtype)
        nb = np.zeros(len(s_rep), dtype=np.int64)
        lens = np.zeros(len(s_rep), dtype=np.int64)
        rep, start = s_rep.copy(), np.zeros(len(s_rep), dtype=np.int64)
        out_rep, out_code = [], []
        for n in range(1, G + 1):
            if len(nb) == 0:
                break
            counts = nu.sample(rng, len(nb))
            idx = np.repeat(np.arange(len(nb)), counts)
            rows, nb, lens, rep, start = rows[idx], nb[idx], lens[idx], rep[idx], start[idx]
            over = np.bincount(rep, minlength=n_rep) > pcap
            if over.any():
                capped |= over
                keep = ~capped[rep]
                rows, nb, lens, rep, start = rows[keep], nb[keep], lens[keep], rep[keep], start[keep]
            g = np.searchsorted(cdf, rng.random(len(nb)), side="right")
            rows, alive = st.apply(rows, nb, lens, g)
            first = rows[:, 0].astype(np.int64)
            in_gi = (nb == 0) | ((nb == 1) & (st.code_factor[first] == i))
            pos = np.where(nb == 0, 0, first)
            hit = alive & in_gi & (pos != start)
            if hit.any():
                out_rep.append(rep[hit])
                out_code.append(pos[hit])
            keep = alive & ~hit
            rows, nb, lens, rep, start = rows[keep], nb[keep], lens[keep], rep[keep], start[keep]
        else:
            if len(nb):
                gen_hits += 1
        s_rep = np.concatenate(out_rep) if out_rep else np.zeros(0, np.int64)
        s_code = np.concatenate(out_code) if out_code else np.zeros(0, np.int64)
        ok = ~capped[s_rep]
        s_rep, s_code = s_rep[ok], s_code[ok]
        order = np.argsort(s_rep, kind="stable")
        s_rep, s_code = s_rep[order], s_code[order]
        per = np.bincount(s_rep, minlength=n_rep)
        sizes[:, stage] = per
        big = per > stage_cap
        if big.any():
            capped |= big
            keep = ~capped[s_rep]
            s_rep, s_code = s_rep[keep], s_code[keep]
        if len(s_rep) == 0:
            break
    return sizes, capped, gen_hits


def embedded_gw(spec: FreeProductSpec, nu: OffspringDistribution, i: int, stages: int, reps: int,
                seed=0, *, G=200, stage_cap=2000, particle_cap=DEFAULT_PARTICLE_CAP,
                batch=DEFAULT_BATCH, jobs=None) -> GWResult:
    """Stage sizes of the Galton-Watson process obtained by freezing on copies of ``Gamma_i``.

    A stage particle at ``x`` in ``Gamma_i`` starts a BRW that freezes on
    ``Gamma_i`` minus ``{x}``; the frozen particles form the next stage.
    Each stage is simulated in coordinates relative to its stage particle
    (start at ``e``, freeze on ``Gamma_i^x``), which is the same law by
    translation invariance and keeps truncated factors homogeneous.
    Replicas whose stage size exceeds ``stage_cap`` stop and count as
    surviving (flagged in ``capped``).
    """
    _check(spec, nu, G, reps, particle_cap)
    if not 1 <= i <= spec.r:
        raise ValidationError(f"unknown factor {i}")
    ctx = (spec, nu, int(i), int(stages), int(reps), int(batch), int(seed), int(G), int(stage_cap),
           int(particle_cap))
    nbatch = -(-reps // batch)
    jobs = jobs or _default_jobs()
    if jobs > 1 and nbatch > 1:
        import multiprocessing as mp
        _CTX["gw"] = ctx
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as ex:
            parts = list(ex.map(_gw_worker, range(nbatch)))
    else:
        parts = [_gw_batch(ctx, b) for b in range(nbatch)]
    return GWResult(int(i), int(stages), int(reps), np.concatenate([p[0] for p in parts]),
                    np.concatenate([p[1] for p in parts]), sum(p[2] for p in parts))


def _gw_worker(b):
    return _gw_batch(_CTX["gw"], b)


# ---------------------------------------------------------------------------
# trace

@dataclass(frozen=True)
class TraceReport:
    radii: np.ndarray
    mean_counts: np.ndarray
    growth: np.ndarray          # mean_counts ** (1/m)
    sphere_sizes: np.ndarray | None

    def rows(self):
        return list(zip(self.radii.tolist(), self.mean_counts.tolist(), self.growth.tolist()))


def trace_spheres(run: BrwRun, sphere_sizes=None) -> TraceReport:
    """Mean number ``|H_m|`` of visited sites at word length ``m`` over included replicas."""
    if run.visited is None:
        raise ValidationError("run was made without trace recording")
    v = run.visited[run.included]
    mean = v.mean(axis=0)
    m = np.arange(v.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(m > 0, mean ** (1.0 / np.maximum(m, 1)), np.nan)
    return TraceReport(m, mean, growth, sphere_sizes)
