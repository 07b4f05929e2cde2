"""Factor groups, free products and normal-form word arithmetic.

A free product element is stored in normal form as a tuple of blocks
``(factor_id, element_index)`` with ``factor_id`` in ``1..r`` and
``element_index`` never the identity (index 0 in every factor).  Adjacent
blocks always come from different factors.

Infinite factors are handled only through balls ``B_i(d)`` of a finite
radius: a walk step that leaves the ball sends the particle to an absorbing
tomb state.  Every result computed from such a factor therefore depends on
the depth ``d``, which is exposed through :attr:`FreeProductSpec.depths`.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .errors import SpecMismatchError, TruncationDepthError, ValidationError

_PMF_TOL = 1e-12


class FactorGroup:
    """A finite group with a step distribution, indexed by BFS-friendly integers.

    Parameters
    ----------
    identity : hashable
        Label of the identity element.
    mul : callable
        ``mul(x, y)`` returns the label of the product ``x*y``.
    inv : callable
        ``inv(x)`` returns the label of ``x**-1``.
    steps : dict
        Step distribution ``mu_i`` as ``{label: probability}``.
    elements : sequence, optional
        Complete list of labels for a finite group, identity first.  Element
        indices follow this order.  When omitted the elements are discovered
        by breadth-first search from the identity.
    name : str
        Human readable descriptor, e.g. ``"cyclic 3"``.
    """

    is_truncated = False
    depth = None
    exact = None

    def __init__(self, identity, mul, inv, steps, *, elements=None, name="",
                 sphere_tail=None, tail_radius=None, table=None, symmetric=None):
        self.name = name
        self._mul = mul
        self._inv = inv
        self.sphere_tail = sphere_tail
        self.tail_radius = tail_radius
        steps = {s: float(p) for s, p in steps.items() if p != 0}
        if any(p < 0 for p in steps.values()):
            raise ValidationError(f"{name}: step probabilities must be nonnegative")
        if identity in steps:
            raise ValidationError(f"{name}: step distribution must not charge the identity")
        if not steps:
            raise ValidationError(f"{name}: empty step distribution")
        total = sum(steps.values())
        if abs(total - 1.0) > _PMF_TOL:
            raise ValidationError(f"{name}: step probabilities sum to {total}, expected 1")

        labels = self._discover(identity, list(steps), elements)
        self.labels = labels
        self.index = {x: k for k, x in enumerate(labels)}
        n = len(labels)
        if n < 2:
            raise ValidationError(f"{name}: trivial factor")
        self.order = n
        self._table = table

        support = [self.index[s] for s in steps]
        order = np.argsort(support, kind="stable")
        self.support = np.asarray(support, dtype=np.int64)[order]
        self.support_probs = np.asarray(list(steps.values()), dtype=float)[order]
        self.pmf = np.zeros(n)
        self.pmf[self.support] = self.support_probs

        self.step_table = np.full((n, len(self.support)), -1, dtype=np.int64)
        for x in range(n):
            for j, s in enumerate(self.support):
                y = self._mul(labels[x], labels[s])
                self.step_table[x, j] = self.index.get(y, -1)

        self.inv = np.array([self.index.get(self._inv(x), -1) for x in labels], dtype=np.int64)
        if np.any(self.inv < 0):
            raise ValidationError(f"{name}: ball is not closed under inversion")
        self.lengths = self._bfs_lengths()
        if symmetric is None:
            symmetric = bool(np.allclose(self.pmf, self.pmf[self.inv], rtol=0, atol=1e-15))
        self.symmetric = symmetric

    def _discover(self, identity, gens, elements):
        if elements is not None:
            labels = list(elements)
            if labels[0] != identity:
                raise ValidationError(f"{self.name}: identity must be element 0")
            seen = {identity}
            queue = deque([identity])
            while queue:
                x = queue.popleft()
                for s in gens:
                    y = self._mul(x, s)
                    if y not in seen:
                        seen.add(y)
                        queue.append(y)
            if len(seen) != len(labels) or seen != set(labels):
                raise ValidationError(f"{self.name}: support of the step distribution does not generate the group")
            return labels
        return self._ball(identity, gens)

    def _ball(self, identity, gens):
        raise ValidationError(f"{self.name}: finite factors need an explicit element list")

    def _bfs_lengths(self):
        n = self.order
        dist = np.full(n, -1, dtype=np.int64)
        dist[0] = 0
        queue = deque([0])
        while queue:
            x = queue.popleft()
            for y in self.step_table[x]:
                if y >= 0 and dist[y] < 0:
                    dist[y] = dist[x] + 1
                    queue.append(y)
        if np.any(dist < 0):
            raise ValidationError(f"{self.name}: support of the step distribution does not generate the group")
        return dist

    @property
    def is_finite(self):
        return not self.is_truncated

    @property
    def exit_mass(self):
        """Probability of leaving the ball in one step, per element."""
        return np.where(self.step_table < 0, self.support_probs, 0.0).sum(axis=1)

    def mult(self, x, y):
        """Index of the product of element indices ``x`` and ``y``."""
        if self._table is not None:
            return int(self._table[x, y])
        z = self._mul(self.labels[x], self.labels[y])
        k = self.index.get(z)
        if k is None:
            raise TruncationDepthError(
                f"{self.name}: product leaves the ball of depth {self.depth}")
        return k

    def transition_matrix(self):
        """Dense or sparse one-step kernel on the elements (tomb column dropped)."""
        from scipy import sparse

        n = self.order
        rows = np.repeat(np.arange(n), len(self.support))
        cols = self.step_table.ravel()
        vals = np.tile(self.support_probs, n)
        keep = cols >= 0
        return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))

    def sphere_sizes(self):
        """``S_i(m)`` for ``m = 0..max length`` inside the factor (or ball)."""
        return np.bincount(self.lengths)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, order={self.order})"


class TruncatedFactor(FactorGroup):
    """Ball ``B_i(d)`` of an infinite group; steps leaving the ball hit a tomb."""

    is_truncated = True

    def __init__(self, identity, mul, inv, steps, depth, *, name="", sphere_tail=None,
                 tail_radius=None, rebuild=None):
        if int(depth) != depth or depth < 1:
            raise ValidationError(f"{name}: truncation depth must be a positive integer")
        self.depth = int(depth)
        self._rebuild = rebuild
        super().__init__(identity, mul, inv, steps, name=name,
                         sphere_tail=sphere_tail, tail_radius=tail_radius)

    def _ball(self, identity, gens):
        labels = [identity]
        seen = {identity: 0}
        frontier = [identity]
        for level in range(1, self.depth + 1):
            nxt = []
            for x in frontier:
                for s in gens:
                    y = self._mul(x, s)
                    if y not in seen:
                        seen[y] = level
                        labels.append(y)
                        nxt.append(y)
            frontier = nxt
        return labels

    def with_depth(self, depth):
        """The same underlying group truncated at another depth."""
        if self._rebuild is None:
            raise ValidationError(f"{self.name}: factor cannot be rebuilt at a new depth")
        return self._rebuild(depth)


# ---------------------------------------------------------------------------
# bundled factor constructors

def cyclic(n, pmf=None):
    """Cyclic group ``Z/n``; default step distribution is uniform on ``{1, n-1}``."""
    n = int(n)
    if n < 2:
        raise ValidationError("cyclic group needs n >= 2")
    if pmf is None:
        gens = sorted({1 % n, (n - 1) % n})
        pmf = {g: 1.0 / len(gens) for g in gens}
    pmf = {int(k) % n: p for k, p in pmf.items()}
    table = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n
    return FactorGroup(0, lambda x, y: (x + y) % n, lambda x: (-x) % n, pmf,
                       elements=list(range(n)), name=f"cyclic {n}", table=table)


def from_table(table, pmf, name="table"):
    """Finite group from a multiplication table with identity at index 0."""
    table = np.asarray(table, dtype=np.int64)
    n = table.shape[0]
    if table.shape != (n, n) or n < 2:
        raise ValidationError(f"{name}: multiplication table must be square with n >= 2")
    if table.min() < 0 or table.max() >= n:
        raise ValidationError(f"{name}: table entries out of range")
    ar = np.arange(n)
    if not (np.array_equal(table[0], ar) and np.array_equal(table[:, 0], ar)):
        raise ValidationError(f"{name}: element 0 must be the identity")
    for row in table:
        if len(set(row.tolist())) != n:
            raise ValidationError(f"{name}: table is not a Latin square")
    if n <= 200:
        left = table[table, :]                     # (x*y)*z indexed [x, y, z]
        right = table[:, table]                    # x*(y*z) indexed [x, y, z]
        if not np.array_equal(left, right):
            raise ValidationError(f"{name}: multiplication is not associative")
    inv = np.argmax(table == 0, axis=1)
    pmf = {int(k): p for k, p in pmf.items()}
    if any(k < 0 or k >= n for k in pmf):
        raise ValidationError(f"{name}: step distribution refers to unknown elements")
    return FactorGroup(0, lambda x, y: int(table[x, y]), lambda x: int(inv[x]), pmf,
                       elements=list(range(n)), name=name, table=table)


def lattice(k, depth, pmf=None):
    """Ball of radius ``depth`` in ``Z^k`` with nearest-neighbour steps by default."""
    k = int(k)
    if k < 1:
        raise ValidationError("lattice dimension must be >= 1")
    zero = (0,) * k
    tail = None
    if pmf is None:
        pmf = {}
        for j in range(k):
            for sgn in (1, -1):
                v = [0] * k
                v[j] = sgn
                pmf[tuple(v)] = 1.0 / (2 * k)

        def tail(z, k=k):
            return ((1 + z) / (1 - z)) ** k - 1

    return TruncatedFactor(
        zero, lambda x, y: tuple(a + b for a, b in zip(x, y)),
        lambda x: tuple(-a for a in x), pmf, depth,
        name=f"lattice {k} depth {depth}", sphere_tail=tail,
        tail_radius=1.0 if tail else None,
        rebuild=lambda d: lattice(k, d, None if tail else pmf))


def ladder(depth):
    """Ball in ``Z x Z/2`` with generators ``(+-1, 0)`` and ``(0, 1)`` of mass 1/3."""
    pmf = {(1, 0): 1 / 3, (-1, 0): 1 / 3, (0, 1): 1 / 3}
    return TruncatedFactor(
        (0, 0), lambda x, y: (x[0] + y[0], (x[1] + y[1]) % 2),
        lambda x: (-x[0], x[1]), pmf, depth, name=f"ladder depth {depth}",
        sphere_tail=lambda z: 3 * z + 4 * z * z / (1 - z), tail_radius=1.0,
        rebuild=ladder)


@dataclass(frozen=True)
class ExactFreeWalk:
    """Closed forms for simple random walk on the free group ``F_k``.

    ``F(w)`` is the first-visit function of a neighbour, solving
    ``F = w/(2k) + w (2k-1)/(2k) F^2``; then ``F(x, y | w) = F(w)^d(x, y)``.
    """

    k: int

    @property
    def radius(self):
        """Radius of convergence of ``F`` (finite value ``1/sqrt(2k-1)`` there)."""
        return self.k / math.sqrt(2 * self.k - 1)

    def F(self, w):
        k = self.k
        if w == 0:
            return 0.0
        disc = k * k - (2 * k - 1) * w * w
        if disc < 0:
            return math.nan
        # rationalised form of (k - sqrt(disc)) / ((2k-1) w), stable for small w
        return w / (k + math.sqrt(disc))

    def dF(self, w):
        k = self.k
        disc = k * k - (2 * k - 1) * w * w
        if disc <= 0:
            return math.inf
        s = math.sqrt(disc)
        return 1.0 / (k + s) + (2 * k - 1) * w * w / ((k + s) ** 2 * s)

    def sphere_series(self, w):
        """``z -> sum_{x != e} F(e, x | w) z^|x|`` and its radius."""
        k, f = self.k, self.F(w)
        c = (2 * k - 1) * f
        radius = math.inf if c == 0 else 1.0 / c

        def series(z):
            z = np.asarray(z, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(c * z < 1, 2 * k * f * z / (1 - c * z), np.inf)
            return out if out.ndim else float(out)

        return series, radius


def free_group(k, depth):
    """Ball in the free group on ``k`` generators with simple random walk steps.

    The ball carries words, the oracle and the simulator; the generating
    functions use the exact closed forms of :class:`ExactFreeWalk`.
    """
    k = int(k)
    if k < 1:
        raise ValidationError("free group rank must be >= 1")

    def mul(x, y):
        out = list(x)
        for g in y:
            if out and out[-1] == -g:
                out.pop()
            else:
                out.append(g)
        return tuple(out)

    pmf = {}
    for g in range(1, k + 1):
        pmf[(g,)] = pmf[(-g,)] = 1.0 / (2 * k)
    f = TruncatedFactor(
        (), mul, lambda x: tuple(-g for g in reversed(x)), pmf, depth,
        name=f"free {k} depth {depth}",
        sphere_tail=lambda z: 2 * k * z / (1 - (2 * k - 1) * z),
        tail_radius=1.0 / (2 * k - 1), rebuild=lambda d: free_group(k, d))
    f.exact = ExactFreeWalk(k)
    return f


# ---------------------------------------------------------------------------
# free products and words

@dataclass(frozen=True)
class Word:
    """Normal-form element of a free product."""

    blocks: tuple
    length: int
    spec: "FreeProductSpec" = field(compare=False, repr=False, hash=False)

    @property
    def block_length(self):
        return len(self.blocks)

    @property
    def type(self):
        return self.blocks[-1][0] if self.blocks else 0

    def __str__(self):
        return self.spec.format_word(self) if self.spec is not None else repr(self.blocks)


class FreeProductSpec:
    """Free product of ``r >= 2`` factor groups with mixing weights.

    The random walk steps with ``mu = sum_i alpha_i mu_i``.  ``metric_base``
    is the base ``a`` of the ultrametric ``a**(length of common prefix)`` on
    the space of ends.
    """

    def __init__(self, factors: Sequence[FactorGroup], weights, metric_base=0.5, *,
                 allow_nonsymmetric=False, name=""):
        factors = list(factors)
        r = len(factors)
        if r < 2:
            raise ValidationError("a free product needs at least two factors")
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (r,):
            raise ValidationError(f"expected {r} weights, got {weights.size}")
        if np.any(weights <= 0):
            raise ValidationError("weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValidationError("weights must sum to 1")
        if not 0 < metric_base < 1:
            raise ValidationError("metric base must lie in (0, 1)")
        for f in factors:
            if f.order < 2:
                raise ValidationError(f"{f.name}: trivial factor")
        if r == 2 and all(f.is_finite and f.order == 2 for f in factors):
            raise ValidationError(
                "Z/2 * Z/2 is excluded: the free product of two groups of order 2 is amenable "
                "and its space of ends has only two points")
        nonsym = [f.name for f in factors if not f.symmetric]
        if nonsym:
            if not allow_nonsymmetric:
                raise ValidationError(f"step distribution is not symmetric in: {', '.join(nonsym)}")
            if any(f.is_truncated for f in factors):
                raise ValidationError("nonsymmetric steps are only allowed when all factors are finite")
        weights.setflags(write=False)
        self.factors = tuple(factors)
        self.weights = weights
        self.metric_base = float(metric_base)
        self.allow_nonsymmetric = bool(allow_nonsymmetric)
        self.name = name
        self.identity = Word((), 0, self)

    @property
    def r(self):
        return len(self.factors)

    def factor(self, i):
        """Factor with 1-based id ``i``."""
        return self.factors[i - 1]

    @property
    def depths(self):
        return tuple(f.depth for f in self.factors)

    @property
    def has_truncated(self):
        return any(f.is_truncated for f in self.factors)

    def with_depth(self, depth):
        """Copy with every truncated factor rebuilt at ``depth``."""
        factors = [f.with_depth(depth) if f.is_truncated else f for f in self.factors]
        return FreeProductSpec(factors, self.weights, self.metric_base,
                               allow_nonsymmetric=self.allow_nonsymmetric, name=self.name)

    def word(self, blocks: Iterable) -> Word:
        """Validated normal-form word from ``(factor_id, element)`` pairs."""
        blocks = tuple((int(i), int(x)) for i, x in blocks)
        length = 0
        prev = 0
        for i, x in blocks:
            if not 1 <= i <= self.r:
                raise ValidationError(f"unknown factor id {i}")
            f = self.factors[i - 1]
            if not 0 < x < f.order:
                raise ValidationError(f"element {x} is not a non-identity element of factor {i}")
            if i == prev:
                raise ValidationError("adjacent blocks must come from different factors")
            prev = i
            length += int(f.lengths[x])
        return Word(blocks, length, self)

    def letter(self, i, x) -> Word:
        """Word of a single factor element (identity allowed)."""
        return self.identity if x == 0 else self.word([(i, x)])

    def steps(self):
        """List of ``(factor_id, element, probability)`` for the step law ``mu``."""
        out = []
        for i, f in enumerate(self.factors, start=1):
            for s, p in zip(f.support, f.support_probs):
                out.append((i, int(s), float(self.weights[i - 1] * p)))
        return out

    def parse_word(self, text: str) -> Word:
        """Parse ``"1:1.2:1"`` style block lists; ``"e"`` is the identity."""
        text = text.strip()
        if text in ("", "e"):
            return self.identity
        blocks = []
        for part in text.split("."):
            try:
                i, x = part.split(":")
                blocks.append((int(i), int(x)))
            except ValueError:
                raise ValidationError(f"cannot parse word block {part!r}") from None
        return self.word(blocks)

    def format_word(self, w: Word) -> str:
        return ".".join(f"{i}:{x}" for i, x in w.blocks) or "e"

    def __repr__(self):
        names = " * ".join(f.name for f in self.factors)
        return f"FreeProductSpec({names}, weights={self.weights.tolist()}, a={self.metric_base})"


def _check_same(u: Word, v: Word):
    if u.spec is not v.spec:
        raise SpecMismatchError("words belong to different free-product specs")


def concat(u: Word, v: Word) -> Word:
    """Normal form of the product ``u v`` with contraction and cancellation."""
    _check_same(u, v)
    spec = u.spec
    stack = list(u.blocks)
    for i, x in v.blocks:
        if stack and stack[-1][0] == i:
            y = spec.factors[i - 1].mult(stack[-1][1], x)
            if y == 0:
                stack.pop()
            else:
                stack[-1] = (i, y)
        else:
            stack.append((i, x))
    length = sum(int(spec.factors[i - 1].lengths[x]) for i, x in stack)
    return Word(tuple(stack), length, spec)


def inverse(u: Word) -> Word:
    spec = u.spec
    blocks = tuple((i, int(spec.factors[i - 1].inv[x])) for i, x in reversed(u.blocks))
    return Word(blocks, sum(int(spec.factors[i - 1].lengths[x]) for i, x in blocks), spec)


def _require_depth(spec, m):
    for f in spec.factors:
        if f.is_truncated and f.depth < m:
            raise TruncationDepthError(
                f"{f.name}: truncation depth {f.depth} is smaller than the requested radius {m}")


def ball_enumerate(spec: FreeProductSpec, m: int) -> list:
    """All words with ``l(x) <= m``, each exactly once, shortest first."""
    if m < 0:
        raise ValidationError("radius must be nonnegative")
    _require_depth(spec, m)
    by_factor = []
    for f in spec.factors:
        by_factor.append([(x, int(f.lengths[x])) for x in range(1, f.order) if f.lengths[x] <= m])
    out = []

    def extend(blocks, last, length):
        out.append(Word(tuple(blocks), length, spec))
        for i in range(1, spec.r + 1):
            if i == last:
                continue
            for x, lx in by_factor[i - 1]:
                if length + lx <= m:
                    blocks.append((i, x))
                    extend(blocks, i, length + lx)
                    blocks.pop()

    extend([], 0, 0)
    out.sort(key=lambda w: (w.length, w.blocks))
    return out


@dataclass(frozen=True)
class SphereCounts:
    """``factor[i-1, m] = S_i(m)`` and ``total[m] = S(m)``."""

    factor: np.ndarray
    total: np.ndarray


def _factor_spheres(spec, m_max):
    _require_depth(spec, m_max)
    table = np.zeros((spec.r, m_max + 1), dtype=np.int64)
    for i, f in enumerate(spec.factors):
        sizes = f.sphere_sizes()[: m_max + 1]
        table[i, : len(sizes)] = sizes
    return table


def sphere_counts(spec: FreeProductSpec, m_max: int, method="recurrence") -> SphereCounts:
    """Sphere sizes of the free product up to radius ``m_max``.

    ``method`` is ``"recurrence"`` (block composition), ``"enumerate"``
    (explicit ball) or ``"both"``, which computes the two and insists they
    agree.
    """
    if method not in ("recurrence", "enumerate", "both"):
        raise ValidationError(f"unknown method {method!r}")
    per_factor = _factor_spheres(spec, m_max)
    if method in ("recurrence", "both"):
        # ending[i, m]: words of length m whose last block lies in factor i
        ending = np.zeros((spec.r, m_max + 1), dtype=object)
        total = np.zeros(m_max + 1, dtype=object)
        total[0] = 1
        for m in range(1, m_max + 1):
            for i in range(spec.r):
                acc = 0
                for k in range(1, m + 1):
                    if per_factor[i, k]:
                        acc += int(per_factor[i, k]) * (total[m - k] - ending[i, m - k])
                ending[i, m] = acc
            total[m] = ending[:, m].sum()
        rec = np.array(total.tolist(), dtype=np.int64)
    if method in ("enumerate", "both"):
        lengths = [w.length for w in ball_enumerate(spec, m_max)]
        enum = np.bincount(lengths, minlength=m_max + 1).astype(np.int64)
    if method == "both" and not np.array_equal(rec, enum):
        raise AssertionError(f"sphere counts disagree: recurrence {rec} vs enumeration {enum}")
    return SphereCounts(per_factor, rec if method != "enumerate" else enum)


def cayley_ball(spec: FreeProductSpec, m: int) -> dict:
    """Graph distances from ``e`` in the Cayley graph, by BFS up to radius ``m``.

    Uses only :func:`concat` with single-generator words, so it is an
    independent check of the block-sum length formula.
    """
    _require_depth(spec, m)
    gens = [spec.letter(i, s) for i, s, _ in spec.steps()]
    dist = {spec.identity: 0}
    frontier = [spec.identity]
    for level in range(1, m + 1):
        nxt = []
        for w in frontier:
            for g in gens:
                v = concat(w, g)
                if v not in dist:
                    dist[v] = level
                    nxt.append(v)
        frontier = nxt
    return dist


def random_word(spec: FreeProductSpec, rng: np.random.Generator, max_blocks: int) -> Word:
    """Uniformly random block count up to ``max_blocks`` with random blocks."""
    k = int(rng.integers(0, max_blocks + 1))
    blocks = []
    last = 0
    for _ in range(k):
        choices = [i for i in range(1, spec.r + 1) if i != last]
        i = choices[int(rng.integers(len(choices)))]
        x = int(rng.integers(1, spec.factors[i - 1].order))
        blocks.append((i, x))
        last = i
    return spec.word(blocks)


# ---------------------------------------------------------------------------
# vectorised word arithmetic

class BlockStepper:
    """Applies random-walk steps to many words stored as rows of block codes.

    Block ``(i, x)`` is encoded as ``offset[i] + x`` (codes start at 1, 0
    marks an empty slot).  A population is a 2-d code array ``rows`` with
    the block count ``nb`` and the word length ``lens`` per row.  Global step
    ``g`` enumerates the pairs ``(factor, support element)`` of ``mu``.
    """

    def __init__(self, spec: FreeProductSpec):
        self.spec = spec
        sizes = [f.order - 1 for f in spec.factors]
        self.offset = np.concatenate([[0], np.cumsum(sizes)])   # offset[i-1] for factor i
        ncodes = int(self.offset[-1])
        self.ncodes = ncodes
        self.dtype = np.int16 if ncodes < 2 ** 15 - 1 else np.int32
        self.code_factor = np.zeros(ncodes + 1, dtype=np.int64)
        self.code_elem = np.zeros(ncodes + 1, dtype=np.int64)
        self.code_len = np.zeros(ncodes + 1, dtype=np.int64)
        for i, f in enumerate(spec.factors, start=1):
            sl = slice(self.offset[i - 1] + 1, self.offset[i] + 1)
            self.code_factor[sl] = i
            self.code_elem[sl] = np.arange(1, f.order)
            self.code_len[sl] = f.lengths[1:]
        steps = spec.steps()
        self.nsteps = len(steps)
        self.step_factor = np.array([i for i, _, _ in steps], dtype=np.int64)
        self.step_prob = np.array([p for _, _, p in steps])
        self.step_code = np.array([self.code(i, s) for i, s, _ in steps], dtype=np.int64)
        # trans[c, g]: code after applying step g to a top block with code c of the same factor
        self.trans = np.full((ncodes + 1, self.nsteps), -2, dtype=np.int64)
        for g, (i, s, _) in enumerate(steps):
            f = spec.factors[i - 1]
            j = int(np.searchsorted(f.support, s))
            for x in range(1, f.order):
                y = f.step_table[x, j]
                self.trans[self.code(i, x), g] = -1 if y < 0 else (0 if y == 0 else self.code(i, y))

    def code(self, i, x):
        return int(self.offset[i - 1] + x)

    def encode(self, w: Word, width=None):
        width = max(width or 0, w.block_length)
        row = np.zeros(width, dtype=self.dtype)
        for k, (i, x) in enumerate(w.blocks):
            row[k] = self.code(i, x)
        return row

    def decode(self, row, nb) -> Word:
        blocks = [(int(self.code_factor[c]), int(self.code_elem[c])) for c in row[:nb]]
        return self.spec.word(blocks)

    def apply(self, rows, nb, lens, g):
        """Apply step ``g[k]`` to row ``k`` in place.

        Returns ``(rows, alive)``; ``rows`` may be a widened copy.  Rows whose
        step leaves a truncation ball are marked dead and otherwise left
        untouched.
        """
        n = len(nb)
        idx = np.arange(n)
        top = np.where(nb > 0, rows[idx, np.maximum(nb - 1, 0)], 0)
        f = self.step_factor[g]
        same = self.code_factor[top] == f
        new = np.where(same, self.trans[top, g], self.step_code[g])
        alive = new >= 0
        push = ~same
        if push.any() and int(nb[push].max()) + 1 > rows.shape[1]:
            grow = np.zeros((rows.shape[0], max(8, rows.shape[1] // 2)), dtype=rows.dtype)
            rows = np.concatenate([rows, grow], axis=1)
        mod = same & alive
        pos = np.where(push, nb, nb - 1)
        sel = mod | push
        rows[idx[sel], pos[sel]] = new[sel]
        lens[mod] += self.code_len[new[mod]] - self.code_len[top[mod]]
        lens[push] += self.code_len[new[push]]
        pop = mod & (new == 0)
        nb[pop] -= 1
        nb[push] += 1
        return rows, alive

    def hash_rows(self, rows, nb):
        """Two independent 64-bit polynomial hashes of each row's blocks."""
        width = rows.shape[1]
        mask = np.arange(width)[None, :] < nb[:, None]
        vals = np.where(mask, rows.astype(np.uint64), np.uint64(0))
        out = []
        for base in (np.uint64(0x9E3779B97F4A7C15), np.uint64(0xC2B2AE3D27D4EB4F)):
            powers = np.ones(width, dtype=np.uint64)
            for k in range(1, width):
                powers[k] = powers[k - 1] * base
            with np.errstate(over="ignore"):
                out.append((vals * powers[None, :]).sum(axis=1, dtype=np.uint64) + nb.astype(np.uint64))
        return out[0], out[1]


def all_steps_words(spec: FreeProductSpec):
    """Support of ``mu`` as single-block words with their probabilities."""
    return [(spec.letter(i, s), p) for i, s, p in spec.steps()]


def iter_words_by_block_length(spec: FreeProductSpec, max_blocks: int):
    """All words with at most ``max_blocks`` blocks (finite factors only)."""
    if spec.has_truncated:
        raise ValidationError("block-length enumeration needs finite factors")
    yield spec.identity
    for k in range(1, max_blocks + 1):
        for factors in itertools.product(range(1, spec.r + 1), repeat=k):
            if any(a == b for a, b in zip(factors, factors[1:])):
                continue
            ranges = [range(1, spec.factors[i - 1].order) for i in factors]
            for elems in itertools.product(*ranges):
                yield spec.word(zip(factors, elems))
