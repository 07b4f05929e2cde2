import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bundled_specs
from freebrw.errors import SpecMismatchError, TruncationDepthError, ValidationError
from freebrw.group_model import (
    BlockStepper, FreeProductSpec, ball_enumerate, cayley_ball, concat, cyclic, free_group,
    from_table, inverse, ladder, lattice, sphere_counts,
)

Z3Z2 = FreeProductSpec([cyclic(3), cyclic(2)], [0.5, 0.5], 0.5)

# Z/3 * Z/2 is isomorphic to PSL(2, Z) with a -> A (order 3) and b -> B (order 2).
_A = np.array([[0, -1], [1, 1]], dtype=object)
_B = np.array([[0, -1], [1, 0]], dtype=object)
_GEN = {(1, 1): _A, (1, 2): _A.dot(_A), (2, 1): _B}


def psl(w):
    m = np.array([[1, 0], [0, 1]], dtype=object)
    for blk in w.blocks:
        m = m.dot(_GEN[blk])
    if m[0, 0] < 0 or (m[0, 0] == 0 and m[0, 1] < 0):
        m = -m
    return tuple(int(v) for v in m.ravel())


def words(spec, max_blocks=4):
    def build(draw):
        k = draw(st.integers(0, max_blocks))
        blocks, last = [], 0
        for _ in range(k):
            i = draw(st.sampled_from([j for j in range(1, spec.r + 1) if j != last]))
            x = draw(st.integers(1, spec.factors[i - 1].order - 1))
            blocks.append((i, x))
            last = i
        return spec.word(blocks)
    return st.composite(lambda draw: build(draw))()


def test_concat_contraction_example():
    # a of order 2 and c in factor 1, b of order 3 in factor 2
    spec = FreeProductSpec([cyclic(4), cyclic(3)], [0.5, 0.5])
    u = spec.word([(1, 2), (2, 1), (1, 2)])
    v = spec.word([(1, 2), (2, 1), (1, 1)])
    assert concat(u, v) == spec.word([(1, 2), (2, 2), (1, 1)])


def test_identity_and_inverse():
    u = Z3Z2.parse_word("1:1.2:1.1:2")
    e = Z3Z2.identity
    assert concat(e, u) == u and concat(u, e) == u
    assert concat(u, inverse(u)) == e
    assert (e.length, e.block_length, e.type) == (0, 0, 0)


def test_mismatched_specs():
    other = FreeProductSpec([cyclic(3), cyclic(2)], [0.5, 0.5])
    with pytest.raises(SpecMismatchError):
        concat(Z3Z2.identity, other.identity)


@settings(max_examples=200, deadline=None)
@given(words(Z3Z2), words(Z3Z2))
def test_concat_matches_matrix_model(u, v):
    a, b = np.array(psl(u), dtype=object).reshape(2, 2), np.array(psl(v), dtype=object).reshape(2, 2)
    prod = a.dot(b)
    if prod[0, 0] < 0 or (prod[0, 0] == 0 and prod[0, 1] < 0):
        prod = -prod
    assert psl(concat(u, v)) == tuple(int(x) for x in prod.ravel())


def test_matrix_model_is_faithful_on_ball():
    ball = ball_enumerate(Z3Z2, 8)
    assert len({psl(w) for w in ball}) == len(ball)


@settings(max_examples=100, deadline=None)
@given(words(Z3Z2), words(Z3Z2), words(Z3Z2))
def test_associativity(u, v, w):
    assert concat(concat(u, v), w) == concat(u, concat(v, w))


@settings(max_examples=100, deadline=None)
@given(words(Z3Z2, 6))
def test_inverse_property(u):
    assert concat(inverse(u), u) == Z3Z2.identity
    assert inverse(inverse(u)) == u


def test_ball_small_radii():
    assert ball_enumerate(Z3Z2, 0) == [Z3Z2.identity]
    one = {Z3Z2.format_word(w) for w in ball_enumerate(Z3Z2, 1)}
    assert one == {"e", "1:1", "1:2", "2:1"}


def test_ladder_spheres():
    s = ladder(10).sphere_sizes()
    assert s[0] == 1 and s[1] == 3
    assert np.all(s[2:] == 4)


def test_lengths_match_cayley_bfs():
    for spec in (Z3Z2, FreeProductSpec([ladder(6), cyclic(3)], [0.5, 0.5])):
        dist = cayley_ball(spec, 6)
        for w in ball_enumerate(spec, 6):
            assert dist[w] == w.length
        assert len(dist) == len(ball_enumerate(spec, 6))


def test_block_length_counts_blocks():
    w = Z3Z2.parse_word("2:1.1:2.2:1")
    assert w.block_length == 3 and w.length == 3 and w.type == 2


def test_sphere_counts_z3z2():
    sc = sphere_counts(Z3Z2, 10, method="both")
    assert sc.total[0] == 1 and sc.total[1] == 3
    # S(m) = 3 * 2^(m/2 - 1)-style growth: check against enumeration directly
    enum = np.bincount([w.length for w in ball_enumerate(Z3Z2, 10)])
    assert np.array_equal(sc.total, enum)


def test_sphere_submultiplicative():
    s = sphere_counts(Z3Z2, 16).total
    for m in range(1, 9):
        for n in range(1, 9):
            assert s[m + n] <= s[m] * s[n]


def test_finite_factor_sphere_sum():
    for n in (2, 3, 5, 8):
        assert cyclic(n).sphere_sizes()[1:].sum() == n - 1


@pytest.mark.parametrize("name,spec", bundled_specs(), ids=lambda v: v if isinstance(v, str) else "")
def test_sphere_recurrence_matches_enumeration(name, spec):
    top = min([12] + [f.depth for f in spec.factors if f.is_truncated])
    # largest radius whose ball stays enumerable
    cum = np.cumsum(sphere_counts(spec, top).total)
    m = int(np.searchsorted(cum, 200_000, side="right")) - 1
    assert m >= 5
    sphere_counts(spec, m, method="both")


def test_truncated_depth_required():
    spec = FreeProductSpec([ladder(3), cyclic(3)], [0.5, 0.5])
    with pytest.raises(TruncationDepthError):
        ball_enumerate(spec, 5)


def test_truncated_kernel_rows():
    for f in (ladder(5), lattice(2, 4), free_group(2, 3)):
        rows = np.asarray(f.transition_matrix().sum(axis=1)).ravel()
        assert np.allclose(rows + f.exit_mass, 1.0)
        assert np.all(f.lengths <= f.depth)
        inner = f.lengths < f.depth
        assert np.all(f.exit_mass[inner] == 0)
        assert np.all(f.exit_mass[f.lengths == f.depth] > 0)


def test_spec_validation():
    with pytest.raises(ValidationError, match="excluded"):
        FreeProductSpec([cyclic(2), cyclic(2)], [0.5, 0.5])
    FreeProductSpec([cyclic(2)] * 3, [1 / 3] * 3)
    with pytest.raises(ValidationError, match="sum to 1"):
        FreeProductSpec([cyclic(3), cyclic(2)], [0.6, 0.6])
    with pytest.raises(ValidationError):
        FreeProductSpec([cyclic(3), cyclic(2)], [0.5, 0.5], metric_base=1.0)
    with pytest.raises(ValidationError):
        FreeProductSpec([cyclic(3)], [1.0])
    with pytest.raises(ValidationError, match="symmetric"):
        FreeProductSpec([cyclic(3, {1: 1.0}), cyclic(2)], [0.5, 0.5])
    FreeProductSpec([cyclic(3, {1: 1.0}), cyclic(2)], [0.5, 0.5], allow_nonsymmetric=True)


def test_factor_validation():
    with pytest.raises(ValidationError):
        cyclic(1)
    with pytest.raises(ValidationError, match="generate"):
        cyclic(4, {2: 1.0})
    with pytest.raises(ValidationError, match="identity"):
        cyclic(3, {0: 0.5, 1: 0.5})
    with pytest.raises(ValidationError, match="sum"):
        cyclic(3, {1: 0.5, 2: 0.4})
    with pytest.raises(ValidationError, match="associative|Latin"):
        from_table([[0, 1, 2], [1, 0, 2], [2, 2, 0]], {1: 1.0})


def test_from_table_s3():
    # symmetric group S3 with transpositions as steps
    import itertools
    perms = list(itertools.permutations(range(3)))
    idx = {p: k for k, p in enumerate(perms)}
    table = [[idx[tuple(p[q[j]] for j in range(3))] for q in perms] for p in perms]
    trans = [k for k, p in enumerate(perms) if sum(p[j] != j for j in range(3)) == 2]
    f = from_table(table, {k: 1 / 3 for k in trans}, name="S3")
    assert f.order == 6 and f.symmetric
    assert list(np.bincount(f.lengths)) == [1, 3, 2]


def test_parse_format_roundtrip():
    for text in ("e", "1:1", "2:1.1:2.2:1"):
        assert Z3Z2.format_word(Z3Z2.parse_word(text)) == text
    with pytest.raises(ValidationError):
        Z3Z2.parse_word("1:1.1:2")
    with pytest.raises(ValidationError):
        Z3Z2.parse_word("1:3")
    with pytest.raises(ValidationError):
        Z3Z2.parse_word("x")


@settings(max_examples=100, deadline=None)
@given(words(Z3Z2, 5), st.lists(st.integers(0, 2), max_size=8))
def test_block_stepper_matches_concat(u, steps):
    bs = BlockStepper(Z3Z2)
    rows = bs.encode(u, width=2)[None, :].copy()
    nb = np.array([u.block_length])
    lens = np.array([u.length])
    w = u
    for g in steps:
        rows, alive = bs.apply(rows, nb, lens, np.array([g]))
        assert alive[0]
        i, s, _ = Z3Z2.steps()[g]
        w = concat(w, Z3Z2.letter(i, s))
    assert bs.decode(rows[0], int(nb[0])) == w
    assert lens[0] == w.length


def test_block_stepper_kills_at_ball_edge():
    spec = FreeProductSpec([ladder(1), cyclic(3)], [0.5, 0.5])
    bs = BlockStepper(spec)
    steps = spec.steps()
    g = [k for k, (i, s, _) in enumerate(steps) if i == 1][0]
    rows = np.zeros((1, 4), dtype=bs.dtype)
    nb = np.zeros(1, dtype=np.int64)
    lens = np.zeros(1, dtype=np.int64)
    rows, alive = bs.apply(rows, nb, lens, np.array([g]))
    assert alive[0] and nb[0] == 1
    rows, alive = bs.apply(rows, nb, lens, np.array([g]))
    # second step along the same generator leaves the ball of radius 1 unless it cancels
    i, s, _ = steps[g]
    f = spec.factor(1)
    y = f.step_table[f.step_table[0, list(f.support).index(s)], list(f.support).index(s)]
    assert alive[0] == (y >= 0)
