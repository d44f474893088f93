import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from aisnap.core import (BlockVector, FixedPointMap, LinearMap, NormSpec, StructureError,
                         UnsupportedMapError, adjusted_threshold, delta_coeffs, mixed_residual,
                         norm, residual)

from conftest import random_linear


class Identity(FixedPointMap):
    def __init__(self, sizes):
        self.sizes = tuple(sizes)

    def eval_block(self, i, y):
        return np.array(y[i])

    def dependency(self, i):
        return (i,)


class Square(FixedPointMap):
    sizes = (1, 1)

    def eval_block(self, i, y):
        return y[i] ** 2

    def dependency(self, i):
        return (i,)


def test_norm_examples():
    assert norm(BlockVector.zeros((2, 3)), NormSpec.lp(2)) == 0
    assert norm(BlockVector.zeros((2, 3)), NormSpec.max_weighted()) == 0
    assert norm([np.array([3.0]), np.array([-4.0])], NormSpec.lp(2)) == 5.0
    assert norm([np.array([1.0]), np.array([2.0]), np.array([3.0])],
                NormSpec.max_weighted([1, 1, 0.5])) == 6.0


def test_norm_spec_validation():
    with pytest.raises(ValueError):
        NormSpec.lp(0.5)
    with pytest.raises(ValueError):
        NormSpec.max_weighted([1.0, 0.0])
    with pytest.raises(StructureError):
        norm([np.ones(1)] * 3, NormSpec.max_weighted([1.0, 1.0]))


def test_block_norm_is_max_abs():
    x = [np.array([1.0, -7.0, 2.0]), np.array([3.0])]
    assert norm(x, NormSpec.lp(1)) == 10.0
    assert norm(x, NormSpec.max_weighted()) == 7.0


# p-th powers are summed directly (as the reduction does), so keep magnitudes
# where they neither underflow nor overflow
def _sane(v):
    return v == 0 or 1e-60 < abs(v)


elem = st.floats(-1e6, 1e6, allow_nan=False).filter(_sane)
vec = st.lists(elem, min_size=6, max_size=6)
specs = st.sampled_from([NormSpec.lp(1), NormSpec.lp(2), NormSpec.lp(3.5),
                         NormSpec.max_weighted(), NormSpec.max_weighted([0.5, 2.0, 1.0])])


@settings(max_examples=300, deadline=None)
@given(vec, vec, st.floats(-1e3, 1e3, allow_nan=False).filter(_sane), specs)
def test_norm_axioms(a, b, s, spec):
    sizes = (2, 3, 1)
    x = BlockVector.from_flat(np.array(a), sizes)
    y = BlockVector.from_flat(np.array(b), sizes)
    nx, ny, nxy = norm(x, spec), norm(y, spec), norm(x + y, spec)
    assert nxy <= (nx + ny) * (1 + 1e-12) + 1e-300
    assert norm(x * s, spec) == pytest.approx(abs(s) * nx, rel=1e-12, abs=1e-300)
    assert (nx == 0) == (not np.any(x.flat()))


def test_residual_examples():
    x = BlockVector([np.array([1.0, 2.0]), np.array([3.0])])
    assert residual(Identity((2, 1)), x, NormSpec.lp(2)) == 0
    half = LinearMap({(0, 0): np.array([[0.5]])}, [np.zeros(1)])
    assert residual(half, [np.array([2.0])], NormSpec.lp(1)) == 1.0


def test_residual_matches_dense(rng):
    sizes = (3, 1, 4, 2, 2)
    f = random_linear(5, sizes, 0.5, rng, sparse_blocks=True)
    blocks, c = f.linear_form()
    M = sparse.bmat([[blocks.get((i, j)) for j in range(5)] for i in range(5)]).toarray()
    for spec in (NormSpec.lp(2), NormSpec.max_weighted([1, 2, 3, 4, 5])):
        x = rng.standard_normal(sum(sizes))
        r = M @ x + np.concatenate(c) - x
        expect = norm(BlockVector.from_flat(r, sizes), spec)
        assert residual(f, BlockVector.from_flat(x, sizes), spec) == pytest.approx(expect, rel=1e-13)


def test_residual_structure_error():
    with pytest.raises(StructureError):
        residual(Identity((2, 1)), [np.ones(1), np.ones(1)], NormSpec.lp(2))


def test_mixed_residual_consistent_equals_residual(rng):
    sizes = (2, 2, 3)
    f = random_linear(3, sizes, 0.7, rng)
    y = [rng.standard_normal(s) for s in sizes]
    spec = NormSpec.lp(2)
    value, xbar = mixed_residual(f, [y, y, y], spec)
    assert value == residual(f, y, spec)
    assert xbar.bitwise_equal(BlockVector(y))


def test_mixed_residual_identity_is_zero(rng):
    ys = [[rng.standard_normal(2), rng.standard_normal(1)] for _ in range(2)]
    value, xbar = mixed_residual(Identity((2, 1)), ys, NormSpec.lp(2))
    assert value == 0
    assert np.array_equal(xbar[0], ys[0][0]) and np.array_equal(xbar[1], ys[1][1])


def test_mixed_residual_blockwise(rng):
    sizes = (2, 3, 1, 2)
    f = random_linear(4, sizes, 0.6, rng)
    blocks, c = f.linear_form()
    ys = [[rng.standard_normal(s) for s in sizes] for _ in range(4)]
    diffs = []
    for i in range(4):
        acc = c[i].copy()
        for j in range(4):
            if (i, j) in blocks:
                acc = acc + blocks[(i, j)] @ ys[i][j]
        diffs.append(acc - ys[i][i])
    spec = NormSpec.lp(3)
    assert mixed_residual(f, ys, spec)[0] == pytest.approx(norm(diffs, spec), rel=1e-13)


def test_delta_coeffs_examples():
    z = LinearMap({}, [np.zeros(2), np.zeros(1)])
    d = delta_coeffs(z)
    assert d.deltaF == 0 and not d.delta.any()
    f = LinearMap({(0, 0): np.array([[0.5]]), (0, 1): np.array([[0.25]]),
                   (1, 0): np.array([[0.1]]), (1, 1): np.array([[0.3]])},
                  [np.zeros(1), np.zeros(1)])
    assert delta_coeffs(f).deltaF == pytest.approx(0.75)
    with pytest.raises(UnsupportedMapError):
        delta_coeffs(Square())


def test_delta_coeffs_probe(rng):
    """Perturbation probing reproduces the closed-form coefficients."""
    sizes = (3, 2, 4)
    f = random_linear(3, sizes, 0.8, rng)
    d = delta_coeffs(f)
    x = [rng.standard_normal(s) for s in sizes]
    for i in range(3):
        for j in range(3):
            if j not in f.dependency(i):
                assert d.delta[i, j] == 0
                continue
            blocks, _ = f.linear_form()
            # the worst unit perturbation is the sign pattern of the maximal row
            m = blocks[(i, j)]
            row = np.argmax(np.abs(m).sum(axis=1))
            e = np.sign(m[row])
            e[e == 0] = 1
            x2 = list(x)
            x2[j] = x[j] + e
            probe = np.max(np.abs(f.eval_block(i, x2) - f.eval_block(i, x)))
            assert probe == pytest.approx(d.delta[i, j], rel=1e-12)
    assert d.deltaF == pytest.approx(d.delta.sum(axis=1).max())


def test_delta_coeffs_sensitivity_bound(rng):
    """Random perturbations below eps move a block by less than delta_ij * eps."""
    sizes = (2, 3, 2, 1)
    f = random_linear(4, sizes, 0.6, rng, sparse_blocks=True)
    d = delta_coeffs(f)
    eps = 1e-3
    for _ in range(1000):
        x = [rng.standard_normal(s) for s in sizes]
        j = int(rng.integers(4))
        x2 = list(x)
        x2[j] = x[j] + rng.uniform(-1, 1, sizes[j]) * eps * rng.uniform(0, 1)
        for i in range(4):
            moved = np.max(np.abs(f.eval_block(i, x2) - f.eval_block(i, x)))
            slack = np.spacing(max(np.max(np.abs(f.eval_block(i, x))), 1.0)) * 8
            assert moved <= d.delta[i, j] * eps + slack
            if d.delta[i, j] == 0:
                assert moved == 0


def test_adjusted_threshold_examples():
    assert adjusted_threshold(1e-6, 0, (1, 1, 1)) == 1e-6
    assert adjusted_threshold(1e-6, 4, (1, 1, 1)) == pytest.approx(2e-7)
    assert adjusted_threshold(1e-6, 2, (0.5, 2)) == pytest.approx(5e-7)
    with pytest.raises(ValueError):
        adjusted_threshold(0.0, 1, (1,))
    with pytest.raises(ValueError):
        adjusted_threshold(1e-6, 1, (1, -1))


@given(st.floats(1e-12, 1.0), st.integers(0, 50), st.lists(st.floats(0.01, 10), min_size=1,
                                                             max_size=5))
def test_adjusted_threshold_monotone(eps, eta, w):
    a = adjusted_threshold(eps, eta, w)
    assert adjusted_threshold(eps, eta + 1, w) < a
    assert adjusted_threshold(eps * 2, eta, w) > a


def test_linear_map_structure():
    with pytest.raises(StructureError):
        LinearMap({(0, 1): np.ones((2, 2))}, [np.zeros(1), np.zeros(2)])
    with pytest.raises(StructureError):
        LinearMap({(0, 3): np.ones((1, 1))}, [np.zeros(1)])
    f = LinearMap({(1, 0): np.ones((1, 1))}, [np.zeros(1), np.zeros(1)])
    assert f.dependency(1) == (0, 1) and f.dependency(0) == (0,)
    assert f.dependents(0) == (1,)


def test_eval_sparse_and_dense_agree(rng):
    sizes = (3, 2, 2)
    dense_f = random_linear(3, sizes, 0.9, np.random.default_rng(7))
    sparse_f = random_linear(3, sizes, 0.9, np.random.default_rng(7), sparse_blocks=True)
    x = [rng.standard_normal(s) for s in sizes]
    for i in range(3):
        assert np.allclose(dense_f.eval_block(i, x), sparse_f.eval_block(i, x), rtol=1e-14)
