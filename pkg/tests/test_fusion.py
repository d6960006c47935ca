"""Fusion operations: algebraic identities and gradient behavior."""

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from latticenet.fusion import FusionOp, fuse_backward, fuse_forward
from latticenet.tensor import ShapeMismatchError


def streams(rng, n, shape=(2, 3, 3, 2)):
    return [rng.normal(size=shape) for _ in range(n)]


def test_parse_names():
    assert FusionOp.parse("average") is FusionOp.AVERAGE
    assert FusionOp.parse("AbsDiff") is FusionOp.ABSDIFF
    with pytest.raises(ValueError, match="unknown fusion"):
        FusionOp.parse("median")


def test_average_of_identical_is_identity(rng):
    a = rng.normal(size=(3, 4, 4, 2))
    out = fuse_forward(FusionOp.AVERAGE, [a, a.copy()])
    assert np.array_equal(out, a)


def test_average_commutes(rng):
    a, b = streams(rng, 2)
    ab = fuse_forward(FusionOp.AVERAGE, [a, b])
    ba = fuse_forward(FusionOp.AVERAGE, [b, a])
    assert np.max(np.abs(ab - ba)) <= 1e-6


def test_add_matches_sum(rng):
    xs = streams(rng, 3)
    out = fuse_forward(FusionOp.ADD, xs)
    assert np.max(np.abs(out - (xs[0] + xs[1] + xs[2]))) <= 1e-6


def test_sub_antisymmetric(rng):
    a, b = streams(rng, 2)
    assert np.max(np.abs(fuse_forward(FusionOp.SUB, [a, b]) + fuse_forward(FusionOp.SUB, [b, a]))) <= 1e-6


def test_absdiff_symmetric_and_nonnegative(rng):
    a, b = streams(rng, 2)
    ab = fuse_forward(FusionOp.ABSDIFF, [a, b])
    ba = fuse_forward(FusionOp.ABSDIFF, [b, a])
    assert np.array_equal(ab, ba)
    assert ab.min() >= 0
    assert np.max(np.abs(fuse_forward(FusionOp.ABSDIFF, [a, a.copy()]))) == 0.0


def test_single_stream_average_and_add_are_identity(rng):
    (a,) = streams(rng, 1)
    assert np.array_equal(fuse_forward(FusionOp.AVERAGE, [a]), a)
    assert np.array_equal(fuse_forward(FusionOp.ADD, [a]), a)


@pytest.mark.parametrize("op", [FusionOp.SUB, FusionOp.ABSDIFF])
def test_binary_ops_demand_two_streams(rng, op):
    with pytest.raises(ValueError):
        fuse_forward(op, streams(rng, 3))
    with pytest.raises(ValueError):
        fuse_forward(op, streams(rng, 1))


def test_shape_mismatch_rejected(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    with pytest.raises(ShapeMismatchError):
        fuse_forward(FusionOp.ADD, [a, b])


@pytest.mark.parametrize("op,n", [
    (FusionOp.AVERAGE, 2),
    (FusionOp.AVERAGE, 3),
    (FusionOp.ADD, 2),
    (FusionOp.SUB, 2),
    (FusionOp.ABSDIFF, 2),
])
def test_backward_matches_finite_difference(rng, op, n):
    xs = streams(rng, n, shape=(2, 3, 3))
    gy = rng.normal(size=(2, 3, 3))
    grads = fuse_backward(op, xs, gy)
    for k in range(n):
        def scalar(v, k=k):
            ys = [v if i == k else xs[i] for i in range(n)]
            return float(np.sum(fuse_forward(op, ys) * gy))
        num = numeric_grad(scalar, xs[k].copy())
        assert rel_err(grads[k], num) <= 1e-6


def test_absdiff_subgradient_zero_at_ties(rng):
    a = rng.normal(size=(3, 3))
    ga, gb = fuse_backward(FusionOp.ABSDIFF, [a, a.copy()], np.ones((3, 3)))
    assert np.max(np.abs(ga)) == 0.0
    assert np.max(np.abs(gb)) == 0.0


def test_backward_returns_independent_buffers(rng):
    xs = streams(rng, 3, shape=(2, 2))
    gy = np.ones((2, 2))
    grads = fuse_backward(FusionOp.ADD, xs, gy)
    grads[1] += 100.0
    assert np.max(np.abs(grads[2] - grads[0])) == 0.0
