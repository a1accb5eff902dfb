import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kqcs.core import GridShape, to_grid
from kqcs.spatial import SpatialTransform, iso_tv_norm


def dense(op, n):
    return np.column_stack([op(e) for e in np.eye(n)])


@pytest.mark.parametrize("kind,dims", [("haar", (8, 4)), ("haar", (4, 4, 2)), ("gradient", (5, 3)),
                                       ("gradient", (3, 4, 2))])
def test_adjoint(kind, dims, rng):
    T = SpatialTransform(kind, GridShape(*dims))
    x = rng.normal(size=(T.shape.V, 3))
    c = rng.normal(size=(T.n_psi, 3))
    lhs = np.sum(T.analyze(x) * c)
    rhs = np.sum(x * T.synthesize(c))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(st.sampled_from([(2, 2), (4, 8), (8, 8), (2, 4, 8)]), st.integers(0, 2**31))
def test_haar_orthonormal_round_trip(dims, seed):
    T = SpatialTransform("haar", GridShape(*dims))
    x = np.random.default_rng(seed).normal(size=(T.shape.V, 2))
    c = T.analyze(x)
    assert np.linalg.norm(c) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(T.synthesize(c), x, atol=1e-12)


def test_haar_constant_image_is_one_coefficient():
    T = SpatialTransform("haar", GridShape(4, 4))
    c = T.analyze(np.ones(16))
    assert c[0] == pytest.approx(4.0)
    assert np.abs(c[1:]).max() < 1e-14


def test_haar_needs_power_of_two():
    with pytest.raises(ValueError, match="power-of-two"):
        SpatialTransform("haar", GridShape(6, 4))


def test_unknown_kind():
    with pytest.raises(ValueError):
        SpatialTransform("curvelet", GridShape(4, 4))


def test_aliases():
    assert SpatialTransform("tv", GridShape(2, 2)).kind == "gradient"
    assert SpatialTransform("isotv", GridShape(2, 2)).group_size == 2
    assert SpatialTransform("haar", GridShape(2, 2)).group_size == 1


def test_gradient_of_ramp():
    shape = GridShape(4, 3)
    T = SpatialTransform("gradient", shape)
    x = np.arange(4.0)[:, None] * np.ones((1, 3))  # value = x index
    g = T.analyze(x.reshape(-1, order="F"))
    parts = g.reshape(shape.V, 2)
    dx = to_grid(parts[:, 0], shape)
    dy = to_grid(parts[:, 1], shape)
    np.testing.assert_array_equal(dx[:-1], 1.0)
    np.testing.assert_array_equal(dx[-1], 0.0)  # replicate boundary
    np.testing.assert_array_equal(dy, 0.0)


def test_gradient_constant_is_zero():
    T = SpatialTransform("gradient", GridShape(3, 3, 3))
    assert np.abs(T.analyze(np.full(27, 5.0))).max() == 0.0


def test_norm_sq_haar_is_one():
    assert SpatialTransform("haar", GridShape(8, 8)).norm_sq() == 1.0


@pytest.mark.parametrize("dims", [(4, 4), (3, 5), (3, 3, 2)])
def test_gradient_norm_sq_matches_dense(dims):
    T = SpatialTransform("gradient", GridShape(*dims))
    D = dense(T.analyze, T.shape.V)
    exact = np.linalg.eigvalsh(D.T @ D)[-1]
    est = T.norm_sq()
    assert est == pytest.approx(exact, rel=1e-6)
    assert 0 < est <= 4 * len(dims)


def test_iso_tv_norm():
    g = np.array([3.0, 4.0, 0.0, 0.0, 6.0, 8.0])
    assert iso_tv_norm(g, 2) == pytest.approx(15.0)
    with pytest.raises(ValueError):
        iso_tv_norm(np.zeros(5), 2)


def test_row_check():
    T = SpatialTransform("gradient", GridShape(3, 3))
    with pytest.raises(ValueError):
        T.analyze(np.zeros(8))
    with pytest.raises(ValueError):
        T.synthesize(np.zeros(9))
