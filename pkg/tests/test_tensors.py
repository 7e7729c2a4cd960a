import numpy as np
import pytest
from hypothesis import given, strategies as st

from floatorb.geometry import random_rotation
from floatorb.tensors import (
    DenseBlock,
    RadialBasis,
    TensorFeatures,
    check_rotation,
    cosine_envelope,
    dense_forward,
    radial_basis_eval,
    reflect_features,
    rotate_features,
    shifted_softplus,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _features(rng, a=3, d=4):
    return TensorFeatures(rng.normal(size=(a, d)), rng.normal(size=(a, d, 3)), rng.normal(size=(a, d, 3, 3)))


def test_shape_check():
    with pytest.raises(ValueError, match="inconsistent"):
        TensorFeatures(np.zeros((2, 3)), np.zeros((2, 3, 3)), np.zeros((2, 4, 3, 3)))
    f = TensorFeatures.zeros(2, 5)
    assert (f.n_atoms, f.width) == (2, 5) and f.is_finite()
    assert not f.replace(s=np.full((2, 5), np.inf)).is_finite()


def test_identity_rotation(rng):
    f = _features(rng)
    g = rotate_features(f, np.eye(3))
    np.testing.assert_array_equal(g.s, f.s)
    np.testing.assert_allclose(g.v, f.v, atol=1e-15)
    np.testing.assert_allclose(g.M, f.M, atol=1e-15)


def test_quarter_turn_about_z():
    f = TensorFeatures.zeros(1, 1)
    f = f.replace(v=np.array([[[1.0, 0, 0]]]), M=np.diag([1.0, 2.0, 3.0])[None, None])
    g = rotate_features(f, RZ90)
    np.testing.assert_allclose(g.v[0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(g.M[0, 0], np.diag([2.0, 1.0, 3.0]), atol=1e-15)


def test_rejects_improper_and_non_orthogonal():
    with pytest.raises(ValueError, match="not orthogonal"):
        check_rotation(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError, match="proper rotation"):
        check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError, match="3x3"):
        check_rotation(np.eye(2))


def test_reflection_action(rng):
    f = _features(rng)
    P = np.diag([1.0, 1.0, -1.0])
    g = reflect_features(f, P)
    np.testing.assert_array_equal(g.v[..., 2], -f.v[..., 2])
    np.testing.assert_array_equal(g.M[..., 0, 2], -f.M[..., 0, 2])
    np.testing.assert_array_equal(g.M[..., 2, 2], f.M[..., 2, 2])


@given(st.integers(0, 2**32 - 1))
def test_rotation_composition(seed):
    rng = np.random.default_rng(seed)
    f = _features(rng)
    R1, R2 = random_rotation(rng), random_rotation(rng)
    a = rotate_features(rotate_features(f, R1), R2)
    b = rotate_features(f, R2 @ R1)
    np.testing.assert_array_equal(a.s, f.s)
    np.testing.assert_allclose(a.v, b.v, atol=1e-10)
    np.testing.assert_allclose(a.M, b.M, atol=1e-10)


def test_dense_identity_and_constant():
    eye = DenseBlock((np.eye(3),), (np.zeros(3),), output="identity")
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(dense_forward(eye, x), x)
    const = DenseBlock((np.zeros((3, 2)),), (np.array([4.0, -1.0]),))
    np.testing.assert_array_equal(dense_forward(const, x), [4.0, -1.0])


def test_dense_golden_value():
    block = DenseBlock.init([4, 5, 3], np.random.default_rng(2024))
    out = dense_forward(block, np.array([0.5, -1.0, 2.0, 0.25]))
    np.testing.assert_allclose(out, GOLDEN, rtol=1e-12)


GOLDEN = [-0.2746585090992137, -0.5762148819101903, 0.4737652227545068]


def test_dense_errors():
    with pytest.raises(ValueError, match="chain"):
        DenseBlock((np.zeros((2, 3)), np.zeros((4, 1))), (np.zeros(3), np.zeros(1)))
    with pytest.raises(ValueError, match="activation"):
        DenseBlock((np.zeros((2, 3)),), (np.zeros(3),), activation="relu")
    block = DenseBlock.init([2, 3], np.random.default_rng(0))
    with pytest.raises(ValueError, match="expects 2"):
        dense_forward(block, np.zeros(3))


def test_dense_applies_along_last_axis(rng):
    block = DenseBlock.init([4, 6, 2], rng)
    x = rng.normal(size=(3, 5, 4))
    out = dense_forward(block, x)
    assert out.shape == (3, 5, 2)
    np.testing.assert_allclose(out[1, 2], dense_forward(block, x[1, 2]), rtol=1e-14)


def test_shifted_softplus_zero_at_origin():
    assert shifted_softplus(0.0) == 0.0


def test_radial_basis_examples():
    rb = RadialBasis(16, 8.0)
    np.testing.assert_array_equal(radial_basis_eval(rb, 8.0), np.zeros(16))
    at0 = radial_basis_eval(rb, 0.0)
    np.testing.assert_allclose(at0, np.exp(-rb.centers**2 / (2 * rb.width**2)), rtol=1e-15)
    assert cosine_envelope(4.0, 8.0) == pytest.approx(0.5, abs=1e-15)
    assert radial_basis_eval(rb, np.array([[1.0, 2.0]])).shape == (1, 2, 16)


def test_radial_basis_continuous_at_cutoff():
    rb = RadialBasis()
    below = radial_basis_eval(rb, 8.0 - 1e-7)
    assert np.abs(below).max() < 1e-12
    np.testing.assert_array_equal(radial_basis_eval(rb, [8.0, 9.0, 100.0]), 0.0)


def test_radial_basis_validation():
    with pytest.raises(ValueError):
        RadialBasis(0)
    with pytest.raises(ValueError):
        RadialBasis(4, -1.0)
    with pytest.raises(ValueError, match="non-negative"):
        radial_basis_eval(RadialBasis(), -0.1)
