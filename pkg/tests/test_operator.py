import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucosdot.operator import (DenseMatrixOperator, DimensionError, HStackOperator, IdentityOperator,
                              ZeroOperator, apply, apply_adjoint, read_matrix, rescale_jacobian,
                              write_matrix)


def random_operators(rng):
    shape = (2, 3, 3)
    dense = DenseMatrixOperator(rng.standard_normal((7, 18)), shape)
    stacked = HStackOperator([DenseMatrixOperator(rng.standard_normal((7, 9)), (1, 3, 3)),
                              DenseMatrixOperator(rng.standard_normal((7, 9)), (1, 3, 3))])
    return [dense, IdentityOperator(shape), ZeroOperator(shape, 5), 2.5 * dense, stacked,
            rescale_jacobian(DenseMatrixOperator(rng.standard_normal((7, 9)), (1, 3, 3)),
                             DenseMatrixOperator(rng.standard_normal((7, 9)), (1, 3, 3)))]


def test_identity_apply_and_adjoint():
    op = IdentityOperator((1, 2, 2))
    x = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(apply(op, x), x.ravel())
    np.testing.assert_array_equal(apply_adjoint(op, x.ravel()), x)


def test_two_by_two_matrix():
    op = DenseMatrixOperator([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(apply(op, np.array([1.0, 1.0])), [3.0, 7.0])
    np.testing.assert_array_equal(apply_adjoint(op, np.array([1.0, 0.0])), [1.0, 2.0])


def test_zero_operator():
    op = ZeroOperator((1, 2, 2), 3)
    np.testing.assert_array_equal(apply(op, np.ones((1, 2, 2))), np.zeros(3))


def test_shape_mismatch_raises():
    op = DenseMatrixOperator(np.eye(4), (1, 2, 2))
    with pytest.raises(DimensionError):
        op.apply(np.ones(5))
    with pytest.raises(DimensionError):
        op.adjoint(np.ones(3))


def test_adjoint_consistency_many_pairs():
    rng = np.random.default_rng(0)
    for op in random_operators(rng):
        for _ in range(100):
            x = rng.standard_normal(op.domain_shape)
            y = rng.standard_normal(op.codomain_dim)
            Ax, Aty = op.apply(x), op.adjoint(y)
            gap = abs(Ax @ y - np.sum(x * Aty))
            scale = np.linalg.norm(Ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(Aty)
            assert gap <= 1e-10 * scale + 1e-300


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    op = DenseMatrixOperator(rng.standard_normal((5, 8)), (2, 2, 2))
    x, z = rng.standard_normal((2, 2, 2, 2))
    lhs = op.apply(a * x + b * z)
    rhs = a * op.apply(x) + b * op.apply(z)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_scaled_operator_and_adjoint():
    rng = np.random.default_rng(1)
    op = DenseMatrixOperator(rng.standard_normal((4, 6)))
    x, y = rng.standard_normal(6), rng.standard_normal(4)
    np.testing.assert_allclose((3.0 * op).apply(x), 3.0 * op.apply(x))
    np.testing.assert_allclose((3.0 * op).adjoint(y), 3.0 * op.adjoint(y))


def test_dense_adjoint_is_transpose():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((3, 5))
    y = rng.standard_normal(3)
    np.testing.assert_array_equal(DenseMatrixOperator(M).adjoint(y), y @ M)


def test_rescale_jacobian_examples():
    eye = IdentityOperator((1, 3, 3))
    A = rescale_jacobian(eye, eye)
    ones, zeros = np.ones((1, 3, 3)), np.zeros((1, 3, 3))
    np.testing.assert_allclose(A.apply(np.concatenate([ones, zeros])), 0.02 * np.ones(9))
    np.testing.assert_allclose(A.apply(np.concatenate([zeros, ones])), 2.0 * np.ones(9))
    np.testing.assert_array_equal(A.apply(np.zeros((2, 3, 3))), np.zeros(9))
    assert A.domain_shape == (2, 3, 3)
    assert A.offset == (-0.01, -1.0)


def test_rescale_jacobian_codomain_mismatch():
    with pytest.raises(DimensionError):
        rescale_jacobian(DenseMatrixOperator(np.ones((2, 4))), DenseMatrixOperator(np.ones((3, 4))))


def test_matrix_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    M = rng.standard_normal((6, 8))
    path = tmp_path / "a.spmat"
    write_matrix(path, DenseMatrixOperator(M, (2, 2, 2)))
    raw = path.read_bytes()
    assert raw[:7] == b"SPMAT1\0"
    assert len(raw) == 7 + 16 + 8 * 48
    back = read_matrix(path, (2, 2, 2))
    np.testing.assert_array_equal(back.entries, M)
    assert back.domain_shape == (2, 2, 2)


def test_matrix_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.spmat"
    path.write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        read_matrix(path)
