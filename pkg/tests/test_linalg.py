import numpy as np
import pytest

from salora.errors import RankError, ShapeError, ValidationError
from salora.linalg import (
    frobenius_norm,
    matmul,
    min_singular_value,
    numerical_rank,
    svd,
    top_left_singular_vectors,
)

from .oracles import gram_singular_values, naive_matmul, power_iteration_subspace, principal_angles


def test_matmul_identity(backend):
    m = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_case(backend):
    assert np.array_equal(matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]]), [[2.0], [4.0]])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(backend, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert np.abs(matmul(a, b) - naive_matmul(a.tolist(), b.tolist())).max() < 1e-12


def test_matmul_shape_error_names_both_shapes(backend):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_is_deterministic(backend):
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((9, 11)), rng.standard_normal((11, 4))
    assert matmul(a, b).tobytes() == matmul(a, b).tobytes()


def test_svd_identity(backend):
    res = svd(np.eye(2))
    assert np.array_equal(res.s, [1.0, 1.0])
    assert np.allclose(res.u, np.eye(2)) and np.allclose(res.v, np.eye(2))


def test_svd_diagonal():
    assert np.allclose(svd(np.diag([3.0, 2.0])).s, [3.0, 2.0])
    assert np.allclose(svd(np.diag([2.0, 3.0])).s, [3.0, 2.0])


@pytest.mark.parametrize("shape", [(4, 3), (3, 4), (6, 6), (10, 2), (1, 5), (5, 1)])
@pytest.mark.parametrize("seed", range(3))
def test_svd_against_gram_oracle(backend, shape, seed):
    m = np.random.default_rng(seed).standard_normal(shape)
    res = svd(m)
    k = min(shape)
    assert res.u.shape == (shape[0], k) and res.v.shape == (shape[1], k)
    assert np.abs(res.s - gram_singular_values(m)[:k]).max() < 1e-9
    assert np.linalg.norm(res.u.T @ res.u - np.eye(k)) < 1e-10
    assert np.linalg.norm(res.v.T @ res.v - np.eye(k)) < 1e-10
    assert np.linalg.norm(res.reconstruct() - m) < 1e-8 * np.linalg.norm(m)
    assert np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0)


@pytest.mark.parametrize("seed", range(5))
def test_svd_sign_convention(seed):
    u = svd(np.random.default_rng(seed).standard_normal((7, 5))).u
    idx = np.argmax(np.abs(u), axis=0)
    assert np.all(u[idx, np.arange(u.shape[1])] >= 0)


def test_svd_rank_deficient_completes_basis(backend):
    res = svd(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(res.s, [2.0, 0.0])
    assert np.allclose(res.u.T @ res.u, np.eye(2))


def test_svd_zero_matrix(backend):
    res = svd(np.zeros((3, 2)))
    assert np.array_equal(res.s, [0.0, 0.0])
    assert np.allclose(res.u.T @ res.u, np.eye(2))


def test_svd_bitwise_deterministic(backend):
    m = np.random.default_rng(3).standard_normal((8, 6))
    a, b = svd(m), svd(m)
    assert a.u.tobytes() == b.u.tobytes() and a.s.tobytes() == b.s.tobytes() and a.v.tobytes() == b.v.tobytes()


def test_svd_degenerate_spectrum_gives_same_subspace():
    # repeated singular values: only the subspace is defined
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 6)))
    m = q @ np.diag([2.0, 2.0, 2.0, 1.0, 0.5, 0.1]) @ q.T
    u = svd(m).u
    assert principal_angles(u[:, :3], q[:, :3]).max() < 1e-8


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_svd_rejects_non_finite(bad):
    m = np.ones((3, 3))
    m[1, 2] = bad
    with pytest.raises(ValidationError):
        svd(m)


def test_top_left_singular_vectors_dominant_axis():
    u = top_left_singular_vectors(np.diag([3.0, 2.0]), 1)
    assert np.allclose(u, [[1.0], [0.0]])


def test_top_left_singular_vectors_full_equals_svd():
    m = np.random.default_rng(4).standard_normal((5, 3))
    assert np.array_equal(top_left_singular_vectors(m, 3), svd(m).u)


@pytest.mark.parametrize("seed", range(3))
def test_top_left_singular_vectors_power_iteration(backend, seed):
    m = np.random.default_rng(seed).standard_normal((6, 4))
    ours = top_left_singular_vectors(m, 2)
    oracle = power_iteration_subspace(m, 2, seed=seed)
    assert principal_angles(ours, oracle).max() < 1e-6


@pytest.mark.parametrize("k", [0, 4, -1])
def test_top_left_singular_vectors_rank_error(k):
    with pytest.raises(RankError):
        top_left_singular_vectors(np.ones((3, 3)), k)


@pytest.mark.parametrize(
    "m, expected",
    [(np.zeros((2, 3)), 0.0), (np.eye(3), np.sqrt(3.0)), (np.array([[3.0, 4.0]]), 5.0)],
)
def test_frobenius_norm(m, expected):
    assert frobenius_norm(m) == pytest.approx(expected, abs=1e-15)


def test_min_singular_value_cases():
    assert min_singular_value(np.diag([3.0, 2.0])) == pytest.approx(2.0)
    assert min_singular_value(np.array([[1.0, 1.0], [1.0, 1.0]])) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_min_singular_value_oracle(seed):
    m = np.random.default_rng(seed).standard_normal((5, 3))
    assert abs(min_singular_value(m) - gram_singular_values(m)[-1]) < 1e-9


def test_numerical_rank():
    assert numerical_rank([3.0, 1e-12, 0.0], 1e-10) == 1
    assert numerical_rank([0.0, 0.0], 1e-10) == 0
    assert numerical_rank([], 1e-10) == 0
