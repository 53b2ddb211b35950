import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egnn.autodiff import ContractError, Tensor
from egnn.graph import GeometricGraph, fully_connected_edges
from egnn.harness import (
    EuclideanTransform,
    NonRealizableError,
    check_equivariance,
    distances_invariant,
    pairwise_sq_distances,
    procrustes_align,
    random_transform,
    reconstruct_from_distances,
)


def _lu_det(a):
    """Determinant by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    n, det = len(a), 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if p != k:
            a[[k, p]] = a[[p, k]]
            det = -det
        det *= a[k, k]
        a[k + 1 :] -= np.outer(a[k + 1 :, k] / a[k, k], a[k])
    return det


class TestRandomTransform:
    def test_one_dimension_rotation_is_identity(self, rng):
        for _ in range(10):
            np.testing.assert_array_equal(random_transform(1, rng).Q, [[1.0]])

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    @pytest.mark.parametrize("reflect", [False, True])
    def test_orthogonal_with_requested_determinant(self, rng, n, reflect):
        for _ in range(20):
            T = random_transform(n, rng, reflect=reflect)
            assert np.max(np.abs(T.Q.T @ T.Q - np.eye(n))) <= 1e-12
            assert abs(_lu_det(T.Q) - (-1.0 if reflect else 1.0)) <= 1e-12
            assert T.det_sign == (-1 if reflect else 1)
            assert np.all(np.abs(T.t) <= 10.0)

    def test_bad_dimension(self, rng):
        with pytest.raises(ContractError):
            random_transform(0, rng)

    def test_composition_closure(self, rng):
        x = rng.standard_normal((7, 4))
        T1, T2 = random_transform(4, rng), random_transform(4, rng, reflect=True)
        composed = T2.compose(T1)
        np.testing.assert_allclose(composed.Q, T2.Q @ T1.Q, atol=1e-12)
        np.testing.assert_allclose(composed.t, T2.Q @ T1.t + T2.t, atol=1e-12)
        assert np.max(np.abs(composed.apply_points(x) - T2.apply_points(T1.apply_points(x)))) <= 1e-12

    def test_rotations_are_spread_out(self, rng):
        # Haar rotations in 2D have a uniform angle; its mean cosine is ~0
        angles = [np.arctan2(T.Q[1, 0], T.Q[0, 0]) for T in (random_transform(2, rng) for _ in range(2000))]
        assert abs(np.mean(np.cos(angles))) < 0.1 and abs(np.mean(np.sin(angles))) < 0.1


class TestCheckEquivariance:
    def _graph(self, rng):
        return GeometricGraph(
            Tensor(rng.standard_normal((4, 2))),
            Tensor(rng.standard_normal((4, 3))),
            fully_connected_edges(4),
            v=Tensor(rng.standard_normal((4, 3))),
        )

    def test_identity_function_has_zero_deviation(self, rng):
        rep = check_equivariance(lambda g: g, self._graph(rng), random_transform(3, rng, reflect=True))
        assert rep.dx <= 1e-14 and rep.dv == 0.0 and rep.dh == 0.0 and rep.passed

    def test_velocity_channel_ignores_translation(self, rng):
        T = EuclideanTransform(np.eye(3), np.array([5.0, -2.0, 1.0]))
        rep = check_equivariance(lambda g: g, self._graph(rng), T)
        assert rep.dv == 0.0

    def test_detects_a_non_equivariant_map(self, rng):
        shift = lambda g: g.replace(x=Tensor(g.x.data + np.array([1.0, 0.0, 0.0])), h=Tensor(g.x.data[:, :2]))
        rep = check_equivariance(shift, self._graph(rng), random_transform(3, rng))
        assert not rep.passed and rep.dh > 1e-3
        assert rep.to_dict()["passed"] is False


class TestDistances:
    def test_translation(self, rng):
        pts = rng.standard_normal((6, 3))
        assert distances_invariant(pts, EuclideanTransform(np.eye(3), np.array([3.0, -1.0, 7.0])))

    def test_random_transform(self, rng):
        for reflect in (False, True):
            assert distances_invariant(rng.standard_normal((8, 5)), random_transform(5, rng, reflect=reflect))

    def test_scaling_breaks_invariance(self, rng):
        assert not distances_invariant(rng.standard_normal((5, 3)), EuclideanTransform(2 * np.eye(3), np.zeros(3)))


class TestReconstruction:
    def test_two_points(self):
        pts = reconstruct_from_distances(np.array([[0.0, 4.0], [4.0, 0.0]]))
        assert np.linalg.norm(pts[0] - pts[1]) == pytest.approx(2.0, abs=1e-12)

    def test_six_points_in_three_dimensions(self, rng):
        pts = rng.standard_normal((6, 3))
        D = pairwise_sq_distances(pts)
        rec = reconstruct_from_distances(D)
        assert rec.shape == (6, 3)
        assert np.max(np.abs(pairwise_sq_distances(rec) - D)) <= 1e-8
        aligned, T = procrustes_align(rec, pts)
        assert np.max(np.abs(aligned - pts)) <= 1e-7
        assert np.max(np.abs(T.Q.T @ T.Q - np.eye(3))) <= 1e-12

    def test_negative_gram_eigenvalue_rejected(self):
        # three "collinear" points whose distances violate the triangle inequality
        # give a Gram matrix [[1, -0.5], [-0.5, 1]] shifted to have eigenvalue -0.5
        gram = np.diag([0.0, 1.0, -0.5])
        d = np.diag(gram)
        D = d[:, None] + d[None, :] - 2 * gram
        with pytest.raises(NonRealizableError):
            reconstruct_from_distances(D)

    def test_triangle_inequality_violation_rejected(self):
        D = np.array([[0.0, 1.0, 9.0], [1.0, 0.0, 1.0], [9.0, 1.0, 0.0]])
        with pytest.raises(NonRealizableError):
            reconstruct_from_distances(D)

    def test_malformed_matrices(self):
        with pytest.raises(NonRealizableError):
            reconstruct_from_distances(np.array([[0.0, 1.0], [2.0, 0.0]]))
        with pytest.raises(NonRealizableError):
            reconstruct_from_distances(np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ContractError):
            reconstruct_from_distances(np.zeros((2, 3)))

    def test_dimension_padding_and_limit(self, rng):
        pts = np.hstack([rng.standard_normal((5, 2)), np.zeros((5, 1))])
        D = pairwise_sq_distances(pts)
        assert reconstruct_from_distances(D, dim=3).shape == (5, 3)
        with pytest.raises(NonRealizableError):
            reconstruct_from_distances(pairwise_sq_distances(rng.standard_normal((5, 3))), dim=2)


@given(st.integers(3, 10), st.sampled_from([2, 3, 5]), st.integers(0, 2**32 - 1))
def test_reconstruction_round_trip(m, n, seed):
    pts = np.random.default_rng(seed).standard_normal((m, n))
    rec = reconstruct_from_distances(pairwise_sq_distances(pts), dim=n)
    aligned, _ = procrustes_align(rec, pts)
    assert np.max(np.abs(aligned - pts)) <= 1e-7


@given(st.integers(1, 6), st.booleans(), st.integers(0, 2**32 - 1))
def test_transforms_preserve_distances(n, reflect, seed):
    rng = np.random.default_rng(seed)
    assert distances_invariant(rng.standard_normal((6, n)), random_transform(n, rng, reflect=reflect))
