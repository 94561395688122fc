import warnings

import numpy as np
import pytest

from sebpool.linalg import SymEig, as_mat, fro_inner, fro_norm, sym_eig, sym_eig_many
from sebpool.gradcheck import random_orthogonal
from sebpool.spectral import truncate_eig
from sebpool.exceptions import DimensionError, ValidationError, NumericError


def random_symmetric(rng, d):
    a = rng.standard_normal((d, d))
    return (a + a.T) / 2


class TestSymEig:

    def test_diagonal(self):
        eig = sym_eig(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(eig.lam, [3.0, 2.0, 1.0])
        # Columns of the identity, in the order of the sorted eigenvalues
        np.testing.assert_allclose(np.abs(eig.u), np.eye(3)[:, [0, 2, 1]])

    def test_identity(self):
        eig = sym_eig(np.eye(3))
        np.testing.assert_allclose(eig.lam, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(eig.u.T @ eig.u, np.eye(3), atol=1e-12)

    def test_two_by_two(self):
        eig = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(eig.lam, [3.0, 1.0], rtol=1e-12)
        np.testing.assert_allclose(eig.u[:, 0], np.array([1.0, 1.0]) / np.sqrt(2), atol=1e-12)
        # Both components have the same magnitude, the first one is made positive
        np.testing.assert_allclose(eig.u[:, 1], np.array([1.0, -1.0]) / np.sqrt(2), atol=1e-12)

    def test_random_reconstruction_and_orthogonality(self, rng):
        for _ in range(20):
            p = random_symmetric(rng, 8)
            eig = sym_eig(p)
            assert np.linalg.norm(eig.reconstruct() - p) <= 1e-8 * np.linalg.norm(p)
            assert np.linalg.norm(eig.u.T @ eig.u - np.eye(8)) <= 1e-10 * 8
            assert np.all(np.diff(eig.lam) <= 0)

    def test_trace_identity(self, rng):
        p = random_symmetric(rng, 7)
        eig = sym_eig(p)
        assert abs(np.trace(p) - eig.lam.sum()) <= 1e-10 * max(abs(np.trace(p)), 1.0)

    def test_matches_numpy(self, spsd):
        p = spsd(6)
        np.testing.assert_allclose(sym_eig(p).lam, np.linalg.eigvalsh(p)[::-1], rtol=1e-10)

    def test_sign_convention(self, rng):
        eig = sym_eig(random_symmetric(rng, 6))
        for j in range(6):
            column = eig.u[:, j]
            assert column[np.argmax(np.abs(column))] > 0

    def test_tiny_negative_eigenvalues_are_clamped(self, rng):
        u = random_orthogonal(rng, 4)
        p = (u * np.array([2.0, 1.0, 0.5, 0.0])) @ u.T
        p = (p + p.T) / 2
        eig = sym_eig(p)
        assert np.all(eig.lam >= 0)

    def test_asymmetric_input(self):
        with pytest.raises(ValidationError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_small_asymmetry_is_tolerated(self):
        p = np.array([[2.0, 1.0], [1.0 + 1e-12, 2.0]])
        np.testing.assert_allclose(sym_eig(p).lam, [3.0, 1.0], rtol=1e-10)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            sym_eig(np.ones((2, 3)))

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    @pytest.mark.parametrize("d", [4, 6, 16])
    def test_converges_on_random_matrices(self, d, rng):
        ps = [random_symmetric(rng, d) for _ in range(200)]
        for p, eig in zip(ps, sym_eig_many(ps)):
            assert np.linalg.norm(eig.reconstruct() - p) <= 1e-8 * np.linalg.norm(p)
            assert np.linalg.norm(eig.u.T @ eig.u - np.eye(d)) <= 1e-10 * d

    def test_converges_on_gapped_spectra(self, spsd):
        for _ in range(200):
            p = spsd(6)
            np.testing.assert_allclose(sym_eig(p).lam, np.linalg.eigvalsh(p)[::-1], rtol=1e-10)

    def test_subnormal_off_diagonal_is_silent(self):
        p = np.zeros((4, 4))
        p[:2, :2] = [[1.0, 1e-310], [1e-310, 2.0]]
        p[2:, 2:] = [[2.0, 1.0], [1.0, 2.0]]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            eig = sym_eig(p)
        np.testing.assert_allclose(eig.lam, [3.0, 2.0, 1.0, 1.0], rtol=1e-12)

    def test_non_convergence_reports_sweeps(self, rng):
        with pytest.raises(NumericError) as info:
            sym_eig(random_symmetric(rng, 6), max_sweeps=1)
        assert info.value.sweeps == 1

    def test_many_matches_single(self, rng):
        ps = [random_symmetric(rng, 5) for _ in range(6)]
        for p, eig in zip(ps, sym_eig_many(ps)):
            single = sym_eig(p)
            np.testing.assert_allclose(eig.lam, single.lam, atol=1e-12)
            np.testing.assert_allclose(eig.u, single.u, atol=1e-9)

    def test_many_rejects_mixed_sizes(self):
        with pytest.raises(DimensionError):
            sym_eig_many([np.eye(2), np.eye(3)])

    def test_odd_size(self, rng):
        p = random_symmetric(rng, 5)
        eig = sym_eig(p)
        assert np.linalg.norm(eig.reconstruct() - p) <= 1e-8 * np.linalg.norm(p)

    def test_with_values(self):
        eig = sym_eig(np.diag([2.0, 1.0]))
        np.testing.assert_allclose(eig.with_values(np.array([4.0, 0.0])).reconstruct(), np.diag([4.0, 0.0]))
        with pytest.raises(DimensionError):
            eig.with_values(np.ones(3))


class TestFrobenius:

    def test_examples(self):
        assert fro_inner(np.eye(2), np.eye(2)) == 2.0
        assert fro_inner(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros((2, 2))) == 0.0
        assert fro_inner(np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2)) == 5.0

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            fro_inner(np.eye(2), np.eye(3))

    def test_orthogonal_invariance(self, rng):
        a = rng.standard_normal((5, 5))
        u = random_orthogonal(rng, 5)
        assert abs(fro_norm(u.T @ a @ u) - fro_norm(a)) <= 1e-10 * fro_norm(a)

    def test_as_mat_rejects_vectors(self):
        with pytest.raises(DimensionError):
            as_mat(np.ones(3))


class TestEckartYoung:

    def test_diagonal(self):
        eig = sym_eig(np.diag([3.0, 2.0, 1.0]))
        p = eig.reconstruct()
        assert abs(np.linalg.norm(p - truncate_eig(eig, 2)) - 1.0) <= 1e-12
        np.testing.assert_allclose(truncate_eig(eig, 3), p)

    def test_random_spectra(self, spsd, rng):
        for _ in range(50):
            d = int(rng.integers(2, 9))
            p = spsd(d)
            eig = sym_eig(p)
            for k in range(1, d + 1):
                residual = np.linalg.norm(p - truncate_eig(eig, k))
                expected = np.sqrt(np.sum(eig.lam[k:] ** 2))
                # k = d leaves only the reconstruction round-off
                assert abs(residual - expected) <= 1e-10 * expected + 1e-12 * np.linalg.norm(p)
