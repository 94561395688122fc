import numpy as np
import pytest

from sebpool.linalg import sym_eig, fro_norm
from sebpool.spectral import Sqrt, ExpInv, Log, mat_fn, truncate_eig
from sebpool.gcp import (
    GcpConfig, SubsetMode,
    centering_matrix, covariance, covariance_backward, seb_factor, seb_factor_backward,
    gcp_forward, gcp_forward_many, gcp_backward, gcp_backward_many,
    upper_tri_vec, upper_tri_unvec, upper_tri_vec_backward,
)
from sebpool.gradcheck import numerical_gradient
from sebpool.diagnostics import condition_number
from sebpool.exceptions import DimensionError, NumericError, ValidationError, DomainError


class TestCovariance:

    def test_constant_columns(self):
        x = np.tile(np.array([[1.0], [2.0], [-3.0]]), (1, 5))
        np.testing.assert_allclose(covariance(x), np.zeros((3, 3)), atol=1e-15)

    def test_hand_computed(self):
        np.testing.assert_allclose(covariance(np.array([[1.0, -1.0], [0.0, 0.0]])), [[1.0, 0.0], [0.0, 0.0]])

    def test_matches_centering_matrix(self, rng):
        x = rng.standard_normal((4, 9))
        np.testing.assert_allclose(covariance(x), x @ centering_matrix(9) @ x.T, atol=1e-12)

    def test_trace_is_the_total_variance(self, rng):
        x = rng.standard_normal((3, 7))
        expected = np.sum((x - x.mean(axis=1, keepdims=True)) ** 2) / 7
        assert np.trace(covariance(x)) == pytest.approx(expected)

    def test_needs_two_features(self):
        with pytest.raises(ValidationError):
            covariance(np.ones((3, 1)))

    def test_backward_examples(self, rng):
        x = rng.standard_normal((3, 6))
        np.testing.assert_array_equal(covariance_backward(x, np.zeros((3, 3))), np.zeros((3, 6)))

        constant = np.tile(rng.standard_normal((3, 1)), (1, 6))
        np.testing.assert_allclose(covariance_backward(constant, rng.standard_normal((3, 3))), 0.0, atol=1e-14)

    def test_backward_finite_differences(self, rng):
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal((4, 4))
        numeric = numerical_gradient(lambda v: float(np.sum(w * covariance(v))), x)
        np.testing.assert_allclose(covariance_backward(x, w), numeric, rtol=1e-6, atol=1e-9)

    def test_backward_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            covariance_backward(rng.standard_normal((3, 5)), np.eye(4))


class TestSebFactor:

    def test_zero_spectrum(self):
        assert seb_factor(sym_eig(np.zeros((3, 3)))) == 0.0

    def test_scalar(self):
        assert seb_factor(sym_eig(np.array([[1.0]]))) == pytest.approx(np.exp(-1.0))

    def test_matches_explicit_product(self, spsd):
        for d in (2, 4, 7):
            eig = sym_eig(spsd(d))
            q = mat_fn(eig, Sqrt())
            explicit = fro_norm(q @ mat_fn(eig, ExpInv()).T)
            factor = seb_factor(eig)
            assert abs(factor - explicit) <= 1e-10 * explicit
            assert 0 < factor < fro_norm(q)

    def test_negative_eigenvalue(self):
        eig = sym_eig(np.diag([1.0, 0.0])).with_values(np.array([1.0, -0.5]))
        with pytest.raises(DomainError):
            seb_factor(eig)

    def test_backward_scalar(self):
        eig = sym_eig(np.array([[1.0]]))
        q = mat_fn(eig, Sqrt())
        s = mat_fn(eig, ExpInv())
        d_q, d_s = seb_factor_backward(q, s, seb_factor(eig))
        np.testing.assert_allclose(d_q, [[np.exp(-1.0)]])
        np.testing.assert_allclose(d_s, [[1.0]])

    def test_backward_shares_eigenvectors(self, spsd):
        eig = sym_eig(spsd(4))
        q = mat_fn(eig, Sqrt())
        s = mat_fn(eig, ExpInv())
        factor = seb_factor(eig)
        d_q, d_s = seb_factor_backward(q, s, factor)

        expected_q = eig.with_values(np.sqrt(eig.lam) * np.exp(-2 * eig.lam) / factor).reconstruct()
        expected_s = eig.with_values(eig.lam * np.exp(-eig.lam) / factor).reconstruct()
        np.testing.assert_allclose(d_q, expected_q, atol=1e-12)
        np.testing.assert_allclose(d_s, expected_s, atol=1e-12)
        np.testing.assert_allclose(d_q, d_q.T, atol=1e-14)

    def test_backward_finite_differences(self, spsd):
        eig = sym_eig(spsd(4, high=3.0))
        q = mat_fn(eig, Sqrt())
        s = mat_fn(eig, ExpInv())
        d_q, d_s = seb_factor_backward(q, s, seb_factor(eig))
        np.testing.assert_allclose(d_q, numerical_gradient(lambda v: fro_norm(v @ s.T), q), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(d_s, numerical_gradient(lambda v: fro_norm(q @ v.T), s), rtol=1e-4, atol=1e-8)

    def test_backward_zero_factor(self):
        with pytest.raises(NumericError):
            seb_factor_backward(np.zeros((2, 2)), np.eye(2), 0.0)


class TestGcpForward:

    def test_sqrt_without_seb(self):
        # Rows are centered and P = diag(4, 1)
        x =np.array([[2.0, -2.0, 2.0, -2.0], [1.0, 1.0, -1.0, -1.0]])
        state = gcp_forward(x, GcpConfig())
        np.testing.assert_allclose(state.p, np.diag([4.0, 1.0]))
        np.testing.assert_allclose(state.a, np.diag([2.0, 1.0]), atol=1e-12)
        assert state.s is None and state.factor is None

    def test_seb_amplifies_and_keeps_the_order(self, feature_map):
        x = feature_map(5, 9)
        plain = gcp_forward(x, GcpConfig())
        seb = gcp_forward(x, GcpConfig(use_seb=True))

        assert seb.factor > 0
        np.testing.assert_allclose(seb.a, (seb.factor + 1) * plain.a, rtol=1e-12)

        q_lam = sym_eig(plain.a).lam
        a_lam = sym_eig(seb.a).lam
        assert np.all(a_lam > q_lam)
        assert np.all(np.diff(a_lam) <= 0)

    def test_seb_keeps_the_condition_number(self, feature_map):
        state = gcp_forward(feature_map(4, 8), GcpConfig(use_seb=True))
        kappa_q = condition_number(state.eig.with_values(np.sqrt(state.eig.lam))).kappa
        kappa_a = condition_number(state.eig.with_values((state.factor + 1) * np.sqrt(state.eig.lam))).kappa
        assert kappa_a == pytest.approx(kappa_q, rel=1e-14)

    def test_truncated_covariance_is_bit_identical(self, feature_map):
        x = feature_map(6, 10)
        state = gcp_forward(x, GcpConfig(truncate_k=3))
        np.testing.assert_array_equal(state.p_kept, truncate_eig(state.eig, 3))
        np.testing.assert_array_equal(state.kept, [True, True, True, False, False, False])

    def test_full_truncation_is_the_identity(self, feature_map):
        x = feature_map(5, 9)
        for cfg in (GcpConfig(), GcpConfig(use_seb=True)):
            full = gcp_forward(x, cfg)
            truncated = gcp_forward(x, GcpConfig(use_seb=cfg.use_seb, truncate_k=5))
            np.testing.assert_array_equal(full.a, truncated.a)

    def test_first_plus_small(self, feature_map):
        state = gcp_forward(feature_map(6, 10), GcpConfig(truncate_k=2, subset_mode=SubsetMode.FIRST_PLUS_SMALL))
        np.testing.assert_array_equal(state.kept, [True, False, False, False, True, True])

    def test_truncate_k_out_of_range(self, feature_map):
        with pytest.raises(ValidationError):
            gcp_forward(feature_map(3, 6), GcpConfig(truncate_k=4))
        with pytest.raises(ValidationError):
            GcpConfig(truncate_k=0)

    def test_keep_mask_shape(self, feature_map):
        with pytest.raises(DimensionError):
            gcp_forward(feature_map(3, 6), keep=np.ones(4, dtype=bool))

    def test_other_normalizations(self, feature_map):
        x = feature_map(4, 8)
        state = gcp_forward(x, GcpConfig(normalization=Log()))
        np.testing.assert_allclose(state.a, mat_fn(state.eig, Log()), atol=1e-12)

    def test_many_matches_single(self, feature_map):
        xs = [feature_map(4, 8) for _ in range(5)]
        cfg = GcpConfig(use_seb=True)
        for x, state in zip(xs, gcp_forward_many(xs, cfg)):
            np.testing.assert_allclose(state.a, gcp_forward(x, cfg).a, atol=1e-10)

    def test_many_needs_one_shape(self, feature_map):
        with pytest.raises(DimensionError):
            gcp_forward_many([feature_map(3, 6), feature_map(3, 7)])

    def test_config_json_round_trip(self):
        cfg = GcpConfig(use_seb=True, normalization=Log(), truncate_k=3, subset_mode=SubsetMode.FIRST_PLUS_SMALL)
        assert GcpConfig.from_json(cfg.to_json()) == cfg


class TestGcpBackward:

    def test_zero_seed(self, feature_map):
        state = gcp_forward(feature_map(4, 8), GcpConfig(use_seb=True))
        np.testing.assert_allclose(gcp_backward(state, np.zeros((4, 4))), 0.0, atol=1e-15)

    @pytest.mark.parametrize("use_seb", [False, True])
    def test_finite_differences(self, feature_map, rng, use_seb):
        cfg = GcpConfig(use_seb=use_seb)
        x = feature_map(4, 6)
        w = rng.standard_normal((4, 4))

        analytic = gcp_backward(gcp_forward(x, cfg), w)
        numeric = numerical_gradient(lambda v: float(np.sum(w * gcp_forward(v, cfg).a)), x)
        assert np.linalg.norm(analytic - numeric) <= 1e-3 * np.linalg.norm(numeric)

    def test_truncated_backward_matches_finite_differences(self, feature_map, rng):
        cfg = GcpConfig(use_seb=True, truncate_k=3)
        x = feature_map(5, 8)
        w = rng.standard_normal((5, 5))

        analytic = gcp_backward(gcp_forward(x, cfg), w)
        numeric = numerical_gradient(lambda v: float(np.sum(w * gcp_forward(v, cfg).a)), x)
        assert np.linalg.norm(analytic - numeric) <= 1e-3 * np.linalg.norm(numeric)

    @pytest.mark.parametrize("cfg", [GcpConfig(), GcpConfig(use_seb=True), GcpConfig(use_seb=True, truncate_k=2)])
    def test_many_matches_single(self, feature_map, rng, cfg):
        xs = [feature_map(4, 8) for _ in range(3)]
        ws = rng.standard_normal((3, 4, 4))
        d_xs = gcp_backward_many(gcp_forward_many(xs, cfg), ws)
        assert d_xs.shape == (3, 4, 8)
        for x, w, d_x in zip(xs, ws, d_xs):
            np.testing.assert_allclose(d_x, gcp_backward(gcp_forward(x, cfg), w), rtol=1e-9, atol=1e-12)

    def test_many_rejects_mixed_states(self, feature_map):
        states = gcp_forward_many([feature_map(3, 6), feature_map(3, 6)])
        with pytest.raises(DimensionError):
            gcp_backward_many(states, [np.eye(3)])
        with pytest.raises(ValidationError):
            gcp_backward_many([states[0], gcp_forward(feature_map(3, 7))], [np.eye(3), np.eye(3)])

    def test_shape_mismatch(self, feature_map):
        state = gcp_forward(feature_map(3, 6))
        with pytest.raises(DimensionError):
            gcp_backward(state, np.eye(4))


class TestUpperTriangle:

    def test_examples(self):
        np.testing.assert_array_equal(upper_tri_vec(np.eye(2)), [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(upper_tri_vec(np.array([[1.0, 2.0], [2.0, 3.0]])), [1.0, 2.0, 3.0])

    def test_reconstruction(self, rng):
        a = rng.standard_normal((16, 16))
        a = (a + a.T) / 2
        v = upper_tri_vec(a)
        assert v.shape == (136,)
        np.testing.assert_array_equal(upper_tri_unvec(v), a)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            upper_tri_vec(np.ones((2, 3)))

    def test_asymmetric(self):
        with pytest.raises(ValidationError):
            upper_tri_vec(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_unvec_bad_length(self):
        with pytest.raises(DimensionError):
            upper_tri_unvec(np.ones(4))

    def test_backward_only_touches_the_upper_triangle(self):
        g = upper_tri_vec_backward(np.array([1.0, 2.0, 3.0]), 2)
        np.testing.assert_array_equal(g, [[1.0, 2.0], [0.0, 3.0]])
