"""Mean-field scheme tests against closed-form single-layer oracles."""

import numpy as np
import pytest
from modelzoo import (
    collapsed_single_layer_bound,
    exact_log_evidence,
    random_mf_state,
    se_model,
    sine_data,
)

from dgpcompose._scheme_common import standardise_rows
from dgpcompose.gp_layers import prior_at_inducing
from dgpcompose.math_core import InvalidInputError, MvnMoments, RngHandle, gauss_kl
from dgpcompose.vi_meanfield import (
    MeanFieldState,
    draw_noise_mf,
    elbo_mf,
    elbo_mf_terms,
    init_meanfield,
    sample_layers_mf,
)


class TestSingleLayerOracle:
    """L = 1 has a closed-form bound; the sampler must agree with it."""

    def setup_method(self):
        self.model = se_model(L=1, M=6, noise=0.1)
        self.x, self.y = sine_data(20)
        self.state = random_mf_state(self.model, seed=101)

    def test_estimate_within_monte_carlo_error(self):
        want = collapsed_single_layer_bound(
            self.model,
            self.state.m[0],
            self.state.C[0] @ self.state.C[0].T,
            self.x,
            self.y,
        )
        est = elbo_mf(self.model, self.state, self.x, self.y, 4000, RngHandle(7))
        assert abs(est.value - want) < 3.0 * est.expectation_se

    def test_standardised_noise_is_exact(self):
        """With per-point standardised base noise the estimate collapses to
        the closed form identically (the integrand is quadratic in eps)."""
        want = collapsed_single_layer_bound(
            self.model,
            self.state.m[0],
            self.state.C[0] @ self.state.C[0].T,
            self.x,
            self.y,
        )
        for n in (2, 5, 32):
            eps = standardise_rows(
                draw_noise_mf(1, self.x.size, n, RngHandle(3))
            )
            e_rows, kls = elbo_mf_terms(self.model, self.state, self.x, self.y, eps)
            got = e_rows.mean() - kls.sum()
            np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_exact_posterior_state_reaches_log_evidence(self):
        """With z = x and q(u) set to the exact posterior the bound is tight.

        A short lengthscale keeps K(x, x) and the posterior covariance well
        conditioned so no jitter perturbs the comparison.
        """
        x, y = sine_data(8)
        model = se_model(L=1, M=8, noise=0.1, lengthscale=0.25)
        layer = model.layers[0]
        # exact GP posterior over f(z) for z = x
        from dgpcompose.math_core import chol_psd, eval_kernel_matrix

        K = eval_kernel_matrix(layer.kernel, x, x)
        Kn = K + model.likelihood_noise * np.eye(8)
        Lc, _ = chol_psd(Kn)
        A = np.linalg.solve(Lc.T, np.linalg.solve(Lc, K))
        m_star = A.T @ y
        S_star = K - K @ A
        Ls, _ = chol_psd(S_star)
        state = MeanFieldState(m=m_star[None, :], C=Ls[None, :, :])

        want = exact_log_evidence(model, x, y)
        bound = collapsed_single_layer_bound(model, m_star, S_star, x, y)
        np.testing.assert_allclose(bound, want, atol=1e-6)

        est = elbo_mf(model, state, x, y, 4000, RngHandle(21))
        assert abs(est.value - want) < max(3.0 * est.expectation_se, 1e-3)


class TestKlTerm:
    def test_matches_direct_kl(self):
        model = se_model(L=3, M=4)
        state = random_mf_state(model, seed=5)
        x, y = sine_data(8)
        eps = draw_noise_mf(3, 8, 2, RngHandle(0))
        _, kls = elbo_mf_terms(model, state, x, y, eps)
        for ell in range(3):
            prior = prior_at_inducing(model.layers[ell])
            q = MvnMoments(state.m[ell], state.C[ell] @ state.C[ell].T)
            np.testing.assert_allclose(kls[ell], gauss_kl(q, prior), rtol=1e-9)

    def test_zero_at_prior(self):
        model = se_model(L=2, M=5)
        from dgpcompose.math_core import chol_psd

        ms, Cs = [], []
        for layer in model.layers:
            prior = prior_at_inducing(layer)
            L, _ = chol_psd(prior.cov)
            ms.append(prior.mean)
            Cs.append(L)
        state = MeanFieldState(m=np.stack(ms), C=np.stack(Cs))
        x, y = sine_data(6)
        _, kls = elbo_mf_terms(
            model, state, x, y, draw_noise_mf(2, 6, 2, RngHandle(1))
        )
        np.testing.assert_allclose(kls, 0.0, atol=1e-8)


class TestEstimatorBehaviour:
    def test_same_handle_same_value(self):
        model = se_model(L=2, M=5)
        state = init_meanfield(model)
        x, y = sine_data(10)
        a = elbo_mf(model, state, x, y, 16, RngHandle(77))
        b = elbo_mf(model, state, x, y, 16, RngHandle(77))
        assert a.value == b.value and a.expectation_se == b.expectation_se

    def test_point_permutation_invariance(self):
        """Reordering the data (and the matching noise slices) only permutes
        per-sample sums, so the estimate is unchanged."""
        model = se_model(L=2, M=5)
        state = random_mf_state(model, seed=9)
        x, y = sine_data(12)
        eps = draw_noise_mf(2, 12, 8, RngHandle(4))
        perm = np.random.default_rng(0).permutation(12)
        e1, kl1 = elbo_mf_terms(model, state, x, y, eps)
        e2, kl2 = elbo_mf_terms(
            model, state, x[perm], y[perm], eps[:, :, perm]
        )
        np.testing.assert_allclose(e1, e2, rtol=1e-9)
        np.testing.assert_allclose(kl1, kl2, rtol=1e-12)

    def test_sample_count_reduces_se(self):
        model = se_model(L=2, M=5)
        state = random_mf_state(model, seed=2)
        x, y = sine_data(10)
        small = elbo_mf(model, state, x, y, 100, RngHandle(11))
        big = elbo_mf(model, state, x, y, 6400, RngHandle(11))
        assert big.expectation_se < small.expectation_se

    def test_rejects_bad_inputs(self):
        model = se_model(L=1, M=4)
        state = init_meanfield(model)
        with pytest.raises(InvalidInputError):
            elbo_mf(model, state, np.array([[0.0, 1.0]]), np.array([0.0]), 4, RngHandle(0))
        with pytest.raises(InvalidInputError):
            elbo_mf(model, state, np.array([0.0]), np.array([0.0]), 0, RngHandle(0))


class TestSampling:
    def test_prior_state_reproduces_prior_marginals(self):
        """m = mu(z), C = chol(K) makes layer 1's marginal the plain prior."""
        model = se_model(L=1, M=8)
        layer = model.layers[0]
        from dgpcompose.math_core import chol_psd

        prior = prior_at_inducing(layer)
        L, _ = chol_psd(prior.cov)
        state = MeanFieldState(m=prior.mean[None, :], C=L[None, :, :])
        pts = np.array([0.0])
        ss = sample_layers_mf(model, state, pts, 40_000, RngHandle(13))
        var = ss.layer_marginal_variance(0)[0]
        np.testing.assert_allclose(var, 1.0, atol=0.03)
        np.testing.assert_allclose(ss.draws[0].mean(), 0.0, atol=0.03)

    def test_shapes_and_metadata(self):
        model = se_model(L=3, M=4)
        state = init_meanfield(model)
        pts = np.linspace(-1, 1, 7)
        ss = sample_layers_mf(model, state, pts, 25, RngHandle(3))
        assert ss.draws.shape == (3, 25, 7)
        assert ss.scheme == "meanfield"
        assert ss.seed == 3
        assert np.all(np.isfinite(ss.draws))

    def test_init_state_shapes(self):
        model = se_model(L=2, M=6)
        state = init_meanfield(model)
        assert state.m.shape == (2, 6)
        assert state.C.shape == (2, 6, 6)
        # identity inner mean: the start is centred on the prior mean
        np.testing.assert_array_equal(state.m[0], model.layers[0].z)
        np.testing.assert_array_equal(state.m[1], 0.0)

    def test_init_with_data_warm_starts_output_layer(self):
        model = se_model(L=2, M=6, noise=1e-8)
        z = model.layers[0].z
        y = np.cos(2.0 * z)
        warm = init_meanfield(model, data=(z, y))
        cold = init_meanfield(model)
        # output mean interpolates the data at the inducing locations
        np.testing.assert_allclose(warm.m[1], y, atol=1e-3)
        np.testing.assert_array_equal(warm.m[0], cold.m[0])
        # inner layer starts near-deterministic, output covariance near zero
        assert np.abs(warm.C[0]).max() < 0.2 * np.abs(cold.C[0]).max()
        assert np.abs(np.diag(warm.C[1])).max() < 1e-3
