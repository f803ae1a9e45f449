"""Joint-Gaussian scheme tests.

The exact-marginalisation recursion is checked against two independent
oracles: 2-d Gauss-Hermite quadrature over the inducing values and direct
linear-Gaussian conditioning. The chain KL is checked against the dense
joint KL it refuses to materialise.
"""

import numpy as np
import pytest
from modelzoo import random_chain_state, random_mf_state, se_model, sine_data
from scipy.linalg import block_diag

from dgpcompose import _core_py
from dgpcompose.gp_layers import DgpModelSpec, GPLayerSpec, MeanFnSpec
from dgpcompose.math_core import (
    InvalidInputError,
    KernelSpec,
    MvnMoments,
    RngHandle,
    eval_kernel_matrix,
    gauss_kl,
)
from dgpcompose.vi_joint_gaussian import (
    ChainGaussianState,
    assemble_joint_blocks,
    chain_marginals,
    draw_noise_jg_sampled,
    elbo_jg_analytic,
    elbo_jg_analytic_terms,
    elbo_jg_sampled,
    init_joint_gaussian,
    kl_chain,
    marginalised_conditional_chain,
    sample_layers_jg,
    sample_u_joint,
)
from dgpcompose.vi_meanfield import draw_noise_mf, elbo_mf, elbo_mf_terms


def two_layer_scalar_model():
    """L = 2, M = 1, z = [0], unit SE kernels, zero means everywhere."""
    layer = lambda: GPLayerSpec(  # noqa: E731
        kernel=KernelSpec("se", 1.0, 1.0), mean_fn=MeanFnSpec("zero"), z=np.array([0.0])
    )
    return DgpModelSpec(layers=(layer(), layer()), likelihood_noise=0.01)


def scalar_chain_state():
    covs = np.array([[[[0.5]], [[0.2]]], [[[0.2]], [[0.5]]]])
    return ChainGaussianState.from_blocks(np.zeros((2, 1)), covs)


class TestChainParametrisation:
    def test_from_blocks_scalar_values(self):
        state = scalar_chain_state()
        np.testing.assert_allclose(state.A[0], [[0.4]], rtol=1e-12)
        np.testing.assert_allclose(state.b[0], [0.0], atol=1e-15)
        np.testing.assert_allclose(state.C[0] @ state.C[0].T, [[0.42]], rtol=1e-12)
        np.testing.assert_allclose(state.C11 @ state.C11.T, [[0.5]], rtol=1e-12)

    def test_blocks_roundtrip(self):
        model = se_model(L=3, M=4)
        state = random_chain_state(model, seed=31)
        means, blocks = assemble_joint_blocks(state)
        covs = np.asarray(blocks)
        back = ChainGaussianState.from_blocks(means, covs)
        np.testing.assert_allclose(back.m1, state.m1, atol=1e-9)
        np.testing.assert_allclose(back.C11, state.C11, atol=1e-8)
        np.testing.assert_allclose(back.A, state.A, atol=1e-8)
        np.testing.assert_allclose(back.b, state.b, atol=1e-8)
        np.testing.assert_allclose(back.C, state.C, atol=1e-7)

    def test_marginals_are_psd_even_for_wild_transitions(self):
        model = se_model(L=4, M=5)
        state = random_chain_state(model, seed=17, a_scale=3.0)
        _, covs = chain_marginals(state)
        for S in covs:
            assert np.linalg.eigvalsh(S).min() >= -1e-10

    def test_sampler_matches_joint_blocks(self):
        """Empirical covariance of ancestral draws reproduces every block."""
        model = se_model(L=3, M=3)
        state = random_chain_state(model, seed=13)
        u = sample_u_joint(model, state, 120_000, RngHandle(2))
        flat = u.reshape(len(u), -1)
        means, blocks = assemble_joint_blocks(state)
        dense = np.block([[blocks[i, j] for j in range(3)] for i in range(3)])
        emp = np.cov(flat.T)
        scale = np.abs(dense).max()
        np.testing.assert_allclose(emp, dense, atol=0.035 * scale)
        np.testing.assert_allclose(
            flat.mean(axis=0), means.reshape(-1), atol=0.02
        )


class TestChainKl:
    def test_sums_to_dense_joint_kl(self):
        """The layered terms add up to KL of the full LM-dimensional joint
        against the block-diagonal prior, without ever forming it."""
        model = se_model(L=3, M=4)
        state = random_chain_state(model, seed=41)
        kls = kl_chain(model, state)
        assert np.all(kls >= -1e-12)

        means, blocks = assemble_joint_blocks(state)
        L, M = means.shape
        dense_cov = np.block(
            [[blocks[i, j] for j in range(L)] for i in range(L)]
        )
        q = MvnMoments(means.reshape(-1), dense_cov)
        prior_means = []
        prior_covs = []
        for layer in model.layers:
            prior_means.append(layer.mean_fn.apply(np.asarray(layer.z, float)))
            prior_covs.append(eval_kernel_matrix(layer.kernel, layer.z, layer.z))
        p = MvnMoments(np.concatenate(prior_means), block_diag(*prior_covs))
        np.testing.assert_allclose(kls.sum(), gauss_kl(q, p), rtol=1e-9)

    def test_monte_carlo_cross_check(self):
        model = se_model(L=2, M=3)
        state = random_chain_state(model, seed=3)
        kls = kl_chain(model, state)
        u = sample_u_joint(model, state, 200_000, RngHandle(8))
        flat = u.reshape(len(u), -1)

        means, blocks = assemble_joint_blocks(state)
        dense_cov = np.block([[blocks[i, j] for j in range(2)] for i in range(2)])
        pm = np.concatenate(
            [lay.mean_fn.apply(np.asarray(lay.z, float)) for lay in model.layers]
        )
        pc = block_diag(
            *[eval_kernel_matrix(lay.kernel, lay.z, lay.z) for lay in model.layers]
        )

        def logpdf(xs, mean, cov):
            Lc = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
            w = np.linalg.solve(Lc, (xs - mean).T)
            return (
                -0.5 * np.sum(w**2, axis=0)
                - np.sum(np.log(np.diag(Lc)))
                - 0.5 * len(cov) * np.log(2 * np.pi)
            )

        mc = np.mean(
            logpdf(flat, means.reshape(-1), dense_cov) - logpdf(flat, pm, pc)
        )
        np.testing.assert_allclose(kls.sum(), mc, rtol=0.03)


class TestExactMarginalisation:
    """The per-point recursion against quadrature and direct conditioning."""

    def setup_method(self):
        self.model = two_layer_scalar_model()
        self.state = scalar_chain_state()
        self.x = 0.3
        self.f1 = 0.7

    def _package_moments(self):
        m1, v1, step = marginalised_conditional_chain(
            self.model, self.state, 0, np.array([self.x])
        )
        m2, v2, _ = marginalised_conditional_chain(
            self.model, self.state, 1, np.array([self.f1]), step,
            f_prev=np.array([self.f1]),
        )
        return float(m1[0]), float(v1[0]), float(m2[0]), float(v2[0])

    def test_first_layer_closed_form(self):
        a1 = np.exp(-self.x**2 / 2.0)
        m1, v1, _, _ = self._package_moments()
        assert m1 == 0.0
        np.testing.assert_allclose(v1, 1.0 - a1**2 + 0.5 * a1**2, rtol=1e-12)

    def test_against_gauss_hermite_quadrature(self):
        """E[f_2 | f_1] and Var[f_2 | f_1] as ratios of 2-d Gaussian integrals
        over (u_1, u_2), computed by 80-point tensor quadrature."""
        S = np.array([[0.5, 0.2], [0.2, 0.5]])
        a1 = np.exp(-self.x**2 / 2.0)
        beta = 1.0 - a1**2  # conditional var of f_1 given u_1
        a2 = np.exp(-self.f1**2 / 2.0)
        gamma2 = 1.0 - a2**2  # conditional var of f_2 given u_2 at input f_1

        nodes, weights = np.polynomial.hermite.hermgauss(80)
        Ls = np.linalg.cholesky(S)
        xi1, xi2 = np.meshgrid(nodes, nodes, indexing="ij")
        pts = np.stack([xi1.ravel(), xi2.ravel()])  # (2, 6400)
        u = (Ls @ pts) * np.sqrt(2.0)  # rows: u1, u2 with weight N(0, S)
        w = np.outer(weights, weights).ravel() / np.pi

        like = np.exp(-((self.f1 - a1 * u[0]) ** 2) / (2 * beta)) / np.sqrt(
            2 * np.pi * beta
        )
        i0 = np.sum(w * like)
        eu2 = np.sum(w * like * u[1]) / i0
        eu2sq = np.sum(w * like * u[1] ** 2) / i0

        want_mean = a2 * eu2
        want_var = gamma2 + a2**2 * (eu2sq - eu2**2)

        _, _, m2, v2 = self._package_moments()
        np.testing.assert_allclose(m2, want_mean, rtol=1e-9)
        np.testing.assert_allclose(v2, want_var, rtol=1e-9)

    def test_against_linear_gaussian_conditioning(self):
        """Same target via the posterior of (u_1, u_2) given f_1 in closed form."""
        S = np.array([[0.5, 0.2], [0.2, 0.5]])
        a1 = np.exp(-self.x**2 / 2.0)
        beta = 1.0 - a1**2
        a2 = np.exp(-self.f1**2 / 2.0)
        # f_1 = a1 u_1 + noise(beta): joint of (u_1, u_2, f_1) is Gaussian
        H = np.array([[a1, 0.0]])
        cov_f1 = a1**2 * S[0, 0] + beta
        cross = S @ H.T  # cov(u, f_1)
        post_mean = (cross / cov_f1 * self.f1).ravel()
        post_cov = S - cross @ cross.T / cov_f1

        want_mean = a2 * post_mean[1]
        want_var = (1.0 - a2**2) + a2**2 * post_cov[1, 1]
        _, _, m2, v2 = self._package_moments()
        np.testing.assert_allclose(m2, want_mean, rtol=1e-12)
        np.testing.assert_allclose(v2, want_var, rtol=1e-12)

    def test_stepwise_agrees_with_vectorised_backend(self):
        """Driving the one-layer-at-a-time interface with the same base noise
        must reproduce the fused propagation exactly (3 layers, 5 points)."""
        model = se_model(L=3, M=4, lengthscale=0.7)
        state = random_chain_state(model, seed=51)
        pts = np.linspace(-1, 1, 5)
        eps = draw_noise_mf(3, 5, 4, RngHandle(9))

        from dgpcompose._scheme_common import model_pack

        want = _core_py.jg_propagate(
            *model_pack(model), state.m1, state.C11, state.A, state.b, state.C,
            pts, eps,
        )

        for s in range(4):
            step = None
            f_prev = None
            inputs = pts
            for ell in range(3):
                mean, var, step = marginalised_conditional_chain(
                    model, state, ell, inputs, step, f_prev=f_prev
                )
                f = mean + np.sqrt(var) * eps[s, ell, :]
                np.testing.assert_allclose(f, want[ell, s], atol=1e-9)
                f_prev = f
                inputs = f

    def test_step_validation(self):
        model = two_layer_scalar_model()
        state = scalar_chain_state()
        with pytest.raises(InvalidInputError):
            marginalised_conditional_chain(model, state, 1, np.array([0.0]))
        _, _, step = marginalised_conditional_chain(model, state, 0, np.array([0.0]))
        with pytest.raises(InvalidInputError):
            marginalised_conditional_chain(
                model, state, 0, np.array([0.0]), step, f_prev=np.array([0.0])
            )


class TestSchemeReduction:
    """A = 0 decouples the chain into a mean-field state."""

    def setup_method(self):
        self.model = se_model(L=2, M=5, noise=0.05)
        self.x, self.y = sine_data(14)
        mf = random_mf_state(self.model, seed=71)
        self.mf = mf
        self.jg = ChainGaussianState(
            m1=mf.m[0],
            C11=mf.C[0],
            A=np.zeros((1, 5, 5)),
            b=mf.m[1:],
            C=mf.C[1:],
        )

    def test_analytic_estimator_collapses_exactly(self):
        eps = draw_noise_mf(2, 14, 32, RngHandle(5))
        e_mf, kl_mf = elbo_mf_terms(self.model, self.mf, self.x, self.y, eps)
        e_jg, kl_jg = elbo_jg_analytic_terms(self.model, self.jg, self.x, self.y, eps)
        np.testing.assert_allclose(e_jg, e_mf, atol=1e-8)
        np.testing.assert_allclose(kl_jg, kl_mf, atol=1e-10)

    def test_same_handle_gives_same_estimate(self):
        a = elbo_mf(self.model, self.mf, self.x, self.y, 64, RngHandle(33))
        b = elbo_jg_analytic(self.model, self.jg, self.x, self.y, 64, RngHandle(33))
        assert abs(a.value - b.value) < 1e-8

    def test_sampled_estimator_agrees_statistically(self):
        a = elbo_mf(self.model, self.mf, self.x, self.y, 3000, RngHandle(1))
        s = elbo_jg_sampled(self.model, self.jg, self.x, self.y, 3000, RngHandle(2))
        tol = 3.0 * np.hypot(a.expectation_se, s.expectation_se)
        assert abs(a.value - s.value) < tol


class TestEstimatorEquivalence:
    def test_sampled_and_analytic_share_a_target(self):
        """Both estimators are unbiased for the same bound at a random
        correlated state, so their means must agree within joint MC error."""
        model = se_model(L=2, M=4, noise=0.05)
        x, y = sine_data(12)
        state = random_chain_state(model, seed=19)
        ana = elbo_jg_analytic(model, state, x, y, 4000, RngHandle(3))
        smp = elbo_jg_sampled(model, state, x, y, 4000, RngHandle(4))
        tol = 4.0 * np.hypot(ana.expectation_se, smp.expectation_se)
        assert abs(ana.value - smp.value) < tol
        np.testing.assert_allclose(ana.kl_per_layer, smp.kl_per_layer, rtol=1e-12)

    def test_marginal_variances_match_between_paths(self):
        """The analytic path integrates u out point by point; its marginal
        draw distribution at a single input matches the sampled path."""
        model = se_model(L=2, M=4, noise=0.05)
        state = random_chain_state(model, seed=23)
        pts = np.array([0.25])
        a = sample_layers_jg(model, state, pts, 60_000, RngHandle(6), mode="analytic")
        s = sample_layers_jg(model, state, pts, 60_000, RngHandle(7), mode="sampled")
        va = a.draws[1].var(ddof=1)
        vs = s.draws[1].var(ddof=1)
        # var of a variance estimate ~ sqrt(2/n) relative
        assert abs(va - vs) < 5.0 * np.sqrt(2.0 / 60_000) * max(va, vs)
        assert abs(a.draws[1].mean() - s.draws[1].mean()) < 5.0 * np.sqrt(
            max(va, vs) / 60_000
        )


class TestInitialisation:
    def test_zero_transition_default(self):
        model = se_model(L=3, M=4)
        state = init_joint_gaussian(model)
        np.testing.assert_array_equal(state.A, 0.0)
        kls = kl_chain(model, state)
        assert kls.shape == (3,) and np.all(kls >= 0)

    def test_random_transition_requires_rng(self):
        model = se_model(L=2, M=3)
        with pytest.raises(InvalidInputError):
            init_joint_gaussian(model, transition_scale=0.1)
        state = init_joint_gaussian(model, transition_scale=0.1, rng=RngHandle(0))
        assert np.any(state.A != 0.0)

    def test_noise_layout_shared_with_meanfield(self):
        u_eps, f_eps = draw_noise_jg_sampled(2, 6, 4, 8, 3, RngHandle(12))
        assert u_eps.shape == (8, 2, 4)
        assert f_eps.shape == (8, 3, 2, 6)

    def test_init_with_data_warm_starts_output_marginal(self):
        model = se_model(L=2, M=5, noise=1e-8)
        z = np.asarray(model.layers[0].z, float)
        y = np.cos(2.0 * z)
        warm = init_joint_gaussian(model, data=(z, y))
        means, covs = chain_marginals(warm)
        np.testing.assert_allclose(means[1], y, atol=1e-3)
        assert np.abs(np.diag(covs[1])).max() < 1e-6
        cold = init_joint_gaussian(model)
        assert np.abs(warm.C11).max() < 0.2 * np.abs(cold.C11).max()

    def test_init_with_data_single_layer_interpolates(self):
        model = se_model(L=1, M=5, noise=1e-8)
        z = np.asarray(model.layers[0].z, float)
        y = np.cos(2.0 * z)
        warm = init_joint_gaussian(model, data=(z, y))
        np.testing.assert_allclose(warm.m1, y, atol=1e-3)
        assert np.abs(np.diag(warm.C11)).max() < 1e-3
