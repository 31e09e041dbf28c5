"""Variational layers: moments, KL forms, and gradient fidelity."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vnd.kl_fit import mc_truth_grid
from vnd.layers import (
    DEFAULT_KL_CONSTANTS,
    GroupMap,
    VariationalConv2d,
    VariationalDense,
    l0_reduction,
    neg_kl_weight_approx,
    neg_kl_weight_mc,
    phi2_bruteforce,
    phi2_full,
)
from vnd.ordering import gumbel_noise, make_width_plan, soft_mask_from_noise

from _helpers import assert_grad_matches, params_from_beta


def dense_layer(d=4, D=6, groups=3, seed=0, **kw):
    gen = torch.Generator().manual_seed(seed)
    return VariationalDense(d, D, groups=groups, generator=gen, **kw)


class TestGroupMap:
    def test_contiguous_partition(self):
        gm = GroupMap.contiguous(10, 4, 1)
        counts = torch.bincount(gm.index, minlength=4).tolist()
        assert sum(counts) == 10
        assert max(counts) - min(counts) <= 1
        assert (gm.index.sort().values == gm.index).all()

    def test_bounds(self):
        with pytest.raises(ValueError):
            GroupMap.contiguous(4, 5, 1)
        with pytest.raises(ValueError):
            GroupMap.contiguous(8, 4, 4)
        with pytest.raises(ValueError):
            GroupMap.contiguous(8, 4, 0)

    def test_broadcast_and_column_sums(self):
        gm = GroupMap.contiguous(5, 2, 1)
        per_group = torch.tensor([1.0, 2.0], dtype=torch.float64)
        wide = gm.broadcast(per_group)
        assert wide.tolist() == [1.0, 1.0, 1.0, 2.0, 2.0]
        back = gm.group_column_sums(torch.ones(5, dtype=torch.float64))
        assert back.tolist() == [3.0, 2.0]


class TestDenseForward:
    def test_zero_noise_limit_is_deterministic_matmul(self):
        # log_alpha is clamped at -8, so the residual noise std is
        # sqrt(delta); the output must sit within a few of those.
        layer = dense_layer(2, 4, groups=2, bias=False)
        with torch.no_grad():
            layer.log_alpha.fill_(-8.0)
        H = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        z = torch.ones(2, dtype=torch.float64)
        out = layer.forward_train(H, z, torch.Generator().manual_seed(0))
        expected = H @ layer.theta
        assert torch.equal(out.gamma, expected)
        assert ((out.F - expected).abs() <= 6 * out.delta.sqrt() + 1e-12).all()
        assert float(out.delta.detach().max()) < 1e-2

    def test_hand_dot_product(self):
        layer = dense_layer(2, 2, groups=0)
        with torch.no_grad():
            layer.theta.copy_(torch.full((2, 2), 0.5, dtype=torch.float64))
            layer.bias_theta.zero_()
            layer.log_alpha.fill_(-8.0)
            layer.bias_log_alpha.fill_(-8.0)
        H = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        out = layer.forward_train(H, None, torch.Generator().manual_seed(0))
        gamma, f, delta = (t.detach() for t in (out.gamma, out.F, out.delta))
        assert abs(float(gamma[0, 0]) - 1.5) < 1e-15
        assert abs(float(f[0, 0]) - 1.5) < 6 * math.sqrt(float(delta[0, 0]))

    def test_moments_match_monte_carlo(self):
        # 4x6 layer, fixed mask: empirical mean ~= gamma * z and variance
        # ~= delta * z^2 within 3 standard errors at 1e5 draws.
        layer = dense_layer(4, 6, groups=3, seed=1)
        with torch.no_grad():
            layer.log_alpha.uniform_(-2.0, 0.0, generator=torch.Generator().manual_seed(2))
        H = torch.randn(3, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        z = torch.tensor([1.0, 0.7, 0.2], dtype=torch.float64)
        gamma, delta = layer.moments(H)
        zb = layer.group_map.broadcast(z)
        gen = torch.Generator().manual_seed(4)
        n = 100_000
        total = torch.zeros_like(gamma)
        total_sq = torch.zeros_like(gamma)
        for _ in range(n):
            f = layer.forward_train(H, z, gen).F
            total += f
            total_sq += f * f
        mean = total / n
        var = total_sq / n - mean**2
        exp_mean = gamma * zb
        exp_var = delta * zb**2
        se_mean = (exp_var / n).sqrt()
        se_var = exp_var * math.sqrt(2.0 / (n - 1))
        assert ((mean - exp_mean).abs() <= 3 * se_mean + 1e-12).all()
        assert ((var - exp_var).abs() <= 3 * se_var + 1e-12).all()

    def test_mask_scales_whole_groups(self):
        layer = dense_layer(3, 6, groups=3, seed=5, bias=False)
        with torch.no_grad():
            layer.log_alpha.fill_(-8.0)
        H = torch.randn(2, 3, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        z = torch.tensor([1.0, 0.5, 0.0], dtype=torch.float64)
        out = layer.forward_train(H, z, torch.Generator().manual_seed(7)).F
        full = layer.forward_train(H, torch.ones(3, dtype=torch.float64),
                                   torch.Generator().manual_seed(7)).F
        assert torch.allclose(out[:, :2], full[:, :2], atol=1e-6)
        assert torch.allclose(out[:, 2:4], 0.5 * full[:, 2:4], atol=1e-6)
        assert torch.allclose(out[:, 4:], torch.zeros(2, 2, dtype=torch.float64))

    def test_shape_mismatch_raises(self):
        layer = dense_layer()
        with pytest.raises(ValueError):
            layer.forward_train(
                torch.ones(2, 3, dtype=torch.float64),
                torch.ones(3, dtype=torch.float64),
                torch.Generator(),
            )
        with pytest.raises(ValueError):
            layer.forward_train(
                torch.ones(2, 4, dtype=torch.float64),
                torch.ones(2, dtype=torch.float64),
                torch.Generator(),
            )


class TestConvForward:
    def test_one_by_one_kernel_equals_dense(self):
        cin, cout = 3, 4
        gen = torch.Generator().manual_seed(8)
        conv = VariationalConv2d(cin, cout, 1, groups=2, generator=gen)
        dense = VariationalDense(cin, cout, groups=2, generator=gen)
        with torch.no_grad():
            dense.theta.copy_(conv.theta.reshape(cout, cin).T)
            dense.log_alpha.copy_(conv.log_alpha.reshape(cout, cin).T)
            dense.bias_theta.copy_(conv.bias_theta)
            dense.bias_log_alpha.copy_(conv.bias_log_alpha)
        x = torch.randn(5, cin, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
        z = torch.tensor([1.0, 0.4], dtype=torch.float64)
        out_c = conv.forward_train(
            x.reshape(5, cin, 1, 1), z, torch.Generator().manual_seed(10)
        )
        out_d = dense.forward_train(x, z, torch.Generator().manual_seed(10))
        got = out_c.F.reshape(5, cout)
        assert torch.allclose(got, out_d.F, rtol=1e-6, atol=1e-9)
        assert torch.allclose(out_c.gamma.reshape(5, cout), out_d.gamma, atol=1e-12)
        assert torch.allclose(out_c.delta.reshape(5, cout), out_d.delta, atol=1e-12)

    def test_zero_noise_limit_is_plain_convolution(self):
        gen = torch.Generator().manual_seed(11)
        conv = VariationalConv2d(2, 4, 3, padding=1, groups=2, generator=gen, bias=False)
        with torch.no_grad():
            conv.log_alpha.fill_(-8.0)
        x = torch.randn(2, 2, 5, 5, generator=torch.Generator().manual_seed(12),
                        dtype=torch.float64)
        z = torch.ones(2, dtype=torch.float64)
        out = conv.forward_train(x, z, torch.Generator().manual_seed(13))
        expected = torch.nn.functional.conv2d(x, conv.theta, padding=1)
        assert torch.equal(out.gamma, expected)
        assert ((out.F - expected).abs() <= 6 * out.delta.sqrt() + 1e-12).all()

    def test_all_zero_input_gives_zero_moments(self):
        gen = torch.Generator().manual_seed(14)
        conv = VariationalConv2d(1, 2, 3, groups=0, generator=gen, bias=False)
        x = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        out = conv.forward_train(x, None, torch.Generator().manual_seed(15))
        assert torch.equal(out.gamma, torch.zeros_like(out.gamma))
        assert torch.equal(out.delta, torch.zeros_like(out.delta))
        assert out.F.abs().max() < 1e-12


class TestEvalForward:
    def test_full_width_all_mass_on_last_matches_mean_forward(self):
        layer = dense_layer(3, 6, groups=3, seed=16, bias=False)
        with torch.no_grad():
            layer.mu_bar.fill_(12.0)  # beta one-hot on the full mask
        plan = make_width_plan([layer.ordering()], 1.0)
        H = torch.randn(4, 3, generator=torch.Generator().manual_seed(17), dtype=torch.float64)
        out = layer.forward_eval(H, plan.layers[0], mode="mean")
        assert torch.allclose(out, H @ layer.theta, atol=1e-4)

    def test_rescale_factors_applied_per_group(self):
        layer = dense_layer(3, 6, groups=3, seed=18, bias=False)
        params = params_from_beta([0.2, 0.3, 0.5])
        with torch.no_grad():
            layer.mu_bar.copy_(params.mu_bar)
        plan = make_width_plan([layer.ordering()], 2.0 / 3.0)
        H = torch.randn(2, 3, generator=torch.Generator().manual_seed(19), dtype=torch.float64)
        out = layer.forward_eval(H, plan.layers[0], mode="mean")
        gamma, _ = layer.moments(H)
        assert torch.allclose(out[:, :2], gamma[:, :2], atol=1e-9)
        assert torch.allclose(out[:, 2:4], 0.8 * gamma[:, 2:4], atol=1e-9)
        assert torch.equal(out[:, 4:], torch.zeros(2, 2, dtype=torch.float64))

    def test_mean_mode_is_deterministic(self):
        layer = dense_layer(3, 6, groups=3, seed=20)
        plan = make_width_plan([layer.ordering()], 1.0)
        H = torch.randn(2, 3, generator=torch.Generator().manual_seed(21), dtype=torch.float64)
        a = layer.forward_eval(H, plan.layers[0], mode="mean")
        b = layer.forward_eval(H, plan.layers[0], mode="mean")
        assert torch.equal(a, b)

    def test_plan_layer_mismatch(self):
        layer = dense_layer(3, 6, groups=3)
        other = params_from_beta([0.5, 0.5])
        plan = make_width_plan([other], 1.0)
        with pytest.raises(ValueError):
            layer.forward_eval(torch.ones(1, 3, dtype=torch.float64), plan.layers[0])


class TestWeightKlCurves:
    def test_approx_value_at_zero(self):
        # a1 * exp(-e^{a4} a2^2) - 0.5 log 2
        got = float(neg_kl_weight_approx(0.0))
        assert abs(got - 0.3326) < 1e-4

    def test_approx_monotone_on_fit_range(self):
        xs = torch.linspace(-5, 0.5, 200, dtype=torch.float64)
        vals = neg_kl_weight_approx(xs)
        assert (vals.diff() >= 0).all()

    def test_mc_small_alpha_limit(self):
        gen = torch.Generator().manual_seed(22)
        got = neg_kl_weight_mc(-5.0, 10**6, gen)
        assert abs(got - (-2.5)) < 0.01

    def test_mc_seed_reproducibility(self):
        a = neg_kl_weight_mc(0.0, 10**6, torch.Generator().manual_seed(1))
        b = neg_kl_weight_mc(0.0, 10**6, torch.Generator().manual_seed(2))
        assert abs(a - b) < 0.006

    def test_default_curve_tracks_mc_oracle(self):
        # The shipped default constants sit a measured ~0.13 nats above the
        # sampled truth near log alpha = 0 (verified independently by
        # quadrature); they still track the oracle's shape.  The refit
        # pipeline closes the gap to <= 0.02 (see test_kl_fit).
        xs, ys = mc_truth_grid(16, 10**5, seed=5)
        approx = neg_kl_weight_approx(torch.tensor(xs)).numpy()
        gap = np.abs(approx - ys)
        assert gap.max() < 0.15

    def test_input_clamped_outside_valid_range(self):
        assert float(neg_kl_weight_approx(-20.0)) == float(neg_kl_weight_approx(-8.0))
        assert float(neg_kl_weight_approx(3.0)) == float(neg_kl_weight_approx(0.5))


class TestPhi2Forms:
    def test_worked_example_full(self):
        k0 = [[0.1, 0.2]]
        k1 = [[1.0, 2.0]]
        beta = [0.4, 0.6]
        assert abs(phi2_full(k0, k1, beta) - 2.28) < 1e-12
        assert abs(phi2_bruteforce(k0, k1, beta) - 2.28) < 1e-12

    def test_equal_components_ignore_beta(self):
        rng = np.random.default_rng(0)
        k = rng.normal(size=(3, 4))
        for beta in (np.array([1, 0, 0, 0.0]), np.full(4, 0.25)):
            assert abs(phi2_full(k, k, beta) - k.sum()) < 1e-12

    def test_one_hot_at_last_pays_all_slab(self):
        rng = np.random.default_rng(1)
        k0 = rng.normal(size=(2, 5))
        k1 = rng.normal(size=(2, 5))
        beta = np.zeros(5)
        beta[-1] = 1.0
        assert abs(phi2_full(k0, k1, beta) - k1.sum()) < 1e-12

    def test_matrix_form_matches_enumeration_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = rng.integers(1, 9)
            cols = rng.integers(1, 13)
            k0 = rng.normal(size=(d, cols))
            k1 = rng.normal(size=(d, cols))
            beta = rng.dirichlet(np.ones(cols))
            a = phi2_full(k0, k1, beta)
            b = phi2_bruteforce(k0, k1, beta)
            assert abs(a - b) <= 1e-10 * max(1.0, abs(b))

    def test_bruteforce_guard(self):
        with pytest.raises(ValueError):
            phi2_bruteforce(np.zeros((1, 13)), np.zeros((1, 13)), np.ones(13) / 13)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            phi2_full(np.zeros((1, 2)), np.zeros((1, 3)), np.ones(2) / 2)


class TestL0Reduction:
    def test_worked_example(self):
        assert abs(l0_reduction([0.4, 0.6], 1.0, 1) - 1.6) < 1e-15

    def test_one_hot_at_first(self):
        assert abs(l0_reduction([1.0, 0.0, 0.0], 2.5, 3) - 7.5) < 1e-15

    @given(
        st.lists(st.floats(0.01, 1.0), min_size=1, max_size=10),
        st.floats(0.0, 5.0),
        st.integers(1, 8),
    )
    def test_identity_with_constant_slab(self, raw, chi, d):
        beta = np.asarray(raw) / np.sum(raw)
        k1 = np.full((d, beta.size), chi)
        k0 = np.zeros_like(k1)
        assert l0_reduction(beta, chi, d) == pytest.approx(
            phi2_full(k0, k1, beta), abs=1e-12
        )

    def test_negative_chi_rejected(self):
        with pytest.raises(ValueError):
            l0_reduction([1.0], -0.1, 1)


class TestLayerKl:
    def test_matched_prior_and_zero_slab_kl(self):
        layer = dense_layer(2, 4, groups=2, seed=23, bias=False, prior_keep=0.5)
        with torch.no_grad():
            layer.mu_bar.copy_(torch.tensor([0.0], dtype=torch.float64))  # beta matches prior
        terms = layer.kl_terms()
        assert float(terms.phi1.detach()) == 0.0
        # zero out the slab contribution by construction
        k1_sum = float((-neg_kl_weight_approx(layer.log_alpha)).sum())
        assert math.isfinite(k1_sum)

    def test_two_groups_of_one_worked_example(self):
        layer = dense_layer(1, 2, groups=0, bias=False)
        # emulate the grouped matrix form by hand on a 1x2 slab matrix
        k1 = np.array([[1.0, 2.0]])
        beta = np.array([0.4, 0.6])
        assert abs(phi2_full(np.zeros_like(k1), k1, beta) - 2.2) < 1e-12

    def test_grouped_phi2_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        for trial in range(100):
            d = int(rng.integers(1, 9))
            groups = int(rng.integers(2, 7))
            outputs = int(rng.integers(groups, 13))
            gen = torch.Generator().manual_seed(int(trial))
            layer = VariationalDense(
                d, outputs, groups=groups, bias=False, generator=gen
            )
            with torch.no_grad():
                layer.log_alpha.uniform_(-5, 0.5, generator=gen)
                layer.mu_bar.uniform_(-2, 2, generator=gen)
            terms = layer.kl_terms()
            k1 = (-neg_kl_weight_approx(layer.log_alpha)).detach().numpy()
            grouped = np.zeros((1, groups))
            for g in range(groups):
                cols = layer.group_map.index.numpy() == g
                grouped[0, g] = k1[:, cols].sum()
            beta = layer.ordering().beta().detach().numpy()
            expected = phi2_bruteforce(np.zeros_like(grouped), grouped, beta)
            assert abs(float(terms.phi2) - expected) <= 1e-10 * max(1.0, abs(expected))

    def test_bias_kl_is_mask_free(self):
        layer = dense_layer(2, 4, groups=2, seed=24, bias=True)
        terms = layer.kl_terms()
        expected_bias = float((-neg_kl_weight_approx(layer.bias_log_alpha)).sum())
        assert abs(float(terms.bias) - expected_bias) < 1e-12

    def test_unmasked_layer_pays_full_slab(self):
        layer = dense_layer(3, 5, groups=0, seed=25, bias=False)
        expected = float((-neg_kl_weight_approx(layer.log_alpha)).sum())
        assert abs(float(layer.kl()) - expected) < 1e-12

    def test_layer_kl_gradients_match_finite_differences(self):
        # KL rebuilt as an explicit function of each tensor so finite
        # differences can perturb one argument at a time.
        from vnd.layers import neg_kl_weight_approx as nk
        from vnd.ordering import DownhillParams, kl_mask_posterior_prior

        layer = dense_layer(2, 4, groups=2, seed=26)
        gm = layer.group_map
        chain = layer.prior_chain()

        def kl_fn(log_alpha, mu_bar, bias_log_alpha):
            k1 = -nk(log_alpha)
            col = gm.group_column_sums(k1.sum(0))
            beta = DownhillParams(mu_bar, 1.0, gm.n_base).beta()
            j_l = torch.tril(torch.ones(gm.groups, gm.groups, dtype=torch.float64))
            phi2 = col @ j_l.T @ beta
            phi1 = kl_mask_posterior_prior(DownhillParams(mu_bar, 1.0, gm.n_base), chain)
            return phi1 + phi2 + (-nk(bias_log_alpha)).sum()

        la0 = torch.full((2, 4), -1.0, dtype=torch.float64)
        mu0 = torch.tensor([0.7], dtype=torch.float64)
        bl0 = torch.full((4,), -1.0, dtype=torch.float64)
        # sanity: the functional form reproduces the layer's own KL
        with torch.no_grad():
            layer.log_alpha.copy_(la0)
            layer.mu_bar.copy_(mu0)
            layer.bias_log_alpha.copy_(bl0)
        assert abs(float(layer.kl()) - float(kl_fn(la0, mu0, bl0))) < 1e-12
        assert_grad_matches(lambda la: kl_fn(la, mu0, bl0), la0)
        assert_grad_matches(lambda mb: kl_fn(la0, mb, bl0), mu0)
        assert_grad_matches(lambda bl: kl_fn(la0, mu0, bl), bl0)

    def test_loss_through_forward_gradients(self):
        layer = dense_layer(3, 4, groups=2, seed=27)
        H = torch.randn(5, 3, generator=torch.Generator().manual_seed(28),
                        dtype=torch.float64)
        noise_seed = 29

        def loss_fn(theta, log_alpha, mu_bar):
            gen = torch.Generator().manual_seed(noise_seed)
            from vnd.ordering import DownhillParams

            params = DownhillParams(mu_bar, 0.5, 1)
            z = soft_mask_from_noise(params, gumbel_noise(2, gen))
            gamma = H @ theta + layer.bias_theta.detach()
            alpha = torch.exp(log_alpha.clamp(-8, 0.5))
            delta = (H * H) @ (alpha * theta**2) + (
                torch.exp(layer.bias_log_alpha.detach().clamp(-8, 0.5))
                * layer.bias_theta.detach() ** 2
            )
            eps = torch.randn(gamma.shape, generator=gen, dtype=torch.float64)
            f = (gamma + torch.sqrt(delta.clamp_min(1e-38)) * eps) * layer.group_map.broadcast(z)
            return (f**2).sum()

        theta0 = layer.theta.detach().clone()
        la0 = torch.full((3, 4), -1.0, dtype=torch.float64)
        mu0 = torch.tensor([0.4], dtype=torch.float64)
        assert_grad_matches(lambda t: loss_fn(t, la0, mu0), theta0)
        assert_grad_matches(lambda la: loss_fn(theta0, la, mu0), la0)
        assert_grad_matches(lambda mb: loss_fn(theta0, la0, mb), mu0)
