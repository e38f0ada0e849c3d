"""Variational posterior checks: sampling contracts, densities, reparameterization."""

import numpy as np
import pytest

from bism import autodiff as ad
from bism import posteriors
from bism.errors import DomainError
from _util import rel_err


class TestBernoulliProbs:
    def test_zero_params_give_half(self):
        phi = {"A": np.zeros((3, 2)), "a": np.zeros(3)}
        np.testing.assert_allclose(
            ad.value_of(posteriors.bernoulli_probs(np.array([0.3, -0.4]), phi)),
            0.5 * np.ones(3), atol=0)

    def test_saturation(self):
        phi = {"A": np.zeros((1, 1)), "a": np.array([30.0])}
        p = ad.value_of(posteriors.bernoulli_probs(np.zeros(1), phi))
        assert p[0] > 1 - 1e-9

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        phi = {"A": rng.normal(size=(4, 3)), "a": rng.normal(size=4)}
        v = rng.normal(size=3)
        expect = 1 / (1 + np.exp(-(phi["A"] @ v + phi["a"])))
        np.testing.assert_allclose(
            ad.value_of(posteriors.bernoulli_probs(v, phi)), expect, rtol=1e-13)


class TestConcreteSampling:
    def test_open_unit_interval(self):
        rng = np.random.default_rng(1)
        probs = np.full(5, 0.5)
        for _ in range(100):
            h = ad.value_of(posteriors.sample_concrete(probs, 0.1, rng))
            assert np.all(h > 0) and np.all(h < 1)

    def test_low_temperature_concentrates_on_vertices(self):
        # logistic noise keeps a small mass near the threshold, so demand
        # near-total rather than total vertex concentration
        rng = np.random.default_rng(2)
        probs = np.full(4, 0.5)
        h = ad.value_of(posteriors.sample_concrete(
            np.tile(probs, (10_000, 1)), 0.01, rng))
        dist = np.minimum(h, 1 - h)
        assert np.mean(dist < 1e-3) > 0.96
        assert np.median(dist) < 1e-9

    def test_low_temperature_mean_recovers_probs(self):
        rng = np.random.default_rng(3)
        probs = np.array([0.2, 0.5, 0.8])
        h = ad.value_of(posteriors.sample_concrete(
            np.tile(probs, (100_000, 1)), 0.01, rng))
        np.testing.assert_allclose(h.mean(axis=0), probs, atol=0.01)

    def test_vertex_distance_decreases_with_temperature(self):
        dists = []
        for tau in (1.0, 0.3, 0.1, 0.03):
            rng = np.random.default_rng(4)
            h = ad.value_of(posteriors.sample_concrete(
                np.full((10_000, 2), 0.5), tau, rng))
            dists.append(np.minimum(h, 1 - h).mean())
        assert all(a > b for a, b in zip(dists, dists[1:]))

    def test_degenerate_probs_rejected(self):
        rng = np.random.default_rng(5)
        with pytest.raises(DomainError):
            posteriors.sample_concrete(np.array([0.0, 0.5]), 0.1, rng)
        with pytest.raises(DomainError):
            posteriors.sample_concrete(np.array([1.0]), 0.1, rng)

    def test_determinism(self):
        probs = np.array([0.3, 0.7])
        h1 = ad.value_of(posteriors.sample_concrete(probs, 0.1, np.random.default_rng(6)))
        h2 = ad.value_of(posteriors.sample_concrete(probs, 0.1, np.random.default_rng(6)))
        assert np.array_equal(h1, h2)

    def test_gradient_flows_through_probs(self):
        rng = np.random.default_rng(7)
        p = ad.leaf(np.array([0.4, 0.6]))
        h = posteriors.sample_concrete(p, 0.5, rng)
        (g,) = ad.grad(ad.asum(h), [p])
        assert np.all(g != 0)


class TestBernoulliLogDensity:
    def test_all_ones_at_half(self):
        phi = {"A": np.zeros((4, 2)), "a": np.zeros(4)}
        got = ad.value_of(posteriors.bernoulli_log_density(
            np.ones(4), np.zeros(2), phi))
        np.testing.assert_allclose(got, 4 * np.log(0.5), rtol=1e-13)

    def test_relaxed_midpoint(self):
        phi = {"A": np.zeros((1, 1)), "a": np.zeros(1)}
        got = ad.value_of(posteriors.bernoulli_log_density(
            np.array([0.5]), np.zeros(1), phi))
        np.testing.assert_allclose(got, np.log(0.5), rtol=1e-13)

    def test_binary_latents_match_product_of_masses(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            phi = {"A": rng.normal(size=(5, 3)), "a": rng.normal(size=5)}
            v = rng.normal(size=3)
            h = (rng.uniform(size=5) < 0.5).astype(float)
            p = ad.value_of(posteriors.bernoulli_probs(v, phi))
            mass = np.prod(np.where(h > 0.5, p, 1 - p))
            got = ad.value_of(posteriors.bernoulli_log_density(h, v, phi))
            assert abs(np.exp(got) - mass) < 1e-12


class TestGaussianPosterior:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.post = posteriors.GaussianPosterior(d_v=3, d_h=2, hidden=8)
        self.phi = self.post.init_params(rng)
        for k in self.phi:
            self.phi[k] = self.phi[k] + rng.normal(0, 0.1, self.phi[k].shape)

    def test_tiny_variance_collapses_to_mean(self):
        phi = dict(self.phi)
        phi["rho/W"] = np.zeros_like(phi["rho/W"])
        phi["rho/b"] = np.full_like(phi["rho/b"], -20.0)
        v = np.array([0.1, -0.2, 0.3])
        mu, _ = self.post.mean_std(phi, v)
        h = ad.value_of(self.post.sample(phi, v, np.random.default_rng(10)))
        np.testing.assert_allclose(h, ad.value_of(mu), atol=1e-8)

    def test_sample_mean_within_standard_errors(self):
        v = np.array([0.1, -0.2, 0.3])
        mu, std = self.post.mean_std(self.phi, v)
        rng = np.random.default_rng(11)
        n = 100_000
        hs = ad.value_of(self.post.sample(self.phi, np.tile(v, (n, 1)), rng))
        se = ad.value_of(std) / np.sqrt(n)
        assert np.all(np.abs(hs.mean(axis=0) - ad.value_of(mu)) < 3 * se)

    def test_determinism(self):
        v = np.zeros(3)
        h1 = ad.value_of(self.post.sample(self.phi, v, np.random.default_rng(12)))
        h2 = ad.value_of(self.post.sample(self.phi, v, np.random.default_rng(12)))
        assert np.array_equal(h1, h2)

    def test_score_zero_at_mean(self):
        v = np.array([0.5, 0.5, -1.0])
        mu, _ = self.post.mean_std(self.phi, v)
        s = ad.value_of(self.post.score_h(self.phi, ad.value_of(mu), v))
        np.testing.assert_allclose(s, np.zeros(2), atol=1e-14)

    def test_standard_normal_score(self):
        s = posteriors.gaussian_score(np.array([2.0]), np.array([0.0]),
                                      np.array([0.0]))
        np.testing.assert_allclose(ad.value_of(s), [-2.0], atol=0)

    def test_score_matches_autodiff_of_log_density(self):
        rng = np.random.default_rng(13)
        v = rng.normal(size=3)
        h0 = rng.normal(size=2)
        hn = ad.leaf(h0)
        ld = self.post.log_density(self.phi, hn, v)
        (g,) = ad.grad(ld, [hn])
        s = ad.value_of(self.post.score_h(self.phi, h0, v))
        np.testing.assert_allclose(s, g, atol=1e-10)

    def test_log_density_matches_diagonal_normal(self):
        rng = np.random.default_rng(14)
        v = rng.normal(size=3)
        h = rng.normal(size=2)
        mu, std = self.post.mean_std(self.phi, v)
        mu, std = ad.value_of(mu), ad.value_of(std)
        expect = (-np.log(std) - 0.5 * np.log(2 * np.pi)
                  - (h - mu) ** 2 / (2 * std ** 2)).sum()
        got = ad.value_of(self.post.log_density(self.phi, h, v))
        np.testing.assert_allclose(got, expect, rtol=1e-12)


class TestReparameterization:
    def test_bernoulli_pathwise_matches_fd_of_mc_mean(self):
        # common random numbers on both sides; f(h) = sum h^2
        d_v, d_h, n = 2, 2, 100_000
        v = np.array([0.4, -0.7])
        a0 = np.array([0.3, -0.2])
        A0 = np.array([[0.5, -0.3], [0.2, 0.1]])

        def mc_mean(a_vec, seed=15):
            rng = np.random.default_rng(seed)
            phi = {"A": A0, "a": a_vec}
            probs = posteriors.bernoulli_probs(np.tile(v, (n, 1)), phi)
            h = posteriors.sample_concrete(probs, 0.5, rng)
            return float(ad.value_of(ad.amean(ad.asum(ad.square(h), axis=1))))

        an = ad.leaf(a0)
        rng = np.random.default_rng(15)
        probs = posteriors.bernoulli_probs(np.tile(v, (n, 1)), {"A": A0, "a": an})
        h = posteriors.sample_concrete(probs, 0.5, rng)
        (g,) = ad.grad(ad.amean(ad.asum(ad.square(h), axis=1)), [an])

        eps = 1e-4
        fd = np.zeros(d_h)
        for j in range(d_h):
            e = np.zeros(d_h)
            e[j] = eps
            fd[j] = (mc_mean(a0 + e) - mc_mean(a0 - e)) / (2 * eps)
        assert rel_err(g, fd) < 1e-3

    def test_gaussian_pathwise_matches_fd_of_mc_mean(self):
        post = posteriors.GaussianPosterior(d_v=2, d_h=2, hidden=4)
        rng0 = np.random.default_rng(16)
        phi0 = post.init_params(rng0)
        for k in phi0:
            phi0[k] = phi0[k] + rng0.normal(0, 0.1, phi0[k].shape)
        v = np.array([0.2, -0.5])
        n = 100_000
        keys = ["mu/b", "rho/b"]

        def mc_mean(phi, seed=17):
            rng = np.random.default_rng(seed)
            h = post.sample(phi, np.tile(v, (n, 1)), rng)
            return float(ad.value_of(ad.amean(ad.asum(ad.square(h), axis=1))))

        phi = dict(phi0)
        leaves = {k: ad.leaf(phi0[k]) for k in keys}
        phi.update(leaves)
        rng = np.random.default_rng(17)
        h = post.sample(phi, np.tile(v, (n, 1)), rng)
        gs = ad.grad(ad.amean(ad.asum(ad.square(h), axis=1)),
                     [leaves[k] for k in keys])

        eps = 1e-4
        for k, g in zip(keys, gs):
            fd = np.zeros_like(phi0[k])
            for j in range(fd.size):
                up, dn = dict(phi0), dict(phi0)
                bump = np.zeros_like(phi0[k])
                bump.reshape(-1)[j] = eps
                up[k] = phi0[k] + bump
                dn[k] = phi0[k] - bump
                fd.reshape(-1)[j] = (mc_mean(up) - mc_mean(dn)) / (2 * eps)
            assert rel_err(g, fd) < 1e-3


class TestBernoulliPosteriorClass:
    def test_sample_and_density_roundtrip(self):
        rng = np.random.default_rng(18)
        post = posteriors.BernoulliPosterior(d_v=3, d_h=4, tau=0.1)
        phi = post.init_params(rng)
        v = rng.normal(size=3)
        h = post.sample(phi, v, rng)
        hv = ad.value_of(h)
        assert hv.shape == (4,) and np.all((hv > 0) & (hv < 1))
        ld = post.log_density(phi, h, v)
        assert np.isfinite(ad.value_of(ld))

    def test_default_temperature(self):
        assert posteriors.BernoulliPosterior(2, 2).tau == 0.1
