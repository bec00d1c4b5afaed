"""Evidential/ensemble surrogates and the UCB acquisition."""

import numpy as np
import pytest

from moboflow.nn import FeedForwardNet
from moboflow.surrogate import (Acquisition, DatasetTooSmall,
                                EnsembleSurrogate, EvidentialSurrogate,
                                NotFittedError, SurrogateConfig, make_surrogate,
                                nig_loss_and_grad, nig_nll, nig_transform)
from tests.conftest import assert_grads_close, central_diff

FAST = SurrogateConfig(hidden=32, depth=2, max_iters=1500, patience=300,
                       min_dataset=10)


def toy_1d(n=200, seed=0):
    """Sin-like 1-d regression restricted to a training range."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    y = np.sin(1.5 * x) * 0.5 + 0.5 + 0.02 * rng.standard_normal((n, 1))
    return x, y


class TestNigMath:
    def test_transform_ranges(self, rng):
        raw = rng.standard_normal((50, 3, 4)) * 3.0
        gamma, nu, alpha, beta = nig_transform(raw)
        assert np.all(nu > 0)
        assert np.all(alpha > 1)
        assert np.all(beta > 0)

    def test_posterior_closed_form(self):
        # gamma=0.3, nu=2, alpha=3, beta=0.4 -> mu=0.3, sigma=sqrt(0.4/(2*2))

        def inv_softplus(y):
            return np.log(np.expm1(y))

        raw = np.array([[[0.3, inv_softplus(2.0), inv_softplus(2.0),
                          inv_softplus(0.4)]]])
        gamma, nu, alpha, beta = nig_transform(raw)
        assert gamma[0, 0] == pytest.approx(0.3)
        sigma = np.sqrt(beta / (nu * (alpha - 1.0)))
        assert sigma[0, 0] == pytest.approx(np.sqrt(0.4 / 4.0), rel=1e-6)

    def test_nll_matches_direct_formula(self, rng):
        from scipy.special import gammaln
        y = rng.standard_normal(10)
        gamma = rng.standard_normal(10)
        nu = np.abs(rng.standard_normal(10)) + 0.1
        alpha = np.abs(rng.standard_normal(10)) + 1.1
        beta = np.abs(rng.standard_normal(10)) + 0.1
        omega = 2 * beta * (1 + nu)
        direct = (0.5 * np.log(np.pi / nu) - alpha * np.log(omega)
                  + (alpha + 0.5) * np.log((y - gamma) ** 2 * nu + omega)
                  + gammaln(alpha) - gammaln(alpha + 0.5))
        assert np.allclose(nig_nll(y, gamma, nu, alpha, beta), direct)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            raw = rng.standard_normal((3, 2, 4)).ravel()
            y = rng.random((3, 2))

            def loss_at(flat):
                l, _ = nig_loss_and_grad(flat.reshape(3, 2, 4), y, reg=0.1)
                return l

            _, grad = nig_loss_and_grad(raw.reshape(3, 2, 4), y, reg=0.1)
            numeric = central_diff(loss_at, raw.copy())
            assert_grads_close(grad.ravel(), numeric, rel_tol=1e-4,
                               abs_floor=1e-6, min_frac=0.99)


class TestEvidential:
    def test_refit_identical_seed_identical_params(self):
        x, y = toy_1d()
        a = EvidentialSurrogate(1, 1, FAST)
        b = EvidentialSurrogate(1, 1, FAST)
        a.fit(x, y, np.random.default_rng(5))
        b.fit(x, y, np.random.default_rng(5))
        assert np.array_equal(a.net.flat_params(), b.net.flat_params())

    def test_learning_beats_untrained_rmse(self):
        x, y = toy_1d()
        model = EvidentialSurrogate(1, 1, FAST)
        prior = FeedForwardNet.init([1] + [FAST.hidden] * FAST.depth + [4],
                                    np.random.default_rng(3))
        prior_rmse = float(np.sqrt(np.mean(
            (np.atleast_2d(prior.forward(x))[:, 0:1] - y) ** 2)))
        model.fit(x, y, np.random.default_rng(3))
        mu, _ = model.posterior(x)
        rmse = float(np.sqrt(np.mean((mu - y) ** 2)))
        assert rmse < prior_rmse

    def test_ood_epistemic_gap(self):
        x, y = toy_1d(300)
        model = EvidentialSurrogate(1, 1, FAST)
        model.fit(x, y, np.random.default_rng(0))
        inside = np.linspace(-2, 2, 50)[:, None]
        outside = np.concatenate([np.linspace(-6, -3, 25),
                                  np.linspace(3, 6, 25)])[:, None]
        _, sig_in = model.posterior(inside)
        _, sig_out = model.posterior(outside)
        assert sig_out.mean() >= 2.0 * sig_in.mean()

    def test_training_points_recovered(self):
        x, y = toy_1d(300)
        model = EvidentialSurrogate(1, 1, FAST)
        model.fit(x, y, np.random.default_rng(0))
        mu, _ = model.posterior(x)
        frac = np.mean(np.abs(mu - y) <= 0.1)
        assert frac >= 0.9

    def test_too_small_dataset(self):
        model = EvidentialSurrogate(1, 1, FAST)
        with pytest.raises(DatasetTooSmall):
            model.fit(np.zeros((5, 1)), np.zeros((5, 1)), np.random.default_rng(0))

    def test_unfitted_posterior_raises(self):
        with pytest.raises(NotFittedError):
            EvidentialSurrogate(1, 1, FAST).posterior(np.zeros((1, 1)))

    def test_parameter_ranges_on_random_probes(self, rng):
        x, y = toy_1d(100)
        model = EvidentialSurrogate(1, 1, FAST)
        model.fit(x, y, np.random.default_rng(0))
        gamma, nu, alpha, beta = nig_transform(model.raw_outputs(
            rng.uniform(-10, 10, size=(100, 1))))
        assert np.all(nu > 0) and np.all(alpha > 1) and np.all(beta > 0)


class TestEnsemble:
    def test_identical_members_zero_sigma(self):
        model = EnsembleSurrogate(2, 1, FAST)
        net = FeedForwardNet.init([2, 4, 1], np.random.default_rng(0))
        model.members = [net, net.clone()]
        _, sigma = model.posterior(np.array([[0.3, 0.4]]))
        assert np.allclose(sigma, 0.0)

    def test_population_std(self):
        class Fixed:
            def __init__(self, v):
                self.v = v

            def forward(self, x):
                return np.full((len(np.atleast_2d(x)), 1), self.v)

        model = EnsembleSurrogate(1, 1, FAST)
        model.members = [Fixed(0.2), Fixed(0.4)]
        mu, sigma = model.posterior(np.zeros((1, 1)))
        assert mu[0, 0] == pytest.approx(0.3)
        assert sigma[0, 0] == pytest.approx(0.1)  # population (ddof=0) std

    def test_posterior_shape_and_learning(self):
        x, y = toy_1d(150)
        cfg = SurrogateConfig(hidden=16, depth=2, max_iters=600, patience=200,
                              min_dataset=10, ensemble_size=3)
        model = EnsembleSurrogate(1, 1, cfg)
        model.fit(x, y, np.random.default_rng(0))
        mu, sigma = model.posterior(x)
        assert mu.shape == y.shape and sigma.shape == y.shape
        assert np.all(sigma >= 0)
        assert float(np.sqrt(np.mean((mu - y) ** 2))) < 0.25

    def test_make_surrogate_dispatch(self):
        assert make_surrogate("evidential", 2, 2).kind == "evidential"
        assert make_surrogate("ensemble", 2, 2).kind == "ensemble"
        with pytest.raises(ValueError):
            make_surrogate("gp", 2, 2)


class FixedPosterior:
    """Surrogate stub with a constant posterior."""

    def __init__(self, mu, sigma):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.n_objectives = len(self.mu)

    def posterior(self, x):
        n = len(np.atleast_2d(x))
        return (np.broadcast_to(self.mu, (n, self.n_objectives)),
                np.broadcast_to(self.sigma, (n, self.n_objectives)))


class TestAcquisition:
    def test_ws_closed_form(self):
        surr = FixedPosterior([0.2, 0.8], [0.1, 0.3])
        acq = Acquisition(surr, "ws", beta_ucb=0.1)
        val = acq.value(np.zeros(2), np.array([0.5, 0.5]))
        assert val == pytest.approx(0.5 + 0.1 * np.sqrt(0.0025 + 0.0225), rel=1e-9)

    def test_beta_zero_pure_mean(self):
        surr = FixedPosterior([0.2, 0.8], [0.5, 0.5])
        acq = Acquisition(surr, "ws", beta_ucb=0.0)
        assert acq.value(np.zeros(2), np.array([0.5, 0.5])) == pytest.approx(0.5)

    def test_monotone_in_mu(self):
        lam = np.array([0.4, 0.6])
        a = Acquisition(FixedPosterior([0.2, 0.5], [0.1, 0.1]), "ws").value(np.zeros(2), lam)
        b = Acquisition(FixedPosterior([0.3, 0.5], [0.1, 0.1]), "ws").value(np.zeros(2), lam)
        assert b > a

    def test_tch_matches_large_sample_mc(self):
        mu = np.array([0.3, 0.6])
        sigma = np.array([0.1, 0.2])
        lam = np.array([0.4, 0.6])
        surr = FixedPosterior(mu, sigma)
        acq = Acquisition(surr, "tch", beta_ucb=0.0, rng=np.random.default_rng(0))
        est = acq.value(np.zeros(2), lam)
        rng = np.random.default_rng(123)
        draws = mu + sigma * rng.standard_normal((1_000_000, 2))
        ref = np.max(draws * lam, axis=1)
        se = ref.std() / np.sqrt(len(ref))
        # the 64 common draws are a biased-variance estimator; compare the
        # means with the 64-draw spread as tolerance
        spread = np.max(acq._z @ np.diag(sigma * lam), axis=0).std()
        assert abs(est - ref.mean()) <= 3 * ref.std() / np.sqrt(64) + 3 * se

    def test_tch_deterministic_per_candidate(self):
        surr = FixedPosterior([0.3, 0.6], [0.1, 0.2])
        acq = Acquisition(surr, "tch", rng=np.random.default_rng(0))
        lam = np.array([0.5, 0.5])
        assert acq.value(np.zeros(2), lam) == acq.value(np.zeros(2), lam)

    def test_invalid_args(self):
        surr = FixedPosterior([0.5, 0.5], [0.1, 0.1])
        with pytest.raises(ValueError):
            Acquisition(surr, "ehvi")
        with pytest.raises(ValueError):
            Acquisition(surr, "ws", beta_ucb=-0.1)

    def test_preference_must_be_simplex(self):
        surr = FixedPosterior([0.5, 0.5], [0.1, 0.1])
        acq = Acquisition(surr, "ws")
        with pytest.raises(ValueError):
            acq.value(np.zeros(2), np.array([0.5, 0.6]))
