"""Uncertainty-aware multi-task surrogates and the UCB acquisition.

Default surrogate: a single multi-task net with one Normal-Inverse-Gamma
evidence head per objective (predictive mean gamma, epistemic variance
beta / (nu (alpha - 1)), aleatoric variance beta / (alpha - 1)). Alternative:
a deep ensemble of independent mean regressors. Acquisition is UCB applied
to the scalarized posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .nn import AdamState, FeedForwardNet, adam_step, clip_global_norm
from .pareto import validate_preference


class NotFittedError(RuntimeError):
    pass


class DatasetTooSmall(ValueError):
    pass


@dataclass
class SurrogateConfig:
    hidden: int = 64
    depth: int = 2
    lr: float = 1e-3
    max_iters: int = 10_000
    patience: int = 500
    batch_size: int = 64
    dropout: float = 0.1
    weight_decay: float = 1e-6
    val_fraction: float = 0.1
    evid_reg: float = 0.1       # weight of the evidence regularizer
    ensemble_size: int = 5
    min_dataset: int = 20
    grad_clip: float = 10.0
    val_every: int = 10


# -- Normal-Inverse-Gamma head math ------------------------------------------

def nig_transform(raw: np.ndarray):
    """Map raw head outputs (..., 4) to (gamma, nu, alpha, beta) with
    softplus range enforcement (alpha offset by 1)."""
    gamma = raw[..., 0]
    nu = softplus(raw[..., 1])
    alpha = 1.0 + softplus(raw[..., 2])
    beta = softplus(raw[..., 3])
    return gamma, nu, alpha, beta


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nig_nll(y, gamma, nu, alpha, beta):
    """Per-sample evidential negative log-likelihood."""
    omega = 2.0 * beta * (1.0 + nu)
    err = y - gamma
    return (0.5 * np.log(np.pi / nu)
            - alpha * np.log(omega)
            + (alpha + 0.5) * np.log(err * err * nu + omega)
            + gammaln(alpha) - gammaln(alpha + 0.5))


def nig_loss_and_grad(raw: np.ndarray, y: np.ndarray, reg: float):
    """Mean evidential loss (NLL + reg * |err| (2 nu + alpha)) over a batch,
    and its gradient w.r.t. the raw head outputs.

    ``raw`` has shape (n, m, 4); ``y`` has shape (n, m).
    """
    gamma, nu, alpha, beta = nig_transform(raw)
    err = y - gamma
    omega = 2.0 * beta * (1.0 + nu)
    s = err * err * nu + omega
    nll = (0.5 * np.log(np.pi / nu) - alpha * np.log(omega)
           + (alpha + 0.5) * np.log(s) + gammaln(alpha) - gammaln(alpha + 0.5))
    penalty = np.abs(err) * (2.0 * nu + alpha)
    n = raw.shape[0] * raw.shape[1]
    loss = float((nll + reg * penalty).sum() / n)

    d_gamma = (alpha + 0.5) * (-2.0 * err * nu) / s - reg * np.sign(err) * (2.0 * nu + alpha)
    d_nu = (-0.5 / nu - alpha * (2.0 * beta) / omega
            + (alpha + 0.5) * (err * err + 2.0 * beta) / s + reg * 2.0 * np.abs(err))
    d_alpha = -np.log(omega) + np.log(s) + digamma(alpha) - digamma(alpha + 0.5) + reg * np.abs(err)
    d_beta = (-alpha * 2.0 * (1.0 + nu) / omega + (alpha + 0.5) * 2.0 * (1.0 + nu) / s)

    grad = np.empty_like(raw)
    grad[..., 0] = d_gamma
    grad[..., 1] = d_nu * sigmoid(raw[..., 1])
    grad[..., 2] = d_alpha * sigmoid(raw[..., 2])
    grad[..., 3] = d_beta * sigmoid(raw[..., 3])
    return loss, grad / n


# -- surrogates ---------------------------------------------------------------

def _val_split(n, frac, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(frac * n)))
    return order[n_val:], order[:n_val]


def _fit_net(net, x, y, loss_fn, cfg: SurrogateConfig, rng):
    """Minibatch Adam with dropout, weight decay, and early stopping on a
    validation split. ``loss_fn(raw, y)`` returns (loss, d loss / d raw)."""
    train_idx, val_idx = _val_split(len(x), cfg.val_fraction, rng)
    params = net.flat_params()
    adam = AdamState(len(params), cfg.lr)
    best_val = np.inf
    best_params = params.copy()
    since_best = 0
    val_loss = np.inf
    for it in range(cfg.max_iters):
        batch = train_idx[rng.integers(len(train_idx), size=min(cfg.batch_size, len(train_idx)))]
        out, cache = net.forward_cached(x[batch], dropout=cfg.dropout, rng=rng)
        _, grad_out = loss_fn(np.atleast_2d(out), y[batch])
        grads, _ = net.backward(cache, grad_out)
        flat = net.flat_grads(grads) + cfg.weight_decay * params
        flat = clip_global_norm(flat, cfg.grad_clip)
        params = adam_step(adam, params, flat)
        net.set_flat_params(params)
        if it % cfg.val_every == 0:
            val_out = net.forward(x[val_idx])
            val_loss, _ = loss_fn(np.atleast_2d(val_out), y[val_idx])
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_params = params.copy()
                since_best = 0
            else:
                since_best += cfg.val_every
                if since_best >= cfg.patience:
                    break
    net.set_flat_params(best_params)
    return float(best_val)


class EvidentialSurrogate:
    """Single multi-task net: shared trunk, one NIG evidence head per objective."""

    kind = "evidential"

    def __init__(self, feature_dim: int, n_objectives: int, cfg: SurrogateConfig | None = None):
        self.feature_dim = feature_dim
        self.n_objectives = n_objectives
        self.cfg = cfg or SurrogateConfig()
        self.net = None
        self.val_loss = None

    def fit(self, x: np.ndarray, y: np.ndarray, rng) -> float:
        cfg = self.cfg
        if len(x) < cfg.min_dataset:
            raise DatasetTooSmall(f"need at least {cfg.min_dataset} observations, got {len(x)}")
        sizes = [self.feature_dim] + [cfg.hidden] * cfg.depth + [4 * self.n_objectives]
        self.net = FeedForwardNet.init(sizes, rng)
        m = self.n_objectives

        def loss_fn(raw, yy):
            return nig_loss_and_grad(raw.reshape(len(raw), m, 4), yy, cfg.evid_reg)

        def loss_fn_flat(raw, yy):
            loss, g = loss_fn(raw, yy)
            return loss, g.reshape(len(raw), 4 * m)

        self.val_loss = _fit_net(self.net, x, y, loss_fn_flat, cfg, rng)
        return self.val_loss

    def raw_outputs(self, x: np.ndarray) -> np.ndarray:
        if self.net is None:
            raise NotFittedError("surrogate has not been fitted")
        out = np.atleast_2d(self.net.forward(x))
        return out.reshape(len(out), self.n_objectives, 4)

    def posterior(self, x: np.ndarray):
        """Per-objective (mu, sigma); sigma is the epistemic standard deviation."""
        gamma, nu, alpha, beta = nig_transform(self.raw_outputs(np.atleast_2d(x)))
        sigma = np.sqrt(beta / (nu * (alpha - 1.0)))
        return gamma, sigma

    def aleatoric_variance(self, x: np.ndarray) -> np.ndarray:
        _, _, alpha, beta = nig_transform(self.raw_outputs(np.atleast_2d(x)))
        return beta / (alpha - 1.0)


class EnsembleSurrogate:
    """Deep ensemble of independent mean regressors; sigma is the population
    standard deviation across members."""

    kind = "ensemble"

    def __init__(self, feature_dim: int, n_objectives: int, cfg: SurrogateConfig | None = None):
        self.feature_dim = feature_dim
        self.n_objectives = n_objectives
        self.cfg = cfg or SurrogateConfig()
        self.members = None
        self.val_loss = None

    def fit(self, x: np.ndarray, y: np.ndarray, rng) -> float:
        cfg = self.cfg
        if len(x) < cfg.min_dataset:
            raise DatasetTooSmall(f"need at least {cfg.min_dataset} observations, got {len(x)}")
        sizes = [self.feature_dim] + [cfg.hidden] * cfg.depth + [self.n_objectives]

        def mse(raw, yy):
            err = raw - yy
            return float((err * err).mean()), 2.0 * err / err.size

        vals = []
        self.members = []
        for _ in range(cfg.ensemble_size):
            net = FeedForwardNet.init(sizes, rng)
            vals.append(_fit_net(net, x, y, mse, cfg, rng))
            self.members.append(net)
        self.val_loss = float(np.mean(vals))
        return self.val_loss

    def posterior(self, x: np.ndarray):
        if self.members is None:
            raise NotFittedError("surrogate has not been fitted")
        preds = np.stack([np.atleast_2d(net.forward(np.atleast_2d(x))) for net in self.members])
        return preds.mean(axis=0), preds.std(axis=0)


def make_surrogate(kind: str, feature_dim: int, n_objectives: int, cfg=None):
    if kind == "evidential":
        return EvidentialSurrogate(feature_dim, n_objectives, cfg)
    if kind == "ensemble":
        return EnsembleSurrogate(feature_dim, n_objectives, cfg)
    raise ValueError(f"unknown surrogate kind {kind!r}")


# -- acquisition --------------------------------------------------------------

TCH_DRAWS = 64


class Acquisition:
    """UCB on the scalarized posterior: mu_s + beta * sigma_s.

    Weighted-sum scalarization propagates independent Gaussians in closed
    form; Tchebycheff uses common-random-number Monte Carlo (a fixed standard
    normal draw matrix, so rewards are deterministic per candidate).
    """

    def __init__(self, surrogate, scalarization: str = "ws", beta_ucb: float = 0.1, rng=None):
        if scalarization not in ("ws", "tch"):
            raise ValueError(f"unknown scalarization {scalarization!r}")
        if beta_ucb < 0.0:
            raise ValueError("beta_ucb must be nonnegative")
        self.surrogate = surrogate
        self.scalarization = scalarization
        self.beta_ucb = beta_ucb
        if scalarization == "tch":
            if rng is None:
                rng = np.random.default_rng(0)
            self._z = rng.standard_normal((TCH_DRAWS, surrogate.n_objectives))
        else:
            self._z = None

    def scalarized_posterior(self, lam, mu: np.ndarray, sigma: np.ndarray):
        lam = validate_preference(lam)
        if self.scalarization == "ws":
            mu_s = mu @ lam
            sigma_s = np.sqrt((sigma * sigma) @ (lam * lam))
        else:
            # draws: (n, TCH_DRAWS, m) -> scalarize -> per-candidate mean/std
            samples = mu[:, None, :] + sigma[:, None, :] * self._z[None, :, :]
            scal = np.max(samples * lam, axis=2)
            mu_s = scal.mean(axis=1)
            sigma_s = scal.std(axis=1)
        return mu_s, sigma_s

    def values(self, x: np.ndarray, lam) -> np.ndarray:
        mu, sigma = self.surrogate.posterior(np.atleast_2d(x))
        mu_s, sigma_s = self.scalarized_posterior(lam, mu, sigma)
        return mu_s + self.beta_ucb * sigma_s

    def value(self, x: np.ndarray, lam) -> float:
        return float(self.values(np.atleast_2d(x), lam)[0])
