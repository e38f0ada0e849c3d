"""Amortized variational posteriors q(h|v; phi).

Two families: independent Bernoulli units with a binary-Concrete
relaxation (for binary latents), and a diagonal Gaussian whose mean and
log-std come from a shared MLP trunk (for continuous latents). Both
sample by reparameterization so pathwise gradients reach phi.

The relaxed Bernoulli log-density is the multilinear extension of the
discrete log-mass: exact at binary vertices, differentiable everywhere
on [0,1]^d.
"""

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError

__all__ = [
    "bernoulli_probs", "sample_concrete", "bernoulli_log_density",
    "gaussian_score", "BernoulliPosterior", "GaussianPosterior",
]

_CLAMP = 1e-12


def _rows(x, d, what):
    xv = ad.value_of(x)
    if xv.ndim == 1:
        if xv.shape[0] != d:
            raise ShapeError(f"{what}: expected dimension {d}, got {xv.shape[0]}")
        return ad.reshape(x, (1, d)), False
    if xv.ndim == 2:
        if xv.shape[1] != d:
            raise ShapeError(f"{what}: expected dimension {d}, got {xv.shape[1]}")
        return x, True
    raise ShapeError(f"{what}: expected 1-D or 2-D input, got ndim={xv.ndim}")


def bernoulli_probs(v, phi):
    """sigmoid(A v + a), one probability per latent unit."""
    A = phi["A"]
    d_h, d_v = ad.value_of(A).shape
    v, bv = _rows(v, d_v, "bernoulli_probs: v")
    z = ad.add(ad.matmul(v, ad.transpose(A)), phi["a"])
    p = ad.sigmoid(z)
    return p if bv else p[0]


def sample_concrete(probs, tau, rng):
    """Binary-Concrete draw h = sigmoid((logit(p) + L) / tau).

    L is standard logistic noise built from uniforms clamped away from
    the endpoints. Gradients flow through probs; the noise is constant.
    """
    pv = ad.value_of(probs)
    if np.any(pv <= 0.0) or np.any(pv >= 1.0):
        raise DomainError("sample_concrete: probs must lie strictly inside (0,1)")
    u = np.clip(rng.uniform(size=pv.shape), _CLAMP, 1.0 - _CLAMP)
    noise = np.log(u) - np.log1p(-u)
    logit = ad.sub(ad.log(probs), ad.log(ad.sub(1.0, probs)))
    h = ad.sigmoid(ad.div(ad.add(logit, noise), tau))
    # float sigmoid saturates to exact 0/1 at low tau; nudge values back
    # into the open interval (the derivative there underflows to 0 anyway)
    hv = ad.value_of(h)
    adj = np.clip(hv, _CLAMP, 1.0 - _CLAMP) - hv
    if np.any(adj != 0.0):
        h = ad.add(h, adj)
    return h


def bernoulli_log_density(h, v, phi):
    """Multilinear extension of the Bernoulli log-mass at relaxed h.

    Computed as -sum_j [h_j softplus(-z_j) + (1-h_j) softplus(z_j)]
    with z the preactivation, which equals sum h log p + (1-h) log(1-p)
    without ever forming p, so it stays finite under saturation.
    """
    A = phi["A"]
    d_h, d_v = ad.value_of(A).shape
    v, bv = _rows(v, d_v, "bernoulli_log_density: v")
    h, bh = _rows(h, d_h, "bernoulli_log_density: h")
    z = ad.add(ad.matmul(v, ad.transpose(A)), phi["a"])
    zv = ad.value_of(z)
    # saturated units have mass exactly 0 on one side; the extension is undefined
    if np.any(1.0 / (1.0 + np.exp(-zv)) <= 0.0) or np.any(1.0 / (1.0 + np.exp(-zv)) >= 1.0):
        raise DomainError("bernoulli_log_density: posterior probability saturated to 0 or 1")
    nv, nh = ad.value_of(v).shape[0], ad.value_of(h).shape[0]
    if nv == 1 and nh > 1:
        z = ad.broadcast_to(z, (nh, d_h))
    ll = ad.neg(ad.asum(ad.add(ad.mul(h, ad.softplus(ad.neg(z))),
                               ad.mul(ad.sub(1.0, h), ad.softplus(z))), axis=1))
    return ll if (bv or bh) else ll[0]


def gaussian_score(h, mu, rho):
    """Score of a diagonal Gaussian in h: -(h - mu) / exp(2 rho)."""
    return ad.div(ad.sub(mu, h), ad.exp(ad.mul(2.0, rho)))


class BernoulliPosterior:
    """Single sigmoid layer over v with a binary-Concrete sampler."""

    kind = "bernoulli"

    def __init__(self, d_v, d_h, tau=0.1):
        self.d_v = d_v
        self.d_h = d_h
        self.tau = tau

    def init_params(self, rng, scale=0.01):
        return {"A": rng.normal(0.0, scale, (self.d_h, self.d_v)),
                "a": np.zeros(self.d_h)}

    def probs(self, phi, v):
        return bernoulli_probs(v, phi)

    def sample(self, phi, v, rng):
        return sample_concrete(bernoulli_probs(v, phi), self.tau, rng)

    def log_density(self, phi, h, v):
        return bernoulli_log_density(h, v, phi)


class GaussianPosterior:
    """Diagonal Gaussian with MLP trunk and separate mean / log-std heads."""

    kind = "gaussian"

    def __init__(self, d_v, d_h, hidden=128):
        self.d_v = d_v
        self.d_h = d_h
        self.hidden = hidden

    def init_params(self, rng):
        def dense(n_out, n_in):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in))

        widths = [self.d_v, self.hidden, self.hidden, self.hidden]
        p = {}
        for i in range(3):
            p[f"W{i}"] = dense(widths[i + 1], widths[i])
            p[f"b{i}"] = np.zeros(widths[i + 1])
        p["mu/W"] = dense(self.d_h, self.hidden)
        p["mu/b"] = np.zeros(self.d_h)
        p["rho/W"] = dense(self.d_h, self.hidden)
        p["rho/b"] = np.zeros(self.d_h)
        return p

    def _trunk(self, phi, v):
        x, bv = _rows(v, self.d_v, "gaussian posterior: v")
        for i in range(3):
            x = ad.tanh(ad.add(ad.matmul(x, ad.transpose(phi[f"W{i}"])),
                               phi[f"b{i}"]))
        mu = ad.add(ad.matmul(x, ad.transpose(phi["mu/W"])), phi["mu/b"])
        rho = ad.add(ad.matmul(x, ad.transpose(phi["rho/W"])), phi["rho/b"])
        return mu, rho, bv

    def mean_std(self, phi, v):
        mu, rho, bv = self._trunk(phi, v)
        std = ad.exp(rho)
        return (mu, std) if bv else (mu[0], std[0])

    def sample(self, phi, v, rng):
        mu, rho, bv = self._trunk(phi, v)
        eps = rng.standard_normal(ad.value_of(mu).shape)
        h = ad.add(mu, ad.mul(ad.exp(rho), eps))
        return h if bv else h[0]

    def log_density(self, phi, h, v):
        mu, rho, bv = self._trunk(phi, v)
        h2, bh = _rows(h, self.d_h, "gaussian posterior: h")
        sq = ad.div(ad.square(ad.sub(h2, mu)), ad.mul(2.0, ad.exp(ad.mul(2.0, rho))))
        ll = ad.neg(ad.asum(ad.add(ad.add(rho, 0.5 * np.log(2 * np.pi)), sq), axis=1))
        return ll if (bv or bh) else ll[0]

    def score_h(self, phi, h, v):
        mu, rho, bv = self._trunk(phi, v)
        h2, bh = _rows(h, self.d_h, "gaussian posterior: h")
        s = gaussian_score(h2, mu, rho)
        return s if (bv or bh) else s[0]
