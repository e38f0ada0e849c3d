"""Energy functions for latent variable models.

Two families live here. The Gaussian RBM

    E(v, h) = ||v - b||^2 / (2 sigma^2) - c.h - v.W h / sigma

keeps every marginal quantity in closed form, which makes it the
workhorse for oracle checks: its free energy, true posterior and
conditionals are all exact. The deep model stacks a feature MLP, an
additive coupling (z + t(h), h) and a squared-norm head, and is only
accessible through its energy value and gradients.

Parameters are plain dicts of arrays (or autodiff Nodes during
training). sigma is stored as log_sigma so unconstrained optimization
preserves positivity.
"""

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

__all__ = [
    "grbm_init", "grbm_energy", "grbm_free_energy", "grbm_true_posterior",
    "grbm_marginal_score", "grbm_conditionals",
    "deep_init", "deep_energy", "Grbm", "DeepEblvm",
]


def _rows(x, d, what):
    """Promote to [n, d], checking the trailing dimension."""
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


def _align(a, b):
    na = ad.value_of(a).shape[0]
    nb = ad.value_of(b).shape[0]
    if na == nb:
        return a, b
    if na == 1:
        return ad.broadcast_to(a, (nb, ad.value_of(a).shape[1])), b
    if nb == 1:
        return a, ad.broadcast_to(b, (na, ad.value_of(b).shape[1]))
    raise ShapeError(f"batch sizes differ: {na} vs {nb}")


def _squeeze(e, batched):
    return e if batched else e[0]


# ---------------------------------------------------------------------------
# Gaussian RBM


def grbm_init(rng, d_v, d_h, sigma=1.0, scale=0.01):
    return {
        "W": rng.normal(0.0, scale, (d_v, d_h)),
        "b": np.zeros(d_v),
        "c": np.zeros(d_h),
        "log_sigma": np.array(np.log(sigma)),
    }


def _grbm_dims(theta):
    return ad.value_of(theta["W"]).shape


def grbm_energy(v, h, theta):
    """E(v,h) = ||v-b||^2/(2 sigma^2) - c.h - v.W h / sigma.

    Accepts single vectors or batches of rows; relaxed h in [0,1] is
    allowed. Differentiable in every argument.
    """
    d_v, d_h = _grbm_dims(theta)
    v, bv = _rows(v, d_v, "grbm_energy: v")
    h, bh = _rows(h, d_h, "grbm_energy: h")
    v, h = _align(v, h)
    sigma = ad.exp(theta["log_sigma"])
    quad = ad.div(ad.asum(ad.square(ad.sub(v, theta["b"])), axis=1),
                  ad.mul(2.0, ad.square(sigma)))
    lin = ad.asum(ad.mul(h, theta["c"]), axis=1)
    bil = ad.div(ad.asum(ad.mul(ad.matmul(v, theta["W"]), h), axis=1), sigma)
    return _squeeze(ad.sub(quad, ad.add(lin, bil)), bv or bh)


def _grbm_pre(v, theta):
    # preactivation c + v.W / sigma shared by posterior and free energy
    sigma = ad.exp(theta["log_sigma"])
    return ad.add(theta["c"], ad.div(ad.matmul(v, theta["W"]), sigma))


def grbm_free_energy(v, theta):
    """-log ptilde(v) after summing the binary latent out exactly:

        ||v-b||^2/(2 sigma^2) - sum_j softplus(c_j + (v.W)_j / sigma)
    """
    d_v, _ = _grbm_dims(theta)
    v, bv = _rows(v, d_v, "grbm_free_energy: v")
    sigma = ad.exp(theta["log_sigma"])
    quad = ad.div(ad.asum(ad.square(ad.sub(v, theta["b"])), axis=1),
                  ad.mul(2.0, ad.square(sigma)))
    return _squeeze(ad.sub(quad, ad.asum(ad.softplus(_grbm_pre(v, theta)), axis=1)), bv)


def grbm_true_posterior(v, theta):
    """p(h_j = 1 | v) = sigmoid(c_j + (v.W)_j / sigma), independent per unit."""
    d_v, _ = _grbm_dims(theta)
    v, bv = _rows(v, d_v, "grbm_true_posterior: v")
    probs = ad.sigmoid(_grbm_pre(v, theta))
    return probs if bv else probs[0]


def grbm_marginal_score(v, theta):
    """Closed-form marginal score -(v-b)/sigma^2 + W p(h|v) / sigma."""
    d_v, _ = _grbm_dims(theta)
    v, bv = _rows(v, d_v, "grbm_marginal_score: v")
    sigma = ad.exp(theta["log_sigma"])
    probs = ad.sigmoid(_grbm_pre(v, theta))
    pull = ad.div(ad.sub(theta["b"], v), ad.square(sigma))
    push = ad.div(ad.matmul(probs, ad.transpose(theta["W"])), sigma)
    out = ad.add(pull, push)
    return out if bv else out[0]


def grbm_conditionals(theta):
    """Gibbs conditionals: h|v independent Bernoulli, v|h isotropic Gaussian
    with mean b + sigma W h and variance sigma^2. Returns plain arrays."""
    W = ad.value_of(theta["W"])
    b = ad.value_of(theta["b"])
    sigma = float(np.exp(ad.value_of(theta["log_sigma"])))

    def h_given_v(v):
        with ad.no_grad():
            return ad.value_of(grbm_true_posterior(np.asarray(v, float), theta))

    def v_given_h(h):
        h = np.asarray(h, dtype=np.float64)
        mean = b + sigma * (h @ W.T)
        return mean, sigma ** 2

    return h_given_v, v_given_h


# ---------------------------------------------------------------------------
# Deep EBLVM: g1 feature MLP, additive coupling, squared-norm head


def deep_init(rng, d_v, d_h, hidden=128, t_hidden=64, head_width=64):
    def dense(n_out, n_in):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in))

    p = {}
    widths = [d_v, hidden, hidden, hidden, d_h]
    for i in range(4):
        p[f"g1/W{i}"] = dense(widths[i + 1], widths[i])
        p[f"g1/b{i}"] = np.zeros(widths[i + 1])
    p["t/W0"] = dense(t_hidden, d_h)
    p["t/b0"] = np.zeros(t_hidden)
    p["t/W1"] = dense(d_h, t_hidden)
    p["t/b1"] = np.zeros(d_h)
    p["g3/W"] = dense(head_width, 2 * d_h)
    p["g3/b"] = np.zeros(head_width)
    return p


def _affine(x, W, b):
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


def deep_energy(v, h, theta):
    """Energy of the deep model.

    z = g1(v) through three tanh layers; the coupling layer maps
    (z, h) to (z + t(h), h); the head applies one affine layer, ELU,
    and the squared 2-norm, so the energy is nonnegative.
    """
    d_v = ad.value_of(theta["g1/W0"]).shape[1]
    d_h = ad.value_of(theta["t/W0"]).shape[1]
    v, bv = _rows(v, d_v, "deep_energy: v")
    h, bh = _rows(h, d_h, "deep_energy: h")
    v, h = _align(v, h)

    x = v
    for i in range(3):
        x = ad.tanh(_affine(x, theta[f"g1/W{i}"], theta[f"g1/b{i}"]))
    z = _affine(x, theta["g1/W3"], theta["g1/b3"])

    shift = _affine(ad.tanh(_affine(h, theta["t/W0"], theta["t/b0"])),
                    theta["t/W1"], theta["t/b1"])
    y = ad.concat([ad.add(z, shift), h], axis=1)
    u = ad.elu(_affine(y, theta["g3/W"], theta["g3/b"]))
    return _squeeze(ad.asum(ad.square(u), axis=1), bv or bh)


class Grbm:
    """Bundles the closed-form operations under a uniform model interface."""

    kind = "grbm"

    def __init__(self, d_v, d_h):
        self.d_v = d_v
        self.d_h = d_h

    def init_params(self, rng, sigma=1.0, scale=0.01):
        return grbm_init(rng, self.d_v, self.d_h, sigma=sigma, scale=scale)

    def energy(self, theta, v, h):
        return grbm_energy(v, h, theta)

    def free_energy(self, theta, v):
        return grbm_free_energy(v, theta)

    def true_posterior(self, theta, v):
        return grbm_true_posterior(v, theta)

    def marginal_score(self, theta, v):
        return grbm_marginal_score(v, theta)

    def conditionals(self, theta):
        return grbm_conditionals(theta)


class DeepEblvm:
    kind = "deep"

    def __init__(self, d_v, d_h, hidden=128, t_hidden=64, head_width=64):
        self.d_v = d_v
        self.d_h = d_h
        self.hidden = hidden
        self.t_hidden = t_hidden
        self.head_width = head_width

    def init_params(self, rng):
        return deep_init(rng, self.d_v, self.d_h, hidden=self.hidden,
                         t_hidden=self.t_hidden, head_width=self.head_width)

    def energy(self, theta, v, h):
        return deep_energy(v, h, theta)
