"""Score-matching losses over marginal and joint energy models.

The marginal family (sm, ssm, dsm, mdsm) consumes a score function
w -> grad_w log ptilde(w). The bi-level upper loss applies the same
family to the surrogate score

    grad_v log[ ptilde(v, h; theta) / q(h | v; phi) ]

with h drawn from (or enumerated under) the variational posterior, and
the two lower losses fit q to the model posterior by KL or by Fisher
divergence in h.

Enumerate mode sums the latent expectation exactly over {0,1}^d_h and
is the reference semantics; sample mode is the single-draw training
path.
"""

import numpy as np
from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigError, DomainError, SizeError, UnsupportedError

__all__ = [
    "ScoreObjective", "make_objective", "geometric_levels",
    "sm_loss", "ssm_loss", "dsm_loss", "mdsm_loss",
    "bi_upper_loss", "lower_kl_loss", "lower_fisher_loss",
    "draw_noise", "perturbed_points",
]

_TRACE_LIMIT = 32
_ENUM_LIMIT = 10


@dataclass(frozen=True)
class ScoreObjective:
    kind: str
    n_directions: int = 1
    sigma: float = 0.3
    levels: tuple = ()
    weights: tuple = ()
    sigma0: float = 0.0


def geometric_levels(lo, hi, n=10):
    """Geometrically spaced noise levels, inclusive endpoints."""
    return np.geomspace(lo, hi, n)


def _validate_prior(levels, weights, sigma0):
    levels = tuple(float(x) for x in np.asarray(levels).reshape(-1))
    weights = tuple(float(x) for x in np.asarray(weights).reshape(-1))
    if not levels:
        raise ConfigError("mdsm: noise prior must contain at least one level")
    if len(weights) != len(levels):
        raise ConfigError("mdsm: levels and weights must have equal length")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError("mdsm: prior weights must sum to 1")
    if any(s <= 0 for s in levels):
        raise DomainError("mdsm: noise levels must be positive")
    if sigma0 is None or sigma0 <= 0:
        raise DomainError("mdsm: anchor sigma0 must be positive")
    return levels, weights, float(sigma0)


def make_objective(kind, n_directions=1, sigma=0.3, levels=(), weights=(),
                   sigma0=None):
    kind = str(kind).lower()
    if kind not in ("sm", "ssm", "dsm", "mdsm"):
        raise ConfigError(f"unknown objective kind '{kind}'")
    if kind == "ssm" and n_directions < 1:
        raise ConfigError("ssm: n_directions must be at least 1")
    if kind == "dsm" and sigma <= 0:
        raise DomainError("dsm: sigma must be positive")
    if kind == "mdsm":
        levels, weights, sigma0 = _validate_prior(levels, weights, sigma0)
        return ScoreObjective(kind, n_directions, sigma, levels, weights, sigma0)
    return ScoreObjective(kind, n_directions, sigma)


def _as_batch(x):
    return np.atleast_2d(np.asarray(ad.value_of(x), dtype=np.float64))


def _half_sq(s):
    return ad.mul(ad.asum(ad.square(s), axis=1), 0.5)


def _trace_term(s, P, d):
    tr = None
    for i in range(d):
        gi = ad.grad(ad.asum(s[:, i]), [P], retain_graph=True)[0]
        col = gi[:, i]
        tr = col if tr is None else ad.add(tr, col)
    return tr


def _sliced_term(s, P, dirs):
    acc = None
    for k in range(dirs.shape[0]):
        u = dirs[k]
        g = ad.grad(ad.asum(ad.mul(s, u)), [P], retain_graph=True)[0]
        quad = ad.asum(ad.mul(g, u), axis=1)
        acc = quad if acc is None else ad.add(acc, quad)
    return ad.mul(acc, 1.0 / dirs.shape[0])


def _rademacher(rng, n, b, d):
    return rng.integers(0, 2, size=(n, b, d)).astype(np.float64) * 2.0 - 1.0


def sm_loss(score_fn, batch):
    """Exact score matching: mean of ||s||^2/2 + tr(Jacobian of s).

    The trace costs one backward pass per input dimension, so the
    dimension is capped; larger problems belong to ssm_loss.
    """
    V = _as_batch(batch)
    b, d = V.shape
    if d > _TRACE_LIMIT:
        raise SizeError(
            f"sm_loss: exact Hessian trace limited to d <= {_TRACE_LIMIT} "
            f"(got {d}); use ssm_loss for higher dimensions")
    P = ad.leaf(V)
    s = score_fn(P)
    return ad.amean(ad.add(_half_sq(s), _trace_term(s, P, d)))


def ssm_loss(score_fn, batch, n_directions=1, rng=None, directions=None):
    """Sliced score matching with Rademacher projections of the Hessian."""
    V = _as_batch(batch)
    b, d = V.shape
    if directions is None:
        if rng is None:
            raise ConfigError("ssm_loss: provide rng or explicit directions")
        directions = _rademacher(rng, n_directions, b, d)
    else:
        directions = np.asarray(directions, dtype=np.float64)
    P = ad.leaf(V)
    s = score_fn(P)
    return ad.amean(ad.add(_half_sq(s), _sliced_term(s, P, directions)))


def dsm_loss(score_fn, batch, sigma, rng=None, eps=None):
    """Denoising score matching against the Gaussian perturbation score.

    Perturbs v to v + sigma*eps and regresses the model score at the
    perturbed point onto (v - vtilde)/sigma^2; no 1/2 factor.
    """
    if sigma <= 0:
        raise DomainError("dsm_loss: sigma must be positive")
    V = _as_batch(batch)
    if eps is None:
        if rng is None:
            raise ConfigError("dsm_loss: provide rng or explicit eps")
        eps = rng.standard_normal(V.shape)
    vtil = V + sigma * eps
    P = ad.leaf(vtil)
    s = score_fn(P)
    target = (V - vtil) / sigma ** 2
    return ad.amean(ad.asum(ad.square(ad.sub(s, target)), axis=1))


def mdsm_loss(score_fn, batch, levels, weights, sigma0, rng=None, eps=None,
              level_idx=None):
    """Multiscale denoising: per-sample noise level from a discrete prior,
    regression anchored at the fixed sigma0 target (v - vtilde)/sigma0^2."""
    levels, weights, sigma0 = _validate_prior(levels, weights, sigma0)
    V = _as_batch(batch)
    b, d = V.shape
    if eps is None:
        if rng is None:
            raise ConfigError("mdsm_loss: provide rng or explicit eps")
        eps = rng.standard_normal(V.shape)
    if level_idx is None:
        if rng is None:
            raise ConfigError("mdsm_loss: provide rng or explicit level_idx")
        level_idx = rng.choice(len(levels), size=b, p=weights)
    sig = np.asarray(levels)[np.asarray(level_idx)][:, None]
    vtil = V + sig * eps
    P = ad.leaf(vtil)
    s = score_fn(P)
    target = (V - vtil) / sigma0 ** 2
    return ad.amean(ad.asum(ad.square(ad.sub(s, target)), axis=1))


# ---------------------------------------------------------------------------
# Bi-level objectives


def _configs(d):
    return ((np.arange(2 ** d)[:, None] >> np.arange(d)) & 1).astype(np.float64)


def _check_enum(posterior):
    if getattr(posterior, "kind", None) != "bernoulli":
        raise UnsupportedError("enumerate mode requires a Bernoulli posterior")
    if posterior.d_h > _ENUM_LIMIT:
        raise SizeError(
            f"enumerate mode limited to d_h <= {_ENUM_LIMIT}, got {posterior.d_h}")


def _perturb(spec, V, rng, noise):
    """Evaluation points and regression target for denoising kinds."""
    if spec.kind not in ("dsm", "mdsm"):
        return V, None
    eps = noise.get("eps")
    if eps is None:
        if rng is None:
            raise ConfigError(f"{spec.kind}: provide rng or noise['eps']")
        eps = rng.standard_normal(V.shape)
    if spec.kind == "dsm":
        if spec.sigma <= 0:
            raise DomainError("dsm: sigma must be positive")
        sig = spec.sigma
        denom = spec.sigma ** 2
    else:
        levels, weights, sigma0 = _validate_prior(spec.levels, spec.weights,
                                                  spec.sigma0)
        idx = noise.get("level_idx")
        if idx is None:
            if rng is None:
                raise ConfigError("mdsm: provide rng or noise['level_idx']")
            idx = rng.choice(len(levels), size=V.shape[0], p=weights)
        sig = np.asarray(levels)[np.asarray(idx)][:, None]
        denom = sigma0 ** 2
    pts = V + sig * eps
    return pts, (V - pts) / denom


def draw_noise(spec, batch, rng):
    """Pre-draw the stochastic inputs one loss evaluation consumes.

    Keys match the `noise` argument of bi_upper_loss, so a trainer can
    evaluate the loss several times per iteration on shared draws.
    """
    V = _as_batch(batch)
    b, d = V.shape
    noise = {}
    if spec.kind in ("dsm", "mdsm"):
        noise["eps"] = rng.standard_normal(V.shape)
    if spec.kind == "mdsm":
        levels, weights, _ = _validate_prior(spec.levels, spec.weights,
                                             spec.sigma0)
        noise["level_idx"] = rng.choice(len(levels), size=b, p=weights)
    if spec.kind == "ssm":
        noise["directions"] = _rademacher(rng, spec.n_directions, b, d)
    return noise


def perturbed_points(spec, batch, noise=None):
    """Points the upper loss evaluates at: the denoising perturbation of
    the batch for dsm/mdsm, the batch itself otherwise."""
    pts, _ = _perturb(spec, _as_batch(batch), None, noise or {})
    return pts


def _apply_f(spec, s, P, target, rng, noise, n_rows, d, tile=1):
    """Per-row value of the chosen F given the surrogate score Node."""
    if spec.kind == "sm":
        if d > _TRACE_LIMIT:
            raise SizeError(
                f"sm: exact Hessian trace limited to d <= {_TRACE_LIMIT} "
                f"(got {d}); use ssm for higher dimensions")
        return ad.add(_half_sq(s), _trace_term(s, P, d))
    if spec.kind == "ssm":
        dirs = noise.get("directions")
        if dirs is None:
            if rng is None:
                raise ConfigError("ssm: provide rng or noise['directions']")
            dirs = _rademacher(rng, spec.n_directions, n_rows // tile, d)
        dirs = np.asarray(dirs, dtype=np.float64)
        if dirs.ndim == 3 and tile > 1:
            dirs = np.tile(dirs, (1, tile, 1))
        return ad.add(_half_sq(s), _sliced_term(s, P, dirs))
    return ad.asum(ad.square(ad.sub(s, target)), axis=1)


def bi_upper_loss(model, posterior, theta, phi, batch, spec,
                  latent_mode="sample", rng=None, noise=None):
    """Upper-level loss: F applied to the surrogate score of the ratio
    ptilde(v,h;theta)/q(h|v;phi).

    sample mode draws one reparameterized h per point; enumerate mode
    (Bernoulli posterior, d_h <= 10) takes the exact latent expectation
    with F applied per configuration. Differentiable in theta and phi.
    """
    noise = noise or {}
    V = _as_batch(batch)
    b, d_v = V.shape
    pts, target = _perturb(spec, V, rng, noise)

    if latent_mode == "enumerate":
        _check_enum(posterior)
        H = _configs(posterior.d_h)
        c = H.shape[0]
        big_pts = np.tile(pts, (c, 1))
        big_h = np.repeat(H, b, axis=0)
        big_target = None if target is None else np.tile(target, (c, 1))
        P = ad.leaf(big_pts)
        e = model.energy(theta, P, big_h)
        lq = posterior.log_density(phi, big_h, P)
        s = ad.grad(ad.asum(ad.neg(ad.add(e, lq))), [P], retain_graph=True)[0]
        per = _apply_f(spec, s, P, big_target, rng, noise, c * b, d_v, tile=c)
        w = ad.exp(posterior.log_density(phi, big_h, big_pts))
        summed = ad.asum(ad.reshape(ad.mul(w, per), (c, b)), axis=0)
        return ad.amean(summed)

    if latent_mode != "sample":
        raise ConfigError(f"unknown latent_mode '{latent_mode}'")
    if rng is None:
        raise ConfigError("sample mode requires rng")
    h = posterior.sample(phi, pts, rng)
    P = ad.leaf(pts)
    e = model.energy(theta, P, h)
    lq = posterior.log_density(phi, h, P)
    s = ad.grad(ad.asum(ad.neg(ad.add(e, lq))), [P], retain_graph=True)[0]
    per = _apply_f(spec, s, P, target, rng, noise, b, d_v)
    return ad.amean(per)


def lower_kl_loss(model, posterior, theta, phi, batch, latent_mode="sample",
                  rng=None):
    """Lower-level KL fit: mean over the batch of
    E_q[log q(h|v;phi) + E(v,h;theta)], the KL to the model posterior up
    to a phi-independent constant."""
    V = _as_batch(batch)
    b = V.shape[0]
    if latent_mode == "enumerate":
        _check_enum(posterior)
        H = _configs(posterior.d_h)
        c = H.shape[0]
        big_v = np.tile(V, (c, 1))
        big_h = np.repeat(H, b, axis=0)
        e = model.energy(theta, big_v, big_h)
        lq = posterior.log_density(phi, big_h, big_v)
        per = ad.mul(ad.exp(lq), ad.add(lq, e))
        return ad.amean(ad.asum(ad.reshape(per, (c, b)), axis=0))
    if latent_mode != "sample":
        raise ConfigError(f"unknown latent_mode '{latent_mode}'")
    if rng is None:
        raise ConfigError("sample mode requires rng")
    h = posterior.sample(phi, V, rng)
    e = model.energy(theta, V, h)
    lq = posterior.log_density(phi, h, V)
    return ad.amean(ad.add(lq, e))


def lower_fisher_loss(model, posterior, theta, phi, batch, rng):
    """Lower-level Fisher fit: half the mean squared gap between the
    posterior score and the model score in h, at reparameterized draws.
    Continuous latents only."""
    if getattr(posterior, "kind", None) == "bernoulli":
        raise UnsupportedError(
            "lower_fisher_loss needs a continuous latent; the Fisher "
            "divergence is undefined for discrete h")
    V = _as_batch(batch)
    h = posterior.sample(phi, V, rng)
    if not isinstance(h, ad.Node):
        h = ad.leaf(h)
    e = model.energy(theta, V, h)
    score_p = ad.grad(ad.asum(ad.neg(e)), [h], retain_graph=True)[0]
    score_q = posterior.score_h(phi, h, V)
    return ad.amean(_half_sq(ad.sub(score_q, score_p)))
