"""Markov chain samplers: blocked Gibbs for the bilinear model, plain and
annealed Langevin dynamics, and the contrastive-divergence gradient
estimate built on top of them.

Everything here runs batches of chains in lockstep on plain float64
arrays; autodiff only enters where an energy gradient is needed.
"""

import dataclasses

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import ConfigError, NumericError, UnsupportedError

__all__ = [
    "LangevinSchedule",
    "h_conditional",
    "v_conditional",
    "gibbs_grbm",
    "cd_k_grad",
    "langevin",
    "annealed_langevin",
    "eblvm_sample",
]

# row norm beyond which an iterate counts as diverged
_DIVERGE_NORM = 1e6


@dataclasses.dataclass(frozen=True)
class LangevinSchedule:
    """Step size and temperature ladder for Langevin runs.

    The ladder is geometric from t_hi down to t_lo; with t_hi == t_lo it
    is flat and annealed runs coincide with plain ones. sigma0 tags the
    noise scale the run is anchored to, for callers that pair sampling
    with a denoising objective; the samplers themselves never read it.
    """

    step: float = 0.02
    n_steps: int = 1000
    t_lo: float = 1.0
    t_hi: float = 1.0
    sigma0: float = None

    def __post_init__(self):
        if self.step <= 0.0:
            raise ConfigError(f"LangevinSchedule: step must be positive, got {self.step}")
        if self.n_steps < 1:
            raise ConfigError(f"LangevinSchedule: n_steps must be >= 1, got {self.n_steps}")
        if self.t_lo <= 0.0:
            raise ConfigError(f"LangevinSchedule: t_lo must be positive, got {self.t_lo}")
        if self.t_lo > self.t_hi:
            raise ConfigError(
                f"LangevinSchedule: t_lo {self.t_lo} exceeds t_hi {self.t_hi}")

    def temperatures(self):
        # n_steps == 1 yields just t_hi
        return np.geomspace(self.t_hi, self.t_lo, self.n_steps)


def _chains(v0, what):
    v = np.array(v0, dtype=np.float64, copy=True)
    if v.ndim != 2:
        raise ConfigError(f"{what}: chains must be a 2-d array, got shape {v.shape}")
    return v


def h_conditional(theta, v):
    """p(h_j = 1 | v) row by row: sigmoid(c + v.W / sigma)."""
    sigma = np.exp(float(np.asarray(theta["log_sigma"])))
    return expit(np.asarray(theta["c"])
                 + np.asarray(v, dtype=np.float64) @ np.asarray(theta["W"]) / sigma)


def v_conditional(theta, h):
    """Mean and (scalar isotropic) variance of v | h."""
    sigma = np.exp(float(np.asarray(theta["log_sigma"])))
    mean = np.asarray(theta["b"]) + sigma * (
        np.asarray(h, dtype=np.float64) @ np.asarray(theta["W"]).T)
    return mean, sigma ** 2


def gibbs_grbm(theta, v0, steps, rng, return_chain=False):
    """Blocked Gibbs sweeps: resample every latent given v, then every v
    given the fresh latents.

    All chains advance in lockstep. Returns the final (v, h); with
    return_chain=True also the per-sweep histories, shaped
    (steps, n_chains, dim).
    """
    if steps < 1:
        raise ConfigError(f"gibbs_grbm: steps must be >= 1, got {steps}")
    v = _chains(v0, "gibbs_grbm")
    v_hist, h_hist = [], []
    for _ in range(steps):
        probs = h_conditional(theta, v)
        h = (rng.random(probs.shape) < probs).astype(np.float64)
        mean, var = v_conditional(theta, h)
        v = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        if return_chain:
            v_hist.append(v)
            h_hist.append(h)
    if return_chain:
        return v, h, (np.stack(v_hist), np.stack(h_hist))
    return v, h


def _mean_fe_grads(model, theta, points):
    leaves = {name: ad.leaf(val) for name, val in theta.items()}
    loss = ad.amean(model.free_energy(leaves, points))
    grads = ad.grad(loss, list(leaves.values()))
    return {name: np.asarray(g) for name, g in zip(leaves, grads)}


def cd_k_grad(model, theta, batch, k, rng, chains=None, sampler=None):
    """Contrastive-divergence ascent direction for the data log-likelihood.

    The estimate is the mean free-energy gradient at k-step Gibbs samples
    minus the same gradient at the data. Chains start from the batch
    unless persistent `chains` are handed in; with k = 0 the two terms
    coincide and the estimate is exactly zero. `sampler` replaces the
    negative phase: sampler(theta, start, k, rng) -> samples.

    Returns (ascent gradients by parameter name, final chain states).
    """
    if getattr(model, "kind", None) != "grbm":
        raise UnsupportedError(
            "cd_k_grad: Gibbs conditionals are only available for the bilinear model")
    if k < 0:
        raise ConfigError(f"cd_k_grad: k must be >= 0, got {k}")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    start = batch if chains is None else np.asarray(chains, dtype=np.float64)
    if sampler is not None:
        samples = np.asarray(sampler(theta, start, k, rng), dtype=np.float64)
    elif k == 0:
        samples = start
    else:
        samples, _ = gibbs_grbm(theta, start, k, rng)
    model_term = _mean_fe_grads(model, theta, samples)
    data_term = _mean_fe_grads(model, theta, batch)
    ascent = {name: model_term[name] - data_term[name] for name in model_term}
    return ascent, samples


def _check_diverged(v, t):
    norms = np.sqrt((v * v).sum(axis=1))
    if not np.all(np.isfinite(norms)) or norms.max() > _DIVERGE_NORM:
        raise NumericError(f"langevin: chain diverged at step {t}")


def langevin(score_fn, v0, schedule, rng):
    """Unadjusted Langevin dynamics:

        v <- v + (step / 2) score(v) + sqrt(step) noise

    for schedule.n_steps steps. Raises NumericError once any chain stops
    being finite or its norm passes 1e6.
    """
    v = _chains(v0, "langevin")
    half = 0.5 * schedule.step
    root = np.sqrt(schedule.step)
    for t in range(schedule.n_steps):
        v = v + half * np.asarray(score_fn(v)) + root * rng.standard_normal(v.shape)
        _check_diverged(v, t)
    return v


def annealed_langevin(score_fn, v0, schedule, rng):
    """Langevin with a geometric temperature ladder from t_hi down to t_lo.

    score_fn(v, t) must return the score already divided by the
    temperature, so a flat ladder at t = 1 reproduces langevin() draw
    for draw.
    """
    v = _chains(v0, "annealed_langevin")
    half = 0.5 * schedule.step
    root = np.sqrt(schedule.step)
    for t, temp in enumerate(schedule.temperatures()):
        v = v + half * np.asarray(score_fn(v, temp)) + root * rng.standard_normal(v.shape)
        _check_diverged(v, t)
    return v


def eblvm_sample(model, posterior, theta, phi, points, n, schedule, rng):
    """Draw n visibles from a trained latent-variable model.

    Each chain is anchored to a resampled training point: the latent is
    fixed at the posterior mean for that point, and annealed Langevin
    then runs on v -> -E(v, h). Only v moves during the run.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    anchors = points[rng.integers(0, len(points), size=n)]
    with ad.no_grad():
        if posterior.kind == "bernoulli":
            h = np.asarray(ad.value_of(posterior.probs(phi, anchors)), dtype=np.float64)
        else:
            h = np.asarray(ad.value_of(posterior.mean_std(phi, anchors)[0]),
                           dtype=np.float64)

    def score_fn(v, temp):
        vleaf = ad.leaf(v)
        total = ad.asum(model.energy(theta, vleaf, h))
        (g,) = ad.grad(total, [vleaf])
        return -np.asarray(g) / temp

    v0 = rng.standard_normal(anchors.shape)
    return annealed_langevin(score_fn, v0, schedule, rng)
