"""Alternating two-level trainer.

One outer iteration: K Adam updates fit the posterior parameters phi on
the lower loss over a fixed minibatch, the result becomes the constant
phi0, an N-step plain-gradient-descent chain on the same loss is then
recorded with retained graphs so its endpoint stays differentiable in
theta, and a single reverse pass through the upper loss at that endpoint
yields the surrogate gradient (direct term plus the chain through the
unrolled steps) that drives the outer Adam update on theta.

The lower and upper losses enter as callables `fn(theta, phi, batch,
rng)` built over the autodiff ops, so the same machinery runs the real
model pipeline and closed-form test problems. All per-iteration noise
(denoising perturbations, projection directions, posterior draws) is
drawn once and shared by every loss evaluation inside that iteration.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives
from .data import BatchIterator
from .errors import (
    ConfigError,
    ConvergenceWarning,
    NumericError,
    ResourceError,
    ShapeError,
    UnsupportedError,
)

__all__ = [
    "TrainConfig", "AdamState", "adam_init", "adam_step",
    "inner_update", "unroll", "surrogate_grad",
    "refine_phi", "gradient_bias_probe", "BiasCurve",
    "MetricsRow", "TrainResult", "TrainingAborted", "train",
]

_LOWERS = ("kl", "fisher")
_LATENT_MODES = ("sample", "enumerate")
_INNER_OPTIMIZERS = ("adam", "sgd")
_METHODS = ("bism", "marginal", "cd")


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on besides model, posterior,
    and data. K counts inner Adam updates, N unrolled descent steps;
    alpha is the inner rate (also used for the unrolled steps and probe
    refinement), beta the outer rate."""

    objective: objectives.ScoreObjective
    K: int = 5
    N: int = 5
    alpha: float = 1e-3
    beta: float = 1e-3
    batch_size: int = 100
    max_iters: int = 1000
    seed: int = 0
    eval_every: int = 500
    lower: str = "kl"
    latent_mode: str = "sample"
    inner_optimizer: str = "adam"
    method: str = "bism"
    cd_k: int = 1
    persistent: bool = False
    lr_decay: bool = False
    node_cap: int = 10_000_000

    def __post_init__(self):
        if not isinstance(self.objective, objectives.ScoreObjective):
            raise ConfigError("objective must be a ScoreObjective")
        if self.K < 0 or self.N < 0:
            raise ConfigError("K and N must be non-negative")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        if self.cd_k < 0:
            raise ConfigError("cd_k must be non-negative")
        if self.node_cap < 1:
            raise ConfigError("node_cap must be at least 1")
        if self.lower not in _LOWERS:
            raise ConfigError(f"unknown lower divergence '{self.lower}'")
        if self.latent_mode not in _LATENT_MODES:
            raise ConfigError(f"unknown latent_mode '{self.latent_mode}'")
        if self.inner_optimizer not in _INNER_OPTIMIZERS:
            raise ConfigError(
                f"unknown inner_optimizer '{self.inner_optimizer}'")
        if self.method not in _METHODS:
            raise ConfigError(f"unknown method '{self.method}'")
        if self.lower == "fisher" and self.latent_mode == "enumerate":
            raise ConfigError(
                "fisher lower divergence needs sampled continuous latents")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params):
    return AdamState(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Functional: returns fresh params
    and state so snapshots stay valid."""
    if set(grads) != set(params):
        raise ShapeError(
            f"gradient entries {sorted(grads)} do not match "
            f"parameters {sorted(params)}")
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient for '{k}' has shape {g.shape}, expected {p.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1 ** step)
        vhat = v / (1.0 - state.beta2 ** step)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step,
                            state.beta1, state.beta2, state.eps)


def _check_finite_grads(grads, context):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{context}: non-finite gradient for '{name}'")


def _phi_grads(lower_fn, theta, phi, batch, rng):
    leaves = {k: ad.leaf(np.asarray(v, dtype=np.float64))
              for k, v in phi.items()}
    loss = lower_fn(theta, leaves, batch, rng)
    if not isinstance(loss, ad.Node):
        return {k: np.zeros_like(v) for k, v in phi.items()}, float(loss)
    gs = ad.grad(loss, list(leaves.values()))
    return dict(zip(leaves, gs)), float(ad.value_of(loss))


def inner_update(lower_fn, theta, phi, batch, config, rng=None, state=None):
    """K optimizer steps of phi on the lower loss at fixed theta, all on
    the same minibatch. Returns (phi0, AdamState); phi0 is detached
    plain arrays, state carries Adam moments across outer iterations."""
    phi = {k: np.asarray(v, dtype=np.float64) for k, v in phi.items()}
    use_adam = config.inner_optimizer == "adam"
    if use_adam and state is None:
        state = adam_init(phi)
    for k_step in range(config.K):
        try:
            grads, _ = _phi_grads(lower_fn, theta, phi, batch, rng)
        except NumericError as e:
            raise NumericError(f"inner step {k_step}: {e}") from e
        ok = all(np.all(np.isfinite(g)) for g in grads.values())
        if not ok:
            raise NumericError(f"inner step {k_step}: non-finite gradient")
        if use_adam:
            phi, state = adam_step(phi, grads, state, config.alpha)
        else:
            phi = {k: v - config.alpha * grads[k] for k, v in phi.items()}
    return phi, state


def unroll(lower_fn, theta, phi0, batch, config, rng=None):
    """N plain-gradient-descent steps on the lower loss, recorded so the
    endpoint is differentiable w.r.t. theta. phi0 enters as a constant.

    The node budget is checked between steps; a chain that would grow
    past config.node_cap raises ResourceError before building more
    graph.
    """
    phi = {k: np.asarray(v, dtype=np.float64) for k, v in phi0.items()}
    if config.N == 0:
        return phi
    start = ad.node_tally()
    for m in range(config.N):
        if ad.node_tally() - start > config.node_cap:
            raise ResourceError(
                f"unroll step {m}: node budget {config.node_cap} exceeded; "
                f"lower N or raise node_cap")
        cur = {k: v if isinstance(v, ad.Node) else ad.leaf(v)
               for k, v in phi.items()}
        loss = lower_fn(theta, cur, batch, rng)
        if not isinstance(loss, ad.Node):
            return cur
        gs = ad.grad(loss, list(cur.values()), retain_graph=True)
        phi = {k: ad.sub(cur[k], ad.mul(config.alpha, g))
               for k, g in zip(cur, gs)}
    return phi


def surrogate_grad(lower_fn, upper_fn, theta, phi0, batch, config, rng=None):
    """Gradient of the upper loss at the unrolled endpoint w.r.t. theta.

    One reverse pass covers both the direct dependence of the upper loss
    on theta and the chain through the N unrolled steps. Returns
    (gradient dict, upper loss value).
    """
    leaves = {k: ad.leaf(np.asarray(v, dtype=np.float64))
              for k, v in theta.items()}
    phi_hat = unroll(lower_fn, leaves, phi0, batch, config, rng)
    j = upper_fn(leaves, phi_hat, batch, rng)
    if not isinstance(j, ad.Node):
        return ({k: np.zeros_like(ad.value_of(v)) for k, v in leaves.items()},
                float(np.asarray(j)))
    gs = ad.grad(j, list(leaves.values()))
    grads = dict(zip(leaves, gs))
    _check_finite_grads(grads, "surrogate gradient")
    return grads, float(ad.value_of(j))


def refine_phi(lower_fn, theta, phi, batch, config, k_star=2000, rng=None):
    """k_star plain-gradient steps toward the lower-loss minimizer on a
    fixed batch. Returns (phi, monotone); monotone is False when any
    step failed to decrease the loss."""
    phi = {k: np.asarray(v, dtype=np.float64) for k, v in phi.items()}
    monotone = True
    prev = None
    for _ in range(k_star):
        grads, val = _phi_grads(lower_fn, theta, phi, batch, rng)
        if prev is not None and val > prev + 1e-12 * (abs(prev) + 1.0):
            monotone = False
        prev = val
        phi = {k: v - config.alpha * grads[k] for k, v in phi.items()}
    return phi, monotone


class BiasCurve(list):
    """(N, bias-norm) pairs in ascending N. `warning` is None unless the
    minimizer refinement failed to decrease monotonically."""

    def __init__(self, pairs=(), warning=None):
        super().__init__(pairs)
        self.warning = warning


def _flat(grads):
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def gradient_bias_probe(lower_fn, upper_fn, theta, phi, batch, config,
                        N_values, k_star=2000, rng=None):
    """Surrogate-gradient bias against a converged reference.

    phi is refined by k_star plain-gradient steps to approximate the
    lower-loss minimizer; the reference gradient is the surrogate from
    that minimizer with a long unroll (at the minimizer the unroll is
    stationary, so this equals the gradient of the true upper loss).
    Each requested N then reports the l2 gap of the surrogate gradient
    started from the given phi, under common random numbers.
    """
    phi_star, monotone = refine_phi(lower_fn, theta, phi, batch, config,
                                    k_star, rng)
    warning = None
    if not monotone:
        warning = ("lower loss failed to decrease monotonically during "
                   f"minimizer refinement (k_star={k_star}, "
                   f"alpha={config.alpha})")
    n_list = sorted({int(n) for n in N_values})
    n_ref = max(64, 4 * max(n_list)) if n_list else 64
    ref, _ = surrogate_grad(lower_fn, upper_fn, theta, phi_star, batch,
                            dataclasses.replace(config, N=n_ref), rng)
    ref_flat = _flat(ref)
    curve = BiasCurve(warning=warning)
    for n in n_list:
        g, _ = surrogate_grad(lower_fn, upper_fn, theta, phi, batch,
                              dataclasses.replace(config, N=n), rng)
        curve.append((n, float(np.linalg.norm(_flat(g) - ref_flat))))
    if warning is not None:
        warnings.warn(warning, ConvergenceWarning)
    return curve


@dataclass
class MetricsRow:
    iteration: int
    wall_seconds: float
    upper_loss: float = math.nan
    lower_loss: float = math.nan
    test_ll: float = math.nan
    test_fisher: float = math.nan
    posterior_fisher: float = math.nan


_EVAL_FIELDS = ("test_ll", "test_fisher", "posterior_fisher")


@dataclass
class TrainResult:
    theta: dict
    phi: dict
    metrics: list = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """Raised when a numeric failure stops training; carries the last
    valid parameters so callers can checkpoint them."""

    def __init__(self, message, theta, phi, iteration, metrics):
        super().__init__(message)
        self.theta = theta
        self.phi = phi
        self.iteration = iteration
        self.metrics = metrics


def _bind_losses(model, posterior, config, batch, pts, bundle, h_seed):
    # every evaluation inside one outer iteration reconstructs the same
    # generator, so posterior draws are common random numbers
    spec = config.objective

    def lower_fn(theta, phi, b, rng=None):
        r = np.random.default_rng(h_seed)
        if config.lower == "fisher":
            return objectives.lower_fisher_loss(model, posterior, theta, phi,
                                                pts, r)
        return objectives.lower_kl_loss(model, posterior, theta, phi, pts,
                                        config.latent_mode, r)

    def upper_fn(theta, phi, b, rng=None):
        r = np.random.default_rng(h_seed)
        return objectives.bi_upper_loss(model, posterior, theta, phi, batch,
                                        spec, config.latent_mode, r, bundle)

    return lower_fn, upper_fn


def _marginal_grad(model, spec, theta, batch, bundle):
    """theta-gradient of the marginal objective; needs a model with an
    analytic marginal score."""
    if getattr(model, "kind", None) != "grbm":
        raise UnsupportedError(
            "marginal training needs an analytic marginal score; "
            f"model kind '{getattr(model, 'kind', None)}' has none")
    leaves = {k: ad.leaf(np.asarray(v, dtype=np.float64))
              for k, v in theta.items()}

    def score_fn(pts):
        return model.marginal_score(leaves, pts)

    if spec.kind == "sm":
        loss = objectives.sm_loss(score_fn, batch)
    elif spec.kind == "ssm":
        loss = objectives.ssm_loss(score_fn, batch, spec.n_directions,
                                   directions=bundle["directions"])
    elif spec.kind == "dsm":
        loss = objectives.dsm_loss(score_fn, batch, spec.sigma,
                                   eps=bundle["eps"])
    else:
        loss = objectives.mdsm_loss(score_fn, batch, spec.levels,
                                    spec.weights, spec.sigma0,
                                    eps=bundle["eps"],
                                    level_idx=bundle["level_idx"])
    gs = ad.grad(loss, list(leaves.values()))
    grads = dict(zip(leaves, gs))
    _check_finite_grads(grads, "marginal gradient")
    return grads, float(ad.value_of(loss))


def _merge_eval(row, extra):
    for key, value in (extra or {}).items():
        if key not in _EVAL_FIELDS:
            raise ConfigError(f"eval callback returned unknown metric '{key}'")
        setattr(row, key, float(value))


def train(model, posterior, data, config, eval_fn=None, theta0=None,
          phi0=None):
    """Run the alternating loop on a dataset.

    eval_fn, when given, is called as eval_fn(theta, phi, iteration) on
    parameter snapshots at iteration 0, every eval_every, and at the
    end; it may return a dict with any of test_ll / test_fisher /
    posterior_fisher to merge into that MetricsRow. Snapshots are
    copies, safe to hand to a worker thread.

    A NumericError anywhere in an iteration aborts the run by raising
    TrainingAborted with the last valid parameters and the metrics
    collected so far.
    """
    points = data.points if hasattr(data, "points") else np.asarray(
        data, dtype=np.float64)
    spec = config.objective
    root = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, noise_ss = root.spawn(3)
    rng_init = np.random.default_rng(init_ss)
    theta = (dict(theta0) if theta0 is not None
             else model.init_params(rng_init))
    phi = (dict(phi0) if phi0 is not None
           else posterior.init_params(rng_init))
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    phi = {k: np.array(v, dtype=np.float64) for k, v in phi.items()}

    iterator = BatchIterator(points, config.batch_size,
                             np.random.default_rng(batch_ss))
    outer_state = adam_init(theta)
    inner_state = None
    chains = None
    metrics = []
    started = time.perf_counter()

    def snapshot(params):
        return {k: v.copy() for k, v in params.items()}

    def emit(iteration, upper_val=math.nan, lower_val=math.nan):
        row = MetricsRow(iteration, time.perf_counter() - started,
                         upper_val, lower_val)
        if eval_fn is not None:
            _merge_eval(row, eval_fn(snapshot(theta), snapshot(phi),
                                     iteration))
        metrics.append(row)

    emit(0)
    for t in range(1, config.max_iters + 1):
        batch = iterator.next()
        (iter_ss,) = noise_ss.spawn(1)
        rng_iter = np.random.default_rng(iter_ss)
        bundle = objectives.draw_noise(spec, batch, rng_iter)
        pts = objectives.perturbed_points(spec, batch, bundle)
        (h_seed,) = iter_ss.spawn(1)
        lower_fn, upper_fn = _bind_losses(model, posterior, config, batch,
                                          pts, bundle, h_seed)
        evaluating = t % config.eval_every == 0 or t == config.max_iters
        lower_val = math.nan
        try:
            if config.method == "bism":
                phi, inner_state = inner_update(lower_fn, theta, phi, batch,
                                                config, state=inner_state)
                grads, upper_val = surrogate_grad(lower_fn, upper_fn, theta,
                                                  phi, batch, config)
                if evaluating:
                    with ad.no_grad():
                        lower_val = float(np.asarray(ad.value_of(
                            lower_fn(theta, phi, batch))))
            elif config.method == "marginal":
                grads, upper_val = _marginal_grad(model, spec, theta, batch,
                                                  bundle)
            else:
                from . import samplers
                ascent, chains = samplers.cd_k_grad(
                    model, theta, batch, config.cd_k,
                    np.random.default_rng(h_seed),
                    chains=chains if config.persistent else None)
                grads = {k: -g for k, g in ascent.items()}
                upper_val = math.nan
        except NumericError as e:
            raise TrainingAborted(
                f"numeric failure at iteration {t}: {e}",
                theta, phi, t, metrics) from e
        lr = config.beta / math.sqrt(t) if config.lr_decay else config.beta
        theta, outer_state = adam_step(theta, grads, outer_state, lr)
        if evaluating:
            emit(t, upper_val, lower_val)
    return TrainResult(theta, phi, metrics)
