"""Exact evaluation for the analytically tractable model: brute-force
partition function, held-out log-likelihood, Fisher-divergence test loss
(up to the data-dependent constant), posterior Fisher divergence for
continuous-latent pairs, and 2-d density grids with a plain-text format.
"""

import dataclasses

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from . import models
from .errors import ConfigError, ParseError, SizeError, UnsupportedError

__all__ = [
    "DensityGrid",
    "grbm_log_partition",
    "test_log_likelihood",
    "test_fisher_loss",
    "posterior_fisher_eval",
    "density_grid",
    "save_density_grid",
    "load_density_grid",
]

# enumeration over 2^d_h latent configs; beyond this the sum is hopeless
_MAX_D_H = 20

# replicated rows per autodiff pass in the stochastic trace estimate
_TRACE_CHUNK_ROWS = 262144

_GRID_MAGIC = "# density_grid v1"


def _points(dataset):
    pts = getattr(dataset, "points", dataset)
    return np.atleast_2d(np.asarray(pts, dtype=np.float64))


def _plain_theta(theta):
    return {k: np.asarray(ad.value_of(v), dtype=np.float64)
            for k, v in theta.items()}


def _latent_configs(d_h):
    return ((np.arange(2 ** d_h)[:, None] >> np.arange(d_h)) & 1).astype(
        np.float64)


def grbm_log_partition(theta):
    """log Z by exact latent enumeration.

    Each binary configuration contributes a Gaussian whose integral is
    closed-form, so

        log Z = logsumexp_h [c.h + (||b + sigma W h||^2 - ||b||^2) / (2 sigma^2)]
                + (d_v / 2) log(2 pi sigma^2).
    """
    th = _plain_theta(theta)
    W, b, c = th["W"], th["b"], th["c"]
    d_v, d_h = W.shape
    if d_h > _MAX_D_H:
        raise SizeError(
            f"grbm_log_partition: enumeration over 2^{d_h} latent configs "
            f"exceeds the d_h <= {_MAX_D_H} limit")
    sigma = np.exp(float(th["log_sigma"]))
    H = _latent_configs(d_h)
    means = b + sigma * (H @ W.T)
    logm = H @ c + ((means ** 2).sum(axis=1) - b @ b) / (2.0 * sigma ** 2)
    return float(logsumexp(logm) + 0.5 * d_v * np.log(2.0 * np.pi * sigma ** 2))


def test_log_likelihood(dataset, theta):
    """Mean log-density of the dataset under the exactly normalized model."""
    V = _points(dataset)
    th = _plain_theta(theta)
    log_z = grbm_log_partition(th)
    with ad.no_grad():
        fe = np.asarray(ad.value_of(models.grbm_free_energy(V, th)))
    return float((-fe).mean() - log_z)


def _marginal_score_nodes(V, theta):
    vleaf = ad.leaf(V)
    fe = models.grbm_free_energy(vleaf, theta)
    (dfe,) = ad.grad(ad.asum(fe), [vleaf], retain_graph=True)
    return vleaf, dfe  # dfe is the free-energy gradient, minus the score


def test_fisher_loss(dataset, theta, exact=True, n_directions=10, rng=None):
    """Mean of half the squared marginal score plus the Hessian trace of
    the marginal log-density. Differs from the Fisher divergence to the
    data density only by a model-independent constant.

    exact=True (d_v <= 8) takes the trace coordinate by coordinate with
    a second backward pass; otherwise it is a Hutchinson estimate over
    n_directions Rademacher probes per point.
    """
    V = _points(dataset)
    n, d_v = V.shape
    th = _plain_theta(theta)
    if exact:
        if d_v > 8:
            raise SizeError(
                f"test_fisher_loss: exact trace needs d_v <= 8, got {d_v}")
        vleaf, dfe = _marginal_score_nodes(V, th)
        sq = 0.5 * (np.asarray(ad.value_of(dfe)) ** 2).sum(axis=1)
        trace = np.zeros(n)
        for i in range(d_v):
            (gi,) = ad.grad(ad.asum(dfe[:, i]), [vleaf], retain_graph=True)
            trace += np.asarray(ad.value_of(gi))[:, i]
        return float(np.mean(sq - trace))  # score = -dfe, trace flips sign
    if rng is None:
        raise ConfigError(
            "test_fisher_loss: rng is required for the stochastic trace")
    if n_directions < 1:
        raise ConfigError(
            f"test_fisher_loss: n_directions must be >= 1, got {n_directions}")
    with ad.no_grad():
        score = np.asarray(
            ad.value_of(models.grbm_marginal_score(V, th)))
    sq = 0.5 * (score ** 2).sum(axis=1)
    per_chunk = max(1, _TRACE_CHUNK_ROWS // n)
    quad_sum = np.zeros(n)
    done = 0
    while done < n_directions:
        kc = min(per_chunk, n_directions - done)
        D = rng.integers(0, 2, size=(kc * n, d_v)).astype(np.float64) * 2.0 - 1.0
        vleaf, dfe = _marginal_score_nodes(np.tile(V, (kc, 1)), th)
        (hvp,) = ad.grad(ad.asum(ad.mul(dfe, D)), [vleaf])
        quad = (D * np.asarray(ad.value_of(hvp))).sum(axis=1)
        quad_sum += quad.reshape(kc, n).sum(axis=0)
        done += kc
    return float(np.mean(sq - quad_sum / n_directions))


def posterior_fisher_eval(model, posterior, theta, phi, dataset, rng,
                          n_draws=16):
    """Monte Carlo posterior Fisher divergence, averaged over the dataset:

        E_v E_{h ~ q} [ 1/2 || score_q(h|v) - score_p(h|v) ||^2 ]

    with n_draws latent draws per point. The conditional model score
    is -grad_h E(v, h). Discrete-latent posteriors have no h-score, so
    they are rejected.
    """
    if getattr(posterior, "kind", None) == "bernoulli" or not hasattr(
            posterior, "score_h"):
        raise UnsupportedError(
            "posterior_fisher_eval: needs a continuous-latent posterior "
            "with an h-score")
    V = _points(dataset)
    total = 0.0
    for _ in range(n_draws):
        with ad.no_grad():
            h = np.asarray(ad.value_of(posterior.sample(phi, V, rng)),
                           dtype=np.float64)
            sq = np.asarray(ad.value_of(posterior.score_h(phi, h, V)),
                            dtype=np.float64)
        hleaf = ad.leaf(h)
        (ge,) = ad.grad(ad.asum(model.energy(theta, V, hleaf)), [hleaf])
        diff = sq + np.asarray(ge)  # score_p = -grad_h E
        total += float(np.mean(0.5 * (diff ** 2).sum(axis=1)))
    return total / n_draws


@dataclasses.dataclass
class DensityGrid:
    """Unnormalized log-density sampled at the midpoints of a regular
    2-d grid, with optional normalized cell masses.

    bounds is ((xmin, xmax), (ymin, ymax)); log_values has shape
    resolution = (nx, ny) with x varying along rows. mass is the raw
    quadrature mass exp(log_values - log Z) * cell area before the
    final renormalization of `probabilities`.
    """

    bounds: tuple
    resolution: tuple
    log_values: np.ndarray
    probabilities: np.ndarray = None
    mass: float = None

    def __post_init__(self):
        nx, ny = self.resolution
        if self.log_values.size != nx * ny:
            raise ValueError(
                f"DensityGrid: {self.log_values.size} values for a "
                f"{nx}x{ny} grid")
        if self.probabilities is not None:
            total = float(self.probabilities.sum())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(
                    f"DensityGrid: probabilities sum to {total!r}, not 1")


def _centers(lo, hi, n):
    if not hi > lo:
        raise ConfigError(f"density_grid: empty axis bounds ({lo}, {hi})")
    if n < 1:
        raise ConfigError(f"density_grid: resolution must be >= 1, got {n}")
    d = (hi - lo) / n
    return lo + d * (np.arange(n) + 0.5), d


def density_grid(theta, bounds, resolution):
    """Evaluate the marginal and package it as a DensityGrid.

    Only planar visibles are drawable; anything else is rejected.
    """
    th = _plain_theta(theta)
    if th["W"].shape[0] != 2:
        raise UnsupportedError(
            f"density_grid: needs d_v = 2, got {th['W'].shape[0]}")
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nx, ny = (int(resolution[0]), int(resolution[1]))
    (x0, x1), (y0, y1) = bounds
    xs, dx = _centers(float(x0), float(x1), nx)
    ys, dy = _centers(float(y0), float(y1), ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    V = np.stack([X.ravel(), Y.ravel()], axis=1)
    with ad.no_grad():
        logv = -np.asarray(ad.value_of(models.grbm_free_energy(V, th)))
    logv = logv.reshape(nx, ny)
    log_z = grbm_log_partition(th)
    probs = np.exp(logv - log_z) * (dx * dy)
    mass = float(probs.sum())
    return DensityGrid(((float(x0), float(x1)), (float(y0), float(y1))),
                       (nx, ny), logv, probs / mass, mass)


def save_density_grid(grid, path):
    """Plain-text export: one header line, then row-major log values."""
    (x0, x1), (y0, y1) = grid.bounds
    nx, ny = grid.resolution
    lines = [f"{_GRID_MAGIC} {x0:.17g} {x1:.17g} {y0:.17g} {y1:.17g} {nx} {ny}"]
    for row in np.asarray(grid.log_values).reshape(nx, ny):
        lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_density_grid(path):
    """Inverse of save_density_grid. The file carries no normalization,
    so probabilities come back as None."""
    with open(path) as fh:
        text = fh.read()
    head, _, body = text.partition("\n")
    tok = head.split()
    if len(tok) != 9 or " ".join(tok[:3]) != _GRID_MAGIC:
        raise ParseError(f"density grid header not recognized: {head!r}")
    try:
        x0, x1, y0, y1 = (float(t) for t in tok[3:7])
        nx, ny = int(tok[7]), int(tok[8])
        values = np.fromstring(body, dtype=np.float64, sep=" ")
    except ValueError as e:
        raise ParseError(f"density grid header: {e}") from None
    if values.size != nx * ny:
        raise ParseError(
            f"density grid body holds {values.size} values, header "
            f"promises {nx * ny}")
    return DensityGrid(((x0, x1), (y0, y1)), (nx, ny),
                       values.reshape(nx, ny))
