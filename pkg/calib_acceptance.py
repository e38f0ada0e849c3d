"""Calibration dry run for the three long acceptance experiments.
Mirrors the exact seeds/configs the acceptance tests will use."""

import time

import numpy as np

from bism import bilevel, data, evaluation, models, objectives, posteriors


def cell_mass_ratio(theta):
    grid = evaluation.density_grid(theta, ((-2.0, 2.0), (-2.0, 2.0)), 64)
    p = grid.probabilities
    filled, empty = [], []
    for a in range(4):
        for b in range(4):
            m = p[16 * a:16 * a + 16, 16 * b:16 * b + 16].sum()
            (filled if (a + b) % 2 == 0 else empty).append(m)
    return np.mean(filled) / np.mean(empty)


def run(name, model, post, train_ds, cfg):
    t0 = time.perf_counter()
    res = bilevel.train(model, post, train_ds, cfg)
    print(f"{name}: {time.perf_counter() - t0:.1f}s", flush=True)
    return res


def checkerboard_experiment():
    train_ds = data.checkerboard(20000, np.random.default_rng(100))
    test_pts = data.checkerboard(10000, np.random.default_rng(101)).points
    g = models.Grbm(2, 4)
    q = posteriors.BernoulliPosterior(2, 4)
    dsm = objectives.make_objective("dsm", sigma=0.05)
    ssm = objectives.make_objective("ssm", n_directions=1)
    sm = objectives.make_objective("sm")
    base = dict(batch_size=100, max_iters=30000, eval_every=30000,
                alpha=1e-3, beta=1e-3, seed=7)
    runs = {
        "dsm": bilevel.TrainConfig(objective=dsm, method="marginal", **base),
        "ssm": bilevel.TrainConfig(objective=ssm, method="marginal", **base),
        "bidsm": bilevel.TrainConfig(objective=dsm, method="bism", K=5, N=5,
                                     **base),
        "bissm": bilevel.TrainConfig(objective=ssm, method="bism", K=5, N=5,
                                     **base),
        "cd1": bilevel.TrainConfig(objective=sm, method="cd", cd_k=1, **base),
    }
    lls = {}
    for name, cfg in runs.items():
        res = run(f"checkerboard {name}", g, q, train_ds, cfg)
        lls[name] = evaluation.test_log_likelihood(test_pts, res.theta)
        ratio = cell_mass_ratio(res.theta)
        print(f"  {name}: test_ll {lls[name]:.4f}  mass ratio {ratio:.2f}",
              flush=True)
    print(f"  |bidsm-dsm| = {abs(lls['bidsm'] - lls['dsm']):.4f}")
    print(f"  |bissm-ssm| = {abs(lls['bissm'] - lls['ssm']):.4f}")


def recovery_experiment():
    theta_star = {
        "W": np.array([[1.2, -1.2, 0.9, -0.9], [0.9, 0.9, -1.2, 1.2]]),
        "b": np.zeros(2), "c": np.zeros(4),
        "log_sigma": np.array(np.log(0.6)),
    }
    train_ds = data.grbm_synthetic(theta_star, 10000, np.random.default_rng(651))
    test_pts = data.grbm_synthetic(theta_star, 10000,
                                   np.random.default_rng(652)).points
    ll_true = evaluation.test_log_likelihood(test_pts, theta_star)
    g = models.Grbm(2, 4)
    q = posteriors.BernoulliPosterior(2, 4)
    dsm = objectives.make_objective("dsm", sigma=0.1)
    cfg = bilevel.TrainConfig(objective=dsm, method="bism", K=5, N=5,
                              batch_size=100, max_iters=12000,
                              eval_every=12000, alpha=1e-3, beta=1e-3, seed=13)
    res = run("recovery bidsm", g, q, train_ds, cfg)
    ll_fit = evaluation.test_log_likelihood(test_pts, res.theta)
    print(f"  ll_true {ll_true:.4f}  ll_fit {ll_fit:.4f}  "
          f"gap {abs(ll_fit - ll_true):.4f}", flush=True)


def deep_posterior_experiment():
    theta_gen = models.Grbm(10, 8).init_params(np.random.default_rng(3),
                                               sigma=0.8, scale=0.6)
    train_ds = data.grbm_synthetic(theta_gen, 5000, np.random.default_rng(912))
    mdsm = objectives.make_objective(
        "mdsm", levels=tuple(objectives.geometric_levels(0.1, 1.0, 5)),
        weights=(0.2,) * 5, sigma0=0.1)
    for d_h in (5, 20):
        dm = models.DeepEblvm(10, d_h, hidden=32, t_hidden=16, head_width=16)
        dq = posteriors.GaussianPosterior(10, d_h, hidden=32)
        seen = {}

        def eval_fn(theta, phi, iteration):
            pf = evaluation.posterior_fisher_eval(
                dm, dq, theta, phi, train_ds.points[:500],
                np.random.default_rng(77), n_draws=8)
            seen[iteration] = pf
            return {"posterior_fisher": pf}

        cfg = bilevel.TrainConfig(objective=mdsm, method="bism", K=5, N=0,
                                  batch_size=100, max_iters=5000,
                                  eval_every=5000, alpha=1e-3, beta=1e-3,
                                  seed=29)
        t0 = time.perf_counter()
        bilevel.train(dm, dq, train_ds, cfg, eval_fn=eval_fn)
        print(f"deep d_h={d_h}: {time.perf_counter() - t0:.1f}s", flush=True)
        print(f"  d_h={d_h}: pf0 {seen[0]:.4g}  pf5000 {seen[5000]:.4g}  "
              f"factor {seen[0] / seen[5000]:.1f}", flush=True)


if __name__ == "__main__":
    t0 = time.perf_counter()
    deep_posterior_experiment()
    recovery_experiment()
    checkerboard_experiment()
    print(f"total {time.perf_counter() - t0:.0f}s")
