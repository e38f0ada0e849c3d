"""End-to-end acceptance checks, one verdict per test.

The file runs in definition order: closed forms against brute-force
oracles first, then the two reductions behind the bi-level training
construction, surrogate-gradient correctness, the benchmark training
runs, sampler statistics, and byte-level determinism of the command
line. The training experiments near the end dominate the wall time;
everything is sized for a single core.
"""

import csv
import dataclasses
import math

import numpy as np
from scipy.special import logsumexp

from bism import (bilevel, cli, data, evaluation, models, objectives,
                  posteriors, samplers)
from bism import autodiff as ad

# ---------------------------------------------------------------------------
# independent numpy oracles (no package internals)


def enum_configs(d_h):
    bits = np.arange(2 ** d_h)[:, None] >> np.arange(d_h)[None, :]
    return (bits & 1).astype(np.float64)


def np_energy(theta, V, H):
    """E(v,h) = ||v-b||^2/(2 s^2) - h.(c + v W / s), rows paired."""
    W, b, c = theta["W"], theta["b"], theta["c"]
    s = np.exp(float(theta["log_sigma"]))
    quad = ((V - b) ** 2).sum(axis=1) / (2.0 * s * s)
    return quad - (H * (c + V @ W / s)).sum(axis=1)


def np_free_energy_enum(theta, V):
    H = enum_configs(theta["W"].shape[1])
    e = np.stack([np_energy(theta, V, np.tile(h, (len(V), 1))) for h in H])
    return -logsumexp(-e, axis=0)


def np_log_z(theta):
    W, b, c = theta["W"], theta["b"], theta["c"]
    s = np.exp(float(theta["log_sigma"]))
    d_v = len(b)
    H = enum_configs(W.shape[1])
    mu = b + s * (H @ W.T)
    expo = H @ c + ((mu * mu).sum(axis=1) - b @ b) / (2.0 * s * s)
    return logsumexp(expo) + 0.5 * d_v * math.log(2.0 * math.pi * s * s)


def np_mixture(theta):
    """Latent weights and component moments of the exact marginal."""
    W, b, c = theta["W"], theta["b"], theta["c"]
    s = np.exp(float(theta["log_sigma"]))
    H = enum_configs(W.shape[1])
    mu = b + s * (H @ W.T)
    expo = H @ c + ((mu * mu).sum(axis=1) - b @ b) / (2.0 * s * s)
    w = np.exp(expo - logsumexp(expo))
    return w, mu, s


def np_mixture_draws(theta, n, rng):
    w, mu, s = np_mixture(theta)
    idx = rng.choice(len(w), size=n, p=w)
    return mu[idx] + s * rng.standard_normal((n, mu.shape[1]))


def np_test_ll(theta, V):
    return float(np.mean(-np_free_energy_enum(theta, V)) - np_log_z(theta))


def random_theta(rng, d_v, d_h, w_scale=0.8, b_scale=1.5, c_scale=1.0,
                 s_lo=0.6, s_hi=1.1):
    return {
        "W": rng.uniform(-w_scale, w_scale, (d_v, d_h)),
        "b": rng.uniform(-b_scale, b_scale, d_v),
        "c": rng.uniform(-c_scale, c_scale, d_h),
        "log_sigma": np.array(math.log(rng.uniform(s_lo, s_hi))),
    }


def quad_log_z_2d(theta, half_width=10.0, n=1500):
    """Midpoint quadrature of the unnormalized marginal over a square."""
    xs = np.linspace(-half_width, half_width, n, endpoint=False)
    dx = xs[1] - xs[0]
    xs = xs + dx / 2.0
    acc = -np.inf
    for lo in range(0, n, 200):
        X, Y = np.meshgrid(xs[lo:lo + 200], xs, indexing="ij")
        V = np.stack([X.ravel(), Y.ravel()], axis=1)
        acc = np.logaddexp(acc, logsumexp(-np_free_energy_enum(theta, V)))
    return float(acc + 2.0 * math.log(dx))


def flat(d):
    return np.concatenate([np.ravel(np.asarray(d[k], dtype=np.float64))
                           for k in sorted(d)])


def rel_gap(got, want):
    got, want = flat(got), flat(want)
    return np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-300)


def fd_theta(func, theta, eps=1e-5):
    """Central finite differences of a scalar function of a param dict."""
    out = {}
    for key in theta:
        v = np.asarray(theta[key], dtype=np.float64)
        g = np.zeros_like(v)
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            step = eps * max(1.0, abs(float(v[idx])))
            plus = {k: np.array(theta[k], dtype=np.float64) for k in theta}
            minus = {k: np.array(theta[k], dtype=np.float64) for k in theta}
            plus[key][idx] += step
            minus[key][idx] -= step
            g[idx] = (func(plus) - func(minus)) / (2.0 * step)
        out[key] = g
    return out


COMPLETE_DIRS_2D = np.array([[1.0, 1.0], [1.0, -1.0],
                             [-1.0, 1.0], [-1.0, -1.0]])


def complete_direction_set(b):
    return np.broadcast_to(COMPLETE_DIRS_2D[:, None, :], (4, b, 2)).copy()


# ---------------------------------------------------------------------------
# 1. closed forms against enumeration, quadrature, and finite differences


def test_01_closed_forms_match_enumeration_quadrature_and_fd():
    # free energy vs 2^d_h enumeration
    rng = np.random.default_rng(11)
    worst_fe = 0.0
    for i in range(100):
        d_h = (2, 4, 8)[i % 3]
        theta = random_theta(rng, 2, d_h, s_lo=0.5, s_hi=1.5)
        V = rng.normal(0.0, 2.0, (20, 2))
        got = np.asarray(models.grbm_free_energy(V, theta))
        worst_fe = max(worst_fe, np.abs(got - np_free_energy_enum(theta, V)).max())
    print(f"free energy vs enumeration: worst |delta| {worst_fe:.3g}")
    assert worst_fe < 1e-10

    # log partition vs planar quadrature
    rng = np.random.default_rng(12)
    worst_z = 0.0
    for _ in range(20):
        theta = random_theta(rng, 2, 4)
        exact = evaluation.grbm_log_partition(theta)
        quad = quad_log_z_2d(theta)
        worst_z = max(worst_z, abs(quad - exact) / abs(exact))
    print(f"log partition vs quadrature: worst rel err {worst_z:.3g}")
    assert worst_z < 1e-3

    # the complete Rademacher direction set collapses the sliced loss
    # onto the exact trace
    rng = np.random.default_rng(13)
    theta = random_theta(rng, 2, 4)
    V = rng.normal(0.0, 1.5, (40, 2))

    def score_fn(P):
        return models.grbm_marginal_score(P, theta)

    sm_val = float(ad.value_of(objectives.sm_loss(score_fn, V)))
    ssm_val = float(ad.value_of(objectives.ssm_loss(
        score_fn, V, 4, directions=complete_direction_set(len(V)))))
    print(f"complete-set sliced vs exact: |delta| {abs(ssm_val - sm_val):.3g}")
    assert abs(ssm_val - sm_val) < 1e-10

    # reverse-mode gradients and Hessian-vector products on randomized
    # compositions vs finite differences
    rng = np.random.default_rng(14)
    acts = (ad.tanh, ad.sigmoid, ad.softplus, ad.elu)
    for _ in range(10):
        mats = [rng.normal(0.0, 0.8, (4, 5)), rng.normal(0.0, 0.8, (5, 3))]
        biases = [rng.normal(0.0, 0.4, 5), rng.normal(0.0, 0.4, 3)]
        picks = rng.integers(0, len(acts), size=2)

        def build(x):
            cur = ad.reshape(x, (1, 4))
            for M, bv, a in zip(mats, biases, picks):
                cur = acts[a](ad.add(ad.matmul(cur, M), bv))
            return ad.add(ad.logsumexp(cur), ad.amean(ad.square(cur)))

        xv = rng.normal(0.0, 1.0, 4)
        leafx = ad.leaf(xv)
        g = ad.grad(build(leafx), [leafx])[0]
        gfd = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = 1e-6
            gfd[i] = (float(np.asarray(build(xv + e)))
                      - float(np.asarray(build(xv - e)))) / 2e-6
        assert np.linalg.norm(g - gfd) / np.linalg.norm(gfd) < 1e-4

        u = rng.normal(0.0, 1.0, 4)
        leafx = ad.leaf(xv)
        hv = ad.hvp(build(leafx), leafx, u)

        def grad_at(pt):
            lf = ad.leaf(pt)
            return ad.grad(build(lf), [lf])[0]

        hfd = (grad_at(xv + 1e-6 * u) - grad_at(xv - 1e-6 * u)) / 2e-6
        assert np.linalg.norm(hv - hfd) / max(np.linalg.norm(hfd), 1e-12) < 1e-4


# ---------------------------------------------------------------------------
# 2. with q pinned to the exact posterior, the joint-ratio objective
#    collapses onto the marginal objective, in value and in theta-gradient


def test_02_exact_posterior_collapses_joint_objective_onto_marginal():
    rng = np.random.default_rng(21)
    model = models.Grbm(2, 4)
    q = posteriors.BernoulliPosterior(2, 4)
    theta = random_theta(rng, 2, 4, w_scale=0.7, s_lo=0.7, s_hi=1.1)
    V = rng.normal(0.0, 1.5, (50, 2))

    cases = [
        (objectives.make_objective("sm"), {}),
        (objectives.make_objective("ssm", n_directions=4),
         {"directions": complete_direction_set(len(V))}),
        (objectives.make_objective("dsm", sigma=0.3),
         {"eps": rng.standard_normal(V.shape)}),
    ]

    def pinned_posterior(th):
        s = np.exp(float(th["log_sigma"]))
        return {"A": np.asarray(th["W"]).T / s, "a": np.array(th["c"])}

    def marg_loss(spec, theta_like, bundle):
        def score_fn(P):
            return models.grbm_marginal_score(P, theta_like)

        if spec.kind == "sm":
            return objectives.sm_loss(score_fn, V)
        if spec.kind == "ssm":
            return objectives.ssm_loss(score_fn, V, spec.n_directions,
                                       directions=bundle["directions"])
        return objectives.dsm_loss(score_fn, V, spec.sigma, eps=bundle["eps"])

    for spec, bundle in cases:
        def j_bi(th):
            out = objectives.bi_upper_loss(model, q, th, pinned_posterior(th),
                                           V, spec, "enumerate", None, bundle)
            return float(np.asarray(ad.value_of(out)))

        j_joint = j_bi(theta)
        j_marg = float(ad.value_of(marg_loss(spec, theta, bundle)))
        print(f"{spec.kind}: |value gap| {abs(j_joint - j_marg):.3g}")
        assert abs(j_joint - j_marg) < 1e-8

        leaves = {k: ad.leaf(np.asarray(v, dtype=np.float64))
                  for k, v in theta.items()}
        gs = ad.grad(marg_loss(spec, leaves, bundle), list(leaves.values()))
        analytic = dict(zip(leaves, gs))
        fd = fd_theta(j_bi, theta)
        gap = rel_gap(fd, analytic)
        print(f"{spec.kind}: theta-gradient rel gap {gap:.3g}")
        assert gap < 1e-4


# ---------------------------------------------------------------------------
# 3. the surrogate gradient equals the finite-difference gradient of the
#    unrolled objective, and its bias decays geometrically in the unroll
#    length on a problem with a closed-form minimizer


def test_03_surrogate_gradient_matches_fd_and_bias_decays():
    rng = np.random.default_rng(31)
    model = models.Grbm(2, 2)
    q = posteriors.BernoulliPosterior(2, 2)
    theta = random_theta(rng, 2, 2, w_scale=0.7)
    phi0 = {"A": rng.normal(0.0, 0.3, (2, 2)), "a": rng.normal(0.0, 0.3, 2)}
    batch = rng.normal(0.0, 1.5, (20, 2))
    spec = objectives.make_objective("dsm", sigma=0.3)
    bundle = objectives.draw_noise(spec, batch, np.random.default_rng(32))
    pts = objectives.perturbed_points(spec, batch, bundle)

    def lower_fn(th, ph, b, rng=None):
        return objectives.lower_kl_loss(model, q, th, ph, pts, "sample",
                                        np.random.default_rng(7777))

    def upper_fn(th, ph, b, rng=None):
        return objectives.bi_upper_loss(model, q, th, ph, batch, spec,
                                        "sample", np.random.default_rng(7778),
                                        bundle)

    base = bilevel.TrainConfig(objective=spec, alpha=0.05)
    for n in (0, 1, 5):
        cfg = dataclasses.replace(base, N=n)
        grads, _ = bilevel.surrogate_grad(lower_fn, upper_fn, theta, phi0,
                                          batch, cfg)

        def j_unrolled(th):
            endpoint = bilevel.unroll(lower_fn, th, phi0, batch, cfg)
            vals = {k: ad.value_of(v) for k, v in endpoint.items()}
            return float(np.asarray(ad.value_of(
                upper_fn(th, vals, batch))))

        gap = rel_gap(grads, fd_theta(j_unrolled, theta))
        print(f"N={n}: surrogate vs fd rel gap {gap:.3g}")
        assert gap < 1e-3

    # quadratic problem: the unrolled endpoint and the exact gradient are
    # both in closed form, so the bias curve is exactly geometric
    rng = np.random.default_rng(33)
    M = rng.normal(0.0, 0.8, (3, 3))
    target = rng.normal(0.0, 1.0, (1, 3))
    x0 = {"x": rng.normal(0.0, 1.0, (1, 3))}
    y0 = {"y": rng.normal(0.0, 1.0, (1, 3))}
    alpha, rho = 0.5, 0.5

    def toy_lower(th, ph, b, rng=None):
        d = ad.sub(ph["y"], ad.matmul(th["x"], M.T))
        return ad.mul(0.5, ad.asum(ad.square(d)))

    def toy_upper(th, ph, b, rng=None):
        d = ad.sub(ph["y"], target)
        return ad.mul(0.5, ad.asum(ad.square(d)))

    g_true = ((x0["x"] @ M.T - target) @ M).ravel()
    biases = []
    n_values = range(13)
    for n in n_values:
        cfg = dataclasses.replace(base, N=n, alpha=alpha)
        grads, _ = bilevel.surrogate_grad(toy_lower, toy_upper, x0, y0,
                                          np.zeros((1, 1)), cfg)
        y_n = rho ** n * y0["y"] + (1.0 - rho ** n) * (x0["x"] @ M.T)
        expect = (1.0 - rho ** n) * ((y_n - target) @ M)
        assert rel_gap(grads, {"x": expect}) < 1e-9
        biases.append(np.linalg.norm(grads["x"].ravel() - g_true))
    corr = np.corrcoef(list(n_values), np.log(biases))[0, 1]
    print(f"toy bias decay: corr(log bias, N) = {corr:.5f}")
    assert corr < -0.99


# ---------------------------------------------------------------------------
# 4. more inner steps bring the posterior monotonically closer to the
#    lower-problem minimizer


def test_04_inner_steps_shrink_posterior_gap_monotonically():
    theta = models.grbm_init(np.random.default_rng(41), 2, 4, sigma=0.9,
                             scale=0.8)
    model = models.Grbm(2, 4)
    q = posteriors.BernoulliPosterior(2, 4)
    batch = data.checkerboard(100, np.random.default_rng(42)).points
    s = np.exp(float(theta["log_sigma"]))
    star = {"A": theta["W"].T / s, "a": theta["c"]}

    def lower_fn(th, ph, b, rng=None):
        return objectives.lower_kl_loss(model, q, th, ph, batch, "enumerate")

    base = bilevel.TrainConfig(objective=objectives.make_objective("sm"),
                               alpha=0.05)
    k_values = (0, 1, 5, 10, 20)
    dists = np.zeros((10, len(k_values)))
    for seed in range(10):
        phi0 = q.init_params(np.random.default_rng(seed), scale=0.5)
        for j, k in enumerate(k_values):
            cfg = dataclasses.replace(base, K=k)
            fitted, _ = bilevel.inner_update(lower_fn, theta, dict(phi0),
                                             batch, cfg)
            dists[seed, j] = np.linalg.norm(flat(fitted) - flat(star))
    avg = dists.mean(axis=0)
    print("avg ||phi - phi*|| over K:",
          " ".join(f"{k}:{d:.4f}" for k, d in zip(k_values, avg)))
    assert np.all(np.diff(avg) <= 1e-10)
    assert avg[-1] < avg[0]


# ---------------------------------------------------------------------------
# 5. checkerboard benchmark: five estimators, mass on the right cells,
#    and the bi-level versions tie their marginal baselines


def _cell_mass_ratio(theta):
    grid = evaluation.density_grid(theta, ((-2.0, 2.0), (-2.0, 2.0)), 64)
    p = grid.probabilities
    filled, empty = [], []
    for a in range(4):
        for b in range(4):
            m = p[16 * a:16 * a + 16, 16 * b:16 * b + 16].sum()
            (filled if (a + b) % 2 == 0 else empty).append(m)
    return float(np.mean(filled) / np.mean(empty))


def test_05_checkerboard_training_places_mass_on_filled_cells():
    train_ds = data.checkerboard(20000, np.random.default_rng(100))
    test_pts = data.checkerboard(10000, np.random.default_rng(101)).points
    model = models.Grbm(2, 4)
    q = posteriors.BernoulliPosterior(2, 4)
    dsm = objectives.make_objective("dsm", sigma=0.05)
    ssm = objectives.make_objective("ssm", n_directions=1)
    base = dict(batch_size=100, max_iters=30000, eval_every=30000,
                alpha=1e-3, beta=1e-3, seed=7)
    runs = {
        "dsm": bilevel.TrainConfig(objective=dsm, method="marginal", **base),
        "ssm": bilevel.TrainConfig(objective=ssm, method="marginal", **base),
        "bidsm": bilevel.TrainConfig(objective=dsm, method="bism",
                                     K=5, N=5, **base),
        "bissm": bilevel.TrainConfig(objective=ssm, method="bism",
                                     K=5, N=5, **base),
        "cd1": bilevel.TrainConfig(objective=objectives.make_objective("sm"),
                                   method="cd", cd_k=1, **base),
    }
    lls, ratios = {}, {}
    for name, cfg in runs.items():
        res = bilevel.train(model, q, train_ds, cfg)
        lls[name] = evaluation.test_log_likelihood(test_pts, res.theta)
        ratios[name] = _cell_mass_ratio(res.theta)
        print(f"{name}: test_ll {lls[name]:.4f} mass ratio {ratios[name]:.2f}")
    for name, ratio in ratios.items():
        assert ratio >= 3.0, f"{name}: filled/empty mass ratio {ratio:.2f}"
    assert abs(lls["bidsm"] - lls["dsm"]) <= 0.1
    assert abs(lls["bissm"] - lls["ssm"]) <= 0.1


# ---------------------------------------------------------------------------
# 6. training on draws from a known model recovers its held-out
#    log-likelihood


def test_06_training_recovers_synthetic_ground_truth_likelihood():
    theta_star = {
        "W": np.array([[1.2, -1.2, 0.9, -0.9], [0.9, 0.9, -1.2, 1.2]]),
        "b": np.zeros(2), "c": np.zeros(4),
        "log_sigma": np.array(math.log(0.6)),
    }
    train_ds = data.grbm_synthetic(theta_star, 10000,
                                   np.random.default_rng(651))
    test_pts = data.grbm_synthetic(theta_star, 10000,
                                   np.random.default_rng(652)).points
    ll_true = evaluation.test_log_likelihood(test_pts, theta_star)
    cfg = bilevel.TrainConfig(objective=objectives.make_objective("dsm",
                                                                  sigma=0.1),
                              method="bism", K=5, N=5, batch_size=100,
                              max_iters=12000, eval_every=12000,
                              alpha=1e-3, beta=1e-3, seed=13)
    res = bilevel.train(models.Grbm(2, 4), posteriors.BernoulliPosterior(2, 4),
                        train_ds, cfg)
    ll_fit = evaluation.test_log_likelihood(test_pts, res.theta)
    print(f"ll_true {ll_true:.4f} ll_fit {ll_fit:.4f} "
          f"gap {abs(ll_fit - ll_true):.4f}")
    assert abs(ll_fit - ll_true) <= 0.05


# ---------------------------------------------------------------------------
# 7. deep model: the variational posterior's Fisher divergence to the
#    model posterior falls by at least 10x over training


def test_07_deep_model_posterior_fisher_drops_tenfold():
    theta_gen = models.Grbm(10, 8).init_params(np.random.default_rng(3),
                                               sigma=0.8, scale=0.6)
    train_ds = data.grbm_synthetic(theta_gen, 5000, np.random.default_rng(912))
    mdsm = objectives.make_objective(
        "mdsm", levels=tuple(objectives.geometric_levels(0.1, 1.0, 5)),
        weights=(0.2,) * 5, sigma0=0.1)
    for d_h in (5, 20):
        model = models.DeepEblvm(10, d_h, hidden=32, t_hidden=16,
                                 head_width=16)
        q = posteriors.GaussianPosterior(10, d_h, hidden=32)
        seen = {}

        def eval_fn(theta, phi, iteration):
            pf = evaluation.posterior_fisher_eval(
                model, q, theta, phi, train_ds.points[:500],
                np.random.default_rng(77), n_draws=8)
            seen[iteration] = pf
            return {"posterior_fisher": pf}

        cfg = bilevel.TrainConfig(objective=mdsm, method="bism", K=5, N=0,
                                  batch_size=100, max_iters=5000,
                                  eval_every=5000, alpha=1e-3, beta=1e-3,
                                  seed=29)
        bilevel.train(model, q, train_ds, cfg, eval_fn=eval_fn)
        print(f"d_h={d_h}: fisher {seen[0]:.4g} -> {seen[5000]:.4g} "
              f"(factor {seen[0] / seen[5000]:.1f})")
        assert seen[5000] <= seen[0] / 10.0


# ---------------------------------------------------------------------------
# 8. samplers against exact-mixture statistics


def test_08_samplers_match_exact_mixture_statistics():
    theta = {"W": np.array([[0.8, -0.6]]), "b": np.array([0.3]),
             "c": np.array([0.2, -0.4]),
             "log_sigma": np.array(math.log(0.9))}

    # blocked Gibbs long-run moments vs the analytic mixture moments
    w, mu, s = np_mixture(theta)
    m1 = float(w @ mu[:, 0])
    m2 = float(w @ (mu[:, 0] ** 2 + s * s))
    rng = np.random.default_rng(81)
    v0 = rng.normal(0.0, 2.0, (4000, 1))
    v, _ = samplers.gibbs_grbm(theta, v0, 80, rng)
    v = v[:, 0]
    se1 = v.std() / math.sqrt(len(v))
    se2 = (v ** 2).std() / math.sqrt(len(v))
    print(f"gibbs: mean {v.mean():.4f} vs {m1:.4f} (3se {3 * se1:.4f}); "
          f"second moment {(v ** 2).mean():.4f} vs {m2:.4f} "
          f"(3se {3 * se2:.4f})")
    assert abs(v.mean() - m1) < 3 * se1
    assert abs((v ** 2).mean() - m2) < 3 * se2

    # Langevin stationary variance on the standard normal; the Euler
    # chain's exact stationary variance is 1/(1 - step/4)
    step = 0.05
    rng = np.random.default_rng(82)
    v0 = rng.standard_normal((40000, 1))
    sched = samplers.LangevinSchedule(step=step, n_steps=300)
    out = samplers.langevin(lambda v: -v, v0, sched, rng)
    var = float((out ** 2).mean())
    print(f"langevin: stationary variance {var:.4f}")
    assert abs(var - 1.0) < 0.05

    # contrastive-divergence ascent with an exact negative-phase sampler
    # vs finite differences of the enumerated log-likelihood
    theta2 = {"W": np.array([[0.5, 0.3]]), "b": np.array([-0.4]),
              "c": np.array([0.1, 0.3]),
              "log_sigma": np.array(math.log(0.8))}
    batch = np_mixture_draws(theta2, 500, np.random.default_rng(83))
    fd = fd_theta(lambda th: np_test_ll(th, batch), theta, eps=1e-6)
    model = models.Grbm(1, 2)

    def oracle_sampler(th, start, k, sampler_rng):
        return np_mixture_draws(th, len(start), sampler_rng)

    reps = []
    for r in range(30):
        ascent, _ = samplers.cd_k_grad(model, theta, batch, 1,
                                       np.random.default_rng((85, r)),
                                       sampler=oracle_sampler)
        reps.append(flat(ascent))
    reps = np.array(reps)
    est = reps.mean(axis=0)
    se = reps.std(axis=0, ddof=1) / math.sqrt(len(reps))
    gap = np.abs(est - flat(fd))
    print("cd oracle: |gap| vs 3se:",
          " ".join(f"{g:.2g}/{3 * t:.2g}" for g, t in zip(gap, se)))
    assert np.all(gap <= 3 * se + 1e-12)


# ---------------------------------------------------------------------------
# 9. repeated runs of every command are byte-identical apart from wall
#    time


def _read_blanked_metrics(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        row[1] = ""
    return rows


def test_09_repeated_runs_are_byte_identical_modulo_wall_time(tmp_path,
                                                              capsys):
    dpath = str(tmp_path / "train.txt")
    cfg_text = (
        "[model]\nkind = grbm\nd_v = 2\nd_h = 2\nscale = 0.05\n\n"
        "[objective]\nkind = dsm\nsigma = 0.3\n\n"
        "[trainer]\nK = 1\nN = 1\nbatch_size = 32\nmax_iters = 6\nseed = 4\n\n"
        f"[eval]\neval_every = 3\n\n[paths]\ndata = {dpath}\n")
    cfg = tmp_path / "exp.ini"

    def run(argv):
        code = cli.main(argv)
        assert code == 0, f"command failed: {argv}"
        return capsys.readouterr().out

    # gen-data
    outs = []
    for tag in ("a", "b"):
        run(["gen-data", "checkerboard", "--n", "400", "--seed", "9",
             "--out", str(tmp_path / f"gen_{tag}.txt")])
        outs.append((tmp_path / f"gen_{tag}.txt").read_bytes())
    assert outs[0] == outs[1]

    run(["gen-data", "checkerboard", "--n", "256", "--seed", "1",
         "--out", dpath])
    cfg.write_text(cfg_text)

    # train: metrics equal with the wall column blanked, checkpoints equal
    for tag in ("a", "b"):
        run(["train", "--config", str(cfg), "--out-dir",
             str(tmp_path / f"run_{tag}")])
    ma = _read_blanked_metrics(tmp_path / "run_a" / "metrics.csv")
    mb = _read_blanked_metrics(tmp_path / "run_b" / "metrics.csv")
    assert ma == mb
    ca = (tmp_path / "run_a" / "checkpoint.ckpt").read_bytes()
    cb = (tmp_path / "run_b" / "checkpoint.ckpt").read_bytes()
    assert ca == cb

    ckpt = str(tmp_path / "run_a" / "checkpoint.ckpt")

    # eval: printed metrics and the density grid file, rerun in place
    texts, grids = [], []
    for _ in range(2):
        texts.append(run(["eval", "--checkpoint", ckpt, "--data", dpath,
                          "--out-dir", str(tmp_path / "ev"),
                          "--grid-res", "32"]))
        grids.append((tmp_path / "ev" / "grid.txt").read_bytes())
    assert texts[0] == texts[1]
    assert grids[0] == grids[1]

    # probe-bias
    curves = []
    for tag in ("a", "b"):
        run(["probe-bias", "--config", str(cfg), "--checkpoint", ckpt,
             "--n-list", "0,1", "--k-star", "50",
             "--out-dir", str(tmp_path / f"pb_{tag}")])
        curves.append((tmp_path / f"pb_{tag}" / "bias.csv").read_bytes())
    assert curves[0] == curves[1]

    # sample
    draws = []
    for tag in ("a", "b"):
        run(["sample", "--checkpoint", ckpt, "--data", dpath,
             "--count", "50", "--steps", "40", "--seed", "3",
             "--out", str(tmp_path / f"smp_{tag}.txt")])
        draws.append((tmp_path / f"smp_{tag}.txt").read_bytes())
    assert draws[0] == draws[1]
