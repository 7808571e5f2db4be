"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its measured value.

Tolerances are fixed here and never relaxed; a criterion that cannot be met
fails and is explained in the decisions ledger.
"""

import os
import time

import numpy as np
import pytest
from scipy.linalg import cho_factor, cho_solve

from gpsdd.bayesopt import ThompsonConfig, run_benchmark
from gpsdd.core import Dataset, NoiseModel, RngStream, SplitSpec, apply_standardization, load_csv, split, standardize
from gpsdd.ct import (DesignState, build_radon, exact_angle_scores, fit_matern_prior, generate_phantom,
                      greedy_design, pseudo_measurement_samples, score_angles)
from gpsdd.exact_gp import effective_dimension_forms, fit_exact
from gpsdd.inducing import inducing_pathwise_moments, titsias_moments_exact
from gpsdd.kernels import KernelSpec, feature_eval, gram, sample_features
from gpsdd.linalg import LinearOperator, build_preconditioner, cg_solve
from gpsdd.sgd import (OptimiserConfig, coordinate_gradient, draw_posterior_samples, dual_gradient,
                       evaluate_sample, kernel_operator, primal_gradient, sdd_solve, solve_representer)
from gpsdd.weightspace import (FeatureModel, effective_dimension_sampled, effective_dimension_weightspace,
                               gradient_identity_check, run_em, sample_objective_targets, single_point_gradients,
                               solve_sample_exact)


def k_norm(v, K):
    return float(np.sqrt(max(v @ K @ v, 0.0)))


# 1 ---------------------------------------------------------------------------

def test_c01_sdd_matches_cholesky(criterion):
    g = RngStream(1).generator()
    n = 500
    X = g.uniform(-3, 3, (n, 2))
    y = np.sin(2 * X[:, 0]) * np.cos(X[:, 1]) + 0.1 * g.standard_normal(n)
    spec = KernelSpec.isotropic("rbf", 0.3, 2)
    noise = NoiseModel.from_std(0.1)
    K = gram(spec, X)
    alpha_star = fit_exact(Dataset(X, y), spec, noise).alpha
    cfg = OptimiserConfig(step_size=50.0 / n, steps=20000, momentum=0.9, batch_size=min(n, 512), rng=RngStream(2))
    t0 = time.perf_counter()
    alpha = sdd_solve(LinearOperator.from_dense(K), y, noise.precision, cfg).weights
    secs = time.perf_counter() - t0
    err = k_norm(alpha - alpha_star, K) / k_norm(alpha_star, K)
    ok = criterion(1, "SDD vs Cholesky", err <= 1e-2 and secs < 60,
                   f"relative K-norm error {err:.2e} (tol 1e-2), {secs:.1f} s (limit 60 s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def _toy(variant, n=10000, seed=0):
    g = RngStream(seed).generator()
    X = np.linspace(-n / 200.0, n / 200.0, n) if variant == "large" else g.standard_normal(n)
    y = np.sin(2 * X) + np.cos(5 * X) + 0.5 * g.standard_normal(n)
    return X[:, None], y


def _exact_grid_mean(X, y, spec, b, grid):
    K = gram(spec, X)
    A = K.copy()
    A[np.diag_indices_from(A)] += 1.0 / b
    c = cho_factor(A, lower=True, overwrite_a=True, check_finite=False)
    alpha_star = cho_solve(c, y, check_finite=False)
    del A, c
    Kg = gram(spec, grid, X)
    return K, Kg, Kg @ alpha_star


@pytest.mark.slow
def test_c02_toy_regression(criterion):
    t0 = time.perf_counter()
    spec = KernelSpec.isotropic("rbf", 0.5, 1)
    b = 4.0
    n, r = 10000, 512
    results = {}
    for variant, beta_n in (("large", 50.0), ("infill", 4.0)):
        X, y = _toy(variant)
        grid = np.linspace(X.min(), X.max(), 200)[:, None]
        K, Kg, f_star = _exact_grid_mean(X, y, spec, b, grid)
        op = LinearOperator.from_dense(K)
        cg = cg_solve(op.shifted(1.0 / b), y, tol=1e-2, max_iter=100)
        # SDD gets the matvec budget of the 100-iteration CG cap: 100 * n / r coordinate steps
        steps = int(100 * n / r)
        sdd = sdd_solve(op, y, b, OptimiserConfig(beta_n / n, steps, batch_size=r, rng=RngStream(5)))
        results[variant] = (np.sqrt(np.mean((Kg @ sdd.weights - f_star) ** 2)),
                            np.sqrt(np.mean((Kg @ cg.x - f_star) ** 2)), cg.iterations)
        del K, op
    secs = time.perf_counter() - t0
    s_l, c_l, _ = results["large"]
    s_i, c_i, it_i = results["infill"]
    ok = criterion(2, "toy regression", s_l <= 0.01 and c_l <= 1e-2 and c_i > s_i and secs < 600,
                   f"large-domain SDD RMSE {s_l:.2e} (tol 1e-2), CG(1e-2) RMSE {c_l:.2e} (tol 1e-2); "
                   f"infill CG-100 RMSE {c_i:.2e} ({it_i} its) vs SDD {s_i:.2e} (need CG > SDD); {secs:.0f} s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c03_pathwise_moments(criterion):
    g = RngStream(0).generator()
    X = g.uniform(-3, 3, 100)
    ds = Dataset(X, np.sin(2 * X) + 0.3 * g.standard_normal(100))
    spec = KernelSpec.isotropic("rbf", 0.5, 1)
    noise = NoiseModel.from_std(0.3)
    post = fit_exact(ds, spec, noise)
    xs = np.linspace(-3, 3, 50)[:, None]
    cfg = OptimiserConfig(2.5 / 100, 5000, batch_size=100)
    S = draw_posterior_samples(ds, spec, noise, 1000, RngStream(1), prior_feature_count=2000, solver="sdd", cfg=cfg)
    V = np.column_stack([evaluate_sample(s, xs) for s in S])
    z = np.abs(V.mean(1) - post.mean(xs)) / (V.std(1, ddof=1) / np.sqrt(V.shape[1]))
    rel = np.abs(V.var(1, ddof=1) / post.variance(xs) - 1.0)
    ok = criterion(3, "pathwise moments", z.max() <= 3.0 and rel.max() <= 0.10,
                   f"max |mean error| {z.max():.2f} MC sigma (tol 3), max variance rel. error {rel.max():.3f} "
                   f"(tol 0.10; grid-mean rel. error {rel.mean():.3f}, Monte Carlo sd per point "
                   f"{np.sqrt(2 / (V.shape[1] - 1)):.3f})")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_effective_dimension(criterion):
    g = RngStream(0).generator()
    X = g.uniform(-3, 3, 50)
    Phi = feature_eval(sample_features(KernelSpec.isotropic("rbf", 1.0, 1), 30, RngStream(1)), X)
    a, b = 1.0, 10.0
    f1, f2, f3 = effective_dimension_forms(Phi, a, b)
    spread = max(f1, f2, f3) - min(f1, f2, f3)
    m = FeatureModel(Phi, b, a)
    parts, _ = sample_objective_targets(m, 10000, RngStream(2))
    Z = solve_sample_exact(m, parts)
    per = b * np.sum((Phi @ Z) ** 2, axis=0)
    est, se = per.mean(), per.std(ddof=1) / np.sqrt(per.size)
    z = abs(est - f1) / se
    parts8, _ = sample_objective_targets(m, 8000, RngStream(3))
    Z8 = solve_sample_exact(m, parts8).reshape(30, 1000, 8)
    kern = np.var([effective_dimension_sampled(Z8[:, i], Phi, b) for i in range(1000)])
    ws = np.var([effective_dimension_weightspace(Z8[:, i], a) for i in range(1000)])
    ok = criterion(4, "effective dimension", spread <= 1e-8 and z <= 3.0 and kern < ws,
                   f"form spread {spread:.1e} (tol 1e-8); k=1e4 estimate {est:.3f} vs {f1:.3f} = {z:.2f} sigma "
                   f"(tol 3); k=8 variance kernelised {kern:.3f} < weight-space {ws:.3f}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c05_mackay_em(criterion):
    from gpsdd.exact_gp import linear_model_evidence
    g = RngStream(0).generator()
    X = np.sort(g.uniform(-5, 5, 200))
    y = np.sin(2 * X) + 0.5 * np.cos(5 * X) + 0.1 * g.standard_normal(200)
    Phi = feature_eval(sample_features(KernelSpec.isotropic("rbf", 0.1, 1), 400, RngStream(1)), X)
    b = 100.0
    grid = np.logspace(-3, 3, 601)
    a_star = grid[int(np.argmax([linear_model_evidence(Phi, y, a, b) for a in grid]))]
    m = FeatureModel(Phi, b, 1.0)
    s16 = run_em(m, y, 16, 10, 1e-2, RngStream(2))
    s1 = run_em(m, y, 1, 10, 1e-2, RngStream(2))
    e16 = abs(s16.precision - a_star) / a_star
    e1 = abs(s1.precision - s16.precision) / s16.precision
    ok = criterion(5, "MacKay EM", s16.converged and s16.step <= 10 and e16 <= 0.10 and e1 <= 0.20,
                   f"k=16 converged in {s16.step} steps at a={s16.precision:.3f}, grid argmax {a_star:.3f} "
                   f"(rel {e16:.3f}, tol 0.10); k=1 a={s1.precision:.3f} (rel {e1:.3f} to k=16, tol 0.20)")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_c06_objective_identities(criterion):
    g = RngStream(0).generator()
    n, d = 50, 20
    m = FeatureModel(g.standard_normal((n, d)), 4.0, 2.0)
    parts, eps = sample_objective_targets(m, 1, RngStream(1))
    ws = max(gradient_identity_check(m, g.standard_normal((d, 1)), eps, parts) for _ in range(20))
    spec = KernelSpec.isotropic("rbf", 0.5, 1)
    X = g.uniform(-2, 2, n)
    K = gram(spec, X)
    f = feature_eval(sample_features(spec, 500, RngStream(2)), X) @ g.standard_normal(500)
    e = g.standard_normal(n) / 2.0
    b = 4.0
    worst = 0.0
    for _ in range(20):
        alpha = g.standard_normal(n)
        g1 = primal_gradient(alpha, K, f + e, b)
        g2 = primal_gradient(alpha, K, f, b, shift=b * e)
        worst = max(worst, np.abs(g1 - g2).max() / max(1.0, np.abs(g1).max()))
    ok = criterion(6, "objective identities", ws <= 1e-10 and worst <= 1e-10,
                   f"weight-space gradient gap {ws:.1e}, kernelised reduced-variance gap {worst:.1e} (tol 1e-10)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c07_sample_then_optimise(criterion):
    g = RngStream(0).generator()
    m = FeatureModel(g.standard_normal((40, 10)), 2.0, 1.5)
    parts, _ = sample_objective_targets(m, 2000, RngStream(1))
    Z = solve_sample_exact(m, parts)
    C = np.cov(Z)
    H_inv = m.posterior_covariance()
    scale = np.sqrt(np.outer(np.diag(H_inv), np.diag(H_inv)))
    worst = np.max(np.abs(C - H_inv) / scale)
    ok = criterion(7, "sample-then-optimise covariance", worst <= 0.15,
                   f"max |C - H^-1|_ij / sqrt(H^-1_ii H^-1_jj) = {worst:.3f} (tol 0.15)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_c08_variance_at_init(criterion):
    g = RngStream(0).generator()
    n, d = 50, 10
    m = FeatureModel(g.standard_normal((n, d)), 3.0, 1.0)
    parts, _ = sample_objective_targets(m, 1, RngStream(1))
    p = type(parts)(parts.prior[:, 0], parts.data[:, 0], parts.precision)
    w = parts.prior[:, 0].copy()
    draws = 100000
    idx = g.integers(0, n, draws)
    eps = g.standard_normal(draws) / np.sqrt(m.noise_precision)
    G = np.empty((draws, d))
    Gp = np.empty((draws, d))
    for i in range(draws):
        G[i], Gp[i] = single_point_gradients(m, w, int(idx[i]), float(eps[i]), p)
    diff = G.var(axis=0, ddof=1).sum() - Gp.var(axis=0, ddof=1).sum()
    target = n * np.trace(m.curvature())
    rel = abs(diff - target) / target
    ok = criterion(8, "variance at init", rel <= 0.10,
                   f"tr var(g) - tr var(g') = {diff:.1f} vs n tr M = {target:.1f} (rel {rel:.3f}, tol 0.10)")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c09_nystrom_titsias(criterion):
    g = RngStream(0).generator()
    X = g.uniform(-3, 3, 50)
    ds = Dataset(X, np.sin(2 * X) + 0.1 * g.standard_normal(50))
    spec = KernelSpec.isotropic("rbf", 0.5, 1)
    noise = NoiseModel(100.0)
    Z = ds.inputs[g.choice(50, 10, replace=False)]
    xs = np.linspace(-3, 3, 25)[:, None]
    m1, c1 = inducing_pathwise_moments(ds, Z, spec, noise, xs, prior="nystrom")
    m2, c2 = titsias_moments_exact(ds, Z, spec, noise, xs, full_cov=True)
    gap = max(np.abs(m1 - m2).max(), np.abs(c1 - c2).max())
    # m = n: well-separated inputs keep K_XX invertible at double precision
    Xf = np.linspace(-9, 9, 50)
    dsf = Dataset(Xf, np.sin(Xf) + 0.1 * g.standard_normal(50))
    xf = np.linspace(-9, 9, 25)[:, None]
    mf, cf = titsias_moments_exact(dsf, dsf.inputs, spec, noise, xf, full_cov=True)
    post = fit_exact(dsf, spec, noise)
    gap_full = max(np.abs(mf - post.mean(xf)).max(), np.abs(cf - post.covariance(xf)).max())
    ok = criterion(9, "Nystrom / Titsias", gap <= 1e-8 and gap_full <= 1e-8,
                   f"pathwise vs variational max gap {gap:.1e}; m=n vs exact GP {gap_full:.1e} (tol 1e-8)")
    assert ok


# 10 --------------------------------------------------------------------------

def _clustered(clusters=30, size=150, seed=0):
    g = RngStream(seed).generator()
    X = (np.arange(clusters)[:, None] * 10.0 + g.uniform(-0.01, 0.01, (clusters, size))).reshape(-1)
    return X[:, None], np.sin(X) + 0.1 * g.standard_normal(X.size)


def test_c10_conditioning(criterion):
    g = RngStream(0).generator()
    worst = 0.0
    for i in range(20):
        n = int(g.integers(5, 200))
        d = int(g.integers(1, 4))
        fam = ["rbf", "matern12", "matern32"][i % 3]
        spec = KernelSpec(fam, g.uniform(0.1, 3, d), float(g.uniform(0.1, 5)))
        b = float(10 ** g.uniform(-2, 4))
        lam = np.linalg.eigvalsh(gram(spec, g.standard_normal((n, d))))
        cond = (lam.max() + 1 / b) / (max(lam.min(), 0.0) + 1 / b)
        worst = max(worst, cond / (1 + spec.variance * n * b))
    X, y = _clustered()
    n = X.shape[0]
    K = gram(KernelSpec.isotropic("rbf", 1.0, 1), X)
    b = 100.0
    alpha_star = np.linalg.solve(K + np.eye(n) / b, y)

    def gd(grad, beta, steps):
        alpha = np.zeros(n)
        errs = []
        for _ in range(steps):
            alpha = alpha - beta * grad(alpha)
            if not np.all(np.isfinite(alpha)) or np.linalg.norm(alpha) > 1e8:
                return errs, True
            errs.append(k_norm(alpha - alpha_star, K))
        return errs, False

    primal_errs, primal_div = gd(lambda a: primal_gradient(a, K, y, b), 1.0 / n, 500)
    dual_errs, dual_div = gd(lambda a: dual_gradient(a, K, y, b), 50.0 / n, 500)
    dual_ok = not dual_div and dual_errs[-1] < dual_errs[0] and np.all(np.diff(dual_errs) <= 1e-12)
    ok = criterion(10, "conditioning", worst <= 1.0 and primal_div and dual_ok,
                   f"max cond / (1 + kappa n b) = {worst:.3f} (must be <= 1); clustered n={n}: primal GD "
                   f"(beta n = 1) {'diverged' if primal_div else 'did not diverge'} after {len(primal_errs)} steps, "
                   f"dual GD (beta n = 50) K-norm error {dual_errs[0]:.2e} -> {dual_errs[-1]:.2e}")
    assert ok


# 11 --------------------------------------------------------------------------

def test_c11_random_coordinate_estimator(criterion):
    g = RngStream(0).generator()
    n = 60
    X = g.uniform(-2, 2, (n, 2))
    K = gram(KernelSpec.isotropic("matern32", 0.7, 2), X)
    z = g.standard_normal(n)
    b = 10.0
    alpha = g.standard_normal(n)
    mean_est = np.mean([coordinate_gradient(alpha, K, z, b, [i]) for i in range(n)], axis=0)
    gap = np.abs(mean_est - dual_gradient(alpha, K, z, b)).max()
    alpha_star = np.linalg.solve(K + np.eye(n) / b, z)
    resid = np.abs((K + np.eye(n) / b) @ alpha_star - z).max()
    at_opt = max(np.abs(coordinate_gradient(alpha_star, K, z, b, [i])).max() for i in range(n))
    tol = n * max(resid, 1e-12) * 10
    ok = criterion(11, "random-coordinate estimator", gap <= 1e-12 and at_opt <= tol,
                   f"mean of n estimates vs full gradient {gap:.1e} (tol 1e-12); max estimate at optimum "
                   f"{at_opt:.1e} (solve residual {resid:.1e}, tol {tol:.1e})")
    assert ok


# 12 --------------------------------------------------------------------------

def test_c12_preconditioning(criterion):
    g = RngStream(0).generator()
    c = 400
    U, _ = np.linalg.qr(g.standard_normal((c, 50)))
    K = (U * np.geomspace(1e3, 1.0, 50)) @ U.T
    b = 10.0
    op = LinearOperator.from_dense(K)
    rhs = g.standard_normal(c)
    plain = cg_solve(op.shifted(1 / b), rhs, tol=1e-6, max_iter=2000)
    P = build_preconditioner(op, b, 100, RngStream(1))
    pre = cg_solve(op.shifted(1 / b), rhs, tol=1e-6, max_iter=2000, precond=P)
    ok = criterion(12, "preconditioning", pre.converged and plain.converged
                   and pre.iterations <= 0.5 * plain.iterations,
                   f"PCG {pre.iterations} iterations vs plain CG {plain.iterations} (need <= 0.5x)")
    assert ok


# 13 --------------------------------------------------------------------------

def _ct_setup(size, n_angles, pilot, seed, lengthscale_grid=None):
    op = build_radon(size, size, None, np.arange(n_angles) * 180.0 / n_angles)
    root = RngStream(seed)
    img = generate_phantom(root.child(0), size)
    sd = 0.05 * float(np.mean(np.abs(op.apply(img))))
    y = op.block(pilot) @ img.ravel() + sd * root.child(1).generator().standard_normal(len(pilot) * op.detector_pixels)
    grid = np.geomspace(0.5, 4 * size, 14) if lengthscale_grid is None else lengthscale_grid
    prior, _ = fit_matern_prior(op, pilot, y, 1.0 / sd ** 2, grid, np.geomspace(0.01, 10, 13))
    return op, img, sd, prior


@pytest.mark.slow
def test_c13_ct_design(criterion):
    t0 = time.perf_counter()
    # sampled EIG vs dense EIG
    op, img, sd, prior = _ct_setup(16, 20, [0, 5, 10, 15], 0)
    b = 1.0 / sd ** 2
    state = DesignState(op, prior, b)
    gen = RngStream(0).child(2).generator()
    for a in [0, 5, 10, 15]:
        state.add_angle(a, op.block([a]) @ img.ravel() + sd * gen.standard_normal(op.detector_pixels))
    rem = state.remaining
    S = pseudo_measurement_samples(state, rem, 3000, RngStream(0).child(3))
    eig = score_angles(S, op.detector_pixels, "eig", b)
    exact, _ = exact_angle_scores(state, rem)
    eig_rel = float(np.max(np.abs(eig - exact) / np.abs(exact)))
    base = op.detector_pixels * np.log(1 / b)
    info_rel = float(np.max(np.abs(eig - exact) / np.abs(exact - base)))

    # joint (K, b^-1) scaling leaves the greedy sequence unchanged
    seqs = []
    for scale in (1.0, 10.0):
        res = greedy_design(op, [0, 10], prior.scaled(scale), "eig", 8, 500, RngStream(7), img, sd,
                            noise_precision=b / scale, psnr_every=100)
        seqs.append(res.state.chosen)
    invariant = seqs[0] == seqs[1]

    # Matern-ESE greedy design vs random angles, paired per phantom
    wins, pairs = 0, []
    pilot = [0, 40, 80, 120, 160]
    for i in range(10):
        op32, img32, sd32, prior32 = _ct_setup(32, 200, pilot, 100 + i)
        ese = greedy_design(op32, pilot, prior32, "ese", 15, 500, RngStream(100 + i).child(2), img32, sd32)
        rnd = greedy_design(op32, pilot, prior32, "ese", 15, 500, RngStream(100 + i).child(2), img32, sd32,
                            selection="random")
        p_ese, p_rnd = ese.psnr_trace[-1][1], rnd.psnr_trace[-1][1]
        pairs.append((round(p_ese, 2), round(p_rnd, 2)))
        wins += p_ese > p_rnd
    secs = time.perf_counter() - t0
    ok = criterion(13, "CT design", eig_rel <= 0.02 and invariant and wins >= 7 and secs < 900,
                   f"sampled EIG max rel. error {eig_rel:.4f} (information part {info_rel:.4f}, tol 0.02); "
                   f"scaling-invariant sequence {invariant}; ESE beats random on {wins}/10 phantoms (need 7); "
                   f"{secs:.0f} s (limit 900 s); PSNR pairs {pairs}")
    assert ok


# 14 --------------------------------------------------------------------------

@pytest.mark.slow
def test_c14_thompson(criterion):
    spec = KernelSpec.isotropic("matern32", 0.3, 2)
    cfg = ThompsonConfig(batch_size=100, candidates=1000, top_k=5, ascent_steps=50, steps=10,
                         prior_feature_count=1000, shared_pool=True, shared_features=True)
    sdd_cfg = OptimiserConfig(1.0 / 1000, 300, batch_size=512)
    diffs, monotone = [], True
    exact_best, sdd_best = [], []
    for seed in range(10):
        te = run_benchmark(spec, 1000, cfg, "exact", seed)
        ts = run_benchmark(spec, 1000, cfg, "sdd", seed, sdd_cfg)
        exact_best.append(te.best_true[-1])
        sdd_best.append(ts.best_true[-1])
        diffs.append(ts.best_true[-1] - te.best_true[-1])
        monotone &= bool(np.all(np.diff(te.best_true) >= 0) and np.all(np.diff(ts.best_true) >= 0))
    gap = abs(np.mean(sdd_best) - np.mean(exact_best))
    ok = criterion(14, "Thompson sampling", gap <= 0.05 and monotone,
                   f"mean best value SDD {np.mean(sdd_best):.4f} vs exact {np.mean(exact_best):.4f} "
                   f"(gap {gap:.4f}, tol 0.05); per-seed max |gap| {np.max(np.abs(diffs)):.4f}; "
                   f"traces monotone {monotone}")
    assert ok


# 15 --------------------------------------------------------------------------

@pytest.mark.extended
@pytest.mark.skipif(not os.environ.get("GPSDD_POL_CSV"), reason="set GPSDD_POL_CSV to the pol data file")
def test_c15_pol_extended(criterion):
    from gpsdd.cli import centroid_hyperparams, metric_rmse
    full = load_csv(os.environ["GPSDD_POL_CSV"], os.environ.get("GPSDD_POL_TARGET", "y"))
    tr, te = split(full, SplitSpec(0.9, 0), RngStream(0))
    train = standardize(tr)
    test = apply_standardization(te, train.standardization)
    spec, noise = centroid_hyperparams(train, "matern32", 10000, 10, RngStream(1))
    op = kernel_operator(train.inputs, spec)
    cfg = OptimiserConfig(50.0 / train.n, 100000, batch_size=512, rng=RngStream(2))
    alpha = solve_representer(op, train.targets, noise, "sdd", cfg)
    rmse = metric_rmse(gram(spec, test.inputs, train.inputs) @ alpha, test.targets)
    ok = criterion(15, "pol (extended)", rmse <= 0.10, f"test RMSE {rmse:.4f} (tol 0.10)")
    assert ok
