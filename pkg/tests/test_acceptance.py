"""Acceptance suite: one test per criterion; a PASS/FAIL line per criterion is printed in the summary.

The end-to-end criteria share one desk-scale instance (synthetic 16x16
identities, models pretrained once per session).
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import spearmanr

from featcraft import harness
from featcraft.attacks import invert_whitebox
from featcraft.crafter import NeumannDivergence, approx_inverse_hvp, indirect_gradient
from featcraft.nets import LayerStack, interpolate_grad_norms, wgan_pretrain
from featcraft.pii import emd_dual, emd_exact, make_critic

from conftest import CRITERIA
from oracles import cosine, fd_hypergradient, latent_grad_hess, newton_solve, rel_err, small_bilevel_instance

pytestmark = pytest.mark.slow

BETAS = [0.5, 1.0, 2.0, 10.0]
SWEEP_SEEDS = [0, 1, 2]


def record(k, ok, detail):
    CRITERIA[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


# -- shared desk instance ------------------------------------------------------


@pytest.fixture(scope="session")
def desk():
    t = time.perf_counter()
    cfg = harness.ExperimentConfig(attacks=["white", "a2"], betas=BETAS, craft_seeds=SWEEP_SEEDS)
    prep = harness.prepare(cfg)
    return cfg, prep, time.perf_counter() - t


@pytest.fixture(scope="session")
def sweep(desk):
    cfg, prep, t_prep = desk
    t = time.perf_counter()
    records = harness.run_deployment_pipeline(cfg, prep)
    control = records[0]
    by_beta = {b: [r for r in records[1:] if r.beta == b] for b in BETAS}

    def mean(b, attack, field):
        return float(np.mean([getattr(r.metrics[attack], field) for r in by_beta[b]]))

    summary = {
        b: {f: mean(b, "white", f) for f in ("eval_acc", "utility", "epsilon")} | {"a2_acc": mean(b, "a2", "eval_acc")}
        for b in BETAS
    }
    return control, summary, t_prep + time.perf_counter() - t


# -- 1 ---------------------------------------------------------------------------


def test_c01_hypergradient_matches_finite_differences():
    """Instances whose latent Hessian at the solution is nearly singular (condition
    number above 2000) are redrawn: the implicit gradient is ill-posed there and a
    Neumann series would need millions of terms."""
    t = time.perf_counter()
    cosines, errs = [], []
    rng = np.random.default_rng(2024)
    k, redrawn = 0, 0
    while len(errs) < 20:
        feat = int(rng.integers(4, 33))
        lat = int(rng.integers(2, min(8, feat) + 1))
        enc, gen, f, z0 = small_bilevel_instance(1000 + k, feat_dim=feat, latent_dim=lat, hidden=12, pixels=16)
        k += 1
        z_star = newton_solve(enc, gen, f, z0)
        _, h = latent_grad_hess(enc, gen, f, z_star)
        lam = np.linalg.eigvalsh(h)
        if lam.min() <= 0 or lam.max() / lam.min() > 2000:
            redrawn += 1
            continue
        c = rng.standard_normal(lat)
        alpha = 0.5 / lam.max()
        iters = int(np.ceil(35 / (alpha * lam.min())))
        hyper = indirect_gradient(enc, gen, f, z_star, c[None, :], alpha=alpha, iters=iters, blockwise=True)
        fd = fd_hypergradient(enc, gen, f, z_star, c)
        cosines.append(cosine(hyper, fd))
        errs.append(rel_err(hyper, fd))
    el = time.perf_counter() - t
    ok = min(cosines) >= 0.99 and max(errs) <= 5e-2 and el <= 60
    record(
        1, ok,
        f"20 instances ({redrawn} ill-conditioned redrawn): min cosine {min(cosines):.6f} (>=0.99), "
        f"max rel err {max(errs):.2e} (<=5e-2), {el:.1f}s (<=60s)",
    )


# -- 2 ---------------------------------------------------------------------------


def test_c02_neumann_matches_direct_inverse():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, monotone = 0.0, True
    for _ in range(50):
        n = int(rng.integers(2, 17))
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        # spectrum within [0.1, 1] and alpha*lam_max in [0.4, 0.5]: 400 terms then
        # shrink every mode below 1e-3 of its size
        lam = rng.uniform(0.1, 1.0, n)
        lam[0] = 1.0
        h = (q * lam) @ q.T
        alpha = rng.uniform(0.4, 0.5) / lam.max()
        v = rng.standard_normal(n)
        exact = np.linalg.solve(h, v)
        worst = max(worst, rel_err(approx_inverse_hvp(v, lambda u: h @ u, alpha, 400), exact))
        errs = [rel_err(approx_inverse_hvp(v, lambda u: h @ u, alpha, k), exact) for k in range(0, 401, 25)]
        monotone &= all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))
    el = time.perf_counter() - t
    ok = worst <= 1e-3 and monotone and el <= 5
    record(2, ok, f"max rel err {worst:.2e} (<=1e-3), monotone decay {monotone}, {el:.2f}s (<=5s)")


def test_neumann_divergence_is_detected():
    with pytest.raises(NeumannDivergence):
        approx_inverse_hvp(np.ones(3), lambda u: 25.0 * u, alpha=0.1, iters=100)


# -- 3 ---------------------------------------------------------------------------


def test_c03_emd_duality_and_brute_force():
    import itertools

    t = time.perf_counter()
    rng = np.random.default_rng(3)
    pairs = [
        (rng.standard_normal((256, 1)), rng.standard_normal((256, 1)) + 2.0),
        (rng.standard_normal((256, 1)), 2.0 * rng.standard_normal((256, 1)) + 1.0),
        (rng.uniform(size=(256, 1)), rng.exponential(size=(256, 1))),
        (rng.standard_normal((256, 2)), rng.standard_normal((256, 2)) + [1.5, -1.0]),
        (rng.standard_normal((256, 2)), rng.standard_normal((256, 2)) * [0.5, 2.0] + [0.0, 1.0]),
    ]
    ratios = []
    for i, (p, q) in enumerate(pairs):
        exact = emd_exact(p, q)
        dual = emd_dual(make_critic(p.shape[1], rng=i), p, q, train_steps=600, lr=3e-3)
        ratios.append(abs(dual - exact) / exact)
    brute_ok = True
    for n in range(1, 9):
        p, q = rng.standard_normal((n, 2)), rng.standard_normal((n, 2))
        cost = np.linalg.norm(p[:, None] - q[None], axis=-1)
        brute = min(cost[np.arange(n), list(s)].mean() for s in itertools.permutations(range(n)))
        brute_ok &= emd_exact(p, q, method="hungarian") == pytest.approx(brute, abs=1e-12)
        brute_ok &= emd_exact(p, q) == pytest.approx(brute, abs=1e-12)
    el = time.perf_counter() - t
    ok = max(ratios) <= 0.25 and brute_ok and el <= 120
    record(3, ok, f"max |dual-exact|/exact {max(ratios):.3f} (<=0.25), brute-force match {brute_ok}, {el:.1f}s (<=120s)")


# -- 4 ---------------------------------------------------------------------------


def test_c04_wgan_gp_sanity():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    mu, cov = np.array([2.0, -1.0]), np.array([[1.0, 0.5], [0.5, 2.0]])
    x = rng.multivariate_normal(mu, cov, 2000)
    # an affine generator can represent the Gaussian target exactly
    gen = LayerStack([2, 2], ["linear"], rng=1)
    disc = LayerStack([2, 64, 64, 1], ["leaky_relu", "leaky_relu", "linear"], rng=2)
    wgan_pretrain(gen, disc, x, steps=2000, batch_size=256, lr=2e-3, seed=0)
    s = gen.predict(rng.standard_normal((4000, 2)))
    m_err = np.linalg.norm(s.mean(0) - x.mean(0)) / np.linalg.norm(x.mean(0))
    c_err = np.linalg.norm(np.cov(s.T) - np.cov(x.T)) / np.linalg.norm(np.cov(x.T))
    idx = rng.choice(len(x), 500)
    gn = interpolate_grad_norms(disc, x[idx], gen.predict(rng.standard_normal((500, 2))), rng.uniform(size=500)).mean()
    el = time.perf_counter() - t
    ok = 0.8 <= gn <= 1.2 and m_err <= 0.15 and c_err <= 0.15 and el <= 120
    record(4, ok, f"mean grad norm {gn:.3f} ([0.8,1.2]), mean err {m_err:.3f}, cov err {c_err:.3f} (<=0.15), {el:.1f}s (<=120s)")


# -- 5, 6, 9 ---------------------------------------------------------------------


def test_c05_beta_tradeoff_direction(sweep):
    control, s, el = sweep
    auc = [s[b]["utility"] for b in BETAS]
    eps = [s[b]["epsilon"] for b in BETAS]
    acc = [s[b]["eval_acc"] for b in BETAS]
    rho_auc = spearmanr(BETAS, auc).statistic
    rho_eps = spearmanr(BETAS, eps).statistic
    rho_ea = spearmanr(eps, acc).statistic
    # 4-point Spearman values are multiples of 0.2 and can land a rounding error below them
    ok = rho_auc >= 0.8 - 1e-9 and rho_eps >= 0.8 - 1e-9 and rho_ea > 0 and el <= 15 * 60
    detail = (
        f"rho(beta,auc) {rho_auc:.2f} (>=0.8), rho(beta,eps) {rho_eps:.2f} (>=0.8), rho(eps,acc) {rho_ea:.2f} (>0), "
        f"auc {np.round(auc, 4).tolist()}, eps {np.round(eps, 5).tolist()}, acc {np.round(acc, 3).tolist()}, {el / 60:.1f} min (<=15)"
    )
    record(5, ok, detail)


def test_c06_defense_effect(sweep):
    control, s, el = sweep
    base_acc, base_auc = control.metrics["white"].eval_acc, control.metrics["white"].utility
    acc, auc = s[1.0]["eval_acc"], s[1.0]["utility"]
    ok = acc <= 0.5 * base_acc and base_auc - auc <= 0.1 and el <= 10 * 60
    record(
        6, ok,
        f"beta=1 eval_acc {acc:.3f} vs unprotected {base_acc:.3f} (<= half: {0.5 * base_acc:.3f}); "
        f"AUC drop {base_auc - auc:.4f} (<=0.1); {el / 60:.1f} min (<=10)",
    )


def test_c09_alternate_generator_transfer(sweep):
    _, s, _ = sweep
    gap = abs(s[1.0]["a2_acc"] - s[1.0]["eval_acc"])
    record(9, gap <= 0.05, f"beta=1 eval_acc alternate G {s[1.0]['a2_acc']:.3f} vs simulated G {s[1.0]['eval_acc']:.3f}, gap {gap:.3f} (<=0.05)")


# -- 7, 8 --------------------------------------------------------------------------


def test_c07_adaptive_a1(desk):
    cfg, prep, _ = desk
    t = time.perf_counter()
    res = harness.adaptive_robustness_experiment(replace(cfg, adaptive_epochs=30), prep, include_a3=False)
    el = time.perf_counter() - t
    cw, cb, adv = res.curves["crafter-white"], res.curves["crafter-black"], res.curves["adv-black"]
    w_ok = max(r["eval_acc"] for r in cw) <= cw[0]["eval_acc"] + 0.05
    b_ok = max(r["eval_acc"] for r in cb) <= cb[0]["eval_acc"] + 0.05
    a_gain = adv[-1]["eval_acc"] - adv[0]["eval_acc"]
    ok = w_ok and b_ok and a_gain >= 0.1 and el <= 20 * 60
    record(
        7, ok,
        f"crafter white epoch0 {cw[0]['eval_acc']:.3f} max {max(r['eval_acc'] for r in cw):.3f}; "
        f"crafter black epoch0 {cb[0]['eval_acc']:.3f} max {max(r['eval_acc'] for r in cb):.3f} (<= epoch0+0.05); "
        f"adv-learning gain {a_gain:+.3f} (>=0.1); {el / 60:.1f} min (<=20)",
    )


def test_c08_a3_averaging(desk):
    cfg, prep, _ = desk
    t = time.perf_counter()
    a3 = harness.a3_comparison(cfg, prep)
    el = time.perf_counter() - t
    gain = a3["averaged"] - a3["single"]
    ok = gain >= 0.05 and a3["shuffled"] <= a3["single"] + 0.02 and el <= 15 * 60
    record(
        8, ok,
        f"single {a3['single']:.3f}, averaged k=5 {a3['averaged']:.3f} (gain {gain:+.3f}, >=0.05), "
        f"shuffled {a3['shuffled']:.3f} (<= single+0.02); {el / 60:.1f} min (<=15)",
    )


# -- 10 ----------------------------------------------------------------------------


def test_c10_crafter_beats_crafter_z(desk):
    cfg, prep, _ = desk
    t = time.perf_counter()
    wins, rows = 0, []
    ccfg = replace(cfg.craft, beta=1.0)
    for seed in range(10):
        r = harness.crafter_z_comparison(prep, replace(ccfg, seed=seed), prep.x_test, seed=seed)
        wins += r["eps_craft"] < r["eps_craft_z"]
        rows.append(f"{r['eps_craft']:.5f}/{r['eps_craft_z']:.5f}@Lu {r['lu_craft']:.2f}/{r['lu_craft_z']:.2f}")
    el = time.perf_counter() - t
    ok = wins >= 7 and el <= 20 * 60
    record(10, ok, f"craft lower eps on {wins}/10 seeds (>=7); eps craft/craft_z {rows}; {el / 60:.1f} min (<=20)")


# -- 11 ----------------------------------------------------------------------------


def test_c11_amortizer_warm_start(desk):
    cfg, prep, _ = desk
    t = time.perf_counter()
    b = prep.bundle
    f = b.enc.predict(prep.x_test)  # held out: the amortizer only saw generated images
    cold = invert_whitebox(b.enc, b.gen, f, iters=600, lr=cfg.attack.latent_lr, seed=0)
    warm = invert_whitebox(b.enc, b.gen, f, z0=b.amor.predict(f), iters=300, lr=cfg.attack.latent_lr, seed=0)
    hist = np.asarray(warm.history)
    hit = np.flatnonzero(hist <= cold.history[-1])
    reached = int(hit[0]) if hit.size else None
    el = time.perf_counter() - t
    ok = reached is not None and reached <= 300 and el <= 5 * 60
    record(11, ok, f"warm start reaches cold-600 loss {cold.history[-1]:.4f} after {reached} iterations (<=300); {el:.1f}s")
