"""Acceptance criteria 1-12, each reported as one PASS/FAIL line."""

import json
import math
import time

import mpmath as mp
import numpy as np
import pytest

from conftest import record, sparse_iv_data
from sparseiv import cli
from sparseiv.data import Dataset
from sparseiv.diagnostics import restricted_eigenvalue, sparse_eigenvalues
from sparseiv.first_stage import fit_first_stage
from sparseiv.iv import fit_iv
from sparseiv.lasso import PenaltyPlan, initial_loadings, penalty_level, post_lasso, solve_weighted_lasso
from sparseiv.montecarlo import DgpSpec, run_replications, simulate
from sparseiv.weak_id import SupScoreProblem, critical_value, inverse_lasso_region, invert_region, regions_agree, sup_score

SEED = 42
R = 500


def mp_upper(q):
    mp.mp.dps = 50
    return mp.sqrt(2) * mp.erfinv(1 - 2 * mp.mpf(q))


def kkt_violation(f, d, fit):
    # independent subgradient check on centred data
    n = len(d)
    X, y = f - f.mean(0), d - d.mean()
    score = 2 * X.T @ (y - X @ fit.beta) / n
    thresh = fit.lam * fit.loadings / n
    act = fit.beta != 0
    v_act = np.abs(score[act] - np.sign(fit.beta[act]) * thresh[act])
    v_in = np.maximum(np.abs(score[~act]) - thresh[~act], 0)
    return max(v_act.max(initial=0.0), v_in.max(initial=0.0))


def test_criterion_01_kkt():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, p = int(rng.integers(20, 201)), int(rng.integers(10, 501))
        f = rng.normal(size=(n, p)) * rng.uniform(0.2, 5, size=p)
        d = f[:, :3] @ rng.normal(size=3) + rng.normal(size=n)
        load = initial_loadings(f - f.mean(0), d)
        plan = PenaltyPlan(rng.uniform(0.3, 2) * penalty_level(n, p), load)
        fit = solve_weighted_lasso(f, d, plan)
        bound = 1e-7 * fit.lam / n * load.max()
        worst = max(worst, kkt_violation(f, d, fit) / bound, fit.kkt_gap / bound)
    secs = time.perf_counter() - t0
    ok = worst <= 1.0 and secs < 60
    record(1, ok, f"worst gap / bound = {worst:.3g}, {secs:.1f}s")
    assert ok


def test_criterion_02_oracles():
    rng = np.random.default_rng(7)
    err_a = 0.0
    for _ in range(50):
        n = int(rng.integers(30, 120))
        p = int(rng.integers(2, n // 2))
        f = rng.normal(size=(n, p))
        d = f @ rng.normal(size=p) + rng.normal(size=n)
        fit = solve_weighted_lasso(f, d, PenaltyPlan(0.0, np.ones(p)))
        ols = np.linalg.lstsq(np.column_stack([np.ones(n), f]), d, rcond=None)[0]
        err_a = max(err_a, np.max(np.abs(fit.beta - ols[1:])))
    # orthonormal design: beta_j = sign(z_j) max(|z_j| - lam/(2n), 0) with z = E_n[f d]
    n, p = 100, 10
    q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    f = q * math.sqrt(n)
    d = f @ rng.normal(size=p) + 0.3 * rng.normal(size=n)
    z = f.T @ d / n
    err_b = 0.0
    for lam in np.linspace(0, 2 * n * np.abs(z).max() * 1.1, 20):
        fit = solve_weighted_lasso(f, d, PenaltyPlan(lam, np.ones(p)), intercept=False)
        soft = np.sign(z) * np.maximum(np.abs(z) - lam / (2 * n), 0)
        err_b = max(err_b, np.max(np.abs(fit.beta - soft)))
    err_c = 0.0
    for _ in range(20):
        f = rng.normal(size=(80, 30))
        d = f[:, :4].sum(1) + rng.normal(size=80)
        cols = np.sort(rng.choice(30, size=int(rng.integers(1, 10)), replace=False))
        X = np.column_stack([np.ones(80), f[:, cols]])
        qq, rr = np.linalg.qr(X)
        ref = X @ np.linalg.solve(rr, qq.T @ d)
        err_c = max(err_c, np.max(np.abs(post_lasso(f, d, cols).predict(f) - ref)))
    ok = err_a <= 1e-8 and err_b <= 1e-8 and err_c <= 1e-9
    record(2, ok, f"(a) {err_a:.2e} (b) {err_b:.2e} (c) {err_c:.2e}")
    assert ok


def test_criterion_03_numerics():
    gamma = 0.1 / math.log(100)
    lam_oracle = float(2 * mp.mpf("1.1") * mp.sqrt(100) * mp_upper(mp.mpf(gamma) / (2 * 100)))
    crit_oracle = float(mp.mpf("1.1") * mp.sqrt(100) * mp_upper(mp.mpf("0.05") / (2 * 100)))
    lam = penalty_level(100, 100, 1, 1.1, gamma)
    crit = critical_value(100, 100, 0.05, 1.1)
    matches = abs(lam - lam_oracle) <= 1e-9 * lam_oracle and abs(crit - crit_oracle) <= 1e-9 * crit_oracle
    in_bands = abs(lam - 81.4) <= 0.1 and abs(crit - 37.8) <= 0.1
    ok = matches and in_bands
    record(3, ok, f"penalty {lam:.4f} (oracle {lam_oracle:.4f}), critical {crit:.4f} (oracle {crit_oracle:.4f}) vs bands 81.4/37.8 +/- 0.1")
    assert matches
    assert abs(lam - 81.4) <= 0.1
    assert abs(crit - 37.8) <= 0.1


def test_criterion_04_scale_equivariance():
    rng = np.random.default_rng(4)
    worst = 0.0
    same_support = True
    for i in range(50):
        data = sparse_iv_data(n=120, p=25, s=3, seed=1000 + i, strength=0.7)
        scales = 10.0 ** rng.uniform(-3, 3, size=data.p)
        scaled = data.with_instruments(data.f * scales)
        a, b = fit_iv(data), fit_iv(scaled)
        same_support &= all(np.array_equal(x, y) for x, y in zip(a.first_stage.support, b.first_stage.support))
        worst = max(worst, np.max(np.abs(a.first_stage.fitted - b.first_stage.fitted)) / (1 + np.abs(a.first_stage.fitted).max()))
        worst = max(worst, np.max(np.abs(a.alpha - b.alpha)) / (1 + np.abs(a.alpha).max()))
        la = sup_score(SupScoreProblem.from_dataset(data), 1.0)
        lb = sup_score(SupScoreProblem.from_dataset(scaled), 1.0)
        worst = max(worst, abs(la - lb) / (1 + la))
    ok = same_support and worst <= 1e-8
    record(4, ok, f"supports equal: {same_support}, max relative change {worst:.2e}")
    assert ok


def test_criterion_05_region_equivalence():
    agree, carved = 0, 0
    for seed in range(20):
        data = sparse_iv_data(n=50, p=20, s=3, seed=500 + seed, strength=0.4)
        prob = SupScoreProblem.from_dataset(data, grid=np.linspace(-1, 3, 101))
        a, b = invert_region(prob), inverse_lasso_region(prob)
        agree += regions_agree(a, b)
        carved += int(np.sum(a.near_boundary | b.near_boundary))
    ok = agree == 20
    record(5, ok, f"{agree}/20 instances agree, {carved} carved-out boundary points")
    assert ok


@pytest.fixture(scope="module")
def strong_250():
    return run_replications(
        DgpSpec(250, mu2=180, s=5, corr_ev=0.6), ["post-lasso", "sup-score", "spec-test", "split-sample"], R=R, base_seed=SEED
    )


@pytest.fixture(scope="module")
def strong_100():
    return run_replications(DgpSpec(100, mu2=180, s=5, corr_ev=0.6), ["post-lasso", "sup-score"], R=R, base_seed=SEED)


@pytest.mark.slow
def test_criterion_06_size(strong_250, strong_100):
    a = strong_250.row("post-lasso").rp05
    b = strong_100.row("post-lasso").rp05
    c1, c2 = strong_250.row("sup-score").rp05, strong_100.row("sup-score").rp05
    ok = 0.02 <= a <= 0.10 and 0.02 <= b <= 0.12 and c1 <= 0.07 and c2 <= 0.07
    record(6, ok, f"(a) n=250 rp {a:.3f} (b) n=100 rp {b:.3f} (c) sup-score {c1:.3f}/{c2:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_07_weak_design():
    tab = run_replications(DgpSpec(100, mu2=30, s=50), ["post-lasso", "sup-score"], R=R, base_seed=SEED)
    n0 = tab.row("post-lasso").n0
    cover = 1 - tab.row("sup-score").rp05
    ok = n0 > 0 and cover >= 0.93
    record(7, ok, f"N(0) = {n0}, sup-score coverage {cover:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_spec_test(strong_250):
    size = strong_250.row("spec-test").rp05
    bad = run_replications(DgpSpec(250, mu2=180, s=5), ["spec-test"], R=R, base_seed=SEED, invalid_shift=0.5)
    power = bad.row("spec-test").rp05
    ok = 0.02 <= size <= 0.10 and power >= 0.5
    record(8, ok, f"size {size:.3f}, power {power:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_09_split_sample(strong_250):
    row = strong_250.row("split-sample")
    ok = 0.02 <= row.rp05 <= 0.12 and abs(row.med_bias) <= row.mad
    record(9, ok, f"rp {row.rp05:.3f}, |med bias| {abs(row.med_bias):.4f}, MAD {row.mad:.4f}")
    assert ok


def test_criterion_10_diagnostics():
    kappa = restricted_eigenvalue(np.eye(6), 2, 3.0).kappa
    se = sparse_eigenvalues(np.eye(6), 3)
    M = np.array([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])
    # dense grid oracle over the cone for s = 1, C = 1
    g = np.linspace(-1, 1, 801)
    u, v = np.meshgrid(g, g, indexing="ij")
    m = np.abs(u) + np.abs(v) <= 1 + 1e-15
    best = np.inf
    for j in range(3):
        X = np.zeros((3, m.sum()))
        o = [k for k in range(3) if k != j]
        X[j], X[o[0]], X[o[1]] = 1.0, u[m], v[m]
        best = min(best, float(np.min(np.einsum("ik,ij,jk->k", X, M, X))))
    exact = restricted_eigenvalue(M, 1, 1.0).kappa2
    ok = kappa == 1.0 or abs(kappa - 1.0) <= 1e-12
    ok = ok and (se.phi_min, se.phi_max) == pytest.approx((1.0, 1.0), abs=1e-12) and abs(exact - best) <= 1e-3
    record(10, ok, f"kappa(I) = {kappa!r}, phi = ({se.phi_min}, {se.phi_max}), RE exact {exact:.5f} vs grid {best:.5f}")
    assert ok


@pytest.mark.slow
def test_criterion_11_determinism(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n": 100, "mu2": 180, "s": 5, "estimators": ["2sls", "post-lasso", "sup-score", "split-sample"]}))
    outs = {}
    for t in (1, 2, 8):
        out = tmp_path / f"t{t}.csv"
        with pytest.warns(UserWarning):
            code = cli.main(["simulate", "--config", str(cfg), "--reps", "60", "--seed", str(SEED), "--threads", str(t),
                             "--out", str(out), "--power", "--beta-grid", "0.5:1.5:0.25"])
        assert code == 0
        outs[t] = [out.read_bytes(), out.with_suffix(".json").read_bytes(), (tmp_path / f"t{t}_power.csv").read_bytes()]
    ok = outs[1] == outs[2] == outs[8]
    record(11, ok, "table, json and power files byte-identical across 1/2/8 threads" if ok else "outputs differ")
    assert ok


@pytest.mark.slow
def test_criterion_12_power_shape():
    spec = DgpSpec(250, mu2=180, s=5)
    grid = cli._power_grid(spec)
    _, curve = simulate(spec, ["post-lasso"], R=R, base_seed=SEED, power_estimators=("post-lasso-f", "sup-score"), beta_grid=grid)
    f, s = curve.power["post-lasso-f"], curve.power["sup-score"]
    left, right = f[0] > s[0], f[-1] > s[-1]
    ok = left and right
    record(12, ok, f"beta {grid[0]:.4f}: F {f[0]:.3f} vs sup-score {s[0]:.3f}; beta {grid[-1]:.4f}: F {f[-1]:.3f} vs sup-score {s[-1]:.3f}")
    assert ok
