import math

import numpy as np
import pytest
from scipy import optimize

from sparseiv.data import Dataset
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.montecarlo import (
    DgpSpec,
    SimConfig,
    augment_principal_components,
    estimator_2sls,
    estimator_kclass,
    gen_dgp,
    loocv_ridge,
    run_replications,
    simulate,
    size_adjusted,
)
from sparseiv.montecarlo import estimators as est_mod
from sparseiv.montecarlo.baselines import liml_kappa, ridge_grid
from sparseiv.montecarlo.estimators import combine_weighted
from sparseiv.montecarlo.runner import metrics_from_outcomes, replication_seeds


def toeplitz_form(pt):
    p = len(pt)
    return sum(pt[j] * pt[h] * 0.5 ** abs(j - h) for j in range(p) for h in range(p))


# ---------------------------------------------------------------- designs


def test_cutoff_quadratic_form_and_constant():
    spec = DgpSpec(250, mu2=180, s=5)
    q = toeplitz_form(spec.pi_tilde())
    assert q == pytest.approx(11.125)
    # oracle: scalar root of 180 = 250 C^2 q / (1 - C^2 q)
    C = optimize.brentq(lambda c: 250 * c * c * q / (1 - c * c * q) - 180, 1e-6, 1 / math.sqrt(q) - 1e-9, xtol=1e-15)
    assert C == pytest.approx(0.1940, abs=5e-5)
    Pi, sigma2_v, C_impl = spec.solve()
    assert C_impl == pytest.approx(C, rel=1e-10)
    assert sigma2_v == pytest.approx(1 - C * C * q, rel=1e-10)
    assert spec.concentration() == pytest.approx(180, rel=1e-10)


def test_exponential_design_and_null_strength():
    spec = DgpSpec(100, mu2=30, design="exponential")
    Pi, _, C = spec.solve()
    np.testing.assert_allclose(Pi[:3] / C, [1, 0.7, 0.49])
    Pi0, s2v, _ = DgpSpec(100, mu2=0).solve()
    assert np.all(Pi0 == 0) and s2v == 1.0


def test_fstar_strength():
    spec = DgpSpec(100, fstar=10, s=5)
    Pi, s2v, C = spec.solve()
    assert C == 1.0
    assert spec.n * Pi @ spec.sigma_z() @ Pi / s2v / (Pi @ Pi) == pytest.approx(10)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValidationError):
        DgpSpec(100)
    with pytest.raises(ValidationError):
        DgpSpec(100, mu2=1, fstar=1)
    with pytest.raises(ValidationError):
        DgpSpec(100, mu2=1, corr_ev=1.0)
    spec = DgpSpec(120, mu2=30, s=7)
    assert DgpSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.slow
def test_realized_moments():
    spec = DgpSpec(100_000, mu2=180 * 400, s=5)
    draw = gen_dgp(spec, 0)
    d = draw.data.d_endog[:, 0]
    assert abs(d.var() - 1) < 0.02
    assert abs(np.corrcoef(draw.e, draw.v)[0, 1] - 0.6) < 0.02


def test_invalid_shift_enters_structural_error():
    spec = DgpSpec(50, mu2=30)
    a, b = gen_dgp(spec, 1), gen_dgp(spec, 1, invalid_shift=0.5)
    np.testing.assert_allclose(b.data.y - a.data.y, 0.5 * a.data.f[:, 0])


# ---------------------------------------------------------------- baselines


def test_2sls_cases(rng):
    n = 60
    z = rng.normal(size=(n, 4))
    d = z @ [1.0, 0.5, 0.0, 0.0] + rng.normal(size=n)
    data = Dataset(2.0 * d, d, z)
    assert estimator_2sls(data).alpha[0] == pytest.approx(2.0, abs=1e-10)
    y = d + rng.normal(size=n)
    one = estimator_2sls(Dataset(y, d, z), instruments=[0])
    assert one.alpha[0] == pytest.approx((z[:, 0] @ y) / (z[:, 0] @ d), rel=1e-10)
    # dense normal-equations oracle: (X'PX)^{-1} X'Py
    P = z @ np.linalg.solve(z.T @ z, z.T)
    ref = (d @ P @ y) / (d @ P @ d)
    full = estimator_2sls(Dataset(y, d, z))
    assert full.alpha[0] == pytest.approx(ref, rel=1e-10)
    u = y - d * ref
    assert full.se[0] == pytest.approx(math.sqrt(np.mean(u**2) / (d @ P @ d)), rel=1e-10)
    with pytest.raises(ValidationError):
        estimator_2sls(Dataset(y[:4], d[:4], z[:4]))


def det_root_scan(y, d, Z):
    # oracle: first sign change of det(W'W - k W'M_Z W) scanning k upward from 1
    W = np.column_stack([y, d])
    MW = W - Z @ np.linalg.lstsq(Z, W, rcond=None)[0]
    A, B = W.T @ W, W.T @ MW

    def g(k):
        return np.linalg.det(A - k * B)

    ks = np.linspace(1.0, 3.0, 20001)
    vals = np.array([g(k) for k in ks])
    i = np.flatnonzero(np.sign(vals[1:]) != np.sign(vals[:-1]))[0]
    return optimize.brentq(g, ks[i], ks[i + 1], xtol=1e-14)


def test_liml_kappa_matches_determinant_scan():
    rng = np.random.default_rng(5)
    n = 50
    Z = rng.normal(size=(n, 5))
    v = rng.normal(size=n)
    d = Z @ [0.5, 0.3, 0.0, 0.0, 0.0] + v
    y = d + 0.6 * v + rng.normal(size=n)
    data = Dataset(y, d, Z)
    assert liml_kappa(data) == pytest.approx(det_root_scan(y, d, Z), rel=1e-9)


def test_just_identified_kclass_collapses_to_2sls(rng):
    n = 80
    z = rng.normal(size=(n, 1))
    d = z[:, 0] + rng.normal(size=n)
    data = Dataset(d + rng.normal(size=n), d, z)
    liml = estimator_kclass(data, "liml")
    assert liml.alpha[0] == pytest.approx(estimator_2sls(data).alpha[0], rel=1e-8)
    assert estimator_kclass(data, "full", a=0.0).alpha[0] == pytest.approx(liml.alpha[0], rel=1e-12)


def test_kclass_zero_is_ols_and_errors(rng):
    n = 40
    z = rng.normal(size=(n, 3))
    d = z.sum(1) + rng.normal(size=n)
    y = d + rng.normal(size=n)
    data = Dataset(y, d, z)
    assert estimator_kclass(data, "fixed", kappa=0.0).alpha[0] == pytest.approx((d @ y) / (d @ d), rel=1e-12)
    with pytest.raises(ValidationError):
        estimator_kclass(Dataset(y[:3], d[:3], z[:3]), "liml")
    with pytest.raises(ValidationError):
        estimator_kclass(data, "fixed")
    full = estimator_kclass(data, "full")
    assert np.isfinite(full.se[0]) and full.se[0] > 0


def test_liml_with_nearly_saturated_instruments():
    # n - K = 1 leaves W'M_Z W singular; the root must still be finite
    spec = DgpSpec(100, p=99, mu2=180)
    data = gen_dgp(spec, 3).data
    e = estimator_kclass(data, "full")
    assert np.isfinite(e.alpha[0])


def brute_force_loo(X, y, lam):
    # oracle: refit ridge n times, leaving one observation out each time
    n = len(y)
    err = []
    for i in range(n):
        keep = np.arange(n) != i
        Xi, yi = X[keep], y[keep]
        b = np.linalg.solve(Xi.T @ Xi + lam * np.eye(X.shape[1]), Xi.T @ yi)
        err.append((y[i] - X[i] @ b) ** 2)
    return float(np.mean(err))


def test_loocv_matches_brute_force_refits():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, 12))
    y = rng.normal(size=40)  # pure noise first stage
    grid = ridge_grid(X)
    b, mu, lam, cv = loocv_ridge(X, y)
    oracle = np.array([brute_force_loo(X, y, g) for g in grid])
    np.testing.assert_allclose(cv, oracle, rtol=1e-9)
    assert lam == grid[np.flatnonzero(oracle <= oracle.min() * (1 + 1e-9))[-1]]
    assert lam >= grid[len(grid) // 2]  # heavy shrinkage on noise
    np.testing.assert_allclose(b, np.linalg.solve(X.T @ X + lam * np.eye(12), X.T @ y), rtol=1e-9)


def test_weight_rules():
    b, s = combine_weighted({"A": (1.5, 0.2), "B": (1.5, 0.2)})
    assert b == pytest.approx(1.5) and s == pytest.approx(0.2 / math.sqrt(2))
    b, _ = combine_weighted({"A": (1.0, 1.0), "B": (2.0, 2.0)})
    assert b == pytest.approx(0.8 * 1.0 + 0.2 * 2.0)
    assert combine_weighted({"A": (0.7, 0.3)}) == (0.7, 0.3)


def test_principal_components(rng):
    f = rng.normal(size=(50, 6))
    assert np.array_equal(augment_principal_components(f, 0), f)
    factor = rng.normal(size=50)
    load = np.array([1.0, 2.0, -1.0, 0.5])
    g = np.outer(factor, load)
    with pytest.warns(UserWarning, match="only 1"):
        out = augment_principal_components(g, 2)
    assert out.shape == (50, 5)
    # oracle: the score is the centred factor times ||load|| up to sign
    fc = factor - factor.mean()
    np.testing.assert_allclose(np.abs(out[:, 4]), np.abs(fc) * np.linalg.norm(load), rtol=1e-8)
    q, _ = np.linalg.qr(rng.normal(size=(50, 3)))
    scores = augment_principal_components(q * 10, 3)[:, 3:]
    var = scores.var(axis=0)
    assert np.all(np.diff(var) <= 1e-9)
    with pytest.raises(ValidationError):
        augment_principal_components(f, 7)


# ---------------------------------------------------------------- runner


def test_metrics_exact_estimator():
    outs = [(1.0, 0.1, 0.0, False)] * 10
    row = metrics_from_outcomes("post-lasso", outs, 1.0)
    assert (row.med_bias, row.mad, row.rmse, row.rp05, row.R, row.n0) == (0.0, 0.0, 0.0, 0.0, 10, 0)


def test_metrics_calibration_on_known_null():
    rng = np.random.default_rng(0)
    R = 4000
    t = rng.standard_normal(R)
    outs = [(1.0 + x, 1.0, abs(x) / est_mod.Z975, False) for x in t]
    row = metrics_from_outcomes("2sls", outs, 1.0)
    assert abs(row.rp05 - 0.05) <= 2 * math.sqrt(0.05 * 0.95 / R)


def test_metrics_failures_and_policies():
    outs = [None, (2.0, math.nan, 2.0, True), (1.0, 0.5, 0.0, False)]
    row = metrics_from_outcomes("post-lasso", outs, 1.0)
    assert row.R == 2 and row.failed == 1 and row.n0 == 1
    assert row.rp05 == 0.5 and row.med_bias == pytest.approx(0.5)
    inf = metrics_from_outcomes("post-lasso", outs, 1.0, policy="infinite-ci")
    assert inf.med_bias == 0.0
    assert metrics_from_outcomes("2sls", [None], 1.0).R == 0


def test_size_adjusted_identity():
    rng = np.random.default_rng(1)
    null = rng.normal(size=500)
    crit, power, R = size_adjusted(null, null[:, None])
    assert R == 500 and power[0] == pytest.approx(0.05)
    with pytest.warns(UserWarning, match="unstable"):
        size_adjusted(null[:50], null[:50, None])


def test_replication_seeds_independent():
    a0, a1 = replication_seeds(42, 0)
    b0, _ = replication_seeds(42, 1)
    assert a0.generate_state(2).tolist() != b0.generate_state(2).tolist()
    assert a0.generate_state(2).tolist() != a1.generate_state(2).tolist()


def test_run_small_table_deterministic_across_threads():
    spec = DgpSpec(60, mu2=30, s=5)
    names = ["2sls", "post-lasso", "sup-score", "split-sample", "post-lasso-ridge"]
    t1 = run_replications(spec, names, R=6, base_seed=3, threads=1)
    t2 = run_replications(spec, names, R=6, base_seed=3, threads=2)
    assert t1.to_csv() == t2.to_csv()
    assert t1.to_csv().splitlines()[0] == "estimator,R,med_bias,mad,rp05,rmse,n0"
    for row in t1.rows:
        assert 0 <= row.rp05 <= 1 and row.n0 <= row.R


def test_failures_never_abort(monkeypatch):
    def boom(ctx, y, beta0):
        raise NumericalError("synthetic failure")

    monkeypatch.setitem(est_mod.ESTIMATORS, "boom", boom)
    table = run_replications(DgpSpec(40, mu2=30), ["boom", "2sls"], R=3)
    assert table.row("boom").failed == 3 and table.row("boom").R == 0
    assert table.row("2sls").R == 3


def test_unknown_estimator_and_bad_R():
    with pytest.raises(ValidationError):
        run_replications(DgpSpec(40, mu2=30), ["nope"], R=2)
    with pytest.raises(ValidationError):
        run_replications(DgpSpec(40, mu2=30), ["2sls"], R=0)
    with pytest.raises(ValidationError):
        SimConfig(noselect_policy="ignore")


def test_power_curve_shape_small():
    spec = DgpSpec(100, mu2=180, s=5)
    with pytest.warns(UserWarning):
        _, curve = simulate(spec, ["post-lasso"], R=40, base_seed=0, power_estimators=["post-lasso-f"], beta_grid=[0.5, 1.0, 1.5])
    pw = curve.power["post-lasso-f"]
    assert pw[1] <= 0.1 and pw[0] > pw[1] and pw[2] > pw[1]
    assert curve.to_csv().splitlines()[0] == "estimator,beta,power"
