import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import sparse_iv_data
from sparseiv.data import Dataset
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.weak_id import (
    SupScoreProblem,
    critical_value,
    inverse_lasso_region,
    invert_region,
    product_grid,
    regions_agree,
    sup_score,
    sup_score_many,
    sup_score_test,
)


def mp_critical(n, p, gamma, c):
    mp.mp.dps = 40
    q = mp.mpf(gamma) / (2 * p)
    return float(c * mp.sqrt(n) * mp.sqrt(2) * mp.erfinv(1 - 2 * q))


def direct_sup_score(y, d, f, a):
    # oracle: literal max_j |n E_n[r f_j]| / sqrt(E_n[r^2 f_j^2]) after demeaning
    # and normalising f
    n = len(y)
    yc, dc = y - y.mean(), d - d.mean()
    fc = f - f.mean(0)
    fn = fc / np.sqrt(np.mean(fc**2, 0))
    r = yc - dc * a
    best = 0.0
    for j in range(f.shape[1]):
        num = abs(np.sum(r * fn[:, j]))
        den = np.sqrt(np.mean(r**2 * fn[:, j] ** 2))
        best = max(best, num / den)
    return best


def raw_problem(r, f, gamma=0.05, c=1.1):
    n = len(r)
    return SupScoreProblem(r, np.zeros((n, 1)), f, np.arange(f.shape[1]), gamma, c, None)


def test_critical_value_oracle():
    expected = mp_critical(100, 100, 0.05, 1.1)
    assert expected == pytest.approx(38.28832044780834, rel=1e-14)
    assert critical_value(100, 100, 0.05, 1.1) == pytest.approx(expected, rel=1e-12)


def test_critical_value_monotone_and_boundary():
    vals = [critical_value(100, 50, g) for g in (0.01, 0.05, 0.1, 0.5)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert critical_value(10, 1, 1.0, 1.1) == 0.0
    with pytest.raises(ValidationError):
        critical_value(10, 1, 1.5)


def test_hand_evaluation_zero():
    prob = raw_problem(np.array([1.0, 1.0]), np.array([[1.0], [-1.0]]))
    assert sup_score(prob, 0.0) == 0.0


def test_orthogonal_residual_gives_zero(rng):
    f = rng.normal(size=(30, 4))
    q, _ = np.linalg.qr(f)
    r = rng.normal(size=30)
    r -= q @ (q.T @ r)
    assert sup_score(raw_problem(r, f), 0.0) == pytest.approx(0.0, abs=1e-10)


def test_matches_direct_oracle():
    data = sparse_iv_data(n=120, p=15, seed=30)
    prob = SupScoreProblem.from_dataset(data)
    y, d = data.y, data.d_endog[:, 0]
    for a in (0.0, 0.9, 1.0, 2.5):
        assert sup_score(prob, a) == pytest.approx(direct_sup_score(y, d, data.f, a), rel=1e-10)


def test_residual_scale_invariance(rng):
    f = rng.normal(size=(40, 5))
    r = rng.normal(size=40)
    assert sup_score(raw_problem(3.7 * r, f), 0.0) == pytest.approx(sup_score(raw_problem(r, f), 0.0), rel=1e-12)


def test_degenerate_residual_raises():
    prob = raw_problem(np.zeros(4), np.ones((4, 1)))
    with pytest.raises(NumericalError, match="degenerate residual at tested point"):
        sup_score(prob, 0.0)


def test_zero_over_zero_column_skipped_with_warning():
    f = np.array([[1.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, -1.0]])
    r = np.array([0.0, 1.0, 1.0, 0.0])  # r * f_2 == 0 everywhere
    with pytest.warns(UserWarning):
        val = sup_score(raw_problem(r, f), 0.0)
    assert val == pytest.approx(0.0)


def test_instrument_rescaling_and_control_invariance():
    data = sparse_iv_data(n=100, p=12, seed=31, k_w=2)
    base = SupScoreProblem.from_dataset(data)
    scaled = Dataset(data.y, data.d_endog, data.f * np.arange(1, 13) * 1e-2, data.w)
    shifted = Dataset(data.y + data.w @ [3.0, -2.0], data.d_endog, data.f, data.w)
    for a in (0.5, 1.0):
        ref = sup_score(base, a)
        assert sup_score(SupScoreProblem.from_dataset(scaled), a) == pytest.approx(ref, rel=1e-9)
        assert sup_score(SupScoreProblem.from_dataset(shifted), a) == pytest.approx(ref, rel=1e-9)


def test_single_point_grid():
    data = sparse_iv_data(n=100, p=10, seed=32)
    prob = SupScoreProblem.from_dataset(data, grid=[1.0])
    reg = invert_region(prob)
    assert reg.accepted.tolist() == [True]
    assert reg.points.ravel().tolist() == [1.0]


def test_nested_levels_and_boundary_flag():
    data = sparse_iv_data(n=100, p=10, seed=33)
    grid = np.linspace(-1, 3, 161)
    wide = invert_region(SupScoreProblem.from_dataset(data, gamma=0.05, grid=grid))
    narrow = invert_region(SupScoreProblem.from_dataset(data, gamma=0.10, grid=grid))
    assert np.all(wide.accepted[narrow.accepted])
    assert not wide.touches_boundary
    tight = invert_region(SupScoreProblem.from_dataset(data, grid=np.linspace(0.9, 1.1, 5)))
    assert tight.touches_boundary


def test_empty_grid_rejected():
    data = sparse_iv_data(n=50, p=5, seed=34)
    with pytest.raises(ValidationError, match="empty grid"):
        invert_region(SupScoreProblem.from_dataset(data, grid=np.empty(0)))
    with pytest.raises(ValidationError):
        invert_region(SupScoreProblem.from_dataset(data))


@pytest.mark.parametrize("seed", [7, 8, 9])
def test_inverse_lasso_matches_grid_inversion(seed):
    data = sparse_iv_data(n=50, p=20, seed=seed, strength=0.4)
    prob = SupScoreProblem.from_dataset(data, grid=np.linspace(-1, 3, 101))
    a, b = invert_region(prob), inverse_lasso_region(prob)
    assert regions_agree(a, b)
    strict_in = a.stats < prob.critical * (1 - 1e-9)
    strict_out = a.stats > prob.critical * (1 + 1e-9)
    assert np.all(b.accepted[strict_in]) and not np.any(b.accepted[strict_out])


def test_product_grid_two_endogenous():
    rng = np.random.default_rng(35)
    n = 120
    f = rng.normal(size=(n, 10))
    d = np.column_stack([f[:, 0], f[:, 1]]) + rng.normal(size=(n, 2))
    y = d @ [1.0, 1.0] + rng.normal(size=n)
    data = Dataset(y, d, f)
    grid = product_grid(np.linspace(0, 2, 11), np.linspace(0, 2, 11))
    reg = invert_region(SupScoreProblem.from_dataset(data, grid=grid))
    assert reg.grid.shape == (121, 2)
    assert reg.accepted[np.flatnonzero((grid == [1.0, 1.0]).all(1))[0]]


def test_sup_score_test_wrapper():
    data = sparse_iv_data(n=150, p=10, seed=36)
    reject, stat, crit = sup_score_test(data, 1.0)
    assert not reject and stat <= crit
    reject, stat, crit = sup_score_test(data, -3.0)
    assert reject


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_region_equivalence_property(seed):
    data = sparse_iv_data(n=40, p=8, seed=seed, strength=0.3)
    prob = SupScoreProblem.from_dataset(data, grid=np.linspace(-2, 4, 31))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert regions_agree(invert_region(prob), inverse_lasso_region(prob))
