"""Second-stage IV estimation with constructed optimal instruments.

Variance matrices returned here are for the estimate itself, i.e. already
divided by n.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from sparseiv.data import Dataset
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.first_stage import (
    FirstStageFit,
    fit_first_stage,
    predict_optimal_instruments,
    replace_with_fallback,
)

COND_MAX = 1e12


@dataclass
class IvEstimate:
    """Point estimate, variance matrix and provenance of an IV fit.

    ``weak_id_route`` is set when the first stage selected nothing for some
    equation (a single-instrument fallback supplied the point estimate) or
    the constructed instruments were near singular; inference should then
    come from the sup-score region instead of ``vcov``.
    """

    alpha: np.ndarray
    vcov: np.ndarray
    mode: str
    first_stage: FirstStageFit | None = None
    Dhat: np.ndarray | None = field(default=None, repr=False)
    fallback: list = field(default_factory=list)
    weak_id_route: bool = False
    notes: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))


@dataclass
class SpecTestResult:
    J: float
    k: int
    pvalue: float
    alpha_baseline: np.ndarray
    Sigma: np.ndarray

    def reject(self, level=0.05):
        return self.J > stats.chi2.ppf(1 - level, self.k)


@dataclass
class SplitSampleEstimate:
    alpha_a: np.ndarray
    alpha_b: np.ndarray
    alpha: np.ndarray
    moment_a: np.ndarray
    moment_b: np.ndarray
    halves: tuple
    vcov: np.ndarray
    Dhat: np.ndarray = field(repr=False)
    fallback: dict = field(default_factory=dict)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))


def _mat(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _safe_inv(A, what):
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{what}: non-finite entries")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= COND_MAX:
        raise NumericalError(f"{what}: matrix is singular or ill-conditioned (cond {cond:.3g})")
    return np.linalg.inv(A)


def iv_estimate(Dhat, d, y):
    """Solve ``E_n[D d'] alpha = E_n[D y]``.

    Raises ``NumericalError`` when ``E_n[D d']`` has condition number of
    ``1e12`` or more.
    """
    Dhat, d = _mat(Dhat), _mat(d)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if Dhat.shape != d.shape or d.shape[0] != n:
        raise ValidationError(f"shape mismatch: Dhat {Dhat.shape}, d {d.shape}, y {y.shape}")
    A = Dhat.T @ d / n
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= COND_MAX:
        raise NumericalError("weak or collinear constructed instruments")
    return np.linalg.solve(A, Dhat.T @ y / n)


def _sym(V):
    return 0.5 * (V + V.T)


def hetero_vcov(Dhat, d, y, alpha):
    """Heteroscedasticity-robust ``Q^{-1} Omega Q^{-1} / n``."""
    Dhat, d = _mat(Dhat), _mat(d)
    n = Dhat.shape[0]
    eps = y - d @ alpha
    Qinv = _safe_inv(Dhat.T @ Dhat / n, "E_n[D D']")
    Omega = (Dhat * eps[:, None] ** 2).T @ Dhat / n
    return _sym(Qinv @ Omega @ Qinv) / n


def homo_vcov(Dhat, d, y, alpha):
    """Homoscedastic ``sigma^2 Q^{-1} / n`` with ``sigma^2 = E_n[eps^2]``."""
    Dhat, d = _mat(Dhat), _mat(d)
    n = Dhat.shape[0]
    eps = y - d @ alpha
    Qinv = _safe_inv(Dhat.T @ Dhat / n, "E_n[D D']")
    return _sym(np.mean(eps**2) * Qinv) / n


VCOV = {"hetero": hetero_vcov, "homo": homo_vcov}


def baseline_iv(A, d, y):
    """2SLS with baseline instruments ``A``; returns ``(alpha_tilde, M_hat)``."""
    A, d = _mat(A), _mat(d)
    n = A.shape[0]
    if A.shape[1] < d.shape[1]:
        raise ValidationError("baseline needs at least as many instruments as regressors")
    EdA = d.T @ A / n
    EAAinv = _safe_inv(A.T @ A / n, "E_n[A A']")
    H = _safe_inv(EdA @ EAAinv @ EdA.T, "baseline 2SLS moment")
    M = H @ EdA @ EAAinv
    return M @ (A.T @ y / n), M


def spec_test(data: Dataset, A, Dhat, alpha_hat, R=None):
    """Hausman-type comparison of a baseline IV estimate with ``alpha_hat``.

    Parameters
    ----------
    data : Dataset
    A : ndarray of shape (n, m), m >= k_d
        Baseline instruments (include any exogenous regressors yourself).
    Dhat : ndarray of shape (n, k_d)
        Constructed optimal instruments behind ``alpha_hat``.
    alpha_hat : ndarray of shape (k_d,)
    R : ndarray of shape (k, k_d), optional
        Contrast matrix of full row rank; identity by default. When both
        estimators include the same exogenous regressors their contrasts
        are linear in the endogenous ones, so restrict ``R`` to the
        endogenous rows.

    Returns
    -------
    SpecTestResult
        ``J`` is chi-square with ``k`` degrees of freedom under validity.

    Notes
    -----
    The influence term of the baseline estimate is ``M A_i`` with ``M`` the
    k_d x m 2SLS weighting matrix (written with an inverse in some sources,
    which would not be dimensionally defined).
    """
    d, y = data.d, data.y
    n, kd = d.shape
    Dhat = _mat(Dhat)
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    R = np.eye(kd) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[1] != kd:
        raise ValidationError(f"R must have {kd} columns")
    k = np.linalg.matrix_rank(R)
    if k != R.shape[0]:
        raise ValidationError("R must have full row rank")
    alpha_tilde, M = baseline_iv(A, d, y)
    eps = y - d @ alpha_hat
    Qinv = _safe_inv(Dhat.T @ Dhat / n, "E_n[D D']")
    psi = _mat(A) @ M.T - Dhat @ Qinv  # rows: (M A_i - Q^{-1} D_i)'
    Sigma = _sym((psi * eps[:, None] ** 2).T @ psi / n)
    diff = R @ (alpha_tilde - alpha_hat)
    # identical estimates: zero contrast, whatever its variance
    if np.max(np.abs(diff)) <= 1e-12 * max(1.0, float(np.max(np.abs(alpha_hat)))):
        return SpecTestResult(0.0, int(k), 1.0, alpha_tilde, Sigma)
    RSR = R @ Sigma @ R.T
    cond = np.linalg.cond(RSR)
    if not np.isfinite(cond) or cond >= COND_MAX:
        raise NumericalError("degenerate contrast variance")
    J = float(n * diff @ np.linalg.solve(RSR, diff))
    J = max(J, 0.0)
    return SpecTestResult(J, int(k), float(stats.chi2.sf(J, k)), alpha_tilde, Sigma)


def fit_iv(
    data: Dataset,
    *,
    method="post-lasso",
    vcov="hetero",
    c=1.1,
    gamma=None,
    K=15,
    intercept=True,
):
    """Lasso/Post-Lasso first stage followed by IV with robust or homoscedastic variance.

    Empty first-stage selections are replaced with the single most
    correlated instrument and ``weak_id_route`` is set.
    """
    if vcov not in VCOV:
        raise ValidationError(f"vcov must be one of {sorted(VCOV)}, got {vcov!r}")
    fs = fit_first_stage(data, c=c, gamma=gamma, K=K, method=method, intercept=intercept)
    notes = []
    chosen = [None] * data.k_e
    if fs.any_empty:
        fs, chosen = replace_with_fallback(fs, data)
        notes.append("empty first-stage selection; single-instrument fallback used")
    Dhat = predict_optimal_instruments(fs, data)
    d, y = data.d, data.y
    route = fs.any_empty
    try:
        alpha = iv_estimate(Dhat, d, y)
        V = VCOV[vcov](Dhat, d, y, alpha)
    except NumericalError as exc:
        notes.append(str(exc))
        kd = data.k_d
        alpha, V, route = np.full(kd, np.nan), np.full((kd, kd), np.nan), True
    return IvEstimate(alpha, V, vcov, fs, Dhat, chosen, route, notes)


def _split(n, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_a = -(-n // 2)
    return np.sort(perm[:n_a]), np.sort(perm[n_a:])


def split_sample_iv(
    data: Dataset,
    *,
    seed=0,
    halves=None,
    method="post-lasso",
    c=1.1,
    gamma=None,
    K=15,
    intercept=True,
):
    """Split-sample IV: each half's instruments come from the other half's first stage.

    Halves have sizes ``ceil(n/2)`` and ``floor(n/2)`` from a seeded
    permutation unless ``halves=(idx_a, idx_b)`` is given. A half whose
    fitting sample selects nothing uses the single-instrument fallback;
    this is recorded in ``fallback``.
    """
    n = data.n
    if n < 4:
        raise ValidationError("split-sample IV needs n >= 4")
    idx_a, idx_b = _split(n, seed) if halves is None else (np.asarray(halves[0]), np.asarray(halves[1]))
    parts = {"a": data.subset(idx_a), "b": data.subset(idx_b)}
    other = {"a": "b", "b": "a"}
    Dh, alphas, moments, fallback = {}, {}, {}, {}
    fits = {}
    for k, part in parts.items():
        fs = fit_first_stage(part, c=c, gamma=gamma, K=K, method=method, intercept=intercept)
        if fs.any_empty:
            fs, chosen = replace_with_fallback(fs, part)
            fallback[k] = chosen
        fits[k] = fs
    for k, part in parts.items():
        D = predict_optimal_instruments(fits[other[k]], part)
        try:
            alphas[k] = iv_estimate(D, part.d, part.y)
        except NumericalError as exc:
            raise NumericalError(f"half {k}: {exc}") from exc
        Dh[k] = D
        moments[k] = D.T @ D
    _safe_inv(moments["a"] + moments["b"], "combined moment")
    alpha = combine_halves(moments["a"], alphas["a"], moments["b"], alphas["b"])
    Dfull = np.empty((n, data.k_d))
    Dfull[idx_a] = Dh["a"]
    Dfull[idx_b] = Dh["b"]
    V = hetero_vcov(Dfull, data.d, data.y, alpha)
    return SplitSampleEstimate(
        alphas["a"], alphas["b"], alpha, moments["a"], moments["b"], (idx_a, idx_b), V, Dfull, fallback
    )


def combine_halves(moment_a, alpha_a, moment_b, alpha_b):
    """Matrix-weighted average of two half-sample estimates."""
    return np.linalg.solve(moment_a + moment_b, moment_a @ alpha_a + moment_b @ alpha_b)
