"""First-stage estimation of the optimal instruments.

For every endogenous regressor the driver fits a Lasso (or Post-Lasso)
regression on the technical instruments, re-estimating the penalty loadings
from the previous fit's residuals. The controls (and a constant) are left
unpenalized by partialling them out before the penalized step.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from sparseiv.data import Dataset, _project, degenerate_columns, unpenalized_block
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.lasso import (
    PenaltyPlan,
    default_gamma,
    initial_loadings,
    post_lasso,
    refined_loadings,
    solve_weighted_lasso,
)

logger = logging.getLogger(__name__)

METHODS = ("lasso", "post-lasso")


@dataclass
class FirstStageFit:
    """Per-equation first-stage coefficients and selection history.

    ``beta[l]`` is a p-vector over the original instrument columns (zero on
    dropped columns) and ``theta[l]`` the coefficients on the unpenalized
    block (constant first when ``intercept`` is on, then the controls), so
    that the fitted optimal instrument is ``U @ theta[l] + f @ beta[l]``.
    """

    beta: list
    theta: list
    support: list
    plans: list
    empty: list
    method: str
    intercept: bool
    iterations: list
    dropped: np.ndarray
    k_e: int
    lam: float
    gamma: float
    c: float
    fitted: np.ndarray = field(repr=False, default=None)

    @property
    def any_empty(self):
        return any(self.empty)


def _check_config(K, method, c):
    if K < 1:
        raise ValidationError(f"K must be at least 1, got {K}")
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}, got {method!r}")
    if not c > 1:
        raise ValidationError(f"c must exceed 1, got {c}")


def fit_first_stage(
    data: Dataset,
    *,
    c=1.1,
    gamma=None,
    K=15,
    method="post-lasso",
    intercept=True,
    stop_tol=1e-8,
    tol=1e-9,
    max_sweeps=100_000,
):
    """Iterated-loadings Lasso / Post-Lasso first stage.

    Parameters
    ----------
    data : Dataset
    c, gamma : float
        Penalty constants; ``gamma=None`` means ``0.1 / log(max(p, n))``.
    K : int, default 15
        Total number of penalized fits per equation: one with the initial
        loadings followed by up to ``K - 1`` refinements.
    method : {"post-lasso", "lasso"}
        Estimator used both for the residuals feeding the refined loadings
        and for the final fitted values.
    intercept : bool, default True
        Leave a constant unpenalized.
    stop_tol : float
        Stop refining once loadings move by less than this in sup-norm.

    Returns
    -------
    FirstStageFit
        Empty selections are recorded in ``empty`` rather than raised.
    """
    _check_config(K, method, c)
    n, p, k_e = data.n, data.p, data.k_e
    if gamma is None:
        gamma = default_gamma(n, p)

    U = unpenalized_block(data.w, intercept)
    f_t, coef_f = _project(data.f, U)
    dropped = degenerate_columns(f_t, data.f)
    if dropped.size:
        warnings.warn(
            f"dropping zero-variance instruments {dropped.tolist()} before the first stage",
            stacklevel=2,
        )
        logger.warning("dropped instruments %s", dropped.tolist())
    keep = np.setdiff1d(np.arange(p), dropped)
    if keep.size == 0:
        raise ValidationError("no instrument has positive variance after partialling")
    fk = f_t[:, keep]
    p_eff = keep.size

    betas, thetas, supports, plans_all, empties, iters = [], [], [], [], [], []
    fitted = np.empty((n, k_e))
    lam = None
    for l in range(k_e):
        d_l = data.d_endog[:, l]
        d_t, _ = _project(d_l, U)
        load = initial_loadings(fk, d_t)
        plan = PenaltyPlan.rule(n, load, k_e=k_e, c=c, gamma=gamma, stage="initial")
        lam = plan.lam
        plans = [plan]
        warm = None
        for it in range(K):
            lfit = solve_weighted_lasso(
                fk, d_t, plan, intercept=False, tol=tol, max_sweeps=max_sweeps, beta_init=warm
            )
            warm = lfit.beta
            if method == "post-lasso":
                pfit = post_lasso(fk, d_t, lfit.support, intercept=False)
                b = pfit.beta
            else:
                b = lfit.beta
            resid = d_t - fk @ b
            if it == K - 1:
                break
            try:
                new_load = refined_loadings(fk, resid)
            except NumericalError:
                break
            if np.max(np.abs(new_load - plan.loadings)) < stop_tol:
                break
            plan = PenaltyPlan.rule(
                n, new_load, k_e=k_e, c=c, gamma=gamma, stage=f"refined({it + 1})"
            )
            plans.append(plan)
        beta = np.zeros(p)
        beta[keep] = b
        fit_vals = d_l - resid
        theta = np.linalg.lstsq(U, d_l - data.f @ beta, rcond=None)[0] if U.shape[1] else np.zeros(0)
        betas.append(beta)
        thetas.append(theta)
        supports.append(keep[np.flatnonzero(b)])
        plans_all.append(plans)
        empties.append(lfit.support.size == 0)
        iters.append(len(plans))
        fitted[:, l] = fit_vals

    return FirstStageFit(
        beta=betas,
        theta=thetas,
        support=supports,
        plans=plans_all,
        empty=empties,
        method=method,
        intercept=intercept,
        iterations=iters,
        dropped=dropped,
        k_e=k_e,
        lam=lam,
        gamma=gamma,
        c=c,
        fitted=fitted,
    )


def fallback_single_instrument(data: Dataset, l=0):
    """Index of the instrument most correlated (in absolute value) with ``d_l``.

    Ties go to the lowest index. Raises ``ValidationError`` if ``d_l`` is
    constant or no instrument varies.
    """
    d = data.d_endog[:, l]
    dc = d - d.mean()
    fc = data.f - data.f.mean(axis=0)
    sd_d = np.sqrt(np.mean(dc**2))
    sd_f = np.sqrt(np.mean(fc**2, axis=0))
    if sd_d == 0 or not np.any(sd_f > 0):
        raise ValidationError("correlations undefined: constant endogenous variable or instruments")
    corr = np.zeros(data.p)
    ok = sd_f > 0
    corr[ok] = np.abs(fc[:, ok].T @ dc / data.n) / (sd_f[ok] * sd_d)
    # round so floating noise does not break exact ties
    return int(np.argmax(np.round(corr, 12)))


def single_instrument_fit(data: Dataset, j, l=0, intercept=True):
    """First-stage OLS of ``d_l`` on one instrument (plus unpenalized block)."""
    U = unpenalized_block(data.w, intercept)
    Z = np.hstack([U, data.f[:, [j]]])
    coef = np.linalg.lstsq(Z, data.d_endog[:, l], rcond=None)[0]
    beta = np.zeros(data.p)
    beta[j] = coef[-1]
    return coef[:-1], beta


def predict_optimal_instruments(fit: FirstStageFit, data: Dataset):
    """Fitted optimal instruments ``[D_1, ..., D_ke, w]`` of shape (n, k_d).

    Works on any dataset with the same column layout as the one the fit
    came from (used for out-of-sample halves in split-sample IV).
    """
    if data.k_e != fit.k_e or data.p != fit.beta[0].shape[0]:
        raise ValidationError("dataset dimensions do not match the first-stage fit")
    U = unpenalized_block(data.w, fit.intercept)
    if U.shape[1] != fit.theta[0].shape[0]:
        raise ValidationError("control block does not match the first-stage fit")
    cols = [U @ fit.theta[l] + data.f @ fit.beta[l] for l in range(fit.k_e)]
    return np.column_stack(cols + [data.w])


def replace_with_fallback(fit: FirstStageFit, data: Dataset):
    """Swap empty equations for a single-instrument OLS fit.

    Returns a new FirstStageFit plus the list of fallback instrument indices
    (``None`` for equations that kept their Lasso fit).
    """
    betas, thetas, supports, chosen = list(fit.beta), list(fit.theta), list(fit.support), []
    fitted = fit.fitted.copy() if fit.fitted is not None else None
    for l in range(fit.k_e):
        if not fit.empty[l]:
            chosen.append(None)
            continue
        j = fallback_single_instrument(data, l)
        theta, beta = single_instrument_fit(data, j, l, fit.intercept)
        betas[l], thetas[l], supports[l] = beta, theta, np.array([j])
        if fitted is not None:
            U = unpenalized_block(data.w, fit.intercept)
            fitted[:, l] = U @ theta + data.f @ beta
        chosen.append(j)
    new = FirstStageFit(
        beta=betas,
        theta=thetas,
        support=supports,
        plans=fit.plans,
        empty=fit.empty,
        method=fit.method,
        intercept=fit.intercept,
        iterations=fit.iterations,
        dropped=fit.dropped,
        k_e=fit.k_e,
        lam=fit.lam,
        gamma=fit.gamma,
        c=fit.c,
        fitted=fitted,
    )
    return new, chosen
