"""Weighted Lasso with data-driven penalty loadings, and Post-Lasso refits.

The Lasso problem for one first-stage equation is::

    min_beta  E_n[(d_i - mu - f_i' beta)^2] + (lam / n) * sum_j gamma_j |beta_j|

with an unpenalized intercept ``mu`` (handled by centering). It is solved by
cyclic coordinate descent with an active-set inner loop, followed by an
exact solve of the reduced KKT system on the detected support and signs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg
from scipy.special import ndtri

from sparseiv.exceptions import ConvergenceError, NumericalError, ValidationError

GRAM_MAX_P = 2000


def _upper_normal_quantile(q):
    # Phi^{-1}(1 - q) computed from the tail to keep relative accuracy.
    return -ndtri(q)


def penalty_level(n, p, k_e=1, c=1.1, gamma=None):
    """Penalty level ``lam = 2 c sqrt(n) Phi^{-1}(1 - gamma / (2 k_e p))``.

    ``gamma=None`` uses ``0.1 / log(max(p, n))``.
    """
    if n < 1 or p < 1 or k_e < 1:
        raise ValidationError("n, p and k_e must be positive")
    if not c > 1:
        raise ValidationError(f"c must exceed 1, got {c}")
    if gamma is None:
        gamma = default_gamma(n, p)
    if not 0 < gamma < 1:
        raise ValidationError(f"gamma must lie in (0, 1), got {gamma}")
    q = gamma / (2.0 * k_e * p)
    if q >= 0.5:
        raise ValidationError("penalty level nonpositive: gamma / (2 k_e p) >= 1/2")
    return 2.0 * c * math.sqrt(n) * _upper_normal_quantile(q)


def default_gamma(n, p):
    """``0.1 / log(max(p, n))``."""
    return 0.1 / math.log(max(p, n))


def initial_loadings(f, d):
    """Conservative loadings ``sqrt(E_n[f_j^2 (d - mean(d))^2])``."""
    f = np.asarray(f, dtype=float)
    d = np.asarray(d, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != d.shape[0]:
        raise ValidationError("f and d must have the same number of rows")
    dc = d - d.mean()
    load = np.sqrt(np.mean(f**2 * dc[:, None] ** 2, axis=0))
    bad = np.flatnonzero(load <= 0)
    if bad.size:
        raise ValidationError(f"zero initial loadings for instruments {bad.tolist()}")
    return load


def refined_loadings(f, resid):
    """Loadings ``sqrt(E_n[f_j^2 v_j^2])`` from first-stage residuals."""
    f = np.asarray(f, dtype=float)
    resid = np.asarray(resid, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != resid.shape[0]:
        raise ValidationError("f and residuals must have the same number of rows")
    if not np.any(resid):
        raise NumericalError("perfect first-stage fit; refined loadings degenerate")
    load = np.sqrt(np.mean(f**2 * resid[:, None] ** 2, axis=0))
    bad = np.flatnonzero(load <= 0)
    if bad.size:
        raise NumericalError(f"zero refined loadings for instruments {bad.tolist()}")
    return load


@dataclass(frozen=True)
class PenaltyPlan:
    """Penalty level and loadings for one equation.

    Build through :meth:`rule` to get the data-driven level; direct
    construction is allowed for other levels (e.g. zero, or the
    inverse-Lasso level used by the weak-identification region).
    """

    lam: float
    loadings: np.ndarray
    c: float = 1.1
    gamma: float | None = None
    stage: str = "initial"

    def __post_init__(self):
        load = np.asarray(self.loadings, dtype=float)
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValidationError(f"penalty level must be finite and >= 0, got {self.lam}")
        if load.ndim != 1 or not np.all(np.isfinite(load)) or np.any(load <= 0):
            raise ValidationError("loadings must be a vector of positive finite values")
        object.__setattr__(self, "loadings", load)

    @classmethod
    def rule(cls, n, loadings, k_e=1, c=1.1, gamma=None, stage="initial"):
        loadings = np.asarray(loadings, dtype=float)
        p = loadings.shape[0]
        if gamma is None:
            gamma = default_gamma(n, p)
        lam = penalty_level(n, p, k_e, c, gamma)
        return cls(lam, loadings, c, gamma, stage)


@dataclass
class LassoFit:
    beta: np.ndarray
    intercept: float
    support: np.ndarray
    objective: float
    sweeps: int
    kkt_gap: float
    lam: float
    loadings: np.ndarray
    history: np.ndarray = field(default_factory=lambda: np.empty(0))

    def predict(self, f):
        return self.intercept + np.asarray(f) @ self.beta


@dataclass
class PostLassoFit:
    beta: np.ndarray
    intercept: float
    included: np.ndarray
    resid_var: float
    rank: int
    dropped: np.ndarray

    def predict(self, f):
        return self.intercept + np.asarray(f) @ self.beta


@numba.njit(cache=True)
def _soft(rho, t):
    if rho > t:
        return rho - t
    if rho < -t:
        return rho + t
    return 0.0


@numba.njit(cache=True)
def _objective_gram(yy, b, grad, beta, pen):
    # E_n[(d - f'beta)^2] = yy - 2 b'beta + beta'G beta and G beta = b - grad
    q = yy - np.dot(b, beta) - np.dot(grad, beta)
    return q + 2.0 * np.sum(pen * np.abs(beta))


@numba.njit(cache=True)
def _cd_gram(G, b, yy, pen, beta, tol, max_sweeps, history):
    p = b.shape[0]
    grad = b - G @ beta
    sq = np.sqrt(np.maximum(np.diag(G), 0.0))
    sweeps = 0
    nh = 0
    converged = False
    active = np.empty(p, dtype=np.int64)
    while sweeps < max_sweeps:
        maxchg = 0.0
        na = 0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            new = _soft(grad[j] + gjj * old, pen[j]) / gjj
            if new != old:
                delta = new - old
                for k in range(p):
                    grad[k] -= G[k, j] * delta
                beta[j] = new
                chg = abs(delta) * sq[j]
                if chg > maxchg:
                    maxchg = chg
            if beta[j] != 0.0:
                active[na] = j
                na += 1
        sweeps += 1
        if nh < history.shape[0]:
            history[nh] = _objective_gram(yy, b, grad, beta, pen)
            nh += 1
        if maxchg < tol:
            converged = True
            break
        while sweeps < max_sweeps:
            maxchg = 0.0
            for a in range(na):
                j = active[a]
                gjj = G[j, j]
                old = beta[j]
                new = _soft(grad[j] + gjj * old, pen[j]) / gjj
                if new != old:
                    delta = new - old
                    for k in range(p):
                        grad[k] -= G[k, j] * delta
                    beta[j] = new
                    chg = abs(delta) * sq[j]
                    if chg > maxchg:
                        maxchg = chg
            sweeps += 1
            if nh < history.shape[0]:
                history[nh] = _objective_gram(yy, b, grad, beta, pen)
                nh += 1
            if maxchg < tol:
                break
    return sweeps, converged, nh


@numba.njit(cache=True)
def _cd_naive(XT, y, pen, beta, tol, max_sweeps, history):
    # XT is the transposed design so each column is a contiguous row.
    p, n = XT.shape
    resid = y - XT.T @ beta
    norms = np.empty(p)
    for j in range(p):
        norms[j] = np.dot(XT[j], XT[j]) / n
    sweeps = 0
    nh = 0
    converged = False
    active = np.empty(p, dtype=np.int64)
    while sweeps < max_sweeps:
        maxchg = 0.0
        na = 0
        for j in range(p):
            gjj = norms[j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            rho = np.dot(XT[j], resid) / n + gjj * old
            new = _soft(rho, pen[j]) / gjj
            if new != old:
                delta = new - old
                for i in range(n):
                    resid[i] -= XT[j, i] * delta
                beta[j] = new
                chg = abs(delta) * math.sqrt(gjj)
                if chg > maxchg:
                    maxchg = chg
            if beta[j] != 0.0:
                active[na] = j
                na += 1
        sweeps += 1
        if nh < history.shape[0]:
            history[nh] = np.dot(resid, resid) / n + 2.0 * np.sum(pen * np.abs(beta))
            nh += 1
        if maxchg < tol:
            converged = True
            break
        while sweeps < max_sweeps:
            maxchg = 0.0
            for a in range(na):
                j = active[a]
                gjj = norms[j]
                old = beta[j]
                rho = np.dot(XT[j], resid) / n + gjj * old
                new = _soft(rho, pen[j]) / gjj
                if new != old:
                    delta = new - old
                    for i in range(n):
                        resid[i] -= XT[j, i] * delta
                    beta[j] = new
                    chg = abs(delta) * math.sqrt(gjj)
                    if chg > maxchg:
                        maxchg = chg
            sweeps += 1
            if nh < history.shape[0]:
                history[nh] = np.dot(resid, resid) / n + 2.0 * np.sum(pen * np.abs(beta))
                nh += 1
            if maxchg < tol:
                break
    return sweeps, converged, nh


def _kkt_gap(score, beta, thresh):
    """Largest violation of the subgradient conditions.

    ``score_j = 2 E_n[f_j (d - f'beta)]`` and ``thresh_j = lam * gamma_j / n``.
    """
    act = beta != 0
    gap_act = np.abs(score[act] - np.sign(beta[act]) * thresh[act])
    gap_in = np.maximum(np.abs(score[~act]) - thresh[~act], 0.0)
    return float(max(gap_act.max(initial=0.0), gap_in.max(initial=0.0)))


def _objective(X, y, beta, pen):
    r = y - X @ beta
    return float(r @ r / len(y) + 2.0 * np.sum(pen * np.abs(beta)))


def _polish(X, y, beta, pen, G=None, b=None):
    """Exact solution on the current support and sign pattern, or None."""
    n = X.shape[0]
    act = np.flatnonzero(beta)
    if act.size == 0 or act.size > n:
        return None
    sgn = np.sign(beta[act])
    if G is not None:
        Gaa = G[np.ix_(act, act)]
        ba = b[act]
    else:
        Xa = X[:, act]
        Gaa = Xa.T @ Xa / n
        ba = Xa.T @ y / n
    try:
        cho = scipy.linalg.cho_factor(Gaa)
        sol = scipy.linalg.cho_solve(cho, ba - pen[act] * sgn)
    except (np.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(sol)) or np.any(np.sign(sol) != sgn):
        return None
    out = np.zeros_like(beta)
    out[act] = sol
    return out


def solve_weighted_lasso(
    f,
    d,
    plan,
    *,
    intercept=True,
    tol=1e-9,
    max_sweeps=100_000,
    beta_init=None,
    mode="auto",
    record_history=False,
):
    """Solve the weighted Lasso problem for one equation.

    Parameters
    ----------
    f : ndarray of shape (n, p)
    d : ndarray of shape (n,)
    plan : PenaltyPlan
        Anything with ``lam`` and ``loadings`` attributes.
    intercept : bool, default True
        Leave a constant unpenalized (implemented by centering).
    tol : float
        Stop when the largest coefficient change, measured in units of the
        column's root mean square, falls below ``tol`` times the response
        root mean square.
    max_sweeps : int
    beta_init : ndarray, optional
        Warm start.
    mode : {"auto", "gram", "naive"}
        ``"gram"`` keeps the p x p Gram matrix (covariance updates);
        ``"naive"`` updates the residual vector. ``"auto"`` picks ``"gram"``
        for ``p <= 2000``.
    record_history : bool
        Keep the objective value after every sweep in ``LassoFit.history``.

    Returns
    -------
    LassoFit

    Raises
    ------
    ConvergenceError
        After ``max_sweeps`` without meeting ``tol``; carries the best
        iterate and its KKT gap.
    """
    f = np.asarray(f, dtype=float)
    d = np.asarray(d, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    n, p = f.shape
    if d.shape != (n,):
        raise ValidationError(f"d must have shape ({n},), got {d.shape}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(d))):
        raise ValidationError("non-finite input to Lasso solver")
    loadings = np.asarray(plan.loadings, dtype=float)
    if loadings.shape != (p,):
        raise ValidationError(f"expected {p} loadings, got {loadings.shape}")
    lam = float(plan.lam)
    thresh = lam * loadings / n
    pen = 0.5 * thresh

    if intercept:
        fmean = f.mean(axis=0)
        dmean = d.mean()
        X = f - fmean
        y = d - dmean
    else:
        X, y = f, d
    scale = math.sqrt(float(y @ y) / n)
    beta = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    if beta.shape != (p,):
        raise ValidationError("beta_init has the wrong shape")
    history = np.empty(max_sweeps if record_history else 0)

    if scale == 0.0:
        beta[:] = 0.0
        sweeps, converged, nh = 0, True, 0
        G = b = None
    else:
        if mode == "auto":
            mode = "gram" if p <= GRAM_MAX_P else "naive"
        if mode == "gram":
            G = X.T @ X / n
            b = X.T @ y / n
            sweeps, converged, nh = _cd_gram(
                G, b, float(y @ y) / n, pen, beta, tol * scale, max_sweeps, history
            )
        elif mode == "naive":
            G = b = None
            sweeps, converged, nh = _cd_naive(
                np.ascontiguousarray(X.T), y, pen, beta, tol * scale, max_sweeps, history
            )
        else:
            raise ValidationError(f"unknown solver mode {mode!r}")

        polished = _polish(X, y, beta, pen, G, b)
        if polished is not None:
            score_p = 2.0 * X.T @ (y - X @ polished) / n
            score_c = 2.0 * X.T @ (y - X @ beta) / n
            gap_p = _kkt_gap(score_p, polished, thresh)
            if gap_p <= _kkt_gap(score_c, beta, thresh) and _objective(
                X, y, polished, pen
            ) <= _objective(X, y, beta, pen) * (1 + 1e-12) + 1e-300:
                beta = polished
                converged = True

    score = 2.0 * X.T @ (y - X @ beta) / n
    gap = _kkt_gap(score, beta, thresh)
    if not converged:
        raise ConvergenceError(
            f"Lasso did not converge in {max_sweeps} sweeps (kkt gap {gap:.3g})",
            beta=beta,
            kkt_gap=gap,
        )
    mu = float(dmean - fmean @ beta) if intercept else 0.0
    return LassoFit(
        beta=beta,
        intercept=mu,
        support=np.flatnonzero(beta),
        objective=_objective(X, y, beta, pen),
        sweeps=int(sweeps),
        kkt_gap=gap,
        lam=lam,
        loadings=loadings,
        history=history[:nh],
    )


def post_lasso(f, d, included, *, intercept=True, selected=None):
    """OLS of ``d`` on the instruments in ``included`` (plus a constant).

    Parameters
    ----------
    f : ndarray of shape (n, p)
    d : ndarray of shape (n,)
    included : array of int
        Columns to refit on. May extend the Lasso support.
    intercept : bool, default True
    selected : array of int, optional
        Lasso support; if given, warns when ``included`` adds more than
        ``max(1, len(selected))`` extra columns.

    Returns
    -------
    PostLassoFit
        Columns found linearly dependent (pivoted QR, tolerance ``1e-10``
        times the largest column norm) are dropped with a warning and
        listed in ``dropped``.
    """
    f = np.asarray(f, dtype=float)
    d = np.asarray(d, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    n, p = f.shape
    included = np.unique(np.asarray(included, dtype=int))
    if included.size and (included.min() < 0 or included.max() >= p):
        raise ValidationError("included indices out of range")
    if included.size + int(intercept) >= n:
        raise ValidationError(
            f"Post-Lasso needs fewer than n={n} regressors, got {included.size + int(intercept)}"
        )
    if selected is not None:
        extra = np.setdiff1d(included, selected).size
        if extra > max(1, len(selected)):
            warnings.warn(
                f"Post-Lasso adds {extra} columns beyond the {len(selected)} selected",
                stacklevel=2,
            )

    if intercept:
        dmean = d.mean()
        fmean = f[:, included].mean(axis=0)
        X = f[:, included] - fmean
        y = d - dmean
    else:
        X = f[:, included]
        y = d
    beta = np.zeros(p)
    dropped = np.empty(0, dtype=int)
    rank = 0
    if included.size:
        q, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
        colmax = np.max(np.linalg.norm(X, axis=0))
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > 1e-10 * colmax)) if colmax > 0 else 0
        if rank < included.size:
            dropped = np.sort(included[piv[rank:]])
            warnings.warn(
                f"dropping linearly dependent instruments {dropped.tolist()} in Post-Lasso",
                stacklevel=2,
            )
        keep = piv[:rank]
        coef = scipy.linalg.solve_triangular(r[:rank, :rank], q[:, :rank].T @ y)
        beta[included[keep]] = coef
        fitted = X[:, keep] @ coef
    else:
        fitted = np.zeros(n)
    resid = y - fitted
    mu = float(dmean - fmean @ beta[included]) if intercept else 0.0
    kept = np.setdiff1d(included, dropped)
    return PostLassoFit(
        beta=beta,
        intercept=mu,
        included=kept,
        resid_var=float(resid @ resid / n),
        rank=rank + int(intercept),
        dropped=dropped,
    )
