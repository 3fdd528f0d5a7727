"""Comparison estimators: 2SLS with all instruments, LIML/Fuller, ridge, principal components.

k-class estimators use

    beta(kappa) = (X'(I - kappa M_Z) X)^{-1} X'(I - kappa M_Z) y

after partialling included exogenous regressors out of ``y``, ``X`` and
``Z``. Their standard errors follow the homoscedastic many-instrument
(Bekker-type) sandwich: with ``P`` the projection on ``Z``,
``alpha = (kappa - 1) / kappa``, residuals ``u = y - X beta``,
``s2 = u'u / (n - G)``, ``a_u = u'Pu / u'u`` and
``X~ = X - u (u'X) / (u'u)``::

    H     = X'PX - alpha X'X
    Sigma = s2 [(1 - a_u)^2 X~'P X~ + a_u^2 X~'(I - P) X~]
    V     = H^{-1} Sigma H^{-1}

Fourth-moment corrections are omitted, which is exact under Gaussian
errors.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from sparseiv.data import Dataset, _project
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.iv import COND_MAX, IvEstimate, homo_vcov, iv_estimate

RIDGE_GRID_SIZE = 50


def _orth(Z):
    """Orthonormal basis of the column span of ``Z`` (pivoted QR, rank-revealing)."""
    if Z.shape[1] == 0:
        return Z
    q, r, _ = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0])) if diag.size and diag[0] > 0 else 0
    return q[:, :rank]


def _instrument_matrix(data: Dataset, instruments):
    return data.f if instruments is None else data.f[:, np.asarray(instruments, dtype=int)]


def estimator_2sls(data: Dataset, instruments=None):
    """2SLS of ``y`` on ``[d_e, w]`` with instruments ``[f_instruments, w]``.

    Standard errors are the conventional homoscedastic ones,
    ``E_n[u^2] (X'P X)^{-1}``.
    """
    Z = np.hstack([_instrument_matrix(data, instruments), data.w])
    X = data.d
    if Z.shape[1] >= data.n:
        raise ValidationError("2SLS needs fewer instruments than observations")
    Q = _orth(Z)
    if Q.shape[1] < X.shape[1]:
        raise NumericalError("singular first-stage cross-product")
    Dhat = Q @ (Q.T @ X)
    alpha = iv_estimate(Dhat, X, data.y)
    return IvEstimate(alpha, homo_vcov(Dhat, X, data.y, alpha), "homo", Dhat=Dhat)


def _kclass_parts(data: Dataset, instruments):
    Z = _instrument_matrix(data, instruments)
    n = data.n
    K = Z.shape[1] + data.k_w
    if K >= n:
        raise ValidationError(f"k-class estimators need p < n (have {K} instruments, n = {n})")
    y, _ = _project(data.y, data.w)
    X, _ = _project(data.d_endog, data.w)
    Zt, _ = _project(Z, data.w)
    Q = _orth(Zt)
    return y, X, Q, K


def _P(Q, u):
    return Q @ (Q.T @ u)


def liml_kappa(data: Dataset, instruments=None):
    """Smallest root of ``det(W'W - kappa W'M_Z W) = 0`` with ``W = [y, d_e]`` (controls partialled)."""
    y, X, Q, _ = _kclass_parts(data, instruments)
    return _liml_kappa(y, X, Q)


def _liml_kappa(y, X, Q):
    """Smallest generalized eigenvalue of ``(W'W, W'M_Z W)``."""
    W = np.column_stack([y, X])
    MW = W - _P(Q, W)
    A = W.T @ W
    B = W.T @ MW
    # reciprocal problem B v = mu A v keeps A (positive definite) on the right,
    # which stays well posed when M_Z has low rank
    try:
        mu = scipy.linalg.eigh(0.5 * (B + B.T), A, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"LIML eigenproblem failed: {exc}") from exc
    if not mu[-1] > 0:
        raise NumericalError("LIML eigenproblem has no finite root")
    return float(1.0 / mu[-1])


def kclass(y, X, Q, kappa):
    """k-class coefficients given an orthonormal instrument basis ``Q``."""
    PX = _P(Q, X)
    MX = X - PX
    A = X.T @ X - kappa * (X.T @ MX)
    b = X.T @ y - kappa * (MX.T @ y)
    if np.linalg.cond(A) >= COND_MAX:
        raise NumericalError("singular k-class moment matrix")
    return np.linalg.solve(A, b)


def many_instrument_vcov(y, X, Q, beta, kappa, G):
    """Bekker-type variance of a k-class estimate (see module docstring)."""
    n = y.shape[0]
    u = y - X @ beta
    uu = float(u @ u)
    if uu <= 0:
        return np.zeros((X.shape[1], X.shape[1]))
    alpha = (kappa - 1.0) / kappa
    PX = _P(Q, X)
    H = X.T @ PX - alpha * (X.T @ X)
    s2 = uu / (n - G)
    a_u = float(u @ _P(Q, u)) / uu
    Xt = X - np.outer(u, u @ X) / uu
    PXt = _P(Q, Xt)
    Sig = s2 * ((1 - a_u) ** 2 * (Xt.T @ PXt) + a_u**2 * (Xt.T @ (Xt - PXt)))
    Hinv = np.linalg.inv(H)
    V = Hinv @ Sig @ Hinv
    return 0.5 * (V + V.T)


def estimator_kclass(data: Dataset, kind="full", *, a=1.0, kappa=None, instruments=None):
    """LIML, Fuller or fixed-kappa estimate of the endogenous coefficients.

    Parameters
    ----------
    kind : {"liml", "full", "fixed"}
        ``"full"`` uses ``kappa_LIML - a / (n - K)`` with ``K`` the number of
        instruments including controls; ``"fixed"`` uses ``kappa``.

    Returns
    -------
    IvEstimate
        ``alpha`` and ``vcov`` cover the endogenous coefficients only.
    """
    y, X, Q, K = _kclass_parts(data, instruments)
    n = data.n
    if kind == "fixed":
        if kappa is None:
            raise ValidationError("kind='fixed' needs kappa")
        k = float(kappa)
    else:
        k = _liml_kappa(y, X, Q)
        if kind == "full":
            k -= a / (n - K)
        elif kind != "liml":
            raise ValidationError(f"unknown k-class kind {kind!r}")
    beta = kclass(y, X, Q, k)
    if k == 0:
        V = np.full((X.shape[1],) * 2, np.nan)
    else:
        V = many_instrument_vcov(y, X, Q, beta, k, data.k_d)
    est = IvEstimate(beta, V, f"kclass-{kind}")
    est.notes.append(f"kappa={k!r}")
    return est


def ridge_grid(X, size=RIDGE_GRID_SIZE):
    """Log-spaced penalties from ``1e-4`` to ``1e2`` times ``trace(X'X)``."""
    tr = float(np.sum(X**2))
    if tr <= 0:
        raise ValidationError("ridge grid undefined for an all-zero design")
    return np.logspace(-4, 2, size) * tr


def loocv_ridge(X, y, grid=None, *, intercept=False):
    """Ridge ``min ||y - Xb||^2 + lam ||b||^2`` with leave-one-out chosen ``lam``.

    Returns ``(b, intercept, lam, cv)`` with ``cv`` the LOO mean squared
    error on the grid. Ties go to the larger penalty.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if intercept:
        xm, ym = X.mean(axis=0), y.mean()
        Xc, yc = X - xm, y - ym
    else:
        xm, ym = np.zeros(X.shape[1]), 0.0
        Xc, yc = X, y
    grid = ridge_grid(Xc) if grid is None else np.asarray(grid, dtype=float)
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    Uy = U.T @ yc
    s2 = s**2
    cv = np.empty(grid.size)
    for k, lam in enumerate(grid):
        shrink = s2 / (s2 + lam)
        fit = U @ (shrink * Uy)
        h = (U**2) @ shrink
        if intercept:
            h = h + 1.0 / X.shape[0]
        cv[k] = np.mean(((yc - fit) / (1.0 - h)) ** 2)
    # largest penalty among the minimizers
    best = np.flatnonzero(cv <= cv.min() * (1 + 1e-12))[-1]
    lam = grid[best]
    b = Vt.T @ (s / (s2 + lam) * Uy)
    return b, float(ym - xm @ b), float(lam), cv


def augment_principal_components(f, k=20):
    """Append the first ``k`` principal-component scores of ``f``.

    Components come from the eigen-decomposition of the empirical
    covariance of the centered columns; each eigenvector's largest-magnitude
    loading is made positive so the output is deterministic.
    """
    f = np.asarray(f, dtype=float)
    n, p = f.shape
    if k < 0:
        raise ValidationError("k must be nonnegative")
    if k == 0:
        return f.copy()
    if k > min(n, p):
        raise ValidationError(f"k = {k} exceeds min(n, p) = {min(n, p)}")
    fc = f - f.mean(axis=0)
    S = fc.T @ fc / n
    ev, V = np.linalg.eigh(S)
    order = np.argsort(ev)[::-1]
    ev, V = ev[order], V[:, order]
    rank = int(np.sum(ev > 1e-10 * max(ev[0], 0.0))) if ev[0] > 0 else 0
    if rank < k:
        warnings.warn(f"only {rank} principal components available, requested {k}", stacklevel=2)
        k = rank
    V = V[:, :k]
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(k)])
    V = V * flip
    return np.hstack([f, fc @ V])
