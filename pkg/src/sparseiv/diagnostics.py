"""Gram-matrix moduli and first-stage strength statistics.

The restricted eigenvalue is::

    kappa_C^2 = min_{|T| <= s} min_{delta in cone(C, T)} s * delta' M delta / ||delta_T||_1^2

where ``cone(C, T) = {delta != 0 : ||delta_{T^c}||_1 <= C ||delta_T||_1}``.
Fixing ``||delta_T||_1 = 1`` and the sign pattern of ``delta_T`` turns each
inner problem into a convex quadratic program over a simplex (on T) times
an l1 ball of radius C (off T). Exact mode enumerates all supports and
sign patterns (one of each +/- pair, by symmetry) and solves the QPs with
accelerated projected gradient; sampled mode evaluates random cone
points and so returns an upper bound.

These quantities are advisory: no estimator consumes them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from sparseiv.exceptions import ValidationError

RE_BUDGET = 1_000_000
SPARSE_BUDGET = 100_000
N_DRAWS = 10_000


@dataclass
class RestrictedEigenvalue:
    kappa: float
    kappa2: float
    delta: np.ndarray
    support: np.ndarray
    s: int
    C: float
    mode: str

    @property
    def upper_bound(self):
        """Sampled values only bound the minimum from above."""
        return self.mode == "sampled"


@dataclass
class SparseEigenvalues:
    m: int
    phi_min: float
    phi_max: float
    mode: str


@dataclass
class GramModuli:
    restricted: RestrictedEigenvalue | None
    sparse: list = field(default_factory=list)


def _check_gram(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"Gram matrix must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError("Gram matrix has non-finite entries")
    if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise ValidationError("Gram matrix must be symmetric")
    M = 0.5 * (M + M.T)
    ev = np.linalg.eigvalsh(M)
    if ev[0] < -1e-10 * max(1.0, abs(ev[-1])):
        raise ValidationError("Gram matrix must be positive semidefinite")
    return M, max(ev[-1], 0.0)


@numba.njit(cache=True)
def _proj_simplex(v):
    # Euclidean projection onto {u >= 0, sum u = 1}
    k = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(k):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0:
            theta = t
    out = np.empty(k)
    for i in range(k):
        out[i] = max(v[i] - theta, 0.0)
    return out


@numba.njit(cache=True)
def _proj_l1_ball(v, radius):
    k = v.shape[0]
    out = v.copy()
    if k == 0:
        return out
    if radius <= 0.0:
        return np.zeros(k)
    a = np.abs(v)
    if a.sum() <= radius:
        return out
    w = _proj_simplex(a / radius) * radius
    for i in range(k):
        out[i] = math.copysign(w[i], v[i])
    return out


@numba.njit(cache=True)
def _re_subproblem(M, T, sign, Tc, C, L, max_iter, tol):
    """Minimize delta' M delta over the signed simplex on T times the C-ball on Tc."""
    t = T.shape[0]
    q = Tc.shape[0]
    p = M.shape[0]
    x = np.zeros(p)
    for i in range(t):
        x[T[i]] = sign[i] / t
    y = x.copy()
    tk = 1.0
    restarted = False
    fx = x @ M @ x
    step = 1.0 / L if L > 0 else 1.0
    for _ in range(max_iter):
        g = 2.0 * (M @ y)
        z = y - step * g
        xn = np.zeros(p)
        vT = np.empty(t)
        for i in range(t):
            vT[i] = sign[i] * z[T[i]]
        uT = _proj_simplex(vT)
        for i in range(t):
            xn[T[i]] = sign[i] * uT[i]
        if q > 0:
            vc = np.empty(q)
            for i in range(q):
                vc[i] = z[Tc[i]]
            wc = _proj_l1_ball(vc, C)
            for i in range(q):
                xn[Tc[i]] = wc[i]
        fn = xn @ M @ xn
        diff = 0.0
        for i in range(p):
            diff = max(diff, abs(xn[i] - x[i]))
        if fn > fx:
            if diff < tol or restarted:
                # a plain projected-gradient step no longer descends
                break
            y = x.copy()
            tk = 1.0
            restarted = True
            continue
        restarted = False
        if diff < tol:
            x = xn
            fx = fn
            break
        # adaptive restart when momentum points uphill
        if (y - xn) @ (xn - x) > 0:
            tk = 1.0
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        y = xn + ((tk - 1.0) / tn) * (xn - x)
        x = xn
        fx = fn
        tk = tn
    return fx, x


@numba.njit(cache=True)
def _re_enumerate(M, supports, sizes, C, L, max_iter, tol):
    p = M.shape[0]
    best = np.inf
    best_x = np.zeros(p)
    best_k = -1
    for k in range(supports.shape[0]):
        t = sizes[k]
        T = supports[k, :t].copy()
        mask = np.zeros(p, dtype=np.bool_)
        for i in range(t):
            mask[T[i]] = True
        Tc = np.empty(p - t, dtype=np.int64)
        j = 0
        for i in range(p):
            if not mask[i]:
                Tc[j] = i
                j += 1
        # first sign fixed to +1 by the symmetry delta -> -delta
        for code in range(1 << (t - 1)):
            sign = np.ones(t)
            for i in range(1, t):
                if (code >> (i - 1)) & 1:
                    sign[i] = -1.0
            val, x = _re_subproblem(M, T, sign, Tc, C, L, max_iter, tol)
            if val < best:
                best = val
                best_x = x
                best_k = k
    return best, best_x, best_k


def re_budget(p, s):
    """Number of (support, sign pattern) pairs with ``|T| <= s``."""
    return sum(math.comb(p, t) * 2**t for t in range(1, s + 1))


def restricted_eigenvalue(
    M, s, C, *, mode="exact", support=None, seed=0, n_draws=N_DRAWS, budget=RE_BUDGET, tol=1e-10, max_iter=100_000
):
    """Restricted eigenvalue ``kappa_C`` of a Gram matrix.

    Parameters
    ----------
    M : ndarray of shape (p, p)
        Symmetric positive semidefinite.
    s : int
        Maximal support size, ``1 <= s <= p``.
    C : float
        Cone constant, ``C >= 0``.
    mode : {"exact", "sampled"}
    support : sequence of int, optional
        Restrict the minimization to this single support ``T``.
    seed, n_draws :
        Sampled mode only.
    budget : int
        Exact mode refuses to run if the number of (support, sign) pairs
        exceeds this.

    Returns
    -------
    RestrictedEigenvalue
        ``delta`` certifies the value (normalized to ``||delta_T||_1 = 1``).
    """
    M, top = _check_gram(M)
    p = M.shape[0]
    s = int(s)
    if not 1 <= s <= p:
        raise ValidationError(f"s must lie in [1, {p}], got {s}")
    if not C >= 0:
        raise ValidationError(f"C must be nonnegative, got {C}")
    if support is not None:
        T = np.unique(np.asarray(support, dtype=np.int64))
        if T.size == 0 or T.size > s or T.min() < 0 or T.max() >= p:
            raise ValidationError("support must be a nonempty subset of size <= s")
        supports = [tuple(T)]
    else:
        supports = None
    if mode == "exact":
        if supports is None:
            need = re_budget(p, s)
            if need > budget:
                raise ValidationError(
                    f"exact restricted eigenvalue needs {need} sub-problems (budget {budget}); use mode='sampled'"
                )
            supports = [c for t in range(1, s + 1) for c in itertools.combinations(range(p), t)]
        arr = np.zeros((len(supports), s), dtype=np.int64)
        sizes = np.array([len(c) for c in supports], dtype=np.int64)
        for k, c in enumerate(supports):
            arr[k, : len(c)] = c
        val, x, k = _re_enumerate(M, arr, sizes, float(C), 2.0 * top, max_iter, tol)
        T = np.array(supports[k])
    elif mode == "sampled":
        val, x, T = _re_sampled(M, s, C, supports, np.random.default_rng(seed), n_draws)
    else:
        raise ValidationError(f"mode must be 'exact' or 'sampled', got {mode!r}")
    kappa2 = s * max(val, 0.0)
    return RestrictedEigenvalue(math.sqrt(kappa2), kappa2, x, T, s, float(C), mode)


def _re_sampled(M, s, C, supports, rng, n_draws):
    p = M.shape[0]
    best, best_x, best_T = np.inf, None, None
    for _ in range(n_draws):
        if supports is not None:
            T = np.array(supports[0])
        else:
            T = np.sort(rng.choice(p, size=int(rng.integers(1, s + 1)), replace=False))
        x = np.zeros(p)
        u = rng.exponential(size=T.size)
        x[T] = rng.choice([-1.0, 1.0], size=T.size) * u / u.sum()
        Tc = np.setdiff1d(np.arange(p), T)
        if Tc.size and C > 0:
            v = rng.standard_normal(Tc.size)
            x[Tc] = v / np.abs(v).sum() * C * rng.uniform()
        val = float(x @ M @ x)
        if val < best:
            best, best_x, best_T = val, x, T
    return best, best_x, best_T


def sparse_eigenvalues(M, m, *, mode="exact", seed=0, n_draws=N_DRAWS, budget=SPARSE_BUDGET, chunk=4096):
    """Minimal and maximal m-sparse eigenvalues of ``M``.

    Exact mode scans the extreme eigenvalues of every m x m principal
    submatrix; sampled mode scans ``n_draws`` random supports, giving an
    upper bound on the minimum and a lower bound on the maximum.
    """
    M, _ = _check_gram(M)
    p = M.shape[0]
    m = int(m)
    if m > p:
        raise ValidationError(f"m = {m} exceeds p = {p}")
    if m < 1:
        raise ValidationError("m must be positive")
    if mode == "exact":
        if math.comb(p, m) > budget:
            raise ValidationError(
                f"exact sparse eigenvalues need {math.comb(p, m)} submatrices (budget {budget}); use mode='sampled'"
            )
        it = itertools.combinations(range(p), m)
    elif mode == "sampled":
        rng = np.random.default_rng(seed)
        it = (np.sort(rng.choice(p, size=m, replace=False)) for _ in range(n_draws))
    else:
        raise ValidationError(f"mode must be 'exact' or 'sampled', got {mode!r}")
    lo, hi = np.inf, -np.inf
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            break
        idx = np.array(block)
        sub = M[idx[:, :, None], idx[:, None, :]]
        ev = np.linalg.eigvalsh(sub)
        lo = min(lo, ev[:, 0].min())
        hi = max(hi, ev[:, -1].max())
    return SparseEigenvalues(m, max(float(lo), 0.0), float(hi), mode)


def gram_moduli(M, s, C, ms=(), *, seed=0):
    """Restricted and sparse eigenvalues, exact when within budget, else sampled."""
    M, _ = _check_gram(M)
    p = M.shape[0]
    s = min(max(int(s), 1), p)
    re_mode = "exact" if re_budget(p, s) <= RE_BUDGET else "sampled"
    re = restricted_eigenvalue(M, s, C, mode=re_mode, seed=seed)
    sp = []
    for m in ms:
        if m > p:
            continue
        mode = "exact" if math.comb(p, m) <= SPARSE_BUDGET else "sampled"
        sp.append(sparse_eigenvalues(M, m, mode=mode, seed=seed))
    return GramModuli(re, sp)


def first_stage_wald(Pi_hat, Z, sigma2_v):
    """``W = Pi' Z'Z Pi / sigma2_v`` and ``F = W / dim(Z)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    Pi_hat = np.atleast_1d(np.asarray(Pi_hat, dtype=float))
    if Pi_hat.shape != (Z.shape[1],):
        raise ValidationError(f"Pi_hat must have length {Z.shape[1]}")
    if not sigma2_v > 0:
        raise ValidationError(f"first-stage error variance must be positive, got {sigma2_v}")
    ZP = Z @ Pi_hat
    W = float(ZP @ ZP) / sigma2_v
    return W, W / Z.shape[1]


def concentration_parameter(Pi, Sigma_Z, sigma2_v, n):
    """``mu^2 = n Pi' Sigma_Z Pi / sigma2_v``."""
    Pi = np.atleast_1d(np.asarray(Pi, dtype=float))
    Sigma_Z = np.atleast_2d(np.asarray(Sigma_Z, dtype=float))
    if Sigma_Z.shape != (Pi.size, Pi.size):
        raise ValidationError(f"Sigma_Z must be {Pi.size} x {Pi.size}, got {Sigma_Z.shape}")
    if not sigma2_v > 0:
        raise ValidationError(f"sigma2_v must be positive, got {sigma2_v}")
    return float(n * Pi @ Sigma_Z @ Pi / sigma2_v)
