"""Weak-identification robust inference on the endogenous coefficients.

The sup-score statistic at a hypothesized value ``a`` is::

    Lambda_a = max_j |sum_i r_i f_ij| / sqrt(E_n[r_i^2 f_ij^2]),   r = y~ - d~_e' a

with controls partialled out and instruments normalized to unit second
moment. The confidence region collects grid points with ``Lambda_a`` at or
below ``c sqrt(n) Phi^{-1}(1 - gamma / (2p))``. The same region is the set
of points at which a weighted Lasso of ``r`` on the instruments, with
level twice the critical value and loadings ``sqrt(E_n[r^2 f_j^2])``,
returns all-zero coefficients; :func:`inverse_lasso_region` computes it
that way as an independent check.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from sparseiv.data import Dataset, _project, degenerate_columns, normalize_instruments, unpenalized_block
from sparseiv.exceptions import NumericalError, ValidationError
from sparseiv.lasso import PenaltyPlan, solve_weighted_lasso

NEAR_BOUNDARY = 1e-9


def critical_value(n, p, gamma=0.05, c=1.1):
    """``c sqrt(n) Phi^{-1}(1 - gamma / (2p))``."""
    if n < 1 or p < 1:
        raise ValidationError("n and p must be positive")
    if not c > 1:
        raise ValidationError(f"c must exceed 1, got {c}")
    if not 0 < gamma <= 1:
        raise ValidationError(f"gamma must lie in (0, 1], got {gamma}")
    q = gamma / (2.0 * p)
    if q > 0.5:
        raise ValidationError("gamma / (2p) exceeds 1/2")
    return c * math.sqrt(n) * max(-ndtri(q), 0.0)


@dataclass
class SupScoreProblem:
    """Partialled and normalized data for sup-score inference.

    Build with :meth:`from_dataset`. ``kept`` maps columns of ``f_tilde``
    back to the original instrument indices.
    """

    y_tilde: np.ndarray
    d_tilde: np.ndarray
    f_tilde: np.ndarray
    kept: np.ndarray
    gamma: float = 0.05
    c: float = 1.1
    grid: np.ndarray | None = None

    @classmethod
    def from_dataset(cls, data: Dataset, *, gamma=0.05, c=1.1, grid=None, intercept=True):
        U = unpenalized_block(data.w, intercept)
        y_t, _ = _project(data.y, U)
        d_t, _ = _project(data.d_endog, U)
        f_t, _ = _project(data.f, U)
        bad = degenerate_columns(f_t, data.f)
        if bad.size:
            warnings.warn(f"dropping instruments {bad.tolist()} that vanish after partialling", stacklevel=2)
        kept = np.setdiff1d(np.arange(data.p), bad)
        if kept.size == 0:
            raise ValidationError("no instrument has positive variance after partialling")
        f_n, _ = normalize_instruments(f_t[:, kept])
        return cls(y_t, d_t, f_n, kept, gamma, c, None if grid is None else as_grid(grid, data.k_e))

    @property
    def n(self):
        return self.y_tilde.shape[0]

    @property
    def p(self):
        return self.f_tilde.shape[1]

    @property
    def k_e(self):
        return self.d_tilde.shape[1]

    @property
    def critical(self):
        return critical_value(self.n, self.p, self.gamma, self.c)

    def residuals(self, points):
        """Residual matrix of shape (n, G) for grid points of shape (G, k_e)."""
        return self.y_tilde[:, None] - self.d_tilde @ np.asarray(points, dtype=float).T


@dataclass
class ConfidenceRegion:
    """Grid points with their statistics and the acceptance decision.

    ``near_boundary`` marks points whose statistic is within a relative
    ``1e-9`` of the critical value, where the two inversion routes may
    legitimately disagree by rounding.
    """

    grid: np.ndarray
    stats: np.ndarray
    accepted: np.ndarray
    critical: float
    level: float
    touches_boundary: bool
    near_boundary: np.ndarray = field(repr=False)
    method: str = "sup-score"

    @property
    def points(self):
        return self.grid[self.accepted]

    @property
    def empty(self):
        return not self.accepted.any()


def as_grid(grid, k_e=1):
    """Coerce a grid to shape (G, k_e); a 1-D array is read as k_e = 1 points."""
    g = np.asarray(grid, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.ndim != 2 or g.shape[1] != k_e:
        raise ValidationError(f"grid must have shape (G, {k_e}), got {np.shape(grid)}")
    if g.shape[0] == 0:
        raise ValidationError("empty grid")
    if not np.all(np.isfinite(g)):
        raise ValidationError("grid contains non-finite values")
    return g


def product_grid(*axes):
    """Cartesian product of 1-D axes, shape (prod(len), len(axes))."""
    return np.array(list(itertools.product(*[np.asarray(a, dtype=float) for a in axes])))


def _score_parts(problem, R):
    f = problem.f_tilde
    num = np.abs(f.T @ R)
    den = np.sqrt((f**2).T @ (R**2) / problem.n)
    return num, den


def _degenerate_residual(R):
    rms = np.sqrt(np.mean(R**2, axis=0))
    return rms == 0


def sup_score_many(problem: SupScoreProblem, points):
    """Sup-score statistic at each row of ``points`` (shape (G, k_e))."""
    pts = as_grid(points, problem.k_e)
    R = problem.residuals(pts)
    dead = _degenerate_residual(R)
    if dead.any():
        raise NumericalError(f"degenerate residual at tested point {pts[np.argmax(dead)].tolist()}")
    num, den = _score_parts(problem, R)
    zero = den == 0
    if zero.any():
        # den == 0 forces num == 0 (Cauchy-Schwarz); skip those columns
        warnings.warn("instrument columns with zero score and zero variance skipped", stacklevel=2)
        ratio = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    else:
        ratio = num / den
    return ratio.max(axis=0)


def sup_score(problem: SupScoreProblem, a):
    """Sup-score statistic at a single point ``a`` (length k_e)."""
    return float(sup_score_many(problem, np.atleast_1d(np.asarray(a, dtype=float))[None, :])[0])


def _touches(grid, accepted):
    if not accepted.any():
        return False
    lo, hi = grid.min(axis=0), grid.max(axis=0)
    edge = np.any((grid == lo) | (grid == hi), axis=1)
    return bool(np.any(edge & accepted))


def _region(problem, grid, stats, accepted, method):
    crit = problem.critical
    near = np.abs(stats - crit) < NEAR_BOUNDARY * max(crit, 1e-300)
    return ConfidenceRegion(grid, stats, accepted, crit, 1 - problem.gamma, _touches(grid, accepted), near, method)


def _grid_of(problem, grid):
    grid = problem.grid if grid is None else grid
    if grid is None:
        raise ValidationError("no grid supplied")
    return as_grid(grid, problem.k_e)


def invert_region(problem: SupScoreProblem, grid=None):
    """Grid inversion of the sup-score test at level ``1 - problem.gamma``.

    Raises
    ------
    ValidationError
        If the grid is empty or missing.
    """
    grid = _grid_of(problem, grid)
    stats = sup_score_many(problem, grid)
    return _region(problem, grid, stats, stats <= problem.critical, "sup-score")


def inverse_lasso_region(problem: SupScoreProblem, grid=None):
    """Region of points where the inverse Lasso returns all-zero coefficients."""
    grid = _grid_of(problem, grid)
    crit = problem.critical
    n = problem.n
    lam = 2.0 * crit
    R = problem.residuals(grid)
    if _degenerate_residual(R).any():
        raise NumericalError("degenerate residual at tested point")
    stats = sup_score_many(problem, grid)
    accepted = np.empty(grid.shape[0], dtype=bool)
    for g in range(grid.shape[0]):
        r = R[:, g]
        load = np.sqrt(np.mean(problem.f_tilde**2 * r[:, None] ** 2, axis=0))
        live = load > 0
        plan = PenaltyPlan(lam, load[live], stage="inverse-lasso")
        fit = solve_weighted_lasso(problem.f_tilde[:, live], r, plan, intercept=False)
        accepted[g] = fit.support.size == 0
    return _region(problem, grid, stats, accepted, "inverse-lasso")


def regions_agree(r1: ConfidenceRegion, r2: ConfidenceRegion):
    """True if the two regions match away from flagged near-boundary points."""
    if r1.grid.shape != r2.grid.shape or not np.array_equal(r1.grid, r2.grid):
        return False
    carve = r1.near_boundary | r2.near_boundary
    return bool(np.array_equal(r1.accepted[~carve], r2.accepted[~carve]))


def sup_score_test(data: Dataset, a, *, gamma=0.05, c=1.1, intercept=True):
    """Reject ``alpha_1 = a`` at level ``gamma``? Returns ``(reject, stat, crit)``."""
    prob = SupScoreProblem.from_dataset(data, gamma=gamma, c=c, intercept=intercept)
    stat = sup_score(prob, a)
    crit = prob.critical
    return stat > crit, stat, crit
