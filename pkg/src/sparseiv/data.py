"""Data containers, partialling-out of controls, instrument normalization.

All moments use the 1/n convention, ``E_n[x] = sum(x) / n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from sparseiv.exceptions import ValidationError

RANK_TOL = 1e-10


def _as_matrix(x, n=None, name="array"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise ValidationError(f"{name} has {x.shape[0]} rows, expected {n}")
    return x


@dataclass(frozen=True)
class Dataset:
    """Outcome, regressors and instruments for a linear IV model.

    The regressor matrix is ``d = [d_e, w]``: the first ``k_e`` columns are
    endogenous, the remaining ``k_w`` columns are exogenous controls that
    instrument themselves.

    Parameters
    ----------
    y : ndarray of shape (n,)
    d_endog : ndarray of shape (n, k_e)
    f : ndarray of shape (n, p)
        Technical instruments (excluded from the structural equation).
    w : ndarray of shape (n, k_w), optional
    labels : dict, optional
        Column names with keys ``"y"``, ``"d"`` (length k_d) and ``"f"``.
    """

    y: np.ndarray
    d_endog: np.ndarray
    f: np.ndarray
    w: np.ndarray = None
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 1:
            raise ValidationError(f"y must be a vector, got shape {y.shape}")
        n = y.shape[0]
        if n < 2:
            raise ValidationError("need at least two observations")
        d_e = _as_matrix(self.d_endog, n, "d_endog")
        f = _as_matrix(self.f, n, "f")
        w = np.empty((n, 0)) if self.w is None else _as_matrix(self.w, n, "w")
        if d_e.shape[1] < 1:
            raise ValidationError("need at least one endogenous regressor")
        if f.shape[1] < 1:
            raise ValidationError("need at least one instrument")
        for name, arr in (("y", y), ("d_endog", d_e), ("f", f), ("w", w)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d_endog", d_e)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "w", w)
        labels = dict(self.labels)
        labels.setdefault("y", "y")
        labels.setdefault(
            "d",
            [f"d{j + 1}" for j in range(d_e.shape[1])]
            + [f"w{j + 1}" for j in range(w.shape[1])],
        )
        labels.setdefault("f", [f"f{j + 1}" for j in range(f.shape[1])])
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.f.shape[1]

    @property
    def k_e(self):
        return self.d_endog.shape[1]

    @property
    def k_w(self):
        return self.w.shape[1]

    @property
    def k_d(self):
        return self.k_e + self.k_w

    @property
    def d(self):
        """Full regressor matrix ``[d_e, w]``."""
        return np.hstack([self.d_endog, self.w])

    def subset(self, rows):
        """Dataset restricted to the given row indices."""
        rows = np.asarray(rows)
        return Dataset(
            self.y[rows], self.d_endog[rows], self.f[rows], self.w[rows], self.labels
        )

    def with_instruments(self, f, names=None):
        labels = dict(self.labels)
        labels["f"] = names if names is not None else [f"f{j + 1}" for j in range(np.shape(f)[1])]
        return Dataset(self.y, self.d_endog, f, self.w, labels)


@dataclass(frozen=True)
class PartialledData:
    """Residuals of ``y``, ``d_e`` and ``f`` after projecting out controls.

    ``coef_*`` hold the least-squares coefficients on the controls so that
    e.g. ``y == y_tilde + w @ coef_y``.
    """

    y_tilde: np.ndarray
    d_tilde: np.ndarray
    f_tilde: np.ndarray
    coef_y: np.ndarray
    coef_d: np.ndarray
    coef_f: np.ndarray

    @classmethod
    def from_dataset(cls, data: Dataset):
        ry, cy = _project(data.y, data.w)
        rd, cd = _project(data.d_endog, data.w)
        rf, cf = _project(data.f, data.w)
        return cls(ry, rd, rf, cy, cd, cf)


def _qr_controls(w):
    q, r, piv = scipy.linalg.qr(w, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = np.max(np.linalg.norm(w, axis=0)) if w.size else 0.0
    rank = int(np.sum(diag > RANK_TOL * scale)) if scale > 0 else 0
    if rank < w.shape[1]:
        dependent = sorted(int(j) for j in piv[rank:])
        raise ValidationError(
            f"control matrix is rank deficient; dependent columns: {dependent}"
        )
    return q, r, piv


def _project(u, w):
    u = np.asarray(u, dtype=float)
    if w is None or np.size(w) == 0:
        k = 0 if u.ndim == 1 else u.shape[1]
        return u.copy(), np.zeros((0,) if u.ndim == 1 else (0, k))
    w = _as_matrix(w, u.shape[0], "w")
    q, r, piv = _qr_controls(w)
    qtu = q.T @ u
    resid = u - q @ qtu
    coef_piv = scipy.linalg.solve_triangular(r, qtu)
    coef = np.empty_like(coef_piv)
    coef[piv] = coef_piv
    return resid, coef


def partial_out(u, w):
    """Residuals of ``u`` after least-squares projection on the columns of ``w``.

    Parameters
    ----------
    u : ndarray of shape (n,) or (n, m)
    w : ndarray of shape (n, k_w) or None
        Controls. Must have full column rank (checked with a column-pivoted
        QR, tolerance ``1e-10`` times the largest column norm). An empty or
        missing ``w`` returns ``u`` unchanged.

    Returns
    -------
    ndarray with the shape of ``u``.

    Raises
    ------
    ValidationError
        If ``w`` is rank deficient (the message lists the dependent columns)
        or row counts differ.
    """
    return _project(u, w)[0]


def normalize_instruments(f_tilde, tol=0.0):
    """Rescale columns so that ``E_n[f_j^2] = 1``.

    Returns ``(f_normalized, scale)`` with ``f_tilde == f_normalized * scale``.
    A column whose root mean square is ``<= tol`` raises ``ValidationError``.
    """
    f_tilde = _as_matrix(f_tilde, name="f_tilde")
    scale = np.sqrt(np.mean(f_tilde**2, axis=0))
    bad = np.flatnonzero(~(scale > tol))
    if bad.size:
        raise ValidationError(f"zero variance instrument, index {int(bad[0])}")
    return f_tilde / scale, scale


def degenerate_columns(f_tilde, f, rel_tol=1e-10):
    """Indices of columns of ``f_tilde`` that vanished relative to ``f``.

    Used after partialling out: a column lying (numerically) in the span of
    the controls has residual root mean square ``<= rel_tol`` times its
    original root mean square, or is exactly zero.
    """
    rms_t = np.sqrt(np.mean(np.asarray(f_tilde) ** 2, axis=0))
    rms = np.sqrt(np.mean(np.asarray(f) ** 2, axis=0))
    return np.flatnonzero((rms_t == 0) | (rms_t <= rel_tol * rms))


def unpenalized_block(w, intercept=True):
    """Controls plus a constant column unless ``w`` already spans constants."""
    n = w.shape[0]
    if not intercept:
        return w
    if w.shape[1]:
        ones = np.ones(n)
        resid = partial_out(ones, w)
        if np.sqrt(np.mean(resid**2)) <= 1e-10:
            return w
    return np.hstack([np.ones((n, 1)), w])
