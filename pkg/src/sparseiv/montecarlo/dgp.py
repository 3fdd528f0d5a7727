"""Simulation designs for the many-instrument IV model.

    y_i = beta d_i + e_i,    d_i = z_i' Pi + v_i,
    z_i ~ N(0, sigma2_z * Toeplitz(0.5^|j-h|)),  (e_i, v_i) bivariate normal.

``Pi = C * Pi_tilde`` with ``Pi_tilde`` either exponential
``(1, .7, .7^2, ...)`` or cut-off (``s`` ones then zeros). Two ways of
fixing instrument strength are supported:

* ``mu2``: choose ``C`` so that ``n Pi' Sigma_Z Pi / sigma2_v = mu2`` with
  ``sigma2_v = 1 - Pi' Sigma_Z Pi`` (unit variance of ``d``);
* ``fstar``: keep ``C = 1`` and set ``sigma2_v = n Pi' Sigma_Z Pi / (F* Pi' Pi)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from sparseiv.data import Dataset
from sparseiv.exceptions import ValidationError

DESIGNS = ("cutoff", "exponential")


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of one simulation design.

    Exactly one of ``mu2`` and ``fstar`` must be given.
    """

    n: int
    p: int = 100
    design: str = "cutoff"
    s: int = 5
    mu2: float | None = None
    fstar: float | None = None
    corr_ev: float = 0.6
    sigma2_e: float = 1.0
    sigma2_z: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise ValidationError("need n >= 2 and p >= 1")
        if self.design not in DESIGNS:
            raise ValidationError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.design == "cutoff" and not 1 <= self.s <= self.p:
            raise ValidationError(f"cut-off size s must lie in [1, p], got {self.s}")
        if (self.mu2 is None) == (self.fstar is None):
            raise ValidationError("give exactly one of mu2 and fstar")
        if not -1 < self.corr_ev < 1:
            raise ValidationError("corr_ev must lie in (-1, 1)")
        if not (self.sigma2_e > 0 and self.sigma2_z > 0):
            raise ValidationError("variances must be positive")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def pi_tilde(self):
        if self.design == "exponential":
            return 0.7 ** np.arange(self.p)
        out = np.zeros(self.p)
        out[: self.s] = 1.0
        return out

    def sigma_z(self):
        return self.sigma2_z * scipy.linalg.toeplitz(0.5 ** np.arange(self.p))

    def solve(self):
        """Return ``(Pi, sigma2_v, C)``."""
        pt = self.pi_tilde()
        S = self.sigma_z()
        q = float(pt @ S @ pt)
        if self.mu2 is not None:
            if not (np.isfinite(self.mu2) and self.mu2 >= 0):
                raise ValidationError(f"mu2 target must be finite and >= 0 (attainable range [0, inf)), got {self.mu2}")
            # n C^2 q / (1 - C^2 q) = mu2  <=>  C^2 q = mu2 / (n + mu2)
            C = math.sqrt(self.mu2 / (self.n + self.mu2) / q)
            Pi = C * pt
            sigma2_v = 1.0 - float(Pi @ S @ Pi)
        else:
            if not self.fstar > 0:
                raise ValidationError("fstar must be positive")
            C = 1.0
            Pi = pt
            sigma2_v = self.n * q / (self.fstar * float(pt @ pt))
        if not sigma2_v > 0:
            raise ValidationError("design implies nonpositive first-stage error variance")
        return Pi, sigma2_v, C

    def concentration(self):
        Pi, sigma2_v, _ = self.solve()
        return self.n * float(Pi @ self.sigma_z() @ Pi) / sigma2_v


@dataclass
class Draw:
    """One simulated sample with the population quantities behind it."""

    data: Dataset
    beta: float
    Pi: np.ndarray
    sigma2_v: float
    mu2: float
    e: np.ndarray
    v: np.ndarray


def gen_dgp(spec: DgpSpec, seed, *, invalid_shift=0.0):
    """Draw one sample.

    ``invalid_shift`` adds ``invalid_shift * z_1`` to the structural error,
    making the first instrument invalid (used to study the specification
    test's power).
    """
    rng = np.random.default_rng(seed)
    Pi, sigma2_v, _ = spec.solve()
    Lz = np.linalg.cholesky(spec.sigma_z())
    z = rng.standard_normal((spec.n, spec.p)) @ Lz.T
    sev = spec.corr_ev * math.sqrt(spec.sigma2_e * sigma2_v)
    Le = np.linalg.cholesky(np.array([[spec.sigma2_e, sev], [sev, sigma2_v]]))
    ev = rng.standard_normal((spec.n, 2)) @ Le.T
    e, v = ev[:, 0], ev[:, 1]
    d = z @ Pi + v
    y = spec.beta * d + e + invalid_shift * z[:, 0]
    mu2 = spec.n * float(Pi @ spec.sigma_z() @ Pi) / sigma2_v
    return Draw(Dataset(y, d, z), spec.beta, Pi, sigma2_v, mu2, e, v)
