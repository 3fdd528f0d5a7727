"""Replication runner, metric tables and size-adjusted power curves.

Replication ``r`` draws its data from ``SeedSequence([base_seed, r])``, so
results do not depend on how replications are scheduled across worker
processes. Workers pin BLAS to one thread; aggregation folds over the
replication index in order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from sparseiv.exceptions import SparseIVError, ValidationError
from sparseiv.montecarlo.dgp import DgpSpec, gen_dgp
from sparseiv.montecarlo.estimators import (
    ESTIMATORS,
    SELECTING,
    TEST_ONLY,
    Context,
    SimConfig,
)

logger = logging.getLogger(__name__)

SQ_ERR_CAP = 1e12
CSV_COLUMNS = ("estimator", "R", "med_bias", "mad", "rp05", "rmse", "n0")
MIN_POWER_REPS = 100


@dataclass
class MetricsRow:
    estimator: str
    R: int
    med_bias: float
    mad: float
    rp05: float
    rmse: float
    n0: int
    failed: int = 0


@dataclass
class MetricsTable:
    """One row per estimator; see :func:`metrics_from_outcomes` for definitions."""

    rows: list
    spec: dict = field(default_factory=dict)
    base_seed: int = 0

    def row(self, name):
        for r in self.rows:
            if r.estimator == name:
                return r
        raise KeyError(name)

    def to_csv(self):
        """CSV text with columns ``estimator,R,med_bias,mad,rp05,rmse,n0``.

        Undefined values (e.g. bias of a pure test) are written as empty
        fields. Floats use ``repr`` so the text is exact and reproducible.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_dict(self):
        return {"spec": self.spec, "base_seed": self.base_seed, "rows": [asdict(r) for r in self.rows]}


def _fmt(x):
    if isinstance(x, float):
        return "" if not math.isfinite(x) else repr(x)
    return str(x)


@dataclass
class PowerCurve:
    """Size-adjusted rejection frequencies on a grid of true coefficients."""

    beta_grid: np.ndarray
    power: dict
    critical: dict
    R: dict

    def to_csv(self):
        """Long format: ``estimator,beta,power``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("estimator", "beta", "power"))
        for name, pw in self.power.items():
            for b, v in zip(self.beta_grid, pw):
                w.writerow((name, repr(float(b)), _fmt(float(v))))
        return buf.getvalue()


def replication_seeds(base_seed, r):
    """Independent ``(data, estimation)`` seed sequences for replication ``r``."""
    root = np.random.SeedSequence([int(base_seed), int(r)])
    return (
        np.random.SeedSequence(root.entropy, spawn_key=(0,)),
        np.random.SeedSequence(root.entropy, spawn_key=(1,)),
    )


@dataclass
class _Job:
    spec: DgpSpec
    estimators: tuple
    config: SimConfig
    base_seed: int
    power_estimators: tuple = ()
    beta_grid: np.ndarray | None = None
    invalid_shift: float = 0.0


def _one(job: _Job, r):
    """Run replication ``r``; returns per-estimator outcome tuples and power statistics."""
    dseed, eseed = replication_seeds(job.base_seed, r)
    draw = gen_dgp(job.spec, dseed, invalid_shift=job.invalid_shift)
    ctx = Context(draw.data, eseed, job.config)
    y, d, beta = draw.data.y, draw.data.d_endog[:, 0], draw.beta
    out = {}
    for name in job.estimators:
        try:
            o = ESTIMATORS[name](ctx, y, beta)
            out[name] = (float(o.estimate), float(o.se), float(o.stat), bool(o.none))
        except (SparseIVError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.debug("replication %d, %s failed: %s", r, name, exc)
            out[name] = None
    power = {}
    for name in job.power_estimators:
        stats = np.full(len(job.beta_grid) + 1, np.nan)
        for k, b in enumerate([beta, *job.beta_grid]):
            try:
                stats[k] = ESTIMATORS[name](ctx, y + (b - beta) * d, beta).stat
            except (SparseIVError, np.linalg.LinAlgError, FloatingPointError):
                pass
        power[name] = stats
    return out, power


_POOL_LIMITER = None


def _init_worker():
    global _POOL_LIMITER
    _POOL_LIMITER = threadpool_limits(1)


def _run_chunk(args):
    job, rs = args
    return [_one(job, r) for r in rs]


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("SPARSEIV_THREADS")
        threads = int(env) if env else 1
    if threads < 1:
        raise ValidationError("threads must be at least 1")
    return int(threads)


def _collect(job: _Job, R, threads):
    if R < 1:
        raise ValidationError("R must be at least 1")
    unknown = [e for e in (*job.estimators, *job.power_estimators) if e not in ESTIMATORS]
    if unknown:
        raise ValidationError(f"unknown estimators {unknown}; choose from {sorted(ESTIMATORS)}")
    threads = resolve_threads(threads)
    if threads == 1:
        with threadpool_limits(1):
            return [_one(job, r) for r in range(R)]
    chunks = [list(range(R))[i::threads] for i in range(threads)]
    chunks = [c for c in chunks if c]
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker) as ex:
        parts = list(ex.map(_run_chunk, [(job, c) for c in chunks]))
    # reassemble in replication order
    results = [None] * R
    for c, part in zip(chunks, parts):
        for r, res in zip(c, part):
            results[r] = res
    return results


def metrics_from_outcomes(name, outcomes, beta, policy="supscore"):
    """Aggregate one estimator's replications into a :class:`MetricsRow`.

    ``outcomes`` holds ``(estimate, se, stat, none)`` tuples or ``None`` for
    failed replications. Med.Bias and MAD are the median of ``est - beta``
    and of ``|est - beta|``; RMSE truncates squared errors at ``1e12``;
    rp05 is the share of replications whose test rejects. Under the
    ``"infinite-ci"`` policy, replications without selected instruments are
    dropped from the point-estimate metrics and never reject.
    """
    ok = [o for o in outcomes if o is not None]
    failed = len(outcomes) - len(ok)
    est = np.array([o[0] for o in ok])
    stat = np.array([o[2] for o in ok])
    none = np.array([o[3] for o in ok], dtype=bool)
    n0 = int(none.sum()) if name in SELECTING else 0
    if name in TEST_ONLY or not ok:
        mb = mad = rmse = math.nan
    else:
        keep = ~none if policy == "infinite-ci" else np.ones(len(ok), dtype=bool)
        err = est[keep] - beta
        err = err[np.isfinite(err)]
        if err.size:
            mb = float(np.median(err))
            mad = float(np.median(np.abs(err)))
            rmse = float(math.sqrt(np.mean(np.minimum(err**2, SQ_ERR_CAP))))
        else:
            mb = mad = rmse = math.nan
    finite = np.isfinite(stat)
    rp = float(np.mean(stat[finite] > 1.0)) if finite.any() else math.nan
    return MetricsRow(name, len(ok), mb, mad, rp, rmse, n0, failed)


def run_replications(
    spec: DgpSpec,
    estimators=None,
    R=500,
    base_seed=0,
    *,
    threads=None,
    config: SimConfig | None = None,
    invalid_shift=0.0,
):
    """Simulate ``R`` samples and tabulate each estimator's performance.

    Returns
    -------
    MetricsTable
    """
    from sparseiv.montecarlo.estimators import DEFAULT_ESTIMATORS

    config = config or SimConfig()
    estimators = tuple(estimators or DEFAULT_ESTIMATORS)
    job = _Job(spec, estimators, config, int(base_seed), invalid_shift=invalid_shift)
    results = _collect(job, R, threads)
    rows = [
        metrics_from_outcomes(name, [res[0][name] for res in results], spec.beta, config.noselect_policy)
        for name in estimators
    ]
    return MetricsTable(rows, spec.to_dict(), int(base_seed))


def size_adjusted(null_stats, alt_stats):
    """Empirical 5% critical value from null statistics and the implied power.

    The critical value is the ``ceil(0.95 R)``-th smallest null statistic,
    so that exactly ``R - ceil(0.95 R)`` null statistics exceed it (5% when
    ``0.95 R`` is an integer and there are no ties).

    Parameters
    ----------
    null_stats : ndarray of shape (R,)
    alt_stats : ndarray of shape (R, G)
    """
    null_stats = np.asarray(null_stats, dtype=float)
    alt_stats = np.asarray(alt_stats, dtype=float)
    ok = np.isfinite(null_stats) & np.all(np.isfinite(alt_stats), axis=1)
    R = int(ok.sum())
    if R < MIN_POWER_REPS:
        warnings.warn(f"only {R} usable replications; the empirical 95th percentile is unstable", stacklevel=2)
    if R == 0:
        return math.nan, np.full(alt_stats.shape[1], np.nan), 0
    srt = np.sort(null_stats[ok])
    crit = srt[math.ceil(0.95 * R) - 1]
    return float(crit), np.mean(alt_stats[ok] > crit, axis=0), R


def simulate(
    spec: DgpSpec,
    estimators=None,
    R=500,
    base_seed=0,
    *,
    threads=None,
    config: SimConfig | None = None,
    power_estimators=(),
    beta_grid=None,
    invalid_shift=0.0,
):
    """Metrics table plus (optionally) size-adjusted power curves in one pass.

    Power for estimator ``e`` at grid value ``b`` is the frequency with
    which the size-adjusted test rejects ``beta = spec.beta`` when the data
    are generated with true coefficient ``b``. Alternatives reuse each
    replication's draws: ``y_b = y + (b - beta) d``.
    """
    from sparseiv.montecarlo.estimators import DEFAULT_ESTIMATORS

    config = config or SimConfig()
    estimators = tuple(estimators or DEFAULT_ESTIMATORS)
    power_estimators = tuple(power_estimators)
    grid = None if beta_grid is None else np.asarray(beta_grid, dtype=float)
    if power_estimators and (grid is None or grid.size == 0):
        raise ValidationError("power curves need a nonempty beta grid")
    job = _Job(spec, estimators, config, int(base_seed), power_estimators, grid, invalid_shift)
    results = _collect(job, R, threads)
    rows = [
        metrics_from_outcomes(name, [res[0][name] for res in results], spec.beta, config.noselect_policy)
        for name in estimators
    ]
    table = MetricsTable(rows, spec.to_dict(), int(base_seed))
    curve = None
    if power_estimators:
        power, crit, reps = {}, {}, {}
        for name in power_estimators:
            S = np.array([res[1][name] for res in results])
            crit[name], power[name], reps[name] = size_adjusted(S[:, 0], S[:, 1:])
        curve = PowerCurve(grid, power, crit, reps)
    return table, curve


def size_adjusted_power(spec: DgpSpec, estimator, beta_grid, R=500, base_seed=0, **kw):
    """Size-adjusted power curve of one estimator's test on ``beta_grid``."""
    _, curve = simulate(spec, (), R, base_seed, power_estimators=(estimator,), beta_grid=beta_grid, **kw)
    return curve
