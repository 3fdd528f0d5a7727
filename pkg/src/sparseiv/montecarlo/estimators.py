"""Per-replication estimators used by the simulation runner.

Each estimator is a function ``(ctx, y, beta0) -> Outcome``. Everything
that depends only on ``(d, f)`` (first stages, sample splits, random
instrument subsets) is cached on the replication context, so the same
estimator can be re-evaluated on shifted outcomes ``y + (b - beta) d`` when
tracing power curves.

``Outcome.stat`` is scaled so that the nominal 5% test rejects iff
``stat > 1``: ``|t| / z_.975`` for Wald tests and ``Lambda / Lambda_crit``
for the sup-score test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import chi2

from sparseiv.data import Dataset, unpenalized_block
from sparseiv.exceptions import ValidationError
from sparseiv.first_stage import (
    fallback_single_instrument,
    fit_first_stage,
    predict_optimal_instruments,
    replace_with_fallback,
    single_instrument_fit,
)
from sparseiv.iv import homo_vcov, iv_estimate, spec_test, split_sample_iv
from sparseiv.montecarlo.baselines import (
    augment_principal_components,
    estimator_2sls,
    estimator_kclass,
    loocv_ridge,
)
from sparseiv.weak_id import SupScoreProblem, sup_score

Z975 = float(-ndtri(0.025))
POLICIES = ("supscore", "infinite-ci")
STREAMS = {"subset": 1, "halves": 2}


@dataclass
class Outcome:
    estimate: float = math.nan
    se: float = math.nan
    stat: float = math.nan
    none: bool = False

    @property
    def reject(self):
        return self.stat > 1.0 if np.isfinite(self.stat) else False


@dataclass
class SimConfig:
    """Estimation settings shared by every replication."""

    c: float = 1.1
    gamma: float | None = None
    K: int = 15
    level: float = 0.05
    intercept: bool = False
    noselect_policy: str = "supscore"
    pca_components: int = 20
    spec_baseline: tuple = (0,)

    def __post_init__(self):
        if self.noselect_policy not in POLICIES:
            raise ValidationError(f"noselect_policy must be one of {POLICIES}")


@dataclass
class Context:
    """One replication's data plus caches of y-independent work."""

    data: Dataset
    seed: np.random.SeedSequence
    config: SimConfig
    cache: dict = field(default_factory=dict)

    def rng(self, stream):
        """Generator for a named auxiliary stream, independent of evaluation order."""
        key = STREAMS[stream]
        return np.random.default_rng(
            np.random.SeedSequence(self.seed.entropy, spawn_key=tuple(self.seed.spawn_key) + (key,))
        )

    def cached(self, key, fn):
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]

    def with_y(self, y):
        return Dataset(y, self.data.d_endog, self.data.f, self.data.w, self.data.labels)


def _wald(est, se, beta0):
    if not (np.isfinite(se) and se > 0):
        return math.nan
    return abs(est - beta0) / se / Z975


def _sup_stat(data: Dataset, beta0, cfg: SimConfig):
    prob = SupScoreProblem.from_dataset(data, gamma=cfg.level, c=cfg.c, intercept=cfg.intercept)
    return sup_score(prob, [beta0]) / prob.critical


def _no_selection(ctx, data, est, beta0):
    """Outcome when Lasso selected nothing: fallback point estimate plus the policy's test."""
    if ctx.config.noselect_policy == "supscore":
        return Outcome(est, math.nan, _sup_stat(data, beta0, ctx.config), True)
    return Outcome(est, math.nan, 0.0, True)


def _subset(ctx):
    """Random ``n - 1`` instruments when ``p >= n`` (drawn once per replication)."""

    def pick():
        n, p = ctx.data.n, ctx.data.p
        K = p if p < n - ctx.data.k_w else n - 1 - ctx.data.k_w
        if K >= p:
            return None
        return np.sort(ctx.rng("subset").choice(p, size=K, replace=False))

    return ctx.cached("subset", pick)


def est_2sls_all(ctx, y, beta0):
    e = estimator_2sls(ctx.with_y(y), _subset(ctx))
    b, se = e.alpha[0], e.se[0]
    return Outcome(b, se, _wald(b, se, beta0))


def _kclass_all(kind):
    def run(ctx, y, beta0):
        e = estimator_kclass(ctx.with_y(y), kind, instruments=_subset(ctx))
        b, se = e.alpha[0], e.se[0]
        return Outcome(b, se, _wald(b, se, beta0))

    return run


def _first_stage(ctx, key, f, method):
    cfg = ctx.config

    def run():
        data = ctx.data if f is None else ctx.data.with_instruments(f)
        fs = fit_first_stage(data, c=cfg.c, gamma=cfg.gamma, K=cfg.K, method=method, intercept=cfg.intercept)
        empty = fs.any_empty
        if empty:
            fs, _ = replace_with_fallback(fs, data)
        return data, fs, empty, predict_optimal_instruments(fs, data)

    return ctx.cached(key, run)


def _pca_f(ctx):
    return ctx.cached("pca", lambda: augment_principal_components(ctx.data.f, ctx.config.pca_components))


def _lasso_iv(method, pca=False):
    def run(ctx, y, beta0):
        f = _pca_f(ctx) if pca else None
        data, fs, empty, Dhat = _first_stage(ctx, ("fs", method, pca), f, method)
        yd = Dataset(y, data.d_endog, data.f, data.w)
        alpha = iv_estimate(Dhat, yd.d, y)
        if empty:
            return _no_selection(ctx, ctx.with_y(y), alpha[0], beta0)
        se = homo_vcov(Dhat, yd.d, y, alpha)[0, 0] ** 0.5
        return Outcome(alpha[0], se, _wald(alpha[0], se, beta0))

    return run


def _selected(fs):
    return np.unique(np.concatenate(fs.support)) if fs.support else np.zeros(0, dtype=int)


def est_post_lasso_f(ctx, y, beta0):
    data, fs, empty, Dhat = _first_stage(ctx, ("fs", "post-lasso", False), None, "post-lasso")
    yd = ctx.with_y(y)
    if empty:
        alpha = iv_estimate(Dhat, yd.d, y)
        return _no_selection(ctx, yd, alpha[0], beta0)
    e = estimator_kclass(yd, "full", instruments=_selected(fs))
    b, se = e.alpha[0], e.se[0]
    return Outcome(b, se, _wald(b, se, beta0))


def est_sup_score(ctx, y, beta0):
    return Outcome(math.nan, math.nan, _sup_stat(ctx.with_y(y), beta0, ctx.config))


def _halves(ctx):
    def split():
        n = ctx.data.n
        perm = ctx.rng("halves").permutation(n)
        n_a = -(-n // 2)
        return np.sort(perm[:n_a]), np.sort(perm[n_a:])

    return ctx.cached("halves", split)


def _ridge_half(ctx, fit_rows, use_rows):
    """Lasso first stage on ``use_rows`` with ridge predictions from ``fit_rows`` as an extra instrument."""
    cfg = ctx.config
    data = ctx.data
    b, mu, _, _ = loocv_ridge(data.f[fit_rows], data.d_endog[fit_rows, 0], intercept=cfg.intercept)
    ridge_pred = data.f[use_rows] @ b + mu
    f_aug = np.column_stack([data.f[use_rows], ridge_pred])
    part = Dataset(data.y[use_rows], data.d_endog[use_rows], f_aug, data.w[use_rows])
    fs = fit_first_stage(part, c=cfg.c, gamma=cfg.gamma, K=cfg.K, method="post-lasso", intercept=cfg.intercept)
    return part, fs


def _ridge_parts(ctx):
    def run():
        a, b = _halves(ctx)
        return {"A": _ridge_half(ctx, b, a), "B": _ridge_half(ctx, a, b)}

    return ctx.cached("ridge", run)


def _fallback_dhat(ctx):
    def run():
        data = ctx.data
        j = fallback_single_instrument(data)
        theta, beta = single_instrument_fit(data, j, 0, ctx.config.intercept)
        U = unpenalized_block(data.w, ctx.config.intercept)
        return np.column_stack([U @ theta + data.f @ beta, data.w])

    return ctx.cached("fallback", run)


def _ridge_split(fuller):
    def run(ctx, y, beta0):
        parts = _ridge_parts(ctx)
        idx = dict(zip("AB", _halves(ctx)))
        ests = {}
        for h, (part, fs) in parts.items():
            if fs.any_empty:
                continue
            ph = Dataset(y[idx[h]], part.d_endog, part.f, part.w)
            if fuller:
                e = estimator_kclass(ph, "full", instruments=_selected(fs))
                ests[h] = (e.alpha[0], e.se[0])
            else:
                Dhat = predict_optimal_instruments(fs, ph)
                alpha = iv_estimate(Dhat, ph.d, ph.y)
                ests[h] = (alpha[0], homo_vcov(Dhat, ph.d, ph.y, alpha)[0, 0] ** 0.5)
        if not ests:
            yd = ctx.with_y(y)
            alpha = iv_estimate(_fallback_dhat(ctx), yd.d, y)
            return _no_selection(ctx, yd, alpha[0], beta0)
        est, se = combine_weighted(ests)
        return Outcome(est, se, _wald(est, se, beta0))

    return run


def combine_weighted(ests):
    """Combine half estimates ``{"A": (b, s), "B": (b, s)}``.

    Two halves get weight ``w_A = s_B^2 / (s_A^2 + s_B^2)``; the combined
    standard error treats the halves as independent,
    ``sqrt(w_A^2 s_A^2 + w_B^2 s_B^2)``. A single half gets weight one.
    """
    if len(ests) == 1:
        (b, s), = ests.values()
        return b, s
    (ba, sa), (bb, sb) = ests["A"], ests["B"]
    wa = sb**2 / (sa**2 + sb**2)
    wb = 1 - wa
    return wa * ba + wb * bb, math.sqrt(wa**2 * sa**2 + wb**2 * sb**2)


def est_split_sample(ctx, y, beta0):
    cfg = ctx.config
    yd = ctx.with_y(y)
    r = split_sample_iv(yd, halves=_halves(ctx), c=cfg.c, gamma=cfg.gamma, K=cfg.K, intercept=cfg.intercept)
    b = r.alpha[0]
    if r.fallback:
        return _no_selection(ctx, yd, b, beta0)
    se = r.se[0]
    return Outcome(b, se, _wald(b, se, beta0))


def est_spec_test(ctx, y, beta0):
    """J test of the Post-Lasso estimate against 2SLS on the baseline instruments."""
    data, fs, empty, Dhat = _first_stage(ctx, ("fs", "post-lasso", False), None, "post-lasso")
    yd = ctx.with_y(y)
    if empty:
        return Outcome(none=True)
    alpha = iv_estimate(Dhat, yd.d, y)
    A = np.column_stack([yd.f[:, list(ctx.config.spec_baseline)], yd.w])
    res = spec_test(yd, A, Dhat, alpha)
    crit = float(_chi2_crit(res.k, ctx.config.level))
    return Outcome(math.nan, math.nan, res.J / crit)


def _chi2_crit(k, level):
    return chi2.ppf(1 - level, k)


ESTIMATORS = {
    "2sls": est_2sls_all,
    "liml": _kclass_all("liml"),
    "full": _kclass_all("full"),
    "lasso": _lasso_iv("lasso"),
    "post-lasso": _lasso_iv("post-lasso"),
    "post-lasso-f": est_post_lasso_f,
    "lasso-pca": _lasso_iv("lasso", pca=True),
    "post-lasso-pca": _lasso_iv("post-lasso", pca=True),
    "post-lasso-ridge": _ridge_split(False),
    "post-lasso-f-ridge": _ridge_split(True),
    "sup-score": est_sup_score,
    "split-sample": est_split_sample,
    "spec-test": est_spec_test,
}

DEFAULT_ESTIMATORS = (
    "2sls",
    "full",
    "post-lasso",
    "post-lasso-f",
    "post-lasso-ridge",
    "post-lasso-f-ridge",
    "sup-score",
)

# estimators whose point estimate is undefined (tests only)
TEST_ONLY = ("sup-score", "spec-test")
# estimators that can report an empty Lasso selection
SELECTING = (
    "lasso",
    "post-lasso",
    "post-lasso-f",
    "lasso-pca",
    "post-lasso-pca",
    "post-lasso-ridge",
    "post-lasso-f-ridge",
    "split-sample",
    "spec-test",
)
