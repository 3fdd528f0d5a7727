"""Command-line interface: ``sparseiv fit | region | simulate``.

Exit codes: 0 on success, 2 for usage or validation errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import re
import sys
from pathlib import Path

import jsonschema
import numpy as np

from sparseiv.data import Dataset, degenerate_columns, normalize_instruments, partial_out
from sparseiv.diagnostics import first_stage_wald, gram_moduli
from sparseiv.exceptions import NumericalError, SparseIVError, ValidationError
from sparseiv.iv import fit_iv, spec_test, split_sample_iv
from sparseiv.lasso import default_gamma
from sparseiv.schemas import (
    REGION_SCHEMA,
    REGION_SCHEMA_ID,
    REPORT_SCHEMA,
    REPORT_SCHEMA_ID,
    ROLES_SCHEMA,
    SIM_CONFIG_SCHEMA,
    TABLE_SCHEMA,
    TABLE_SCHEMA_ID,
)
from sparseiv.weak_id import SupScoreProblem, inverse_lasso_region, invert_region

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

DEFAULT_POWER_ESTIMATORS = ("post-lasso-f", "sup-score")
REGION_HALF_WIDTH = 10.0
REGION_POINTS = 201
POWER_POINTS = 21


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- input


def read_csv(path):
    """Parse a headed, comma-separated numeric file into ``(header, matrix)``.

    Raises
    ------
    ValidationError
        On a missing header, ragged rows, empty cells or non-numeric values;
        the message names the line and column.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            dup = sorted({h for h in header if header.count(h) > 1})
            raise ValidationError(f"{path}, line 1: duplicate column names {dup}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise ValidationError(f"{path}, line {line}: missing value in column {name!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(f"{path}, line {line}: non-numeric value {cell!r} in column {name!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}, line {line}: non-finite value in column {name!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return header, np.array(rows, dtype=float)


def _pointer(path):
    return "/" + "/".join(str(p) for p in path)


def _validate(doc, schema, what):
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        best = jsonschema.exceptions.best_match([exc]) or exc
        raise ValidationError(f"{what}: invalid at {_pointer(best.absolute_path)}: {best.message}") from None


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} {path}, line {exc.lineno}: {exc.msg}") from exc


def resolve_roles(roles, header):
    """Check a roles manifest against a CSV header and expand instrument patterns.

    Returns a dict with column lists for ``outcome``, ``endogenous``,
    ``exogenous`` (exogenous regressors and controls) and ``instruments``,
    plus the ``intercept`` flag.
    """
    _validate(roles, ROLES_SCHEMA, "roles")
    cols = set(header)
    inst = roles["instruments"]
    if isinstance(inst, dict):
        try:
            pat = re.compile(inst["pattern"])
        except re.error as exc:
            raise ValidationError(f"roles: bad instrument pattern: {exc}") from exc
        taken = {roles["outcome"], *roles["endogenous"], *roles.get("exogenous", []), *roles.get("controls", [])}
        inst = [h for h in header if pat.fullmatch(h) and h not in taken]
        if not inst:
            raise ValidationError(f"roles: instrument pattern {pat.pattern!r} matches no column")
    out = {
        "outcome": [roles["outcome"]],
        "endogenous": list(roles["endogenous"]),
        "exogenous": list(roles.get("exogenous", [])) + list(roles.get("controls", [])),
        "instruments": list(inst),
    }
    seen = {}
    for role, names in out.items():
        for name in names:
            if name not in cols:
                raise ValidationError(f"roles: column {name!r} ({role}) not found in the data header")
            if name in seen:
                raise ValidationError(f"roles: column {name!r} assigned to both {seen[name]} and {role}")
            seen[name] = role
    if "const" in seen and roles.get("intercept", True):
        raise ValidationError("roles: column name 'const' is reserved when intercept is on")
    out["intercept"] = bool(roles.get("intercept", True))
    return out


def load_dataset(data_path, roles_path):
    """Build a :class:`Dataset` from a CSV file and a roles manifest.

    With ``intercept`` on (the default) a ``const`` column is appended to
    the exogenous regressors, so downstream fits use ``intercept=False``.
    """
    header, X = read_csv(data_path)
    roles = resolve_roles(_load_json(roles_path, "roles"), header)
    idx = {h: j for j, h in enumerate(header)}

    def take(names):
        return X[:, [idx[c] for c in names]]

    w = take(roles["exogenous"])
    wnames = list(roles["exogenous"])
    if roles["intercept"]:
        w = np.hstack([w, np.ones((X.shape[0], 1))])
        wnames.append("const")
    labels = {"y": roles["outcome"][0], "d": roles["endogenous"] + wnames, "f": roles["instruments"]}
    data = Dataset(X[:, idx[roles["outcome"][0]]], take(roles["endogenous"]), take(roles["instruments"]), w, labels)
    return data, roles


def parse_grid(spec):
    """``"lo:hi:step"`` to an inclusive equispaced grid."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValidationError(f"grid {spec!r} must look like lo:hi:step")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ValidationError(f"grid {spec!r} has a non-numeric field") from None
    if not all(map(math.isfinite, (lo, hi, step))):
        raise ValidationError(f"grid {spec!r} has a non-finite field")
    if hi < lo:
        raise ValidationError(f"grid {spec!r}: hi < lo")
    if hi > lo and not step > 0:
        raise ValidationError(f"grid {spec!r}: step must be positive")
    count = 1 if hi == lo else int(math.floor((hi - lo) / step + 1e-9)) + 1
    if count > 10**6:
        raise ValidationError(f"grid {spec!r} has {count} points; at most 10^6 allowed")
    return lo + step * np.arange(count)


def parse_matrix(spec):
    """``"1,0;0,1"`` to a 2-D array."""
    try:
        rows = [[float(v) for v in r.split(",")] for r in spec.split(";")]
    except ValueError:
        raise ValidationError(f"matrix {spec!r} has a non-numeric entry") from None
    if len({len(r) for r in rows}) != 1:
        raise ValidationError(f"matrix {spec!r} has ragged rows")
    return np.array(rows)


def _gamma_arg(text):
    if text == "auto":
        return None
    try:
        g = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("gamma must be 'auto' or a number in (0, 1)") from None
    if not 0 < g < 1:
        raise argparse.ArgumentTypeError("gamma must lie in (0, 1)")
    return g


# ---------------------------------------------------------------- output


def sanitize(obj, reasons, default_reason="non-finite value", path=""):
    """Replace non-finite floats with ``None`` and record why at their JSON pointer."""
    if isinstance(obj, dict):
        return {k: sanitize(v, reasons, default_reason, f"{path}/{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v, reasons, default_reason, f"{path}/{i}") for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist(), reasons, default_reason, path)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        reason = default_reason
        for prefix, r in reasons.get("_prefix", {}).items():
            if path.startswith(prefix):
                reason = r
                break
        reasons.setdefault("_found", {})[path] = reason
        return None
    return obj


def _finish(doc, schema, prefix_reasons=None):
    reasons = {"_prefix": prefix_reasons or {}}
    clean = sanitize(doc, reasons)
    clean["null_reasons"] = reasons.get("_found", {})
    jsonschema.validate(clean, schema)
    return clean


def _write_json(doc, out):
    text = json.dumps(doc, indent=2, allow_nan=False) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _region_block(region, parameter=None):
    block = {
        "grid": region.grid[:, 0] if region.grid.shape[1] == 1 else region.grid,
        "stats": region.stats,
        "accepted": region.accepted,
        "accepted_points": region.points[:, 0] if region.grid.shape[1] == 1 else region.points,
        "near_boundary": region.near_boundary,
        "critical": region.critical,
        "level": region.level,
        "touches_boundary": region.touches_boundary,
        "method": region.method,
    }
    if parameter is not None:
        block["parameter"] = parameter
    return block


# ---------------------------------------------------------------- fit


def _wald_blocks(data, fs):
    """First-stage Wald and F statistics on each equation's selected instruments."""
    f_t = partial_out(data.f, data.w)
    d_t = partial_out(data.d_endog, data.w)
    out = []
    for l, sup in enumerate(fs.support):
        sup = np.asarray(sup, dtype=int)
        if sup.size == 0:
            out.append({"W": math.nan, "F": math.nan, "instruments": 0})
            continue
        Z = f_t[:, sup]
        Pi, *_ = np.linalg.lstsq(Z, d_t[:, l], rcond=None)
        resid = d_t[:, l] - Z @ Pi
        dof = data.n - sup.size - data.k_w
        if dof <= 0 or not float(resid @ resid) > 0:
            out.append({"W": math.nan, "F": math.nan, "instruments": int(sup.size)})
            continue
        W, F = first_stage_wald(Pi, Z, float(resid @ resid) / dof)
        out.append({"W": W, "F": F, "instruments": int(sup.size)})
    return out


def _diagnostics_block(data, fs, c, seed):
    f_t = partial_out(data.f, data.w)
    keep = np.setdiff1d(np.arange(data.p), degenerate_columns(f_t, data.f))
    fn, _ = normalize_instruments(f_t[:, keep])
    M = fn.T @ fn / data.n
    M = 0.5 * (M + M.T)
    s = max(1, max(len(sup) for sup in fs.support))
    s = min(s, M.shape[0])
    C = (c + 1.0) / (c - 1.0)
    gm = gram_moduli(M, s, C, ms=(s,), seed=seed)
    re_ = gm.restricted
    return {
        "s": s,
        "C": C,
        "restricted_eigenvalue": {"kappa": re_.kappa, "mode": re_.mode, "upper_bound": re_.upper_bound},
        "sparse_eigenvalues": [
            {"m": e.m, "phi_min": e.phi_min, "phi_max": e.phi_max, "mode": e.mode} for e in gm.sparse
        ],
    }


def _default_region_grid(alpha, se):
    if not (math.isfinite(alpha) and math.isfinite(se) and se > 0):
        raise NumericalError("no finite fallback estimate to centre the region grid; pass --grid")
    return np.linspace(alpha - REGION_HALF_WIDTH * se, alpha + REGION_HALF_WIDTH * se, REGION_POINTS)


def cmd_fit(args):
    data, roles = load_dataset(args.data, args.roles)
    gamma = args.gamma
    gamma_used = default_gamma(data.n, data.p) if gamma is None else gamma
    est = fit_iv(
        data, method=args.method, vcov=args.vcov, c=args.c, gamma=gamma, K=args.iterations, intercept=False
    )
    fs = est.first_stage
    names = data.labels["d"]
    fnames = data.labels["f"]
    equations = []
    walds = _wald_blocks(data, fs)
    for l in range(data.k_e):
        sel = [fnames[j] for j in fs.support[l]]
        eq = {
            "endogenous": names[l],
            "selected": sel,
            "iterations": int(fs.iterations[l]),
            "empty": bool(fs.empty[l]),
            "wald": walds[l]["W"],
            "F": walds[l]["F"],
        }
        if est.fallback[l] is not None:
            eq["fallback_instrument"] = fnames[est.fallback[l]]
        equations.append(eq)
    report = {
        "schema": REPORT_SCHEMA_ID,
        "command": "fit",
        "settings": {
            "method": args.method,
            "c": args.c,
            "gamma": gamma_used,
            "gamma_rule": "0.1/log(max(p,n))" if gamma is None else "user",
            "K": args.iterations,
            "vcov": args.vcov,
            "n": data.n,
            "p": data.p,
            "intercept": roles["intercept"],
        },
        "estimates": {
            "names": names,
            "alpha": est.alpha,
            "se": est.se,
            "vcov": est.vcov,
            "mode": est.mode,
        },
        "first_stage": {
            "lambda": fs.lam,
            "equations": equations,
            "dropped": [fnames[j] for j in np.asarray(fs.dropped, dtype=int)],
        },
        "weak_id_route": bool(est.weak_id_route),
        "region": None,
        "diagnostics": None,
        "spec_test": None,
        "split_sample": None,
        "notes": list(est.notes),
    }
    prefix = {}
    if est.weak_id_route:
        prefix["/estimates"] = "weak identification: use the region block"
        if data.k_e == 1:
            if args.grid is not None:
                grid = parse_grid(args.grid)
            else:
                grid = _default_region_grid(float(est.alpha[0]), float(est.se[0]))
                report["notes"].append("region grid: fallback estimate +/- 10 standard errors, 201 points")
            prob = SupScoreProblem.from_dataset(data, gamma=1 - args.level, c=args.c, grid=grid, intercept=False)
            report["region"] = _region_block(invert_region(prob), names[0])
        else:
            report["notes"].append("weak identification with several endogenous regressors: run `region` with a product grid")
    if args.diagnostics:
        report["diagnostics"] = _diagnostics_block(data, fs, args.c, args.seed)
    if args.spec_test:
        if not args.baseline_cols:
            raise ValidationError("--spec-test needs --baseline-cols")
        base = [c.strip() for c in args.baseline_cols.split(",")]
        missing = [c for c in base if c not in fnames]
        if missing:
            raise ValidationError(f"baseline column {missing[0]!r} is not an instrument")
        A = np.hstack([data.f[:, [fnames.index(c) for c in base]], data.w])
        # default: contrast the endogenous coefficients only; with a constant in
        # both estimators the full contrast variance is singular
        R = parse_matrix(args.R) if args.R else np.eye(data.k_e, data.k_d)
        if est.weak_id_route:
            raise NumericalError("specification test needs a well-identified estimate")
        res = spec_test(data, A, est.Dhat, est.alpha, R)
        report["spec_test"] = {
            "J": res.J,
            "df": res.k,
            "pvalue": res.pvalue,
            "reject_05": bool(res.reject(0.05)),
            "baseline": base,
            "alpha_baseline": res.alpha_baseline,
        }
    if args.split_sample:
        ss = split_sample_iv(
            data, seed=args.seed, method=args.method, c=args.c, gamma=gamma, K=args.iterations, intercept=False
        )
        report["split_sample"] = {
            "seed": args.seed,
            "alpha": ss.alpha,
            "se": ss.se,
            "alpha_a": ss.alpha_a,
            "alpha_b": ss.alpha_b,
            "n_a": len(ss.halves[0]),
            "n_b": len(ss.halves[1]),
            "fallback_halves": sorted(ss.fallback),
        }
    _write_json(_finish(report, REPORT_SCHEMA, prefix), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- region


def cmd_region(args):
    data, _ = load_dataset(args.data, args.roles)
    if data.k_e != 1:
        raise ValidationError("the lo:hi:step grid shorthand needs exactly one endogenous regressor")
    grid = parse_grid(args.grid)
    if not 0 < args.level < 1:
        raise ValidationError("level must lie in (0, 1)")
    prob = SupScoreProblem.from_dataset(data, gamma=1 - args.level, c=args.c, grid=grid, intercept=False)
    region = invert_region(prob) if args.method == "sup-score" else inverse_lasso_region(prob)
    doc = {
        "schema": REGION_SCHEMA_ID,
        "command": "region",
        "region": _region_block(region, data.labels["d"][0]),
        "settings": {"level": args.level, "c": args.c, "grid": args.grid, "method": args.method, "n": data.n, "p": prob.p},
    }
    _write_json(_finish(doc, REGION_SCHEMA), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _power_grid(spec):
    """``beta +/- 10`` asymptotic null standard errors of the infeasible optimal IV."""
    _, sigma2_v, _ = spec.solve()
    mu2 = spec.concentration()
    if not mu2 > 0:
        raise ValidationError("default power grid needs mu2 > 0; pass --beta-grid")
    se = math.sqrt(spec.sigma2_e / (mu2 * sigma2_v))
    return spec.beta + np.linspace(-REGION_HALF_WIDTH, REGION_HALF_WIDTH, POWER_POINTS) * se


def cmd_simulate(args):
    from sparseiv.montecarlo import DgpSpec, SimConfig, simulate
    from sparseiv.montecarlo.estimators import DEFAULT_ESTIMATORS, ESTIMATORS

    cfg = _load_json(args.config, "config")
    _validate(cfg, SIM_CONFIG_SCHEMA, "config")
    est_cfg = dict(cfg.get("estimation", {}))
    if args.noselect_policy is not None:
        est_cfg["noselect_policy"] = args.noselect_policy
    dgp_keys = {"n", "p", "design", "s", "mu2", "fstar", "corr_ev", "sigma2_e", "sigma2_z", "beta"}
    spec = DgpSpec.from_dict({k: v for k, v in cfg.items() if k in dgp_keys})
    estimators = tuple(cfg.get("estimators", DEFAULT_ESTIMATORS))
    for i, e in enumerate(estimators):
        if e not in ESTIMATORS:
            raise ValidationError(f"config: invalid at /estimators/{i}: unknown estimator {e!r}")
    power_est, grid = (), None
    if args.power:
        power_est = tuple(cfg.get("power_estimators", DEFAULT_POWER_ESTIMATORS))
        for i, e in enumerate(power_est):
            if e not in ESTIMATORS:
                raise ValidationError(f"config: invalid at /power_estimators/{i}: unknown estimator {e!r}")
        grid = parse_grid(args.beta_grid) if args.beta_grid else _power_grid(spec)
    elif args.beta_grid:
        raise ValidationError("--beta-grid needs --power")
    table, curve = simulate(
        spec,
        estimators,
        args.reps,
        args.seed,
        threads=args.threads,
        config=SimConfig(**est_cfg),
        power_estimators=power_est,
        beta_grid=grid,
        invalid_shift=float(cfg.get("invalid_shift", 0.0)),
    )
    out = Path(args.out)
    out.write_text(table.to_csv(), encoding="utf-8", newline="")
    doc = {
        "schema": TABLE_SCHEMA_ID,
        "spec": table.spec,
        "base_seed": table.base_seed,
        "R": args.reps,
        "estimation": est_cfg,
        "rows": table.to_dict()["rows"],
    }
    if curve is not None:
        doc["power"] = {
            "beta_grid": curve.beta_grid,
            "power": curve.power,
            "critical": curve.critical,
            "R": curve.R,
        }
        out.with_name(out.stem + "_power.csv").write_text(curve.to_csv(), encoding="utf-8", newline="")
    _write_json(_finish(doc, TABLE_SCHEMA, {"/rows": "undefined for this estimator or no successful replication"}), str(out.with_suffix(".json")))
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser():
    p = _Parser(prog="sparseiv", description="IV estimation with many instruments via Lasso first stages.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="estimate the structural coefficients")
    f.add_argument("--data", required=True)
    f.add_argument("--roles", required=True)
    f.add_argument("--method", choices=("lasso", "post-lasso"), default="post-lasso")
    f.add_argument("--c", type=float, default=1.1)
    f.add_argument("--gamma", type=_gamma_arg, default=None, help="'auto' (0.1/log(max(p,n))) or a number")
    f.add_argument("--iterations", type=int, default=15, help="penalized fits per equation (K)")
    f.add_argument("--vcov", choices=("hetero", "homo"), default="hetero")
    f.add_argument("--split-sample", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--diagnostics", action="store_true")
    f.add_argument("--spec-test", action="store_true")
    f.add_argument("--baseline-cols", help="comma-separated instrument names for the baseline estimator")
    f.add_argument("--R", help="contrast rows, e.g. '1,0;0,1'")
    f.add_argument("--grid", help="lo:hi:step grid for the weak-identification region")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--out", default="-")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("region", help="sup-score confidence region by grid inversion")
    r.add_argument("--data", required=True)
    r.add_argument("--roles", required=True)
    r.add_argument("--grid", required=True, help="lo:hi:step")
    r.add_argument("--level", type=float, default=0.95)
    r.add_argument("--c", type=float, default=1.1)
    r.add_argument("--method", choices=("sup-score", "inverse-lasso"), default="sup-score")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_region)

    s = sub.add_parser("simulate", help="Monte Carlo table (and size-adjusted power curves)")
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--threads", type=int, default=None, help="worker processes (default: $SPARSEIV_THREADS or 1)")
    s.add_argument("--out", required=True)
    s.add_argument("--power", action="store_true")
    s.add_argument("--beta-grid", help="lo:hi:step of true coefficients for power curves")
    s.add_argument("--noselect-policy", choices=("supscore", "infinite-ci"), default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"sparseiv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"sparseiv {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SparseIVError as exc:
        print(f"sparseiv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
