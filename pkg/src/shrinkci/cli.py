"""Command-line front end: CSV in, CSV out.

Subcommands: ``fit`` (per-unit intervals for a CSV of estimates), ``cva``
(robust critical values), ``curves`` (critical-value curves over a moment
grid), ``simulate`` (Monte Carlo coverage study), ``power`` (average-power
grid).  Exit codes: 0 success, 2 input/schema problem, 3 numeric failure,
4 bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np
from scipy.special import ndtri

from shrinkci import moments as mom
from shrinkci import pipeline as pl
from shrinkci import simulation as sim
from shrinkci import worstcase as wc

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4

WORKERS_ENV = "SHRINKCI_WORKERS"


class SchemaError(Exception):
    """Malformed input file; message names the column and line."""


class ConfigError(Exception):
    """Inconsistent or unparseable configuration."""


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                out[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def _apply_config_defaults(args: argparse.Namespace, argv: list[str]):
    """Config-file values fill in anything the flags left at default."""
    if not getattr(args, "config", None):
        return
    values = _read_config_file(args.config)
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in values.items():
        if not hasattr(args, key):
            raise ConfigError(f"unknown config key {key!r}")
        if key in given:
            continue  # explicit flags win
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, value.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(value))
        elif isinstance(current, float):
            setattr(args, key, float(value))
        else:
            setattr(args, key, value)


def _read_units_csv(path: str) -> list[mom.UnitRecord]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot open input file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        cols = reader.fieldnames or []
        for required in ("y", "se"):
            if required not in cols:
                raise SchemaError(f"{path}: missing required column '{required}'")
        xcols = sorted(
            (c for c in cols if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        records = []
        for lineno, row in enumerate(reader, start=2):
            def grab(col):
                raw = row.get(col)
                if raw is None or raw == "":
                    raise SchemaError(f"{path}: line {lineno}: missing value in column '{col}'")
                try:
                    return float(raw)
                except ValueError as exc:
                    raise SchemaError(
                        f"{path}: line {lineno}: column '{col}': not a number: {raw!r}"
                    ) from exc

            x = (1.0, *(grab(c) for c in xcols))
            omega = grab("weight") if "weight" in cols else 1.0
            try:
                records.append(
                    mom.UnitRecord(y=grab("y"), sigma=grab("se"), x=x, omega=omega)
                )
            except ValueError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from exc
    if not records:
        raise SchemaError(f"{path}: no data rows")
    return records


def _write_csv(path: str, header_comments: list[str], colnames: list[str], rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(colnames)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _fmt_array(arr) -> str:
    return ";".join(repr(float(v)) for v in arr)


def cmd_fit(args) -> int:
    data = _read_units_csv(args.input)
    weights = "record" if any(u.omega != 1.0 for u in data) else args.weights
    res = pl.fit(
        data,
        alpha=args.alpha,
        method=args.method,
        moment_variant=args.moments,
        weights=weights,
        neighbors=args.nn_j,
    )
    est = res.moments
    header = [
        f"alpha={args.alpha}",
        f"method={args.method}",
        f"moments={args.moments}",
        f"mu2={est.mu2!r}",
        f"kappa={est.kappa!r}",
        f"delta={_fmt_array(est.delta)}",
    ]
    if est.neighbors is not None:
        header.append(f"nn_j={est.neighbors}")
    cols = [
        "theta_hat",
        "w_eb",
        "cva",
        "lower",
        "upper",
        "half_length",
        "method",
        "param_max_noncov",
        "rule_of_thumb_ok",
        "error",
    ]
    rows = [
        [
            o.theta_hat,
            o.w_eb,
            o.cva,
            o.lower,
            o.upper,
            o.half_length,
            o.method,
            o.param_max_noncov,
            int(o.rule_of_thumb_ok),
            o.error or "",
        ]
        for o in res.outputs
    ]
    _write_csv(args.output, header, cols, rows)
    return EXIT_OK


def cmd_cva(args) -> int:
    try:
        m2_values = [float(v) for v in args.m2.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"--m2 expects comma-separated numbers: {exc}") from exc
    if not m2_values:
        raise ConfigError("--m2 must list at least one value")
    rows = []
    for m2 in m2_values:
        res = wc.critical_value(wc.MomentConstraints(m2, args.kappa), args.alpha)
        rows.append([m2, args.kappa if args.kappa is not None else math.inf, res.chi, res.noncoverage])
    _write_csv(args.output, [f"alpha={args.alpha}"], ["m2", "kappa", "cva", "noncoverage"], rows)
    return EXIT_OK


def cmd_curves(args) -> int:
    kappas = [float(v) for v in args.kappas.split(",") if v] if args.kappas else []
    m2_grid = np.geomspace(args.m2_min, args.m2_max, args.points)
    m2_grid = np.concatenate([[0.0], m2_grid])
    z = float(ndtri(1.0 - args.alpha / 2.0))
    rows = []
    for kap in [*kappas, None]:
        chi = wc.critical_values(m2_grid, kappa=kap, alpha=args.alpha)
        for m2, c in zip(m2_grid, chi):
            rows.append(
                [
                    float(m2),
                    kap if kap is not None else math.inf,
                    float(c),
                    z * math.sqrt(1.0 + m2),
                ]
            )
    _write_csv(
        args.output,
        [f"alpha={args.alpha}"],
        ["m2", "kappa", "cva", "cva_parametric"],
        rows,
    )
    return EXIT_OK


def _build_designs(args) -> list:
    if args.het_input:
        th, se = sim.load_calibration_csv(args.het_input)
        snrs = [float(v) for v in args.snr.split(",") if v]
        return [sim.HeteroskedasticDesign(th, se, snr, n=args.n) for snr in snrs]
    kinds = [k for k in args.theta_kinds.split(",") if k]
    snrs = [float(v) for v in args.snr.split(",") if v]
    t = math.inf if args.t in ("inf", "oo") else float(args.t)
    designs = []
    for kind in kinds:
        for snr in snrs:
            designs.append(
                sim.PanelDesign(
                    n=args.n,
                    t=t,
                    err=args.errors,
                    snr=snr,
                    theta=sim.ThetaDistribution(kind, snr, args.alpha),
                )
            )
    return designs


def cmd_simulate(args) -> int:
    designs = _build_designs(args)
    methods = [m for m in args.methods.split(",") if m]
    report = sim.run_study(
        designs,
        methods=methods,
        reps=args.reps,
        workers=args.workers,
        master_seed=args.seed,
        alpha=args.alpha,
    )
    with open(args.output, "w", newline="", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    return EXIT_OK


def cmd_power(args) -> int:
    ds = np.linspace(0.0, args.d_max, args.d_steps)
    ws = np.linspace(args.w_min, args.w_max, args.w_steps)
    rows = []
    for w in ws:
        for d in ds:
            robust, ztest = pl.average_power(float(d), float(w), args.alpha)
            rows.append([float(d), float(w), robust, ztest, robust - ztest])
    _write_csv(
        args.output,
        [f"alpha={args.alpha}", "power of robust-interval test vs z-test"],
        ["d", "w_eb", "power_robust", "power_ztest", "power_difference"],
        rows,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shrinkci",
        description="Robust empirical Bayes confidence intervals for normal-means data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_input):
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--config", default=None, help="key=value file; flags win")
        p.add_argument("--output", required=True)
        if needs_input:
            p.add_argument("--input", required=True)

    p_fit = sub.add_parser("fit", help="shrink a CSV of estimates and attach intervals")
    common(p_fit, needs_input=True)
    p_fit.add_argument("--method", default="robust_mu2_kappa", choices=pl.METHODS)
    p_fit.add_argument("--weights", default="uniform", choices=["uniform", "inverse_variance"])
    p_fit.add_argument("--moments", default="pmt", choices=["uc", "pmt", "fplib", "nn"])
    p_fit.add_argument("--nn-j", type=int, default=None, help="neighbor count for --moments nn")
    p_fit.set_defaults(func=cmd_fit)

    p_cva = sub.add_parser("cva", help="robust critical values for given moments")
    common(p_cva, needs_input=False)
    p_cva.add_argument("--m2", required=True, help="comma-separated second moments")
    p_cva.add_argument("--kappa", type=float, default=None)
    p_cva.set_defaults(func=cmd_cva)

    p_curves = sub.add_parser("curves", help="critical-value curves over a moment grid")
    common(p_curves, needs_input=False)
    p_curves.add_argument("--m2-min", type=float, default=0.01)
    p_curves.add_argument("--m2-max", type=float, default=100.0)
    p_curves.add_argument("--points", type=int, default=60)
    p_curves.add_argument("--kappas", default="3,10", help="comma-separated finite kurtosis values")
    p_curves.set_defaults(func=cmd_curves)

    p_sim = sub.add_parser("simulate", help="Monte Carlo coverage study")
    common(p_sim, needs_input=False)
    p_sim.add_argument("--reps", type=int, default=1000)
    p_sim.add_argument("--n", type=int, default=100)
    p_sim.add_argument("--t", default="inf", help="panel length or 'inf'")
    p_sim.add_argument("--errors", default="normal", choices=["normal", "chi2"])
    p_sim.add_argument("--snr", default="0.1,0.5,1,2")
    p_sim.add_argument("--theta-kinds", default=",".join(sim.THETA_KINDS))
    p_sim.add_argument("--methods", default=",".join(sim.SIM_METHODS))
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--het-input", default=None, help="CSV of theta_hat,se for the heteroskedastic design")
    p_sim.set_defaults(func=cmd_simulate)

    p_pow = sub.add_parser("power", help="average power grid for interval-based tests")
    common(p_pow, needs_input=False)
    p_pow.add_argument("--d-max", type=float, default=4.0)
    p_pow.add_argument("--d-steps", type=int, default=41)
    p_pow.add_argument("--w-min", type=float, default=0.05)
    p_pow.add_argument("--w-max", type=float, default=0.95)
    p_pow.add_argument("--w-steps", type=int, default=19)
    p_pow.set_defaults(func=cmd_power)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(argv)
    try:
        _apply_config_defaults(args, argv)
        if not 0.0 < args.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {args.alpha}")
        if getattr(args, "workers", None) is None and hasattr(args, "workers"):
            args.workers = int(os.environ.get(WORKERS_ENV, "1"))
        return args.func(args)
    except (SchemaError, mom.RankDeficientError, OSError) as exc:
        print(f"shrinkci: input error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConfigError as exc:
        print(f"shrinkci: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"shrinkci: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
