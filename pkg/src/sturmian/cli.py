"""Command-line front end.

Subcommands: cf, bands, exponent, escape, mc, dynamics. Every run is
deterministic given (config, seed). Exit codes: 0 success, 2 validation
error, 3 numeric failure. CSV outputs start with a comment line embedding
the resolved configuration and the tool version; JSON outputs embed it as a
"config" field. A flat key=value config file can prefill any flag; explicit
flags override the file.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__, bands, contfrac, dynamics, tracemap, transport
from .errors import NumericError, SturmianError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def format_config(args: dict) -> str:
    items = sorted((k, v) for k, v in args.items() if v is not None and k not in ("out", "func"))
    return " ".join(f"{k}={v}" for k, v in items)


def parse_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _emit(text: str, out_path):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_header(config: str) -> str:
    return f"# sturmian {__version__} config: {config}\n"


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("STURMIAN_THREADS")
    return int(env) if env else 1


def _maybe_plot_script(args, csv_path, columns):
    if getattr(args, "plot_script", None):
        if not csv_path:
            raise ValueError("--plot-script requires --out for the CSV")
        lines = [
            "# gnuplot script (companion to the CSV)",
            "set datafile separator ','",
            f"plot '{csv_path}' using {columns} with linespoints",
        ]
        with open(args.plot_script, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def cmd_cf(args) -> int:
    freq = contfrac.FrequencySpec.parse(args.freq)
    config = format_config(vars(args))
    if args.blocks:
        dec = contfrac.block_decompose(freq, args.k)
        payload = {
            "config": config,
            "segments": [list(s) for s in dec.segments],
            "runs": list(dec.runs),
            "s": dec.s,
            "exponent_sum": dec.exponent_sum,
            "delta_k": contfrac.geometric_mean_delta(freq, args.k),
        }
        _emit(json.dumps(payload, indent=1) + "\n", args.out)
        return EXIT_OK
    conv = contfrac.convergents(freq, args.k)
    if args.format == "json":
        payload = {
            "config": config,
            "convergents": [
                {"k": k, "p": str(conv.pk(k)), "q": str(conv.qk(k))}
                for k in range(-1, conv.K + 1)
            ],
        }
        _emit(json.dumps(payload, indent=1) + "\n", args.out)
    else:
        _emit(_csv_header(config) + conv.as_csv(), args.out)
    return EXIT_OK


def cmd_bands(args) -> int:
    freq = contfrac.FrequencySpec.parse(args.freq)
    config = format_config(vars(args))
    levels = bands.build_hierarchy(freq, args.lam, args.K, tol=args.tol)
    if args.format == "json":
        payload = json.loads(bands.bands_json(levels))
        _emit(json.dumps({"config": config, "levels": payload}, indent=1) + "\n", args.out)
    else:
        _emit(_csv_header(config) + bands.bands_csv(levels), args.out)
        _maybe_plot_script(args, args.out, "4:5")
    if args.stats:
        for level in levels:
            st = bands.level_stats(level)
            print(
                f"# level {level.order}: counts {level.counts} "
                f"max_len {st.max_length:.6g} min_deriv {st.min_deriv:.6g} "
                f"measure {st.measure:.6g}",
                file=sys.stderr,
            )
    return EXIT_OK


def cmd_exponent(args) -> int:
    freq = contfrac.FrequencySpec.parse(args.freq)
    config = format_config(vars(args))
    lams = [float(x) for x in args.lambda_grid.split(",")] if args.lambda_grid else [args.lam]
    if any(l is None for l in lams):
        raise ValueError("exponent needs --lambda or --lambda-grid")
    if args.K is None:
        raise ValueError("exponent needs --K")
    conv = contfrac.convergents(freq, args.K)
    rows = []
    for lam in lams:
        levels = bands.build_hierarchy(freq, lam, args.K, tol=args.tol)
        rep = transport.exponent_estimate(levels, conv, args.K)
        rows.append(rep)
    if args.format == "json":
        payload = {"config": config, "reports": [r.as_dict() for r in rows]}
        _emit(json.dumps(payload, indent=1) + "\n", args.out)
    else:
        lines = [_csv_header(config).rstrip("\n")]
        lines.append("lambda,k,alpha_hat_band,alpha_hat_deriv,alpha_hat_band_log_lambda")
        for r in rows:
            lines.append(
                f"{r.lam},{r.k},{r.alpha_hat_band:.10g},{r.alpha_hat_deriv:.10g},"
                f"{r.alpha_hat_band * math.log(r.lam):.10g}"
            )
        _emit("\n".join(lines) + "\n", args.out)
        _maybe_plot_script(args, args.out, "1:5")
    return EXIT_OK


def cmd_escape(args) -> int:
    freq = contfrac.FrequencySpec.parse(args.freq)
    config = format_config(vars(args))
    res = np.linspace(args.re_min, args.re_max, args.re_points)
    ims = np.linspace(args.im_min, args.im_max, args.im_points) if args.im_points > 1 else [args.im_min]
    lines = [_csv_header(config).rstrip("\n"), "re_z,im_z,verdict,k0"]
    for im in ims:
        for re in res:
            z = complex(re, im)
            report = tracemap.escape_classify(freq, args.lam, z, args.delta, args.k_max)
            k0 = report.k0 if report.escaped else ""
            verdict = "escaped" if report.escaped else "bounded"
            lines.append(f"{re:.17g},{im:.17g},{verdict},{k0}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_mc(args) -> int:
    config = format_config(vars(args))
    record = transport.gauss_monte_carlo(args.seed, args.samples, args.k, threads=_threads(args))
    payload = {"config": config, **record.as_dict(), "reference": transport.ae_constants()}
    _emit(json.dumps(payload, indent=1) + "\n", args.out)
    return EXIT_OK


def cmd_dynamics(args) -> int:
    freq = contfrac.FrequencySpec.parse(args.freq)
    config = format_config(vars(args))
    spec = dynamics.PotentialSpec(freq, args.lam, args.omega, args.window)
    T_grid = [float(x) for x in args.T_grid.split(",")]
    if len(T_grid) == 3 and args.T_geometric:
        T_grid = list(np.geomspace(T_grid[0], T_grid[1], int(T_grid[2])))
    times = dynamics.abel_time_grid(min(T_grid), max(T_grid))
    states = dynamics.evolve(spec, list(times), tol=args.tol)
    p_grid = [float(x) for x in args.p_grid.split(",")]
    fits = [dynamics.fit_beta(spec, p, T_grid, tol=args.tol, states=states) for p in p_grid]
    if args.format == "json":
        payload = {
            "config": config,
            "fits": [f.as_dict() for f in fits],
            "norm_drift": max(abs(s.norm - 1.0) for s in states),
        }
        _emit(json.dumps(payload, indent=1) + "\n", args.out)
    else:
        lines = [_csv_header(config).rstrip("\n"), "t,moment_p2,norm"]
        for s in states:
            lines.append(f"{s.time:.17g},{dynamics.moments(s, 2.0):.17g},{s.norm:.17g}")
        lines.append("")
        lines.append("p,beta_plus_hat,beta_minus_hat")
        for f in fits:
            lines.append(f"{f.p},{f.beta_plus_hat:.10g},{f.beta_minus_hat:.10g}")
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sturmian",
        description="Spectra and transport exponents of Sturmian Hamiltonians",
    )
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("--version", action="version", version=f"sturmian {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, freq=True):
        if freq:
            p.add_argument("--freq", required=False, help="frequency spec string")
        p.add_argument("--out", help="output path (stdout when omitted)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--threads", type=int, default=None, help="0 = auto")
        p.add_argument("--tol", type=float, default=1e-12)

    p_cf = sub.add_parser("cf", help="convergents / block decomposition")
    common(p_cf)
    p_cf.add_argument("--k", type=int, required=True)
    p_cf.add_argument("--blocks", action="store_true", help="emit the block decomposition")
    p_cf.set_defaults(func=cmd_cf)

    p_bands = sub.add_parser("bands", help="band hierarchy export")
    common(p_bands)
    p_bands.add_argument("--lambda", dest="lam", type=float, required=True)
    p_bands.add_argument("--K", type=int, required=True)
    p_bands.add_argument("--stats", action="store_true")
    p_bands.add_argument("--plot-script", dest="plot_script")
    p_bands.set_defaults(func=cmd_bands)

    p_exp = sub.add_parser("exponent", help="transport exponent estimates")
    common(p_exp)
    p_exp.add_argument("--lambda", dest="lam", type=float)
    p_exp.add_argument("--lambda-grid", dest="lambda_grid")
    p_exp.add_argument("--K", type=int)
    p_exp.add_argument("--plot-script", dest="plot_script")
    p_exp.set_defaults(func=cmd_exponent)

    p_esc = sub.add_parser("escape", help="escape-criterion grid scan")
    common(p_esc)
    p_esc.add_argument("--lambda", dest="lam", type=float, required=True)
    p_esc.add_argument("--delta", type=float, default=0.0)
    p_esc.add_argument("--k-max", dest="k_max", type=int, default=40)
    p_esc.add_argument("--re-min", type=float, required=True)
    p_esc.add_argument("--re-max", type=float, required=True)
    p_esc.add_argument("--re-points", type=int, default=32)
    p_esc.add_argument("--im-min", type=float, default=0.0)
    p_esc.add_argument("--im-max", type=float, default=0.0)
    p_esc.add_argument("--im-points", type=int, default=1)
    p_esc.set_defaults(func=cmd_escape)

    p_mc = sub.add_parser("mc", help="Gauss-measure Monte Carlo")
    common(p_mc, freq=False)
    p_mc.add_argument("--seed", type=int, default=0)
    p_mc.add_argument("--samples", type=int, required=True)
    p_mc.add_argument("--k", type=int, required=True)
    p_mc.set_defaults(func=cmd_mc)

    p_dyn = sub.add_parser("dynamics", help="wavepacket spreading and exponent fits")
    common(p_dyn)
    p_dyn.add_argument("--lambda", dest="lam", type=float, required=True)
    p_dyn.add_argument("--omega", type=float, default=0.0)
    p_dyn.add_argument("--window", type=int, required=True)
    p_dyn.add_argument("--T-grid", dest="T_grid", required=True, help="comma list of T values")
    p_dyn.add_argument(
        "--T-geometric",
        dest="T_geometric",
        action="store_true",
        help="interpret --T-grid as min,max,points",
    )
    p_dyn.add_argument("--p-grid", dest="p_grid", default="2")
    p_dyn.set_defaults(func=cmd_dynamics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            defaults = parse_config_file(args.config)
            for key, value in defaults.items():
                attr = key.replace("-", "_")
                if getattr(args, attr, None) is None and hasattr(args, attr):
                    cast = type(parser.get_default(attr)) if parser.get_default(attr) is not None else str
                    setattr(args, attr, cast(value))
        if getattr(args, "samples", 1) is not None and getattr(args, "samples", 1) < 1:
            raise ValueError("samples must be >= 1")
        return args.func(args)
    except (ValueError, OSError) as exc:  # includes SpecificationError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SturmianError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
