"""Command line: ``gridest run``, ``gridest sweep`` and ``gridest matrices``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .harness import (
    ConfigError,
    CsvLoads,
    GaussianLoads,
    LineTrip,
    Method,
    ScenarioConfig,
    load_config,
    run_methods,
    run_noise_sweep,
)
from .netmodel import GridError, build_admittance, load_grid
from .structvec import duplication_matrix, transformation_matrix


def _methods(text: str) -> list[Method]:
    try:
        return [Method(m.strip().lower()) for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"unknown method in {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _scenario(text: str):
    if text == "static":
        return None
    try:
        return LineTrip.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON scenario file; flags given here override it")
    p.add_argument("--grid", help="grid file (.json or MATPOWER .m) or bundled name grid_d / grid_t")
    p.add_argument("--method", type=_methods, help="rls1, rls2, doe, ols or a comma list")
    p.add_argument("--scenario", type=_scenario, default=argparse.SUPPRESS, help="static or trip:<i>-<j>@<t>")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="forgetting factor")
    p.add_argument("--delta", type=float, help="initial estimate scale")
    p.add_argument("--K", dest="K", type=float, help="initial covariance scale")
    p.add_argument("--sigma-i", dest="sigma_i", type=float, help="current noise std (p.u.)")
    p.add_argument("--sigma-v", dest="sigma_v", type=float, help="voltage noise std (p.u.)")
    p.add_argument("--rel-std", dest="rel_std", type=float, help="Gaussian load fluctuation, fraction of nominal")
    p.add_argument("--loads-csv", dest="loads_csv", help="per-iteration load profile CSV")
    p.add_argument("--track", help="line <i>-<j> whose estimate is written to line_estimation.csv")
    p.add_argument("--doe-starts", dest="doe_starts", type=int)
    p.add_argument("--doe-true-y", dest="doe_true_constraint", action="store_true", default=None,
                   help="constrain DoE with the true admittance matrix (ablation)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="output directory for CSV files")


def _config(args) -> tuple[ScenarioConfig, list[Method]]:
    base = load_config(args.config) if args.config else ScenarioConfig()
    updates = {}
    for name in ("grid", "iterations", "lam", "delta", "K", "sigma_i", "sigma_v", "seed", "out",
                 "doe_starts", "doe_true_constraint"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if hasattr(args, "scenario"):  # "static" must be able to override a file's trip
        updates["scenario"] = args.scenario
    if args.rel_std is not None:
        updates["loads"] = GaussianLoads(args.rel_std)
    if args.loads_csv is not None:
        updates["loads"] = CsvLoads(args.loads_csv)
    if args.track is not None:
        i, k = args.track.split("-")
        updates["track"] = (int(i), int(k))
    methods = args.method or [base.method]
    updates["method"] = methods[0]
    return replace(base, **updates), methods


def _summary(records) -> str:
    lines = [f"{'method':<6} {'m_F':>12} {'m_max':>12} {'m_R [%]':>10}"]
    for m, r in records.items():
        f = r.final
        lines.append(f"{m.label:<6} {f['m_F']:12.4e} {f['m_max']:12.4e} {100 * f['m_R']:10.4f}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    config, methods = _config(args)
    records = run_methods(config, methods, jobs=args.jobs)
    print(_summary(records))
    for m, r in records.items():
        if r.fallback.any():
            print(f"{m.label}: nominal set-points used at {int(r.fallback.sum())} infeasible design steps")
        for e in r.events:
            print(f"{m.label}: {e}")
    if config.out:
        print(f"wrote CSV files to {config.out}")
    return 0


def cmd_sweep(args) -> int:
    config, methods = _config(args)
    labels, table = run_noise_sweep(config, args.sigma_v_list, methods, jobs=args.jobs)
    print(f"{'sigma_v':>10} " + " ".join(f"{m:>12}" for m in labels))
    for row in table:
        print(f"{row[0]:10.2e} " + " ".join(f"{x:12.4e}" for x in row[1:]))
    if config.out:
        print(f"wrote {Path(config.out) / 'noise_sensitivity.csv'}")
    return 0


def cmd_matrices(args) -> int:
    spec = load_grid(args.grid)
    adm = build_admittance(spec)
    n = spec.n
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "Y_real.csv", adm.Y.real, delimiter=",")
    np.savetxt(out / "Y_imag.csv", adm.Y.imag, delimiter=",")
    np.savetxt(out / "D.csv", duplication_matrix(n).dense, delimiter=",", fmt="%d")
    np.savetxt(out / "T.csv", transformation_matrix(n).dense, delimiter=",", fmt="%d")
    print(f"{spec.name or args.grid}: n = {n}, symmetric = {adm.is_symmetric}, "
          f"Laplacian = {adm.is_laplacian}, |Y|_F = {np.linalg.norm(adm.Y):.4f}")
    print(f"wrote Y_real.csv, Y_imag.csv, D.csv, T.csv to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridest", description="Online admittance matrix estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario for one or more methods")
    _add_run_options(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="final Frobenius error over voltage-noise levels")
    _add_run_options(sweep)
    sweep.add_argument("--sigma-v-list", "--sigma-v-levels", dest="sigma_v_list", type=_floats,
                       required=True, help="comma-separated voltage noise levels")
    sweep.set_defaults(func=cmd_sweep)

    mats = sub.add_parser("matrices", help="dump Y, D and T for a grid")
    mats.add_argument("--grid", required=True)
    mats.add_argument("--out", default=".")
    mats.set_defaults(func=cmd_matrices)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, GridError, FileNotFoundError, ValueError) as exc:
        print(f"gridest: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
