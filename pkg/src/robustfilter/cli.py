"""Command line: simulate | coeffs | filter | stability | sweep | verify.

Every command writes CSV files and the resolved configuration (config.txt)
into --out. Exit status: 0 pass, 1 failed check, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, render_config
from .experiments import (
    coefficient_rows,
    exact_run,
    prepare,
    run_stability,
    run_truncation_sweep,
    sweep_hypothesis_failures,
    truncated_run,
)
from .path_sim import write_path_csv
from .verify import SUITES, run_suite

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _seeds(cfg: ExperimentConfig, seed: Optional[int]) -> tuple:
    return (seed,) if seed is not None else cfg.seeds


def cmd_simulate(cfg, args, out: Path) -> int:
    seed = _seeds(cfg, args.seed)[0]
    setup = prepare(cfg, seed)
    write_path_csv(setup.path, out / "path.csv")
    return EXIT_PASS


def cmd_coeffs(cfg, args, out: Path) -> int:
    setup = prepare(cfg, _seeds(cfg, args.seed)[0])
    header = ["k", "theta", "cov14", "cov24", "cov34", "var4", "lambda1", "lambda2", "lambda3", "lambda4sq"]
    write_csv(out / "coeffs.csv", header, coefficient_rows(setup.coeffs))
    return EXIT_PASS


def _filter_rows(run):
    for k, pi in enumerate(run):
        p = pi.probabilities
        for i, (x, w) in enumerate(zip(pi.grid, p)):
            yield k, i, float(x), float(w)


def cmd_filter(cfg, args, out: Path) -> int:
    setup = prepare(cfg, _seeds(cfg, args.seed)[0])
    header = ["k", "grid_index", "x", "weight"]
    write_csv(out / "filter.csv", header, _filter_rows(exact_run(setup)))
    write_csv(out / "filter_truncated.csv", header, _filter_rows(truncated_run(setup, setup.geom)))
    return EXIT_PASS


STAB_HEADER = ["k", "t", "tv", "hilbert", "escape_mass", "seed"]


def cmd_stability(cfg, args, out: Path) -> int:
    res, h0 = run_stability(cfg, _seeds(cfg, args.seed))
    write_csv(out / "stability.csv", STAB_HEADER, res.rows)
    write_csv(out / "stability_truncated.csv", STAB_HEADER, res.trunc_rows)
    seeds = sorted(res.slopes)
    write_csv(out / "slopes.csv", ["seed", "slope", "truncated_slope", "prior_hilbert"],
              [(s, res.slopes[s], res.trunc_slopes[s], h0[s]) for s in seeds])
    tv = res.tv_matrix()
    first, last = float(np.median(tv[:, 0])), float(np.median(tv[:, -1]))
    bad = res.hilbert_violations(h0)
    write_csv(out / "stability_summary.csv",
              ["median_slope", "first_block_median_tv", "final_block_median_tv", "hilbert_increases", "delta_n"],
              [(res.median_slope, first, last, bad, res.delta_n)])
    ok = res.median_slope < 0 and last < first / 5 and bad == 0
    print(f"median slope {res.median_slope:.4g}; median TV first {first:.3g} final {last:.3g}; "
          f"Hilbert increases {bad}")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_sweep(cfg, args, out: Path) -> int:
    failing = sweep_hypothesis_failures(cfg)
    if failing and not cfg.force:
        for d, names in failing.items():
            print(f"Delta = {d}: hypotheses fail: {'; '.join(names)}", file=sys.stderr)
        raise ConfigError("sweep values violate the standing hypotheses (set run.force = true to run anyway)")
    res = run_truncation_sweep(cfg, _seeds(cfg, args.seed))
    write_csv(out / "sweep.csv", ["delta", "delta_sq_over_h", "sup_mean_tv", "mean_escape", "log_T"],
              zip(res.deltas, res.x, res.sup_mean_tv, res.mean_escape, res.log_T))
    for i, d in enumerate(res.deltas):
        write_csv(out / f"escape_{i}.csv", STAB_HEADER, res.escape_rows[float(d)])
    write_csv(out / "sweep_fit.csv", ["slope", "intercept", "r2", "underflow_runs"],
              [(res.slope, res.intercept, res.r2, len(res.underflow))])
    if res.underflow:
        print(f"underflowed truncated runs: {res.underflow}", file=sys.stderr)
    ok = res.slope < 0 and res.r2 >= 0.8 and not res.underflow
    print(f"slope {res.slope:.4g} per Delta^2/h, R^2 {res.r2:.4f}")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_verify(cfg, args, out: Path) -> int:
    name = args.suite_opt or args.suite
    if name is None:
        raise ConfigError(f"verify needs a suite: {', '.join(SUITES)}")
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    res = run_suite(name, cfg, _seeds(cfg, args.seed)[0])
    write_csv(out / f"{name}.csv", res.header, res.rows)
    for stem, (header, rows) in res.extra.items():
        write_csv(out / f"{stem}.csv", header, rows)
    failed = [r for r in res.rows if not r[-1]]
    for r in failed[:20]:
        print("FAIL " + ",".join(_fmt(v) for v in r), file=sys.stderr)
    print(f"{name}: {'PASS' if res.ok else 'FAIL'} ({len(res.rows) - len(failed)}/{len(res.rows)} rows)")
    return EXIT_PASS if res.ok else EXIT_FAIL


COMMANDS = {
    "simulate": cmd_simulate,
    "coeffs": cmd_coeffs,
    "filter": cmd_filter,
    "stability": cmd_stability,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'section.key = value' file")
    common.add_argument("--seed", type=int, help="single seed; overrides run.seeds")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p = argparse.ArgumentParser(prog="robustfilter", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "verify":
            sp.add_argument("suite", nargs="?", help=", ".join(SUITES))
            sp.add_argument("--suite", dest="suite_opt")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.txt").write_text(render_config(cfg))
        return COMMANDS[args.command](cfg, args, args.out)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
