"""Command-line experiment runner.

Every subcommand writes CSV files plus a JSON run record into ``--out``.
CSV bodies depend only on the flags (and the seed), never on timing or
thread count.  Exit codes: 0 success, 2 invalid parameters, 3 a check
performed by the subcommand failed.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .arbitrage import (CENSUS_HEADER, census_exhaustive, census_monte_carlo,
                        chebyshev_census_bound, exact_one_step_critical, find_n_H, lambda_phi,
                        lambda_psi, lower_bound_lowbd, verify_arbitrage_exhaustive)
from .asymptotics import AA1_HEADER, aa1_schedule, aa1_verify, no_arbitrage_threshold
from .io import write_csv, write_json
from .kernels import (DEFAULT_QUAD_TOL, CoeffCache, HurstParams, build_coeff_table,
                      validate_coeff_bounds)
from .market import MarketModel, PathWord, variance_scaling
from .strategies import gamma_strategy, sottinen_strategy

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_VIOLATION = 3

# dense tables beyond this size take too long for an interactive run
_TABLE_LIMIT = 8192
# exhaustive census up to this level, Monte Carlo above
_EXHAUSTIVE_LEVEL = 23

SUBCOMMANDS = ("coeffs", "critical", "census", "aa1", "verify", "variance")


class ConfigError(ValueError):
    """Invalid flag combination, reported with exit code 2."""


def parse_grid(text: str) -> List[int]:
    """``a:b:step`` (inclusive arithmetic range) or ``dyadic:a:b`` (2**a .. 2**b)."""
    parts = text.split(":")
    try:
        if parts[0] == "dyadic":
            if len(parts) != 3:
                raise ValueError
            lo, hi = int(parts[1]), int(parts[2])
            if not 0 <= lo <= hi <= 62:
                raise ValueError
            return [1 << k for k in range(lo, hi + 1)]
        if len(parts) == 1:
            vals = [int(parts[0])]
        elif len(parts) in (2, 3):
            lo, hi = int(parts[0]), int(parts[1])
            step = int(parts[2]) if len(parts) == 3 else 1
            if step < 1 or hi < lo:
                raise ValueError
            vals = list(range(lo, hi + 1, step))
        else:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: use a:b:step or dyadic:a:b") from None
    if min(vals) < 1:
        raise argparse.ArgumentTypeError("grid values must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--H", type=float, default=0.75, help="Hurst parameter in (1/2, 1)")
    common.add_argument("--sigma", type=float, default=1.0)
    common.add_argument("--s0", type=float, default=1.0, help="initial price")
    common.add_argument("--N", type=int, default=None, help="number of market steps")
    common.add_argument("--N-grid", dest="N_grid", type=parse_grid, default=None,
                        help="a:b:step or dyadic:a:b (exponents)")
    common.add_argument("--gamma", type=float, default=None)
    common.add_argument("--lambda", dest="lam", type=float, default=None, help="transaction cost")
    common.add_argument("--n-max", dest="n_max", type=int, default=None)
    common.add_argument("--quad-tol", dest="quad_tol", type=float, default=DEFAULT_QUAD_TOL)
    common.add_argument("--mc-samples", dest="mc_samples", type=int, default=100_000)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker count (default: FRACBIN_THREADS or 1)")
    common.add_argument("--out", type=Path, default=Path("fracbin_out"), help="output directory")

    parser = argparse.ArgumentParser(prog="fracbin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fracbin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("coeffs", parents=[common], help="tabulate j(n, i) and g(n) and check their bounds")
    sub.add_parser("critical", parents=[common], help="cost thresholds over an N grid")
    sub.add_parser("census", parents=[common], help="arbitrage-point census over levels")
    p_aa1 = sub.add_parser("aa1", parents=[common], help="scaled short sale under vanishing costs")
    p_aa1.add_argument("--p", type=float, default=1.25, help="cost exponent, lambda_N = N**-p")
    p_aa1.add_argument("--q-exponent", dest="q_exponent", type=float, default=None)
    p_aa1.add_argument("--n-H", dest="n_H", type=int, default=None)
    sub.add_parser("verify", parents=[common], help="exhaustive arbitrage check of one strategy")
    sub.add_parser("variance", parents=[common], help="Var(sum X)/N**(2H) over an N grid")
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        t = args.threads
    else:
        try:
            t = int(os.environ.get("FRACBIN_THREADS", "1"))
        except ValueError:
            raise ConfigError("FRACBIN_THREADS must be an integer") from None
    if t < 1:
        raise ConfigError("thread count must be positive")
    return t


def _params(args) -> HurstParams:
    try:
        params = HurstParams(args.H, args.sigma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not (args.s0 > 0 and math.isfinite(args.s0)):
        raise ConfigError("--s0 must be positive")
    if not args.quad_tol > 0:
        raise ConfigError("--quad-tol must be positive")
    return params


def _grid(args, default: List[int]) -> List[int]:
    if args.N_grid is not None:
        return args.N_grid
    if args.N is not None:
        return [args.N]
    return default


def _dense_table(params, n_max: int, args, threads: int):
    if n_max > _TABLE_LIMIT:
        raise ConfigError(f"dense coefficient tables are limited to n <= {_TABLE_LIMIT}")
    return build_coeff_table(n_max, params, args.quad_tol, workers=threads)


# ---------------------------------------------------------------------------
# subcommands: each returns (exit code, summary dict)
# ---------------------------------------------------------------------------

def cmd_coeffs(args, params, threads):
    n_max = args.n_max or 100
    if n_max < 2:
        raise ConfigError("--n-max must be at least 2")
    table = _dense_table(params, n_max, args, threads)
    table.save(args.out, "coeffs")
    report = validate_coeff_bounds(table)
    summary = {"bound_minima": report.minima(), "bounds_passed": report.passed}
    return (EXIT_OK if report.passed else EXIT_VIOLATION), summary, table.constants()


def cmd_critical(args, params, threads):
    grid = _grid(args, [64, 128, 256, 512, 1024])
    gamma = 0.25 if args.gamma is None else args.gamma
    if not 0 < gamma < 1:
        raise ConfigError("--gamma must lie in (0, 1)")
    n_top = max(grid)
    table = _dense_table(params, n_top, args, threads)
    rows, checks = [], []
    for N in grid:
        market = MarketModel(table, N, args.s0)
        lphi = lambda_phi(market, N)
        psi = lambda_psi(table, gamma, N)
        low = lower_bound_lowbd(market)
        exact = exact_one_step_critical(market)
        nH = find_n_H(table, N)
        rows.append([N, lphi, psi.value, low, exact, "" if nH is None else nH])
        checks.append({"N": N, "lowbd_equals_exact": abs(low - exact) <= 1e-12,
                       "below_no_arbitrage_level": max(low, exact) <= no_arbitrage_threshold(market),
                       "psi_hold": psi.hold, "psi_condition": psi.condition_holds})
    write_csv(Path(args.out) / "thresholds.csv",
              ["N", "lambda_phi_NN", "lambda_psi", "lowbd", "exact_one_step", "nH"], rows)
    psi_col = [r[2] for r in rows]
    monotone = all(b >= a for a, b in zip(psi_col, psi_col[1:]))
    ok = monotone and all(c["lowbd_equals_exact"] and c["below_no_arbitrage_level"] for c in checks)
    summary = {"gamma": gamma, "lambda_psi_monotone": monotone, "checks": checks}
    return (EXIT_OK if ok else EXIT_VIOLATION), summary, table.constants()


def cmd_census(args, params, threads):
    levels = _grid(args, list(range(1, 21)))
    top = max(levels)
    table = _dense_table(params, top, args, threads)
    rows, results = [], []
    for n in levels:
        if n <= _EXHAUSTIVE_LEVEL:
            r = census_exhaustive(table, n)
        else:
            if args.mc_samples < 1000:
                raise ConfigError("--mc-samples must be at least 1000")
            r = census_monte_carlo(table, n, args.mc_samples, args.seed, threads)
        results.append(r)
        rows.append(r.csv_row())
    write_csv(Path(args.out) / "census.csv", CENSUS_HEADER, rows)
    cheb = chebyshev_census_bound(params)
    symmetric = all(r.count_u == r.count_d for r in results if r.method == "exhaustive")
    within = cheb >= 1 or all(r.ratio <= cheb for r in results if r.method == "exhaustive")
    summary = {"symmetric": symmetric, "chebyshev_bound": cheb, "within_chebyshev": within,
               "max_ratio": max(r.ratio for r in results)}
    return (EXIT_OK if symmetric and within else EXIT_VIOLATION), summary, table.constants()


def cmd_aa1(args, params, threads):
    grid = _grid(args, [1 << k for k in range(6, 15)])
    try:
        schedule = aa1_schedule(params.H, args.p, grid, args.q_exponent)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    coeffs = CoeffCache(params, max(grid), args.quad_tol)
    report = aa1_verify(coeffs, schedule, args.n_H, s0=args.s0, threads=threads)
    write_csv(Path(args.out) / "aa1.csv", AA1_HEADER, report.csv_rows())
    s = report.summary()
    ok = s["all_admissible"] and s["probability_matches"] and s["C_positive"]
    return (EXIT_OK if ok else EXIT_VIOLATION), s, coeffs.constants()


def cmd_verify(args, params, threads):
    """Sottinen short sale at the last step, or the gamma strategy when --gamma is given."""
    if args.N is None or args.lam is None:
        raise ConfigError("verify needs --N and --lambda")
    if not 0 <= args.lam < 1:
        raise ConfigError("--lambda must lie in [0, 1)")
    N = args.N
    coeffs = CoeffCache(params, N, args.quad_tol)
    summary = {}
    if args.gamma is None:
        if N < 2:
            raise ConfigError("--N must be at least 2")
        market = MarketModel(coeffs, N, args.s0)
        strategy = sottinen_strategy(market, args.lam, N)
        threshold = lambda_phi(market, N)
        summary["strategy"] = f"short at the all-down node of level {N - 1}, closed at {N}"
        summary["threshold_name"] = "lambda_phi"
        prefix = ""
    else:
        if not 0 < args.gamma < 1:
            raise ConfigError("--gamma must lie in (0, 1)")
        m = int(math.floor(args.gamma * N))
        psi = lambda_psi(coeffs, args.gamma, N)
        if psi.hold < 1 or m < 1:
            raise ConfigError(f"the gamma strategy does not trade at N={N} (holding period 0)")
        # values scale with the event price; rebasing it to s0 keeps it representable
        market = MarketModel(coeffs, N, args.s0).subtree(PathWord.all_down(m), price=args.s0)
        strategy = gamma_strategy(market, args.lam, args.gamma)
        threshold = psi.value
        summary["strategy"] = f"short after {m} down moves, held {psi.hold} steps"
        summary["threshold_name"] = "lambda_psi"
        summary["hold"] = psi.hold
        prefix = f"d^{m}"
    cert = verify_arbitrage_exhaustive(market, strategy, args.lam)
    summary["threshold"] = threshold
    summary["certificate"] = cert.record()
    summary["witness_prefix"] = prefix
    return (EXIT_OK if cert.is_arbitrage else EXIT_VIOLATION), summary, coeffs.constants()


def cmd_variance(args, params, threads):
    grid = _grid(args, [512, 1024, 2048, 4096, 8192])
    rows = []
    for N in grid:
        v = variance_scaling(params, N, args.quad_tol)
        rows.append([N, v, abs(v - params.sigma ** 2)])
    write_csv(Path(args.out) / "variance.csv", ["N", "V", "abs_dev"], rows)
    dev = [r[2] for r in rows]
    steps = [b <= a for a, b in zip(dev, dev[1:])]
    needed = math.ceil(0.75 * len(steps)) if steps else 0
    ok = sum(steps) >= needed
    summary = {"non_increasing_steps": int(sum(steps)), "steps": len(steps), "trend_ok": ok}
    constants = CoeffCache(params, max(grid), args.quad_tol).constants()
    return (EXIT_OK if ok else EXIT_VIOLATION), summary, constants


_DISPATCH = {"coeffs": cmd_coeffs, "critical": cmd_critical, "census": cmd_census,
             "aa1": cmd_aa1, "verify": cmd_verify, "variance": cmd_variance}


def run(args) -> int:
    """Execute one parsed configuration and write its artifacts."""
    start = time.perf_counter()
    try:
        params = _params(args)
        threads = _threads(args)
        code, summary, constants = _DISPATCH[args.command](args, params, threads)
    except ConfigError as exc:
        print(f"fracbin: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    record = {"command": args.command, "config": config, "version": __version__,
              "wall_time_s": time.perf_counter() - start, "constants": constants,
              "result": summary, "exit_code": code}
    write_json(Path(args.out) / f"{args.command}_run.json", record)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
