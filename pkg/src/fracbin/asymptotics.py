"""Asymptotic arbitrage along a sequence of markets with vanishing costs.

Three regimes are covered:

* costs ``lam_N = N**-p`` with ``p > H``: a one-step short sale at the
  all-down node of level ``n_H - 1``, scaled by ``q_N = N**r`` with
  ``H < r < p``, has bounded risk ``c_N -> 0`` and a gain ``C_N -> oo`` on an
  event of fixed probability ``2**-(n_H - 1)``;
* costs at or above ``c_X / sqrt(N)``: no one-step strategy gains anywhere;
* no costs: the probability that a one-step strategy gains at least some
  ``alpha > 0`` is capped by ``1/2 + |arbitrage points|/2**(n+1)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .arbitrage import census_exhaustive, exact_one_step_critical, find_n_H, theta
from .kernels import CoeffCache, HurstParams, _as_params
from .market import MarketModel, PathWord, max_abs_increment
from .strategies import (TIE_RTOL, OneStepSpec, enumerate_strategy, one_step_strategy,
                         sottinen_strategy, terminal_values_all_leaves)

AA1_HEADER = ["N", "lambda_N", "q_N", "c_N", "C_N", "profit_prob_num", "profit_prob_den", "admissible"]


@dataclass(frozen=True)
class AA1Schedule:
    """Costs ``lam_N = N**-p`` and position sizes ``q_N = N**q_exponent`` on a grid of N.

    Requires ``H < q_exponent < p``, so that ``q_N / N**H`` diverges while
    ``lam_N * q_N`` vanishes.
    """

    H: float
    p: float
    q_exponent: float
    N_grid: tuple

    def __post_init__(self):
        if not self.p > self.H:
            raise ValueError(f"cost exponent p={self.p} must exceed H={self.H}")
        if not self.H < self.q_exponent < self.p:
            raise ValueError(f"size exponent must lie strictly between H={self.H} and p={self.p}")
        if not self.N_grid:
            raise ValueError("empty N grid")
        if any(int(n) < 2 for n in self.N_grid):
            raise ValueError("grid values must be at least 2")

    def lam(self, N: int) -> float:
        return float(N) ** (-self.p)

    def size(self, N: int) -> float:
        return float(N) ** self.q_exponent

    @property
    def risk_exponent(self) -> float:
        """Exponent of ``lam_N * q_N`` (negative)."""
        return self.q_exponent - self.p

    @property
    def gain_exponent(self) -> float:
        """Exponent of ``q_N / N**H`` (positive)."""
        return self.q_exponent - self.H


def aa1_schedule(H: float, p: float, N_grid: Sequence[int],
                 q_exponent: Optional[float] = None) -> AA1Schedule:
    """Power-law schedule; the size exponent defaults to the midpoint ``(H + p) / 2``."""
    if q_exponent is None:
        q_exponent = 0.5 * (H + p)
    return AA1Schedule(float(H), float(p), float(q_exponent), tuple(int(n) for n in N_grid))


@dataclass
class AA1Row:
    N: int
    lambda_N: float
    q_N: float
    c_N: float
    C_N: float
    profit_probability: Fraction
    admissible: bool
    min_value: float
    bound_attained: bool
    gain_on_event: float
    tolerance: float

    def csv_row(self):
        pp = self.profit_probability
        return [self.N, self.lambda_N, self.q_N, self.c_N, self.C_N, pp.numerator, pp.denominator,
                int(self.admissible)]


@dataclass
class AA1Report:
    """Per-N results plus log-log slopes of the risk and gain levels.

    ``slope_C`` is fitted to ``|C_N|``; `C_positive` tells whether the gain
    level is positive on the whole grid (otherwise the fit is not a growth rate).
    """

    schedule: AA1Schedule
    n_H: int
    rows: List[AA1Row] = field(default_factory=list)
    slope_c: float = math.nan
    slope_C: float = math.nan

    @property
    def C_positive(self) -> bool:
        return all(r.C_N > 0 for r in self.rows)

    @property
    def target_probability(self) -> Fraction:
        return Fraction(1, 1 << (self.n_H - 1))

    def csv_rows(self):
        return [r.csv_row() for r in self.rows]

    def summary(self) -> dict:
        return {"n_H": self.n_H, "H": self.schedule.H, "p": self.schedule.p,
                "q_exponent": self.schedule.q_exponent,
                "slope_c": self.slope_c, "slope_C": self.slope_C,
                "expected_slope_c": self.schedule.risk_exponent,
                "expected_slope_C": self.schedule.gain_exponent,
                "C_positive": self.C_positive,
                "all_admissible": all(r.admissible for r in self.rows),
                "probability_matches": all(r.profit_probability == self.target_probability
                                           for r in self.rows)}


def _aa1_row(coeffs, schedule: AA1Schedule, n_H: int, N: int, s0: float) -> AA1Row:
    market = MarketModel(coeffs, N, s0)
    lam = schedule.lam(N)
    q = schedule.size(N)
    strategy = sottinen_strategy(market, lam, n_H).scaled(q)
    e = enumerate_strategy(market, strategy, lam)
    s_event = float(market.price_along_path(PathWord.all_down(n_H - 1))[-1])
    c_N = lam * q * s_event
    C_N = q * (-lam + theta(coeffs, n_H) / market.scale) * s_event
    tol = TIE_RTOL * e.scale
    prob = e.probability(e.terminal >= C_N - tol, include_off=C_N <= 0)
    min_value = float(np.min(e.path_min))
    # the up-continuation of the all-down event is leaf index 1 of the full enumeration
    gain = float(e.terminal[1]) if e.anchor_depth == 0 else math.nan
    return AA1Row(N, lam, q, c_N, C_N, prob, bool(min_value >= -c_N - tol), min_value,
                  bool(abs(min_value + c_N) <= tol), gain, tol)


def aa1_verify(coeffs_or_params, schedule: AA1Schedule, n_H: Optional[int] = None, *,
               s0: float = 1.0, scan_horizon: int = 256, threads: int = 1) -> AA1Report:
    """Evaluate the scaled one-step short sale on every grid N by exact enumeration.

    Parameters
    ----------
    coeffs_or_params : CoeffTable, CoeffCache or HurstParams
        Coefficient source; parameters get an on-demand cache.
    schedule : AA1Schedule
    n_H : int, optional
        Level from which the all-down node is an arbitrage point; scanned up
        to `scan_horizon` when omitted.

    Notes
    -----
    ``c_N = lam_N q_N S`` and ``C_N = q_N (theta(n_H)/N**H - lam_N) S`` with
    S the price after ``n_H - 1`` down moves.  The profit probability is the
    exact dyadic ``P(V_N >= C_N)`` over all paths; admissibility asks
    ``V_i >= -c_N`` at every step.
    """
    if isinstance(coeffs_or_params, (HurstParams, float, int)):
        params = _as_params(coeffs_or_params)
        coeffs = CoeffCache(params, max(schedule.N_grid))
    else:
        coeffs = coeffs_or_params
        params = coeffs.params
    if abs(params.H - schedule.H) > 1e-15:
        raise ValueError("schedule and coefficients use different H")
    if max(schedule.N_grid) > coeffs.n_max:
        coeffs = CoeffCache(params, max(schedule.N_grid), getattr(coeffs, "quad_tol", 1e-10))
    if n_H is None:
        n_H = find_n_H(coeffs, min(scan_horizon, coeffs.n_max))
        if n_H is None:
            raise ValueError("no arbitrage level found within the scan horizon")
    if min(schedule.N_grid) < n_H:
        raise ValueError(f"grid starts below n_H={n_H}")
    grid = sorted(schedule.N_grid)
    work = lambda N: _aa1_row(coeffs, schedule, n_H, N, s0)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(work, grid))
    else:
        rows = [work(N) for N in grid]
    report = AA1Report(schedule, n_H, rows)
    if len(rows) >= 2:
        logN = np.log([r.N for r in rows])
        report.slope_c = float(np.polyfit(logN, np.log([r.c_N for r in rows]), 1)[0])
        absC = np.abs([r.C_N for r in rows])
        if np.all(absC > 0):
            report.slope_C = float(np.polyfit(logN, np.log(absC), 1)[0])
    return report


# ---------------------------------------------------------------------------
# the no-arbitrage regime
# ---------------------------------------------------------------------------

def no_arbitrage_threshold(market: MarketModel) -> float:
    """c_X / sqrt(N): at or above this cost no one-step strategy gains anywhere."""
    return market.coeffs.c_X / math.sqrt(market.N)


def threshold_chain(market: MarketModel) -> dict:
    """The chain exact one-step critical cost <= max |X_n| / N**H <= c_X / sqrt(N).

    Needs the coefficient rows of every level (a dense table or a small N).
    """
    exact = exact_one_step_critical(market)
    largest_move = max(max_abs_increment(market.coeffs, n) for n in range(1, market.N + 1))
    row_bound = largest_move / market.scale
    limit = no_arbitrage_threshold(market)
    return {"exact": exact, "row_bound": row_bound, "c_X_bound": limit,
            "consistent": bool(exact <= row_bound <= limit)}


# ---------------------------------------------------------------------------
# frictionless second-kind bound
# ---------------------------------------------------------------------------

def aa2_bound_exact(coeffs, n: int) -> Fraction:
    """1/2 + |arbitrage points at level n + 1| / 2**(n+1) as an exact fraction."""
    if n < 1:
        raise ValueError("trading level must be at least 1")
    c = census_exhaustive(coeffs, n + 1)
    return Fraction(1, 2) + Fraction(c.count_u + c.count_d, 1 << (n + 1))


def aa2_upper_bound(coeffs, n: int) -> float:
    """Upper bound on ``P(V_N >= alpha)`` for any frictionless one-step strategy trading at n.

    Raises ValueError when level ``n + 1`` is too deep for an exhaustive census.
    """
    return float(aa2_bound_exact(coeffs, n))


@dataclass
class AA2Check:
    probability: Fraction
    bound: Fraction
    alpha: float
    holds: bool


def aa2_check(market: MarketModel, spec: OneStepSpec, alpha: Optional[float] = None) -> AA2Check:
    """Exact ``P(V_N >= alpha)`` at zero cost against the census bound.

    `alpha` defaults to half the smallest positive terminal value (any
    ``alpha > 0`` is covered by the bound, this choice is the most demanding
    one that still separates gains from zero).
    """
    V = terminal_values_all_leaves(market, one_step_strategy(market, 0.0, spec), 0.0)
    if alpha is None:
        pos = V[V > 0]
        alpha = 0.5 * float(pos.min()) if pos.size else 1.0
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    prob = Fraction(int(np.count_nonzero(V >= alpha)), V.size)
    bound = aa2_bound_exact(market.coeffs, spec.n)
    return AA2Check(prob, bound, float(alpha), prob <= bound)
