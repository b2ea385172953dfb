"""Critical transaction costs, arbitrage certificates and the arbitrage-point census.

Key quantities, all for zero drift:

* ``theta(n) = sum_{i<n} j(n, i) - g(n)``: positive exactly when the all-down
  node at level ``n - 1`` moves down in both states.  The cost threshold of
  the one-step short sale there is ``theta(n) / N**H``.
* ``A(k)``: the excess move ``k`` steps after shorting at ``m = floor(gamma N)``
  on the all-down history, along the all-up continuation (the worst case).
  If every ``A(k) <= 0`` for ``k <= p`` the position can be held ``p`` steps
  and survives costs up to ``1 - prod_k (1 + A(k) / N**H)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from .kernels import HurstParams, gap_function_G, normalizing_constant
from .market import MarketModel, PathWord, chunk_layout, sign_chunk
from .strategies import TIE_RTOL, Strategy, enumerate_strategy, index_word

CENSUS_EXHAUSTIVE_MAX = 26
_LOW_BITS = 20


# ---------------------------------------------------------------------------
# one-step thresholds
# ---------------------------------------------------------------------------

def theta(coeffs, n: int) -> float:
    """sum_{i<n} j(n, i) - g(n)."""
    return coeffs.row_sum(n) - coeffs.g(n)


def lambda_phi(market: MarketModel, n0: int) -> float:
    """Largest cost at which the one-step short sale at the all-down node of level n0 - 1 is an arbitrage.

    Equals ``-u_{n0}(all down) = theta(n0) / N**H``; a non-positive value means
    the node is not an arbitrage point at all.
    """
    if not 1 <= n0 <= market.horizon:
        raise IndexError(f"n0 must lie in 1..{market.horizon}")
    u, _ = market.node_moves(n0, PathWord.all_down(n0 - 1))
    return -u


def theta_scan(coeffs, horizon: int) -> np.ndarray:
    """theta(n) for n = 1..horizon."""
    return coeffs.row_sums(horizon) - coeffs.g_values(horizon)


def find_n_H(coeffs, horizon: int) -> Optional[int]:
    """Smallest n* with theta(n) > 0 for every n in [n*, horizon], or None."""
    if horizon > coeffs.n_max:
        raise ValueError("horizon exceeds the coefficient range")
    th = theta_scan(coeffs, horizon)
    bad = np.flatnonzero(th <= 0.0)
    if bad.size == 0:
        return 1
    n_star = int(bad[-1]) + 2
    return n_star if n_star <= horizon else None


def row_sum_growth_constant(coeffs, n_from: int, horizon: int) -> float:
    """min over n in [n_from, horizon] of sum_{i<n} j(n, i) / n**alpha."""
    a = coeffs.params.alpha
    n = np.arange(n_from, horizon + 1)
    rs = coeffs.row_sums(horizon)[n_from - 1:]
    return float(np.min(rs / n ** a))


def lower_bound_lowbd(market: MarketModel) -> float:
    """1 - min_n min_x ((1 + u_n(x)) ^ 1/(1 + d_n(x)) ^ 1).

    Positivity of the weights j makes ``u_n`` minimal at the all-down node and
    ``d_n`` maximal at the all-up node, so only those two nodes per level are
    evaluated.
    """
    best = 1.0
    for n in range(1, market.horizon + 1):
        u_min, _ = market.node_moves(n, PathWord.all_down(n - 1))
        _, d_max = market.node_moves(n, PathWord.all_up(n - 1))
        best = min(best, 1.0 + u_min, 1.0 / (1.0 + d_max))
    return 1.0 - best


def exact_one_step_critical(market: MarketModel) -> float:
    """Infimum of the costs at which no one-step arbitrage exists.

    A short sale at node x is an arbitrage iff ``lam <= -u(x)``, a purchase iff
    ``(1 - lam) d(x) >= lam``; both are maximized at the constant nodes, and
    ``theta >= theta/(1+theta)`` makes the short side decisive.
    """
    if market.depth:
        raise ValueError("defined for the full market only")
    th = theta_scan(market.coeffs, market.N)[1:]
    return max(0.0, float(np.max(th, initial=0.0))) / market.scale


# ---------------------------------------------------------------------------
# holding the short position: the gamma construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaConstants:
    gamma: float
    P_gamma: float
    C_gamma: float
    C_hat_gamma: float
    N0_gamma: int
    n_gamma: int


def _n_gamma(gamma: float) -> int:
    # floor(gamma N)/N > gamma/2 holds for every N >= 2/gamma; scan below that
    n = int(math.ceil(2.0 / gamma)) + 1
    while n - 1 > 1 and math.floor(gamma * (n - 1)) / (n - 1) > gamma / 2.0:
        n -= 1
    return max(n, 2)


def gamma_constants(params: HurstParams, gamma: float) -> GammaConstants:
    """Holding fraction P, growth constants C and C_hat, and the start N0 for a given gamma."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    a = params.alpha
    c_star = params.sigma * normalizing_constant(params)
    half = gamma / 2.0
    G = gap_function_G(half, params)
    P = min(1.0 - gamma, (half ** (2.0 * a) * G / 2.0) ** (1.0 / a))
    C = c_star * half ** a * G / 2.0
    C_hat = c_star * half ** (-a) / (a + 1.0)
    n_g = _n_gamma(gamma)
    N0 = max(n_g, int(math.floor((C_hat / C) ** (1.0 / a))) + 1)
    return GammaConstants(float(gamma), float(P), float(C), float(C_hat), int(N0), int(n_g))


def hold_length(params: HurstParams, gamma: float, N: int) -> int:
    """floor(P_gamma N)."""
    return int(math.floor(gamma_constants(params, gamma).P_gamma * N))


def A_gamma(coeffs, gamma: float, N: int, k: int) -> float:
    """Excess move k steps after floor(gamma N) downs, along the all-up continuation."""
    m = int(math.floor(gamma * N))
    n = m + k
    if m < 1 or k < 1:
        raise ValueError("need floor(gamma N) >= 1 and k >= 1")
    if n > coeffs.n_max:
        raise ValueError(f"step {n} beyond the coefficient range")
    return -coeffs.j_range_sum(n, 0, m) + coeffs.j_range_sum(n, m, n - 1) + coeffs.g(n)


@dataclass
class PsiThreshold:
    """Cost threshold of the held short position.

    ``value`` is ``1 - prod_k (1 + A(k)/N**H)``; `condition_holds` reports
    whether every ``A(k) <= 0`` (otherwise `failing_k` is the first offender).
    """

    value: float
    N: int
    gamma: float
    hold: int
    A: np.ndarray
    condition_holds: bool
    failing_k: Optional[int]

    def __float__(self) -> float:
        return self.value


def lambda_psi(coeffs, gamma: float, N: int, hold: Optional[int] = None) -> PsiThreshold:
    """Threshold cost for the gamma strategy on the N-step market."""
    p = hold_length(coeffs.params, gamma, N) if hold is None else int(hold)
    m = int(math.floor(gamma * N))
    if m + p > N:
        raise ValueError("liquidation step beyond the horizon")
    A = np.array([A_gamma(coeffs, gamma, N, k) for k in range(1, p + 1)])
    scale = float(N) ** coeffs.params.H
    bad = np.flatnonzero(A > 0.0)
    # 1 - prod(1 + a) = -expm1(sum log1p(a)), accurate for tiny a
    value = float(-math.expm1(math.fsum(np.log1p(A / scale)))) if p else 0.0
    return PsiThreshold(value, int(N), float(gamma), p, A, bad.size == 0,
                        int(bad[0]) + 1 if bad.size else None)


def psi_vanishing_bounds(coeffs, gamma: float, N: int, s0: float = 1.0):
    """Upper bounds on the profit probability and the profit of the gamma strategy.

    Returns ``(2**-m, (1 - g_limit/N**H)**m s0)`` with ``m = floor(gamma N)``.
    """
    m = int(math.floor(gamma * N))
    scale = float(N) ** coeffs.params.H
    return Fraction(1, 1 << m), s0 * math.exp(m * math.log1p(-coeffs.g_limit / scale))


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass
class ArbitrageCertificate:
    """Outcome of exhaustive verification of a strategy.

    Probabilities are exact dyadic fractions.  For a rebased market they are
    conditional on reaching its root (of global depth `root_length`).
    """

    lam: float
    min_terminal_value: float
    profit_probability: Fraction
    witness_path: PathWord
    self_financing_pass: bool
    is_arbitrage: bool
    tolerance: float
    argmin_path: PathWord
    max_terminal_value: float
    min_slack: float
    min_value_any_step: float
    leaves: int
    root_length: int = 0

    def record(self) -> dict:
        return {"lambda": self.lam, "min_terminal_value": self.min_terminal_value,
                "profit_probability": f"{self.profit_probability.numerator}/{self.profit_probability.denominator}",
                "witness_path": str(self.witness_path), "argmin_path": str(self.argmin_path),
                "self_financing_pass": self.self_financing_pass, "is_arbitrage": self.is_arbitrage,
                "tolerance": self.tolerance, "max_terminal_value": self.max_terminal_value,
                "min_slack": self.min_slack, "min_value_any_step": self.min_value_any_step,
                "leaves": self.leaves, "root_length": self.root_length}


def verify_arbitrage_exhaustive(market: MarketModel, strategy: Strategy, lam: float,
                                rtol: float = TIE_RTOL) -> ArbitrageCertificate:
    """Check the arbitrage property of `strategy` on every relevant path.

    Ties are resolved with the absolute tolerance ``rtol`` times the largest
    position notional, so that the verdict does not depend on the price level.
    """
    e = enumerate_strategy(market, strategy, lam)
    tol = rtol * e.scale
    t = e.terminal
    has_off = e.off_mass > 0
    if t.size:
        i_min = int(np.argmin(t))
        i_max = int(np.argmax(t))
        t_min, t_max = float(t[i_min]), float(t[i_max])
    else:
        i_min = i_max = -1
        t_min = t_max = 0.0
    if has_off and (t.size == 0 or t_min > 0.0):
        argmin = _off_anchor_path(e, market)
        min_val = 0.0
    else:
        argmin = e.leaf_path(i_min)
        min_val = t_min
    if has_off:
        t_max = max(t_max, 0.0)
    profit_mask = t > tol
    prob = e.probability(profit_mask)
    sf_min = float(np.min(e.slack_min, initial=0.0))
    sf_pass = sf_min >= -tol
    is_arb = (min_val >= -tol) and prob > 0 and sf_pass
    if min_val < -tol or not profit_mask.any():
        witness = argmin
    else:
        witness = e.leaf_path(int(np.argmax(t)))
    path_min = float(np.min(e.path_min, initial=0.0))
    return ArbitrageCertificate(float(lam), min_val, prob, witness, bool(sf_pass), bool(is_arb), tol,
                                argmin, t_max, sf_min, path_min, int(t.size), market.depth)


def _off_anchor_path(e, market) -> PathWord:
    """Some path of anchor depth avoiding every anchor (where the strategy is zero)."""
    anchors = set(e.anchors)
    d = e.anchor_depth
    # at most 4096 anchors, so 2**13 completions of any prefix contain a free one
    tail = min(d, 13)
    head = e.anchors[0].prefix(d - tail)
    for k in range(1 << tail):
        w = head + index_word(k, tail)
        if w not in anchors:
            return w
    for k in range(1 << min(d, 20)):
        w = index_word(k, d)
        if w not in anchors:
            return w
    return PathWord()


# ---------------------------------------------------------------------------
# census of arbitrage points
# ---------------------------------------------------------------------------

@dataclass
class CensusResult:
    """Counts of level-n arbitrage points: ``Y_n <= -g`` (u) and ``Y_n >= g`` (d)."""

    n: int
    count_u: int
    count_d: int
    ratio: float
    method: str
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    samples: int = 0
    seed: Optional[int] = None

    def csv_row(self):
        return (self.n, self.method, self.count_u, self.count_d, float(self.ratio),
                float(self.ci_low), float(self.ci_high), self.samples,
                "" if self.seed is None else self.seed)


CENSUS_HEADER = ["n", "method", "count_u", "count_d", "ratio", "ci_low", "ci_high", "samples", "seed"]


def _subset_sums(w: np.ndarray) -> np.ndarray:
    """All signed sums sum_c +-w_c, built by doubling (exactly odd under negation)."""
    t = np.zeros(1)
    for c in w:
        t = np.concatenate((t - c, t + c))
    return t


def census_exhaustive(coeffs, n: int) -> CensusResult:
    """Exact census at level n by enumeration of all 2**(n-1) histories.

    The low coordinates are tabulated once and sorted; the remaining high
    coordinates are walked in Gray-code order, one addition per step, and
    each step is counted with two binary searches.
    """
    d = n - 1
    if d < 0:
        raise ValueError("n must be positive")
    if d > CENSUS_EXHAUSTIVE_MAX:
        raise ValueError(f"exhaustive census limited to n - 1 <= {CENSUS_EXHAUSTIVE_MAX}")
    g = coeffs.g(n)
    if d == 0:
        cu = int(0.0 <= -g)
        cd = int(0.0 >= g)
        return CensusResult(n, cu, cd, float(cu + cd), "exhaustive")
    row = np.asarray(coeffs.j_row(n), dtype=float)
    b = min(d, _LOW_BITS)
    high, low = row[:d - b], row[d - b:]
    table = np.sort(_subset_sums(low))
    size = table.size
    signs = -np.ones(high.size)
    base = -math.fsum(high) if high.size else 0.0
    cu = cd = 0
    for step in range(1 << high.size):
        if step:
            k = (step & -step).bit_length() - 1
            signs[k] = -signs[k]
            base += 2.0 * signs[k] * high[k]
        cu += int(np.searchsorted(table, -g - base, side="right"))
        cd += size - int(np.searchsorted(table, g - base, side="left"))
    return CensusResult(n, cu, cd, (cu + cd) / float(1 << d), "exhaustive")


def wilson_interval(hits: int, trials: int, confidence: float = 0.99):
    ci = stats.binomtest(int(hits), int(trials)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def census_monte_carlo(coeffs, n: int, samples: int, seed: int, threads: int = 1,
                       confidence: float = 0.99) -> CensusResult:
    """Monte Carlo estimate of P(|Y_n| >= g(n)) with a Wilson interval."""
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    g = coeffs.g(n)
    row = np.asarray(coeffs.j_row(n), dtype=float) if n > 1 else np.empty(0)

    def work(item):
        c, _, rows = item
        y = sign_chunk(seed, c, rows, n - 1).astype(float) @ row
        return int(np.count_nonzero(y <= -g)), int(np.count_nonzero(y >= g))

    layout = chunk_layout(samples)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, layout))
    else:
        parts = [work(it) for it in layout]
    cu = sum(p[0] for p in parts)
    cd = sum(p[1] for p in parts)
    lo, hi = wilson_interval(cu + cd, samples, confidence)
    return CensusResult(n, cu, cd, (cu + cd) / samples, "monte_carlo", lo, hi, int(samples), int(seed))


def chebyshev_census_bound(params: HurstParams) -> float:
    """(H + 1/2)**2 / c_H**2 - 1, an upper bound for every census ratio."""
    return (params.H + 0.5) ** 2 / normalizing_constant(params) ** 2 - 1.0


@dataclass
class NuEstimate:
    """Largest probed census ratio: a lower estimate of the supremum over all levels."""

    value: float
    details: List[CensusResult]
    note: str = "lower estimate of the supremum (only the probed levels)"


def nu_H_estimate(coeffs, n_list: Sequence[int], mc_samples: int = 100_000, seed: int = 0,
                  threads: int = 1) -> NuEstimate:
    details = []
    for n in n_list:
        if n - 1 <= CENSUS_EXHAUSTIVE_MAX:
            details.append(census_exhaustive(coeffs, n))
        else:
            details.append(census_monte_carlo(coeffs, n, mc_samples, seed, threads))
    vals = [r.ratio if r.method == "exhaustive" else r.ci_high for r in details]
    return NuEstimate(float(max(vals, default=0.0)), details)
