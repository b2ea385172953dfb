import math
from fractions import Fraction

import numpy as np
import pytest

from fracbin.arbitrage import census_exhaustive, lambda_phi, theta, verify_arbitrage_exhaustive
from fracbin.asymptotics import (AA1_HEADER, AA1Schedule, aa1_schedule, aa1_verify, aa2_bound_exact,
                                 aa2_check, aa2_upper_bound, no_arbitrage_threshold, threshold_chain)
from fracbin.market import MarketModel, PathWord
from fracbin.strategies import OneStepSpec, one_step_strategy, sottinen_strategy
from oracles import all_paths, fit_slope


# -- schedules ----------------------------------------------------------------------------

def test_schedule_default_midpoint():
    s = aa1_schedule(0.75, 1.25, [64, 128])
    assert s.q_exponent == pytest.approx(1.0)
    assert s.risk_exponent == pytest.approx(-0.25)
    assert s.gain_exponent == pytest.approx(0.25)
    assert s.lam(64) == pytest.approx(64 ** -1.25)
    assert s.size(64) == pytest.approx(64.0)


@pytest.mark.parametrize("kw", [dict(p=0.75), dict(p=0.7), dict(p=1.25, q_exponent=0.75),
                                dict(p=1.25, q_exponent=1.25), dict(p=1.25, q_exponent=2.0)])
def test_schedule_rejects_bad_exponents(kw):
    with pytest.raises(ValueError):
        aa1_schedule(0.75, kw.pop("p"), [64], **kw)


def test_schedule_rejects_bad_grid():
    with pytest.raises(ValueError):
        AA1Schedule(0.75, 1.25, 1.0, ())
    with pytest.raises(ValueError):
        AA1Schedule(0.75, 1.25, 1.0, (1, 64))


# -- AA1 on small grids ----------------------------------------------------------------

def test_aa1_row_quantities(table75):
    s = aa1_schedule(0.75, 1.25, [64, 256])
    rep = aa1_verify(table75, s)
    assert rep.n_H == 5
    for r in rep.rows:
        m = MarketModel(table75, r.N)
        S = m.price_along_path(PathWord.all_down(4))[-1]
        assert r.c_N == pytest.approx(r.lambda_N * r.q_N * S, rel=1e-14)
        assert r.C_N == pytest.approx(r.q_N * S * (lambda_phi(m, 5) - r.lambda_N), rel=1e-12)
        assert r.admissible and r.bound_attained
        # the up-continuation gains exactly C_N
        assert r.gain_on_event == pytest.approx(r.C_N, rel=1e-10)
    assert [row[0] for row in rep.csv_rows()] == [64, 256]
    assert len(AA1_HEADER) == len(rep.csv_rows()[0])


def test_aa1_literal_probability_when_gain_level_negative(table75):
    # on small N the gain level is negative and every path clears it
    rep = aa1_verify(table75, aa1_schedule(0.75, 1.25, [64, 128, 256]))
    assert not rep.C_positive
    assert all(r.profit_probability == 1 for r in rep.rows)
    assert rep.summary()["probability_matches"] is False


def test_aa1_extended_grid(cache75):
    grid = [2 ** e for e in range(20, 31, 2)]
    rep = aa1_verify(cache75, aa1_schedule(0.75, 1.25, grid), n_H=5)
    assert rep.C_positive
    assert all(r.admissible and r.bound_attained for r in rep.rows)
    assert all(r.profit_probability == Fraction(1, 16) for r in rep.rows)
    s = rep.summary()
    assert s["probability_matches"] and s["all_admissible"]
    assert abs(rep.slope_c - s["expected_slope_c"]) <= 0.2 * abs(s["expected_slope_c"])
    assert abs(rep.slope_C - s["expected_slope_C"]) <= 0.2 * abs(s["expected_slope_C"])
    # independent slope fit on the reported columns
    Ns = [r.N for r in rep.rows]
    assert fit_slope(Ns, [r.c_N for r in rep.rows]) == pytest.approx(rep.slope_c, rel=1e-10)
    assert fit_slope(Ns, [r.C_N for r in rep.rows]) == pytest.approx(rep.slope_C, rel=1e-10)


def test_aa1_grid_below_n_H(table75):
    with pytest.raises(ValueError):
        aa1_verify(table75, aa1_schedule(0.75, 1.25, [4, 64]))


def test_aa1_H_mismatch(table75):
    with pytest.raises(ValueError):
        aa1_verify(table75, aa1_schedule(0.8, 1.25, [64]))


# -- no-arbitrage regime -----------------------------------------------------------------

@pytest.mark.parametrize("N", [64, 256, 500])
def test_threshold_chain(table75, N):
    chain = threshold_chain(MarketModel(table75, N))
    assert chain["consistent"]
    assert chain["exact"] <= chain["row_bound"] <= chain["c_X_bound"]
    assert chain["c_X_bound"] == pytest.approx(table75.c_X / math.sqrt(N), rel=1e-15)


def test_threshold_times_sqrt_N_constant(table75):
    vals = [no_arbitrage_threshold(MarketModel(table75, N)) * math.sqrt(N) for N in (16, 64, 256, 500)]
    assert max(vals) - min(vals) <= 1e-14 * vals[0]
    assert vals[0] == pytest.approx(2.2819085547349127, rel=1e-12)


def test_no_one_step_gain_at_threshold(table75):
    N = 64
    m = MarketModel(table75, N)
    lam = no_arbitrage_threshold(m)
    for n0 in range(1, N + 1, 3):
        cert = verify_arbitrage_exhaustive(m, sottinen_strategy(m, lam, n0), lam)
        assert not cert.is_arbitrage
        assert cert.max_terminal_value <= 0.0


def test_no_random_one_step_gain_at_threshold(small75):
    N = 8
    m = MarketModel(small75, N)
    lam = no_arbitrage_threshold(m)
    rng = np.random.default_rng(17)
    for _ in range(10):
        spec = OneStepSpec.random(int(rng.integers(1, N)), rng)
        cert = verify_arbitrage_exhaustive(m, one_step_strategy(m, lam, spec), lam)
        assert not cert.is_arbitrage


# -- frictionless second-kind bound --------------------------------------------------

def test_aa2_bound_formula(table75):
    n = 12
    c = census_exhaustive(table75, n + 1)
    assert aa2_bound_exact(table75, n) == Fraction(1, 2) + Fraction(c.count_u + c.count_d, 2 ** (n + 1))
    assert aa2_upper_bound(table75, 12) == pytest.approx(0.530029296875, abs=1e-15)


def test_aa2_bound_without_arbitrage_points(table75):
    # level 2 has no arbitrage points: the bound is exactly one half
    assert census_exhaustive(table75, 2).count_u == 0
    assert aa2_upper_bound(table75, 1) == 0.5
    with pytest.raises(ValueError):
        aa2_bound_exact(table75, 0)


def test_aa2_check_against_oracle_prices(small75, oracle10):
    N = 8
    m = MarketModel(small75, N)
    rng = np.random.default_rng(99)
    for n in (2, 5, 7):
        spec = OneStepSpec.random(n, rng)
        res = aa2_check(m, spec)
        assert res.holds
        hits = 0
        for path in all_paths(N):
            pr = oracle10.prices(N, path)
            node = sum((1 << (n - 1 - i)) for i, x in enumerate(path[:n]) if x == 1)
            q = spec.quantity[node]
            v = q * (pr[n] - pr[n + 1]) if spec.short_mask[node] else q * (pr[n + 1] - pr[n])
            hits += v >= res.alpha
        assert res.probability == Fraction(hits, 2 ** N)


def test_aa2_check_random_specs(small75):
    m = MarketModel(small75, 14)
    rng = np.random.default_rng(7)
    for _ in range(20):
        spec = OneStepSpec.random(int(rng.integers(1, 13)), rng)
        res = aa2_check(m, spec)
        assert res.holds and res.probability <= res.bound
    with pytest.raises(ValueError):
        aa2_check(m, OneStepSpec.random(3, rng), alpha=0.0)


def test_theta_at_n_H_positive(table75):
    assert theta(table75, 5) > 0 > theta(table75, 4)
