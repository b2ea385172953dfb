import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fracbin.kernels import HurstParams, build_coeff_table
from fracbin.market import (MarketModel, PathWord, all_sign_vectors, excess_Y, excess_variance,
                            increment_variance, max_abs_increment, node_moves, price_along_path,
                            random_signs, sample_paths, variance_scaling,
                            variance_scaling_from_table)
from oracles import all_paths

words = st.lists(st.sampled_from([-1, 1]), max_size=60)


# -- PathWord ------------------------------------------------------------------

@given(words)
def test_pathword_roundtrip(signs):
    w = PathWord(signs)
    assert len(w) == len(signs)
    assert list(w.signs) == signs
    assert PathWord.from_string(str(w)) == w
    assert w.negated().negated() == w
    for k in range(len(signs) + 1):
        assert w.prefix(k) + w.suffix(k) == w


def test_pathword_strings_and_errors():
    w = PathWord.from_string("ddu")
    assert list(w.signs) == [-1, -1, 1]
    assert w[2] == 1 and w[-1] == 1
    assert PathWord.all_down(3) == PathWord.from_string("ddd")
    with pytest.raises(ValueError):
        PathWord([0, 1])
    with pytest.raises(ValueError):
        PathWord.from_string("dx")


def test_pathword_huge_constant_is_cheap():
    w = PathWord.all_down(2 ** 40)
    assert len(w) == 2 ** 40 and len(w.runs) == 1
    assert (w + PathWord.all_up(3)).suffix(2 ** 40) == PathWord.all_up(3)


# -- excess and moves ----------------------------------------------------------------

def test_excess_empty_prefix(small75):
    assert excess_Y(small75, 1, PathWord()) == 0.0


def test_excess_all_down(small75):
    n = 12
    assert excess_Y(small75, n, PathWord.all_down(n - 1)) == pytest.approx(-small75.row_sum(n), rel=1e-14)


@given(signs=st.lists(st.sampled_from([-1, 1]), min_size=11, max_size=11))
def test_excess_odd(signs, small75):
    w = PathWord(signs)
    assert excess_Y(small75, 12, w.negated()) == -excess_Y(small75, 12, w)


def test_excess_length_mismatch(small75):
    with pytest.raises(ValueError):
        excess_Y(small75, 5, PathWord.all_down(3))


def test_root_is_not_arbitrage_point(small75):
    m = MarketModel(small75, 20)
    u, d = node_moves(m, 1)
    assert u == pytest.approx(small75.g(1) / 20 ** 0.75)
    assert u > 0 > d


def test_all_down_moves_negative_from_n_H(table75):
    from fracbin.arbitrage import find_n_H

    nH = find_n_H(table75, 500)
    m = MarketModel(table75, 500)
    for n in range(nH, 501, 7):
        u, _ = m.node_moves(n, PathWord.all_down(n - 1))
        assert u < 0


def test_moves_scale_with_N(small75):
    w = PathWord.from_string("dudd")
    u1, d1 = MarketModel(small75, 16).node_moves(5, w)
    u2, d2 = MarketModel(small75, 32).node_moves(5, w)
    assert u2 == pytest.approx(u1 * 2 ** -0.75, rel=1e-14)
    assert d2 == pytest.approx(d1 * 2 ** -0.75, rel=1e-14)


@given(signs=st.lists(st.sampled_from([-1, 1]), min_size=0, max_size=30))
def test_node_invariants(signs, small75):
    m = MarketModel(small75, 40)
    n = len(signs) + 1
    u, d = m.node_moves(n, PathWord(signs))
    assert d < u
    assert u - d == pytest.approx(2 * small75.g(n) / m.scale, rel=1e-12)
    # |X_n| <= c_X n**alpha, extremes at the constant paths
    assert max(abs(u), abs(d)) * m.scale <= max_abs_increment(small75, n) + 1e-12
    assert max_abs_increment(small75, n) <= small75.c_X * n ** 0.25


# -- prices -------------------------------------------------------------------------

def test_empty_path_price(small75):
    assert list(MarketModel(small75, 10, 2.5).price_along_path(PathWord())) == [2.5]


def test_all_down_product(small75):
    N, n = 30, 9
    m = MarketModel(small75, N)
    expected = 1.0
    for k in range(1, n + 1):
        expected *= 1 - (small75.row_sum(k) + small75.g(k)) / N ** 0.75
    assert price_along_path(m, PathWord.all_down(n))[-1] == pytest.approx(expected, rel=1e-13)


def test_leaf_prices_against_oracle_recomputation(oracle10, small75):
    N = 8
    m = MarketModel(small75, N)
    signs, prices = m.leaf_prices(N)
    assert signs.shape == (256, 8)
    for row, pr in zip(signs, prices):
        ref = oracle10.prices(N, list(row))
        # the table is integrated to quad_tol = 1e-10
        np.testing.assert_allclose(pr, ref, rtol=10 * small75.quad_tol)


def test_leaf_prices_match_path_evaluation(small75):
    m = MarketModel(small75, 12, 3.0)
    signs, prices = m.leaf_prices(12)
    for k in (0, 17, 1000, 4095):
        np.testing.assert_allclose(prices[k], m.price_along_path(PathWord(signs[k])), rtol=1e-13)


def test_nonpositive_price_rejected():
    # sigma = 3 makes g(1) exceed N**H at N = 2
    m = MarketModel(build_coeff_table(3, HurstParams(0.75, 3.0)), 2)
    with pytest.raises(ValueError, match="nonpositive"):
        m.price_along_path(PathWord.all_down(1))
    with pytest.raises(ValueError, match="nonpositive"):
        m.leaf_prices(2)


def test_market_validation(small75):
    with pytest.raises(ValueError):
        MarketModel(small75, 41)
    with pytest.raises(ValueError):
        MarketModel(small75, 10, s0=0.0)
    with pytest.raises(ValueError):
        MarketModel(small75, 5).price_along_path(PathWord.all_down(6))


def test_subtree_is_consistent(small75):
    m = MarketModel(small75, 30)
    root = PathWord.from_string("ddudd")
    sub = m.subtree(root)
    tail = PathWord.from_string("udu")
    full = m.price_along_path(root + tail)
    local = sub.price_along_path(tail)
    np.testing.assert_allclose(local, full[5:], rtol=1e-13)
    rebased = m.subtree(root, price=1.0).price_along_path(tail)
    np.testing.assert_allclose(rebased * full[5], full[5:], rtol=1e-13)


def test_sign_vectors_order():
    v = all_sign_vectors(3)
    assert v.shape == (8, 3)
    assert list(v[0]) == [-1, -1, -1] and list(v[1]) == [-1, -1, 1] and list(v[-1]) == [1, 1, 1]
    assert [list(r) for r in v] == all_paths(3)


# -- sampling -----------------------------------------------------------------------

def test_sampling_deterministic_and_thread_independent(small75):
    m = MarketModel(small75, 20)
    a = sample_paths(m, 10_000, seed=7)
    b = sample_paths(m, 10_000, seed=7, threads=3)
    c = sample_paths(m, 10_000, seed=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampled_coordinates_centred():
    x = random_signs(100_000, 30, seed=1).astype(float)
    assert np.all(np.abs(x.mean(axis=0)) <= 4 / math.sqrt(100_000))


def test_sampled_excess_variance(table75):
    n = 50
    x = random_signs(100_000, n - 1, seed=3).astype(float)
    y = x @ table75.j_row(n)
    assert y.var() == pytest.approx(excess_variance(table75, n), rel=0.05)


def test_increment_variance_formula(table75):
    n = 40
    row = table75.j_row(n)
    assert increment_variance(table75, n) == pytest.approx(np.dot(row, row) + table75.g(n) ** 2)
    x = random_signs(200_000, n, seed=11).astype(float)
    X = x[:, :-1] @ row + table75.g(n) * x[:, -1]
    assert X.var() == pytest.approx(increment_variance(table75, n), rel=0.02)


# -- variance scaling ---------------------------------------------------------------

def test_variance_scaling_routes_agree(table75, p75):
    for N in (64, 500):
        assert variance_scaling(p75, N) == pytest.approx(variance_scaling_from_table(table75, N), rel=1e-10)


def test_variance_scaling_sigma_squared():
    a = variance_scaling(HurstParams(0.75, 1.0), 256)
    b = variance_scaling(HurstParams(0.75, 3.0), 256)
    assert b == pytest.approx(9 * a, rel=1e-12)
