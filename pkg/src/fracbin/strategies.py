"""Self-financing strategies under proportional transaction costs.

A strategy is a sparse map from tree nodes (path prefixes) to holdings
``(bond units, stock units)``.  A node without a record inherits the holdings
of its parent; the root inherits the start holdings ``(0, 0)``.  Holdings at
step ``n`` therefore depend only on the first ``n`` signs.

With cost ``lam`` the stock is bought at ``S`` and sold at ``(1 - lam) S``:

* budget condition  ``d bond <= -(d stock)^+ S + (1 - lam) (d stock)^- S``
* liquidation value ``V = bond + (1 - lam) stock^+ S - stock^- S``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .market import MarketModel, PathWord, _as_word, all_sign_vectors

MAX_FREE_COORDS = 24
_FULL_MODE_DEPTH = 20
_BLOCK_BITS = 18
TIE_RTOL = 1e-12


def word_index(word: PathWord) -> int:
    """Lexicographic index of a sign word (``d`` = 0 bit, ``u`` = 1 bit)."""
    idx = 0
    for s, k in word.runs:
        idx = (idx << k) | (((1 << k) - 1) if s > 0 else 0)
    return idx


def index_word(index: int, length: int) -> PathWord:
    bits = [(index >> (length - 1 - i)) & 1 for i in range(length)]
    return PathWord(2 * b - 1 for b in bits)


class Strategy:
    """Sparse adapted portfolio process.

    Parameters
    ----------
    records : mapping
        ``PathWord -> (bond, stock)``; a record at a prefix of length ``n``
        sets the holdings from step ``n`` on, for every path through it.
    name : str
        Label used in reports.
    """

    def __init__(self, records: Mapping = None, name: str = ""):
        self._levels: Dict[int, Dict[PathWord, Tuple[float, float]]] = {}
        for key, (bond, stock) in (records or {}).items():
            w = _as_word(key)
            self._levels.setdefault(len(w), {})[w] = (float(bond), float(stock))
        self.name = name

    @property
    def levels(self) -> Dict[int, Dict[PathWord, Tuple[float, float]]]:
        return self._levels

    def records(self):
        """Records sorted by (length, path)."""
        out = []
        for n in sorted(self._levels):
            for w, h in sorted(self._levels[n].items(), key=lambda kv: word_index(kv[0])):
                out.append((w, h))
        return out

    def __len__(self) -> int:
        return sum(len(v) for v in self._levels.values())

    @property
    def first_level(self) -> Optional[int]:
        return min(self._levels) if self._levels else None

    @property
    def last_level(self) -> Optional[int]:
        return max(self._levels) if self._levels else None

    def holdings_along(self, path) -> np.ndarray:
        """Holdings at steps ``0..len(path)``; shape ``(len+1, 2)``."""
        word = _as_word(path)
        out = np.zeros((len(word) + 1, 2))
        cur = (0.0, 0.0)
        for n in range(len(word) + 1):
            recs = self._levels.get(n)
            if recs:
                hit = recs.get(word.prefix(n))
                if hit is not None:
                    cur = hit
            out[n] = cur
        return out

    def scaled(self, q: float) -> "Strategy":
        s = Strategy(name=f"{q:g}*{self.name}" if self.name else "")
        s._levels = {n: {w: (q * b, q * k) for w, (b, k) in recs.items()}
                     for n, recs in self._levels.items()}
        return s

    def csv_rows(self):
        return [(str(w), b, k) for w, (b, k) in self.records()]

    def to_csv(self, path):
        from .io import write_csv

        return write_csv(path, ["prefix", "bond", "stock"], self.csv_rows())


@dataclass
class OneStepSpec:
    """Description of a general one-step strategy.

    Attributes
    ----------
    n : int
        Trading step (the position is opened at ``n`` and closed at ``n + 1``).
    short_mask : ndarray of bool, shape (2**n,)
        Nodes (lexicographic order) in the short set; the rest go long.
    quantity : ndarray, shape (2**n,)
        Non-negative position size per node.
    """

    n: int
    short_mask: np.ndarray
    quantity: np.ndarray

    def __post_init__(self):
        self.n = int(self.n)
        size = 1 << self.n
        self.short_mask = np.asarray(self.short_mask, dtype=bool)
        self.quantity = np.asarray(self.quantity, dtype=float)
        if self.short_mask.shape != (size,) or self.quantity.shape != (size,):
            raise ValueError(f"spec arrays must have length 2**n = {size}")
        if np.any(self.quantity < 0) or not np.all(np.isfinite(self.quantity)):
            raise ValueError("quantities must be finite and non-negative")

    @classmethod
    def from_maps(cls, n: int, short_set: Iterable, quantity: Mapping) -> "OneStepSpec":
        """Build from a set of short nodes and a node -> quantity map (missing = 0)."""
        size = 1 << n
        mask = np.zeros(size, dtype=bool)
        q = np.zeros(size)
        for key in short_set:
            w = _as_word(key)
            if len(w) != n:
                raise ValueError("short-set node has the wrong length")
            mask[word_index(w)] = True
        for key, val in quantity.items():
            w = _as_word(key)
            if len(w) != n:
                raise ValueError("quantity node has the wrong length")
            q[word_index(w)] = val
        return cls(n, mask, q)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, zero_fraction: float = 0.2) -> "OneStepSpec":
        size = 1 << n
        mask = rng.random(size) < 0.5
        q = rng.random(size) * (rng.random(size) >= zero_fraction)
        return cls(n, mask, q)


@dataclass
class ValueSeries:
    values: np.ndarray
    lam: float

    def csv_rows(self):
        return [(k, float(v)) for k, v in enumerate(self.values)]

    def to_csv(self, path):
        from .io import write_csv

        return write_csv(path, ["step", "value"], self.csv_rows())


@dataclass
class SelfFinancingAudit:
    slack: np.ndarray
    tolerance: float
    passed: bool


# ---------------------------------------------------------------------------
# evaluation along one path
# ---------------------------------------------------------------------------

def liquidation_value(bond, stock, price, lam):
    """V = bond + (1 - lam) stock^+ S - stock^- S (vectorized)."""
    return bond + (1.0 - lam) * np.maximum(stock, 0.0) * price - np.maximum(-stock, 0.0) * price


def budget_slack(bond, stock, price, lam):
    """RHS - LHS of the budget condition at every step (last axis is time)."""
    bond = np.asarray(bond, dtype=float)
    stock = np.asarray(stock, dtype=float)
    pad = [(0, 0)] * (bond.ndim - 1) + [(1, 0)]
    d0 = np.diff(np.pad(bond, pad), axis=-1)
    d1 = np.diff(np.pad(stock, pad), axis=-1)
    rhs = -np.maximum(d1, 0.0) * price + (1.0 - lam) * np.maximum(-d1, 0.0) * price
    return rhs - d0


def _check_lam(lam):
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"transaction cost must lie in [0, 1], got {lam}")


def evaluate_value_process(market: MarketModel, strategy: Strategy, path, lam: float) -> ValueSeries:
    """Liquidation values ``V_0..V_N`` along a full path."""
    _check_lam(lam)
    word = _as_word(path)
    if len(word) != market.horizon:
        raise ValueError(f"path must have length {market.horizon}")
    h = strategy.holdings_along(word)
    prices = market.price_along_path(word)
    return ValueSeries(liquidation_value(h[:, 0], h[:, 1], prices, lam), float(lam))


def _scale_of(bond, stock, price) -> float:
    vals = [np.max(np.abs(stock) * price, initial=0.0), np.max(np.abs(bond), initial=0.0)]
    return float(max(vals))


def check_self_financing(market: MarketModel, strategy: Strategy, path, lam: float,
                         rtol: float = TIE_RTOL) -> SelfFinancingAudit:
    """Per-step slack of the budget condition along a path.

    The pass threshold is ``-rtol`` times the portfolio scale (largest bond
    position or stock notional on the path), so that the check is invariant
    under rescaling prices.
    """
    _check_lam(lam)
    word = _as_word(path)
    if len(word) != market.horizon:
        raise ValueError(f"path must have length {market.horizon}")
    h = strategy.holdings_along(word)
    prices = market.price_along_path(word)
    slack = budget_slack(h[:, 0], h[:, 1], prices, lam)
    tol = rtol * _scale_of(h[:, 0], h[:, 1], prices)
    return SelfFinancingAudit(slack, tol, bool(np.all(slack >= -tol)))


# ---------------------------------------------------------------------------
# named strategies
# ---------------------------------------------------------------------------

def event_short_strategy(market: MarketModel, lam: float, event, hold: int,
                         quantity: float = 1.0, name: str = "") -> Strategy:
    """Short `quantity` units at the node `event`, buy back `hold` steps later.

    The short sale raises ``(1 - lam) q S`` in bonds; the buy-back pays the
    ask price.  Both trades exhaust the budget condition.
    """
    _check_lam(lam)
    event = _as_word(event)
    hold = int(hold)
    if hold < 1:
        raise ValueError("holding period must be at least one step")
    if hold > MAX_FREE_COORDS:
        raise ValueError("holding period too long to store liquidation records")
    if len(event) + hold > market.horizon:
        raise ValueError(f"liquidation at step {len(event) + hold} beyond horizon {market.horizon}")
    s_e = float(market.price_along_path(event)[-1])
    sub = market.subtree(event, price=s_e)
    signs, prices = sub.leaf_prices(hold)
    q = float(quantity)
    bond_open = (1.0 - lam) * q * s_e
    records = {event: (bond_open, -q)}
    for row, s_end in zip(signs, prices[:, -1]):
        records[event + PathWord(row)] = (bond_open - q * s_end, 0.0)
    return Strategy(records, name=name or f"short@{len(event)}+{hold}")


def sottinen_strategy(market: MarketModel, lam: float, n0: int) -> Strategy:
    """One unit short at step ``n0 - 1`` on the all-down node, closed at ``n0``."""
    n0 = int(n0)
    if not 1 <= n0 <= market.horizon:
        raise IndexError(f"n0 must lie in 1..{market.horizon}")
    return event_short_strategy(market, lam, PathWord.all_down(n0 - 1), 1, name=f"sottinen(n0={n0})")


def gamma_strategy(market: MarketModel, lam: float, gamma: float, hold: Optional[int] = None) -> Strategy:
    """Short at ``floor(gamma N)`` after an all-down history, close ``floor(P_gamma N)`` steps later.

    `market` may be rebased on a prefix of the all-down path (useful when the
    actual price at ``floor(gamma N)`` underflows); the event is then taken
    relative to that root.  `hold` overrides ``floor(P_gamma N)``.
    """
    from .arbitrage import gamma_constants

    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    N = market.N
    m = int(math.floor(gamma * N))
    if m < 1:
        raise ValueError("floor(gamma N) must be at least 1")
    if hold is None:
        hold = int(math.floor(gamma_constants(market.params, gamma).P_gamma * N))
        if hold < 1:
            raise ValueError(f"floor(P_gamma N) = 0 at N={N}: the strategy never trades")
    if not (market.root == PathWord.all_down(market.depth) and market.depth <= m):
        raise ValueError("market root must be an all-down prefix of length <= floor(gamma N)")
    event = PathWord.all_down(m - market.depth)
    return event_short_strategy(market, lam, event, hold, name=f"gamma(gamma={gamma:g}, hold={hold})")


def scaled_strategy(strategy: Strategy, q: float) -> Strategy:
    """All holdings multiplied by ``q > 0``."""
    if not q > 0:
        raise ValueError("scale must be positive")
    return strategy.scaled(float(q))


def one_step_strategy(market: MarketModel, lam: float, spec: OneStepSpec) -> Strategy:
    """Open short (on the short set) or long positions at step n, close at n + 1."""
    _check_lam(lam)
    n = spec.n
    if not 1 <= n <= market.horizon - 1:
        raise ValueError(f"trading step must lie in 1..{market.horizon - 1}")
    if n + 1 > _FULL_MODE_DEPTH:
        raise ValueError("one-step specs are enumerated node by node; n + 1 must be <= 20")
    signs, prices = market.leaf_prices(n + 1)
    # leaf 2k and 2k+1 are the d/u children of node k
    s_n = prices[0::2, n]
    s_next = prices[:, n + 1].reshape(-1, 2)
    records = {}
    for k in np.flatnonzero(spec.quantity > 0):
        q = float(spec.quantity[k])
        node = PathWord(signs[2 * k, :n])
        s = float(s_n[k])
        if spec.short_mask[k]:
            records[node] = ((1.0 - lam) * q * s, -q)
            for c, s1 in zip((-1, 1), s_next[k]):
                records[node + PathWord([c])] = (((1.0 - lam) * s - s1) * q, 0.0)
        else:
            records[node] = (-q * s, q)
            for c, s1 in zip((-1, 1), s_next[k]):
                records[node + PathWord([c])] = (-(s - (1.0 - lam) * s1) * q, 0.0)
    return Strategy(records, name=f"one-step(n={n})")


# ---------------------------------------------------------------------------
# exhaustive evaluation
# ---------------------------------------------------------------------------

@dataclass
class Enumeration:
    """Terminal values of a strategy over every relevant path.

    Each enumerated leaf stands for the set of full paths sharing its first
    ``leaf_depth`` signs (probability ``2**-leaf_depth``).  Paths outside all
    enumerated anchors carry the zero portfolio and total mass `off_mass`.
    """

    terminal: np.ndarray
    path_min: np.ndarray
    slack_min: np.ndarray
    leaf_depth: int
    anchors: list
    anchor_depth: int
    off_mass: Fraction
    scale: float
    lam: float
    first_trade_values: Optional[np.ndarray] = None

    @property
    def leaves_per_anchor(self) -> int:
        return 1 << (self.leaf_depth - self.anchor_depth)

    def leaf_path(self, idx: int) -> PathWord:
        a, r = divmod(int(idx), self.leaves_per_anchor)
        return self.anchors[a] + index_word(r, self.leaf_depth - self.anchor_depth)

    def probability(self, mask: np.ndarray, include_off: bool = False) -> Fraction:
        """Exact probability of the leaves selected by `mask` (plus the zero paths)."""
        p = Fraction(int(np.count_nonzero(mask)), 1 << self.leaf_depth)
        return p + self.off_mass if include_off else p


def _holdings_block(levels, idx, D, root_hold=(0.0, 0.0)):
    """Forward-filled holdings for leaves `idx` of a depth-`D` enumeration."""
    P = idx.size
    H0 = np.empty((P, D + 1))
    H1 = np.empty((P, D + 1))
    cur0 = np.full(P, root_hold[0])
    cur1 = np.full(P, root_hold[1])
    for n in range(D + 1):
        recs = levels.get(n)
        if recs:
            size = 1 << n
            b = np.zeros(size)
            s = np.zeros(size)
            present = np.zeros(size, dtype=bool)
            for w, (bond, stock) in recs.items():
                k = word_index(w)
                b[k], s[k], present[k] = bond, stock, True
            node = idx >> (D - n)
            hit = present[node]
            cur0 = np.where(hit, b[node], cur0)
            cur1 = np.where(hit, s[node], cur1)
        H0[:, n] = cur0
        H1[:, n] = cur1
    return H0, H1


def _enumerate_local(market: MarketModel, levels, D, lam):
    """Evaluate a strategy (local records) over all 2**D completions."""
    P = 1 << D
    terminal = np.empty(P)
    path_min = np.empty(P)
    slack_min = np.empty(P)
    scale = 0.0
    open_stock = 0.0
    block = 1 << min(D, _BLOCK_BITS)
    for start in range(0, P, block):
        idx = np.arange(start, start + block, dtype=np.int64)
        shifts = np.arange(D - 1, -1, -1, dtype=np.int64)
        signs = (2 * ((idx[:, None] >> shifts[None, :]) & 1) - 1).astype(np.int8)
        _, prices = market.leaf_prices(D, signs)
        H0, H1 = _holdings_block(levels, idx, D)
        V = liquidation_value(H0, H1, prices, lam)
        sl = budget_slack(H0, H1, prices, lam)
        terminal[start:start + block] = V[:, -1]
        path_min[start:start + block] = np.minimum(V.min(axis=1), 0.0)
        slack_min[start:start + block] = sl.min(axis=1)
        scale = max(scale, _scale_of(H0, H1, prices))
        open_stock = max(open_stock, float(np.max(np.abs(H1[:, -1]))))
    return terminal, path_min, slack_min, scale, open_stock


def enumerate_strategy(market: MarketModel, strategy: Strategy, lam: float) -> Enumeration:
    """Evaluate `strategy` on every relevant path of `market` exactly.

    Small trees (depth <= 20) are enumerated from the root.  Otherwise the
    enumeration starts at the shallowest recorded nodes ("anchors"), below
    which at most 24 signs may matter; outside the anchors the strategy is
    identically zero.
    """
    _check_lam(lam)
    if len(strategy) == 0:
        return Enumeration(np.empty(0), np.empty(0), np.empty(0), 0, [PathWord()], 0,
                           Fraction(1), 0.0, float(lam))
    lo, hi = strategy.first_level, strategy.last_level
    if hi > market.horizon:
        raise ValueError("strategy records exceed the market horizon")
    return _enumerate(market, strategy, lam, lo, hi)


def _enumerate(market, strategy, lam, lo, hi):
    anchors = sorted({w.prefix(lo) for recs in strategy.levels.values() for w in recs},
                     key=word_index)
    if hi <= _FULL_MODE_DEPTH or (hi <= MAX_FREE_COORDS and len(anchors) > 4096):
        t, pm, sm, scale, open_stock = _enumerate_local(market, strategy.levels, hi, lam)
        if open_stock != 0.0 and hi < market.horizon:
            # positions still open after the last record are carried to maturity
            return _enumerate(market, strategy, lam, lo, market.horizon)
        return Enumeration(t, pm, sm, hi, [PathWord()], 0, Fraction(0), scale, float(lam))
    free = hi - lo
    if free > MAX_FREE_COORDS:
        raise ValueError(f"strategy support spans {free} free signs (limit {MAX_FREE_COORDS})")
    if len(anchors) > 4096:
        raise ValueError("too many anchor nodes for exhaustive enumeration")
    parts = []
    scale = 0.0
    for a in anchors:
        local = {}
        for n, recs in strategy.levels.items():
            for w, h in recs.items():
                if w.startswith(a):
                    local.setdefault(n - lo, {})[w.suffix(lo)] = h
        sub = market.subtree(a)
        t, pm, sm, sc, open_stock = _enumerate_local(sub, local, free, lam)
        if open_stock != 0.0 and hi < market.horizon:
            return _enumerate(market, strategy, lam, lo, market.horizon)
        parts.append((t, pm, sm))
        scale = max(scale, sc)
    off = 1 - Fraction(len(anchors), 1 << lo)
    cat = [np.concatenate([p[k] for p in parts]) for k in range(3)]
    return Enumeration(cat[0], cat[1], cat[2], hi, anchors, lo, off, scale, float(lam))


def terminal_values_all_leaves(market: MarketModel, strategy: Strategy, lam: float) -> np.ndarray:
    """V_N on each of the 2**N leaves of a small market (N <= 20)."""
    if market.horizon > _FULL_MODE_DEPTH:
        raise ValueError("full leaf evaluation limited to horizons <= 20")
    return _enumerate_local(market, strategy.levels, market.horizon, lam)[0]
