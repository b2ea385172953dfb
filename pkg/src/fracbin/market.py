"""The N-step fractional binary market with zero drift.

A node of the binary tree at level ``n`` is a sign history
``x = (x_1, ..., x_n)``.  The price moves by the factor ``1 + X_n / N**H`` with
``X_n = Y_n(x) + g(n) x_n``, so that the up/down returns at a node are

    u_n(x) = (Y_n(x) + g(n)) / N**H,     d_n(x) = (Y_n(x) - g(n)) / N**H.

Markets can be *rebased* onto a subtree (see :meth:`MarketModel.subtree`): the
local step ``k`` of a subtree rooted at a prefix of length ``m`` is the global
step ``m + k``, with the same ``N**H`` scaling.  This keeps enumeration local
when the root lies deep in a very large tree.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from itertools import groupby
from typing import Iterable, Optional, Sequence

import numpy as np

from .kernels import CoeffTable, HurstParams, column_totals

_SAMPLE_CHUNK = 4096


class PathWord:
    """A finite sequence of signs in {-1, +1}, stored as runs.

    Index 0 holds the first sign ``x_1``.  Strings use ``u`` for +1 and ``d``
    for -1.  Long constant stretches (e.g. an all-down prefix of length 2**28)
    cost O(1) memory.
    """

    __slots__ = ("_runs", "_len")

    def __init__(self, signs: Iterable[int] = ()):
        if isinstance(signs, np.ndarray):
            signs = signs.tolist()
        runs = []
        for s, grp in groupby(signs):
            s = int(s)
            if s not in (-1, 1):
                raise ValueError(f"path entries must be +1 or -1, got {s}")
            runs.append((s, sum(1 for _ in grp)))
        self._set(runs)

    def _set(self, runs):
        merged = []
        for s, k in runs:
            if k <= 0:
                continue
            if merged and merged[-1][0] == s:
                merged[-1] = (s, merged[-1][1] + k)
            else:
                merged.append((s, int(k)))
        self._runs = tuple(merged)
        self._len = sum(k for _, k in merged)

    @classmethod
    def from_runs(cls, runs: Iterable) -> "PathWord":
        """Build from ``(sign, length)`` pairs."""
        w = cls.__new__(cls)
        runs = list(runs)
        for s, _ in runs:
            if s not in (-1, 1):
                raise ValueError("run signs must be +1 or -1")
        w._set(runs)
        return w

    @classmethod
    def from_string(cls, text: str) -> "PathWord":
        table = {"u": 1, "d": -1}
        try:
            return cls(table[c] for c in text.strip())
        except KeyError as exc:
            raise ValueError(f"invalid path character {exc.args[0]!r}; use 'u'/'d'") from None

    @classmethod
    def constant(cls, sign: int, length: int) -> "PathWord":
        return cls.from_runs([(sign, int(length))])

    @classmethod
    def all_down(cls, length: int) -> "PathWord":
        return cls.constant(-1, length)

    @classmethod
    def all_up(cls, length: int) -> "PathWord":
        return cls.constant(1, length)

    @property
    def runs(self) -> tuple:
        return self._runs

    @property
    def signs(self) -> np.ndarray:
        """Materialized int8 array of the signs."""
        if not self._runs:
            return np.empty(0, dtype=np.int8)
        return np.concatenate([np.full(k, s, dtype=np.int8) for s, k in self._runs])

    def __len__(self) -> int:
        return self._len

    def __str__(self) -> str:
        return "".join(("u" if s > 0 else "d") * k for s, k in self._runs)

    def __repr__(self) -> str:
        if self._len <= 40:
            return f"PathWord('{self}')"
        return f"PathWord(runs={self._runs[:4]}{'...' if len(self._runs) > 4 else ''}, len={self._len})"

    def __eq__(self, other) -> bool:
        return isinstance(other, PathWord) and self._runs == other._runs

    def __hash__(self) -> int:
        return hash(self._runs)

    def __add__(self, other: "PathWord") -> "PathWord":
        if not isinstance(other, PathWord):
            other = PathWord(other)
        return PathWord.from_runs(self._runs + other._runs)

    def __getitem__(self, idx: int) -> int:
        if idx < 0:
            idx += self._len
        if not 0 <= idx < self._len:
            raise IndexError("path index out of range")
        pos = 0
        for s, k in self._runs:
            if idx < pos + k:
                return s
            pos += k
        raise IndexError(idx)  # pragma: no cover

    def prefix(self, length: int) -> "PathWord":
        if not 0 <= length <= self._len:
            raise IndexError("prefix length out of range")
        out, left = [], length
        for s, k in self._runs:
            if left <= 0:
                break
            out.append((s, min(k, left)))
            left -= k
        return PathWord.from_runs(out)

    def suffix(self, start: int) -> "PathWord":
        """Signs from index `start` on."""
        if not 0 <= start <= self._len:
            raise IndexError("suffix start out of range")
        out, skip = [], start
        for s, k in self._runs:
            if skip >= k:
                skip -= k
                continue
            out.append((s, k - skip))
            skip = 0
        return PathWord.from_runs(out)

    def startswith(self, other: "PathWord") -> bool:
        return len(other) <= self._len and self.prefix(len(other)) == other

    def negated(self) -> "PathWord":
        return PathWord.from_runs((-s, k) for s, k in self._runs)

    def run_spans(self):
        """Yield ``(sign, lo, hi)`` with the run covering indices ``lo < i <= hi`` (1-based)."""
        pos = 0
        for s, k in self._runs:
            yield s, pos, pos + k
            pos += k


def _as_word(path) -> PathWord:
    if isinstance(path, PathWord):
        return path
    if isinstance(path, str):
        return PathWord.from_string(path)
    return PathWord(path)


def excess_Y(coeffs, n: int, prefix) -> float:
    """Y_n(x) = sum_{i<n} j(n, i) x_i for a prefix of length n - 1."""
    word = _as_word(prefix)
    if len(word) != n - 1:
        raise ValueError(f"prefix length {len(word)} does not match n - 1 = {n - 1}")
    if n == 1:
        return 0.0
    return partial_Y(coeffs, n, word)


def partial_Y(coeffs, n: int, word: PathWord) -> float:
    """sum_{i <= len(word)} j(n, i) word_i for a word shorter than n."""
    if len(word) > n - 1:
        raise ValueError("word too long for row n")
    if len(word) == 0:
        return 0.0
    runs = word.runs
    dense = isinstance(coeffs, CoeffTable) or (len(runs) > 32 and n <= 20000)
    if dense:
        return float(np.dot(coeffs.j_row(n)[:len(word)], word.signs.astype(float)))
    total = 0.0
    for s, lo, hi in word.run_spans():
        total += s * coeffs.j_range_sum(n, lo, hi)
    return total


class MarketModel:
    """An N-step fractional binary market, optionally rebased on a subtree.

    Parameters
    ----------
    coeffs : CoeffTable or CoeffCache
        Source of j(n, i) and g(n); must cover all N steps.
    N : int
        Number of steps of the (global) market; prices scale with ``N**H``.
    s0 : float
        Initial price.
    """

    def __init__(self, coeffs, N: int, s0: float = 1.0, *, _root: Optional[PathWord] = None,
                 _s_root: Optional[float] = None):
        N = int(N)
        if N < 1:
            raise ValueError("N must be positive")
        if N > coeffs.n_max:
            raise ValueError(f"N={N} exceeds the coefficient range n_max={coeffs.n_max}")
        if not (s0 > 0 and math.isfinite(s0)):
            raise ValueError("s0 must be positive")
        self.coeffs = coeffs
        self.N = N
        self.s0 = float(s0)
        self.root = _root if _root is not None else PathWord()
        self.s_root = self.s0 if _s_root is None else float(_s_root)
        self.scale = float(N) ** coeffs.params.H
        self._block = None

    # -- basic properties -------------------------------------------------
    @property
    def params(self) -> HurstParams:
        return self.coeffs.params

    @property
    def depth(self) -> int:
        """Global step of the local origin."""
        return len(self.root)

    @property
    def horizon(self) -> int:
        """Number of local steps."""
        return self.N - self.depth

    def __repr__(self) -> str:
        extra = f", root_len={self.depth}" if self.depth else ""
        return f"MarketModel(H={self.params.H}, sigma={self.params.sigma}, N={self.N}{extra})"

    # -- node quantities ----------------------------------------------------
    def _check_local(self, n: int, prefix: PathWord):
        if not 1 <= n <= self.horizon:
            raise IndexError(f"step {n} outside 1..{self.horizon}")
        if len(prefix) != n - 1:
            raise ValueError(f"prefix length {len(prefix)} does not match n - 1 = {n - 1}")

    def excess_Y(self, n: int, prefix=()) -> float:
        prefix = _as_word(prefix)
        self._check_local(n, prefix)
        return excess_Y(self.coeffs, self.depth + n, self.root + prefix)

    def increment(self, n: int, prefix, sign: int) -> float:
        """X_n = Y_n + g(n) x_n."""
        return self.excess_Y(n, prefix) + self.coeffs.g(self.depth + n) * sign

    def node_moves(self, n: int, prefix=()):
        """Return ``(u, d)`` at local step `n` after `prefix`."""
        prefix = _as_word(prefix)
        y = self.excess_Y(n, prefix)
        g = self.coeffs.g(self.depth + n)
        return (y + g) / self.scale, (y - g) / self.scale

    def price_along_path(self, path) -> np.ndarray:
        """Prices ``(S_0, ..., S_l)`` along `path` (local steps)."""
        word = _as_word(path)
        if len(word) > self.horizon:
            raise ValueError("path longer than the market horizon")
        out = np.empty(len(word) + 1)
        out[0] = self.s_root
        if len(word) == 0:
            return out
        full = self.root + word
        signs = word.signs if len(word) <= 1 << 20 else None
        m = self.depth
        dense = isinstance(self.coeffs, CoeffTable) and signs is not None
        fsigns = full.signs.astype(float) if dense else None
        price = self.s_root
        for k in range(1, len(word) + 1):
            n = m + k
            if dense:
                y = float(np.dot(self.coeffs.j_row(n), fsigns[:n - 1])) if n > 1 else 0.0
            else:
                y = excess_Y(self.coeffs, n, full.prefix(n - 1))
            sign = int(signs[k - 1]) if signs is not None else word[k - 1]
            factor = 1.0 + (y + self.coeffs.g(n) * sign) / self.scale
            if not factor > 0.0:
                raise ValueError(f"nonpositive price at step {k}: 1 + X_n/N^H = {factor:.6g}; "
                                 "market scale N is too small for these coefficients")
            price *= factor
            out[k] = price
        return out

    def subtree(self, prefix, price: Optional[float] = None) -> "MarketModel":
        """Market rebased at the node reached by `prefix`.

        Parameters
        ----------
        prefix : PathWord
            Local path to the new root.
        price : float, optional
            Price at the new root.  Defaults to the actual price; pass 1.0 to
            rebase when the actual price underflows.
        """
        word = _as_word(prefix)
        if len(word) > self.horizon:
            raise ValueError("prefix longer than the market horizon")
        if price is None:
            price = float(self.price_along_path(word)[-1])
        return MarketModel(self.coeffs, self.N, self.s0, _root=self.root + word, _s_root=price)

    # -- vectorized enumeration --------------------------------------------
    def local_block(self, depth: int):
        """Coefficients of the first `depth` local steps.

        Returns
        -------
        offsets : ndarray, shape (depth,)
            ``Y`` contribution of the root prefix at each local step.
        J : ndarray, shape (depth, depth)
            Strictly lower-triangular local weights ``J[k-1, l-1] = j(m+k, m+l)``.
        g : ndarray, shape (depth,)
        """
        if not 0 <= depth <= self.horizon:
            raise ValueError("depth outside the horizon")
        if self._block is not None and self._block[0] >= depth:
            _, off, J, g = self._block
            return off[:depth], J[:depth, :depth], g[:depth]
        m = self.depth
        off = np.empty(depth)
        J = np.zeros((depth, depth))
        g = np.empty(depth)
        for k in range(1, depth + 1):
            n = m + k
            off[k - 1] = partial_Y(self.coeffs, n, self.root)
            if k > 1:
                J[k - 1, :k - 1] = self.coeffs.j_cells(n, np.arange(m + 1, n))
            g[k - 1] = self.coeffs.g(n)
        self._block = (depth, off, J, g)
        return off, J, g

    def leaf_prices(self, depth: int, signs: Optional[np.ndarray] = None):
        """Prices along every sign completion of length `depth`.

        Parameters
        ----------
        depth : int
            Number of local steps to enumerate (at most 24).
        signs : ndarray, optional
            Explicit int8 sign matrix (rows are paths); defaults to all
            ``2**depth`` completions in lexicographic order (``d`` < ``u``).

        Returns
        -------
        signs : ndarray, shape (P, depth)
        prices : ndarray, shape (P, depth + 1)
        """
        if signs is None:
            signs = all_sign_vectors(depth)
        off, J, g = self.local_block(depth)
        x = signs.astype(float)
        X = off[None, :] + x @ J.T + g[None, :] * x
        factors = 1.0 + X / self.scale
        if np.any(factors <= 0.0):
            raise ValueError("nonpositive price in enumeration; market scale N too small")
        prices = np.empty((signs.shape[0], depth + 1))
        prices[:, 0] = self.s_root
        np.cumprod(factors, axis=1, out=prices[:, 1:])
        prices[:, 1:] *= self.s_root
        return signs, prices


def all_sign_vectors(depth: int) -> np.ndarray:
    """All ``2**depth`` sign vectors in lexicographic order, first coordinate slowest."""
    if depth > 24:
        raise ValueError("refusing to enumerate more than 2**24 paths")
    idx = np.arange(1 << depth, dtype=np.int64)
    shifts = np.arange(depth - 1, -1, -1, dtype=np.int64)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def node_moves(market: MarketModel, n: int, prefix=()):
    """``(u_n(x), d_n(x))`` at step `n` after `prefix`."""
    return market.node_moves(n, prefix)


def price_along_path(market: MarketModel, path) -> np.ndarray:
    return market.price_along_path(path)


def sign_chunk(seed: int, chunk: int, rows: int, length: int) -> np.ndarray:
    """Rows of chunk number `chunk` of the sign stream keyed by `seed`.

    Chunk ``c`` draws from a Philox stream keyed by `seed` with ``c`` in the
    high counter word, so chunks never overlap and can be produced in any
    order or in parallel.
    """
    bg = np.random.Philox(key=int(seed) % (1 << 128), counter=[0, 0, 0, int(chunk)])
    bits = np.random.Generator(bg).integers(0, 2, size=(rows, length), dtype=np.int8)
    return 2 * bits - 1


def chunk_layout(count: int):
    """``(chunk index, first row, row count)`` for a stream of `count` rows."""
    return [(c, lo, min(_SAMPLE_CHUNK, count - lo)) for c, lo in enumerate(range(0, count, _SAMPLE_CHUNK))]


def random_signs(count: int, length: int, seed: int, threads: int = 1) -> np.ndarray:
    """i.i.d. uniform signs, deterministic in `seed` and independent of `threads`."""
    if count < 1:
        raise ValueError("count must be positive")
    out = np.empty((count, length), dtype=np.int8)

    def fill(item):
        c, lo, rows = item
        out[lo:lo + rows] = sign_chunk(seed, c, rows, length)

    layout = chunk_layout(count)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, layout))
    else:
        for item in layout:
            fill(item)
    return out


def sample_paths(market: MarketModel, count: int, seed: int, threads: int = 1) -> np.ndarray:
    """`count` uniform paths of the full local horizon as an int8 sign matrix.

    Each row is a path word; wrap with :class:`PathWord` when needed.
    """
    return random_signs(count, market.horizon, seed, threads)


def increment_variance(coeffs, n: int) -> float:
    """Var(X_n) = sum_i j(n, i)**2 + g(n)**2."""
    row = coeffs.j_row(n) if n > 1 else np.empty(0)
    return float(np.dot(row, row) + coeffs.g(n) ** 2)


def excess_variance(coeffs, n: int) -> float:
    """Var(Y_n) = sum_i j(n, i)**2."""
    if n == 1:
        return 0.0
    row = coeffs.j_row(n)
    return float(np.dot(row, row))


def max_abs_increment(coeffs, n: int) -> float:
    """max_x |X_n(x)| = sum_i j(n, i) + g(n), attained at the constant paths."""
    return coeffs.row_sum(n) + coeffs.g(n)


def variance_scaling(params: HurstParams, N: int, quad_tol: float = 1e-10) -> float:
    """V(N) = Var(sum_{k<=N} X_k) / N**(2H).

    Uses the telescoped column totals ``g(i) + sum_{n>i} j(n, i)``, each a
    single nested integral, so the cost is O(N) rather than O(N**2).
    """
    cols = column_totals(N, params, quad_tol)
    return float(math.fsum(cols * cols) / float(N) ** (2.0 * params.H))


def variance_scaling_from_table(table: CoeffTable, N: int) -> float:
    """Same quantity summed directly from a dense table (O(N**2))."""
    cols = np.array([table.g(i) for i in range(1, N + 1)])
    for n in range(2, N + 1):
        cols[:n - 1] += table.j_row(n)
    return float(math.fsum(cols * cols) / float(N) ** (2.0 * table.params.H))
