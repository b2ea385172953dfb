"""Market coefficients of the fractional binary market.

The increments of the disturbed random walk are ``X_n = Y_n + g(n) xi_n`` with
``Y_n = sum_{i<n} j(n, i) xi_i``.  Both ``j(n, i)`` and ``g(n)`` are nested
integrals of the Molchan-Golosov type kernel

    z(t, s) = sigma c_H alpha s**(-alpha) int_s^t u**alpha (u - s)**(alpha - 1) du,

namely

    j(n, i) = int_{i-1}^{i} [z(n, s) - z(n-1, s)] ds,     g(n) = int_{n-1}^{n} z(n, s) ds.

All of them are evaluated with nested tanh-sinh quadrature, which handles the
algebraic endpoint singularities without splitting.  Two exact identities
follow from Fubini and are exposed as cheap checks:

* row total   ``sum_{i<n} j(n, i) + g(n) = c_star I(1) / (alpha+1) (n**(alpha+1) - (n-1)**(alpha+1))``
* column total ``g(i) + sum_{i<n<=M} j(n, i) = int_{i-1}^{i} z(M, s) ds``
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import special

from .quadrature import (QuadratureError, error_estimate, nested_estimates,
                         t_max_for_exponent, tanh_sinh_rule)

DEFAULT_QUAD_TOL = 1e-10
DEFAULT_TABLE_CAP = 4096
_START_LEVEL = 3
_MAX_LEVEL = 7
# bound on the number of pow() evaluations held in memory at once
_CHUNK = 1 << 21


@dataclass(frozen=True)
class HurstParams:
    """Hurst exponent and volatility of the market.

    Parameters
    ----------
    H : float
        Hurst exponent, strictly between 1/2 and 1.
    sigma : float
        Volatility, positive.
    """

    H: float
    sigma: float = 1.0
    alpha: float = field(init=False)

    def __post_init__(self):
        H, sigma = float(self.H), float(self.sigma)
        if not (0.5 < H < 1.0):
            raise ValueError(f"Hurst exponent must lie in (1/2, 1), got {self.H}")
        if not (sigma > 0.0 and math.isfinite(sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "alpha", H - 0.5)


def _as_params(params) -> HurstParams:
    if isinstance(params, HurstParams):
        return params
    return HurstParams(float(params))


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def normalizing_constant(params) -> float:
    """c_H = sqrt(2H Gamma(3/2-H) / (Gamma(H+1/2) Gamma(2-2H)))."""
    H = _as_params(params).H
    return math.sqrt(2.0 * H * math.gamma(1.5 - H) / (math.gamma(H + 0.5) * math.gamma(2.0 - 2.0 * H)))


def beta_total(params) -> float:
    """I(1) = B(1-alpha, 1+alpha) = alpha pi / sin(alpha pi)."""
    a = _as_params(params).alpha
    return a * math.pi / math.sin(a * math.pi)


def incomplete_beta_I(z, params):
    """I(z) = int_0^z v**(-alpha) (1-v)**alpha dv.

    Accepts scalars or arrays with entries in [0, 1].
    """
    a = _as_params(params).alpha
    z_arr = np.asarray(z, dtype=float)
    if np.any(~((z_arr >= 0.0) & (z_arr <= 1.0))):
        raise ValueError("I(z) requires 0 <= z <= 1")
    out = beta_total(params) * special.betainc(1.0 - a, 1.0 + a, z_arr)
    return float(out) if out.ndim == 0 else out


def _tail_I(w, alpha, total):
    # int_{1-w}^1 u**(-alpha) (1-u)**alpha du, accurate for small w
    return total * special.betainc(1.0 + alpha, 1.0 - alpha, w)


def gap_function_G(z, params):
    """G(z) = I(z) - (1-z)**alpha z**(1-alpha) on the open interval (0, 1)."""
    a = _as_params(params).alpha
    z_arr = np.asarray(z, dtype=float)
    if np.any(~((z_arr > 0.0) & (z_arr < 1.0))):
        raise ValueError("G(z) requires 0 < z < 1")
    out = incomplete_beta_I(z_arr, params) - (1.0 - z_arr) ** a * z_arr ** (1.0 - a)
    return float(out) if np.ndim(out) == 0 else out


def phi_integral(m, k, params):
    """Closed form of int_0^m x**(-alpha) [(m+k-x)**alpha - (m+k-1-x)**alpha] dx.

    Equals ``(m+k) I(m/(m+k)) - (m+k-1) I(m/(m+k-1))``.  Near z = 1 the
    complementary tail of I is used so that the two large terms cancel
    analytically.  Vectorized over `m` and `k`; ``m = 0`` gives 0.
    """
    p = _as_params(params)
    a = p.alpha
    total = beta_total(p)
    m_arr, k_arr = np.broadcast_arrays(np.asarray(m, dtype=float), np.asarray(k, dtype=float))
    if np.any(m_arr < 0) or np.any(k_arr < 1):
        raise ValueError("phi_integral requires m >= 0 and k >= 1")
    n = m_arr + k_arr
    with np.errstate(invalid="ignore", divide="ignore"):
        z1 = np.where(n > 0, m_arr / n, 0.0)
        z2 = np.where(n - 1 > 0, m_arr / np.maximum(n - 1, 1.0), 0.0)
        direct = (n * total * special.betainc(1.0 - a, 1.0 + a, z1)
                  - (n - 1) * total * special.betainc(1.0 - a, 1.0 + a, np.minimum(z2, 1.0)))
        w1 = k_arr / n
        w2 = (k_arr - 1.0) / np.maximum(n - 1, 1.0)
        complement = total - n * _tail_I(w1, a, total) + (n - 1) * _tail_I(w2, a, total)
    out = np.where(z1 <= 0.5, direct, complement)
    out = np.where(m_arr == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def sandwich_weights(n: int, params) -> np.ndarray:
    """I_n(i) = int_{i-1}^{i} x**(-alpha) phi_n(x) dx for i = 1..n-1."""
    i = np.arange(0, n, dtype=float)
    cum = phi_integral(i, n - i, params)
    return np.diff(cum)


def row_total_closed_form(n, params):
    """sum_{i<n} j(n, i) + g(n) in closed form (exact identity).

    Equals ``c_star I(1) / (alpha+1) * (n**(alpha+1) - (n-1)**(alpha+1))``.
    """
    p = _as_params(params)
    a1 = p.alpha + 1.0
    n_arr = np.asarray(n, dtype=float)
    # n**a1 - (n-1)**a1 without cancellation
    diff = -n_arr ** a1 * np.expm1(a1 * np.log1p(-1.0 / n_arr))
    out = p.sigma * normalizing_constant(p) * beta_total(p) / a1 * diff
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# nested quadrature
# ---------------------------------------------------------------------------

def _prefactor(p: HurstParams) -> float:
    return p.sigma * normalizing_constant(p) * p.alpha


def _adaptive(compute, count, tol, what):
    """Run `compute(indices, level)` with increasing levels until converged."""
    out = np.empty(count)
    pending = np.arange(count)
    level = _START_LEVEL
    while pending.size:
        q0, q1, q2 = compute(pending, level)
        err = error_estimate(q0, q1, q2)
        ok = err <= tol * np.abs(q0)
        out[pending[ok]] = q0[ok]
        pending = pending[~ok]
        level += 1
        if pending.size and level > _MAX_LEVEL:
            raise QuadratureError(f"{what}: tolerance {tol:g} not reached for item {int(pending[0])}")
    return out


def _kernel_j(n, left, right, alpha, level, inner_singular, outer_singular):
    """Nested sums for int_left^right x**(-alpha) J(n, x) dx, J = int_0^1 (v+n-1)**alpha (v+n-1-x)**(alpha-1) dv."""
    t_in = t_max_for_exponent(alpha - 1.0 if inner_singular else 0.0)
    t_out = t_max_for_exponent(-alpha if outer_singular else 0.0)
    ri = tanh_sinh_rule(level, t_in)
    ro = tanh_sinh_rule(level, t_out)
    v = ri.dist_lo
    inner_w = (n - 1.0 + v) ** alpha * ri.weights
    length = (right - left)[:, None]
    x = left[:, None] + length * ro.dist_lo
    delta = (n - 1.0 - right)[:, None] + length * ro.dist_hi
    shape = x.shape
    d = delta.ravel()
    J = [np.empty(d.size) for _ in range(3)]
    step = max(1, _CHUNK // v.size)
    for s in range(0, d.size, step):
        block = (v[None, :] + d[s:s + step, None]) ** (alpha - 1.0)
        for dst, src in zip(J, nested_estimates(block, inner_w)):
            dst[s:s + step] = src
    wx = x ** (-alpha) * (length * ro.weights)
    J = [a.reshape(shape) for a in J]
    q0 = np.sum(wx * J[0], axis=1)
    q1 = np.sum(2.0 * (wx * J[1])[:, ::2], axis=1)
    q2 = np.sum(4.0 * (wx * J[2])[:, ::4], axis=1)
    return q0, q1, q2


def _kernel_z(t, left, right, alpha, level, outer_singular):
    """Nested sums for int_left^right z(t, s) ds without the prefactor."""
    ri = tanh_sinh_rule(level, t_max_for_exponent(alpha - 1.0))
    ro = tanh_sinh_rule(level, t_max_for_exponent(-alpha if outer_singular else 0.0))
    w = ri.dist_lo
    inner_w = w ** (alpha - 1.0) * ri.weights
    length = (right - left)[:, None]
    s = left[:, None] + length * ro.dist_lo
    ds = (t - right)[:, None] + length * ro.dist_hi
    shape = s.shape
    s_f, ds_f = s.ravel(), ds.ravel()
    J = [np.empty(s_f.size) for _ in range(3)]
    step = max(1, _CHUNK // w.size)
    for a in range(0, s_f.size, step):
        block = (s_f[a:a + step, None] + w[None, :] * ds_f[a:a + step, None]) ** alpha
        for dst, src in zip(J, nested_estimates(block, inner_w)):
            dst[a:a + step] = src
    wx = s ** (-alpha) * ds ** alpha * (length * ro.weights)
    J = [a.reshape(shape) for a in J]
    q0 = np.sum(wx * J[0], axis=1)
    q1 = np.sum(2.0 * (wx * J[1])[:, ::2], axis=1)
    q2 = np.sum(4.0 * (wx * J[2])[:, ::4], axis=1)
    return q0, q1, q2


def _j_intervals(n: int, left, right, p: HurstParams, tol: float) -> np.ndarray:
    """sigma c_H alpha int_left^right x**(-alpha) J(n, x) dx for intervals inside [0, n-1]."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    out = np.empty(left.size)
    inner_sing = right >= n - 1
    outer_sing = left <= 0.0
    for fi in (False, True):
        for fo in (False, True):
            sel = np.flatnonzero((inner_sing == fi) & (outer_sing == fo))
            if sel.size == 0:
                continue
            lo, hi = left[sel], right[sel]

            def compute(idx, level, lo=lo, hi=hi, fi=fi, fo=fo):
                return _kernel_j(n, lo[idx], hi[idx], p.alpha, level, fi, fo)

            out[sel] = _adaptive(compute, sel.size, tol, f"j(n={n})")
    return _prefactor(p) * out


def _z_intervals(t: float, left, right, p: HurstParams, tol: float) -> np.ndarray:
    """int_left^right z(t, s) ds for intervals inside [0, t]."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    out = np.empty(left.size)
    outer_sing = left <= 0.0
    for fo in (False, True):
        sel = np.flatnonzero(outer_sing == fo)
        if sel.size == 0:
            continue
        lo, hi = left[sel], right[sel]

        def compute(idx, level, lo=lo, hi=hi, fo=fo):
            return _kernel_z(t, lo[idx], hi[idx], p.alpha, level, fo)

        out[sel] = _adaptive(compute, sel.size, tol, f"z(t={t})")
    return _prefactor(p) * out


def _graded_breaks(n: int, lo: int, hi: int) -> np.ndarray:
    """Breakpoints in x for [lo, hi], geometrically graded towards x = n - 1."""
    s0, s1 = n - 1 - hi, n - 1 - lo
    pts = [s0]
    s = s0
    while s < s1:
        s = max(2 * s, s + 1)
        pts.append(min(s, s1))
    return (n - 1) - np.asarray(pts[::-1], dtype=float)


def coeff_j(n: int, i: int, params, quad_tol: float = DEFAULT_QUAD_TOL) -> float:
    """Weight j(n, i) of the past sign xi_i in the n-th increment."""
    n, i = int(n), int(i)
    if n < 2 or not (1 <= i <= n - 1):
        raise IndexError(f"j(n, i) needs n >= 2 and 1 <= i <= n-1, got ({n}, {i})")
    p = _as_params(params)
    return float(_j_intervals(n, [i - 1.0], [float(i)], p, quad_tol)[0])


def coeff_g(n: int, params, quad_tol: float = DEFAULT_QUAD_TOL) -> float:
    """Weight g(n) of the current sign xi_n in the n-th increment."""
    n = int(n)
    if n < 1:
        raise IndexError(f"g(n) needs n >= 1, got {n}")
    p = _as_params(params)
    return float(_z_intervals(float(n), [n - 1.0], [float(n)], p, quad_tol)[0])


def column_totals(M: int, params, quad_tol: float = DEFAULT_QUAD_TOL) -> np.ndarray:
    """g(i) + sum_{n=i+1}^{M} j(n, i) for i = 1..M, via the telescoped kernel."""
    p = _as_params(params)
    i = np.arange(1, M + 1, dtype=float)
    return _z_intervals(float(M), i - 1.0, i, p, quad_tol)


def j_range_integral(n: int, lo: int, hi: int, params, quad_tol: float = DEFAULT_QUAD_TOL) -> float:
    """sum_{i=lo+1}^{hi} j(n, i) as one integral over [lo, hi] (graded pieces)."""
    p = _as_params(params)
    if not (0 <= lo <= hi <= n - 1):
        raise IndexError(f"range [{lo}, {hi}] outside row {n}")
    if lo == hi:
        return 0.0
    b = _graded_breaks(n, lo, hi)
    parts = _j_intervals(n, b[:-1], b[1:], p, quad_tol)
    return float(math.fsum(parts))


# ---------------------------------------------------------------------------
# coefficient sources
# ---------------------------------------------------------------------------

class _CoeffSource:
    """Shared constants of a coefficient source."""

    params: HurstParams
    n_max: int
    quad_tol: float

    @property
    def c_H(self) -> float:
        return normalizing_constant(self.params)

    @property
    def c_star(self) -> float:
        return self.params.sigma * self.c_H

    @property
    def g_limit(self) -> float:
        return self.c_star / (self.params.H + 0.5)

    @property
    def c_X(self) -> float:
        return self.c_star / (1.5 - self.params.H) + self.g_limit

    def constants(self) -> dict:
        return {"H": self.params.H, "sigma": self.params.sigma, "n_max": int(self.n_max),
                "quad_tol": self.quad_tol, "c_H": self.c_H, "c_star": self.c_star,
                "g_limit": self.g_limit, "c_X": self.c_X}

    def _check_row(self, n: int):
        if not (1 <= n <= self.n_max):
            raise IndexError(f"row {n} outside 1..{self.n_max}")

    def j_cells(self, n: int, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        return np.array([self.j(n, int(i)) for i in idx])

    def row_sums(self, upto: int) -> np.ndarray:
        """sum_{i<n} j(n, i) for n = 1..upto (index 0 is row 1)."""
        return np.array([self.row_sum(n) for n in range(1, upto + 1)])

    def g_values(self, upto: int) -> np.ndarray:
        return np.array([self.g(n) for n in range(1, upto + 1)])


class CoeffTable(_CoeffSource):
    """Dense triangular table of j(n, i) and vector g(n), 1 <= n <= n_max.

    Row ``n`` of ``j`` holds ``j(n, 1..n-1)`` and is stored contiguously in a
    flat array; ``g[n]`` is 1-based (``g[0]`` is unused).
    """

    def __init__(self, params: HurstParams, n_max: int, j_flat: np.ndarray, g: np.ndarray,
                 quad_tol: float = DEFAULT_QUAD_TOL):
        self.params = params
        self.n_max = int(n_max)
        self.quad_tol = float(quad_tol)
        expected = (self.n_max - 1) * self.n_max // 2
        j_flat = np.ascontiguousarray(j_flat, dtype=float)
        g = np.ascontiguousarray(g, dtype=float)
        if j_flat.size != expected or g.size != self.n_max + 1:
            raise ValueError("table arrays do not match n_max")
        j_flat.setflags(write=False)
        g.setflags(write=False)
        self._j = j_flat
        self._g = g
        n = np.arange(self.n_max + 1)
        self._offset = np.maximum(n - 2, 0) * np.maximum(n - 1, 0) // 2
        self._row_sums = np.zeros(self.n_max + 1)
        for r in range(2, self.n_max + 1):
            self._row_sums[r] = math.fsum(self.j_row(r))

    @property
    def g_array(self) -> np.ndarray:
        return self._g

    @property
    def j_flat(self) -> np.ndarray:
        return self._j

    @property
    def n_cells(self) -> int:
        return self._j.size

    def g(self, n: int) -> float:
        self._check_row(n)
        return float(self._g[n])

    def j(self, n: int, i: int) -> float:
        self._check_row(n)
        if not (1 <= i <= n - 1):
            raise IndexError(f"j({n}, {i}) outside the table")
        return float(self._j[self._offset[n] + i - 1])

    def j_row(self, n: int) -> np.ndarray:
        """Read-only view of j(n, 1..n-1)."""
        self._check_row(n)
        off = self._offset[n]
        return self._j[off:off + n - 1]

    def j_cells(self, n: int, idx) -> np.ndarray:
        return self.j_row(n)[np.asarray(idx, dtype=np.int64) - 1]

    def j_range_sum(self, n: int, lo: int, hi: int) -> float:
        """sum_{i=lo+1}^{hi} j(n, i)."""
        self._check_row(n)
        if not (0 <= lo <= hi <= n - 1):
            raise IndexError(f"range [{lo}, {hi}] outside row {n}")
        if lo == 0 and hi == n - 1:
            return float(self._row_sums[n])
        return float(math.fsum(self.j_row(n)[lo:hi]))

    def row_sum(self, n: int) -> float:
        self._check_row(n)
        return float(self._row_sums[n])

    def row_sums(self, upto: int) -> np.ndarray:
        self._check_row(upto)
        return self._row_sums[1:upto + 1].copy()

    def g_values(self, upto: int) -> np.ndarray:
        self._check_row(upto)
        return self._g[1:upto + 1].copy()

    # -- serialization ---------------------------------------------------
    def save(self, directory, stem: str = "coeffs") -> dict:
        """Write ``<stem>_j.csv`` (n,i,j), ``<stem>_g.csv`` (n,g) and ``<stem>.json``."""
        from .io import fmt

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"j": directory / f"{stem}_j.csv", "g": directory / f"{stem}_g.csv",
                 "meta": directory / f"{stem}.json"}
        with open(paths["j"], "w", newline="\n") as fh:
            fh.write("n,i,j\n")
            for n in range(2, self.n_max + 1):
                row = self.j_row(n)
                fh.writelines(f"{n},{i},{fmt(v)}\n" for i, v in enumerate(row, start=1))
        with open(paths["g"], "w", newline="\n") as fh:
            fh.write("n,g\n")
            fh.writelines(f"{n},{fmt(self._g[n])}\n" for n in range(1, self.n_max + 1))
        with open(paths["meta"], "w") as fh:
            json.dump(self.constants(), fh, indent=2, sort_keys=True)
        return paths

    @classmethod
    def load(cls, directory, stem: str = "coeffs") -> "CoeffTable":
        directory = Path(directory)
        with open(directory / f"{stem}.json") as fh:
            meta = json.load(fh)
        params = HurstParams(meta["H"], meta["sigma"])
        n_max = int(meta["n_max"])
        jd = np.loadtxt(directory / f"{stem}_j.csv", delimiter=",", skiprows=1, ndmin=2)
        gd = np.loadtxt(directory / f"{stem}_g.csv", delimiter=",", skiprows=1, ndmin=2)
        g = np.full(n_max + 1, np.nan)
        g[gd[:, 0].astype(int)] = gd[:, 1]
        j_flat = jd[:, 2] if jd.size else np.empty(0)
        return cls(params, n_max, j_flat, g, meta["quad_tol"])


class CoeffCache(_CoeffSource):
    """Coefficients evaluated on demand and memoized.

    Suitable for horizons far beyond a dense table (``n_max`` up to 2**40):
    only the cells, rows and range sums actually requested are integrated.
    """

    def __init__(self, params: HurstParams, n_max: int, quad_tol: float = DEFAULT_QUAD_TOL):
        self.params = _as_params(params)
        self.n_max = int(n_max)
        self.quad_tol = float(quad_tol)
        self._g: dict = {}
        self._j: dict = {}
        self._rows: dict = {}
        self._ranges: dict = {}

    def g(self, n: int) -> float:
        self._check_row(n)
        if n not in self._g:
            self._g[n] = coeff_g(n, self.params, self.quad_tol)
        return self._g[n]

    def g_values(self, upto: int) -> np.ndarray:
        self._check_row(upto)
        missing = [n for n in range(1, upto + 1) if n not in self._g]
        for n in missing:
            self._g[n] = coeff_g(n, self.params, self.quad_tol)
        return np.array([self._g[n] for n in range(1, upto + 1)])

    def j(self, n: int, i: int) -> float:
        self._check_row(n)
        if not (1 <= i <= n - 1):
            raise IndexError(f"j({n}, {i}) outside 1..{n - 1}")
        if n in self._rows:
            return float(self._rows[n][i - 1])
        key = (n, i)
        if key not in self._j:
            self._j[key] = coeff_j(n, i, self.params, self.quad_tol)
        return self._j[key]

    def j_cells(self, n: int, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        self._check_row(n)
        if n in self._rows:
            return self._rows[n][idx - 1].copy()
        missing = sorted({int(i) for i in idx if (n, int(i)) not in self._j})
        if missing:
            if missing[0] < 1 or missing[-1] > n - 1:
                raise IndexError(f"cells outside row {n}")
            t = np.asarray(missing, dtype=float)
            vals = _j_intervals(n, t - 1.0, t, self.params, self.quad_tol)
            self._j.update({(n, i): float(v) for i, v in zip(missing, vals)})
        return np.array([self._j[(n, int(i))] for i in idx])

    def j_row(self, n: int) -> np.ndarray:
        self._check_row(n)
        if n not in self._rows:
            i = np.arange(1, n, dtype=float)
            row = _j_intervals(n, i - 1.0, i, self.params, self.quad_tol)
            row.setflags(write=False)
            self._rows[n] = row
        return self._rows[n]

    def j_range_sum(self, n: int, lo: int, hi: int) -> float:
        """sum_{i=lo+1}^{hi} j(n, i); short ranges are summed cell by cell."""
        self._check_row(n)
        if not (0 <= lo <= hi <= n - 1):
            raise IndexError(f"range [{lo}, {hi}] outside row {n}")
        if lo == hi:
            return 0.0
        if n in self._rows:
            return float(math.fsum(self._rows[n][lo:hi]))
        if hi - lo <= 8:
            return float(math.fsum(self.j_cells(n, np.arange(lo + 1, hi + 1))))
        key = (n, lo, hi)
        if key not in self._ranges:
            self._ranges[key] = j_range_integral(n, lo, hi, self.params, self.quad_tol)
        return self._ranges[key]

    def row_sum(self, n: int) -> float:
        return self.j_range_sum(n, 0, n - 1)


# ---------------------------------------------------------------------------
# table construction and validation
# ---------------------------------------------------------------------------

def _rows_worker(args):
    H, sigma, rows, tol = args
    p = HurstParams(H, sigma)
    out = []
    for n in rows:
        i = np.arange(1, n, dtype=float)
        try:
            out.append(_j_intervals(n, i - 1.0, i, p, tol))
        except QuadratureError as exc:
            raise QuadratureError(f"row n={n}: {exc}") from None
    return out


def build_coeff_table(n_max: int, params, quad_tol: float = DEFAULT_QUAD_TOL,
                      workers: int = 1, cap: int = DEFAULT_TABLE_CAP) -> CoeffTable:
    """Integrate every cell j(n, i) and g(n) for n <= n_max.

    Rows are independent; with ``workers > 1`` they are distributed over a
    process pool.  The result does not depend on the number of workers.
    """
    p = _as_params(params)
    n_max = int(n_max)
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    if n_max > cap:
        raise ValueError(f"n_max={n_max} exceeds the dense-table cap {cap}; use CoeffCache")
    rows = list(range(2, n_max + 1))
    # interleave rows so that chunks carry similar work
    chunks = [rows[k::max(1, 4 * workers)] for k in range(max(1, 4 * workers))]
    tasks = [(p.H, p.sigma, c, quad_tol) for c in chunks if c]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_rows_worker, tasks))
    else:
        results = [_rows_worker(t) for t in tasks]
    by_row = {}
    for task, res in zip(tasks, results):
        by_row.update(zip(task[2], res))
    j_flat = np.concatenate([by_row[n] for n in rows])
    g = np.full(n_max + 1, np.nan)
    for n in range(1, n_max + 1):
        g[n] = coeff_g(n, p, quad_tol)
    return CoeffTable(p, n_max, j_flat, g, quad_tol)


@dataclass
class BoundReport:
    """Margins of every coefficient invariant (non-negative means satisfied).

    Attributes
    ----------
    j_lower, j_upper : ndarray
        Flat per-cell margins of the sandwich bounds, same layout as the table.
    j_positive : ndarray
        The cells themselves.
    g_lower, g_upper : ndarray
        Margins of the g bounds for n = 2..n_max.
    row_bound : ndarray
        ``c_X n**alpha - (sum_i j(n, i) + g(n))`` for n = 2..n_max.
    variance_bound : ndarray
        ``sigma**2 (1 - c_H**2/(H+1/2)**2) - sum_i j(n, i)**2`` for n = 2..n_max.
    """

    tolerance: float
    j_lower: np.ndarray
    j_upper: np.ndarray
    j_positive: np.ndarray
    g_lower: np.ndarray
    g_upper: np.ndarray
    row_bound: np.ndarray
    variance_bound: np.ndarray

    def minima(self) -> dict:
        return {name: float(np.min(getattr(self, name))) if getattr(self, name).size else math.inf
                for name in ("j_lower", "j_upper", "j_positive", "g_lower", "g_upper",
                             "row_bound", "variance_bound")}

    @property
    def passed(self) -> bool:
        return all(v >= -self.tolerance for v in self.minima().values())


def validate_coeff_bounds(table: CoeffTable, tolerance: Optional[float] = None) -> BoundReport:
    """Evaluate the sandwich, g, row-total and variance bounds on every entry."""
    p = table.params
    a = p.alpha
    c_star = table.c_star
    lo_parts, hi_parts, var, rowb = [], [], [], []
    for n in range(2, table.n_max + 1):
        row = table.j_row(n)
        w = sandwich_weights(n, p)
        lo_parts.append(row - c_star * (n - 1) ** a * w)
        hi_parts.append(c_star * n ** a * w - row)
        var.append(float(np.dot(row, row)))
        rowb.append(table.c_X * n ** a - (table.row_sum(n) + table.g(n)))
    n = np.arange(2, table.n_max + 1, dtype=float)
    g = table.g_array[2:]
    gl = table.g_limit
    var_cap = p.sigma ** 2 * (1.0 - table.c_H ** 2 / (p.H + 0.5) ** 2)
    return BoundReport(
        tolerance=table.quad_tol if tolerance is None else float(tolerance),
        j_lower=np.concatenate(lo_parts) if lo_parts else np.empty(0),
        j_upper=np.concatenate(hi_parts) if hi_parts else np.empty(0),
        j_positive=table.j_flat.copy(),
        g_lower=g - gl,
        g_upper=gl * (1.0 + 1.0 / (n - 1.0)) ** a - g,
        row_bound=np.asarray(rowb),
        variance_bound=var_cap - np.asarray(var),
    )
