"""The increasing bijection u with 1/2 u'' = f u', its inverse, and the
second transform (K, u2, v) with 1/2 u2'' - f u2' = 1/2.

u is evaluated in closed form on pieces where f is constant and from an
adaptively refined cubic Hermite table elsewhere.  Table derivatives are
the exact values exp(2F), so the table is C^1 and shape preserving.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from ._quad import adaptive_gauss_legendre, legendre_rule
from .errors import DomainError, PreconditionError
from .generator import GeneratorSpec

TAIL_EXTENT = 1.0e6
SECOND_EXTENT = 64.0


def _hermite(x, xs, ys, ds):
    """C^1 cubic Hermite interpolant through (xs, ys) with slopes ds.

    Evaluated in Taylor form about the nearer cell end, so values keep
    full relative precision next to a node (and strict monotonicity
    survives for increasing data)."""
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    x0, x1 = xs[i], xs[i + 1]
    h = x1 - x0
    slope = (ys[i + 1] - ys[i]) / h
    d0, d1 = ds[i], ds[i + 1]
    c3 = (d0 + d1 - 2.0 * slope) / (h * h)
    left = (x - x0) <= (x1 - x)
    s = np.where(left, x - x0, x - x1)
    base = np.where(left, ys[i], ys[i + 1])
    d = np.where(left, d0, d1)
    c2 = np.where(left, (3.0 * slope - 2.0 * d0 - d1) / h, -(3.0 * slope - 2.0 * d1 - d0) / h)
    return base + s * (d + s * (c2 + s * c3))


def _hermite_inverse(y, xs, ys, ds):
    """Invert an increasing Hermite table: locate the cell, then run
    safeguarded Newton on the cell cubic in t in [0, 1]."""
    i = np.clip(np.searchsorted(ys, y, side="right") - 1, 0, len(xs) - 2)
    h = xs[i + 1] - xs[i]
    y0, y1 = ys[i], ys[i + 1]
    m0, m1 = h * ds[i], h * ds[i + 1]
    # p(t) = y0 + m0 t + c2 t^2 + c3 t^3
    c2 = 3 * (y1 - y0) - 2 * m0 - m1
    c3 = 2 * (y0 - y1) + m0 + m1
    target = y - y0
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    t = np.clip(target / (y1 - y0), 0.0, 1.0)
    active = np.ones(y.shape, dtype=bool)
    for _ in range(60):
        ta = t[active]
        r = ((c3[active] * ta + c2[active]) * ta + m0[active]) * ta - target[active]
        d = (3 * c3[active] * ta + 2 * c2[active]) * ta + m0[active]
        la = np.where(r < 0, ta, lo[active])
        ha = np.where(r > 0, ta, hi[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = ta - r / d
        bad = ~((step > la) & (step < ha))
        t_new = np.where(r == 0, ta, np.where(bad, 0.5 * (la + ha), step))
        done = (np.abs(t_new - ta) <= 1e-15) | (ha - la <= 1e-15) | (r == 0)
        t[active], lo[active], hi[active] = t_new, la, ha
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if not active.any():
            break
    return xs[i] + h * t


def _gl_batch(g, lo, hi, sing, n=20):
    """Gauss-Legendre on many panels at once.  ``sing`` is 0 (regular),
    1 (sqrt singularity at lo) or 2 (at hi)."""
    x, w = legendre_rule(n)
    lo = lo[:, None]
    hi = hi[:, None]
    s = sing[:, None]
    plain_half = 0.5 * (hi - lo)
    plain_nodes = 0.5 * (lo + hi) + plain_half * x
    span = np.sqrt(hi - lo)
    sq = 0.5 * span * (x + 1.0)
    sub_nodes = np.where(s == 1, lo + sq * sq, hi - sq * sq)
    nodes = np.where(s == 0, plain_nodes, sub_nodes)
    jac = np.where(s == 0, plain_half, 0.5 * span * 2.0 * sq)
    vals = np.asarray(g(nodes.ravel()), dtype=float).reshape(nodes.shape)
    return (vals * jac) @ w


class _CumulativeTable:
    """G(x) = int_0^x g on [lo, hi], refined by bisection.

    A cell is accepted when a 20-point Gauss-Legendre value agrees with the
    sum over its halves and the Hermite midpoint prediction agrees with the
    quadrature midpoint value.  ``singular`` lists points where g has a
    square-root type derivative singularity; cells ending there use the
    y = a + s^2 substitution.
    """

    def __init__(self, g: Callable, split_points, singular=(), rtol: float = 1e-12, min_width: float = 1e-12):
        pts = np.unique(np.append(np.asarray(split_points, dtype=float), 0.0))
        if not (pts[0] <= 0.0 <= pts[-1]):
            raise ValueError("split points must bracket 0")
        sing_pts = np.array(sorted(set(float(v) for v in singular)))
        self.g = g
        xs_l, xs_r, incr = self._refine(g, pts[:-1], pts[1:], sing_pts, rtol, min_width)
        order = np.argsort(xs_l)
        xs = np.append(xs_l[order], xs_r[order][-1])
        incr = incr[order]
        k0 = int(np.searchsorted(xs, 0.0))
        G = np.zeros_like(xs)
        G[k0 + 1:] = np.cumsum(incr[k0:])
        G[:k0] = -np.cumsum(incr[:k0][::-1])[::-1]
        self.xs = xs
        self.G = G
        self.dG = np.asarray(g(xs), dtype=float)
        self.lo, self.hi = float(xs[0]), float(xs[-1])
        for arr in (self.xs, self.G, self.dG):
            arr.setflags(write=False)

    @staticmethod
    def _refine(g, lo, hi, sing_pts, rtol, min_width):
        def flags(a, b):
            out = np.zeros(a.shape, dtype=int)
            if sing_pts.size:
                out[np.isin(a, sing_pts)] = 1
                out[np.isin(b, sing_pts)] = 2
            return out

        whole = _gl_batch(g, lo, hi, flags(lo, hi))
        keep_l, keep_r, keep_v = [], [], []
        while lo.size:
            mid = 0.5 * (lo + hi)
            both_lo = np.concatenate([lo, mid])
            both_hi = np.concatenate([mid, hi])
            halves = _gl_batch(g, both_lo, both_hi, flags(both_lo, both_hi))
            left, right = halves[: lo.size], halves[lo.size:]
            ends = np.asarray(g(np.concatenate([lo, hi])), dtype=float)
            g_lo, g_hi = ends[: lo.size], ends[lo.size:]
            scale = np.maximum(1.0, np.maximum(np.abs(g_lo), np.abs(g_hi)))
            herm_mid = 0.5 * whole + (hi - lo) * (g_lo - g_hi) / 8.0
            ok_quad = np.abs(left + right - whole) <= 1e-14 * np.abs(whole) + 1e-16 * scale
            ok_herm = np.abs(herm_mid - left) <= rtol * scale
            accept = (ok_quad & ok_herm) | (hi - lo <= min_width)
            keep_l.append(lo[accept])
            keep_r.append(hi[accept])
            keep_v.append((left + right)[accept])
            rej = ~accept
            lo, hi = np.concatenate([lo[rej], mid[rej]]), np.concatenate([mid[rej], hi[rej]])
            whole = np.concatenate([left[rej], right[rej]])
        return np.concatenate(keep_l), np.concatenate(keep_r), np.concatenate(keep_v)

    def contains(self, x):
        return (x >= self.lo) & (x <= self.hi)

    def __call__(self, x):
        return _hermite(x, self.xs, self.G, self.dG)

    def inverse(self, y):
        return _hermite_inverse(y, self.xs, self.G, self.dG)


@dataclass(frozen=True, eq=False)
class TransformPair:
    """u(x) = int_0^x exp(2F), with u' = exp(2F) and u'' = 2 f u'.

    Build with :func:`build_u`.  ``m`` and ``M`` bound u' from below and
    above: exp(-2||f||_1) <= u' <= exp(2||f||_1).
    """

    spec: GeneratorSpec
    m: float
    M: float
    kind: str
    _bp: np.ndarray = field(repr=False)
    _u_bp: np.ndarray = field(repr=False)
    _anchor: np.ndarray = field(repr=False)
    _u_anchor: np.ndarray = field(repr=False)
    _e_anchor: np.ndarray = field(repr=False)
    _slope: np.ndarray = field(repr=False)
    _table: _CumulativeTable | None = field(repr=False)

    # -- forward ----------------------------------------------------------
    def du(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(2.0 * self.spec.antiderivative(x))

    def d2u(self, x):
        """u'' = 2 f u' through the pointwise representative of f."""
        x = np.asarray(x, dtype=float)
        return 2.0 * self.spec(x) * self.du(x)

    def u(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("u needs finite arguments")
        idx = self.spec.piece_index(x)
        slope = self._slope[idx]
        const = ~np.isnan(slope)
        out = np.empty_like(x)
        if np.any(const):
            xc, k = x[const], idx[const]
            c = slope[const]
            dx = xc - self._anchor[k]
            safe_c = np.where(c == 0.0, 1.0, c)
            grow = np.where(c == 0.0, dx, np.expm1(np.where(c == 0.0, 0.0, 2.0 * c * dx)) / (2.0 * safe_c))
            out[const] = self._u_anchor[k] + self._e_anchor[k] * grow
        rest = ~const
        if np.any(rest):
            xr = x[rest]
            vals = np.empty_like(xr)
            inside = self._table.contains(xr)
            vals[inside] = self._table(xr[inside])
            for j in np.flatnonzero(~inside):
                vals[j] = self._tail_u(float(xr[j]))
            out[rest] = vals
        return out

    def _tail_u(self, x: float) -> float:
        t = self._table
        edge = t.hi if x > t.hi else t.lo
        base = t.G[-1] if x > t.hi else t.G[0]
        return float(base + adaptive_gauss_legendre(self.du, edge, x, rtol=1e-13))

    # -- inverse ----------------------------------------------------------
    def u_inv(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("u_inv needs finite arguments")
        idx = np.searchsorted(self._u_bp, y, side="right")
        slope = self._slope[idx]
        const = ~np.isnan(slope)
        out = np.empty_like(y)
        if np.any(const):
            yc, k = y[const], idx[const]
            c = slope[const]
            rel = (yc - self._u_anchor[k]) / self._e_anchor[k]
            safe_c = np.where(c == 0.0, 1.0, c)
            arg = np.maximum(2.0 * safe_c * rel, -1.0 + 1e-300)
            with np.errstate(divide="ignore"):
                dx = np.where(c == 0.0, rel, np.log1p(arg) / (2.0 * safe_c))
            xc = self._anchor[k] + dx
            xc = xc - (self.u(xc) - yc) / self.du(xc)
            out[const] = xc
        rest = ~const
        if np.any(rest):
            yr = y[rest]
            vals = np.empty_like(yr)
            t = self._table
            inside = (yr >= t.G[0]) & (yr <= t.G[-1])
            if np.any(inside):
                x = t.inverse(yr[inside])
                x = x - (self.u(x) - yr[inside]) / self.du(x)
                vals[inside] = x
            for j in np.flatnonzero(~inside):
                vals[j] = self._tail_inverse(float(yr[j]))
            out[rest] = vals
        return out

    def _tail_inverse(self, y: float) -> float:
        t = self._table
        edge = t.hi if y > t.G[-1] else t.lo
        far = edge + (y - (t.G[-1] if y > t.G[-1] else t.G[0])) / self.m
        lo, hi = sorted((edge, far))
        return brentq(lambda s: float(self.u(np.array([s]))[0]) - y, lo, hi, xtol=1e-13, rtol=1e-15)

    def isometry_bounds(self) -> tuple[float, float]:
        return self.m, self.M

    def table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nodes (x, u, u') of the tabulated part, or the exact values at
        breakpoints and 0 when f is piecewise constant."""
        if self._table is not None:
            x = np.unique(np.concatenate([self._table.xs, self._bp]))
        else:
            x = np.unique(np.append(self._bp, 0.0))
        return x, self.u(x), self.du(x)


def _const_slopes(spec: GeneratorSpec) -> np.ndarray:
    return np.array([np.nan if p.slope is None else p.slope for p in spec.pieces])


def _closed_form_increment(F_a: float, c: float, a: float, b: float) -> float:
    e = math.exp(2.0 * F_a)
    if c == 0.0:
        return e * (b - a)
    return e * math.expm1(2.0 * c * (b - a)) / (2.0 * c)


_CACHE: dict = {}


def build_u(spec: GeneratorSpec) -> TransformPair:
    """Assemble u for a globally integrable f."""
    norm = spec.l1_norm_global
    if not math.isfinite(norm):
        raise PreconditionError("f is not globally integrable")
    cacheable = all(p.kind != "callable" for p in spec.pieces)
    if cacheable and spec in _CACHE:
        return _CACHE[spec]
    bp = np.asarray(spec.breakpoints, dtype=float)
    slopes = _const_slopes(spec)
    F = lambda x: spec.antiderivative(np.asarray(x, dtype=float))  # noqa: E731
    g = lambda x: np.exp(2.0 * F(x))  # noqa: E731

    table = None
    general = [p for p in spec.pieces if p.slope is None]
    if general:
        lo = max(min(p.lo for p in general), -TAIL_EXTENT)
        hi = min(max(p.hi for p in general), TAIL_EXTENT)
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        split = [lo, hi, *[b for b in bp if lo < b < hi]]
        singular = [p.singular_point for p in general if p.singular_point is not None]
        table = _CumulativeTable(g, split, singular)

    # u at the breakpoints: from the table where it reaches, closed-form
    # chaining outward otherwise.
    n_bp = len(bp)
    u_bp = np.empty(n_bp)
    known = np.zeros(n_bp, dtype=bool)
    if table is not None:
        inside = table.contains(bp)
        u_bp[inside] = table(bp[inside])
        known |= inside
    k0 = int(np.searchsorted(bp, 0.0, side="right"))
    for i in range(k0, n_bp):
        if known[i]:
            continue
        start = bp[i - 1] if i > k0 else 0.0
        base = u_bp[i - 1] if i > k0 else 0.0
        u_bp[i] = base + _closed_form_increment(float(F(start)), slopes[i], start, bp[i])
    for i in range(k0 - 1, -1, -1):
        if known[i]:
            continue
        end = bp[i + 1] if i + 1 < k0 else 0.0
        base = u_bp[i + 1] if i + 1 < k0 else 0.0
        u_bp[i] = base - _closed_form_increment(float(F(bp[i])), slopes[i + 1], bp[i], end)

    n_pieces = len(spec.pieces)
    anchor = np.zeros(n_pieces)
    u_anchor = np.zeros(n_pieces)
    for k, p in enumerate(spec.pieces):
        if p.lo <= 0.0 < p.hi:
            continue
        if p.hi <= 0.0:
            anchor[k], u_anchor[k] = p.hi, u_bp[k]
        else:
            anchor[k], u_anchor[k] = p.lo, u_bp[k - 1]
    e_anchor = np.exp(2.0 * F(anchor))
    for arr in (bp, u_bp, anchor, u_anchor, e_anchor, slopes):
        arr.setflags(write=False)

    tp = TransformPair(
        spec=spec,
        m=math.exp(-2.0 * norm),
        M=math.exp(2.0 * norm),
        kind="zvonkin0",
        _bp=bp,
        _u_bp=u_bp,
        _anchor=anchor,
        _u_anchor=u_anchor,
        _e_anchor=e_anchor,
        _slope=slopes,
        _table=table,
    )
    if cacheable:
        _CACHE[spec] = tp
    return tp


def _scalar_or_array(fn, x):
    arr = np.asarray(x, dtype=float)
    out = fn(arr)
    return float(out) if arr.ndim == 0 else out


def eval_u(tp: TransformPair, x):
    return _scalar_or_array(tp.u, x)


def eval_du(tp: TransformPair, x):
    return _scalar_or_array(tp.du, x)


def eval_u_inv(tp: TransformPair, y):
    return _scalar_or_array(tp.u_inv, y)


def isometry_bounds(tp: TransformPair) -> tuple[float, float]:
    if tp.kind != "zvonkin0":
        raise ValueError("isometry bounds are defined for the first transform only")
    return tp.isometry_bounds()


def dump_table(tp: TransformPair, path) -> None:
    x, u, du = tp.table()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "u", "du"])
        for row in zip(x, u, du):
            w.writerow([f"{v:.17g}" for v in row])


def load_table(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]


def _phi(lam, s):
    """int_0^s exp(lam t) dt."""
    safe = np.where(lam == 0.0, 1.0, lam)
    return np.where(lam == 0.0, s, np.expm1(safe * s) / safe)


def _phi_int(lam, s):
    """int_0^s phi(lam, t) dt, with a series for small lam * s."""
    x = lam * s
    small = np.abs(x) < 1e-3
    safe = np.where(small, 1.0, lam)
    series = s * s * (0.5 + x / 6.0 + x * x / 24.0 + x ** 3 / 120.0)
    exact = (_phi(lam, s) - s) / safe
    return np.where(small, series, exact)


@dataclass(frozen=True, eq=False)
class SecondTransform:
    """K(y) = int_0^y exp(-2F), u2(x) = int_0^x K exp(2F), v(x) = u2(|x|).

    u2'' = 2 f u2' + 1 by construction, so 1/2 u2'' - f u2' = 1/2 a.e.
    Bounds: u2(|x|) <= c1 x^2 and u2'(|x|) <= c2 |x| with
    c2 = exp(4||f||_1), c1 = c2 / 2.  Piecewise-constant f is handled in
    closed form; otherwise K and u2 come from Hermite tables on
    [-extent, extent] with quadrature beyond.
    """

    spec: GeneratorSpec
    c1: float
    c2: float
    _K: _CumulativeTable | None = field(repr=False)
    _U: _CumulativeTable | None = field(repr=False)
    _closed: tuple | None = field(repr=False, default=None)

    def _closed_eval(self, x, which):
        anchor, K_a, U_a, F_a, slope = self._closed
        k = self.spec.piece_index(x)
        s = x - anchor[k]
        lam = 2.0 * slope[k]
        if which == "K":
            return K_a[k] + np.exp(-2.0 * F_a[k]) * _phi(-lam, s)
        return U_a[k] + K_a[k] * np.exp(2.0 * F_a[k]) * _phi(lam, s) + _phi_int(lam, s)

    def _fallback(self, table, integrand, x):
        out = np.empty_like(x)
        for j, s in enumerate(x):
            edge, base = (table.hi, table.G[-1]) if s > table.hi else (table.lo, table.G[0])
            out[j] = base + adaptive_gauss_legendre(integrand, edge, float(s), rtol=1e-13)
        return out

    def _eval(self, which, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("needs finite arguments")
        if self._closed is not None:
            return self._closed_eval(x, which)
        table, integrand = (self._K, self._dK) if which == "K" else (self._U, self.du2)
        flat = np.atleast_1d(x).ravel()
        out = np.empty_like(flat)
        inside = table.contains(flat)
        out[inside] = table(flat[inside])
        if not np.all(inside):
            out[~inside] = self._fallback(table, integrand, flat[~inside])
        return out.reshape(x.shape)

    def K(self, y):
        return self._eval("K", y)

    def _dK(self, y):
        return np.exp(-2.0 * self.spec.antiderivative(np.asarray(y, dtype=float)))

    def u2(self, x):
        return self._eval("u2", x)

    def du2(self, x):
        x = np.asarray(x, dtype=float)
        return self.K(x) * np.exp(2.0 * self.spec.antiderivative(x))

    def d2u2(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * self.spec(x) * self.du2(x) + 1.0

    def v(self, x):
        return self.u2(np.abs(np.asarray(x, dtype=float)))

    def dv(self, x):
        x = np.asarray(x, dtype=float)
        return np.sign(x) * self.du2(np.abs(x))

    def d2v(self, x):
        return self.d2u2(np.abs(np.asarray(x, dtype=float)))


def _closed_second(spec: GeneratorSpec) -> tuple:
    """Anchors and values of (K, u2, F) per constant piece."""
    bp = np.asarray(spec.breakpoints, dtype=float)
    slopes = np.array([p.slope for p in spec.pieces], dtype=float)
    n = len(spec.pieces)
    anchor = np.zeros(n)
    for k, p in enumerate(spec.pieces):
        if p.lo <= 0.0 < p.hi:
            anchor[k] = 0.0
        elif p.hi <= 0.0:
            anchor[k] = p.hi
        else:
            anchor[k] = p.lo
    F_a = spec.antiderivative(anchor)
    K_a = np.zeros(n)
    U_a = np.zeros(n)
    k0 = int(np.searchsorted(bp, 0.0, side="right"))

    def advance(k_from, k_to):
        # values at the anchor of piece k_to from piece k_from's formulas
        s = anchor[k_to] - anchor[k_from]
        lam = 2.0 * slopes[k_from]
        K_a[k_to] = K_a[k_from] + math.exp(-2.0 * F_a[k_from]) * float(_phi(-lam, s))
        U_a[k_to] = U_a[k_from] + K_a[k_from] * math.exp(2.0 * F_a[k_from]) * float(_phi(lam, s)) + float(_phi_int(lam, s))

    for k in range(k0 + 1, n):
        advance(k - 1, k)
    for k in range(k0 - 1, -1, -1):
        advance(k + 1, k)
    out = (anchor, K_a, U_a, F_a, slopes)
    for arr in out:
        arr.setflags(write=False)
    return out


def build_second(spec: GeneratorSpec, extent: float = SECOND_EXTENT) -> SecondTransform:
    norm = spec.l1_norm_global
    if not math.isfinite(norm):
        raise PreconditionError("f is not globally integrable")
    c2 = math.exp(4.0 * norm)
    if spec.is_piecewise_constant:
        return SecondTransform(spec=spec, c1=0.5 * c2, c2=c2, _K=None, _U=None, _closed=_closed_second(spec))
    bp = [b for b in spec.breakpoints if -extent < b < extent]
    split = [-extent, extent, *bp]
    singular = [p.singular_point for p in spec.pieces if p.singular_point is not None]
    F = lambda x: spec.antiderivative(np.asarray(x, dtype=float))  # noqa: E731
    K_table = _CumulativeTable(lambda y: np.exp(-2.0 * F(y)), split, singular)
    U_table = _CumulativeTable(lambda x: K_table(np.asarray(x, dtype=float)) * np.exp(2.0 * F(x)), split, singular)
    return SecondTransform(spec=spec, c1=0.5 * c2, c2=c2, _K=K_table, _U=U_table)
