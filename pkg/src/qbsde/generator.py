"""Piecewise description of the quadratic coefficient f(y) in H = f(y)|z|^2.

Every consumer downstream reaches f through its antiderivative
F(x) = int_0^x f(t) dt.  Two coefficients that agree almost everywhere
therefore produce identical transforms and identical BSDE solutions; the
pointwise value ``spec(x)`` exists for diagnostics and for user drivers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from ._quad import adaptive_gauss_legendre
from .errors import DomainError, PreconditionError

KINDS = ("const", "poly", "sin", "h3sing", "callable")
SQRT2 = math.sqrt(2.0)


def _quartic_primitive(s):
    """int_0^s dt / (1 + t^4) for s >= 0 (inf allowed)."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    inf = np.isinf(s)
    out[inf] = math.pi / (2.0 * SQRT2)
    t = s[~inf]
    log_term = np.log((t * t + SQRT2 * t + 1.0) / (t * t - SQRT2 * t + 1.0))
    atan_term = 2.0 * np.arctan(SQRT2 * t + 1.0) + 2.0 * np.arctan(SQRT2 * t - 1.0)
    out[~inf] = (log_term + atan_term) / (4.0 * SQRT2)
    return out


@dataclass(frozen=True)
class Piece:
    """f restricted to the half-open interval [lo, hi).

    kinds and their ``coeffs``:

    - ``const``: (c,)
    - ``poly``: ascending coefficients
    - ``sin``: (amplitude, frequency=1, phase=0) for A sin(w y + p)
    - ``h3sing``: (amplitude,) for A / ((1 + y^2) sqrt|y|), value A at y = 0
    - ``callable``: any smooth vectorised ``func``; integrated numerically
    """

    lo: float
    hi: float
    kind: str = "const"
    coeffs: tuple[float, ...] = (0.0,)
    func: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown piece kind {self.kind!r}")
        if not self.lo < self.hi:
            raise ValueError(f"empty piece [{self.lo}, {self.hi})")
        if self.kind == "callable" and self.func is None:
            raise ValueError("callable piece needs func")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    # -- pointwise ----------------------------------------------------------
    @property
    def is_zero(self) -> bool:
        if self.kind == "callable":
            return False
        if self.kind == "poly":
            return all(c == 0.0 for c in self.coeffs)
        return self.coeffs[0] == 0.0

    @property
    def slope(self) -> float | None:
        """The constant value when the piece is constant (F is affine)."""
        if self.kind == "const":
            return self.coeffs[0]
        if self.is_zero:
            return 0.0
        return None

    def _sin_params(self):
        amp = self.coeffs[0]
        freq = self.coeffs[1] if len(self.coeffs) > 1 else 1.0
        phase = self.coeffs[2] if len(self.coeffs) > 2 else 0.0
        return amp, freq, phase

    def value(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "const":
            return np.full_like(y, self.coeffs[0])
        if self.kind == "poly":
            return np.polynomial.polynomial.polyval(y, self.coeffs)
        if self.kind == "sin":
            amp, freq, phase = self._sin_params()
            return amp * np.sin(freq * y + phase)
        if self.kind == "h3sing":
            amp = self.coeffs[0]
            ay = np.abs(y)
            with np.errstate(divide="ignore"):
                out = amp / ((1.0 + y * y) * np.sqrt(ay))
            return np.where(ay == 0.0, amp, out)
        return np.asarray(self.func(y), dtype=float)

    # -- integration --------------------------------------------------------
    @property
    def anchor(self) -> float:
        if math.isfinite(self.lo):
            return self.lo
        if math.isfinite(self.hi):
            return self.hi
        return 0.0

    @property
    def singular_point(self) -> float | None:
        if self.kind == "h3sing" and self.lo <= 0.0 <= self.hi:
            return 0.0
        return None

    def primitive(self, y):
        """An antiderivative of the piece formula (arbitrary constant)."""
        y = np.asarray(y, dtype=float)
        if self.kind == "const":
            return self.coeffs[0] * y
        if self.kind == "poly":
            return np.polynomial.polynomial.polyval(y, np.polynomial.polynomial.polyint(self.coeffs))
        if self.kind == "sin":
            amp, freq, phase = self._sin_params()
            return -amp / freq * np.cos(freq * y + phase)
        if self.kind == "h3sing":
            return self.coeffs[0] * np.sign(y) * 2.0 * _quartic_primitive(np.sqrt(np.abs(y)))
        a = self.anchor
        flat = np.atleast_1d(y).ravel()
        vals = np.array([adaptive_gauss_legendre(self.value, a, float(t)) for t in flat])
        return vals.reshape(np.shape(y))

    def integral(self, a: float, b: float) -> float:
        """int_a^b of the piece formula, a and b inside the closure."""
        if a == b or self.is_zero:
            return 0.0
        if self.kind == "callable":
            return adaptive_gauss_legendre(self.value, a, b)
        ga, gb = self.primitive(np.array([a, b]))
        return float(gb - ga)

    def _sign_change_points(self, a: float, b: float) -> list[float]:
        if self.kind == "poly":
            roots = np.roots(self.coeffs[::-1]) if len(self.coeffs) > 1 else np.array([])
            return sorted(r.real for r in roots if abs(r.imag) < 1e-12 and a < r.real < b)
        if self.kind == "sin":
            amp, freq, phase = self._sin_params()
            k_lo, k_hi = sorted(((freq * a + phase) / math.pi, (freq * b + phase) / math.pi))
            ks = range(math.floor(k_lo) + 1, math.ceil(k_hi))
            return sorted((k * math.pi - phase) / freq for k in ks)
        return []

    def abs_integral(self, a: float, b: float) -> float:
        """int_a^b |f| over a sub-interval of the piece."""
        if not a < b or self.is_zero:
            return 0.0
        if not (math.isfinite(a) and math.isfinite(b)):
            if self.kind == "h3sing":
                return abs(self.integral(a, b))
            return math.inf
        if self.kind == "const":
            return abs(self.coeffs[0]) * (b - a)
        if self.kind == "h3sing":
            return abs(self.integral(a, b))
        if self.kind == "callable":
            return adaptive_gauss_legendre(lambda t: np.abs(self.value(t)), a, b)
        cuts = [a, *self._sign_change_points(a, b), b]
        return float(sum(abs(self.integral(lo, hi)) for lo, hi in zip(cuts[:-1], cuts[1:])))

    def sup_abs(self, a: float, b: float) -> float:
        if self.is_zero:
            return 0.0
        if self.kind == "const":
            return abs(self.coeffs[0])
        if self.kind == "sin":
            return abs(self.coeffs[0])
        if self.kind == "h3sing":
            if a <= 0.0 <= b:
                return math.inf
            return float(abs(self.value(min(abs(a), abs(b)))))
        if not (math.isfinite(a) and math.isfinite(b)):
            return math.inf
        grid = np.linspace(a, b, 2049)
        return float(np.max(np.abs(self.value(grid))))

    # -- transformations ----------------------------------------------------
    def mirrored(self) -> "Piece":
        """The piece of y -> f(-y), on [-hi, -lo)."""
        lo, hi = -self.hi + 0.0, -self.lo + 0.0
        if self.kind == "poly":
            coeffs = tuple(c * (-1) ** i for i, c in enumerate(self.coeffs))
            return Piece(lo, hi, "poly", coeffs)
        if self.kind == "sin":
            amp, freq, phase = self._sin_params()
            return Piece(lo, hi, "sin", (amp, -freq, phase))
        if self.kind == "callable":
            g = self.func
            return Piece(lo, hi, "callable", (), func=lambda y: g(-np.asarray(y)))
        return Piece(lo, hi, self.kind, self.coeffs)

    def scaled(self, k: float) -> "Piece":
        if self.kind == "poly":
            return replace(self, coeffs=tuple(k * c for c in self.coeffs))
        if self.kind == "callable":
            g = self.func
            return replace(self, func=lambda y: k * np.asarray(g(y)))
        return replace(self, coeffs=(k * self.coeffs[0], *self.coeffs[1:]))

    def clipped(self, lo: float, hi: float) -> "Piece":
        return replace(self, lo=max(lo, self.lo), hi=min(hi, self.hi))

    def to_json(self) -> dict:
        if self.kind == "callable":
            raise TypeError("callable pieces cannot be serialised")
        return {"lo": _num_out(self.lo), "hi": _num_out(self.hi), "kind": self.kind, "coeffs": list(self.coeffs)}


def _num_out(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _num_in(x) -> float:
    if x is None:
        raise ValueError("interval endpoints must be numbers or '+-inf'")
    return float(x)


@dataclass(frozen=True)
class GeneratorSpec:
    """A globally integrable coefficient f, stored as pieces partitioning R.

    ``point_values`` override the pointwise representative on a finite set.
    They are visible to ``spec(x)`` only; the antiderivative ignores them.
    """

    pieces: tuple[Piece, ...]
    point_values: tuple[tuple[float, float], ...] = ()
    eta_bound: float = 0.0
    name: str = ""

    def __post_init__(self):
        pieces = tuple(self.pieces)
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "point_values", tuple((float(x), float(v)) for x, v in self.point_values))
        if not pieces:
            raise ValueError("at least one piece is required")
        if pieces[0].lo != -math.inf or pieces[-1].hi != math.inf:
            raise ValueError("pieces must cover the whole real line")
        for left, right in zip(pieces[:-1], pieces[1:]):
            if left.hi != right.lo:
                raise ValueError(f"pieces are not contiguous at {left.hi} / {right.lo}")
        if self.eta_bound < 0:
            raise ValueError("eta_bound must be nonnegative")

    @classmethod
    def from_pieces(cls, pieces: Iterable[Piece], **kwargs) -> "GeneratorSpec":
        """Sort pieces and fill the gaps (including both tails) with zero."""
        pieces = sorted(pieces, key=lambda p: p.lo)
        filled: list[Piece] = []
        cursor = -math.inf
        for p in pieces:
            if p.lo < cursor:
                raise ValueError(f"overlapping pieces near {p.lo}")
            if p.lo > cursor:
                filled.append(Piece(cursor, p.lo))
            filled.append(p)
            cursor = p.hi
        if cursor < math.inf:
            filled.append(Piece(cursor, math.inf))
        return cls(_merge_zero(filled), **kwargs)

    # -- derived data ---------------------------------------------------------
    @cached_property
    def breakpoints(self) -> np.ndarray:
        b = np.array([p.hi for p in self.pieces[:-1]], dtype=float)
        b.setflags(write=False)
        return b

    @cached_property
    def _anchor_values(self) -> np.ndarray:
        """F at each piece anchor, integrating outward from 0."""
        bps = self.breakpoints
        m = len(bps)
        f_at_bp = np.zeros(m)
        k0 = int(np.searchsorted(bps, 0.0, side="right"))
        for i in range(k0, m):  # right of zero
            p = self.pieces[i]
            start = 0.0 if i == k0 else bps[i - 1]
            base = 0.0 if i == k0 else f_at_bp[i - 1]
            f_at_bp[i] = base + p.integral(start, bps[i])
        for i in range(k0 - 1, -1, -1):  # left of zero
            p = self.pieces[i + 1]
            end = 0.0 if i + 1 == k0 else bps[i + 1]
            base = 0.0 if i + 1 == k0 else f_at_bp[i + 1]
            f_at_bp[i] = base - p.integral(bps[i], end)
        anchors = np.empty(len(self.pieces))
        for k, p in enumerate(self.pieces):
            if math.isfinite(p.lo):
                anchors[k] = f_at_bp[k - 1]
            elif math.isfinite(p.hi):
                anchors[k] = f_at_bp[k]
            else:
                anchors[k] = 0.0
        return anchors

    @cached_property
    def l1_norm_global(self) -> float:
        return float(sum(p.abs_integral(p.lo, p.hi) for p in self.pieces))

    @cached_property
    def support_bound(self) -> float:
        ends = [max(abs(p.lo), abs(p.hi)) for p in self.pieces if not p.is_zero]
        if not ends:
            return 0.0
        return float(max(ends))

    @cached_property
    def sup_abs(self) -> float:
        return max(p.sup_abs(p.lo, p.hi) for p in self.pieces)

    @property
    def is_piecewise_constant(self) -> bool:
        return all(p.slope is not None for p in self.pieces)

    def piece_index(self, x) -> np.ndarray:
        return np.searchsorted(self.breakpoints, x, side="right")

    # -- evaluation -----------------------------------------------------------
    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        idx = self.piece_index(y)
        out = np.zeros_like(y)
        for k in np.unique(idx):
            mask = idx == k
            out[mask] = self.pieces[k].value(y[mask])
        for x0, v in self.point_values:
            out = np.where(y == x0, v, out)
        return out

    def antiderivative(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("antiderivative needs finite arguments")
        idx = self.piece_index(x)
        out = np.empty_like(x)
        anchors = self._anchor_values
        for k in np.unique(idx):
            mask = idx == k
            p = self.pieces[k]
            a = p.anchor
            if p.kind == "callable":
                out[mask] = anchors[k] + p.primitive(x[mask])
            else:
                out[mask] = anchors[k] + (p.primitive(x[mask]) - p.primitive(a))
        return out

    def l1_norm(self, lo: float, hi: float) -> float:
        if lo > hi:
            raise DomainError(f"empty interval [{lo}, {hi}]")
        total = 0.0
        for p in self.pieces:
            a, b = max(lo, p.lo), min(hi, p.hi)
            if a < b:
                total += p.abs_integral(a, b)
        return float(total)

    # -- derived specs --------------------------------------------------------
    def negated(self) -> "GeneratorSpec":
        return GeneratorSpec(
            tuple(p.scaled(-1.0) for p in self.pieces),
            tuple((x, -v) for x, v in self.point_values),
            self.eta_bound,
            f"-{self.name}" if self.name else "",
        )

    def symmetrized(self) -> "GeneratorSpec":
        """The coefficient y -> f(|y|)."""
        right = [p.clipped(0.0, math.inf) for p in self.pieces if p.hi > 0.0]
        left = [p.mirrored() for p in right]
        name = f"{self.name}(|y|)" if self.name else ""
        return GeneratorSpec.from_pieces(
            [p for p in left + right if not p.is_zero], eta_bound=self.eta_bound, name=name
        )

    # -- serialisation --------------------------------------------------------
    def to_json(self) -> dict:
        out = {"pieces": [p.to_json() for p in self.pieces if not p.is_zero]}
        if self.point_values:
            out["point_values"] = [list(pv) for pv in self.point_values]
        if self.eta_bound:
            out["eta_bound"] = self.eta_bound
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_json(cls, obj) -> "GeneratorSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        pieces = [
            Piece(_num_in(p["lo"]), _num_in(p["hi"]), p.get("kind", "const"), tuple(p.get("coeffs", (0.0,))))
            for p in obj["pieces"]
        ]
        return cls.from_pieces(
            pieces,
            point_values=tuple(tuple(pv) for pv in obj.get("point_values", ())),
            eta_bound=float(obj.get("eta_bound", 0.0)),
            name=obj.get("name", ""),
        )


def _merge_zero(pieces: Sequence[Piece]) -> tuple[Piece, ...]:
    out: list[Piece] = []
    for p in pieces:
        if out and p.is_zero and out[-1].is_zero:
            out[-1] = Piece(out[-1].lo, p.hi)
        else:
            out.append(Piece(p.lo, p.hi) if p.is_zero else p)
    return tuple(out)


@dataclass(frozen=True)
class DominatingParams:
    """Coefficients of g(y, z) = a + b|y| + c|z| + f(|y|)|z|^2."""

    a: float
    b: float
    c: float
    f: GeneratorSpec

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 0:
            raise ValueError("a, b, c must be nonnegative")
        if not math.isfinite(self.f.l1_norm_global):
            raise PreconditionError("f must be globally integrable")

    def __call__(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        return self.a + self.b * np.abs(y) + self.c * np.abs(z) + self.f(np.abs(y)) * z * z


def antiderivative(spec: GeneratorSpec, x):
    """F(x) = int_0^x f.  Scalar in, float out; arrays in, arrays out."""
    out = spec.antiderivative(x)
    return float(out) if np.ndim(out) == 0 else out


def l1_norm(spec: GeneratorSpec, lo: float = -math.inf, hi: float = math.inf) -> float:
    return spec.l1_norm(lo, hi)


def _indicator_sum(terms: Sequence[tuple[float, float, float]], name: str) -> GeneratorSpec:
    """sum of weight * 1_[lo, hi) as a piecewise-constant spec."""
    cuts = sorted({x for lo, hi, _ in terms for x in (lo, hi)})
    pieces = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        value = sum(w for a, b, w in terms if a <= mid < b)
        if value != 0.0:
            pieces.append(Piece(lo, hi, "const", (value,)))
    return GeneratorSpec.from_pieces(pieces, name=name)


def builtin(name: str, **params) -> GeneratorSpec:
    """The coefficients of the motivating examples.

    ``H1``: sin(y) on [-pi, pi/2]; ``H2``: 1_[a,b] - 1_[c,d] (defaults
    a,b,c,d = 0,1,2,3); ``H3``: 1/((1+y^2) sqrt|y|); ``step``: alpha 1_[0,1];
    ``zero``.
    """
    key = name.lower()
    if key == "zero":
        return GeneratorSpec.from_pieces([], name="zero")
    if key == "step":
        alpha = float(params.get("alpha", 1.0))
        lo, hi = float(params.get("lo", 0.0)), float(params.get("hi", 1.0))
        return _indicator_sum([(lo, hi, alpha)], name="step")
    if key == "h1":
        return GeneratorSpec.from_pieces([Piece(-math.pi, math.pi / 2, "sin", (1.0,))], name="H1")
    if key == "h2":
        a, b = float(params.get("a", 0.0)), float(params.get("b", 1.0))
        c, d = float(params.get("c", 2.0)), float(params.get("d", 3.0))
        if not (a < b and c < d):
            raise ValueError("H2 needs a < b and c < d")
        return _indicator_sum([(a, b, 1.0), (c, d, -1.0)], name="H2")
    if key == "h3":
        amp = float(params.get("amplitude", 1.0))
        return GeneratorSpec(
            (Piece(-math.inf, 0.0, "h3sing", (amp,)), Piece(0.0, math.inf, "h3sing", (amp,))), name="H3"
        )
    raise LookupError(f"unknown builtin generator {name!r}")


BUILTIN_NAMES = ("H1", "H2", "H3", "step", "zero")
