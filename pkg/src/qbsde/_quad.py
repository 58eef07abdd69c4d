"""Gauss-Legendre building blocks used at construction time."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def legendre_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(func, a: float, b: float, n: int = 20, singular: str | None = None) -> float:
    """Fixed-order rule on [a, b].

    ``singular='lo'`` (or ``'hi'``) maps the panel through y = a + s**2
    (y = b - s**2), which removes an inverse-square-root type singularity of
    the integrand derivative at that end.
    """
    x, w = legendre_rule(n)
    if singular is None:
        half = 0.5 * (b - a)
        t = 0.5 * (a + b) + half * x
        return float(half * np.dot(w, func(t)))
    span = np.sqrt(b - a)
    s = 0.5 * span * (x + 1.0)
    if singular == "lo":
        y = a + s * s
    elif singular == "hi":
        y = b - s * s
    else:
        raise ValueError(f"unknown singular end {singular!r}")
    return float(0.5 * span * np.dot(w, func(y) * 2.0 * s))


def adaptive_gauss_legendre(
    func,
    a: float,
    b: float,
    rtol: float = 1e-14,
    atol: float = 1e-15,
    n: int = 20,
    singular: str | None = None,
    max_panels: int = 20000,
) -> float:
    """Composite Gauss-Legendre with panel bisection until halves agree."""
    if a == b:
        return 0.0
    if b < a:
        flip = {"lo": "hi", "hi": "lo"}.get(singular) if singular else None
        return -adaptive_gauss_legendre(func, b, a, rtol, atol, n, flip, max_panels)
    total = 0.0
    stack = [(a, b, gauss_legendre(func, a, b, n, singular), singular)]
    panels = 0
    while stack:
        lo, hi, whole, sing = stack.pop()
        mid = 0.5 * (lo + hi)
        left = gauss_legendre(func, lo, mid, n, "lo" if sing == "lo" else None)
        right = gauss_legendre(func, mid, hi, n, "hi" if sing == "hi" else None)
        panels += 1
        if abs(left + right - whole) <= max(atol, rtol * abs(left + right)) or panels > max_panels:
            total += left + right
        else:
            stack.append((lo, mid, left, "lo" if sing == "lo" else None))
            stack.append((mid, hi, right, "hi" if sing == "hi" else None))
    return total
