"""Brownian ensembles, Euler-Maruyama, occupation statistics and Gaussian
expectations.

Randomness: path k is drawn from block k // 64, whose generator is seeded by
``SeedSequence(seed, spawn_key=(k // 64,))``.  A path is therefore the same
array whatever the number of paths requested.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericalError, SimulationBlowupError

BLOCK = 64
GAUSS_TRUNCATION = 13.0


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DomainError("T must be positive and finite")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments on a shared grid, one row per path."""

    grid: TimeGrid
    increments: np.ndarray
    seed: int
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def W(self) -> np.ndarray:
        out = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    @property
    def W_T(self) -> np.ndarray:
        return self.W[:, -1]

    def coarsen(self, factor: int) -> "PathEnsemble":
        """Same Brownian paths observed on every ``factor``-th node."""
        if self.n_steps % factor:
            raise DomainError(f"n_steps={self.n_steps} is not divisible by {factor}")
        inc = self.increments.reshape(self.n_paths, self.n_steps // factor, factor).sum(axis=2)
        return PathEnsemble(TimeGrid(self.grid.T, self.n_steps // factor), inc, self.seed, self.antithetic)

    def head(self, n_paths: int) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.increments[:n_paths], self.seed, self.antithetic)

    def same_paths(self, other: "PathEnsemble") -> bool:
        return (
            self is other
            or (
                self.grid == other.grid
                and self.increments.shape == other.increments.shape
                and np.array_equal(self.increments, other.increments)
            )
        )


def _block_normals(seed: int, block: int, n_steps: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal((BLOCK, n_steps))


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int, antithetic: bool = False) -> PathEnsemble:
    """Draw ``n_paths`` Brownian paths on ``grid``.

    With ``antithetic`` the odd paths are the negatives of the preceding even
    paths, and only even paths consume random numbers.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be at least 1")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise DomainError("seed must be a 64-bit nonnegative integer")
    n_base = (n_paths + 1) // 2 if antithetic else n_paths
    n_blocks = -(-n_base // BLOCK)
    base = np.concatenate([_block_normals(seed, b, grid.n_steps) for b in range(n_blocks)])[:n_base]
    if antithetic:
        z = np.empty((2 * n_base, grid.n_steps))
        z[0::2] = base
        z[1::2] = -base
        z = z[:n_paths]
    else:
        z = base
    inc = z * math.sqrt(grid.dt)
    inc.setflags(write=False)
    return PathEnsemble(grid, inc, seed, antithetic)


@dataclass(frozen=True)
class Coefficient:
    """A Lipschitz coefficient x -> func(x) with its declared constant."""

    func: Callable
    lipschitz: float
    name: str = ""

    def __call__(self, x):
        return np.asarray(self.func(x), dtype=float) * np.ones_like(x)

    @classmethod
    def constant(cls, c: float) -> "Coefficient":
        return cls(lambda x: np.full_like(np.asarray(x, dtype=float), c), 0.0, f"const({c})")

    @classmethod
    def linear(cls, k: float) -> "Coefficient":
        return cls(lambda x: k * np.asarray(x, dtype=float), abs(k), f"linear({k})")


@dataclass(frozen=True, eq=False)
class ForwardPaths:
    ensemble: PathEnsemble
    X: np.ndarray
    b: Coefficient
    sigma: Coefficient
    x0: float
    t0: float = 0.0

    @property
    def X_T(self) -> np.ndarray:
        return self.X[:, -1]


def euler_forward(b: Coefficient, sigma: Coefficient, t0: float, x0: float, ensemble: PathEnsemble) -> ForwardPaths:
    """X_{k+1} = X_k + b(X_k) dt + sigma(X_k) dW_k on the ensemble grid,
    which is read as the interval [t0, t0 + T]."""
    n, m = ensemble.n_paths, ensemble.n_steps
    dt = ensemble.grid.dt
    X = np.empty((n, m + 1))
    X[:, 0] = x0
    dW = ensemble.increments
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(m):
            x = X[:, k]
            X[:, k + 1] = x + b(x) * dt + sigma(x) * dW[:, k]
            bad = ~np.isfinite(X[:, k + 1])
            if bad.any():
                raise SimulationBlowupError(int(np.flatnonzero(bad)[0]), k + 1)
    X.setflags(write=False)
    return ForwardPaths(ensemble, X, b, sigma, float(x0), float(t0))


def quadratic_variation(Z: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """<Y>_t = int_0^t |Z|^2 as a left-point cumulative sum, 0 at t = 0."""
    Z = np.asarray(Z, dtype=float)
    out = np.zeros(Z.shape[:-1] + (Z.shape[-1] + 1,))
    np.cumsum(Z * Z * grid.dt, axis=-1, out=out[..., 1:])
    return out


def default_bandwidth(Y: np.ndarray, grid: TimeGrid) -> float:
    """2 * mean |dY|, clamped to [dt^0.6, 1]."""
    mean_step = float(np.mean(np.abs(np.diff(np.asarray(Y, dtype=float), axis=-1))))
    return float(np.clip(2.0 * mean_step, grid.dt**0.6, 1.0))


def local_time(Y: np.ndarray, Z: np.ndarray, level: float, bandwidth: float, grid: TimeGrid) -> np.ndarray:
    """Kernel estimate (1/2eps) sum_k 1{|Y_k - a| < eps} |Z_k|^2 dt per path."""
    if not bandwidth > 0:
        raise DomainError("bandwidth must be positive")
    Y = np.asarray(Y, dtype=float)[..., :-1]
    Z = np.asarray(Z, dtype=float)
    hit = np.abs(Y - level) < bandwidth
    return np.sum(np.where(hit, Z * Z, 0.0), axis=-1) * grid.dt / (2.0 * bandwidth)


def mean_local_time_profile(Y, Z, levels, bandwidth: float, grid: TimeGrid) -> np.ndarray:
    """Ensemble mean of ``local_time`` at many levels, from one sort."""
    if not bandwidth > 0:
        raise DomainError("bandwidth must be positive")
    y = np.asarray(Y, dtype=float)[..., :-1].ravel()
    z = np.asarray(Z, dtype=float).ravel()
    n_paths = max(1, np.asarray(Y).size // np.asarray(Y).shape[-1])
    order = np.argsort(y, kind="stable")
    ys = y[order]
    cw = np.concatenate([[0.0], np.cumsum((z * z)[order])])
    levels = np.asarray(levels, dtype=float)
    hi = np.searchsorted(ys, levels + bandwidth, side="left")
    lo = np.searchsorted(ys, levels - bandwidth, side="right")
    return (cw[hi] - cw[lo]) * grid.dt / (2.0 * bandwidth) / n_paths


@lru_cache(maxsize=None)
def _hermite_rule(order: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / math.sqrt(2.0 * math.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@lru_cache(maxsize=None)
def _legendre(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def _gauss_nodes(center, std, order, kinks):
    """Nodes x = center + std * z and weights for E[h(center + std G)].

    Without kinks: Gauss-Hermite.  With kinks: Gauss-Legendre with ``order``
    nodes on each segment of [-13, 13] cut at the kink preimages, weighted by
    the normal density.  Returns (x, w, z), each (n_centers, n_nodes).
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    std = np.broadcast_to(np.asarray(std, dtype=float), center.shape)
    if len(kinks) == 0:
        z, w = _hermite_rule(order)
        z = np.broadcast_to(z, center.shape + z.shape)
        w = np.broadcast_to(w, z.shape)
    else:
        L = GAUSS_TRUNCATION
        with np.errstate(divide="ignore", invalid="ignore"):
            zk = (np.asarray(kinks, dtype=float)[None, :] - center[:, None]) / std[:, None]
        zk = np.where(np.isfinite(zk), zk, L)
        zk = np.clip(zk, -L, L)
        ends = np.sort(np.concatenate([np.full((center.size, 1), -L), zk, np.full((center.size, 1), L)], axis=1), axis=1)
        a, b = ends[:, :-1], ends[:, 1:]
        t, wt = _legendre(order)
        half = 0.5 * (b - a)
        z = (0.5 * (a + b))[..., None] + half[..., None] * t
        w = half[..., None] * wt * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        z = z.reshape(center.size, -1)
        w = w.reshape(center.size, -1)
    x = center[:, None] + std[:, None] * z
    return x, w, z


def _check_order(order):
    if not (5 <= int(order) <= 200):
        raise DomainError("quadrature order must lie in [5, 200]")


def gh_expectation(h: Callable, variance, center=0.0, order: int = 64, kinks: Sequence[float] = (), chunk: int = 4096):
    """E[h(center + sqrt(variance) G)] for standard normal G.

    ``center`` may be an array; the result then has its shape.  Pass the
    points where h is not smooth as ``kinks`` to switch to piecewise
    Gauss-Legendre, which keeps full accuracy for kinked h.
    """
    return _expect(h, variance, center, order, kinks, chunk, with_score=False)


def gh_expectation_pair(h: Callable, variance, center=0.0, order: int = 64, kinks: Sequence[float] = (), chunk: int = 4096):
    """(E[h(c + s G)], E[h(c + s G) G]); the second divided by s is the
    derivative of the first in c."""
    return _expect(h, variance, center, order, kinks, chunk, with_score=True)


def _expect(h, variance, center, order, kinks, chunk, with_score):
    _check_order(order)
    if variance < 0 or not math.isfinite(variance):
        raise DomainError("variance must be finite and nonnegative")
    c = np.asarray(center, dtype=float)
    shape = c.shape
    flat = c.ravel()
    if variance == 0.0:
        val = np.asarray(h(flat), dtype=float)
        out = val.reshape(shape)
        return (out, np.zeros(shape)) if with_score else (float(out) if not shape else out)
    std = math.sqrt(variance)
    mean = np.empty(flat.size)
    score = np.empty(flat.size)
    for s in range(0, max(flat.size, 1), chunk):
        cc = flat[s:s + chunk]
        x, w, z = _gauss_nodes(cc, std, order, kinks)
        vals = np.asarray(h(x.ravel()), dtype=float).reshape(x.shape)
        if not np.all(np.isfinite(vals)) or not np.all(np.isfinite(w)):
            raise NumericalError("non-finite integrand or weight in Gaussian quadrature")
        mean[s:s + chunk] = np.sum(w * vals, axis=1)
        if with_score:
            score[s:s + chunk] = np.sum(w * vals * z, axis=1)
    if with_score:
        return mean.reshape(shape), score.reshape(shape)
    return float(mean[0]) if not shape else mean.reshape(shape)


def dump_paths_csv(path, ensemble: PathEnsemble, forward: ForwardPaths | None = None) -> None:
    """Columns: path_id, t, W, X (X empty when no forward paths are given)."""
    W = ensemble.W
    t = ensemble.grid.nodes
    if forward is not None:
        t = t + forward.t0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t", "W", "X"])
        for j in range(ensemble.n_paths):
            X = forward.X[j] if forward is not None else None
            for k in range(len(t)):
                w.writerow([j, f"{t[k]:.17g}", f"{W[j, k]:.17g}", "" if X is None else f"{X[k]:.17g}"])
