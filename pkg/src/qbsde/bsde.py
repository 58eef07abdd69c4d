"""Backward solvers.

Two conditional-expectation engines are available:

``quadrature``
    Markovian in W.  Without a driver, Y_k(w) = E[psi(w + sqrt(T - t_k) G)]
    is evaluated by Gaussian quadrature on a per-step w-grid together with
    its first two w-derivatives (Stein identities) and interpolated onto the
    paths by quintic Hermite interpolation.  With a driver, an implicit
    Euler step is taken on a fixed w-grid, cubic splines carry values
    between steps.
``regression``
    Least-squares Monte Carlo on standardised monomials of the state.
    Targets are the multi-step sums xi + sum_{j > k} G_j dt, so projection
    errors do not accumulate through the backward sweep.

Z always comes from the increment estimator E_k[Y_{k+1} dW_k] / dt (its
exact Gaussian counterpart in the quadrature engine) and enters the
implicit step explicitly; the fixed point is iterated in y only.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    IllConditionedBasisError,
    NonContractiveStepError,
    PreconditionError,
    SolverInconsistencyError,
)
from .generator import DominatingParams, GeneratorSpec
from .stochastic import ForwardPaths, PathEnsemble, TimeGrid, gh_expectation_pair
from .transform import TransformPair, build_u

PICARD_TOL = 1e-10
PICARD_MAX_ITER = 100
CONDITION_LIMIT = 1e10
METHODS = ("quadrature", "regression")


# ---------------------------------------------------------------- terminal
@dataclass(frozen=True)
class TerminalCondition:
    """xi = psi(W_T) (``of_brownian``) or psi(X_T) (``of_forward``).

    ``kinks`` lists points where psi is not smooth.  ``preimage`` maps a
    level c to the points x with psi(x) = c; it is used to locate the kinks
    of u(psi) at the breakpoints of f.
    """

    psi: Callable
    kind: str = "of_brownian"
    growth_degree: int = 1
    kinks: tuple = ()
    preimage: Callable | None = field(default=None, compare=False, repr=False)
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("of_brownian", "of_forward"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        object.__setattr__(self, "kinks", tuple(sorted(set(float(k) for k in self.kinks))))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.psi(x), dtype=float) * np.ones_like(x)

    def state_at_maturity(self, ensemble: PathEnsemble, forward: ForwardPaths | None = None) -> np.ndarray:
        if self.kind == "of_forward":
            if forward is None:
                raise PreconditionError("of_forward terminal needs forward paths")
            return forward.X_T
        return ensemble.W_T

    def sample(self, ensemble: PathEnsemble, forward: ForwardPaths | None = None) -> np.ndarray:
        return self(self.state_at_maturity(ensemble, forward))

    def second_moment(self, ensemble: PathEnsemble, forward: ForwardPaths | None = None) -> tuple[float, float]:
        """Monte Carlo estimate of E[xi^2] and its standard error."""
        sq = self.sample(ensemble, forward) ** 2
        return float(np.mean(sq)), float(np.std(sq, ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0

    def _preimages(self, levels: Iterable[float]) -> list[float]:
        if self.preimage is None:
            return []
        return [float(x) for c in levels for x in self.preimage(float(c))]

    def composed(self, tp: TransformPair) -> "TerminalCondition":
        """u(psi), kinks at psi's kinks and at psi^{-1}(breakpoints of f)."""
        levels = list(tp.spec.breakpoints)
        kinks = set(self.kinks) | set(self._preimages(levels))
        psi = self.psi
        return TerminalCondition(
            lambda x: tp.u(np.asarray(psi(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x)),
            self.kind,
            self.growth_degree,
            tuple(kinks),
            None,
            f"u({self.name})",
        )

    def positive_part(self) -> "TerminalCondition":
        psi = self.psi
        return TerminalCondition(
            lambda x: np.maximum(np.asarray(psi(x), dtype=float), 0.0),
            self.kind,
            self.growth_degree,
            tuple(set(self.kinks) | set(self._preimages([0.0]))),
            _restricted_preimage(self.preimage, lambda c: c > 0),
            f"({self.name})+",
        )

    def neg_negative_part(self) -> "TerminalCondition":
        psi = self.psi
        return TerminalCondition(
            lambda x: np.minimum(np.asarray(psi(x), dtype=float), 0.0),
            self.kind,
            self.growth_degree,
            tuple(set(self.kinks) | set(self._preimages([0.0]))),
            _restricted_preimage(self.preimage, lambda c: c < 0),
            f"-({self.name})-",
        )


def _restricted_preimage(pre, keep):
    if pre is None:
        return None
    return lambda c: pre(c) if keep(c) else []


def terminal(name: str, kind: str = "of_brownian", **p) -> TerminalCondition:
    """Terminal functions used by fixtures and presets.

    ``identity`` x, ``shift`` x + s, ``square`` x^2, ``positive_part``
    max(x - K, 0), ``abs`` |x|, ``constant`` c.
    """
    key = name.lower()
    if key == "identity":
        return TerminalCondition(lambda x: x, kind, 1, (), lambda c: [c], "x")
    if key == "shift":
        s = float(p.get("s", 0.0))
        return TerminalCondition(lambda x: x + s, kind, 1, (), lambda c: [c - s], f"x{s:+g}")
    if key == "square":
        return TerminalCondition(
            lambda x: x * x, kind, 2, (), lambda c: [] if c < 0 else ([0.0] if c == 0 else [-math.sqrt(c), math.sqrt(c)]), "x^2"
        )
    if key == "positive_part":
        K = float(p.get("K", 0.0))
        return TerminalCondition(
            lambda x: np.maximum(x - K, 0.0), kind, 1, (K,), lambda c: [K + c] if c > 0 else ([K] if c == 0 else []), "max(x,0)"
        )
    if key == "abs":
        return TerminalCondition(
            np.abs, kind, 1, (0.0,), lambda c: [-c, c] if c > 0 else ([0.0] if c == 0 else []), "|x|"
        )
    if key == "constant":
        c0 = float(p.get("c", 0.0))
        return TerminalCondition(lambda x: np.full_like(np.asarray(x, dtype=float), c0), kind, 0, (), lambda c: [], f"{c0:g}")
    raise LookupError(f"unknown terminal {name!r}")


# ---------------------------------------------------------------- drivers
@dataclass(frozen=True)
class Driver:
    """Generator H(t, y, z), vectorised.  ``lipschitz_y`` is the declared
    Lipschitz constant in y used for the contraction certificate."""

    func: Callable
    lipschitz_y: float | None = None
    name: str = ""
    is_zero: bool = False

    def __call__(self, t, y, z):
        y = np.asarray(y, dtype=float)
        return np.asarray(self.func(t, y, np.asarray(z, dtype=float)), dtype=float) * np.ones_like(y)

    @classmethod
    def zero(cls) -> "Driver":
        return cls(lambda t, y, z: np.zeros_like(y), 0.0, "0", True)

    @classmethod
    def constant(cls, c: float) -> "Driver":
        return cls(lambda t, y, z: np.full_like(y, c), 0.0, f"{c:g}", c == 0.0)

    @classmethod
    def linear(cls, b: float) -> "Driver":
        return cls(lambda t, y, z: b * y, abs(b), f"{b:g}*y", b == 0.0)

    @classmethod
    def quadratic(cls, f: GeneratorSpec) -> "Driver":
        """f(y)|z|^2."""
        return cls(lambda t, y, z: f(y) * z * z, None, f"f(y)|z|^2[{f.name}]")

    @classmethod
    def abc(cls, params: DominatingParams, sign: float = 1.0, symmetric: bool = False) -> "Driver":
        """sign (a + b|y| + c|z|) + f(y)|z|^2 (f(|y|) when ``symmetric``)."""
        a, b, c, f = params.a, params.b, params.c, params.f

        def func(t, y, z):
            fy = f(np.abs(y)) if symmetric else f(y)
            return sign * (a + b * np.abs(y) + c * np.abs(z)) + fy * z * z

        return cls(func, None, f"abc[{sign:+g}]")


# ---------------------------------------------------------------- solutions
@dataclass(eq=False)
class BsdeSolution:
    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    method: str
    ensemble: PathEnsemble
    xi: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    transformed: "BsdeSolution | None" = None

    def __post_init__(self):
        n = self.grid.n_steps
        if self.Y.shape != (self.ensemble.n_paths, n + 1) or self.Z.shape != (self.ensemble.n_paths, n):
            raise ValueError("solution arrays do not match the ensemble")
        self.Y[:, n] = self.xi
        if not (np.all(np.isfinite(self.Y)) and np.all(np.isfinite(self.Z))):
            raise SolverInconsistencyError("solution contains non-finite values")
        self.Y.setflags(write=False)
        self.Z.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def se_Y(self) -> np.ndarray:
        """Per-node standard error of Y (zeros for quadrature)."""
        return self.diagnostics.get("se_Y", np.zeros(self.grid.n_steps + 1))

    @property
    def se_path(self) -> np.ndarray:
        """Per-(path, node) prediction standard error; falls back to se_Y."""
        sp = self.diagnostics.get("se_path")
        return np.broadcast_to(self.se_Y, self.Y.shape) if sp is None else sp

    @property
    def Y0_se(self) -> float:
        return float(self.se_Y[0])

    def residual(self, driver: Driver) -> np.ndarray:
        """r_k = Y_k - Y_{k+1} - H(t_k, Y_k, Z_k) dt + Z_k dW_k."""
        t = self.grid.nodes[:-1]
        dt = self.grid.dt
        Yk, Yk1 = self.Y[:, :-1], self.Y[:, 1:]
        H = driver(t[None, :], Yk, self.Z)
        return Yk - Yk1 - H * dt + self.Z * self.ensemble.increments

    def to_csv(self, path) -> None:
        """Columns: path_id, t, Y, Z (Z empty at t = T)."""
        t = self.grid.nodes
        n = self.grid.n_steps
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "t", "Y", "Z"])
            for j in range(self.n_paths):
                for k in range(n + 1):
                    z = "" if k == n else f"{self.Z[j, k]:.17g}"
                    w.writerow([j, f"{t[k]:.17g}", f"{self.Y[j, k]:.17g}", z])


@dataclass(eq=False)
class ExtremalPair:
    """Y^{-g} (lower, terminal -xi^-) and Y^{g} (upper, terminal xi^+)."""

    lower: BsdeSolution
    upper: BsdeSolution
    S: np.ndarray
    R: float


# ---------------------------------------------------------------- helpers
def _quintic_hermite(x, xs, y, d1, d2):
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    h = xs[i + 1] - xs[i]
    t = (x - xs[i]) / h
    t2 = t * t
    t3 = t2 * t
    t4 = t3 * t
    t5 = t4 * t
    b0 = 1 - 10 * t3 + 15 * t4 - 6 * t5
    b1 = t - 6 * t3 + 8 * t4 - 3 * t5
    b2 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5
    b3 = 10 * t3 - 15 * t4 + 6 * t5
    b4 = -4 * t3 + 7 * t4 - 3 * t5
    b5 = 0.5 * t3 - t4 + 0.5 * t5
    return (
        b0 * y[i] + b1 * h * d1[i] + b2 * h * h * d2[i]
        + b3 * y[i + 1] + b4 * h * d1[i + 1] + b5 * h * h * d2[i + 1]
    )


def _cubic_hermite(x, xs, y, d1):
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    h = xs[i + 1] - xs[i]
    t = (x - xs[i]) / h
    t2 = t * t
    t3 = t2 * t
    return (
        (2 * t3 - 3 * t2 + 1) * y[i] + (t3 - 2 * t2 + t) * h * d1[i]
        + (-2 * t3 + 3 * t2) * y[i + 1] + (t3 - t2) * h * d1[i + 1]
    )


def _gauss_moments(h, variance, centers, order, kinks):
    """E[h], d/dc E[h], d^2/dc^2 E[h] at each center (Stein identities)."""
    from .stochastic import _gauss_nodes, _check_order

    _check_order(order)
    s = math.sqrt(variance)
    out = np.empty((3, centers.size))
    for a in range(0, centers.size, 2048):
        cc = centers[a:a + 2048]
        x, w, z = _gauss_nodes(cc, s, order, kinks)
        vals = np.asarray(h(x.ravel()), dtype=float).reshape(x.shape)
        wv = w * vals
        out[0, a:a + 2048] = wv.sum(axis=1)
        out[1, a:a + 2048] = (wv * z).sum(axis=1) / s
        out[2, a:a + 2048] = (wv * (z * z - 1.0)).sum(axis=1) / variance
    return out


def _need_brownian(xi: TerminalCondition, method: str):
    if method == "quadrature" and xi.kind != "of_brownian":
        raise PreconditionError("the quadrature method needs a terminal condition of the Brownian motion")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")


def _state(xi: TerminalCondition, ensemble: PathEnsemble, forward: ForwardPaths | None):
    if xi.kind == "of_forward":
        if forward is None:
            raise PreconditionError("of_forward terminal needs forward paths")
        return forward.X
    return ensemble.W


def _base_diagnostics(ensemble: PathEnsemble, method: str, **extra) -> dict:
    d = {
        "method": method,
        "n_paths": ensemble.n_paths,
        "n_steps": ensemble.n_steps,
        "T": ensemble.grid.T,
        "seed": ensemble.seed,
    }
    d.update(extra)
    return d


# ------------------------------------------------------- driver-free solvers
def _zero_quadrature(xi: TerminalCondition, ensemble: PathEnsemble, order: int):
    W = ensemble.W
    grid = ensemble.grid
    n = grid.n_steps
    t = grid.nodes
    Y = np.empty_like(W)
    Z = np.empty((ensemble.n_paths, n))
    nodes_used = 0
    for k in range(n):
        tau = grid.T - t[k]
        wk = W[:, k]
        lo, hi = float(wk.min()), float(wk.max())
        if hi - lo <= 1e-14 * max(1.0, abs(lo)):
            m = _gauss_moments(xi, tau, np.array([lo]), order, xi.kinks)
            Y[:, k] = m[0, 0]
            Z[:, k] = m[1, 0]
            nodes_used += 1
            continue
        h = min(0.05, math.sqrt(tau) / 16.0)
        n_cells = max(2, int(math.ceil((hi - lo) / h)))
        xs = np.linspace(lo, hi, n_cells + 1)
        m = _gauss_moments(xi, tau, xs, order, xi.kinks)
        Y[:, k] = _quintic_hermite(wk, xs, m[0], m[1], m[2])
        Z[:, k] = _cubic_hermite(wk, xs, m[1], m[2])
        nodes_used += xs.size
    return Y, Z, {"quadrature_order": order, "grid_nodes": nodes_used}


BASES = ("poly", "spline")


def _natural_spline(s: np.ndarray, n_knots: int) -> np.ndarray:
    """Natural cubic spline basis (linear beyond the outer knots), knots at quantiles."""
    knots = np.unique(np.quantile(s, np.linspace(0.02, 0.98, n_knots)))
    if knots.size < 3:
        return np.vander(s, 2, increasing=True)

    def d(j):
        return (np.maximum(s - knots[j], 0.0) ** 3 - np.maximum(s - knots[-1], 0.0) ** 3) / (knots[-1] - knots[j])

    last = d(knots.size - 2)
    cols = [np.ones_like(s), s] + [d(j) - last for j in range(knots.size - 2)]
    return np.column_stack(cols)


def _basis(x: np.ndarray, degree: int, k: int, kind: str = "poly"):
    """Orthonormal basis of the state: monomials up to ``degree`` or a natural
    cubic spline with ``degree + 4`` quantile knots."""
    if kind not in BASES:
        raise ValueError(f"unknown basis {kind!r}; expected one of {BASES}")
    mu = float(np.mean(x))
    sd = float(np.std(x))
    if sd <= 1e-12 * max(1.0, abs(mu)) or degree == 0:
        B = np.ones((x.size, 1))
    elif kind == "spline":
        B = _natural_spline((x - mu) / sd, degree + 4)
    else:
        s = (x - mu) / sd
        B = np.vander(s, degree + 1, increasing=True)
    Q, R = np.linalg.qr(B)
    cond = float(np.linalg.cond(R)) if R.shape[0] > 1 else 1.0
    if not math.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedBasisError(k, cond)
    return Q, cond


def _regression_sweep(xi_vals, driver: Driver | None, ensemble: PathEnsemble, state: np.ndarray, degree: int, basis: str = "poly"):
    """Multi-step LSMC sweep with an implicit y-step."""
    grid = ensemble.grid
    n, dt = grid.n_steps, grid.dt
    t = grid.nodes
    N = ensemble.n_paths
    dW = ensemble.increments
    Y = np.empty((N, n + 1))
    Z = np.empty((N, n))
    Y[:, n] = xi_vals
    se = np.zeros(n + 1)
    se_path = np.zeros((N, n + 1))
    conds = np.empty(n)
    iters = np.zeros(n, dtype=int)
    unconverged = 0
    q_max = 0.0
    acc = np.array(xi_vals, dtype=float)
    if driver is not None and driver.lipschitz_y is not None:
        q_max = dt * driver.lipschitz_y
        if q_max >= 1.0:
            raise NonContractiveStepError(q_max, int(math.ceil(2.0 * grid.T * driver.lipschitz_y)))
    for k in range(n - 1, -1, -1):
        Q, cond = _basis(state[:, k], degree, k, basis)
        conds[k] = cond
        p = Q.shape[1]
        e = Q @ (Q.T @ acc)
        z = Q @ (Q.T @ (acc * dW[:, k])) / dt
        resid = acc - e
        se[k] = float(np.sqrt(np.mean(resid * resid)) * math.sqrt(p / N)) if p > 1 else float(np.std(acc, ddof=1) / math.sqrt(N)) if N > 1 else 0.0
        # prediction SE per path: sigma_resid * sqrt(leverage)
        se_path[:, k] = np.sqrt(np.mean(resid * resid) * np.sum(Q * Q, axis=1))
        y = e
        if driver is not None:
            y, it, ok = _picard(lambda yy: e + driver(t[k], yy, z) * dt, e)
            iters[k] = it
            unconverged += int(np.sum(~ok))
            acc = acc + driver(t[k], y, z) * dt
        Y[:, k] = y
        Z[:, k] = z
    diag = {
        "basis_degree": degree,
        "basis": basis,
        "condition_max": float(conds.max()),
        "se_Y": se,
        "se_path": se_path,
        "picard_iterations": iters,
        "picard_unconverged": unconverged,
        "contraction_factor": q_max,
    }
    return Y, Z, diag


def _picard(step, y0, tol: float | None = None, max_iter: int = PICARD_MAX_ITER):
    """Iterate y <- step(y); returns (y, iterations, per-entry converged)."""
    tol = PICARD_TOL if tol is None else tol
    y = y0
    ok = np.zeros(np.shape(y0), dtype=bool)
    for it in range(1, max_iter + 1):
        y_new = step(y)
        ok = np.abs(y_new - y) <= tol * np.maximum(1.0, np.abs(y_new))
        y = y_new
        if np.all(ok):
            return y, it, ok
    return y, max_iter, ok


def solve_zero_generator(
    xi: TerminalCondition,
    ensemble: PathEnsemble,
    method: str = "quadrature",
    order: int = 96,
    basis_degree: int = 4,
    forward: ForwardPaths | None = None,
    basis: str = "poly",
) -> BsdeSolution:
    """Y_t = E[xi | F_t] and its martingale integrand Z."""
    _need_brownian(xi, method)
    xi_vals = xi.sample(ensemble, forward)
    if method == "quadrature":
        Y, Z, diag = _zero_quadrature(xi, ensemble, order)
    else:
        Y, Z, diag = _regression_sweep(xi_vals, None, ensemble, _state(xi, ensemble, forward), basis_degree, basis)
    return BsdeSolution(ensemble.grid, Y, Z, method, ensemble, xi_vals, _base_diagnostics(ensemble, method, **diag))


# ------------------------------------------------------ implicit grid engine
def _grid_engine(xi: TerminalCondition, driver: Driver, ensemble: PathEnsemble, order: int, step_order: int):
    grid = ensemble.grid
    n, dt, T = grid.n_steps, grid.dt, grid.T
    t = grid.nodes
    W = ensemble.W
    L = float(np.max(np.abs(W))) + 6.0 * math.sqrt(T) + 1.0
    h = min(0.02, math.sqrt(dt) / 4.0)
    half = min(int(math.ceil(L / h)), 20000)
    w = np.linspace(-half * h, half * h, 2 * half + 1)
    sqdt = math.sqrt(dt)
    N = ensemble.n_paths
    Y = np.empty((N, n + 1))
    Z = np.empty((N, n))
    iters = np.zeros(n, dtype=int)
    unconverged = 0
    q_max = 0.0
    if driver.lipschitz_y is not None:
        q_max = dt * driver.lipschitz_y
        if q_max >= 1.0:
            raise NonContractiveStepError(q_max, int(math.ceil(2.0 * T * driver.lipschitz_y)))
    y_next = None
    for k in range(n - 1, -1, -1):
        if k == n - 1:
            e, s = gh_expectation_pair(xi, dt, w, order=order, kinks=xi.kinks)
        else:
            spline = CubicSpline(w, y_next)
            e, s = gh_expectation_pair(spline, dt, w, order=step_order)
        z = s / sqdt
        y, it, ok = _picard(lambda yy: e + driver(t[k], yy, z) * dt, e)
        iters[k] = it
        Y[:, k] = CubicSpline(w, y)(W[:, k])
        Z[:, k] = CubicSpline(w, z)(W[:, k])
        unconverged += int(np.sum(~ok[np.abs(w) <= np.max(np.abs(W[:, k])) + h]))
        y_next = y
    diag = {
        "quadrature_order": order,
        "step_order": step_order,
        "grid_nodes": int(w.size),
        "grid_halfwidth": float(w[-1]),
        "picard_iterations": iters,
        "picard_unconverged": unconverged,
        "contraction_factor": q_max,
    }
    return Y, Z, diag


def solve_linear_growth(
    G: Driver,
    xi_bar: TerminalCondition,
    ensemble: PathEnsemble,
    method: str = "quadrature",
    order: int = 96,
    step_order: int = 32,
    basis_degree: int = 4,
    forward: ForwardPaths | None = None,
    basis: str = "poly",
) -> BsdeSolution:
    """Implicit backward Euler for -dY = G(t, Y, Z) dt - Z dW."""
    _need_brownian(xi_bar, method)
    if G.is_zero:
        return solve_zero_generator(xi_bar, ensemble, method, order, basis_degree, forward, basis=basis)
    xi_vals = xi_bar.sample(ensemble, forward)
    if method == "quadrature":
        Y, Z, diag = _grid_engine(xi_bar, G, ensemble, order, step_order)
    else:
        Y, Z, diag = _regression_sweep(xi_vals, G, ensemble, _state(xi_bar, ensemble, forward), basis_degree, basis)
    return BsdeSolution(ensemble.grid, Y, Z, method, ensemble, xi_vals, _base_diagnostics(ensemble, method, driver=G.name, **diag))


# ------------------------------------------------------------ transformed
def _back_transform(bar: BsdeSolution, tp: TransformPair, xi: TerminalCondition, forward, driver: Driver) -> BsdeSolution:
    xi_vals = xi.sample(bar.ensemble, forward)
    Y = tp.u_inv(bar.Y)
    Y[:, -1] = xi_vals
    Z = bar.Z / tp.du(Y[:, :-1])
    diag = dict(bar.diagnostics)
    diag.pop("driver", None)
    diag["transform_m"], diag["transform_M"] = tp.isometry_bounds()
    if "se_Y" in diag:
        # delta method: se(Y) = se(Ybar) / u'(Y)
        diag["se_Y"] = np.asarray(diag["se_Y"]) / np.maximum(tp.du(np.mean(Y, axis=0)), 1e-300)
    if "se_path" in diag:
        diag["se_path"] = np.asarray(diag["se_path"]) / np.maximum(tp.du(Y), 1e-300)
    sol = BsdeSolution(bar.grid, Y, Z, bar.method, bar.ensemble, xi_vals, diag, transformed=bar)
    r = sol.residual(driver)
    sol.diagnostics["driver"] = driver.name
    sol.diagnostics["residual_step_mean"] = float(np.mean(np.abs(r)))
    sol.diagnostics["residual_path_mean"] = float(np.mean(np.abs(r.sum(axis=1))))
    return sol


def solve_qbsde_pure(
    f: GeneratorSpec,
    xi: TerminalCondition,
    ensemble: PathEnsemble,
    method: str = "quadrature",
    order: int = 96,
    basis_degree: int = 4,
    forward: ForwardPaths | None = None,
    basis: str = "poly",
) -> BsdeSolution:
    """-dY = f(Y)|Z|^2 dt - Z dW through Ybar = u(Y), Zbar = u'(Y) Z."""
    tp = build_u(f)
    bar = solve_zero_generator(xi.composed(tp), ensemble, method, order, basis_degree, forward, basis=basis)
    return _back_transform(bar, tp, xi, forward, Driver.quadratic(f))


def transformed_driver(params: DominatingParams, tp: TransformPair, sign: float = 1.0) -> Driver:
    """sign [(a + b|u^{-1}(y)|) u'(u^{-1}(y)) + c|z|].

    Lipschitz in y: b + 2 sup|f| (a + b * support of f) when f is bounded
    with bounded support.
    """
    a, b, c = params.a, params.b, params.c
    if a == b == c == 0.0:
        return Driver.zero()
    f = params.f
    sup_f = f.sup_abs
    supp = f.support_bound
    if b == 0.0:
        lip = 2.0 * sup_f * a
    else:
        lip = b + 2.0 * sup_f * (a + b * supp)
    lip = lip if math.isfinite(lip) else None

    def func(t, y, z):
        x = tp.u_inv(y)
        return sign * ((a + b * np.abs(x)) * tp.du(x) + c * np.abs(z))

    return Driver(func, lip, f"Gbar[{sign:+g}]")


def solve_qbsde_abc(
    params: DominatingParams,
    xi: TerminalCondition,
    ensemble: PathEnsemble,
    method: str = "quadrature",
    sign: float = 1.0,
    order: int = 96,
    step_order: int = 32,
    basis_degree: int = 4,
    forward: ForwardPaths | None = None,
    basis: str = "poly",
) -> BsdeSolution:
    """-dY = [sign (a + b|Y| + c|Z|) + f(Y)|Z|^2] dt - Z dW."""
    tp = build_u(params.f)
    G = transformed_driver(params, tp, sign)
    bar = solve_linear_growth(G, xi.composed(tp), ensemble, method, order, step_order, basis_degree, forward, basis=basis)
    return _back_transform(bar, tp, xi, forward, Driver.abc(params, sign))


# -------------------------------------------------------------- dominated
def solve_dominated(
    H: Driver,
    params: DominatingParams,
    xi: TerminalCondition,
    ensemble: PathEnsemble,
    method: str = "quadrature",
    R_quantile: float = 0.999,
    enforce_sandwich: bool = True,
    tol: float | None = None,
    order: int = 96,
    step_order: int = 32,
    basis_degree: int = 4,
    forward: ForwardPaths | None = None,
    basis: str = "poly",
) -> tuple[BsdeSolution, ExtremalPair]:
    """A solution of -dY = H(t, Y, Z) dt - Z dW for H dominated by
    g(y, z) = a + b|y| + c|z| + f(|y|)|z|^2.

    The extremal pair solves eq(xi^+, g) and eq(-xi^-, -g).  The equation
    for H(t, rho(y), z), rho the clamp to [-R, R], is solved in the
    coordinates of the upper transform u (built from f(|y|)):
    Hbar = u'(y) [H(t, rho(y), z) - f(|y|) z^2] with y = u^{-1}(ybar),
    z = zbar / u'(y).  The sandwich lower <= Y <= upper is asserted.
    """
    f_sym = params.f.symmetrized()
    upper_params = DominatingParams(params.a, params.b, params.c, f_sym)
    lower_params = DominatingParams(params.a, params.b, params.c, f_sym.negated())
    kw = dict(order=order, step_order=step_order, basis_degree=basis_degree, forward=forward, basis=basis)
    upper = solve_qbsde_abc(upper_params, xi.positive_part(), ensemble, method, +1.0, **kw)
    lower = solve_qbsde_abc(lower_params, xi.neg_negative_part(), ensemble, method, -1.0, **kw)
    S = np.abs(lower.Y) + np.abs(upper.Y)
    R = float(np.quantile(S, R_quantile))
    tp = build_u(f_sym)

    def hbar(t, yb, zb):
        y = tp.u_inv(yb)
        du = tp.du(y)
        z = zb / du
        return du * (H(t, np.clip(y, -R, R), z) - f_sym(y) * z * z)

    G = Driver(hbar, None, f"Hbar[{H.name}]")
    bar = solve_linear_growth(G, xi.composed(tp), ensemble, method, order, step_order, basis_degree, forward, basis=basis)
    sol = _back_transform(bar, tp, xi, forward, H)
    sol.diagnostics["R"] = R
    sol.diagnostics["R_quantile"] = R_quantile
    pair = ExtremalPair(lower, upper, S, R)
    if tol is None:
        tol = 1e-6 if method == "quadrature" else None
    low_gap, up_gap = sandwich_gaps(pair, sol, tol)
    sol.diagnostics["sandwich_violation"] = float(max(low_gap.max(), up_gap.max()))
    if enforce_sandwich and sol.diagnostics["sandwich_violation"] > 0.0:
        raise SolverInconsistencyError(
            f"sandwich violated by {sol.diagnostics['sandwich_violation']:.3e} beyond tolerance"
        )
    return sol, pair


def sandwich_tolerance(pair: ExtremalPair, sol: BsdeSolution, tol: float | None):
    """Per-node tolerance: ``tol`` if given, else 3 combined regression SEs."""
    if tol is not None:
        return np.full(sol.grid.n_steps + 1, float(tol))
    se = np.sqrt(sol.se_Y**2 + np.maximum(pair.lower.se_Y, pair.upper.se_Y) ** 2)
    return 3.0 * se


def sandwich_gaps(pair: ExtremalPair, sol: BsdeSolution, tol: float | None):
    """Amounts by which Y leaves [lower - tol, upper + tol] (>= 0)."""
    tl = sandwich_tolerance(pair, sol, tol)[None, :]
    low = np.maximum(pair.lower.Y - tl - sol.Y, 0.0)
    up = np.maximum(sol.Y - pair.upper.Y - tl, 0.0)
    return low, up
