"""Finite differences for v_t + 1/2 sigma^2 v_xx + b v_x + f(v) sigma^2 v_x^2 = 0,
v(T, x) = psi(x), its linearisation w = u(v), and the Monte Carlo
representation v(t, x) = u^{-1}(E[u(psi(X_T^{t,x}))]).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .errors import DomainError, PreconditionError, RefineGridError
from .generator import GeneratorSpec
from .stochastic import Coefficient, TimeGrid, euler_forward, sample_brownian
from .transform import build_u
from .verify import CheckReport


@dataclass(frozen=True)
class PdeProblem:
    b: Coefficient
    sigma: Coefficient
    f: GeneratorSpec
    psi: Callable
    T: float = 1.0
    x_lo: float = -7.0
    x_hi: float = 7.0
    sigma_min: float = 1.0
    psi_kinks: tuple = ()
    boundary: str = "terminal"

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise DomainError("empty spatial domain")
        if self.T <= 0:
            raise DomainError("T must be positive")
        if self.boundary != "terminal":
            raise ValueError("only the 'terminal' Dirichlet rule is implemented")
        xs = np.linspace(self.x_lo, self.x_hi, 257)
        if np.min(np.asarray(self.sigma(xs)) ** 2) < self.sigma_min**2 * (1 - 1e-12):
            raise PreconditionError("sigma^2 falls below the declared sigma_min^2")

    def terminal(self, x):
        return np.asarray(self.psi(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x)


@dataclass(eq=False)
class PdeSolution:
    """v[i, j] is the value at t = t[i], x = x[j]; t ascends, v[-1] is the
    terminal row."""

    x: np.ndarray
    t: np.ndarray
    v: np.ndarray
    scheme: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.v)):
            raise FloatingPointError("non-finite values in the finite-difference solution")

    def row(self, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"t={t} is not a grid time")
        return self.v[i]

    def at(self, t: float, x):
        return CubicSpline(self.x, self.row(t))(np.asarray(x, dtype=float))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "v"])
            for i, ti in enumerate(self.t):
                for j, xj in enumerate(self.x):
                    w.writerow([f"{ti:.17g}", f"{xj:.17g}", f"{self.v[i, j]:.17g}"])

    def to_text(self, t_stride: int = 1, x_stride: int = 1) -> str:
        xs = self.x[::x_stride]
        lines = ["t \\ x".ljust(10) + " ".join(f"{x:>10.4g}" for x in xs)]
        for i in range(0, len(self.t), t_stride):
            lines.append(f"{self.t[i]:<10.4g}" + " ".join(f"{v:>10.4g}" for v in self.v[i, ::x_stride]))
        return "\n".join(lines)


def _operator(problem: PdeProblem, x: np.ndarray):
    """Interior tridiagonal coefficients of A = 1/2 sigma^2 D2 + b D1."""
    h = x[1] - x[0]
    xi = x[1:-1]
    a = 0.5 * np.asarray(problem.sigma(xi)) ** 2
    bb = np.asarray(problem.b(xi))
    lower = a / h**2 - bb / (2 * h)
    diag = -2 * a / h**2
    upper = a / h**2 + bb / (2 * h)
    return lower, diag, upper


def _apply(lower, diag, upper, v):
    """A v on interior nodes, with boundary values taken from v."""
    return lower * v[:-2] + diag * v[1:-1] + upper * v[2:]


def _implicit_solve(lower, diag, upper, rhs, theta_dt, left, right):
    """(I - theta_dt A) w = rhs on interior nodes with Dirichlet ends."""
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -theta_dt * upper[:-1]
    ab[1] = 1.0 - theta_dt * diag
    ab[2, :-1] = -theta_dt * lower[1:]
    r = rhs.copy()
    r[0] += theta_dt * lower[0] * left
    r[-1] += theta_dt * upper[-1] * right
    return solve_banded((1, 1), ab, r)


def _grid(problem: PdeProblem, n_x: int, n_t: int):
    if n_x < 5 or n_t < 2:
        raise DomainError("grid too small")
    x = np.linspace(problem.x_lo, problem.x_hi, n_x)
    t = np.linspace(0.0, problem.T, n_t + 1)
    return x, t


def _stability_warning(problem, x):
    h = x[1] - x[0]
    peclet = problem.b.lipschitz * (max(abs(problem.x_lo), abs(problem.x_hi)) + 1.0) * h / problem.sigma_min**2
    b_max = float(np.max(np.abs(problem.b(x))))
    peclet = max(peclet, b_max * h / problem.sigma_min**2)
    if peclet > 2.0:
        warnings.warn(f"cell Peclet number {peclet:.2f} > 2; refine the space grid", RuntimeWarning, stacklevel=3)
    return peclet


def solve_linear_fd(problem: PdeProblem, n_x: int = 401, n_t: int = 400, terminal: Callable | None = None) -> PdeSolution:
    """Crank-Nicolson for w_t + 1/2 sigma^2 w_xx + b w_x = 0 backward from T,
    started with four implicit half steps; Dirichlet ends held at the
    terminal values."""
    x, t = _grid(problem, n_x, n_t)
    peclet = _stability_warning(problem, x)
    term = problem.terminal if terminal is None else terminal
    lower, diag, upper = _operator(problem, x)
    dt = problem.T / n_t
    v = np.empty((n_t + 1, n_x))
    w = np.asarray(term(x), dtype=float)
    v[-1] = w
    left, right = w[0], w[-1]
    n_smooth = min(2, n_t)
    for m in range(n_t):
        if m < n_smooth:
            for _ in range(2):
                w_int = _implicit_solve(lower, diag, upper, w[1:-1], 0.5 * dt, left, right)
                w = np.concatenate([[left], w_int, [right]])
        else:
            rhs = w[1:-1] + 0.5 * dt * _apply(lower, diag, upper, w)
            w_int = _implicit_solve(lower, diag, upper, rhs, 0.5 * dt, left, right)
            w = np.concatenate([[left], w_int, [right]])
        v[n_t - 1 - m] = w
    return PdeSolution(x, t, v, "crank-nicolson", {"n_x": n_x, "n_t": n_t, "peclet": peclet})


def _gradient_term(problem, x, w, f_vals):
    h = x[1] - x[0]
    vx = (w[2:] - w[:-2]) / (2 * h)
    s2 = np.asarray(problem.sigma(x[1:-1])) ** 2
    return f_vals * s2 * vx * vx, vx


def solve_quadratic_fd(problem: PdeProblem, n_x: int = 401, n_t: int = 400) -> PdeSolution:
    """Implicit diffusion/advection (Crank-Nicolson after implicit start-up
    steps), explicit gradient term f(v) sigma^2 v_x^2 (Adams-Bashforth 2
    after an Euler first step)."""
    x, t = _grid(problem, n_x, n_t)
    peclet = _stability_warning(problem, x)
    lower, diag, upper = _operator(problem, x)
    h = x[1] - x[0]
    dt = problem.T / n_t
    v = np.empty((n_t + 1, n_x))
    w = problem.terminal(x)
    v[-1] = w
    left, right = w[0], w[-1]
    prev_N = None
    courant_max = 0.0
    for m in range(n_t):
        fv = problem.f(w[1:-1])
        N, vx = _gradient_term(problem, x, w, fv)
        speed = np.max(np.abs(2.0 * fv * np.asarray(problem.sigma(x[1:-1])) ** 2 * vx))
        courant = dt * speed / h
        courant_max = max(courant_max, courant)
        if courant > 1.0:
            raise RefineGridError(
                f"explicit gradient term unstable (Courant number {courant:.2f})",
                int(math.ceil(problem.T * speed / h * 1.25)),
            )
        src = N if prev_N is None else 1.5 * N - 0.5 * prev_N
        prev_N = N
        if m < 2:
            w_int = _implicit_solve(lower, diag, upper, w[1:-1] + dt * src, dt, left, right)
        else:
            rhs = w[1:-1] + 0.5 * dt * _apply(lower, diag, upper, w) + dt * src
            w_int = _implicit_solve(lower, diag, upper, rhs, 0.5 * dt, left, right)
        w = np.concatenate([[left], w_int, [right]])
        v[n_t - 1 - m] = w
    return PdeSolution(x, t, v, "imex", {"n_x": n_x, "n_t": n_t, "peclet": peclet, "courant_max": courant_max})


def _probe_mask(problem: PdeProblem, x: np.ndarray, margin: float | None) -> np.ndarray:
    if margin is None:
        margin = 6.0 * problem.sigma_min * math.sqrt(problem.T)
    return (x >= problem.x_lo + margin) & (x <= problem.x_hi - margin)


def cole_hopf_check(problem: PdeProblem, n_x: int = 401, n_t: int = 400, margin: float | None = None) -> CheckReport:
    """max |u(v_FD) - w_FD| over interior probe nodes at t = 0 and T/2,
    against 5x the linear solver's self-estimate |w(n) - w(n/2)|."""
    tp = build_u(problem.f)
    term_w = lambda x: tp.u(problem.terminal(x))  # noqa: E731
    v = solve_quadratic_fd(problem, n_x, n_t)
    w = solve_linear_fd(problem, n_x, n_t, terminal=term_w)
    n_xc = (n_x - 1) // 2 + 1
    wc = solve_linear_fd(problem, n_xc, n_t // 2, terminal=term_w)
    mask_f = _probe_mask(problem, v.x, margin)
    mask_c = _probe_mask(problem, wc.x, margin)
    stat = 0.0
    est = 0.0
    for tt in (0.0, 0.5 * problem.T):
        stat = max(stat, float(np.max(np.abs(tp.u(v.row(tt)) - w.row(tt))[mask_f])))
        est = max(est, float(np.max(np.abs(w.row(tt)[::2] - wc.row(tt))[mask_c])))
    bound = 5.0 * est
    verdict = "pass" if stat <= bound else "fail"
    return CheckReport(
        "cole_hopf", stat, bound, 0.0, 5.0, verdict,
        {"n_x": n_x, "n_t": n_t, "linear_error_estimate": est, "f": problem.f.name},
    )


def mc_representation(
    problem: PdeProblem,
    t: float,
    x: float,
    n_paths: int = 100000,
    n_steps: int = 100,
    seed: int = 0,
    antithetic: bool = True,
) -> tuple[float, float]:
    """u^{-1}(mean u(psi(X_T^{t,x}))) with its delta-method standard error."""
    if not 0.0 <= t < problem.T:
        raise DomainError("need 0 <= t < T")
    tp = build_u(problem.f)
    ens = sample_brownian(TimeGrid(problem.T - t, n_steps), n_paths, seed, antithetic)
    X = euler_forward(problem.b, problem.sigma, t, x, ens)
    vals = tp.u(problem.terminal(X.X_T))
    if antithetic and n_paths >= 2:
        n2 = n_paths // 2 * 2
        pairs = 0.5 * (vals[:n2:2] + vals[1:n2:2])
        mean = float(np.mean(pairs))
        se_bar = float(np.std(pairs, ddof=1) / math.sqrt(pairs.size)) if pairs.size > 1 else 0.0
    else:
        mean = float(np.mean(vals))
        se_bar = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    value = float(tp.u_inv(np.array(mean)))
    return value, se_bar / float(tp.du(np.array(value)))


def mc_fd_check(
    problem: PdeProblem,
    probes: Sequence[tuple[float, float]],
    n_x: int = 401,
    n_t: int = 400,
    n_paths: int = 100000,
    n_steps: int = 100,
    seed: int = 0,
) -> CheckReport:
    """|v_MC - v_FD| <= 3 se_MC + |v_FD(n) - v_FD(n/2)| at every probe."""
    fine = solve_quadratic_fd(problem, n_x, n_t)
    coarse = solve_quadratic_fd(problem, (n_x - 1) // 2 + 1, n_t // 2)
    worst = -math.inf
    rows = []
    for i, (t, x) in enumerate(probes):
        v_fd = float(fine.at(t, x))
        grid_err = abs(v_fd - float(coarse.at(t, x)))
        v_mc, se = mc_representation(problem, t, x, n_paths, n_steps, seed + i)
        excess = abs(v_mc - v_fd) - (3.0 * se + grid_err)
        worst = max(worst, excess)
        rows.append({"t": t, "x": x, "fd": v_fd, "mc": v_mc, "se": se, "grid_error": grid_err})
    return CheckReport(
        "mc_fd_agreement", worst, 0.0, 0.0, 0.0, "pass" if worst <= 0.0 else "fail",
        {"probes": rows, "n_paths": n_paths, "n_steps": n_steps, "seed": seed},
    )


def step_fixture(f: GeneratorSpec | None = None) -> PdeProblem:
    """f = 1_[0,1], psi = max(x, 0), b = 0, sigma = 1, T = 1 on [-7, 7]."""
    from .generator import builtin

    return PdeProblem(
        b=Coefficient.constant(0.0),
        sigma=Coefficient.constant(1.0),
        f=builtin("step") if f is None else f,
        psi=lambda x: np.maximum(x, 0.0),
        T=1.0,
        x_lo=-7.0,
        x_hi=7.0,
        sigma_min=1.0,
        psi_kinks=(0.0,),
    )
