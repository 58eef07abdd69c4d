"""Checks of structural properties on simulated solutions.

Every check returns a :class:`CheckReport`.  Statistical checks pass with a
3-standard-error margin, strict ones at 1e-9.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from ._quad import adaptive_gauss_legendre
from .bsde import BsdeSolution, ExtremalPair, sandwich_gaps
from .errors import UsageError
from .generator import GeneratorSpec
from .stochastic import default_bandwidth, mean_local_time_profile
from .transform import TransformPair

STRICT_TOL = 1e-9
DECAY_RATIO = 1.7


@dataclass
class CheckReport:
    name: str
    statistic: float
    target_or_bound: float
    standard_error: float
    tolerance: float
    verdict: str
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True)

    def row(self) -> str:
        return (
            f"{self.name:<28} {self.verdict:<4} stat={self.statistic:<12.6g} "
            f"target={self.target_or_bound:<12.6g} se={self.standard_error:<10.3g} tol={self.tolerance:.3g}"
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def format_table(reports) -> str:
    lines = [f"{'check':<28} {'ok':<4} details", "-" * 78]
    lines += [r.row() for r in reports]
    return "\n".join(lines)


def _meta(sol: BsdeSolution, **extra) -> dict:
    d = {"n_paths": sol.n_paths, "n_steps": sol.grid.n_steps, "seed": sol.ensemble.seed, "method": sol.method}
    d.update(extra)
    return d


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


# ------------------------------------------------------------- Ito-Krylov
@dataclass(frozen=True)
class TestFunction:
    """phi with phi' everywhere and phi'' almost everywhere."""

    value: Callable
    d1: Callable
    d2: Callable
    name: str = ""

    __test__ = False

    @classmethod
    def identity(cls) -> "TestFunction":
        return cls(lambda x: x, np.ones_like, np.zeros_like, "x")

    @classmethod
    def square(cls) -> "TestFunction":
        return cls(lambda x: x * x, lambda x: 2 * x, lambda x: np.full_like(x, 2.0), "x^2")

    @classmethod
    def from_transform(cls, tp: TransformPair) -> "TestFunction":
        return cls(tp.u, tp.du, tp.d2u, f"u[{tp.spec.name}]")


def ito_krylov_residual(sol: BsdeSolution, phi: TestFunction) -> np.ndarray:
    """R_T = phi(Y_T) - phi(Y_0) - sum phi'(Y_k) dY_k - 1/2 sum phi''(Y_k) Z_k^2 dt."""
    Y, Z = sol.Y, sol.Z
    Yk = Y[:, :-1]
    dY = np.diff(Y, axis=1)
    drift = np.sum(phi.d1(Yk) * dY, axis=1)
    corr = 0.5 * np.sum(phi.d2(Yk) * Z * Z, axis=1) * sol.grid.dt
    return phi.value(Y[:, -1]) - phi.value(Y[:, 0]) - drift - corr


def check_ito_krylov(sol: BsdeSolution, phi: TestFunction, fine_sol: BsdeSolution | None = None) -> CheckReport:
    """Without ``fine_sol``: mean|R_T| must vanish (1e-12).  With it: the
    ratio mean|R_T|(sol) / mean|R_T|(fine_sol) must be at least 1.7."""
    r = np.abs(ito_krylov_residual(sol, phi))
    m, se = _mean_se(r)
    if fine_sol is None:
        ok = m <= 1e-12
        return CheckReport(f"ito_krylov[{phi.name}]", m, 0.0, se, 1e-12, _verdict(ok), _meta(sol))
    rf = np.abs(ito_krylov_residual(fine_sol, phi))
    mf, sef = _mean_se(rf)
    ratio = m / mf if mf > 0 else math.inf
    ratio_se = ratio * math.hypot(se / m if m else 0.0, sef / mf if mf else 0.0)
    return CheckReport(
        f"ito_krylov_decay[{phi.name}]",
        ratio,
        DECAY_RATIO,
        ratio_se,
        0.0,
        _verdict(ratio >= DECAY_RATIO),
        _meta(sol, residual_coarse=m, residual_fine=mf, n_steps_fine=fine_sol.grid.n_steps),
    )


def check_residual_decay(sol: BsdeSolution, fine_sol: BsdeSolution, key: str = "residual_path_mean") -> CheckReport:
    """Driver residual mean |sum_k r_k| decays by at least 1.7 under refinement."""
    m, mf = sol.diagnostics[key], fine_sol.diagnostics[key]
    ratio = m / mf if mf > 0 else math.inf
    return CheckReport(
        "driver_residual_decay", ratio, DECAY_RATIO, 0.0, 0.0, _verdict(ratio >= DECAY_RATIO),
        _meta(sol, residual_coarse=m, residual_fine=mf, n_steps_fine=fine_sol.grid.n_steps),
    )


# ----------------------------------------------------------------- Krylov
def krylov_constant(spec: GeneratorSpec, R: float) -> float:
    """4 R exp(2 ||f||_{L1[-R, R]})."""
    return 4.0 * R * math.exp(2.0 * spec.l1_norm(-R, R))


def check_krylov_bound(
    sol: BsdeSolution,
    psi: Callable,
    R: float,
    spec: GeneratorSpec,
    psi_l1: float | None = None,
    bound_scale: float = 1.0,
    global_substitution: bool = False,
) -> CheckReport:
    """E int_0^{T ^ tau_R} psi(Y)|Z|^2 ds <= 4R exp(2||f||_{L1[-R,R]}) ||psi||_{L1[-R,R]}.

    tau_R is the first node with |Y| >= R.  ``bound_scale`` multiplies the
    bound (negative controls).  The fraction of paths with a likely exit
    between nodes (Brownian-bridge estimate) is reported as a diagnostic.
    """
    if psi_l1 is None:
        psi_l1 = adaptive_gauss_legendre(lambda x: np.abs(np.asarray(psi(x), dtype=float)), -R, R, rtol=1e-12)
    Y, Z = sol.Y, sol.Z
    dt = sol.grid.dt
    Yk = Y[:, :-1]
    outside = np.abs(Yk) >= R
    alive = np.cumsum(outside, axis=1) == 0
    integrand = np.where(alive, np.asarray(psi(Yk), dtype=float) * Z * Z, 0.0)
    per_path = integrand.sum(axis=1) * dt
    m, se = _mean_se(per_path)
    bound = bound_scale * krylov_constant(spec, R) * psi_l1
    # Brownian-bridge crossing probability between nodes, on still-alive steps
    Y1 = Y[:, 1:]
    var = np.maximum(Z * Z * dt, 1e-300)
    inside = alive & (np.abs(Y1) < R)
    up = np.exp(-2.0 * np.maximum(R - Yk, 0.0) * np.maximum(R - Y1, 0.0) / var)
    dn = np.exp(-2.0 * np.maximum(R + Yk, 0.0) * np.maximum(R + Y1, 0.0) / var)
    p_cross = np.where(inside, np.minimum(up + dn, 1.0), 0.0)
    p_path = 1.0 - np.prod(1.0 - p_cross, axis=1)
    meta = _meta(
        sol,
        R=R,
        psi_l1=psi_l1,
        f_l1_local=spec.l1_norm(-R, R),
        bound_scale=bound_scale,
        exit_fraction_nodes=float(np.mean(~alive[:, -1] | (np.abs(Y[:, -1]) >= R))),
        exit_fraction_between_nodes=float(np.mean(p_path)),
        global_substitution=global_substitution,
    )
    return CheckReport("krylov_bound", m, bound, se, 3.0 * se, _verdict(m <= bound + 3.0 * se), meta)


def check_krylov_global(sol: BsdeSolution, psi: Callable, spec: GeneratorSpec) -> CheckReport:
    """Global version: the local bound with R = observed sup|Y|, flagged."""
    R = float(np.max(np.abs(sol.Y))) * (1.0 + 1e-12) + 1e-12
    rep = check_krylov_bound(sol, psi, R, spec, global_substitution=True)
    rep.name = "krylov_bound_global"
    return rep


# -------------------------------------------------------------- occupation
def check_occupation(sol: BsdeSolution, psi: Callable, bandwidth: float | None = None, rel_tol: float = 0.10) -> CheckReport:
    """sum_k psi(Y_k)|Z_k|^2 dt against int psi(a) L^a da (kernel local time)."""
    Y, Z = sol.Y, sol.Z
    grid = sol.grid
    eps = default_bandwidth(Y, grid) if bandwidth is None else bandwidth
    lhs_paths = np.sum(np.asarray(psi(Y[:, :-1]), dtype=float) * Z * Z, axis=1) * grid.dt
    lhs, se = _mean_se(lhs_paths)
    lo, hi = float(Y.min()) - eps, float(Y.max()) + eps
    n_a = int(min(max(200, math.ceil((hi - lo) / (eps / 10.0))), 200000))
    a = np.linspace(lo, hi, n_a + 1)
    L = mean_local_time_profile(Y, Z, a, eps, grid)
    rhs = float(trapezoid(np.asarray(psi(a), dtype=float) * L, a))
    denom = max(abs(lhs), abs(rhs))
    rel = abs(lhs - rhs) / denom if denom > 0 else 0.0
    return CheckReport(
        "occupation", rel, 0.0, se / denom if denom > 0 else 0.0, rel_tol, _verdict(rel <= rel_tol),
        _meta(sol, lhs=lhs, rhs=rhs, bandwidth=eps),
    )


# -------------------------------------------------------------- comparison
def check_comparison(sol_f: BsdeSolution, sol_g: BsdeSolution, mode: str = "pathwise_strict") -> CheckReport:
    """Y^f <= Y^g at every (path, node)."""
    if not sol_f.ensemble.same_paths(sol_g.ensemble):
        raise UsageError("comparison needs both solutions on the same ensemble")
    diff = sol_f.Y - sol_g.Y
    worst = float(diff.max())
    if mode == "pathwise_strict":
        return CheckReport("comparison", worst, 0.0, 0.0, STRICT_TOL, _verdict(worst <= STRICT_TOL), _meta(sol_f, mode=mode))
    if mode != "statistical":
        raise ValueError(f"unknown comparison mode {mode!r}")
    se = np.sqrt(sol_f.se_path**2 + sol_g.se_path**2)
    viol = diff > 0.0
    frac = float(np.mean(viol))
    scaled = float(np.max(np.where(viol, diff / np.maximum(se, 1e-300), 0.0)))
    ok = frac <= 1e-3 and scaled <= 3.0
    return CheckReport(
        "comparison", frac, 1e-3, float(np.median(se)), 3.0, _verdict(ok),
        _meta(sol_f, mode=mode, worst_violation=worst, worst_violation_in_se=scaled),
    )


def check_ae_uniqueness(sol_a: BsdeSolution, sol_b: BsdeSolution) -> CheckReport:
    """Solutions for a.e.-equal coefficients are bit-identical."""
    if not sol_a.ensemble.same_paths(sol_b.ensemble):
        raise UsageError("needs both solutions on the same ensemble")
    same = np.array_equal(sol_a.Y, sol_b.Y) and np.array_equal(sol_a.Z, sol_b.Z)
    diff = float(np.max(np.abs(sol_a.Y - sol_b.Y)))
    return CheckReport("ae_uniqueness", diff, 0.0, 0.0, 0.0, _verdict(same), _meta(sol_a))


# ---------------------------------------------------------------- sandwich
def check_sandwich(pair: ExtremalPair, sol: BsdeSolution, tol: float | None = 1e-6) -> CheckReport:
    """Y^{-g} - tol <= Y <= Y^{g} + tol pathwise; ``tol=None`` uses 3 SEs."""
    low, up = sandwich_gaps(pair, sol, tol)
    worst = float(max(low.max(), up.max()))
    return CheckReport(
        "sandwich", worst, 0.0, 0.0, 0.0 if tol is None else tol, _verdict(worst <= 0.0),
        _meta(sol, R=pair.R, lower_Y0=pair.lower.Y0, upper_Y0=pair.upper.Y0),
    )


# --------------------------------------------------- square integrability
def check_square_integrability(sol: BsdeSolution) -> CheckReport:
    """E sup_t Y^2 and E int |Z|^2 are finite and stable under doubling the
    path count (first half against the full ensemble, 3 SE)."""
    sup_y2 = np.max(sol.Y**2, axis=1)
    int_z2 = np.sum(sol.Z**2, axis=1) * sol.grid.dt
    half = sol.n_paths // 2
    worst = 0.0
    ok = True
    stats = {}
    for name, x in (("sup_Y2", sup_y2), ("int_Z2", int_z2)):
        full, se_full = _mean_se(x)
        part, se_part = _mean_se(x[:half])
        z = abs(full - part) / max(se_part, 1e-300)
        ok &= math.isfinite(full) and z <= 3.0
        worst = max(worst, z)
        stats[name] = full
        stats[name + "_se"] = se_full
    return CheckReport("square_integrability", worst, 3.0, 0.0, 3.0, _verdict(ok), _meta(sol, **stats))
