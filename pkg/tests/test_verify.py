import json
import math

import numpy as np
import pytest

from qbsde import bsde, verify
from qbsde.bsde import BsdeSolution, Driver, terminal
from qbsde.errors import UsageError
from qbsde.generator import DominatingParams, GeneratorSpec, Piece, builtin
from qbsde.stochastic import TimeGrid, sample_brownian
from qbsde.transform import build_u
from qbsde.verify import CheckReport, TestFunction

SIN_DOM = GeneratorSpec.from_pieces([Piece(0.0, math.pi, "sin", (1.0, 1.0, 0.0))], name="sin+")
INV_QUAD = lambda x: 1.0 / (1.0 + np.asarray(x) ** 2)


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(TimeGrid(1.0, 50), 2000, 41)


@pytest.fixture(scope="module")
def step_sol(ens):
    return bsde.solve_qbsde_pure(builtin("step"), terminal("identity"), ens)


def _with_z(sol, Z):
    return BsdeSolution(sol.grid, sol.Y.copy(), Z, sol.method, sol.ensemble, sol.xi, dict(sol.diagnostics))


# -------------------------------------------------------------- reports
def test_report_json_is_deterministic():
    r = CheckReport("x", 1.0, 2.0, 0.1, 0.3, "pass", {"b": np.float64(1.5), "a": np.arange(2)})
    text = r.to_json()
    assert text == r.to_json()
    obj = json.loads(text)
    assert list(obj) == sorted(obj)
    assert obj["metadata"]["a"] == [0, 1]
    assert r.passed
    assert "x" in verify.format_table([r])


# ---------------------------------------------------------- Ito-Krylov
def test_ito_krylov_identity_exact(ens):
    sol = bsde.solve_zero_generator(terminal("identity"), ens)
    assert verify.check_ito_krylov(sol, TestFunction.identity()).passed


def test_ito_krylov_decay_and_negative_control(step_solutions):
    coarse, fine = step_solutions
    for phi in (TestFunction.square(), TestFunction.from_transform(build_u(builtin("step")))):
        assert verify.check_ito_krylov(coarse, phi, fine).passed
    # Z inflated by 20%: the residual no longer vanishes with the step size
    bad_c, bad_f = _with_z(coarse, 1.2 * coarse.Z), _with_z(fine, 1.2 * fine.Z)
    assert not verify.check_ito_krylov(bad_c, TestFunction.square(), bad_f).passed


def test_residual_decay_negative_control(step_solutions):
    coarse, fine = step_solutions
    assert verify.check_residual_decay(coarse, fine).passed
    # residual measured against the zero driver: the quadratic term is missing
    wrong = Driver.zero()
    for sol in (coarse, fine):
        sol.diagnostics["wrong_driver"] = float(np.mean(np.abs(sol.residual(wrong).sum(axis=1))))
    assert not verify.check_residual_decay(coarse, fine, key="wrong_driver").passed


# -------------------------------------------------------------- Krylov
def test_krylov_constant(step):
    assert verify.krylov_constant(step, 1.0) == pytest.approx(4 * math.e**2)
    assert verify.krylov_constant(step, 0.5) == pytest.approx(2 * math.e)


def test_krylov_zero_generator_indicator(ens):
    sol = bsde.solve_zero_generator(terminal("identity"), ens)
    R = 2.0
    psi = lambda x: (np.abs(np.asarray(x)) <= R).astype(float)
    rep = verify.check_krylov_bound(sol, psi, R, builtin("zero"), psi_l1=2 * R)
    assert rep.target_or_bound == pytest.approx(32.0)
    assert rep.statistic <= 1.0 + 1e-12
    assert rep.passed


def test_krylov_zero_psi_trivial(step_sol, step):
    rep = verify.check_krylov_bound(step_sol, lambda x: np.zeros_like(x), 1.0, step, psi_l1=0.0)
    assert rep.statistic == 0.0 and rep.passed


def test_krylov_step_and_negative_control(step_sol, step):
    rep = verify.check_krylov_bound(step_sol, INV_QUAD, 1.0, step)
    assert rep.passed
    assert rep.statistic > 0.3
    assert rep.metadata["psi_l1"] == pytest.approx(math.pi / 2)
    assert rep.target_or_bound == pytest.approx(4 * math.e**2 * math.pi / 2)
    assert 0.0 <= rep.metadata["exit_fraction_between_nodes"] <= 1.0
    assert not verify.check_krylov_bound(step_sol, INV_QUAD, 1.0, step, bound_scale=0.01).passed


def test_krylov_global_flagged(step_sol, step):
    rep = verify.check_krylov_global(step_sol, INV_QUAD, step)
    assert rep.metadata["global_substitution"] is True
    assert rep.metadata["R"] >= np.max(np.abs(step_sol.Y))
    assert rep.passed


# ---------------------------------------------------------- occupation
def test_occupation_brownian_fixture():
    e = sample_brownian(TimeGrid(1.0, 2**12), 400, 3)
    sol = bsde.solve_zero_generator(terminal("identity"), e)
    assert verify.check_occupation(sol, INV_QUAD).passed


def test_occupation_trivial_and_constant(step_sol):
    rep0 = verify.check_occupation(step_sol, lambda x: np.zeros_like(x))
    assert rep0.statistic == 0.0 and rep0.passed
    rep = verify.check_occupation(step_sol, lambda x: np.full_like(x, 2.5))
    qv = np.mean(np.sum(step_sol.Z**2, axis=1) * step_sol.grid.dt)
    assert rep.metadata["lhs"] == pytest.approx(2.5 * qv, rel=1e-12)
    assert rep.passed


def test_occupation_negative_control(step_sol):
    # a bandwidth of 5 smears the occupation density far beyond psi's scale
    assert not verify.check_occupation(step_sol, INV_QUAD, bandwidth=5.0).passed


# ---------------------------------------------------------- comparison
def test_comparison_strict_and_negative_control(ens, step):
    low = bsde.solve_qbsde_pure(builtin("zero"), terminal("shift", s=-1.0), ens)
    high = bsde.solve_qbsde_pure(step, terminal("identity"), ens)
    assert verify.check_comparison(low, high).passed
    assert not verify.check_comparison(high, low).passed


def test_comparison_statistical_negative_control():
    e = sample_brownian(TimeGrid(1.0, 10), 5000, 2)
    a = bsde.solve_zero_generator(terminal("shift", s=0.3), e, "regression")
    b = bsde.solve_zero_generator(terminal("identity"), e, "regression")
    assert not verify.check_comparison(a, b, "statistical").passed
    assert verify.check_comparison(b, a, "statistical").passed


def test_comparison_needs_same_ensemble(ens, step_sol):
    other = bsde.solve_qbsde_pure(builtin("step"), terminal("identity"), sample_brownian(ens.grid, ens.n_paths, 1))
    with pytest.raises(UsageError):
        verify.check_comparison(step_sol, other)
    with pytest.raises(ValueError):
        verify.check_comparison(step_sol, step_sol, "loose")


# ------------------------------------------------------ a.e. uniqueness
def test_ae_uniqueness_and_negative_control(ens, step_sol, step):
    altered = GeneratorSpec(step.pieces, ((0.5, 7.0), (0.0, -3.0), (1.0, 40.0)), step.eta_bound, step.name)
    twin = bsde.solve_qbsde_pure(altered, terminal("identity"), ens)
    assert verify.check_ae_uniqueness(step_sol, twin).passed
    nearby = bsde.solve_qbsde_pure(builtin("step", alpha=1.001), terminal("identity"), ens)
    assert not verify.check_ae_uniqueness(step_sol, nearby).passed


# ------------------------------------------------------------- sandwich
def test_sandwich_and_negative_control(ens):
    e = ens.head(200)
    params = DominatingParams(0.5, 0.5, 0.5, SIN_DOM)
    sol, pair = bsde.solve_dominated(Driver.quadratic(builtin("H1")), params, terminal("abs"), e)
    assert verify.check_sandwich(pair, sol).passed
    inflated = Driver(lambda t, y, z: 3.0 * params(y, z), None, "3g")
    bad, bad_pair = bsde.solve_dominated(inflated, params, terminal("abs"), e, enforce_sandwich=False)
    assert not verify.check_sandwich(bad_pair, bad).passed


def test_sandwich_violation_raises_when_enforced(ens):
    from qbsde.errors import SolverInconsistencyError

    params = DominatingParams(0.5, 0.5, 0.5, SIN_DOM)
    inflated = Driver(lambda t, y, z: 3.0 * params(y, z), None, "3g")
    with pytest.raises(SolverInconsistencyError):
        bsde.solve_dominated(inflated, params, terminal("abs"), ens.head(200))


# ------------------------------------------------ square integrability
def test_square_integrability_and_negative_control(step_sol):
    assert verify.check_square_integrability(step_sol).passed
    e = sample_brownian(TimeGrid(1.0, 4), 4000, 5)
    heavy = bsde.TerminalCondition(lambda x: np.exp(0.7 * x * x), growth_degree=0, name="exp(0.7x^2)")
    sol = bsde.solve_zero_generator(heavy, e, "regression", basis_degree=0)
    assert not verify.check_square_integrability(sol).passed
