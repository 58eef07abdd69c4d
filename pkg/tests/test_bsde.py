import csv
import math

import numpy as np
import pytest

from qbsde import bsde
from qbsde.bsde import Driver, TerminalCondition, terminal
from qbsde.errors import IllConditionedBasisError, NonContractiveStepError, PreconditionError
from qbsde.generator import DominatingParams, GeneratorSpec, Piece, builtin
from qbsde.stochastic import Coefficient, TimeGrid, euler_forward, sample_brownian
from qbsde.transform import build_u
from qbsde.verify import check_comparison

import oracles

SIN_DOM = GeneratorSpec.from_pieces([Piece(0.0, math.pi, "sin", (1.0, 1.0, 0.0))], name="sin+")


@pytest.fixture(scope="module")
def ens():
    return sample_brownian(TimeGrid(1.0, 25), 2000, 17)


# --------------------------------------------------------- driver-free
def test_identity_terminal_quadrature(ens):
    sol = bsde.solve_zero_generator(terminal("identity"), ens)
    assert np.max(np.abs(sol.Y - ens.W)) <= 1e-12
    assert np.max(np.abs(sol.Z - 1.0)) <= 1e-12


def test_half_moment_quadrature(ens):
    sol = bsde.solve_zero_generator(terminal("positive_part"), ens, order=96)
    assert abs(sol.Y0 - oracles.HALF_MOMENT) <= 1e-6


def test_half_moment_regression_agrees_with_quadrature():
    e = sample_brownian(TimeGrid(1.0, 10), 20000, 5)
    q = bsde.solve_zero_generator(terminal("positive_part"), e)
    r = bsde.solve_zero_generator(terminal("positive_part"), e, "regression")
    assert abs(r.Y0 - q.Y0) <= 3 * r.Y0_se
    assert abs(r.Y0 - oracles.HALF_MOMENT) <= 3 * r.Y0_se


def test_forward_terminal_by_regression():
    e = sample_brownian(TimeGrid(1.0, 20), 20000, 6)
    fwd = euler_forward(Coefficient.linear(0.1), Coefficient.linear(0.2), 0.0, 1.0, e)
    xi = terminal("identity", kind="of_forward")
    sol = bsde.solve_zero_generator(xi, e, "regression", forward=fwd)
    exact = (1 + 0.1 / 20) ** 20
    assert abs(sol.Y0 - exact) <= 3 * sol.Y0_se + 1e-12
    with pytest.raises(PreconditionError):
        bsde.solve_zero_generator(xi, e, "quadrature", forward=fwd)
    with pytest.raises(PreconditionError):
        bsde.solve_zero_generator(xi, e, "regression")


def test_terminal_consistency_every_solver(ens, step):
    xi = terminal("identity")
    sols = [
        bsde.solve_zero_generator(xi, ens),
        bsde.solve_zero_generator(xi, ens, "regression"),
        bsde.solve_qbsde_pure(step, xi, ens),
        bsde.solve_qbsde_pure(step, xi, ens, "regression"),
        bsde.solve_qbsde_abc(DominatingParams(1, 1, 0, step), xi, ens),
        bsde.solve_dominated(Driver.zero(), DominatingParams(0.5, 0.5, 0.5, SIN_DOM), xi, ens.head(200))[0],
    ]
    for sol in sols:
        assert np.array_equal(sol.Y[:, -1], xi.sample(sol.ensemble))


def test_solution_arrays_read_only(ens):
    sol = bsde.solve_zero_generator(terminal("identity"), ens)
    with pytest.raises(ValueError):
        sol.Y[0, 0] = 1.0


def test_ill_conditioned_basis(ens):
    with pytest.raises(IllConditionedBasisError) as err:
        bsde.solve_zero_generator(terminal("identity"), ens, "regression", basis_degree=30)
    assert err.value.condition > 1e10


def test_spline_basis_option(ens):
    sol = bsde.solve_zero_generator(terminal("positive_part"), ens, "regression", basis="spline")
    assert sol.diagnostics["basis"] == "spline"
    with pytest.raises(ValueError):
        bsde.solve_zero_generator(terminal("identity"), ens, "regression", basis="wavelet")


# ---------------------------------------------------------- transformed
def test_pure_step_oracle(ens, step):
    sol = bsde.solve_qbsde_pure(step, terminal("identity"), ens)
    assert abs(sol.Y0 - oracles.STEP_Y0) <= 1e-6


def test_pure_step_regression():
    e = sample_brownian(TimeGrid(1.0, 10), 20000, 23)
    sol = bsde.solve_qbsde_pure(builtin("step"), terminal("identity"), e, "regression")
    assert abs(sol.Y0 - oracles.STEP_Y0) <= 3 * sol.Y0_se


def test_transform_round_trip_bit_exact(ens, step):
    xi = terminal("identity")
    sol = bsde.solve_qbsde_pure(step, xi, ens)
    bar = bsde.solve_zero_generator(xi.composed(build_u(step)), ens)
    assert np.array_equal(sol.transformed.Y, bar.Y)
    assert np.array_equal(sol.transformed.Z, bar.Z)


def test_h3_pure_solution_finite(ens):
    sol = bsde.solve_qbsde_pure(builtin("H3"), terminal("identity"), ens)
    assert np.all(np.isfinite(sol.Y)) and np.all(np.isfinite(sol.Z))
    assert sol.diagnostics["transform_m"] == pytest.approx(math.exp(-2 * oracles.H3_L1))


def test_residual_is_small_and_shrinks(step):
    fine = sample_brownian(TimeGrid(1.0, 200), 2000, 3)
    xi = terminal("identity")
    c = bsde.solve_qbsde_pure(step, xi, fine.coarsen(4))
    f = bsde.solve_qbsde_pure(step, xi, fine)
    assert c.diagnostics["residual_path_mean"] / f.diagnostics["residual_path_mean"] >= 1.7
    r = f.residual(Driver.quadratic(step))
    assert r.shape == f.Z.shape


# ------------------------------------------------------- linear growth
def test_constant_driver_exact(ens):
    sol = bsde.solve_linear_growth(Driver.constant(0.7), terminal("identity"), ens)
    assert abs(sol.Y0 - 0.7) <= 1e-12


def test_linear_driver_first_order():
    b = 0.5
    errs = []
    fine = sample_brownian(TimeGrid(1.0, 80), 200, 4)
    for n in (20, 40, 80):
        e = fine.coarsen(80 // n)
        sol = bsde.solve_linear_growth(Driver.linear(b), terminal("identity"), e)
        exact = e.W * np.exp(b * (1.0 - e.grid.nodes))
        assert abs(sol.Y0) <= 1e-12
        errs.append(np.max(np.abs(sol.Y - exact)))
    assert errs[0] <= 2.0 * (1.0 / 20)
    assert errs[0] / errs[1] >= 1.7 and errs[1] / errs[2] >= 1.7


def test_non_contractive_step_reports_required_steps(ens):
    with pytest.raises(NonContractiveStepError) as err:
        bsde.solve_linear_growth(Driver.linear(100.0), terminal("identity"), ens)
    assert err.value.required_steps >= 200


def test_abc_self_convergence(step):
    """Y0(n) against Y0(4n) within 2x the Richardson error estimate of Y0(n)."""
    params = DominatingParams(1.0, 1.0, 0.0, step)
    fine = sample_brownian(TimeGrid(1.0, 100), 200, 9)
    y = {}
    for n in (25, 50, 100):
        y[n] = bsde.solve_qbsde_abc(params, terminal("identity"), fine.coarsen(100 // n)).Y0
    est = 2.0 * abs(y[25] - y[50])
    assert abs(y[25] - y[100]) <= 2.0 * est
    assert y[25] > y[50] > y[100] > 0


def test_abc_with_zero_params_is_pure(ens, step):
    a = bsde.solve_qbsde_abc(DominatingParams(0, 0, 0, step), terminal("identity"), ens)
    b = bsde.solve_qbsde_pure(step, terminal("identity"), ens)
    assert np.array_equal(a.Y, b.Y)


def test_transformed_driver_lipschitz_constant(step):
    tp = build_u(step)
    G = bsde.transformed_driver(DominatingParams(1.0, 2.0, 0.0, step), tp)
    assert G.lipschitz_y == pytest.approx(2.0 + 2.0 * 1.0 * (1.0 + 2.0 * 1.0))


# ---------------------------------------------------------- comparison
def test_comparison_quadrature_ordered_fixture(ens, step):
    a = bsde.solve_qbsde_pure(builtin("zero"), terminal("shift", s=-1.0), ens)
    b = bsde.solve_qbsde_pure(step, terminal("identity"), ens)
    assert np.max(a.Y - b.Y) <= 1e-9


def test_comparison_regression_separated_fixture(step):
    e = sample_brownian(TimeGrid(1.0, 20), 20000, 20240611)
    kw = dict(method="regression", basis="spline")
    a = bsde.solve_qbsde_pure(step, terminal("identity"), e, **kw)
    b = bsde.solve_qbsde_pure(step, terminal("shift", s=0.5), e, **kw)
    assert check_comparison(a, b, "statistical").passed


def test_lipschitz_comparison(ens):
    """Lipschitz h1 = y/2 below the dominated h2 = g with the same data."""
    e = ens.head(300)
    params = DominatingParams(0.5, 0.5, 0.5, SIN_DOM)
    xi = terminal("abs")
    y1 = bsde.solve_linear_growth(Driver.linear(0.5), xi, e)
    g = Driver.abc(params, 1.0, symmetric=True)
    y2, _ = bsde.solve_dominated(g, params, xi, e)
    assert np.max(y1.Y - y2.Y) <= 1e-9


# ------------------------------------------------------------ dominated
@pytest.mark.parametrize("H", ["zero", "H1", "g"])
def test_dominated_sandwich(ens, H):
    e = ens.head(300)
    params = DominatingParams(0.5, 0.5, 0.5, SIN_DOM)
    drivers = {
        "zero": Driver.zero(),
        "H1": Driver.quadratic(builtin("H1")),
        "g": Driver.abc(params, 1.0, symmetric=True),
    }
    sol, pair = bsde.solve_dominated(drivers[H], params, terminal("abs"), e)
    assert np.all(pair.lower.Y <= 1e-12) and np.all(pair.upper.Y >= -1e-12)
    assert np.all(pair.lower.Y - 1e-6 <= sol.Y) and np.all(sol.Y <= pair.upper.Y + 1e-6)


def test_dominated_by_bound_recovers_abc(ens):
    params = DominatingParams(0.5, 0.5, 0.5, SIN_DOM)
    g = Driver.abc(params, 1.0, symmetric=True)
    fine = sample_brownian(TimeGrid(1.0, 50), 200, 31)
    sol, pair = bsde.solve_dominated(g, params, terminal("abs"), fine)
    half = bsde.solve_qbsde_abc(DominatingParams(0.5, 0.5, 0.5, SIN_DOM.symmetrized()), terminal("abs"), fine.coarsen(2))
    disc = abs(pair.upper.Y0 - half.Y0)
    assert abs(sol.Y0 - pair.upper.Y0) <= 2.0 * disc


def test_square_integrability_estimates(ens, step):
    sol = bsde.solve_qbsde_pure(step, terminal("identity"), ens)
    half = sol.n_paths // 2
    for x in (np.max(sol.Y**2, axis=1), np.sum(sol.Z**2, axis=1) * sol.grid.dt):
        assert np.isfinite(x.mean())
        assert abs(x.mean() - x[:half].mean()) <= 3 * x[:half].std(ddof=1) / math.sqrt(half)


def test_terminal_second_moment(ens):
    m, se = terminal("identity").second_moment(ens)
    assert abs(m - 1.0) <= 4 * se


def test_solution_csv(tmp_path, ens):
    sol = bsde.solve_zero_generator(terminal("identity"), ens.head(2))
    p = tmp_path / "sol.csv"
    sol.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["path_id", "t", "Y", "Z"]
    assert len(rows) == 1 + 2 * (ens.n_steps + 1)
    assert rows[ens.n_steps + 1][3] == ""


def test_unknown_terminal():
    with pytest.raises(LookupError):
        terminal("cube")
    with pytest.raises(ValueError):
        TerminalCondition(np.abs, kind="other")
