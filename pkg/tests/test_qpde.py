import csv

import numpy as np
import pytest

from qbsde import bsde
from qbsde.errors import DomainError, PreconditionError, RefineGridError
from qbsde.generator import builtin
from qbsde.qpde import (
    PdeProblem,
    cole_hopf_check,
    mc_fd_check,
    mc_representation,
    solve_linear_fd,
    solve_quadratic_fd,
    step_fixture,
)
from qbsde.stochastic import Coefficient, TimeGrid, gh_expectation, sample_brownian
from qbsde.transform import build_u


def heat(psi, f=None, lo=-10.0, hi=10.0, **kw):
    return PdeProblem(
        Coefficient.constant(0.0), Coefficient.constant(1.0), builtin("zero") if f is None else f, psi, 1.0, lo, hi, **kw
    )


def test_heat_equation_square_terminal_exact():
    sol = solve_quadratic_fd(heat(lambda x: x * x), 401, 400)
    inner = np.abs(sol.x) <= 2
    assert np.max(np.abs(sol.row(0.0)[inner] - (sol.x[inner] ** 2 + 1.0))) <= 1e-10
    assert np.array_equal(sol.row(1.0), sol.x**2)


def test_linear_solver_matches_feynman_kac_quadrature(step):
    problem = step_fixture()
    tp = build_u(step)
    term = lambda x: tp.u(np.maximum(x, 0.0))
    # second order in dx; the kink at 0 needs dx below 0.02 for 1e-4
    sol = solve_linear_fd(problem, 801, 800, terminal=term)
    kinks = (0.0, 1.0)
    for x in (-1.0, -0.3, 0.0, 0.4, 1.0):
        ref = gh_expectation(term, 1.0, center=x, order=96, kinks=kinks)
        assert abs(float(sol.at(0.0, x)) - ref) <= 1e-4


def test_cole_hopf_converges_under_refinement():
    problem = step_fixture()
    stats = [cole_hopf_check(problem, n, n - 1).statistic for n in (101, 201, 401)]
    assert stats[0] / stats[1] >= 1.5
    assert stats[1] / stats[2] >= 1.5


def test_cole_hopf_report():
    rep = cole_hopf_check(step_fixture(), 401, 400)
    assert rep.passed
    assert rep.target_or_bound == pytest.approx(5.0 * rep.metadata["linear_error_estimate"])


def test_cole_hopf_negative_control():
    # comparing against the transform of a different f breaks the identity
    problem = step_fixture()
    other = step_fixture(builtin("step", alpha=1.5))
    tp = build_u(other.f)
    v = solve_quadratic_fd(problem, 201, 200)
    w = solve_linear_fd(other, 201, 200, terminal=lambda x: tp.u(np.maximum(x, 0.0)))
    inner = np.abs(v.x) <= 1
    assert np.max(np.abs(tp.u(v.row(0.0)) - w.row(0.0))[inner]) > 1e-2


def test_monotone_data():
    p1 = step_fixture()
    p2 = PdeProblem(p1.b, p1.sigma, p1.f, lambda x: np.maximum(x, 0.0) + 0.1 * np.exp(-x * x), 1.0, -7, 7)
    v1 = solve_quadratic_fd(p1, 201, 200).v
    v2 = solve_quadratic_fd(p2, 201, 200).v
    assert np.all(v1 <= v2 + 1e-12)


def test_terminal_row_and_finiteness():
    sol = solve_quadratic_fd(step_fixture(), 101, 100)
    assert np.array_equal(sol.v[-1], np.maximum(sol.x, 0.0))
    assert np.all(np.isfinite(sol.v))
    with pytest.raises(DomainError):
        sol.row(0.123456)


def test_pde_agrees_with_bsde_solver(step):
    """v(0, 0) against Y_0 of the BSDE with xi = max(W_1, 0)."""
    sol = solve_quadratic_fd(step_fixture(), 401, 400)
    coarse = solve_quadratic_fd(step_fixture(), 201, 200)
    grid_err = abs(float(sol.at(0.0, 0.0)) - float(coarse.at(0.0, 0.0)))
    ens = sample_brownian(TimeGrid(1.0, 4), 4, 1)
    y0 = bsde.solve_qbsde_pure(step, bsde.terminal("positive_part"), ens).Y0
    assert abs(float(sol.at(0.0, 0.0)) - y0) <= 3 * grid_err + 1e-6


def test_mc_representation_single_probe():
    problem = step_fixture()
    fd = solve_quadratic_fd(problem, 401, 400)
    coarse = solve_quadratic_fd(problem, 201, 200)
    grid_err = abs(float(fd.at(0.0, 0.0)) - float(coarse.at(0.0, 0.0)))
    v, se = mc_representation(problem, 0.0, 0.0, n_paths=40000, n_steps=10, seed=3)
    assert se > 0
    assert abs(v - float(fd.at(0.0, 0.0))) <= 3 * se + grid_err
    with pytest.raises(DomainError):
        mc_representation(problem, 1.0, 0.0)


def test_mc_fd_check_five_probes():
    probes = [(0.0, 0.0), (0.0, 0.5), (0.0, -0.5), (0.5, 0.0), (0.5, 1.0)]
    rep = mc_fd_check(step_fixture(), probes, n_paths=40000, n_steps=20, seed=11)
    assert rep.passed
    assert len(rep.metadata["probes"]) == 5


def test_refine_grid_error_reports_steps():
    problem = heat(lambda x: np.maximum(x, 0.0), f=builtin("step", alpha=40.0), lo=-7, hi=7)
    with pytest.raises(RefineGridError) as err:
        solve_quadratic_fd(problem, 801, 20)
    assert err.value.suggested_n_t > 20


def test_stability_warning():
    problem = PdeProblem(
        Coefficient.constant(30.0), Coefficient.constant(1.0), builtin("zero"), lambda x: np.maximum(x, 0.0), 1.0, -7, 7
    )
    with pytest.warns(RuntimeWarning, match="Peclet"):
        solve_linear_fd(problem, 51, 50)


def test_sigma_floor_enforced():
    with pytest.raises(PreconditionError):
        PdeProblem(Coefficient.constant(0.0), Coefficient.constant(0.5), builtin("zero"), np.abs, sigma_min=1.0)


def test_exports(tmp_path):
    sol = solve_quadratic_fd(step_fixture(), 11, 4)
    p = tmp_path / "v.csv"
    sol.to_csv(p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["t", "x", "v"]
    assert len(rows) == 1 + 5 * 11
    text = sol.to_text()
    assert len(text.splitlines()) == 1 + 5
