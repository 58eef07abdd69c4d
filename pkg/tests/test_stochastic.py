import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from qbsde.errors import DomainError, NumericalError, SimulationBlowupError
from qbsde.stochastic import (
    Coefficient,
    TimeGrid,
    default_bandwidth,
    dump_paths_csv,
    euler_forward,
    gh_expectation,
    gh_expectation_pair,
    local_time,
    mean_local_time_profile,
    quadratic_variation,
    sample_brownian,
)
from qbsde.transform import build_u

import oracles


# ------------------------------------------------------------------ grids
def test_time_grid():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert np.all(np.diff(g.nodes) > 0)
    assert g.nodes[-1] == 2.0
    with pytest.raises(DomainError):
        TimeGrid(1.0, 0)
    with pytest.raises(DomainError):
        TimeGrid(-1.0, 4)


# -------------------------------------------------------------- Brownian
def test_variance_of_terminal_value():
    T, n = 2.0, 20000
    ens = sample_brownian(TimeGrid(T, 10), n, 3)
    assert abs(np.var(ens.W_T) - T) <= 4 * T * math.sqrt(2.0 / n)


def test_increment_mean():
    ens = sample_brownian(TimeGrid(1.0, 50), 4000, 4)
    dt = ens.grid.dt
    assert abs(ens.increments.mean()) <= 4 * math.sqrt(dt) / math.sqrt(ens.n_paths * ens.n_steps)


def test_disjoint_paths_uncorrelated():
    ens = sample_brownian(TimeGrid(1.0, 400), 130, 5)
    n = ens.n_steps
    for a, b in [(0, 1), (0, 64), (63, 64), (5, 129)]:
        rho = np.corrcoef(ens.increments[a], ens.increments[b])[0, 1]
        assert abs(rho) <= 4 / math.sqrt(n)


def test_same_seed_bit_identical():
    g = TimeGrid(1.0, 16)
    assert np.array_equal(sample_brownian(g, 100, 9).increments, sample_brownian(g, 100, 9).increments)
    assert not np.array_equal(sample_brownian(g, 100, 9).increments, sample_brownian(g, 100, 10).increments)


@given(st.integers(1, 300), st.integers(1, 300))
def test_path_invariant_to_path_count(n1, n2):
    g = TimeGrid(1.0, 7)
    a, b = sample_brownian(g, n1, 11), sample_brownian(g, n2, 11)
    k = min(n1, n2)
    assert np.array_equal(a.increments[:k], b.increments[:k])


def test_antithetic_pairs():
    ens = sample_brownian(TimeGrid(1.0, 5), 7, 1, antithetic=True)
    assert np.array_equal(ens.increments[1::2], -ens.increments[0:6:2])


def test_zero_paths_rejected():
    with pytest.raises(DomainError):
        sample_brownian(TimeGrid(1.0, 4), 0, 1)


def test_coarsen_keeps_paths():
    fine = sample_brownian(TimeGrid(1.0, 12), 5, 2)
    coarse = fine.coarsen(4)
    assert np.allclose(coarse.W, fine.W[:, ::4], atol=1e-15)
    with pytest.raises(DomainError):
        fine.coarsen(5)


# ---------------------------------------------------------------- Euler
def test_geometric_euler_mean():
    T = 1.0
    ens = sample_brownian(TimeGrid(T, 200), 20000, 12)
    fwd = euler_forward(Coefficient.linear(0.1), Coefficient.linear(0.2), 0.0, 1.0, ens)
    assert np.all(fwd.X[:, 0] == 1.0)
    xt = fwd.X_T
    se = xt.std(ddof=1) / math.sqrt(xt.size)
    assert abs(xt.mean() - math.exp(0.1 * T)) <= 4 * se


def test_euler_blowup_names_path():
    ens = sample_brownian(TimeGrid(1.0, 50), 4, 1)
    b = Coefficient(lambda x: np.where(np.arange(x.size) == 2, 1e300 * (1 + x * x), 0.0), None, "bad")
    with pytest.raises(SimulationBlowupError) as err:
        euler_forward(b, Coefficient.constant(1.0), 0.0, 1.0, ens)
    assert err.value.path_index == 2


def test_brownian_forward_is_w():
    ens = sample_brownian(TimeGrid(1.0, 10), 3, 1)
    fwd = euler_forward(Coefficient.constant(0.0), Coefficient.constant(1.0), 0.0, 0.0, ens)
    assert np.allclose(fwd.X, ens.W, atol=1e-15)


# ----------------------------------------------------- occupation tools
def test_quadratic_variation_riemann_sum():
    g = TimeGrid(1.0, 1000)
    Z = g.nodes[:-1]
    qv = quadratic_variation(Z, g)
    assert qv[0] == 0.0
    assert qv[-1] == pytest.approx(np.sum(Z**2) * g.dt, rel=1e-14)
    assert qv[-1] == pytest.approx(1.0 / 3.0, abs=1e-3)


def test_brownian_local_time_mean():
    """Y = W, Z = 1: E L_1^0 = sqrt(2/pi), within 5% at eps = 2 mean|dW|."""
    g = TimeGrid(1.0, 4096)
    ens = sample_brownian(g, 4000, 21)
    W = ens.W
    Z = np.ones((ens.n_paths, g.n_steps))
    eps = 2.0 * float(np.mean(np.abs(ens.increments)))
    est = local_time(W, Z, 0.0, eps, g).mean()
    assert abs(est / oracles.LOCAL_TIME_MEAN - 1.0) <= 0.05


def test_local_time_profile_matches_pointwise():
    g = TimeGrid(1.0, 256)
    ens = sample_brownian(g, 200, 2)
    W = ens.W
    Z = np.ones((ens.n_paths, g.n_steps))
    eps = default_bandwidth(W, g)
    levels = np.array([-0.5, 0.0, 0.3])
    prof = mean_local_time_profile(W, Z, levels, eps, g)
    direct = [local_time(W, Z, a, eps, g).mean() for a in levels]
    assert np.allclose(prof, direct, rtol=1e-12)


def test_occupation_identity_brownian():
    """sum psi(W_k) dt against int psi(a) L^a da within 10% at 2^14 steps."""
    g = TimeGrid(1.0, 2**14)
    ens = sample_brownian(g, 300, 8)
    W = ens.W
    Z = np.ones((ens.n_paths, g.n_steps))
    psi = lambda x: 1.0 / (1.0 + x * x)
    lhs = np.mean(np.sum(psi(W[:, :-1]), axis=1) * g.dt)
    eps = default_bandwidth(W, g)
    a = np.linspace(W.min() - eps, W.max() + eps, 4001)
    rhs = trapezoid(psi(a) * mean_local_time_profile(W, Z, a, eps, g), a)
    assert abs(lhs - rhs) / lhs <= 0.10


def test_bandwidth_positive():
    g = TimeGrid(1.0, 4)
    with pytest.raises(DomainError):
        local_time(np.zeros((1, 5)), np.zeros((1, 4)), 0.0, 0.0, g)


# ---------------------------------------------------- Gaussian quadrature
def test_half_moment_oracle():
    val = gh_expectation(lambda x: np.maximum(x, 0.0), 1.0, order=96, kinks=(0.0,))
    assert val == pytest.approx(oracles.HALF_MOMENT, abs=1e-13)


def test_transform_expectation_self_convergence(step):
    tp = build_u(step)
    kinks = tuple(b for b in step.breakpoints if math.isfinite(b))
    v64 = gh_expectation(tp.u, 1.0, order=64, kinks=kinks)
    v128 = gh_expectation(tp.u, 1.0, order=128, kinks=kinks)
    assert abs(v64 - v128) <= 1e-9
    assert v128 == pytest.approx(oracles.STEP_EU, abs=1e-12)


def test_plain_hermite_self_convergence(step):
    tp = build_u(step)
    v64 = gh_expectation(tp.u, 1.0, order=64)
    v128 = gh_expectation(tp.u, 1.0, order=128)
    assert abs(v64 - v128) <= 1e-3


@given(st.floats(-3, 3), st.floats(0.01, 4))
def test_polynomial_moments_exact(c, var):
    m = gh_expectation(lambda x: x**4, var, center=c, order=20)
    assert m == pytest.approx(c**4 + 6 * c * c * var + 3 * var * var, rel=1e-12, abs=1e-12)


def test_score_gives_derivative():
    mean, score = gh_expectation_pair(np.sin, 0.5, center=np.array([0.0, 0.7]), order=40)
    assert np.allclose(mean, np.sin([0.0, 0.7]) * math.exp(-0.25), atol=1e-14)
    assert np.allclose(score / math.sqrt(0.5), np.cos([0.0, 0.7]) * math.exp(-0.25), atol=1e-14)


def test_zero_variance_is_evaluation():
    assert gh_expectation(np.exp, 0.0, center=1.0) == pytest.approx(math.e)


def test_quadrature_errors():
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        gh_expectation(lambda x: np.exp(x * x), 1e6, order=64)
    with pytest.raises(DomainError):
        gh_expectation(np.sin, 1.0, order=2)
    with pytest.raises(DomainError):
        gh_expectation(np.sin, -1.0)


def test_dump_paths_csv(tmp_path):
    ens = sample_brownian(TimeGrid(1.0, 3), 2, 1)
    fwd = euler_forward(Coefficient.constant(0.0), Coefficient.constant(1.0), 0.5, 1.0, ens)
    p = tmp_path / "paths.csv"
    dump_paths_csv(p, ens, fwd)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["path_id", "t", "W", "X"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[1][1]) == 0.5
    assert float(rows[1][3]) == 1.0
