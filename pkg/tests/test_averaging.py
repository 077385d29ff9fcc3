import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from rapsolve.averaging import (build_change_of_variable, exp_smooth, find_equilibrium,
                                mollifier_build, reduce_averaged, smoothing_defect_xi,
                                solve_averaged, tabulated_average, time_average)
from rapsolve.errors import ConditioningError, ConvergenceError, DomainError
from rapsolve.fields import ParamField
from rapsolve.signals import TimeGrid


def field(fn, n=1):
    return ParamField(n, fn, n)


SIN_FIELD = field(lambda t, x, nu: -x + np.sin(t)[:, None])
DEMO = field(lambda t, x, nu: -x + 0.5 * x * np.sin(t)[:, None] + np.sin(t)[:, None])


def ones(t, x):
    return np.ones((t.shape[0], 1))


def sine(t, x):
    return np.sin(t)[:, None]


# -- time average -------------------------------------------------------------


def test_time_average_sine():
    npt.assert_allclose(time_average(SIN_FIELD, [0.7], 1e4), [-0.7], atol=1e-4)


def test_time_average_autonomous_exact():
    f = field(lambda t, x, nu: np.cos(x))
    npt.assert_allclose(time_average(f, [0.3], 50.0), [math.cos(0.3)], rtol=1e-14)


def test_time_average_odd_slow_term():
    f = field(lambda t, x, nu: -x + np.tanh(t)[:, None])
    npt.assert_allclose(time_average(f, [[0.2], [-1.0]], 1e3), [[-0.2], [1.0]], atol=1e-12)


# -- exponential smoothing ----------------------------------------------------


@pytest.mark.parametrize("nu", [0.5, 0.1, 0.02])
def test_exp_smooth_constant(nu):
    npt.assert_allclose(exp_smooth(ones, [0.0], nu, [0.0, 7.5]), 1.0 / nu, rtol=1e-10)


def test_exp_smooth_sine_closed_form():
    nu = 0.1
    t = np.array([-3.0, 0.0, 0.4, 11.0])
    npt.assert_allclose(exp_smooth(sine, [0.0], nu, t)[:, 0],
                        (nu * np.sin(t) - np.cos(t)) / (1 + nu * nu), atol=1e-11)


@given(st.floats(-20, 20))
def test_smoothing_ode_identity(t):
    nu, dt = 0.1, 1e-3

    def H(s, x):
        return (np.sin(s) + 0.3 * np.tanh(s) + 0.2 * np.cos(math.sqrt(2) * s))[:, None]

    F = exp_smooth(H, [0.0], nu, [t - dt, t, t + dt])[:, 0]
    lhs = (F[2] - F[0]) / (2 * dt) - H(np.array([t]), None)[0, 0]
    assert abs(lhs + nu * F[1]) <= 1e-6


def test_exp_smooth_rejects_nonpositive_nu():
    with pytest.raises(ValueError):
        exp_smooth(ones, [0.0], 0.0, [0.0])


def test_ergodic_mean_scaling():
    nu = 0.2
    t = np.linspace(-200, 200, 801)

    def H(s, x):
        return (0.5 + np.sin(s))[:, None]

    F = exp_smooth(H, [0.0], nu, t, h_sup=1.5)[:, 0]
    assert np.trapezoid(F, t) / 400 == pytest.approx(0.5 / nu, rel=2e-3)


# -- smoothing defect ---------------------------------------------------------


def test_defect_zero_and_one():
    assert smoothing_defect_xi(lambda t, x: np.zeros((t.shape[0], 1)), [0.0], 0.1) == 0.0
    assert smoothing_defect_xi(ones, [0.0], 0.1) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("nu", [0.3, 0.1])
def test_smoothing_bounds_for_sine(nu):
    probes = np.linspace(-10, 10, 21)
    xi = smoothing_defect_xi(sine, [0.0], nu, t_probes=probes)
    F = exp_smooth(sine, [0.0], nu, probes)[:, 0]
    assert np.all(np.abs(F) <= xi / nu)
    # dF/dt - H = -nu F
    assert np.all(nu * np.abs(F) <= xi)


# -- mollifier ----------------------------------------------------------------


def test_mollifier_constants():
    assert mollifier_build(1.0, 1, 1).d_a == pytest.approx(15 / 16, abs=1e-12)
    assert mollifier_build(1.0, 1, 2).d_a == pytest.approx(3 / math.pi, abs=1e-12)
    d1 = mollifier_build(1.0, 2, 1).d_a
    for a in (0.5, 2.0, 0.1):
        assert mollifier_build(a, 2, 1).d_a == pytest.approx(d1 / a, rel=1e-12)


def test_mollifier_symbolic_integral():
    # independent route: exact polynomial antiderivative in 1D
    q = 2
    poly = np.polynomial.Polynomial([1, 0, -1]) ** (2 * q)
    val = poly.integ()(1.0) - poly.integ()(-1.0)
    assert mollifier_build(1.0, q, 1).d_a == pytest.approx(1 / val, rel=1e-12)


@pytest.mark.parametrize("dim", [1, 2, 3])
@pytest.mark.parametrize("a", [0.5, 1.0])
@pytest.mark.parametrize("q", [1, 2])
def test_mollifier_normalization(dim, a, q):
    assert abs(mollifier_build(a, q, dim).polar_integral() - 1.0) <= 1e-8


def test_mollifier_cartesian_quadrature_2d():
    m = mollifier_build(0.7, 1, 2)
    val, _ = integrate.dblquad(lambda y, x: m(np.array([x, y]))[0], -0.7, 0.7,
                               lambda x: -math.sqrt(max(0.49 - x * x, 0.0)),
                               lambda x: math.sqrt(max(0.49 - x * x, 0.0)), epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-8)


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.sampled_from([0.3, 1.0]))
def test_mollifier_support(x, a):
    m = mollifier_build(a, 2, 2)
    v = m(np.array(x))[0]
    if np.hypot(*x) > a:
        assert v == 0.0
    else:
        assert v >= 0.0


def test_mollifier_bad_dimension():
    with pytest.raises(ValueError):
        mollifier_build(1.0, 1, 4)


# -- near-identity map --------------------------------------------------------

SMALL = TimeGrid.symmetric(5.0, 0.01)


def test_change_of_variable_autonomous_is_zero():
    f = field(lambda t, x, nu: -x ** 3)
    cmap = build_change_of_variable(f, 0.1, 0.3, SMALL, f0=lambda X: -np.asarray(X) ** 3)
    npt.assert_allclose(cmap.U_tab, 0.0, atol=1e-13)
    npt.assert_allclose(cmap.dU_tab, 0.0, atol=1e-12)


def test_change_of_variable_sine():
    nu = 0.1
    f = field(lambda t, x, nu: np.sin(t)[:, None] + 0.0 * x)
    cmap = build_change_of_variable(f, nu, 0.3, SMALL, f0=lambda X: np.zeros_like(X))
    t = SMALL.nodes
    Hbar = (nu * np.sin(t) - np.cos(t)) / (1 + nu * nu)
    for y in (-0.2, 0.0, 0.25):
        U = cmap.U(t, np.full((t.shape[0], 1), y))[:, 0]
        # piecewise-linear time integration, O(dt^2)
        npt.assert_allclose(U, Hbar, atol=2e-5)
    npt.assert_allclose(cmap.dU_tab, 0.0, atol=1e-9)


def test_diagnostics_decrease():
    diag = []
    for nu in (0.2, 0.1, 0.05):
        cmap = build_change_of_variable(DEMO, nu, 0.3, SMALL, f0=lambda X: -np.asarray(X))
        diag.append(cmap.diagnostics())
    for key in ("sup_nuU", "sup_nudU", "sup_G", "sup_dG"):
        vals = [d[key] for d in diag]
        assert vals[0] > vals[1] > vals[2], key


def test_change_of_variable_domain():
    with pytest.raises(DomainError):
        build_change_of_variable(DEMO, 0.25, 0.6, SMALL, W_radius=1.0)


# -- reduced field ------------------------------------------------------------


def test_reduce_identity_and_zero_nu():
    f0 = lambda X: -np.asarray(X)
    t = np.linspace(0, 3, 5)
    y = np.full((5, 1), 0.2)
    R = reduce_averaged(DEMO, 0.1, None, f0)
    npt.assert_allclose(R(t, y), DEMO(t, y, 0.1))
    R0 = reduce_averaged(DEMO, 0.0, None, f0)
    npt.assert_array_equal(R0(t, y), f0(y))


def test_reduced_remainder_vanishes():
    f0 = lambda X: -np.asarray(X)
    sups = []
    for nu in (0.2, 0.1, 0.05):
        cmap = build_change_of_variable(DEMO, nu, 0.3, SMALL, f0=f0)
        R = reduce_averaged(DEMO, nu, cmap, f0)
        t = SMALL.nodes[::7]
        s = 0.0
        for y in (-0.2, 0.0, 0.2):
            yy = np.full((t.shape[0], 1), y)
            s = max(s, float(np.max(np.abs(R(t, yy) - f0(yy)))))
        sups.append(s)
    assert sups[0] > sups[1] > sups[2]


# -- equilibria ---------------------------------------------------------------


def test_equilibrium_linear():
    rep = find_equilibrium(lambda X: 1.0 - np.asarray(X), [5.0])
    npt.assert_allclose(rep.x0, [1.0], atol=1e-10)
    npt.assert_allclose(rep.eigenvalues, [-1.0], atol=1e-6)
    assert rep.hyperbolic


def test_equilibrium_saddle_and_center():
    saddle = find_equilibrium(lambda X: np.asarray(X)[:, ::-1], [0.3, -0.2])
    npt.assert_allclose(saddle.x0, 0.0, atol=1e-10)
    npt.assert_allclose(np.sort(saddle.eigenvalues.real), [-1.0, 1.0], atol=1e-6)
    assert saddle.hyperbolic
    center = find_equilibrium(lambda X: np.column_stack([-X[:, 1], X[:, 0]]), [0.1, 0.1])
    npt.assert_allclose(np.sort(center.eigenvalues.imag), [-1.0, 1.0], atol=1e-6)
    assert not center.hyperbolic


def test_equilibrium_failures():
    with pytest.raises(ConditioningError):
        find_equilibrium(lambda X: np.asarray(X) ** 2 + 1.0, [0.0])
    with pytest.raises((ConvergenceError, ConditioningError)):
        find_equilibrium(lambda X: np.asarray(X) ** 2 + 1.0, [1.0])


def test_tabulated_average():
    f0 = tabulated_average(DEMO, [0.0], 0.5, T=200.0)
    X = np.array([[-0.4], [0.0], [0.33]])
    npt.assert_allclose(f0(X), -X, atol=1e-10)
    with pytest.raises(DomainError):
        f0([[0.9]])


# -- averaged solve -----------------------------------------------------------


def test_averaged_zero_field():
    f = field(lambda t, x, nu: -x)
    res = solve_averaged(f, 0.1, half_width=5.0, f0=lambda X: -np.asarray(X))
    npt.assert_allclose(res.psi_nu.values, 0.0, atol=1e-12)


@pytest.mark.parametrize("nu", [0.1, 0.05])
def test_averaged_sine_closed_form(nu):
    res = solve_averaged(SIN_FIELD, nu, r0=0.5, half_width=10.0)
    t = res.psi_nu.t
    exact = nu * (nu * np.sin(t) - np.cos(t)) / (1 + nu * nu)
    npt.assert_allclose(res.psi_nu.values[:, 0], exact, atol=1e-5)
    assert np.max(np.abs(res.psi_nu.values)) <= nu / math.sqrt(1 + nu * nu) + 1e-5
    assert res.info["sup_phi_minus_x0"] <= 0.5
    assert res.residual_sup <= 1e-4


def test_reduce_detects_non_invertible_map():
    class Stub:
        def U(self, t, y):
            return np.zeros_like(y)

        def dU(self, t, y):
            return np.full((t.shape[0], 1, 1), -20.0)

        def G(self, t, y):
            return np.zeros_like(y)

    R = reduce_averaged(DEMO, 0.1, Stub(), lambda X: -np.asarray(X))
    with pytest.raises(ConditioningError):
        R(np.zeros(2), np.zeros((2, 1)))
