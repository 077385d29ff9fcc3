import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from rapsolve.fields import (Field, ParamField, PolynomialField, forcing_field, linear_field,
                             zero_field)
from rapsolve.signals import Signal


def test_quadratic_derivatives():
    f = PolynomialField(1, [(0, (2,), 0.2)])
    t = np.zeros(3)
    x = np.array([[-1.0], [0.5], [2.0]])
    npt.assert_allclose(f(t, x)[:, 0], 0.2 * x[:, 0] ** 2)
    npt.assert_allclose(f.jacobian(t, x)[:, 0, 0], 0.4 * x[:, 0])
    npt.assert_allclose(f.hessian(t, x)[:, 0, 0, 0], 0.4)
    assert f.degree == 2


def test_delay_field_shapes():
    g = PolynomialField(2, [(0, (0, 0, 1, 0), 1.0), (1, (1, 0, 0, 1), -2.0)], n_vars=4)
    t = np.array([0.0, 1.0])
    x = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0]])
    npt.assert_allclose(g(t, x), [[3.0, -8.0], [-1.0, -2.0]])
    J = g.jacobian(t, x)
    assert J.shape == (2, 2, 4)
    npt.assert_allclose(J[0, 1], [-8.0, 0.0, 0.0, -2.0])
    assert g.hessian(t, x).shape == (2, 2, 4, 4)


def test_signal_coefficient():
    f = PolynomialField(1, [(0, (1,), Signal.trig(1.0, 0.0, 1.0))])
    t = np.array([np.pi / 2, 0.0])
    npt.assert_allclose(f(t, [[3.0], [3.0]])[:, 0], [3.0, 0.0], atol=1e-15)


def test_bad_monomial():
    with pytest.raises(ValueError):
        PolynomialField(1, [(0, (1, 1), 1.0)])
    with pytest.raises(ValueError):
        PolynomialField(1, [(1, (1,), 1.0)])


def test_polynomial_round_trip():
    f = PolynomialField(2, [(0, (1, 1), 0.5), (1, (0, 2), Signal.slow("tanh", 0.3))])
    g = PolynomialField.from_dict(f.to_dict())
    t = np.linspace(-3, 3, 7)
    x = np.column_stack([np.sin(t), np.cos(t)])
    npt.assert_allclose(g(t, x), f(t, x))


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2), st.floats(-5, 5))
def test_analytic_vs_finite_difference(x, t):
    f = PolynomialField(2, [(0, (2, 1), 1.0), (0, (0, 3), -0.5), (1, (1, 1), 2.0), (1, (1, 0), 1.0)])
    fd = Field(2, f.fn)
    xx = np.array([x])
    tt = np.array([t])
    npt.assert_allclose(fd.jacobian(tt, xx), f.jacobian(tt, xx), atol=1e-7)
    npt.assert_allclose(fd.hessian(tt, xx), f.hessian(tt, xx), atol=2e-4)


def test_linear_and_forcing_fields():
    M = np.array([[0.0, 1.0], [-2.0, 0.5]])
    f = linear_field(M) + forcing_field(Signal.trig(1.0, [1.0, 0.0], [0.0, 1.0]))
    t = np.array([0.0])
    x = np.array([[1.0, 2.0]])
    npt.assert_allclose(f(t, x), [[3.0, -1.0]])
    npt.assert_allclose(f.jacobian(t, x)[0], M)
    npt.assert_allclose(f.hessian(t, x), 0.0)
    npt.assert_allclose(f.scaled(2.0)(t, x), [[6.0, -2.0]])


def test_param_field():
    g = ParamField.nu_times(linear_field([[2.0]]))
    npt.assert_allclose(g([0.0], [[3.0]], 0.5), [[3.0]])
    npt.assert_allclose(g.at(0.25).jacobian([0.0], [[1.0]]), [[[0.5]]])
    npt.assert_allclose(ParamField.zero(2)([1.0], [[1.0, 1.0]], 3.0), [[0.0, 0.0]])
    npt.assert_allclose(zero_field(1)(np.zeros(2), np.ones((2, 1))), 0.0)
