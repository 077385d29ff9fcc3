import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, strategies as st

from rapsolve.dichotomy import (DichotomyData, GreenKernel, MatrixFunction, convolution_window,
                                estimate_dichotomy, green_convolve, green_eval,
                                integrate_fundamental, roughness_apply, verify_dichotomy)
from rapsolve.errors import DichotomyNotFound, PreconditionError, SpanError, StiffnessError
from rapsolve.signals import GridFunction, Signal, TimeGrid

DIAG = MatrixFunction.constant(np.diag([-1.0, 2.0]))
ROT = MatrixFunction.constant([[0.0, 1.0], [-1.0, 0.0]])
P1 = np.diag([1.0, 0.0])


@pytest.fixture(scope="module")
def diag_kernel():
    fund = integrate_fundamental(DIAG, TimeGrid.symmetric(30.0, 0.01))
    return GreenKernel(fund, DichotomyData(P1, 1.0, 1.0))


def test_fundamental_diagonal():
    fund = integrate_fundamental(DIAG, TimeGrid.symmetric(3.0, 0.01))
    k = fund.grid.index_of(1.0)
    npt.assert_allclose(fund.Phi[k], np.diag([math.exp(-1), math.exp(2)]), rtol=1e-9)
    npt.assert_allclose(np.diag(fund.Phi[k]), [0.3679, 7.3891], atol=1e-4)
    npt.assert_array_equal(fund.Phi[fund.grid.index_of(0.0)], np.eye(2))
    assert fund.identity_defect() <= 10 * fund.tol


def test_fundamental_zero_matrix():
    fund = integrate_fundamental(MatrixFunction.constant(np.zeros((2, 2))), TimeGrid.symmetric(5, 0.1))
    npt.assert_allclose(fund.Phi, np.broadcast_to(np.eye(2), fund.Phi.shape), atol=1e-15)


def test_fundamental_rotation_is_orthogonal():
    fund = integrate_fundamental(ROT, TimeGrid.symmetric(6, 0.01))
    t = fund.grid.nodes
    npt.assert_allclose(np.linalg.norm(fund.Phi, 2, axis=(1, 2)), 1.0, atol=1e-9)
    npt.assert_allclose(fund.Phi[:, 0, 0], np.cos(t), atol=1e-9)
    npt.assert_allclose(fund.Phi[:, 0, 1], np.sin(t), atol=1e-9)


def test_fundamental_zero_between_nodes():
    grid = TimeGrid(-1.03, 0.1, 25)
    fund = integrate_fundamental(DIAG, grid)
    npt.assert_allclose(np.diagonal(fund.Phi, axis1=1, axis2=2),
                        np.exp(np.outer(grid.nodes, [-1.0, 2.0])), rtol=1e-9)
    # cubic Hermite dense output, O(dt^4) with dt = 0.1
    npt.assert_allclose(fund.Phi_at(0.0), np.eye(2), atol=1e-5)


def test_fundamental_dense_output():
    fund = integrate_fundamental(ROT, TimeGrid.symmetric(2, 0.05))
    t = np.array([0.012, 0.73, -1.111])
    c, s = np.cos(t), np.sin(t)
    npt.assert_allclose(fund.Phi_at(t), np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], 1),
                        atol=1e-6)
    npt.assert_allclose(fund.PhiInv_at(t) @ fund.Phi_at(t), np.broadcast_to(np.eye(2), (3, 2, 2)),
                        atol=1e-6)


def test_fundamental_requires_zero_in_span():
    with pytest.raises(SpanError):
        integrate_fundamental(DIAG, TimeGrid(1.0, 0.1, 5))


def test_stiff_system_reports_time():
    with pytest.raises(StiffnessError) as info:
        integrate_fundamental(MatrixFunction.constant([[-1e9]]), TimeGrid(0.0, 1.0, 3), tol=1e-12)
    assert 0.0 <= info.value.t <= 2.0


def test_green_eval_examples(diag_kernel):
    npt.assert_allclose(green_eval(diag_kernel, 1.0, 0.0), np.diag([math.exp(-1), 0.0]), atol=1e-9)
    npt.assert_allclose(green_eval(diag_kernel, 0.0, 1.0), np.diag([0.0, -math.exp(-2)]), atol=1e-9)
    with pytest.raises(SpanError):
        green_eval(diag_kernel, 31.0, 0.0)


def test_green_eval_off_node(diag_kernel):
    t, s = 2.3456, -0.7891
    npt.assert_allclose(diag_kernel(t, s), np.diag([math.exp(-(t - s)), 0.0]), atol=1e-9)
    npt.assert_allclose(diag_kernel(s, t), np.diag([0.0, -math.exp(-2 * (t - s))]), atol=1e-9)
    npt.assert_allclose(diag_kernel(0.503, 0.501), np.diag([math.exp(-0.002), 0.0]), atol=1e-9)
    npt.assert_allclose(diag_kernel(0.501, 0.503), np.diag([0.0, -math.exp(-0.004)]), atol=1e-9)


@given(st.floats(-25.0, 25.0))
def test_green_jump_identity(s):
    fund = integrate_fundamental(ROT + DIAG, TimeGrid.symmetric(30.0, 0.05))
    kernel = GreenKernel(fund, projection=P1)
    eps = 1e-7
    jump = kernel(s + eps, s) - kernel(s - eps, s)
    npt.assert_allclose(jump, np.eye(2), atol=1e-5)


def test_estimate_examples():
    grid = TimeGrid.symmetric(12.0, 0.01)
    fit = estimate_dichotomy(integrate_fundamental(DIAG, grid), P1)
    assert 1.0 <= fit.data.K <= 1.05 + 1e-12
    npt.assert_allclose(fit.data.alpha, 1.0, atol=0.05)
    fit2 = estimate_dichotomy(integrate_fundamental(MatrixFunction.constant(np.diag([-3.0, -0.5])),
                                                    grid), np.eye(2))
    npt.assert_allclose(fit2.data.alpha, 0.5, atol=0.01)
    with pytest.raises(DichotomyNotFound):
        estimate_dichotomy(integrate_fundamental(ROT, grid), np.eye(2))


def test_estimate_non_normal_transient():
    # x' = [[-1, 4], [0, -2]] x: transient growth, so K > 1
    A = MatrixFunction.constant([[-1.0, 4.0], [0.0, -2.0]])
    fund = integrate_fundamental(A, TimeGrid.symmetric(15.0, 0.01))
    fit = estimate_dichotomy(fund, np.eye(2))
    assert fit.data.K > 1.5
    assert 0.9 <= fit.data.alpha <= 1.05
    assert verify_dichotomy(GreenKernel(fund, fit.data)).passed


def test_estimate_rejects_non_projection():
    fund = integrate_fundamental(DIAG, TimeGrid.symmetric(3.0, 0.1))
    with pytest.raises(PreconditionError):
        estimate_dichotomy(fund, 2 * np.eye(2))


def test_verify_examples(diag_kernel):
    assert verify_dichotomy(diag_kernel).worst_ratio <= 1.0 + 1e-9
    bad = verify_dichotomy(diag_kernel, K=0.5, alpha=1.0)
    assert not bad.passed and bad.worst_ratio > 1.9
    fund = integrate_fundamental(MatrixFunction.constant(-np.eye(2)), TimeGrid.symmetric(10, 0.05))
    zero = GreenKernel(fund, DichotomyData(np.zeros((2, 2)), 1.0, 1.0))
    assert verify_dichotomy(zero, side="forward").worst_ratio == 0.0


def test_verify_csv(diag_kernel, tmp_path):
    rep = verify_dichotomy(diag_kernel, verification_pairs=64)
    rep.to_csv(tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "t,s,norm_G,bound"
    assert len(lines) == rep.samples.shape[0] + 1


def test_roughness_examples():
    base = DichotomyData(np.eye(1), 1.0, 1.0)
    out = roughness_apply(base, 0.1)
    npt.assert_allclose([out.alpha, out.K], [0.8, 2.5])
    out0 = roughness_apply(base, 0.0)
    npt.assert_allclose([out0.alpha, out0.K], [1.0, 2.5])
    with pytest.raises(PreconditionError, match="0.25"):
        roughness_apply(base, 0.25)
    with pytest.raises(PreconditionError):
        roughness_apply(base, -0.01)


@pytest.mark.parametrize("delta", [0.02, 0.1, 0.2])
@pytest.mark.parametrize("omega", [1.0, math.sqrt(2)])
def test_roughness_bounds_hold_after_refit(delta, omega):
    B = [(Signal.trig(omega, 0.0, delta), [[0, 1], [0, 0]]),
         (Signal.trig(1.0, delta, 0.0), [[0, 0], [1, 0]])]
    A = MatrixFunction.modulated(np.diag([-1.0, 2.0]), B)
    fund = integrate_fundamental(A, TimeGrid.symmetric(45.0, 0.01))
    base = DichotomyData(P1, 1.0, 1.0)
    guaranteed = roughness_apply(base, delta)
    fit = estimate_dichotomy(fund, P1)
    assert fit.data.K <= guaranteed.K
    assert fit.data.alpha >= guaranteed.alpha
    # null space of the re-fitted projection stays close to the unperturbed one
    assert fit.projection_mismatch < 2 * delta


def test_convolve_scalar_sine():
    fund = integrate_fundamental(MatrixFunction.constant([[-1.0]]), TimeGrid.symmetric(40.0, 0.005))
    kernel = GreenKernel(fund, DichotomyData(np.eye(1), 1.0, 1.0))
    h = GridFunction.sample(Signal.trig(1.0, 0.0, 1.0), fund.grid)
    y = green_convolve(kernel, h, 1e-8)
    t = y.t
    npt.assert_allclose(y.values[:, 0], (np.sin(t) - np.cos(t)) / 2, atol=1e-5)
    npt.assert_allclose(y(0.0), [-0.5], atol=1e-5)
    c = green_convolve(kernel, GridFunction.sample(Signal.constant([0.7]), fund.grid), 1e-8)
    # trapezoid bias is dt^2/12 relative
    npt.assert_allclose(c.values, 0.7, atol=0.7 * 0.005 ** 2 / 12 * 1.01)


def test_convolve_diagonal_system(diag_kernel):
    h = GridFunction.sample(Signal.trig(1.0, [0, 1], [1, 0]), diag_kernel.grid)
    y = green_convolve(diag_kernel, h, 1e-8)
    t = y.t
    expect = np.column_stack([(np.sin(t) - np.cos(t)) / 2, (np.sin(t) - 2 * np.cos(t)) / 5])
    npt.assert_allclose(y.values, expect, atol=2e-5)
    npt.assert_allclose(y(0.0)[1], -0.4, atol=2e-5)


def test_convolve_span_error(diag_kernel):
    h = GridFunction.sample(Signal.constant([1.0, 1.0]), diag_kernel.grid)
    L = convolution_window(1.0, 1.0, h.sup_norm(), 1e-8)
    with pytest.raises(SpanError):
        green_convolve(diag_kernel, h, 1e-8, out_grid=TimeGrid.symmetric(30.0 - L + 1.0, 0.01))
    short = GridFunction.sample(Signal.constant([1.0, 1.0]), TimeGrid.symmetric(10.0, 0.01))
    with pytest.raises(SpanError):
        green_convolve(diag_kernel, short, 1e-8)


def test_kernel_l1_bound(diag_kernel):
    K, alpha = diag_kernel.dichotomy.K, diag_kernel.dichotomy.alpha
    for j in (1000, 3000, 4500):
        row = diag_kernel.row_norms(j)
        integral = np.trapezoid(row, dx=diag_kernel.grid.dt)
        assert integral <= 2 * K / alpha + 1e-8


def test_convolve_ode_residual(diag_kernel):
    mod = MatrixFunction.modulated(np.diag([-1.0, 2.0]), [(Signal.trig(1.0, 0, 0.1), [[0, 1], [1, 0]])])
    fund = integrate_fundamental(mod, TimeGrid.symmetric(30.0, 0.01))
    kernel = GreenKernel(fund, DichotomyData(P1, 1.2, 0.9))
    hs = Signal.trig(1.3, [1, 0], [0, 1]) + Signal.slow("arctan", [0.5, 0.5])
    y = green_convolve(kernel, GridFunction.sample(hs, fund.grid), 1e-8)
    dt = y.grid.dt
    dy = (y.values[2:] - y.values[:-2]) / (2 * dt)
    t = y.t[1:-1]
    rhs = np.einsum("nij,nj->ni", mod(t), y.values[1:-1]) + hs(t)
    assert np.max(np.abs(dy - rhs)) < 1e-3
    assert y.sup_norm() <= 2 * 1.2 / 0.9 * hs.sup_bound() + 1e-8


coef = st.floats(-3, 3, allow_nan=False)


@given(coef, coef)
def test_convolve_linear(a, b):
    fund = integrate_fundamental(DIAG, TimeGrid.symmetric(25.0, 0.05))
    kernel = GreenKernel(fund, DichotomyData(P1, 1.0, 1.0))
    h1 = GridFunction.sample(Signal.trig(1.0, [1, 0], [0, 1]), fund.grid)
    h2 = GridFunction.sample(Signal.slow("tanh", [1, -1]), fund.grid)
    grid = TimeGrid.symmetric(2.0, 0.05)
    lhs = green_convolve(kernel, GridFunction(fund.grid, a * h1.values + b * h2.values), 1e-6, grid)
    rhs = a * green_convolve(kernel, h1, 1e-6, grid).values + b * green_convolve(kernel, h2, 1e-6, grid).values
    npt.assert_allclose(lhs.values, rhs, atol=1e-10)
