import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from rapsolve.brusselator import (BrusselatorSpec, build_brusselator, linearization,
                                  reference_point, run_demo)
from rapsolve.errors import DichotomyNotFound, PreconditionError
from rapsolve.fields import ParamField
from rapsolve.signals import Signal, TimeGrid, remote_translation_defect

GRID = TimeGrid.symmetric(30.0, 0.01)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    return run_demo(out_dir=tmp_path_factory.mktemp("demo"), svg=True)


def test_reference_and_spectrum():
    npt.assert_allclose(reference_point(1.0, 0.5), [1.0, 0.5])
    J = linearization(1.0, 0.5)
    assert np.trace(J) == pytest.approx(0.5 - 1 - 1.0)
    assert np.linalg.det(J) == pytest.approx(1.0)
    assert np.all(np.abs(np.linalg.eigvals(J).real) > 0.5)


def test_nonhyperbolic_reference():
    # trace b - 1 - a^2 vanishes at b = 2, a = 1
    spec = BrusselatorSpec(a=Signal.constant(1.0), b=Signal.constant(2.0), mean_horizon=10.0)
    with pytest.raises(DichotomyNotFound):
        build_brusselator(spec, TimeGrid.symmetric(5.0, 0.01))


def test_positivity_precondition():
    spec = BrusselatorSpec(a=Signal.constant(1.0) + Signal.trig(1.0, 0.0, 1.5))
    with pytest.raises(PreconditionError):
        build_brusselator(spec, TimeGrid.symmetric(5.0, 0.01))


def test_constant_coefficients_give_equilibrium():
    spec = BrusselatorSpec(a=Signal.constant(1.0), g=ParamField.zero(2), mean_horizon=10.0)
    out = run_demo(spec, TimeGrid.symmetric(10.0, 0.01))
    npt.assert_allclose(out.xi.values, np.tile([1.0, 0.5], (out.xi.grid.count, 1)), atol=1e-12)
    npt.assert_allclose(out.psi.values, out.xi.values, atol=1e-12)


def test_oscillating_a_without_perturbation():
    spec = BrusselatorSpec(g=ParamField.zero(2))
    out = run_demo(spec, GRID)
    assert np.ptp(out.xi.values[:, 0]) > 0.1
    assert out.result.residual_sup <= 1e-4
    assert out.result.info["residual_original"] <= 1e-4


def test_demo_solution(demo):
    res = demo.result
    assert res.residual_sup <= 1e-4
    assert res.info["residual_original"] <= 1e-4
    assert demo.positive


def test_demo_files(demo):
    header = demo.files["csv"].read_text().splitlines()[0]
    assert header == "t,u_xi,v_xi,u,v"
    report = json.loads(demo.files["report"].read_text())
    assert report["schema_version"] == 1
    assert report["positive"] is True
    assert demo.files["svg"].read_text().lstrip().startswith("<?xml")


def test_demo_hypothesis_report(demo):
    # the O(0.1) forcing in a(t) gives xi of size about 0.15, so the
    # variational coefficient exceeds the roughness threshold at r = 0.3
    rep = demo.result.hypothesis
    assert set(rep.failures()) >= {"H2", "H3"}
    assert rep.delta > rep.checks["H3"].rhs
    assert not rep.all_pass


def test_nu_halving():
    dev = []
    for nu in (0.02, 0.01):
        out = run_demo(BrusselatorSpec(nu=nu), GRID)
        dev.append(np.max(np.abs(out.psi.values - out.xi.values)))
    assert dev[0] / dev[1] == pytest.approx(2.0, rel=0.1)


def test_translation_inherited(demo):
    spec = BrusselatorSpec()
    tau = 2 * math.pi
    eps = remote_translation_defect(spec.a, tau, tail=10.0, horizon=20.0)
    d = remote_translation_defect(demo.psi, tau, tail=10.0, horizon=20.0)
    assert eps > 0
    assert d <= 10 * eps
