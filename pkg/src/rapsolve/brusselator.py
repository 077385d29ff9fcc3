"""Nonautonomous Brusselator with RAP coefficients.

The planar system

    u' = a(t) - (b(t) + 1) u + u^2 v
    v' = b(t) u - u^2 v

is shifted to the reference point ``(a_bar, b_bar / a_bar)`` of the mean
coefficients and split as ``x' = J x + f(t, x) + g_nu(t, x)`` with ``J``
the constant linearization there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dichotomy import MatrixFunction
from .errors import DichotomyNotFound, PreconditionError
from .fields import Field, ParamField, forcing_field
from .fixed_point import (PerturbedProblem, SolveResult, residual, solve_perturbed,
                          stable_projection)
from .signals import GridFunction, Signal, TimeGrid, ergodic_mean, write_csv


def default_a() -> Signal:
    return Signal.constant(1.0) + Signal.trig(1.0, 0.0, 0.1) + Signal.slow("rational", 0.05)


def default_g() -> ParamField:
    """``g_nu(t, x) = nu (cos t, 0)``."""
    return ParamField.nu_times(forcing_field(Signal.trig(1.0, [1.0, 0.0], [0.0, 0.0])))


@dataclass(eq=False)
class BrusselatorSpec:
    a: Signal = field(default_factory=default_a)
    b: Signal = field(default_factory=lambda: Signal.constant(0.5))
    nu: float = 0.02
    g: ParamField = field(default_factory=default_g)
    r: float = 0.3
    mean_horizon: float = 2000.0

    def means(self) -> tuple[float, float]:
        am = float(ergodic_mean(self.a, self.mean_horizon, 0.01)[0])
        bm = float(ergodic_mean(self.b, self.mean_horizon, 0.01)[0])
        return am, bm


def reference_point(a_bar: float, b_bar: float) -> np.ndarray:
    return np.array([a_bar, b_bar / a_bar])


def linearization(a_bar: float, b_bar: float) -> np.ndarray:
    u, v = reference_point(a_bar, b_bar)
    return np.array([[-(b_bar + 1) + 2 * u * v, u * u],
                     [b_bar - 2 * u * v, -u * u]])


def brusselator_rhs(a: Signal, b: Signal):
    """Right-hand side in the original ``(u, v)`` coordinates."""
    def rhs(t, X):
        t = np.atleast_1d(t)
        U, V = X[:, 0], X[:, 1]
        at, bt = a(t)[:, 0], b(t)[:, 0]
        return np.stack([at - (bt + 1) * U + U * U * V, bt * U - U * U * V], axis=1)
    return rhs


def _nonlinearity(a: Signal, b: Signal, ref: np.ndarray, J: np.ndarray) -> Field:
    rhs = brusselator_rhs(a, b)

    def fn(t, x):
        return rhs(t, x + ref) - x @ J.T

    def jac(t, x):
        U, V = x[:, 0] + ref[0], x[:, 1] + ref[1]
        bt = b(t)[:, 0]
        out = np.empty((t.shape[0], 2, 2))
        out[:, 0, 0] = -(bt + 1) + 2 * U * V
        out[:, 0, 1] = U * U
        out[:, 1, 0] = bt - 2 * U * V
        out[:, 1, 1] = -U * U
        return out - J

    def hess(t, x):
        U, V = x[:, 0] + ref[0], x[:, 1] + ref[1]
        out = np.zeros((t.shape[0], 2, 2, 2))
        out[:, 0, 0, 0] = 2 * V
        out[:, 0, 0, 1] = out[:, 0, 1, 0] = 2 * U
        out[:, 1] = -out[:, 0]
        return out

    return Field(2, fn, jac, hess)


def build_brusselator(spec: BrusselatorSpec, grid: TimeGrid) -> PerturbedProblem:
    """Assemble the shifted problem; raises if coefficients are not positive
    or the linearization at the reference point is not hyperbolic."""
    t = grid.nodes
    if np.any(spec.a(t)[:, 0] <= 0) or np.any(spec.b(t)[:, 0] <= 0):
        raise PreconditionError("a(t) and b(t) must be positive on the grid")
    a_bar, b_bar = spec.means()
    ref = reference_point(a_bar, b_bar)
    J = linearization(a_bar, b_bar)
    lam = np.linalg.eigvals(J)
    if np.any(np.abs(lam.real) < 1e-10):
        raise DichotomyNotFound(f"linearization at the reference point is not hyperbolic: {lam}")
    prob = PerturbedProblem(MatrixFunction.constant(J), _nonlinearity(spec.a, spec.b, ref, J),
                            spec.g, spec.nu, spec.r, grid, projection=stable_projection(J))
    prob.reference = ref
    return prob


@dataclass(eq=False)
class DemoResult:
    """Solution with ``xi`` and ``psi`` shifted back to ``(u, v)`` coordinates."""

    result: SolveResult
    reference: np.ndarray
    xi: GridFunction
    psi: GridFunction
    files: dict

    @property
    def positive(self) -> bool:
        return bool(np.all(self.xi.values > 0) and np.all(self.psi.values > 0))


def run_demo(spec: BrusselatorSpec | None = None, grid: TimeGrid | None = None,
             out_dir: str | Path | None = None, tol: float = 1e-8, residual_tol: float = 1e-4,
             svg: bool = False, enforce_hypotheses: bool = False) -> DemoResult:
    """Solve the demo and optionally export ``brusselator.csv``, the JSON report and an SVG chart.

    Hypotheses are checked and reported; by default they do not gate the
    solve, so the report can record which inequalities fail.
    """
    spec = spec or BrusselatorSpec()
    grid = grid or TimeGrid.symmetric(30.0, 0.01)
    prob = build_brusselator(spec, grid)
    res = solve_perturbed(prob, tol=tol, enforce_hypotheses=enforce_hypotheses,
                          residual_tol=residual_tol)
    ref = prob.reference
    xi = GridFunction(grid, res.xi.values + ref)
    psi = GridFunction(grid, res.psi_nu.values + ref)
    # residual in the original coordinates, independent of the splitting
    g = spec.g
    rhs0 = brusselator_rhs(spec.a, spec.b)
    res.info["residual_original"] = residual(lambda t, X: rhs0(t, X) + g(t, X - ref, spec.nu), psi)
    files = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = np.column_stack([grid.nodes, xi.values, psi.values])
        write_csv(out / "brusselator.csv", ["t", "u_xi", "v_xi", "u", "v"], rows)
        files["csv"] = out / "brusselator.csv"
        report = {"schema_version": 1, "reference": ref.tolist(), "nu": spec.nu, "r": spec.r,
                  "positive": bool(np.all(psi.values > 0) and np.all(xi.values > 0)),
                  **res.to_report()}
        path = out / "brusselator_report.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        files["report"] = path
        if svg:
            files["svg"] = write_svg(out / "brusselator.svg", grid.nodes,
                                     {"u": psi.values[:, 0], "v": psi.values[:, 1]})
    return DemoResult(res, ref, xi, psi, files)


def write_svg(path, t, series: dict):
    """Static line chart of each series against ``t``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "rapsolve"
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for name, y in series.items():
        ax.plot(t, y, lw=1.0, label=name)
    ax.set_xlabel("t")
    ax.legend(loc="upper right")
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)
