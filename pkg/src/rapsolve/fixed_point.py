"""Contraction-mapping solvers for semilinear, perturbed, parameter-family and
delayed systems, with hypothesis checks and convergence certificates.

Every solver works on a padded copy of the requested output grid: the
convolution window of the Green kernel is added on both sides so that values
on the output nodes do not see the truncated ends. Results are cropped back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .dichotomy import (DichotomyData, GreenKernel, MatrixFunction, convolution_window,
                        convolve_nodes, estimate_dichotomy, integrate_fundamental,
                        roughness_apply, verify_dichotomy)
from .errors import (BallEscapeError, ConvergenceError, DichotomyNotFound, HypothesisError,
                     PreconditionError)
from .fields import Field, ParamField
from .signals import GridFunction, Signal, TimeGrid

_RATIO_SLACK = 1e-9


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


def stable_projection(M) -> np.ndarray:
    """Spectral projection of a constant matrix onto its stable eigenspace."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lam, V = np.linalg.eig(M)
    scale = max(1.0, float(np.max(np.abs(lam))))
    if np.any(np.abs(lam.real) <= 1e-10 * scale):
        raise DichotomyNotFound(f"eigenvalues on the imaginary axis: {lam}")
    D = np.diag((lam.real < 0).astype(float))
    return np.real(V @ D @ np.linalg.inv(V))


def _ball_points(n_vars: int, radius: float, n: int, seed: int, split: int | None = None) -> np.ndarray:
    """Quasi-random points of the closed ball plus axis extremes.

    With ``split`` the points fill the product of two balls of dimensions
    ``split`` and ``n_vars - split``.
    """
    if split is not None:
        a = _ball_points(split, radius, n, seed)
        b = _ball_points(n_vars - split, radius, n, seed + 7)
        m = min(a.shape[0], b.shape[0])
        b = np.roll(b[:m], 1, axis=0)
        blocks = [np.concatenate([a[:m], b], axis=1)]
        if split == n_vars - split:
            # aligned and opposite pairs reach the product's extreme points
            blocks += [np.concatenate([a, a], axis=1), np.concatenate([a, -a], axis=1)]
        return np.concatenate(blocks)
    sob = qmc.Sobol(n_vars, scramble=True, seed=seed).random(n)
    z = 2.0 * sob - 1.0
    z /= np.maximum(1.0, np.linalg.norm(z, axis=1))[:, None]
    axes = np.concatenate([np.eye(n_vars), -np.eye(n_vars)])
    return radius * np.concatenate([z, axes, np.zeros((1, n_vars))])


def _probe_times(grid: TimeGrid, n: int = 513) -> np.ndarray:
    idx = np.unique(np.linspace(0, grid.count - 1, min(n, grid.count)).round().astype(int))
    return grid.nodes[idx]


def _pairs(n_vars, radius, n, seed, split=None):
    pts = _ball_points(n_vars, radius, n, seed, split)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(pts.shape[0])
    x, y = pts, pts[perm]
    # add close pairs so local slopes are seen
    near = pts + 1e-3 * radius * (rng.random(pts.shape) - 0.5)
    if split is None:
        near /= np.maximum(1.0, np.linalg.norm(near, axis=1) / radius)[:, None]
    else:
        for sl in (slice(None, split), slice(split, None)):
            near[:, sl] /= np.maximum(1.0, np.linalg.norm(near[:, sl], axis=1) / radius)[:, None]
    return np.concatenate([x, x]), np.concatenate([y, near])


def _tiled_times(times, n):
    return np.resize(times, n)


def lipschitz_estimate(fn: Callable, n_vars: int, radius: float, times: np.ndarray,
                       centers: np.ndarray | None = None, jac: Callable | None = None,
                       probes: int = 1024, seed: int = 0, split: int | None = None) -> float:
    """Sampled Lipschitz modulus of ``x -> fn(t, x)`` on a ball.

    Difference quotients over quasi-random pairs, combined with the sampled
    sup of the Jacobian norm when ``jac`` is given. ``centers`` (one per
    time) shift the ball. With ``split`` the state is ``(x, z)`` and the
    distance is ``|x - x'| + |z - z'|``.
    """
    if radius <= 0:
        return 0.0
    x, y = _pairs(n_vars, radius, probes, seed, split)
    t = _tiled_times(times, x.shape[0])
    if centers is not None:
        c = np.resize(centers, (x.shape[0], n_vars)) if centers.ndim == 2 else centers
        cidx = np.resize(np.arange(times.shape[0]), x.shape[0])
        c = centers[cidx]
        x, y = x + c, y + c
    dv = np.linalg.norm(fn(t, x) - fn(t, y), axis=1)
    if split is None:
        dx = np.linalg.norm(x - y, axis=1)
    else:
        dx = np.linalg.norm(x[:, :split] - y[:, :split], axis=1) + \
            np.linalg.norm(x[:, split:] - y[:, split:], axis=1)
    ok = dx > 1e-12 * radius
    best = float(np.max(dv[ok] / dx[ok], initial=0.0))
    if jac is not None:
        J = jac(t, x)
        if split is None:
            best = max(best, float(np.max(np.linalg.norm(J, 2, axis=(1, 2)))))
        else:
            best = max(best, float(np.max(np.maximum(np.linalg.norm(J[:, :, :split], 2, axis=(1, 2)),
                                                     np.linalg.norm(J[:, :, split:], 2, axis=(1, 2))))))
    return best


def sup_estimate(fn: Callable, n_vars: int, radius: float, times: np.ndarray,
                 probes: int = 1024, seed: int = 0, split: int | None = None) -> float:
    pts = _ball_points(n_vars, radius, probes, seed, split)
    t = _tiled_times(times, pts.shape[0])
    vals = np.linalg.norm(fn(t, pts), axis=1)
    # every time against the origin as well
    vals0 = np.linalg.norm(fn(times, np.zeros((times.shape[0], n_vars))), axis=1)
    return float(max(vals.max(initial=0.0), vals0.max(initial=0.0)))


def _second_derivative_moduli(f: Field, xi_vals: np.ndarray, times: np.ndarray, r: float,
                              probes: int, seed: int) -> tuple[float, float]:
    """``N1``: sup of ``|d2f/dxi dxj|`` near ``xi``; ``N2``: its Lipschitz modulus."""
    n = f.n_vars
    x, y = _pairs(n, r, probes, seed + 1)
    cidx = np.resize(np.arange(times.shape[0]), x.shape[0])
    t = times[cidx]
    c = xi_vals[cidx]
    Hx = f.hessian(t, x + c)
    Hy = f.hessian(t, y + c)
    # entrywise vector norms over the output index -> (N, n, n)
    nx = np.linalg.norm(Hx, axis=1)
    N1 = float(np.max(nx, initial=0.0))
    dH = np.max(np.linalg.norm(Hx - Hy, axis=1), axis=(1, 2))
    dx = np.linalg.norm(x - y, axis=1)
    ok = dx > 1e-9 * r
    N2 = float(np.max(dH[ok] / dx[ok], initial=0.0))
    if N2 < 1e-6 * max(1.0, N1):
        N2 = 0.0
    return N1, N2


def contraction_constant(K: float, alpha: float, delta: float, Lstar: float) -> float:
    """``5 K^2 L* / (alpha - 2 K delta)``; ``inf`` unless ``delta < alpha / (4 K^2)``."""
    if not delta < alpha / (4 * K * K):
        return math.inf
    return 5 * K * K * Lstar / (alpha - 2 * K * delta)


def delay_nu0(r: float, K: float, alpha: float, g_sup: float, M1: float) -> tuple[float, float]:
    """The two branches ``(r alpha / (2 K |g|), alpha / (4 K M1))`` of the delay gate."""
    ball = math.inf if g_sup == 0 else r * alpha / (2 * K * g_sup)
    contraction = math.inf if M1 == 0 else alpha / (4 * K * M1)
    return ball, contraction


def taylor_remainder_f2(f: Field, xi, t, u) -> np.ndarray:
    """``f(t, u + xi(t)) - f(t, xi(t)) - Df(t, xi(t)) u`` by direct subtraction."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    u = np.asarray(u, dtype=float).reshape(t.shape[0], f.n_vars)
    xv = xi(t) if callable(xi) else np.asarray(xi, dtype=float)
    xv = np.broadcast_to(np.asarray(xv, dtype=float).reshape(-1, f.n_vars), u.shape)
    J = f.jacobian(t, xv)
    return f(t, u + xv) - f(t, xv) - np.einsum("nij,nj->ni", J, u)


def residual(rhs: Callable, y: GridFunction, lag: float | None = None) -> float:
    """Sup over interior nodes of ``|y'(t) - rhs(t, y(t))|`` with centered differences.

    For delay systems ``rhs(t, y, y_delayed)``; nodes whose delayed time
    falls before the grid start are skipped.
    """
    if y.grid.count < 3:
        raise ValueError("residual needs a grid of at least 3 nodes")
    dt = y.grid.dt
    t = y.t[1:-1]
    dy = (y.values[2:] - y.values[:-2]) / (2.0 * dt)
    x = y.values[1:-1]
    if lag is None:
        r = dy - np.asarray(rhs(t, x), dtype=float).reshape(x.shape)
    else:
        keep = t - lag >= y.grid.t_start - 1e-12
        if not np.any(keep):
            raise ValueError("no interior node has its delayed time inside the grid")
        t, x, dy = t[keep], x[keep], dy[keep]
        r = dy - np.asarray(rhs(t, x, y(t - lag)), dtype=float).reshape(x.shape)
    return float(np.max(np.linalg.norm(r, axis=1)))


def _delayed(values: np.ndarray, grid: TimeGrid, lag: float) -> np.ndarray:
    """Values at ``t - lag`` on the nodes; linear interpolation, constant before the start."""
    shift = lag / grid.dt
    k = int(math.floor(shift + 1e-9))
    w = shift - k
    if abs(w) < 1e-9:
        w = 0.0
    N = values.shape[0]
    idx = np.arange(N) - k
    lo = np.clip(idx, 0, N - 1)
    out = values[lo]
    if w > 0:
        lo2 = np.clip(idx - 1, 0, N - 1)
        out = (1 - w) * out + w * values[lo2]
    return out


# ----------------------------------------------------------------------------
# Picard iteration
# ----------------------------------------------------------------------------


@dataclass
class _PicardTrace:
    phi: np.ndarray
    norms: list
    iterates_sup: list


def _picard(T: Callable[[np.ndarray], np.ndarray], phi0: np.ndarray, tol: float, max_iter: int,
            ball: float | None = None) -> _PicardTrace:
    phi = phi0
    norms, sups = [], []
    bad = 0
    for _ in range(max_iter):
        new = T(phi)
        diff = float(np.max(np.linalg.norm(new - phi, axis=1)))
        sup = float(np.max(np.linalg.norm(new, axis=1)))
        norms.append(diff)
        sups.append(sup)
        if not np.isfinite(diff):
            raise ConvergenceError("iterate became non-finite", norms)
        if ball is not None and sup > ball * (1 + 1e-9):
            raise BallEscapeError(
                f"iterate left the ball: sup = {sup:.6g} > r = {ball:.6g} (r too small or nu too large)",
                norms)
        phi = new
        if diff < tol:
            return _PicardTrace(phi, norms, sups)
        if len(norms) >= 2 and norms[-1] >= norms[-2] * (1 - _RATIO_SLACK):
            bad += 1
            if bad >= 3:
                raise ConvergenceError(
                    f"successive-difference ratio >= 1 for 3 iterations (last {norms[-1] / norms[-2]:.4g})",
                    norms)
        else:
            bad = 0
    ratio = norms[-1] / norms[-2] if len(norms) > 1 and norms[-2] > 0 else float("nan")
    raise ConvergenceError(f"no convergence in {max_iter} iterations (last ratio {ratio:.4g})", norms)


def _ratios(norms) -> list:
    return [b / a for a, b in zip(norms[:-1], norms[1:]) if a > 0]


# ----------------------------------------------------------------------------
# problems and reports
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class PerturbedProblem:
    """``x' = A(t) x + f(t, x) + g(t, x, nu)`` with dichotomy data for ``A``.

    ``overrides`` may hold analytic values for ``M``, ``M1``, ``N1``,
    ``N2`` or ``g_sup`` that replace the sampled estimates.
    """

    A: MatrixFunction
    f: Field
    g: ParamField
    nu: float
    r: float
    grid: TimeGrid
    dichotomy: DichotomyData | None = None
    projection: np.ndarray | None = None
    overrides: dict = field(default_factory=dict)
    probes: int = 1024
    seed: int = 0
    tail_tol: float = 1e-10
    verify_pairs: int = 256

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("r must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")
        d = self.A.dimension
        if self.f.dimension != d or self.g.dimension != d:
            raise ValueError("A, f and g have inconsistent dimensions")

    @property
    def dimension(self) -> int:
        return self.A.dimension

    def rhs(self, t, x):
        return np.einsum("nij,nj->ni", self.A(t), x) + self.f(t, x) + self.g(t, x, self.nu)

    def resolve_dichotomy(self, grid: TimeGrid | None = None) -> DichotomyData:
        if self.dichotomy is not None:
            return self.dichotomy
        P = self.projection
        if P is None:
            P = stable_projection(np.mean(self.A(self.grid.nodes), axis=0))
        span = grid or self.grid.padded(0.5 * (self.grid.t_end - self.grid.t_start) + 10.0)
        fit = estimate_dichotomy(integrate_fundamental(self.A, span), P)
        self.dichotomy = fit.data
        return fit.data


@dataclass(frozen=True)
class Check:
    lhs: float
    rhs: float
    passed: bool
    relation: str = "<"

    def to_dict(self) -> dict:
        return {"lhs": _num(self.lhs), "rhs": _num(self.rhs), "relation": self.relation,
                "passed": bool(self.passed)}


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


def _lt(lhs, rhs, relation="<") -> Check:
    ok = lhs < rhs if relation == "<" else lhs <= rhs
    return Check(float(lhs), float(rhs), bool(ok), relation)


@dataclass(eq=False)
class HypothesisReport:
    """Sampled moduli, derived constants and per-hypothesis checks.

    ``contraction_q`` is ``5 K^2 L* / (alpha - 2 K delta)`` (``inf`` when
    ``delta >= alpha / (4 K^2)``); ``contraction_q_refit`` uses the
    numerically fitted dichotomy ``(K~, alpha~)`` of the variational
    system, ``2 K~ L* / alpha~``.
    """

    K: float
    alpha: float
    r: float
    r_tilde: float
    M_r: float
    delta: float
    N1: float
    N2: float
    M1: float
    g_norm: float
    Lstar: float
    contraction_q: float
    contraction_q_refit: float
    nu: float
    nu0: float = float("nan")
    nu0_refit: float = float("nan")
    K_refit: float = float("nan")
    alpha_refit: float = float("nan")
    checks: dict = field(default_factory=dict)

    @property
    def delta_valid(self) -> bool:
        return self.delta < self.alpha / (4 * self.K ** 2)

    def flag(self, name: str) -> bool:
        c = self.checks.get(name)
        return bool(c and c.passed)

    @property
    def all_pass(self) -> bool:
        return all(self.flag(n) for n in ("H1", "H2", "H3", "H4", "ball", "contraction"))

    @property
    def solvable(self) -> bool:
        base = self.flag("H1") and self.flag("H2") and self.flag("H4")
        rough = self.flag("H3") and self.flag("ball") and self.flag("contraction")
        refit = self.flag("refit_ball") and self.flag("refit_contraction")
        return base and (rough or refit)

    def failures(self) -> list[str]:
        return [n for n, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict:
        out = {k: _num(getattr(self, k)) for k in (
            "K", "alpha", "r", "r_tilde", "M_r", "delta", "N1", "N2", "M1", "g_norm", "Lstar",
            "contraction_q", "contraction_q_refit", "nu", "nu0", "nu0_refit", "K_refit",
            "alpha_refit")}
        out["checks"] = {k: c.to_dict() for k, c in self.checks.items()}
        out["all_pass"] = self.all_pass
        out["solvable"] = self.solvable
        return out


@dataclass(eq=False)
class SolveResult:
    xi: GridFunction
    psi_nu: GridFunction
    iterate_norms: list
    residual_sup: float
    hypothesis: object
    residual_tol: float = 1e-4
    xi_iterate_norms: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def phi(self) -> GridFunction:
        return self.psi_nu - self.xi

    @property
    def ratios(self) -> list:
        return _ratios(self.iterate_norms)

    @property
    def residual_ok(self) -> bool:
        return self.residual_sup <= self.residual_tol

    def to_report(self) -> dict:
        hyp = self.hypothesis.to_dict() if hasattr(self.hypothesis, "to_dict") else self.hypothesis
        return {"iterate_norms": list(map(float, self.iterate_norms)),
                "ratios": list(map(float, self.ratios)),
                "xi_iterate_norms": list(map(float, self.xi_iterate_norms)),
                "residual_sup": float(self.residual_sup), "residual_tol": self.residual_tol,
                "residual_ok": self.residual_ok,
                "sup_psi_minus_xi": float(self.phi.sup_norm()),
                "hypothesis": hyp, "info": self.info}


# ----------------------------------------------------------------------------
# semilinear solve
# ----------------------------------------------------------------------------


def _working_grid(grid: TimeGrid, K: float, alpha: float, h_bound: float, tail_tol: float,
                  extra: float = 0.0) -> TimeGrid:
    L = convolution_window(2.5 * K * K, 0.5 * alpha, max(1.0, h_bound), tail_tol)
    return grid.padded(L + extra)


def _semilinear_values(kernel: GreenKernel, f: Field, tol: float, max_iter: int,
                       phi0: np.ndarray | None = None) -> _PicardTrace:
    t = kernel.grid.nodes
    d = kernel.dimension
    phi0 = np.zeros((t.shape[0], d)) if phi0 is None else phi0
    return _picard(lambda phi: convolve_nodes(kernel, f(t, phi)), phi0, tol, max_iter)


def solve_semilinear(A: MatrixFunction, dichotomy: DichotomyData, f: Field, r: float,
                     grid: TimeGrid, tol: float = 1e-8, tail_tol: float = 1e-10,
                     max_iter: int = 200, M: float | None = None, probes: int = 1024,
                     seed: int = 0) -> GridFunction:
    """Bounded solution ``xi`` of ``x' = A(t) x + f(t, x)`` by Picard iteration.

    Requires ``2 K M(r) / alpha < 1`` with ``M(r)`` the (sampled or given)
    Lipschitz modulus of ``f`` on ``B[0, r]``.
    """
    xi, _, _ = _semilinear_full(A, dichotomy, f, r, grid, tol, tail_tol, max_iter, M, probes, seed)
    return xi


def _semilinear_full(A, dichotomy, f, r, grid, tol, tail_tol, max_iter, M, probes, seed,
                     extra_pad=0.0):
    K, alpha = dichotomy.K, dichotomy.alpha
    times = _probe_times(grid)
    if M is None:
        M = lipschitz_estimate(f, f.n_vars, r, times, jac=f.jacobian, probes=probes, seed=seed)
    q = 2 * K * M / alpha
    if not q < 1:
        raise HypothesisError(f"2 K M(r) / alpha = {q:.6g} is not < 1 (M(r) = {M:.6g})",
                              {"lhs": q, "rhs": 1.0, "M_r": M})
    f_sup = sup_estimate(f, f.n_vars, r, times, probes, seed)
    work = _working_grid(grid, K, alpha, f_sup, tail_tol, extra_pad)
    kernel = GreenKernel(integrate_fundamental(A, work), dichotomy)
    trace = _semilinear_values(kernel, f, tol, max_iter)
    full = GridFunction(work, trace.phi)
    return full.restrict(grid), full, (kernel, trace.norms, M)


# ----------------------------------------------------------------------------
# perturbed solve
# ----------------------------------------------------------------------------


class _Prepared:
    """Everything a perturbed solve needs after ``xi`` is known."""

    def __init__(self, problem: PerturbedProblem, tol: float, max_iter: int,
                 A0: MatrixFunction | None = None, extra_lip: float = 0.0, extra_pad: float = 0.0,
                 force_xi: bool = False):
        p = problem
        self.problem = p
        A_base = p.A if A0 is None else A0
        dich = p.resolve_dichotomy()
        self.dich = dich
        K, alpha = dich.K, dich.alpha
        times = _probe_times(p.grid)
        self.times = times
        ov = p.overrides
        M = ov.get("M")
        if M is None:
            M = lipschitz_estimate(p.f, p.f.n_vars, p.r, times, jac=p.f.jacobian,
                                   probes=p.probes, seed=p.seed)
        self.M = M
        f_sup = sup_estimate(p.f, p.f.n_vars, p.r, times, p.probes, p.seed)
        g_probe = sup_estimate(lambda t, x: p.g(t, x, p.nu), p.g.n_vars, p.r, times, p.probes, p.seed)
        work = _working_grid(p.grid, K, alpha, max(f_sup, g_probe), p.tail_tol, extra_pad)
        self.work = work
        fund = integrate_fundamental(A_base, work)
        self.kernel_A = GreenKernel(fund, dich)
        if 2 * K * M / alpha < 1 or force_xi:
            trace = _semilinear_values(self.kernel_A, p.f, tol, max_iter)
            xi_vals, self.xi_norms = trace.phi, trace.norms
        else:
            xi_vals, self.xi_norms = None, []
        self.xi_vals = xi_vals
        self.extra_lip = extra_lip

    def xi_function(self) -> GridFunction:
        return GridFunction(self.work, self.xi_vals)


def _variational_kernel(prep: _Prepared, A_base: MatrixFunction, delta_valid: bool):
    p = prep.problem
    xi = prep.xi_function()
    f = p.f
    A_t = MatrixFunction(p.dimension, lambda t: A_base(t) + f.jacobian(t, xi(t)))
    fund = integrate_fundamental(A_t, prep.work)
    if delta_valid:
        data = roughness_apply(prep.dich, prep.delta)
    else:
        data = None
    try:
        fit = estimate_dichotomy(fund, prep.dich.P)
        refit = fit.data
    except DichotomyNotFound:
        refit = None
    if data is None and refit is None:
        raise DichotomyNotFound("the variational system shows no exponential dichotomy")
    kernel = GreenKernel(fund, data if data is not None else refit)
    return A_t, kernel, data, refit


def _moduli_report(prep: _Prepared, A_base: MatrixFunction, nu: float) -> tuple:
    """Compute delta, N1, N2, M1, g_norm, kernels; return (report, kernel_tilde)."""
    p = prep.problem
    dich = prep.dich
    K, alpha = dich.K, dich.alpha
    ov = p.overrides
    n = p.dimension
    xi_vals = prep.xi_vals
    crop = prep.work.subgrid_offset(p.grid)
    xi_out = xi_vals[crop:crop + p.grid.count]
    xi_sup = float(np.max(np.linalg.norm(xi_out, axis=1)))
    r_t = p.r + xi_sup
    J = p.f.jacobian(prep.work.nodes, xi_vals)[crop:crop + p.grid.count]
    delta = float(np.max(np.linalg.norm(J, 2, axis=(1, 2))))
    prep.delta = delta
    times = prep.times
    tidx = np.searchsorted(p.grid.nodes, times).clip(0, p.grid.count - 1)
    centers = xi_out[tidx]
    N1, N2 = _second_derivative_moduli(p.f, centers, times, p.r, p.probes, p.seed)
    N1 = ov.get("N1", N1)
    N2 = ov.get("N2", N2)

    def g_mods(nu_):
        gf = lambda t, x: p.g(t, x, nu_)
        M1 = ov.get("M1")
        if M1 is None:
            jac = None if p.g.jac is None else (lambda t, x: p.g.jac(t, x, nu_))
            M1 = lipschitz_estimate(gf, n, r_t, times, jac=jac, probes=p.probes, seed=p.seed)
        gs = ov.get("g_sup")
        if gs is None:
            gs = sup_estimate(gf, n, r_t, times, p.probes, p.seed)
        return M1, gs

    M1, g_norm = g_mods(nu)
    Lf2 = n * p.r * N1 + n * p.r ** 2 * N2
    Lstar = Lf2 + M1 + prep.extra_lip
    delta_valid = delta < alpha / (4 * K ** 2)
    denom = alpha - 2 * K * delta
    q = contraction_constant(K, alpha, delta, Lstar)

    A_t, kernel_t, rough, refit = _variational_kernel(prep, A_base, delta_valid)
    Kr, ar = (refit.K, refit.alpha) if refit is not None else (math.nan, math.nan)
    q_refit = 2 * Kr * Lstar / ar if refit is not None else math.inf

    def rough_ok(nu_):
        M1_, gs_ = g_mods(nu_)
        L_ = Lf2 + M1_ + prep.extra_lip
        if not delta_valid:
            return False
        return (p.r ** 2 * N1 + gs_ < denom * p.r / (5 * K ** 2)) and (5 * K ** 2 * L_ / denom < 1)

    def refit_ok(nu_):
        if refit is None:
            return False
        M1_, gs_ = g_mods(nu_)
        L_ = Lf2 + M1_ + prep.extra_lip
        return (2 * Kr / ar * (n * p.r ** 2 * N1 + gs_) <= p.r) and (2 * Kr * L_ / ar < 1)

    rep = HypothesisReport(K=K, alpha=alpha, r=p.r, r_tilde=r_t, M_r=prep.M, delta=delta, N1=N1,
                           N2=N2, M1=M1, g_norm=g_norm, Lstar=Lstar, contraction_q=q,
                           contraction_q_refit=q_refit, nu=nu, K_refit=Kr, alpha_refit=ar)
    ver = verify_dichotomy(prep.kernel_A, p.verify_pairs, seed=p.seed)
    checks = {
        "H1": Check(ver.worst_ratio, 1.0, ver.worst_ratio <= 1.0 + 1e-9, "<="),
        "H2": _lt(prep.M, alpha / (2 * K)),
        "H3": _lt(delta, alpha / (4 * K ** 2)),
    }
    g0 = sup_estimate(lambda t, x: p.g(t, x, 0.0), n, r_t, times, p.probes, p.seed)
    checks["H4"] = Check(g0, 0.0, g0 <= 1e-14, "==")
    checks["ball"] = _lt(p.r ** 2 * N1 + g_norm, denom * p.r / (5 * K ** 2) if delta_valid else -math.inf)
    checks["contraction"] = _lt(q, 1.0)
    if rough is not None:
        vr = verify_dichotomy(kernel_t, p.verify_pairs, seed=p.seed)
        checks["H1_perturbed"] = Check(vr.worst_ratio, 1.0, vr.worst_ratio <= 1.0 + 1e-9, "<=")
    if refit is not None:
        checks["refit_ball"] = _lt(2 * Kr / ar * (n * p.r ** 2 * N1 + g_norm), p.r, "<=")
        checks["refit_contraction"] = _lt(q_refit, 1.0)
    rep.checks = checks
    rep.nu0 = _largest_nu(rough_ok, nu)
    rep.nu0_refit = _largest_nu(refit_ok, nu)
    return rep, kernel_t, A_t


def _largest_nu(ok: Callable[[float], bool], nu_hint: float) -> float:
    """Largest nu with ``ok(nu)`` by doubling then bisection (0 if ``ok(0)`` fails)."""
    if not ok(0.0):
        return 0.0
    lo = 0.0
    hi = max(nu_hint, 1e-3)
    for _ in range(40):
        if not ok(hi):
            break
        lo, hi = hi, 2 * hi
    else:
        return math.inf
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def check_hypotheses(problem: PerturbedProblem, dichotomy: DichotomyData | None = None,
                     xi: GridFunction | None = None, tol: float = 1e-8,
                     max_iter: int = 200) -> HypothesisReport:
    """Estimate the moduli and test H1-H4, the ball bound and the contraction."""
    if dichotomy is not None:
        problem.dichotomy = dichotomy
    prep = _Prepared(problem, tol, max_iter)
    if prep.xi_vals is None:
        if xi is None:
            raise HypothesisError("2 K M(r) / alpha >= 1: the semilinear system is not contractive")
        prep.xi_vals = xi(prep.work.nodes.clip(xi.grid.t_start, xi.grid.t_end))
    rep, _, _ = _moduli_report(prep, problem.A, problem.nu)
    return rep


def _h2_failure(prep):
    K, alpha = prep.dich.K, prep.dich.alpha
    rep = {"checks": {"H2": _lt(prep.M, alpha / (2 * K)).to_dict()}, "M_r": prep.M}
    return HypothesisError(
        f"H2 fails: M(r) = {prep.M:.6g} is not < alpha/(2K) = {alpha / (2 * K):.6g}", rep)


def _solve_core(problem: PerturbedProblem, tol: float, max_iter: int, enforce: bool,
                residual_tol: float, phi0: float | np.ndarray | None, A_nu: MatrixFunction | None,
                extra_lip: float = 0.0) -> SolveResult:
    p = problem
    # without enforcement xi is attempted even when the a priori contraction fails
    prep = _Prepared(p, tol, max_iter, extra_lip=extra_lip, force_xi=not enforce)
    if prep.xi_vals is None:
        raise _h2_failure(prep)
    rep, kernel_t, A_t = _moduli_report(prep, p.A, p.nu)
    if enforce and not rep.solvable:
        raise HypothesisError("hypotheses fail: " + ", ".join(rep.failures()), rep)
    work = prep.work
    t = work.nodes
    xi_vals = prep.xi_vals
    d = p.dimension
    J = p.f.jacobian(t, xi_vals)
    f_xi = p.f(t, xi_vals)
    g_nu = p.g
    nu = p.nu
    dA = None if A_nu is None else A_nu(t) - p.A(t)

    def H(u):
        out = p.f(t, u + xi_vals) - f_xi - np.einsum("nij,nj->ni", J, u) + g_nu(t, u + xi_vals, nu)
        if dA is not None:
            out += np.einsum("nij,nj->ni", dA, u + xi_vals)
        return out

    start = np.zeros((t.shape[0], d))
    if phi0 is not None:
        start = start + np.asarray(phi0, dtype=float)
    trace = _picard(lambda u: convolve_nodes(kernel_t, H(u)), start, tol, max_iter, p.r)
    off = work.subgrid_offset(p.grid)
    xi = GridFunction(p.grid, xi_vals[off:off + p.grid.count])
    psi = GridFunction(p.grid, xi_vals[off:off + p.grid.count] + trace.phi[off:off + p.grid.count])
    A_full = p.A if A_nu is None else A_nu

    def rhs(tt, x):
        return np.einsum("nij,nj->ni", A_full(tt), x) + p.f(tt, x) + p.g(tt, x, nu)

    res = residual(rhs, psi)
    info = {"work_grid": work.to_dict(), "projection_mismatch": kernel_t.projection_mismatch,
            "observed_q": max(_ratios(trace.norms), default=0.0),
            "kernel_K": kernel_t.dichotomy.K, "kernel_alpha": kernel_t.dichotomy.alpha}
    return SolveResult(xi, psi, trace.norms, res, rep, residual_tol, prep.xi_norms, info)


def solve_perturbed(problem: PerturbedProblem, tol: float = 1e-8, max_iter: int = 200,
                    enforce_hypotheses: bool = True, residual_tol: float = 1e-4,
                    phi0=None) -> SolveResult:
    """Solution ``psi_nu`` near ``xi`` of ``x' = A x + f(t, x) + g(t, x, nu)``.

    Pipeline: ``xi`` from the semilinear system, variational matrix
    ``A + Df(t, xi)``, its Green kernel (roughness constants plus a numerical
    re-fit), then Picard iteration on ``u = x - xi`` from ``phi0`` (zero by
    default).
    """
    return _solve_core(problem, tol, max_iter, enforce_hypotheses, residual_tol, phi0, None)


def solve_family(problem: PerturbedProblem, A_family: Callable[[float], MatrixFunction],
                 tol: float = 1e-8, max_iter: int = 200, enforce_hypotheses: bool = True,
                 residual_tol: float = 1e-4, phi0=None) -> SolveResult:
    """Like :func:`solve_perturbed` with ``A_nu = A_family(nu)`` and ``A_0 = problem.A``.

    The Picard map carries the extra term ``(A_nu - A_0)(y + xi)`` and the
    Lipschitz constant grows by ``sup |A_nu - A_0|``.
    """
    t = problem.grid.nodes
    A0 = problem.A
    gaps = []
    for s in (1.0, 0.5, 0.25):
        gaps.append(float(np.max(np.linalg.norm(A_family(problem.nu * s)(t) - A0(t), 2, axis=(1, 2)))))
    if not all(np.isfinite(gaps)):
        raise PreconditionError("sup |A_nu - A_0| is not finite")
    if gaps[0] > 0 and not (gaps[2] <= gaps[1] <= gaps[0]):
        raise PreconditionError(f"A_nu does not approach A_0 as nu -> 0 (sampled gaps {gaps})")
    res = _solve_core(problem, tol, max_iter, enforce_hypotheses, residual_tol, phi0,
                      A_family(problem.nu), extra_lip=gaps[0])
    res.info["A_gap"] = gaps[0]
    return res


def nu_limit_bound(problem: PerturbedProblem, xi: GridFunction, psi_nu: GridFunction,
                   report: HypothesisReport | None = None) -> tuple[float, float]:
    """``(bound, observed)`` with bound ``(1 - 2KM/alpha)^-1 (2K/alpha) |g_nu|`` on ``B[0, r~]``."""
    if report is None:
        report = check_hypotheses(problem)
    K, alpha = report.K, report.alpha
    observed = (psi_nu - xi).sup_norm()
    if report.g_norm == 0.0:
        return 0.0, observed
    q = 2 * K * report.M_r / alpha
    bound = math.inf if q >= 1 else (2 * K / alpha) * report.g_norm / (1 - q)
    return bound, observed


# ----------------------------------------------------------------------------
# delayed systems
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class DelayReport:
    K: float
    alpha: float
    r: float
    r_tilde: float
    nu: float
    g_sup: float
    M1: float
    nu0_ball: float
    nu0_contraction: float
    Lf2: float = 0.0
    checks: dict = field(default_factory=dict)

    @property
    def nu0(self) -> float:
        return min(self.nu0_ball, self.nu0_contraction)

    @property
    def binding(self) -> str:
        return "ball" if self.nu0_ball <= self.nu0_contraction else "contraction"

    @property
    def contraction_q(self) -> float:
        return self.nu * 4 * self.K * self.M1 / self.alpha + 2 * self.K * self.Lf2 / self.alpha

    @property
    def accepted(self) -> bool:
        return self.nu <= self.nu0

    @property
    def all_pass(self) -> bool:
        return self.accepted and all(c.passed for c in self.checks.values())

    def to_dict(self) -> dict:
        out = {k: _num(getattr(self, k)) for k in (
            "K", "alpha", "r", "r_tilde", "nu", "g_sup", "M1", "nu0_ball", "nu0_contraction",
            "nu0", "Lf2", "contraction_q")}
        out["binding"] = self.binding
        out["accepted"] = self.accepted
        out["checks"] = {k: c.to_dict() for k, c in self.checks.items()}
        out["all_pass"] = self.all_pass
        return out


def _delay_report(K, alpha, r, r_t, nu, g: Field, times, M1, g_sup, probes, seed, Lf2=0.0):
    d = g.dimension
    if g.n_vars != 2 * d:
        raise ValueError("delayed map must take (t, x, x_delayed) stacked as 2d state variables")
    if g_sup is None:
        g_sup = sup_estimate(g, 2 * d, r_t, times, probes, seed, split=d)
    if M1 is None:
        M1 = lipschitz_estimate(g, 2 * d, r_t, times, jac=g.jacobian, probes=probes,
                                seed=seed, split=d)
    b1, b2 = delay_nu0(r, K, alpha, g_sup, M1)
    rep = DelayReport(K, alpha, r, r_t, nu, g_sup, M1, b1, b2, Lf2)
    rep.checks["nu0"] = Check(nu, rep.nu0, nu <= rep.nu0, "<=")
    return rep


def _delay_picard(kernel: GreenKernel, work: TimeGrid, xi_vals, g: Field, lag, nu, base: Callable,
                  tol, max_iter, ball, phi0=None):
    t = work.nodes
    d = kernel.dimension

    def T(u):
        x = u + xi_vals
        z = _delayed(x, work, lag)
        return convolve_nodes(kernel, base(u) + nu * g(t, np.concatenate([x, z], axis=1)))

    start = np.zeros((t.shape[0], d)) if phi0 is None else np.zeros((t.shape[0], d)) + phi0
    return _picard(T, start, tol, max_iter, ball)


def solve_delay(A: MatrixFunction, dichotomy: DichotomyData, h: Signal, g: Field, lag: float,
                nu: float, r: float, grid: TimeGrid, tol: float = 1e-8, max_iter: int = 200,
                tail_tol: float = 1e-10, M1: float | None = None, g_sup: float | None = None,
                enforce_hypotheses: bool = True, residual_tol: float = 1e-4, probes: int = 1024,
                seed: int = 0) -> SolveResult:
    """Solve ``y' = A y + h(t) + nu g(t, y(t), y(t - lag))`` near ``xi``.

    ``g`` takes the stacked state ``(y, y_delayed)``. The gate is
    ``nu <= nu0 = min(r alpha / (2 K |g|), alpha / (4 K M1))`` with both
    quantities sampled on ``B[0, r~]`` where ``r~ = r + |xi|``.
    """
    if not lag > 0:
        raise ValueError("lag must be positive")
    K, alpha = dichotomy.K, dichotomy.alpha
    times = _probe_times(grid)
    work = _working_grid(grid, K, alpha, max(h.sup_bound(), 1.0), tail_tol, extra=lag)
    kernel = GreenKernel(integrate_fundamental(A, work), dichotomy)
    xi_vals = convolve_nodes(kernel, h(work.nodes))
    off = work.subgrid_offset(grid)
    xi_sup = float(np.max(np.linalg.norm(xi_vals[off:off + grid.count], axis=1)))
    rep = _delay_report(K, alpha, r, r + xi_sup, nu, g, times, M1, g_sup, probes, seed)
    if enforce_hypotheses and not rep.accepted:
        raise HypothesisError(
            f"nu = {nu:.6g} exceeds nu0 = {rep.nu0:.6g} (binding branch: {rep.binding}; "
            f"r alpha/(2K|g|) = {rep.nu0_ball:.6g}, alpha/(4K M1) = {rep.nu0_contraction:.6g})", rep)
    trace = _delay_picard(kernel, work, xi_vals, g, lag, nu, lambda u: 0.0, tol, max_iter, r)
    xi = GridFunction(grid, xi_vals[off:off + grid.count])
    psi = GridFunction(grid, xi.values + trace.phi[off:off + grid.count])

    def rhs(tt, x, z):
        return np.einsum("nij,nj->ni", A(tt), x) + h(tt) + nu * g(tt, np.concatenate([x, z], axis=1))

    res = residual(rhs, psi, lag)
    info = {"work_grid": work.to_dict(), "observed_q": max(_ratios(trace.norms), default=0.0)}
    return SolveResult(xi, psi, trace.norms, res, rep, residual_tol, [], info)


def solve_nonlinear_delay(f: Field, g: Field, lag: float, nu: float, r: float, grid: TimeGrid,
                          tol: float = 1e-8, max_iter: int = 200, tail_tol: float = 1e-10,
                          projection=None, variational: DichotomyData | None = None,
                          M1: float | None = None, g_sup: float | None = None,
                          enforce_hypotheses: bool = True, residual_tol: float = 1e-4,
                          probes: int = 1024, seed: int = 0) -> SolveResult:
    """Solve ``y' = f(t, y) + nu g(t, y(t), y(t - lag))`` near the bounded solution of ``z' = f(t, z)``.

    ``xi`` is found by splitting ``f`` at its linearization around zero; the
    Picard map then uses the Green kernel of ``z' = Df(t, xi(t)) z`` (given
    as ``variational`` or fitted) with ``f2 + nu g`` as the nonlinearity.
    """
    if not lag > 0:
        raise ValueError("lag must be positive")
    d = f.dimension
    times = _probe_times(grid)
    A0 = MatrixFunction(d, lambda t: f.jacobian(t, np.zeros((t.shape[0], d))))
    P0 = stable_projection(np.mean(A0(grid.nodes), axis=0)) if projection is None else projection
    probe_grid = grid.padded(0.5 * (grid.t_end - grid.t_start) + 10.0)
    dich0 = estimate_dichotomy(integrate_fundamental(A0, probe_grid), P0).data
    fhat = Field(d, lambda t, x: f(t, x) - np.einsum("nij,nj->ni", A0(t), x),
                 lambda t, x: f.jacobian(t, x) - A0(t), f.hessian if f.hess is not None else None)
    K0, a0 = dich0.K, dich0.alpha
    K_guess = variational.K if variational is not None else K0
    a_guess = variational.alpha if variational is not None else a0
    work = _working_grid(grid, max(K0, K_guess), min(a0, a_guess), 1.0, tail_tol, extra=lag)
    kernel0 = GreenKernel(integrate_fundamental(A0, work), dich0)
    M = lipschitz_estimate(fhat, d, r, times, jac=fhat.jacobian, probes=probes, seed=seed)
    if 2 * K0 * M / a0 >= 1:
        raise HypothesisError(f"linearization split is not contractive: 2 K M / alpha = {2 * K0 * M / a0:.6g}")
    xi_trace = _semilinear_values(kernel0, fhat, tol, max_iter)
    xi_vals = xi_trace.phi
    xi_fun = GridFunction(work, xi_vals)
    A_t = MatrixFunction(d, lambda t: f.jacobian(t, xi_fun(t)))
    fund_t = integrate_fundamental(A_t, work)
    if variational is None:
        Pv = P0 if projection is None else projection
        variational = estimate_dichotomy(fund_t, Pv).data
    kernel = GreenKernel(fund_t, variational)
    off = work.subgrid_offset(grid)
    xi_out = xi_vals[off:off + grid.count]
    xi_sup = float(np.max(np.linalg.norm(xi_out, axis=1)))
    tidx = np.searchsorted(grid.nodes, times).clip(0, grid.count - 1)
    N1, N2 = _second_derivative_moduli(f, xi_out[tidx], times, r, probes, seed)
    Lf2 = d * r * N1 + d * r * r * N2
    rep = _delay_report(variational.K, variational.alpha, r, r + xi_sup, nu, g, times, M1, g_sup,
                        probes, seed, Lf2)
    rep.checks["contraction"] = _lt(rep.contraction_q, 1.0)
    if enforce_hypotheses and not rep.all_pass:
        raise HypothesisError(
            f"nonlinear delay hypotheses fail: {[k for k, c in rep.checks.items() if not c.passed]} "
            f"(nu0 = {rep.nu0:.6g}, binding branch: {rep.binding})", rep)
    t = work.nodes
    J = f.jacobian(t, xi_vals)
    f_xi = f(t, xi_vals)

    def f2(u):
        return f(t, u + xi_vals) - f_xi - np.einsum("nij,nj->ni", J, u)

    trace = _delay_picard(kernel, work, xi_vals, g, lag, nu, f2, tol, max_iter, r)
    xi = GridFunction(grid, xi_out)
    psi = GridFunction(grid, xi_out + trace.phi[off:off + grid.count])

    def rhs(tt, x, z):
        return f(tt, x) + nu * g(tt, np.concatenate([x, z], axis=1))

    res = residual(rhs, psi, lag)
    info = {"work_grid": work.to_dict(), "observed_q": max(_ratios(trace.norms), default=0.0),
            "variational": variational.to_dict(), "N1": N1, "N2": N2}
    return SolveResult(xi, psi, trace.norms, res, rep, residual_tol, xi_trace.norms, info)
