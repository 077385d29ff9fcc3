"""Averaging for ``x' = nu f(t, x, nu)``: time averages, exponential smoothing,
mollified near-identity changes of variables and the reduced fixed-point solve.

Fields here are :class:`rapsolve.fields.ParamField` objects evaluated as
``f(t, x, nu)`` with ``t`` of shape ``(N,)`` and ``x`` of shape ``(N, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, signal
from scipy.ndimage import map_coordinates
from scipy.special import roots_legendre

from .dichotomy import (GreenKernel, MatrixFunction, convolution_window, convolve_nodes,
                        estimate_dichotomy, integrate_fundamental)
from .errors import ConditioningError, ConvergenceError, DomainError, PreconditionError
from .fields import ParamField
from .fixed_point import SolveResult, _picard, residual, stable_projection
from .signals import GridFunction, TimeGrid, trapezoid_mean

_PANEL = 0.5
_PANEL_NODES = 8
_FD = 1e-6


def _as_state(x, n):
    return np.atleast_1d(np.asarray(x, dtype=float)).reshape(n)


# ----------------------------------------------------------------------------
# time average and exponential smoothing
# ----------------------------------------------------------------------------


def time_average(fld: ParamField, x, T: float, nu: float = 0.0, dt: float = 0.01) -> np.ndarray:
    """``(1/2T) int_{-T}^{T} f(t, x, nu) dt`` by the composite trapezoid rule.

    ``x`` may be one state ``(n,)`` or a batch ``(m, n)``.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = X.shape

    def fn(t):
        tt = np.repeat(t, m)
        return fld(tt, np.tile(X, (t.shape[0], 1)), nu).reshape(t.shape[0], m, fld.dimension)

    out = trapezoid_mean(fn, -T, T, dt)
    return out[0] if np.ndim(x) == 1 or np.isscalar(x) else out


def _gl_panels(length: float):
    """Composite Gauss-Legendre nodes and weights on ``[0, length]``."""
    z, w = roots_legendre(_PANEL_NODES)
    n = max(1, int(math.ceil(length / _PANEL)))
    h = length / n
    left = h * np.arange(n)
    u = (left[:, None] + 0.5 * h * (z + 1)[None, :]).ravel()
    wt = np.tile(0.5 * h * w, n)
    return u, wt


def smoothing_window(nu: float, h_sup: float, tail_tol: float) -> float:
    """``(1/nu) ln(|H| / (nu tail_tol))`` (at least one panel)."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    return max(_PANEL, math.log(max(h_sup, 1e-300) / (nu * tail_tol)) / nu)


def _sup_in_time(H: Callable, X: np.ndarray, t0: float, span: float) -> float:
    s = t0 - np.linspace(0.0, span, 4001)
    vals = H(np.repeat(s, X.shape[0]), np.tile(X, (s.shape[0], 1)))
    return float(np.max(np.abs(vals), initial=0.0))


def exp_smooth(H: Callable, x, nu: float, t, tail_tol: float = 1e-12,
               h_sup: float | None = None) -> np.ndarray:
    """``F(t, x, nu) = int_{-inf}^{t} exp(-nu (t - s)) H(s, x) ds``.

    ``H(t, x)`` is vectorized. The integral is truncated at the window
    ``(1/nu) ln(|H|_inf / (nu tail_tol))`` and evaluated with composite
    Gauss-Legendre panels. Returns shape ``(len(t), d)``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if h_sup is None:
        h_sup = _sup_in_time(H, X, float(t.max()), 50.0 / nu)
    L = smoothing_window(nu, h_sup, tail_tol)
    u, w = _gl_panels(L)
    kern = w * np.exp(-nu * u)
    out = []
    for tk in t:
        xs = np.broadcast_to(X, (u.shape[0], X.shape[1])) if X.shape[0] == 1 else None
        if xs is None:
            raise ValueError("exp_smooth takes a single state x")
        vals = np.asarray(H(tk - u, xs), dtype=float)
        out.append(kern @ vals)
    return np.array(out)


def smoothing_defect_xi(H: Callable, x, nu: float, t_probes=None, tail_tol: float = 1e-10,
                        du: float = 0.01, h_sup: float | None = None) -> float:
    """``xi(x, nu) = nu^2 int_0^inf h(u, x) u exp(-nu u) du``.

    ``h(u, x)`` is the sup over the probe times ``t`` of
    ``|(1/u) int_0^u H(t - s, x) ds|``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    t_probes = np.linspace(-20.0, 20.0, 41) if t_probes is None else np.atleast_1d(t_probes)
    if h_sup is None:
        h_sup = max(_sup_in_time(H, X, float(tk), 50.0 / nu) for tk in t_probes[:3])
    if h_sup == 0:
        return 0.0
    # (nu U + 1) exp(-nu U) h_sup <= tail_tol
    U = smoothing_window(nu, h_sup, tail_tol)
    while (nu * U + 1) * math.exp(-nu * U) * h_sup > tail_tol:
        U *= 1.25
    u = np.arange(0.0, U + du, du)
    hmax = np.zeros(u.shape[0])
    for tk in t_probes:
        vals = np.asarray(H(tk - u, np.broadcast_to(X, (u.shape[0], X.shape[1]))), dtype=float)
        cum = integrate.cumulative_trapezoid(vals, u, axis=0, initial=0.0)
        mean = np.empty_like(cum)
        mean[1:] = cum[1:] / u[1:, None]
        mean[0] = vals[0]
        hmax = np.maximum(hmax, np.linalg.norm(mean, axis=1))
    return float(nu * nu * np.trapezoid(hmax * u * np.exp(-nu * u), u))


# ----------------------------------------------------------------------------
# mollifier
# ----------------------------------------------------------------------------

_SPHERE = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}


@dataclass(frozen=True)
class Mollifier:
    """``Delta_a(x) = d_a (1 - |x|^2 / a^2)^(2q)`` on ``|x| <= a``."""

    a: float
    q: int
    d_a: float
    dimension: int

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dimension)
        s = 1.0 - np.sum(x * x, axis=1) / self.a ** 2
        return np.where(s > 0, self.d_a * np.clip(s, 0.0, None) ** (2 * self.q), 0.0)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dimension)
        s = 1.0 - np.sum(x * x, axis=1) / self.a ** 2
        c = np.where(s > 0, -4.0 * self.q * self.d_a * np.clip(s, 0.0, None) ** (2 * self.q - 1)
                     / self.a ** 2, 0.0)
        return c[:, None] * x

    def polar_integral(self, n: int = 64) -> float:
        """``int Delta_a`` by Gauss-Legendre in the radius and exact angular measure."""
        z, w = roots_legendre(n)
        rho = 0.5 * self.a * (z + 1)
        radial = 0.5 * self.a * np.sum(w * rho ** (self.dimension - 1)
                                       * (1 - rho ** 2 / self.a ** 2) ** (2 * self.q))
        return float(self.d_a * _SPHERE[self.dimension] * radial)

    def lattice(self, nodes_per_radius: int = 32):
        """Uniform lattice offsets with spacing ``a / nodes_per_radius`` and
        the weights ``Delta_a h^d`` and ``grad Delta_a h^d``."""
        m = nodes_per_radius
        h = self.a / m
        ax = h * np.arange(-m, m + 1)
        mesh = np.stack(np.meshgrid(*([ax] * self.dimension), indexing="ij"), axis=-1)
        pts = mesh.reshape(-1, self.dimension)
        shape = (2 * m + 1,) * self.dimension
        w = (self(pts) * h ** self.dimension).reshape(shape)
        gw = (self.gradient(pts) * h ** self.dimension).reshape(shape + (self.dimension,))
        return h, w, gw


def mollifier_build(a: float, q: int = 2, dimension: int = 1) -> Mollifier:
    """Normalized mollifier; ``d_a`` from adaptive quadrature of the radial integral."""
    if not a > 0:
        raise ValueError("a must be positive")
    if int(q) != q or q < 1:
        raise ValueError("q must be a positive integer")
    if dimension not in _SPHERE:
        raise ValueError(f"unsupported dimension {dimension} (1, 2 or 3)")
    val, _ = integrate.quad(lambda r: r ** (dimension - 1) * (1 - r * r / a ** 2) ** (2 * q), 0.0, a,
                            epsabs=1e-15, epsrel=1e-13)
    return Mollifier(float(a), int(q), 1.0 / (_SPHERE[dimension] * val), dimension)


# ----------------------------------------------------------------------------
# near-identity change of variables on a (time x lattice) table
# ----------------------------------------------------------------------------


def _fitted_recursion(Hvals: np.ndarray, F0: np.ndarray, nu: float, h: float) -> np.ndarray:
    """``F' = -nu F + H`` with ``H`` piecewise linear in time (exact weights)."""
    E = math.exp(-nu * h)
    a1 = 1.0 / nu - (1.0 - E) / (nu * nu * h)
    a0 = (1.0 - E) / nu - a1
    zi = (F0 - a1 * Hvals[0])[None, ...]
    out, _ = signal.lfilter([a1, a0], [1.0, -E], Hvals, axis=0, zi=zi)
    return out


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = _FD * max(1.0, float(np.max(np.abs(x))))
        cols.append((fn(x + e) - fn(x - e)) / (2 * e[j]))
    return np.stack(cols, axis=-1)


@dataclass(eq=False)
class NearIdentityMap:
    """``x = y + nu U(t, y, nu)`` tabulated on time nodes and a uniform state lattice.

    ``U``, ``dU`` (its ``y``-Jacobian) and ``G = dU/dt - f_nu + f_0`` are
    stored on the inner lattice around ``center`` and interpolated with
    cubic splines between lattice points.
    """

    grid: TimeGrid
    nu: float
    a: float
    mollifier: Mollifier
    center: np.ndarray
    radius: float
    spacing: float
    U_tab: np.ndarray
    dU_tab: np.ndarray
    G_tab: np.ndarray
    dG_tab: np.ndarray
    inner_origin: np.ndarray
    lattice_mass: float
    info: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.center.shape[0]

    def _coords(self, t, y):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        y = np.asarray(y, dtype=float).reshape(t.shape[0], self.dimension)
        kt = (t - self.grid.t_start) / self.grid.dt
        ky = (y - self.inner_origin) / self.spacing
        n_in = self.U_tab.shape[1]
        if np.any(ky < -1e-9) or np.any(ky > n_in - 1 + 1e-9):
            raise DomainError("state outside the tabulated ball of the change of variables")
        if np.any(kt < -1e-9) or np.any(kt > self.grid.count - 1 + 1e-9):
            raise DomainError("time outside the tabulated grid")
        return np.vstack([kt, ky.T])

    def _interp(self, tab, t, y):
        c = self._coords(t, y)
        flat = tab.reshape(tab.shape[: 1 + self.dimension] + (-1,))
        cols = [map_coordinates(flat[..., j], c, order=3, mode="nearest")
                for j in range(flat.shape[-1])]
        return np.stack(cols, axis=-1).reshape((c.shape[1],) + tab.shape[1 + self.dimension:])

    def U(self, t, y) -> np.ndarray:
        return self._interp(self.U_tab, t, y)

    def dU(self, t, y) -> np.ndarray:
        return self._interp(self.dU_tab, t, y)

    def G(self, t, y) -> np.ndarray:
        return self._interp(self.G_tab, t, y)

    def dG(self, t, y) -> np.ndarray:
        return self._interp(self.dG_tab, t, y)

    def forward(self, t, y) -> np.ndarray:
        return np.asarray(y, dtype=float).reshape(-1, self.dimension) + self.nu * self.U(t, y)

    def diagnostics(self, window: TimeGrid | None = None) -> dict:
        """Sup norms of ``nu U``, ``nu dU/dy``, ``G`` and ``dG/dy`` over the table."""
        sl = slice(None)
        if window is not None:
            off = self.grid.subgrid_offset(window)
            sl = slice(off, off + window.count)
        d = self.dimension

        def vec(tab):
            return float(np.max(np.linalg.norm(tab[sl].reshape(tab[sl].shape[: 1 + d] + (-1,)), axis=-1)))

        def mat(tab):
            m = tab[sl].reshape((-1, d, d))
            return float(np.max(np.linalg.norm(m, 2, axis=(1, 2))))

        return {"sup_nuU": self.nu * vec(self.U_tab), "sup_nudU": self.nu * mat(self.dU_tab),
                "sup_G": vec(self.G_tab), "sup_dG": mat(self.dG_tab)}


def _lattice_axes(center, radius, spacing, extra):
    n_in = int(math.ceil(radius / spacing)) + 2
    ax_in = spacing * np.arange(-n_in, n_in + 1)
    ax_out = spacing * np.arange(-(n_in + extra), n_in + extra + 1)
    return ax_in, ax_out


def build_change_of_variable(fld: ParamField, nu: float, r: float, grid: TimeGrid,
                             center=None, a_schedule: Callable[[float], float] = math.sqrt,
                             q: int = 2, f0: Callable | None = None, W_radius: float | None = None,
                             nodes_per_radius: int = 32, tail_tol: float = 1e-12,
                             avg_T: float = 1000.0, avg_dt: float = 0.01) -> NearIdentityMap:
    """Tabulate ``U(t, y, nu) = int Delta_a(y - z) Hbar(t, z, nu) dz`` for ``|y - center| <= r``.

    ``H = f_nu - f_0`` with ``f_0`` the time average (or the given ``f0``);
    ``Hbar`` is the exponential smoothing of ``H``, integrated along the
    time grid with exponentially fitted weights after a direct quadrature
    start at the first node.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    n = fld.n_vars
    center = np.zeros(n) if center is None else _as_state(center, n)
    a = float(a_schedule(nu))
    if not a > 0:
        raise ValueError("a_schedule must return a positive radius")
    if W_radius is not None and r + a > W_radius:
        raise DomainError(f"quadrature ball leaves W: r + a(nu) = {r + a:.6g} > {W_radius:.6g}")
    moll = mollifier_build(a, q, n)
    h_y, w, gw = moll.lattice(nodes_per_radius)
    # unit lattice mass so x-independent fields pass through unchanged
    mass = float(np.sum(w))
    w = w / mass
    m = nodes_per_radius
    ax_in, ax_out = _lattice_axes(center, r, h_y, m)
    mesh = np.stack(np.meshgrid(*([ax_out] * n), indexing="ij"), axis=-1).reshape(-1, n) + center
    n_out = ax_out.shape[0]
    t = grid.nodes
    N = t.shape[0]
    if f0 is None:
        f0_vals = time_average(fld, mesh, avg_T, 0.0, avg_dt)
        f0_vals = np.asarray(f0_vals).reshape(mesh.shape[0], fld.dimension)
    else:
        f0_vals = np.asarray(f0(mesh), dtype=float).reshape(mesh.shape[0], fld.dimension)

    # H on the full lattice, chunked over time
    M = mesh.shape[0]
    Hvals = np.empty((N, M, fld.dimension))
    chunk = max(1, 2_000_000 // max(M, 1))
    for k in range(0, N, chunk):
        tk = t[k:k + chunk]
        Hvals[k:k + chunk] = (fld(np.repeat(tk, M), np.tile(mesh, (tk.shape[0], 1)), nu)
                              .reshape(tk.shape[0], M, fld.dimension) - f0_vals[None])
    h_sup = float(np.max(np.abs(Hvals), initial=0.0))
    # start value by direct quadrature, then march
    L = smoothing_window(nu, max(h_sup, 1e-300), tail_tol)
    u, wq = _gl_panels(L)
    kern = wq * np.exp(-nu * u)
    F0 = np.empty((M, fld.dimension))
    for j in range(0, M, 64):
        X = mesh[j:j + 64]
        tt = np.repeat(t[0] - u, X.shape[0])
        vals = (fld(tt, np.tile(X, (u.shape[0], 1)), nu) - np.tile(f0_vals[j:j + 64], (u.shape[0], 1)))
        F0[j:j + 64] = np.einsum("u,umd->md", kern, vals.reshape(u.shape[0], X.shape[0], -1))
    Hbar = _fitted_recursion(Hvals, F0, nu, grid.dt)
    shape_t = (N,) + (n_out,) * n + (fld.dimension,)
    Hbar = Hbar.reshape(shape_t)
    Hgrid = Hvals.reshape(shape_t)
    del Hvals
    axes = tuple(range(1, 1 + n))
    kw = w[(None,) + (slice(None),) * n + (None,)]
    U = signal.fftconvolve(Hbar, kw, mode="valid", axes=axes)
    DH = signal.fftconvolve(Hgrid, kw, mode="valid", axes=axes)
    dU = np.stack([signal.fftconvolve(Hbar, gw[(None,) + (slice(None),) * n + (None, j)],
                                      mode="valid", axes=axes) for j in range(n)], axis=-1)
    dDH = np.stack([signal.fftconvolve(Hgrid, gw[(None,) + (slice(None),) * n + (None, j)],
                                       mode="valid", axes=axes) for j in range(n)], axis=-1)
    # G = dU/dt - H = (Delta * H) - H - nu U on the inner lattice
    inner = (slice(None),) + (slice(m, n_out - m),) * n
    H_in = Hgrid[inner]
    G = DH - H_in - nu * U
    # dH/dy on the inner lattice by central differences
    dH = np.stack([np.gradient(Hgrid, h_y, axis=1 + j)[inner] for j in range(n)], axis=-1)
    dG = dDH - dH - nu * dU
    return NearIdentityMap(grid, nu, a, moll, center, r, h_y, U, dU, G, dG,
                           center + ax_in[0], mass,
                           {"h_sup": h_sup, "lattice_points": M, "window": L})


def tabulated_average(fld: ParamField, center, radius: float, T: float = 1000.0,
                      dt: float = 0.01, points_per_axis: int | None = None) -> Callable:
    """``f0`` on a uniform lattice over the cube around ``center``, cubic-spline interpolated."""
    n = fld.n_vars
    center = _as_state(center, n)
    m = points_per_axis or (129 if n == 1 else 33 if n == 2 else 13)
    ax = np.linspace(-radius, radius, m)
    mesh = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n) + center
    vals = np.asarray(time_average(fld, mesh, T, 0.0, dt)).reshape((m,) * n + (fld.dimension,))
    h = ax[1] - ax[0]

    def f0(X):
        X = np.asarray(X, dtype=float).reshape(-1, n)
        k = (X - center + radius) / h
        if np.any(k < -1e-9) or np.any(k > m - 1 + 1e-9):
            raise DomainError("state outside the tabulated average")
        return np.stack([map_coordinates(vals[..., j], k.T, order=3, mode="nearest")
                         for j in range(fld.dimension)], axis=-1)

    return f0


# ----------------------------------------------------------------------------
# reduced field, equilibria, averaged solve
# ----------------------------------------------------------------------------


def reduce_averaged(fld: ParamField, nu: float, cmap: NearIdentityMap | None, f0: Callable):
    """Reduced right-hand side ``R(t, y)`` with ``y' = nu R(t, y)``.

    ``R = (I + nu dU/dy)^-1 [f0(y) + f(t, y + nu U) - f(t, y) - G]``,
    solved directly. At ``nu = 0`` (or without a map) returns ``f0``.
    """
    def R(t, y):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        y = np.asarray(y, dtype=float).reshape(t.shape[0], fld.n_vars)
        base = np.asarray(f0(y), dtype=float).reshape(y.shape)
        if nu == 0:
            return base
        if cmap is None:
            return fld(t, y, nu)
        U = cmap.U(t, y)
        dU = cmap.dU(t, y)
        rhs = base + fld(t, y + nu * U, nu) - fld(t, y, nu) - cmap.G(t, y)
        Mx = np.eye(fld.n_vars)[None] + nu * dU
        # the Neumann-series condition, which also certifies invertibility
        small = np.linalg.norm(nu * dU, 2, axis=(1, 2))
        if not np.all(np.isfinite(small)) or np.max(small) >= 1.0:
            raise ConditioningError(f"||nu dU/dy|| = {np.max(small):.3g} >= 1: I + nu dU/dy may be singular")
        return np.linalg.solve(Mx, rhs[..., None])[..., 0]

    return R


@dataclass(frozen=True)
class EquilibriumReport:
    x0: np.ndarray
    jacobian: np.ndarray
    eigenvalues: np.ndarray
    min_abs_real: float
    hyperbolic: bool
    iterations: int

    def to_dict(self) -> dict:
        return {"x0": self.x0.tolist(), "eigenvalues": [[float(z.real), float(z.imag)]
                                                        for z in self.eigenvalues],
                "min_abs_real": self.min_abs_real, "hyperbolic": self.hyperbolic,
                "iterations": self.iterations}


def find_equilibrium(f0: Callable, x_init, tol: float = 1e-10, max_steps: int = 50,
                     hyperbolic_tol: float = 1e-8) -> EquilibriumReport:
    """Newton iteration for ``f0(x) = 0`` with a central-difference Jacobian."""
    x = np.atleast_1d(np.asarray(x_init, dtype=float)).copy()
    n = x.shape[0]

    def F(z):
        return np.asarray(f0(z.reshape(-1, n)), dtype=float).reshape(-1, n)

    def jac(z):
        return _fd_jacobian(F, z.reshape(1, n))[0]

    for k in range(max_steps + 1):
        val = F(x)[0]
        if np.linalg.norm(val) <= tol:
            J = jac(x)
            lam = np.linalg.eigvals(J)
            mr = float(np.min(np.abs(lam.real)))
            return EquilibriumReport(x, J, lam, mr, mr > hyperbolic_tol, k)
        if k == max_steps:
            break
        J = jac(x)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise ConditioningError("singular Jacobian in Newton iteration")
        x = x - np.linalg.solve(J, val)
    raise ConvergenceError(f"Newton did not converge in {max_steps} steps", [])


def solve_averaged(fld: ParamField, nu: float, r0: float = 0.5, tol: float = 1e-8,
                   f0: Callable | None = None, x_init=None, half_width: float = 20.0,
                   dt: float = 0.02, a_schedule: Callable[[float], float] = math.sqrt, q: int = 2,
                   tail_tol: float = 1e-9, max_iter: int = 200, residual_tol: float = 1e-4,
                   avg_T: float = 1000.0, nodes_per_radius: int = 32) -> SolveResult:
    """Bounded solution ``phi_nu`` of ``x' = nu f(t, x, nu)`` near a hyperbolic equilibrium.

    In slow time ``s = nu t`` the reduced equation is written as
    ``z' = A z + [f0(x0 + z) - A z] + F_nu(s / nu, x0 + z)`` with
    ``A = Df0(x0)`` and solved by Picard iteration with the constant
    coefficient Green kernel. The result is mapped back through
    ``x = y + nu U(t, y)``. ``SolveResult.xi`` holds the constant ``x0``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    n = fld.n_vars
    x_init = np.zeros(n) if x_init is None else x_init
    if f0 is None:
        def f0_direct(X):
            return np.asarray(time_average(fld, X, avg_T, 0.0), dtype=float).reshape(-1, fld.dimension)
        # Newton on the direct average, then a table for the many Picard evaluations
        x_init = find_equilibrium(f0_direct, x_init).x0
        f0 = tabulated_average(fld, x_init, r0 + 1.5 * a_schedule(nu) + 0.05, avg_T)
    eq = find_equilibrium(f0, x_init)
    if not eq.hyperbolic:
        raise PreconditionError(f"equilibrium {eq.x0} is not hyperbolic (eigenvalues {eq.eigenvalues})")
    x0, A = eq.x0, eq.jacobian
    P = stable_projection(A)
    lam = np.linalg.eigvals(A)
    span = 12.0 / float(np.min(np.abs(lam.real)))
    fit = estimate_dichotomy(integrate_fundamental(MatrixFunction.constant(A),
                                                   TimeGrid.symmetric(span, span / 2000)), P)
    dich = fit.data
    K, alpha = dich.K, dich.alpha
    # slow-time padding
    L_s = convolution_window(K, alpha, 1.0, tail_tol)
    out = TimeGrid.symmetric(half_width, dt)
    work = out.padded(L_s / nu)
    cmap = build_change_of_variable(fld, nu, r0, work, center=x0, a_schedule=a_schedule, q=q,
                                    f0=f0, nodes_per_radius=nodes_per_radius)
    R = reduce_averaged(fld, nu, cmap, f0)
    s_grid = TimeGrid(work.t_start * nu, work.dt * nu, work.count)
    kern = GreenKernel(integrate_fundamental(MatrixFunction.constant(A), s_grid), dich)
    t = work.nodes

    def T(z):
        y = x0 + z
        rhs = R(t, y) - z @ A.T
        return convolve_nodes(kern, rhs)

    trace = _picard(T, np.zeros((t.shape[0], n)), tol, max_iter, ball=r0)
    y = x0 + trace.phi
    phi = cmap.forward(t, y)
    off = work.subgrid_offset(out)
    sl = slice(off, off + out.count)
    phi_out = GridFunction(out, phi[sl])
    x0_fun = GridFunction(out, np.tile(x0, (out.count, 1)))
    res = residual(lambda tt, x: nu * fld(tt, x, nu), phi_out)
    sup_dev = float(np.max(np.linalg.norm(phi[sl] - x0, axis=1)))
    # sup of the remainder F_nu = R - f0 over output times and a probe star in the ball
    tp = out.nodes[::10]
    star = [np.zeros(n)] + [sgn * 0.9 * r0 * e for e in np.eye(n) for sgn in (1.0, -1.0)]
    sup_F = 0.0
    for dy in star:
        yy = np.tile(x0 + dy, (tp.shape[0], 1))
        Fv = R(tp, yy) - np.asarray(f0(yy), dtype=float).reshape(yy.shape)
        sup_F = max(sup_F, float(np.max(np.linalg.norm(Fv, axis=1))))
    info = {"equilibrium": eq.to_dict(), "K": K, "alpha": alpha, "a": cmap.a, "sup_F": sup_F,
            "sup_phi_minus_x0": sup_dev, "diagnostics": cmap.diagnostics(out),
            "observed_q": max([b / a for a, b in zip(trace.norms[:-1], trace.norms[1:]) if a > 0],
                              default=0.0)}
    return SolveResult(x0_fun, phi_out, trace.norms, res, eq, residual_tol, [], info)
