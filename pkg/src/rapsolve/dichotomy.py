"""Fundamental matrices, exponential dichotomies and Green-kernel convolution.

Step propagators of ``x' = A(t) x`` are computed for every grid interval with
a vectorized RK4 scheme under step-doubling error control. Inverse
propagators come from the adjoint equation ``Psi' = -Psi A``.

The Green kernel never multiplies a growing matrix by a decaying one. Instead
the stable and unstable bundles are tracked with orthonormal frames (a
backward QR sweep for the stable bundle, a forward one for the unstable
bundle) and the kernel is assembled from the restricted propagators, which
are contracting in the direction they are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import null_space, orth
from scipy.optimize import linprog

from .errors import DichotomyNotFound, PreconditionError, SpanError, StiffnessError
from .signals import GridFunction, Signal, TimeGrid, write_csv

_MAX_SUBSTEPS = 1 << 16


# ----------------------------------------------------------------------------
# matrix functions
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatrixFunction:
    """Time-dependent ``d x d`` matrix; ``fn`` maps times ``(N,)`` to ``(N, d, d)``."""

    dimension: int
    fn: Callable[[np.ndarray], np.ndarray]
    bound: float = math.inf

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t_arr).ravel()
        out = np.asarray(self.fn(flat), dtype=float).reshape(flat.shape[0], self.dimension,
                                                             self.dimension)
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + out.shape[1:])

    @classmethod
    def constant(cls, M) -> "MatrixFunction":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        d = M.shape[0]
        return cls(d, lambda t: np.broadcast_to(M, (t.shape[0], d, d)), float(np.linalg.norm(M, 2)))

    @classmethod
    def modulated(cls, C, parts=()) -> "MatrixFunction":
        """``C + sum_k s_k(t) M_k`` for scalar signals ``s_k``."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        parts = [(s, np.atleast_2d(np.asarray(M, dtype=float))) for s, M in parts]
        d = C.shape[0]

        def fn(t):
            out = np.broadcast_to(C, (t.shape[0], d, d)).copy()
            for s, M in parts:
                out += s(t)[:, 0, None, None] * M
            return out

        bound = float(np.linalg.norm(C, 2)) + sum(s.sup_bound() * float(np.linalg.norm(M, 2))
                                                  for s, M in parts)
        return cls(d, fn, bound)

    def __add__(self, other: "MatrixFunction") -> "MatrixFunction":
        if other.dimension != self.dimension:
            raise ValueError("matrix functions of different dimension")
        f, g = self.fn, other.fn
        return MatrixFunction(self.dimension, lambda t: f(t) + g(t), self.bound + other.bound)

    def sampled_sup(self, grid: TimeGrid) -> float:
        return float(np.max(np.linalg.norm(self(grid.nodes), 2, axis=(1, 2))))

    @classmethod
    def from_dict(cls, doc: dict) -> "MatrixFunction":
        """``{"constant": [[..]], "terms": [{"signal": {...}, "matrix": [[..]]}]}``."""
        parts = [(Signal.from_dict(item["signal"]), item["matrix"]) for item in doc.get("terms", [])]
        return cls.modulated(doc["constant"], parts)


# ----------------------------------------------------------------------------
# fundamental solutions
# ----------------------------------------------------------------------------


def _rk4_batch(A: MatrixFunction, ta: np.ndarray, h: np.ndarray, m: int, adjoint: bool) -> np.ndarray:
    """Propagator over ``[ta, ta+h]`` with ``m`` RK4 substeps, batched."""
    B, d = ta.shape[0], A.dimension
    Y = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    hs = h / m
    hh = hs[:, None, None]
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(m):
            Y = _rk4_substep(A, Y, ta + j * hs, hs, hh, adjoint)
    return Y


def _rk4_substep(A, Y, t0, hs, hh, adjoint):
    A1, A2, A3 = A(t0), A(t0 + 0.5 * hs), A(t0 + hs)
    if adjoint:
        k1 = -Y @ A1
        k2 = -(Y + 0.5 * hh * k1) @ A2
        k3 = -(Y + 0.5 * hh * k2) @ A2
        k4 = -(Y + hh * k3) @ A3
    else:
        k1 = A1 @ Y
        k2 = A2 @ (Y + 0.5 * hh * k1)
        k3 = A2 @ (Y + 0.5 * hh * k2)
        k4 = A3 @ (Y + hh * k3)
    return Y + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def batch_propagators(A: MatrixFunction, ta, tb, tol: float = 1e-10) -> np.ndarray:
    """Transition matrices ``Phi(tb, ta)`` for short intervals, batched.

    Forward intervals integrate ``Y' = A Y``; backward ones integrate the
    adjoint equation over ``[tb, ta]`` so no matrix is ever inverted.
    """
    ta, tb = np.atleast_1d(np.asarray(ta, float)), np.atleast_1d(np.asarray(tb, float))
    d = A.dimension
    out = np.empty((ta.shape[0], d, d))
    fwd = tb >= ta
    for mask, adjoint in ((fwd, False), (~fwd, True)):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        start = ta[idx] if not adjoint else tb[idx]
        h = np.abs(tb[idx] - ta[idx])
        m = 1
        Y_prev = _rk4_batch(A, start, h, m, adjoint)
        pending = np.arange(idx.size)
        while pending.size:
            Y_new = _rk4_batch(A, start[pending], h[pending], 2 * m, adjoint)
            scale = np.maximum(1.0, np.max(np.abs(Y_new), axis=(1, 2)))
            with np.errstate(invalid="ignore"):
                err = np.max(np.abs(Y_new - Y_prev), axis=(1, 2)) / 15.0
            ok = err <= tol * scale
            out[idx[pending[ok]]] = Y_new[ok]
            pending, Y_prev = pending[~ok], Y_new[~ok]
            m *= 2
            if pending.size and 2 * m > _MAX_SUBSTEPS:
                raise StiffnessError(float(start[pending[0]]))
    return out


def _hermite(Y0, Y1, dY0, dY1, h, s):
    s = s[:, None, None]
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * Y0 + h10 * h * dY0 + h01 * Y1 + h11 * h * dY1


@dataclass(frozen=True, eq=False)
class FundamentalSolution:
    """Fundamental matrix on a grid with ``Phi(0) = I``.

    ``step[i]`` maps ``x(t_i)`` to ``x(t_{i+1})`` and ``step_inv[i]`` is its
    inverse, obtained independently from the adjoint equation.
    """

    A: MatrixFunction
    grid: TimeGrid
    Phi: np.ndarray
    PhiInv: np.ndarray
    step: np.ndarray
    step_inv: np.ndarray
    tol: float
    order: str = "cubic"

    @property
    def dimension(self) -> int:
        return self.A.dimension

    def _interp(self, t, values, adjoint):
        t = np.atleast_1d(np.asarray(t, float))
        i, off = self.grid.locate(t)
        if self.order == "linear":
            w = (off / self.grid.dt)[:, None, None]
            return (1 - w) * values[i] + w * values[i + 1]
        A0, A1 = self.A(self.grid.nodes[i]), self.A(self.grid.nodes[i + 1])
        Y0, Y1 = values[i], values[i + 1]
        dY0, dY1 = (-(Y0 @ A0), -(Y1 @ A1)) if adjoint else (A0 @ Y0, A1 @ Y1)
        return _hermite(Y0, Y1, dY0, dY1, self.grid.dt, off / self.grid.dt)

    def Phi_at(self, t) -> np.ndarray:
        """Dense output of ``Phi`` (cubic Hermite by default)."""
        out = self._interp(t, self.Phi, False)
        return out[0] if np.ndim(t) == 0 else out

    def PhiInv_at(self, t) -> np.ndarray:
        out = self._interp(t, self.PhiInv, True)
        return out[0] if np.ndim(t) == 0 else out

    def transition(self, t_to, t_from) -> np.ndarray:
        """``Phi(t_to, t_from)`` for nearby times (at most a few steps apart)."""
        return batch_propagators(self.A, t_from, t_to, self.tol)

    def identity_defect(self) -> float:
        """``max_k ||Phi(t_k) PhiInv(t_k) - I||``."""
        prod = self.Phi @ self.PhiInv
        return float(np.max(np.abs(prod - np.eye(self.dimension))))


def integrate_fundamental(A: MatrixFunction, grid: TimeGrid, tol: float = 1e-10,
                          order: str = "cubic") -> FundamentalSolution:
    """Integrate ``Phi' = A Phi`` from ``Phi(0) = I`` in both directions on ``grid``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if order not in ("linear", "cubic"):
        raise ValueError("order must be 'linear' or 'cubic'")
    if not grid.t_start <= 0.0 <= grid.t_end:
        raise SpanError(f"0 must lie in the grid span [{grid.t_start}, {grid.t_end}]")
    t = grid.nodes
    ta, tb = t[:-1], t[1:]
    R = batch_propagators(A, ta, tb, tol)
    S = batch_propagators(A, tb, ta, tol)
    d, N = A.dimension, grid.count
    Phi = np.empty((N, d, d))
    PhiInv = np.empty((N, d, d))
    zero_hits = np.flatnonzero(t == 0.0)
    if zero_hits.size:
        k0 = int(zero_hits[0])
        Phi[k0] = PhiInv[k0] = np.eye(d)
        right = k0
    else:
        k0 = int(np.searchsorted(t, 0.0)) - 1
        P = batch_propagators(A, np.array([0.0, 0.0, t[k0], t[k0 + 1]]),
                              np.array([t[k0], t[k0 + 1], 0.0, 0.0]), tol)
        Phi[k0], Phi[k0 + 1] = P[0], P[1]
        PhiInv[k0], PhiInv[k0 + 1] = P[2], P[3]
        right = k0 + 1
    for k in range(right, N - 1):
        Phi[k + 1] = R[k] @ Phi[k]
        PhiInv[k + 1] = PhiInv[k] @ S[k]
    for k in range(k0 - 1, -1, -1):
        Phi[k] = S[k] @ Phi[k + 1]
        PhiInv[k] = PhiInv[k + 1] @ R[k]
    return FundamentalSolution(A, grid, Phi, PhiInv, R, S, tol, order)


# ----------------------------------------------------------------------------
# dichotomy data and Green kernels
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DichotomyData:
    """Projection ``P``, constant ``K >= 1`` and exponent ``alpha > 0``."""

    P: np.ndarray
    K: float
    alpha: float
    note: str = ""
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if np.max(np.abs(P @ P - P), initial=0.0) > 1e-6 * max(1.0, np.max(np.abs(P))):
            raise ValueError("P is not a projection (P @ P != P)")
        if not self.K >= 1.0:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", float(self.K))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def roughness_limit(self) -> float:
        return self.alpha / (4.0 * self.K ** 2)

    def to_dict(self) -> dict:
        return {"K": self.K, "alpha": self.alpha, "P": self.P.tolist()}


def _check_projection(P, d):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape != (d, d):
        raise ValueError(f"projection must be {d}x{d}")
    if np.max(np.abs(P @ P - P), initial=0.0) > 1e-6 * max(1.0, np.max(np.abs(P))):
        raise PreconditionError("P is not a projection (P @ P != P)")
    return P


def _rank_of_projection(P) -> int:
    return int(round(np.trace(P)))


def _qr_sweep(steps, U, restricted, reverse):
    """Propagate an orthonormal frame through ``steps`` and record the
    inverse of the triangular factor (the restricted step the other way)."""
    N, k = U.shape[0], U.shape[2]
    order = range(N - 2, -1, -1) if reverse else range(N - 1)
    if k == 1:
        u = U[-1 if reverse else 0, :, 0].copy()
        for i in order:
            v = steps[i] @ u
            r = math.sqrt(float(v @ v))
            u = v / r
            U[i if reverse else i + 1, :, 0] = u
            restricted[i, 0, 0] = 1.0 / r
        return
    for i in order:
        Q, Rr = np.linalg.qr(steps[i] @ U[i + 1 if reverse else i])
        sgn = np.sign(np.diag(Rr))
        sgn[sgn == 0] = 1.0
        U[i if reverse else i + 1] = Q * sgn
        restricted[i] = np.linalg.inv(sgn[:, None] * Rr)


class GreenKernel:
    """Green kernel of ``x' = A(t) x`` for a dichotomy projection.

    ``G(t, s) = Phi(t) P Phi^{-1}(s)`` for ``t >= s`` and
    ``-Phi(t) (I - P) Phi^{-1}(s)`` for ``t < s``. Internally ``P(t)`` is
    carried by orthonormal frames of its range (stable bundle) and null space
    (unstable bundle); only the rank of ``P`` and its subspaces at the grid
    ends seed the sweeps, so the projection is re-fitted to the dynamics.
    """

    def __init__(self, fundamental: FundamentalSolution, dichotomy: DichotomyData | None = None,
                 projection=None):
        if dichotomy is None and projection is None:
            raise ValueError("need dichotomy data or a projection")
        d = fundamental.dimension
        P = _check_projection(dichotomy.P if projection is None else projection, d)
        self.fundamental = fundamental
        self.dichotomy = dichotomy
        self.P = P
        self.k = _rank_of_projection(P)
        self._build_frames()

    # frames -----------------------------------------------------------------

    def _build_frames(self):
        fund, d, k = self.fundamental, self.fundamental.dimension, self.k
        N = fund.grid.count
        R, S = fund.step, fund.step_inv
        Us = np.zeros((N, d, k))
        Uu = np.zeros((N, d, d - k))
        Rs = np.zeros((N - 1, k, k))
        Su = np.zeros((N - 1, d - k, d - k))
        if k == d:
            Us[:] = np.eye(d)
            Rs[:] = R
        elif k:
            Us[-1] = orth(self.P)
            _qr_sweep(S, Us, Rs, reverse=True)
        if k == 0:
            Uu[:] = np.eye(d)
            Su[:] = S
        elif d - k:
            Uu[0] = null_space(self.P)
            _qr_sweep(R, Uu, Su, reverse=False)
        V = np.concatenate([Us, Uu], axis=2)
        self.frame_condition = float(np.max(np.linalg.cond(V)))
        W = np.linalg.inv(V)
        self.Us, self.Uu, self.Rs, self.Su = Us, Uu, Rs, Su
        self.Ws, self.Wu = W[:, :k, :], W[:, k:, :]

    @property
    def grid(self) -> TimeGrid:
        return self.fundamental.grid

    @property
    def dimension(self) -> int:
        return self.fundamental.dimension

    def projection_nodes(self) -> np.ndarray:
        """``P(t_k)`` at every node."""
        return self.Us @ self.Ws

    def projection_at(self, t: float) -> np.ndarray:
        i = int(self.grid.locate(np.array([t]))[0][0])
        Pi = self.Us[i] @ self.Ws[i]
        ti = self.grid.nodes[i]
        if t == ti:
            return Pi
        fwd, bwd = self.fundamental.transition(np.array([t, ti]), np.array([ti, t]))
        return fwd @ Pi @ bwd

    @property
    def projection_mismatch(self) -> float:
        """``||P_fit(0) - P||``: distance between the re-fitted and the given projection."""
        return float(np.linalg.norm(self.projection_at(0.0) - self.P, 2))

    def with_constants(self, K: float, alpha: float, note: str = "") -> "GreenKernel":
        """Shallow copy with new dichotomy constants; frames are reused."""
        new = object.__new__(GreenKernel)
        new.__dict__.update(self.__dict__)
        new.dichotomy = DichotomyData(self.P, K, alpha, note=note)
        return new

    # evaluation -------------------------------------------------------------

    def node_kernel(self, j: int, i: int) -> np.ndarray:
        """``G(t_j, t_i)`` for node indices."""
        d = self.dimension
        if j >= i:
            M = np.eye(self.k)
            for m in range(i, j):
                M = self.Rs[m] @ M
            return self.Us[j] @ M @ self.Ws[i] if self.k else np.zeros((d, d))
        M = np.eye(d - self.k)
        for m in range(i - 1, j - 1, -1):
            M = self.Su[m] @ M
        return -(self.Uu[j] @ M @ self.Wu[i]) if d - self.k else np.zeros((d, d))

    def row_norms(self, j: int) -> np.ndarray:
        """``||G(t_j, t_i)||_2`` for every node ``i``."""
        N, d, k = self.grid.count, self.dimension, self.k
        out = np.zeros(N)
        if k:
            M = np.eye(k)
            for i in range(j, -1, -1):
                if i < j:
                    M = M @ self.Rs[i]
                out[i] = np.linalg.norm(M @ self.Ws[i], 2)
        if d - k:
            M = np.eye(d - k)
            for i in range(j + 1, N):
                M = M @ self.Su[i - 1]
                out[i] = np.linalg.norm(M @ self.Wu[i], 2)
        return out

    def __call__(self, t: float, s: float) -> np.ndarray:
        t, s = float(t), float(s)
        grid = self.grid
        (j, i), _ = grid.locate(np.array([t, s]))
        j, i = int(j), int(i)
        tj, ti = grid.nodes[j], grid.nodes[i]
        # G(t, s) = Phi(t, t_j) G(t_j, t_i) Phi(t_i, s) with floor nodes t_j, t_i
        if t >= s or j < i:
            core = self.node_kernel(j, i)
        else:
            core = self.Us[i] @ self.Ws[i] - np.eye(self.dimension)
        trans = self.fundamental.transition
        left = np.eye(self.dimension) if t == tj else trans(np.array([t]), np.array([tj]))[0]
        right = np.eye(self.dimension) if s == ti else trans(np.array([ti]), np.array([s]))[0]
        return left @ core @ right


def green_eval(kernel: GreenKernel, t: float, s: float) -> np.ndarray:
    """``G(t, s)``; both times must lie inside the fundamental grid."""
    return kernel(t, s)


# ----------------------------------------------------------------------------
# sampled kernel norms
# ----------------------------------------------------------------------------


def _sample_norms(kernel: GreenKernel, sources: np.ndarray, offsets: list[np.ndarray],
                  forward: bool) -> list[np.ndarray]:
    """``||G(t_{src+o}, t_src)||`` (forward) or ``||G(t_{src-o}, t_src)||`` (backward)."""
    B = sources.shape[0]
    out = [np.zeros(o.shape[0]) for o in offsets]
    kdim = kernel.k if forward else kernel.dimension - kernel.k
    if kdim == 0 or B == 0:
        return out
    z = (kernel.Ws if forward else kernel.Wu)[sources].copy()
    steps = kernel.Rs if forward else kernel.Su
    want: dict[int, list[tuple[int, int]]] = {}
    for b, offs in enumerate(offsets):
        for q, o in enumerate(offs):
            want.setdefault(int(o), []).append((b, q))
    max_off = max(want) if want else 0
    for m in range(max_off + 1):
        if m > 0:
            idx = sources + (m - 1) if forward else sources - m
            idx = np.clip(idx, 0, steps.shape[0] - 1)
            z = steps[idx] @ z
        if m in want:
            pairs = want[m]
            bs = np.array([p[0] for p in pairs])
            norms = np.linalg.norm(z[bs], 2, axis=(1, 2))
            for (b, q), v in zip(pairs, norms):
                out[b][q] = v
    return out


# ----------------------------------------------------------------------------
# fitting and verification
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DichotomyFit:
    data: DichotomyData
    taus: np.ndarray
    log_norms: np.ndarray
    alpha_raw: float
    K_raw: float
    projection_mismatch: float

    def to_dict(self) -> dict:
        return {"K": self.data.K, "alpha": self.data.alpha, "K_raw": self.K_raw,
                "alpha_raw": self.alpha_raw, "samples": int(self.taus.size),
                "tau_max": float(self.taus.max(initial=0.0)),
                "projection_mismatch": self.projection_mismatch}


def estimate_dichotomy(fund: FundamentalSolution, P, sample_pairs: int = 512,
                       safety: float = 1.05) -> DichotomyFit:
    """Fit ``(K, alpha)`` so that sampled ``log||G(t,s)|| <= log K - alpha |t - s|``.

    Sources are taken from the middle third of the grid and lags up to a
    sixth of the span, in both directions. The envelope is the supporting line
    of the sampled points at half the maximal lag, found by a linear program;
    ``K`` is then inflated by ``safety``.
    """
    P = _check_projection(P, fund.dimension)
    kernel = GreenKernel(fund, projection=P)
    N = fund.grid.count
    n_src = 16
    per_side = max(4, sample_pairs // (2 * n_src))
    lo, hi = N // 3, (2 * N) // 3
    sources = np.unique(np.linspace(lo, hi, n_src).round().astype(int))
    max_off = max(1, N // 6)
    offs = np.unique(np.linspace(0, max_off, per_side).round().astype(int))
    offsets = [offs] * sources.shape[0]
    taus, vals = [], []
    for forward in (True, False):
        if (kernel.k if forward else fund.dimension - kernel.k) == 0:
            continue
        norms = _sample_norms(kernel, sources, offsets, forward)
        for nb in norms:
            taus.append(offs * fund.grid.dt)
            vals.append(nb)
    taus = np.concatenate(taus) if taus else np.zeros(0)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    keep = vals > 1e-300
    taus, logs = taus[keep], np.log(vals[keep])
    if taus.size == 0:
        raise DichotomyNotFound("all sampled kernel norms vanish; no exponent to fit")
    tau_ref = 0.5 * taus.max()
    # variables (logK, alpha): minimise logK - alpha*tau_ref s.t. logs + alpha*tau <= logK
    res = linprog(c=[1.0, -tau_ref], A_ub=np.column_stack([-np.ones_like(taus), taus]),
                  b_ub=-logs, bounds=[(0.0, None), (0.0, None)], method="highs")
    if res.status != 0:
        raise DichotomyNotFound(f"envelope fit failed: {res.message}")
    logK, alpha = float(res.x[0]), float(res.x[1])
    report = {"alpha_raw": alpha, "K_raw": math.exp(logK), "samples": int(taus.size)}
    if alpha <= 1e-8 * max(1.0, 1.0 / max(tau_ref, 1e-300)):
        raise DichotomyNotFound("no positive exponent satisfies the sampled envelope", report)
    P_fit = kernel.projection_at(0.0)
    K = max(1.0, safety * math.exp(logK))
    data = DichotomyData(P_fit, K, alpha, note="fitted", report=report)
    return DichotomyFit(data, taus, logs, alpha, math.exp(logK), kernel.projection_mismatch)


@dataclass(frozen=True, eq=False)
class VerifyReport:
    worst_ratio: float
    samples: np.ndarray  # rows (t, s, norm_G, bound)

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 1.0

    def to_csv(self, path) -> None:
        write_csv(path, ["t", "s", "norm_G", "bound"], self.samples)


def verify_dichotomy(kernel: GreenKernel, verification_pairs: int = 512, side: str = "both",
                     max_lag: float | None = None, seed: int = 0, K: float | None = None,
                     alpha: float | None = None) -> VerifyReport:
    """Worst ratio ``||G(t,s)|| / (K exp(-alpha |t-s|))`` over random node pairs.

    ``side`` restricts the check to ``t >= s`` (``"forward"``), ``t < s``
    (``"backward"``) or both. ``K`` and ``alpha`` default to the kernel's
    dichotomy constants; passing them tests other candidate constants.
    """
    if side not in ("both", "forward", "backward"):
        raise ValueError("side must be 'both', 'forward' or 'backward'")
    if kernel.dichotomy is None and (K is None or alpha is None):
        raise ValueError("kernel carries no dichotomy constants")
    K = kernel.dichotomy.K if K is None else float(K)
    alpha = kernel.dichotomy.alpha if alpha is None else float(alpha)
    grid = kernel.grid
    N, dt = grid.count, grid.dt
    if max_lag is None:
        max_lag = min(0.5 * (grid.t_end - grid.t_start), 30.0 / alpha)
    max_steps = max(1, min(N - 1, int(round(max_lag / dt))))
    rng = np.random.default_rng(seed)
    n_src = 16
    per = max(1, verification_pairs // (n_src * (2 if side == "both" else 1)))
    rows = []
    for forward in (True, False):
        if (side == "forward" and not forward) or (side == "backward" and forward):
            continue
        if forward:
            sources = rng.integers(0, N - 1, n_src)
            room = np.minimum(N - 1 - sources, max_steps)
        else:
            sources = rng.integers(1, N, n_src)
            room = np.minimum(sources, max_steps)
        offsets = [np.unique(np.concatenate([[0] if forward else [1],
                                             rng.integers(0, r + 1, per)])) for r in room]
        if not forward:
            offsets = [o[o > 0] for o in offsets]
        norms = _sample_norms(kernel, sources, offsets, forward)
        for src, offs, nb in zip(sources, offsets, norms):
            s = grid.nodes[src]
            t = grid.nodes[src + offs] if forward else grid.nodes[src - offs]
            rows.append(np.column_stack([t, np.full_like(t, s), nb,
                                         K * np.exp(-alpha * np.abs(t - s))]))
    samples = np.concatenate(rows) if rows else np.zeros((0, 4))
    ratio = float(np.max(samples[:, 2] / samples[:, 3], initial=0.0))
    return VerifyReport(ratio, samples)


def roughness_apply(d: DichotomyData, delta: float) -> DichotomyData:
    """Guaranteed constants after a perturbation of size ``delta``.

    Returns ``alpha - 2 K delta`` and ``5 K^2 / 2``. The projection keeps the
    null space of ``P``; its range has to be re-fitted numerically (see
    :class:`GreenKernel`).
    """
    limit = d.alpha / (4.0 * d.K ** 2)
    if not (delta >= 0 and delta < limit):
        raise PreconditionError(
            f"need 0 <= delta < alpha/(4K^2) = {limit:.6g}, got delta = {delta:.6g}")
    return DichotomyData(d.P, 2.5 * d.K ** 2, d.alpha - 2.0 * d.K * delta,
                         note="same null space as P, range to be re-fit numerically")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------


def convolution_window(K: float, alpha: float, h_sup: float, tail_tol: float) -> float:
    """Half-width ``L`` whose discarded kernel tail is below ``tail_tol``."""
    if not tail_tol > 0:
        raise ValueError("tail_tol must be positive")
    if h_sup <= 0:
        return 0.0
    return float(max(0, math.ceil(math.log(2.0 * K * h_sup / (alpha * tail_tol)) / alpha)))


def _sweep(steps: np.ndarray, c: np.ndarray, dt: float, reverse: bool) -> np.ndarray:
    """Trapezoid recursion ``z_{i+1} = M_i z_i + dt/2 (M_i c_i + c_{i+1})``."""
    N, k = c.shape
    z = np.zeros((N, k))
    if k == 0:
        return z
    half = 0.5 * dt
    order = range(N - 1, 0, -1) if reverse else range(N - 1)
    if k == 1:
        m, cc = steps[:, 0, 0].tolist(), c[:, 0].tolist()
        out = [0.0] * N
        acc = 0.0
        if reverse:
            for i in order:
                mi = m[i - 1]
                acc = mi * (acc + half * cc[i]) + half * cc[i - 1]
                out[i - 1] = acc
        else:
            for i in order:
                mi = m[i]
                acc = mi * (acc + half * cc[i]) + half * cc[i + 1]
                out[i + 1] = acc
        z[:, 0] = out
        return z
    acc = np.zeros(k)
    if reverse:
        for i in order:
            acc = steps[i - 1] @ (acc + half * c[i]) + half * c[i - 1]
            z[i - 1] = acc
    else:
        for i in order:
            acc = steps[i] @ (acc + half * c[i]) + half * c[i + 1]
            z[i + 1] = acc
    return z


def convolve_nodes(kernel: GreenKernel, values: np.ndarray) -> np.ndarray:
    """``int G(t_j, s) h(s) ds`` over the whole kernel grid (no window checks).

    Values near the grid ends miss part of the kernel; callers pad the grid.
    """
    values = np.asarray(values, dtype=float)
    dt = kernel.grid.dt
    cs = np.einsum("nkd,nd->nk", kernel.Ws, values)
    cu = np.einsum("nkd,nd->nk", kernel.Wu, values)
    zs = _sweep(kernel.Rs, cs, dt, reverse=False)
    zu = _sweep(kernel.Su, cu, dt, reverse=True)
    return np.einsum("ndk,nk->nd", kernel.Us, zs) - np.einsum("ndk,nk->nd", kernel.Uu, zu)


def green_convolve(kernel: GreenKernel, h: GridFunction, tail_tol: float = 1e-8,
                   out_grid: TimeGrid | None = None) -> GridFunction:
    """Bounded solution ``y(t) = int G(t, s) h(s) ds`` of ``y' = A y + h``.

    ``h`` must live on (an aligned sub-grid of) the kernel grid. The integral
    is truncated to ``|t - s| <= L`` with ``L`` from :func:`convolution_window`.
    Without ``out_grid`` every node whose window fits is returned.
    """
    if kernel.dichotomy is None:
        raise ValueError("kernel carries no dichotomy constants")
    K, alpha = kernel.dichotomy.K, kernel.dichotomy.alpha
    L = convolution_window(K, alpha, h.sup_norm(), tail_tol)
    full = kernel.grid
    off = full.subgrid_offset(h.grid)
    vals = np.zeros((full.count, h.dimension))
    vals[off:off + h.grid.count] = h.values
    y = convolve_nodes(kernel, vals)
    m = int(math.ceil(L / full.dt - 1e-9))
    lo, hi = off + m, off + h.grid.count - 1 - m
    if out_grid is None:
        if lo > hi:
            raise SpanError(f"grid of h is shorter than the window 2L = {2 * L:g}")
        out_grid = TimeGrid(full.nodes[lo], full.dt, hi - lo + 1)
        if out_grid.count < 2:
            raise SpanError(f"grid of h is too short for the window L = {L:g}")
    k = full.subgrid_offset(out_grid)
    if k < lo or k + out_grid.count - 1 > hi:
        raise SpanError(
            f"requested nodes need data on [t-L, t+L] with L = {L:g}, beyond the grid of h")
    return GridFunction(out_grid, y[k:k + out_grid.count])
