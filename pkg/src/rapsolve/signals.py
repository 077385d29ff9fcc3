"""Remotely almost periodic signals: closed-form term lists, sampled grid
functions, translation-defect diagnostics and two-sided ergodic means.

A :class:`Signal` is a finite sum of primitive terms. Trigonometric terms give
the Bohr almost periodic part, catalog "slow" terms give slowly oscillating
parts, and :class:`CustomTerm` wraps an arbitrary callable with a declared
sup-bound (excluded from analytic certificates).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import SpanError

_CHUNK = 1 << 18


# ----------------------------------------------------------------------------
# time grids
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform nodes ``t_start + k*dt`` for ``k in range(count)``."""

    t_start: float
    dt: float
    count: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.count < 2:
            raise ValueError(f"a grid needs at least 2 nodes, got {self.count}")
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "count", int(self.count))

    @classmethod
    def from_span(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        """Grid covering ``[t_start, t_end]``; ``dt`` is kept, the end is rounded."""
        n = int(round((t_end - t_start) / dt))
        return cls(t_start, dt, n + 1)

    @classmethod
    def symmetric(cls, half_width: float, dt: float) -> "TimeGrid":
        n = int(round(half_width / dt))
        return cls(-n * dt, dt, 2 * n + 1)

    @property
    def t_end(self) -> float:
        return self.t_start + (self.count - 1) * self.dt

    @cached_property
    def nodes(self) -> np.ndarray:
        t = self.t_start + self.dt * np.arange(self.count)
        t[np.abs(t) < 1e-9 * self.dt] = 0.0
        return t

    def padded(self, pad: float) -> "TimeGrid":
        """Same spacing, extended by at least ``pad`` on both sides."""
        m = int(math.ceil(max(pad, 0.0) / self.dt - 1e-9))
        return TimeGrid(self.t_start - m * self.dt, self.dt, self.count + 2 * m)

    def index_of(self, t: float, atol: float | None = None) -> int:
        """Index of the node equal to ``t`` (within ``atol``, default dt*1e-6)."""
        atol = self.dt * 1e-6 if atol is None else atol
        k = int(round((t - self.t_start) / self.dt))
        if k < 0 or k >= self.count or abs(self.t_start + k * self.dt - t) > atol:
            raise SpanError(f"t={t} is not a node of {self}")
        return k

    def locate(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Interval index ``i`` and local offset ``t - t_i`` for arbitrary times."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.t_start, self.t_end
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            raise SpanError(f"times outside grid span [{lo}, {hi}]")
        i = np.clip(np.floor((t - lo) / self.dt).astype(int), 0, self.count - 2)
        return i, t - (lo + i * self.dt)

    def subgrid_offset(self, other: "TimeGrid") -> int:
        """Offset of ``other`` inside this grid (same spacing, aligned nodes)."""
        if abs(other.dt - self.dt) > 1e-12 * self.dt:
            raise SpanError("grids have different spacing")
        k = self.index_of(other.t_start)
        if k + other.count > self.count:
            raise SpanError("grid is not contained in the working grid")
        return k

    def to_dict(self) -> dict:
        return {"t_start": self.t_start, "dt": self.dt, "count": self.count}


# ----------------------------------------------------------------------------
# signal terms
# ----------------------------------------------------------------------------


def _vec(v, dimension=None) -> np.ndarray:
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise ValueError("coefficients must be vectors")
    if dimension is not None and a.shape[0] != dimension:
        raise ValueError(f"expected a vector of length {dimension}, got {a.shape[0]}")
    return a


@dataclass(frozen=True)
class TrigTerm:
    """``cos_coef*cos(omega t) + sin_coef*sin(omega t)``."""

    omega: float
    cos_coef: np.ndarray
    sin_coef: np.ndarray

    def __post_init__(self):
        c, s = _vec(self.cos_coef), _vec(self.sin_coef)
        if c.shape != s.shape:
            raise ValueError("cos and sin coefficient vectors differ in length")
        object.__setattr__(self, "cos_coef", c)
        object.__setattr__(self, "sin_coef", s)
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def dimension(self) -> int:
        return self.cos_coef.shape[0]

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        wt = self.omega * t[:, None]
        return np.cos(wt) * self.cos_coef + np.sin(wt) * self.sin_coef

    def sup_bound(self) -> float:
        return float(np.linalg.norm(np.hypot(self.cos_coef, self.sin_coef)))

    def to_dict(self) -> dict:
        return {"kind": "trig", "omega": self.omega,
                "cos": self.cos_coef.tolist(), "sin": self.sin_coef.tolist()}


def _rational(t):
    return t / (1.0 + np.abs(t))


def _sin_sqrt(t):
    return np.sin(np.sqrt(1.0 + np.abs(t)))


# (function, sup of |value|, sup of |derivative| on |u| >= x, odd?)
SLOW_CATALOG: dict[str, tuple[Callable, float, Callable[[float], float], bool]] = {
    "arctan": (np.arctan, math.pi / 2, lambda x: 1.0 / (1.0 + x * x), True),
    "tanh": (np.tanh, 1.0, lambda x: 1.0 / math.cosh(min(x, 350.0)) ** 2, True),
    "rational": (_rational, 1.0, lambda x: 1.0 / (1.0 + x) ** 2, True),
    "sin_sqrt": (_sin_sqrt, 1.0, lambda x: 0.5 / math.sqrt(1.0 + x), False),
}

SLOW_ALIASES = {"t/(1+|t|)": "rational", "sin(sqrt(1+|t|))": "sin_sqrt"}


@dataclass(frozen=True)
class SlowTerm:
    """Catalog slowly oscillating function times a scale vector.

    Catalog ids: ``arctan``, ``tanh``, ``rational`` (t/(1+|t|)) and
    ``sin_sqrt`` (sin(sqrt(1+|t|))).
    """

    kind: str
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", SLOW_ALIASES.get(self.kind, self.kind))
        if self.kind not in SLOW_CATALOG:
            raise ValueError(f"unknown slow term {self.kind!r}; choose from {sorted(SLOW_CATALOG)}")
        object.__setattr__(self, "scale", _vec(self.scale))

    @property
    def dimension(self) -> int:
        return self.scale.shape[0]

    @property
    def is_odd(self) -> bool:
        return SLOW_CATALOG[self.kind][3]

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        return SLOW_CATALOG[self.kind][0](t)[:, None] * self.scale

    def sup_bound(self) -> float:
        return SLOW_CATALOG[self.kind][1] * float(np.linalg.norm(self.scale))

    def tail_defect_bound(self, tau: float, tail: float) -> float:
        """Analytic bound of ``sup_{|t|>=tail} |s(t+tau)-s(t)|`` (needs tail > |tau|)."""
        tau = abs(tau)
        if tail <= tau:
            return 2.0 * self.sup_bound()
        deriv = SLOW_CATALOG[self.kind][2]
        return tau * deriv(tail - tau) * float(np.linalg.norm(self.scale))

    def to_dict(self) -> dict:
        return {"kind": "slow", "id": self.kind, "scale": self.scale.tolist()}


@dataclass(frozen=True)
class ConstTerm:
    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", _vec(self.value))

    @property
    def dimension(self) -> int:
        return self.value.shape[0]

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.value, (t.shape[0], self.dimension)).copy()

    def sup_bound(self) -> float:
        return float(np.linalg.norm(self.value))

    def to_dict(self) -> dict:
        return {"kind": "const", "value": self.value.tolist()}


@dataclass(frozen=True)
class CustomTerm:
    """Arbitrary map ``t -> vector``; ``fn`` receives an array of times and
    returns shape ``(len(t), dimension)``."""

    fn: Callable[[np.ndarray], np.ndarray]
    dimension: int
    bound: float

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(t), dtype=float)
        return out.reshape(t.shape[0], self.dimension)

    def sup_bound(self) -> float:
        return float(self.bound)

    def to_dict(self) -> dict:
        raise TypeError("custom terms cannot be serialized")


Term = TrigTerm | SlowTerm | ConstTerm | CustomTerm


# ----------------------------------------------------------------------------
# signals
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Signal:
    """Vector-valued function of time given as a sum of primitive terms."""

    dimension: int
    terms: tuple = field(default_factory=tuple)

    def __post_init__(self):
        terms = tuple(self.terms)
        for term in terms:
            if term.dimension != self.dimension:
                raise ValueError(
                    f"term of dimension {term.dimension} in a signal of dimension {self.dimension}")
        object.__setattr__(self, "terms", terms)

    # constructors -----------------------------------------------------------

    @classmethod
    def constant(cls, value) -> "Signal":
        v = _vec(value)
        return cls(v.shape[0], (ConstTerm(v),))

    @classmethod
    def trig(cls, omega, cos_coef=0.0, sin_coef=0.0, dimension=None) -> "Signal":
        c, s = np.atleast_1d(np.asarray(cos_coef, float)), np.atleast_1d(np.asarray(sin_coef, float))
        c, s = np.broadcast_arrays(c, s)
        return cls(c.shape[0], (TrigTerm(omega, c, s),))

    @classmethod
    def slow(cls, kind, scale=1.0) -> "Signal":
        sc = _vec(scale)
        return cls(sc.shape[0], (SlowTerm(kind, sc),))

    @classmethod
    def custom(cls, fn, dimension, bound) -> "Signal":
        return cls(dimension, (CustomTerm(fn, dimension, bound),))

    @classmethod
    def zero(cls, dimension: int) -> "Signal":
        return cls(dimension, ())

    # algebra ----------------------------------------------------------------

    def __add__(self, other: "Signal") -> "Signal":
        if not isinstance(other, Signal):
            return NotImplemented
        if other.dimension != self.dimension:
            raise ValueError("cannot add signals of different dimension")
        return Signal(self.dimension, self.terms + other.terms)

    def scaled(self, a: float) -> "Signal":
        out = []
        for term in self.terms:
            if isinstance(term, TrigTerm):
                out.append(TrigTerm(term.omega, a * term.cos_coef, a * term.sin_coef))
            elif isinstance(term, SlowTerm):
                out.append(SlowTerm(term.kind, a * term.scale))
            elif isinstance(term, ConstTerm):
                out.append(ConstTerm(a * term.value))
            else:
                fn = term.fn
                out.append(CustomTerm(lambda t, fn=fn: a * np.asarray(fn(t)), term.dimension,
                                      abs(a) * term.bound))
        return Signal(self.dimension, tuple(out))

    def __rmul__(self, a: float) -> "Signal":
        return self.scaled(float(a))

    # evaluation -------------------------------------------------------------

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t_arr).ravel()
        out = np.zeros((flat.shape[0], self.dimension))
        for term in self.terms:
            out += term.evaluate(flat)
        if t_arr.ndim == 0:
            return out[0]
        return out.reshape(t_arr.shape + (self.dimension,))

    def sup_bound(self) -> float:
        return float(sum(term.sup_bound() for term in self.terms))

    @property
    def is_analytic(self) -> bool:
        """True when no custom term is present (analytic certificates apply)."""
        return not any(isinstance(term, CustomTerm) for term in self.terms)

    def tail_defect_bound(self, tau: float, tail: float) -> float:
        """Upper bound of the remote translation defect from term structure.

        Trig terms contribute their exact translation defect, slow terms their
        tail modulus, constants nothing. Custom terms make the bound infinite.
        """
        total = 0.0
        trig = [term for term in self.terms if isinstance(term, TrigTerm)]
        for term in self.terms:
            if isinstance(term, SlowTerm):
                total += term.tail_defect_bound(tau, tail)
            elif isinstance(term, CustomTerm):
                return math.inf
        for term in trig:
            total += 2.0 * abs(math.sin(term.omega * tau / 2.0)) * term.sup_bound()
        return total

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "terms": [term.to_dict() for term in self.terms]}

    @classmethod
    def from_dict(cls, doc: dict) -> "Signal":
        validate_signal_document(doc)
        d = int(doc["dimension"])
        terms = []
        for item in doc["terms"]:
            kind = item["kind"]
            if kind == "trig":
                terms.append(TrigTerm(item["omega"], item.get("cos", [0.0] * d),
                                      item.get("sin", [0.0] * d)))
            elif kind == "slow":
                terms.append(SlowTerm(item["id"], item["scale"]))
            else:
                terms.append(ConstTerm(item["value"]))
        return cls(d, tuple(terms))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _load_schema(name: str) -> dict:
    with resources.files("rapsolve.schemas").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def validate_signal_document(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, _load_schema("signal.schema.json"))


def eval_signal(s: Signal, t: float) -> np.ndarray:
    """Value of ``s`` at a finite time ``t``."""
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return s(float(t))


# ----------------------------------------------------------------------------
# sampled functions
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples of a vector function on a :class:`TimeGrid`, shape (count, d)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.count:
            raise ValueError(f"{v.shape[0]} rows for a grid of {self.grid.count} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def sample(cls, s: Callable, grid: TimeGrid) -> "GridFunction":
        return cls(grid, s(grid.nodes))

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    @cached_property
    def _spline(self) -> CubicSpline:
        return CubicSpline(self.grid.nodes, self.values, axis=0)

    def __call__(self, t, kind: str = "cubic"):
        """Interpolated values at arbitrary times inside the grid span."""
        t_arr = np.asarray(t, dtype=float)
        self.grid.locate(t_arr)
        if kind == "cubic":
            return self._spline(t_arr)
        i, off = self.grid.locate(np.atleast_1d(t_arr).ravel())
        w = (off / self.grid.dt)[:, None]
        out = (1 - w) * self.values[i] + w * self.values[i + 1]
        return out[0] if t_arr.ndim == 0 else out.reshape(t_arr.shape + (self.dimension,))

    def restrict(self, grid: TimeGrid) -> "GridFunction":
        """Values on an aligned sub-grid."""
        k = self.grid.subgrid_offset(grid)
        return GridFunction(grid, self.values[k:k + grid.count])

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        if other.grid != self.grid:
            raise ValueError("grid functions live on different grids")
        return GridFunction(self.grid, self.values - other.values)

    def to_csv(self, path, prefix: str = "x") -> None:
        header = ["t"] + [f"{prefix}{j + 1}" for j in range(self.dimension)]
        write_csv(path, header, np.column_stack([self.grid.nodes, self.values]))

    @classmethod
    def from_csv(cls, path) -> "GridFunction":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        dt = float(t[1] - t[0])
        return cls(TimeGrid(float(t[0]), dt, t.shape[0]), data[:, 1:])


def write_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    """RFC-4180 CSV with a mandatory header row; floats in ``repr`` precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in np.asarray(rows, dtype=float):
            writer.writerow([repr(float(v)) for v in row])


# ----------------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------------


def _annulus_samples(tail: float, horizon: float, grid_dt: float) -> np.ndarray:
    if grid_dt <= 0:
        raise ValueError(f"grid_dt must be positive, got {grid_dt}")
    if not tail < horizon:
        raise ValueError(f"tail ({tail}) must be smaller than horizon ({horizon})")
    n = int(math.ceil((horizon - tail) / grid_dt)) + 1
    pos = np.linspace(tail, horizon, n)
    return np.concatenate([-pos[::-1], pos])


def remote_translation_defect(s, tau: float, tail: float = 100.0, horizon: float | None = None,
                              grid_dt: float = 0.01) -> float:
    """Sup of ``|s(t+tau) - s(t)|`` over sampled ``tail <= |t| <= horizon``.

    This is the finite-window stand-in for the limsup as ``|t| -> inf``.
    ``s`` may be a :class:`Signal` or a :class:`GridFunction`; for the latter
    only sample points with ``t`` and ``t+tau`` inside the grid are used.
    """
    horizon = 10.0 * tail if horizon is None else horizon
    t = _annulus_samples(tail, horizon, grid_dt)
    if isinstance(s, GridFunction):
        lo, hi = s.grid.t_start, s.grid.t_end
        t = t[(t >= lo) & (t <= hi) & (t + tau >= lo) & (t + tau <= hi)]
        if t.size == 0:
            raise SpanError("annulus does not intersect the grid function span")
    worst = 0.0
    for k in range(0, t.shape[0], _CHUNK):
        tc = t[k:k + _CHUNK]
        diff = s(tc + tau) - s(tc)
        worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1))))
    return worst


@dataclass(frozen=True, eq=False)
class ScanResult:
    taus: np.ndarray
    defects: np.ndarray
    epsilon: float
    step: float

    @property
    def accepted(self) -> np.ndarray:
        return self.taus[self.defects < self.epsilon]

    @property
    def max_gap(self) -> float:
        """Largest gap between consecutive accepted shifts (inf if fewer than 2)."""
        acc = self.accepted
        if acc.size < 2:
            return math.inf
        return float(np.max(np.diff(acc)))


def epsilon_translation_scan(s, epsilon: float, search_range: float, tail: float = 100.0,
                             horizon: float | None = None, step: float | None = None,
                             grid_dt: float = 0.05) -> ScanResult:
    """Scan shifts in ``[-search_range, search_range]`` for epsilon-remote translations."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not search_range > 0:
        raise ValueError("search_range must be positive")
    horizon = 10.0 * tail if horizon is None else horizon
    step = search_range / 2000.0 if step is None else step
    n = int(round(search_range / step))
    taus = step * np.arange(-n, n + 1)
    t = _annulus_samples(tail, horizon, grid_dt)
    base = s(t)
    defects = np.empty_like(taus)
    batch = max(1, _CHUNK // t.shape[0])
    for k in range(0, taus.shape[0], batch):
        tb = taus[k:k + batch]
        shifted = s((t[None, :] + tb[:, None]).ravel()).reshape(tb.shape[0], t.shape[0], -1)
        defects[k:k + batch] = np.max(np.linalg.norm(shifted - base[None], axis=2), axis=1)
    return ScanResult(taus, defects, float(epsilon), float(step))


def trapezoid_mean(fn: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                   dt: float) -> np.ndarray:
    """``(1/(b-a)) * int_a^b fn`` by the composite trapezoid rule, chunked."""
    n = max(1, int(math.ceil((b - a) / dt)))
    h = (b - a) / n
    total = None
    for k in range(0, n + 1, _CHUNK):
        idx = np.arange(k, min(n + 1, k + _CHUNK))
        vals = np.asarray(fn(a + h * idx), dtype=float)
        w = np.ones(idx.shape[0])
        w[idx == 0] = 0.5
        w[idx == n] = 0.5
        part = np.tensordot(w, vals, axes=(0, 0))
        total = part if total is None else total + part
    return total * h / (b - a)


def ergodic_mean(s: Callable, T: float, dt: float = 0.01) -> np.ndarray:
    """Two-sided mean ``(1/2T) int_{-T}^{T} s(t) dt``."""
    if not T > 0:
        raise ValueError("T must be positive")
    return trapezoid_mean(s, -T, T, dt)
