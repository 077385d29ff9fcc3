"""State-dependent vector fields ``f(t, x)`` with first and second derivatives.

All callables are vectorized: times have shape ``(N,)``, states ``(N, n)``
and values ``(N, d)``. Jacobians are ``(N, d, n)`` and Hessians
``(N, d, n, n)``. Missing derivatives fall back to central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .signals import Signal

_FD_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class Field:
    """Vector field with ``dimension`` outputs and ``n_vars`` state inputs."""

    dimension: int
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Callable | None = None
    hess: Callable | None = None
    n_vars: int | None = None

    def __post_init__(self):
        if self.n_vars is None:
            object.__setattr__(self, "n_vars", self.dimension)

    def __call__(self, t, x) -> np.ndarray:
        t, x = _prep(t, x, self.n_vars)
        return np.asarray(self.fn(t, x), dtype=float).reshape(t.shape[0], self.dimension)

    def jacobian(self, t, x) -> np.ndarray:
        t, x = _prep(t, x, self.n_vars)
        if self.jac is not None:
            return np.asarray(self.jac(t, x), dtype=float).reshape(t.shape[0], self.dimension,
                                                                   self.n_vars)
        out = np.empty((t.shape[0], self.dimension, self.n_vars))
        for i in range(self.n_vars):
            e = np.zeros(self.n_vars)
            e[i] = _FD_STEP
            out[:, :, i] = (self(t, x + e) - self(t, x - e)) / (2 * _FD_STEP)
        return out

    def hessian(self, t, x) -> np.ndarray:
        t, x = _prep(t, x, self.n_vars)
        if self.hess is not None:
            return np.asarray(self.hess(t, x), dtype=float).reshape(
                t.shape[0], self.dimension, self.n_vars, self.n_vars)
        out = np.empty((t.shape[0], self.dimension, self.n_vars, self.n_vars))
        for i in range(self.n_vars):
            e = np.zeros(self.n_vars)
            e[i] = _FD_STEP
            out[:, :, :, i] = (self.jacobian(t, x + e) - self.jacobian(t, x - e)) / (2 * _FD_STEP)
        return out

    def __add__(self, other: "Field") -> "Field":
        if (other.dimension, other.n_vars) != (self.dimension, self.n_vars):
            raise ValueError("fields of different shape")
        a, b = self, other
        jac = (lambda t, x: a.jacobian(t, x) + b.jacobian(t, x))
        hess = (lambda t, x: a.hessian(t, x) + b.hessian(t, x))
        return Field(self.dimension, lambda t, x: a(t, x) + b(t, x), jac, hess, self.n_vars)

    def scaled(self, c: float) -> "Field":
        a = self
        return Field(self.dimension, lambda t, x: c * a(t, x), lambda t, x: c * a.jacobian(t, x),
                     lambda t, x: c * a.hessian(t, x), self.n_vars)


def _prep(t, x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == n else x.reshape(-1, 1)
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=float)), (x.shape[0],))
    return t, x


def zero_field(dimension: int, n_vars: int | None = None) -> Field:
    n = dimension if n_vars is None else n_vars
    return Field(dimension, lambda t, x: np.zeros((t.shape[0], dimension)),
                 lambda t, x: np.zeros((t.shape[0], dimension, n)),
                 lambda t, x: np.zeros((t.shape[0], dimension, n, n)), n)


def forcing_field(s: Signal, n_vars: int | None = None) -> Field:
    """State-independent field ``f(t, x) = s(t)``."""
    d = s.dimension
    n = d if n_vars is None else n_vars
    return Field(d, lambda t, x: s(t), lambda t, x: np.zeros((t.shape[0], d, n)),
                 lambda t, x: np.zeros((t.shape[0], d, n, n)), n)


def linear_field(M, n_vars: int | None = None) -> Field:
    """``f(t, x) = M x`` (``M`` may be ``d x n_vars``)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d, n = M.shape
    return Field(d, lambda t, x: x @ M.T, lambda t, x: np.broadcast_to(M, (t.shape[0], d, n)),
                 lambda t, x: np.zeros((t.shape[0], d, n, n)), n)


@dataclass(frozen=True)
class Monomial:
    """``coef(t) * prod_j x_j^powers[j]`` contributing to output ``out``."""

    out: int
    powers: tuple
    coef: float | Signal = 1.0

    def coefficient(self, t: np.ndarray) -> np.ndarray:
        if isinstance(self.coef, Signal):
            return self.coef(t)[:, 0]
        return np.full(t.shape[0], float(self.coef))


def _mono(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.prod(np.where(p > 0, x ** p, 1.0), axis=1)


class PolynomialField(Field):
    """Sum of monomials in the state with constant or signal coefficients."""

    def __init__(self, dimension: int, monomials, n_vars: int | None = None):
        n = dimension if n_vars is None else n_vars
        monos = []
        for m in monomials:
            if not isinstance(m, Monomial):
                m = Monomial(int(m[0]), tuple(m[1]), m[2] if len(m) > 2 else 1.0)
            if len(m.powers) != n or not 0 <= m.out < dimension or min(m.powers, default=0) < 0:
                raise ValueError(f"bad monomial {m}")
            monos.append(Monomial(m.out, tuple(int(p) for p in m.powers), m.coef))
        self_monos = tuple(monos)

        def fn(t, x):
            out = np.zeros((t.shape[0], dimension))
            for m in self_monos:
                out[:, m.out] += m.coefficient(t) * _mono(x, np.array(m.powers))
            return out

        def jac(t, x):
            out = np.zeros((t.shape[0], dimension, n))
            for m in self_monos:
                c = m.coefficient(t)
                for i in range(n):
                    p = np.array(m.powers)
                    if p[i] == 0:
                        continue
                    k = p[i]
                    p[i] -= 1
                    out[:, m.out, i] += c * k * _mono(x, p)
            return out

        def hess(t, x):
            out = np.zeros((t.shape[0], dimension, n, n))
            for m in self_monos:
                c = m.coefficient(t)
                for i in range(n):
                    for j in range(n):
                        p = np.array(m.powers)
                        k1 = p[i]
                        if k1 == 0:
                            continue
                        p[i] -= 1
                        k2 = p[j]
                        if k2 == 0:
                            continue
                        p[j] -= 1
                        out[:, m.out, i, j] += c * k1 * k2 * _mono(x, p)
            return out

        super().__init__(dimension, fn, jac, hess, n)
        object.__setattr__(self, "monomials", self_monos)

    @property
    def degree(self) -> int:
        return max((sum(m.powers) for m in self.monomials), default=0)

    def to_dict(self) -> dict:
        terms = []
        for m in self.monomials:
            coef = m.coef.to_dict() if isinstance(m.coef, Signal) else float(m.coef)
            terms.append({"out": m.out, "powers": list(m.powers), "coef": coef})
        return {"dimension": self.dimension, "n_vars": self.n_vars, "terms": terms}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolynomialField":
        d = int(doc["dimension"])
        monos = []
        for item in doc.get("terms", []):
            coef = item.get("coef", 1.0)
            if isinstance(coef, dict):
                coef = Signal.from_dict(coef)
            monos.append(Monomial(int(item["out"]), tuple(item["powers"]), coef))
        return cls(d, monos, doc.get("n_vars"))


@dataclass(frozen=True, eq=False)
class ParamField:
    """Parametrized field ``g(t, x, nu)``; ``fn(t, x, nu)`` is vectorized in ``(t, x)``."""

    dimension: int
    fn: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    n_vars: int | None = None
    jac: Callable | None = None

    def __post_init__(self):
        if self.n_vars is None:
            object.__setattr__(self, "n_vars", self.dimension)

    def __call__(self, t, x, nu: float) -> np.ndarray:
        t, x = _prep(t, x, self.n_vars)
        return np.asarray(self.fn(t, x, float(nu)), dtype=float).reshape(t.shape[0], self.dimension)

    def at(self, nu: float) -> Field:
        """Freeze the parameter."""
        g = self
        jac = None if self.jac is None else (lambda t, x: g.jac(t, x, nu))
        return Field(self.dimension, lambda t, x: g(t, x, nu), jac, None, self.n_vars)

    @classmethod
    def nu_times(cls, field: Field) -> "ParamField":
        """``g(t, x, nu) = nu * field(t, x)``."""
        return cls(field.dimension, lambda t, x, nu: nu * field(t, x), field.n_vars,
                   lambda t, x, nu: nu * field.jacobian(t, x))

    @classmethod
    def zero(cls, dimension: int, n_vars: int | None = None) -> "ParamField":
        return cls.nu_times(zero_field(dimension, n_vars))
