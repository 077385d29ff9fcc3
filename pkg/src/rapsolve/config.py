"""Run-configuration documents: validation and construction of problem objects."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .dichotomy import DichotomyData, MatrixFunction
from .fields import Field, ParamField, PolynomialField, forcing_field, zero_field
from .signals import Signal, TimeGrid

SCHEMA_VERSION = 1

BUILTIN_FIELDS = {
    "zero": lambda d: zero_field(d),
    "quadratic_demo": lambda d: PolynomialField(1, [(0, (2,), 0.2)]),
}


class ConfigError(ValueError):
    """Invalid configuration document; ``where`` locates the problem when known."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(message if where is None else f"{message} (at {where})")


def load_config(path) -> dict:
    """Parse and validate a JSON configuration file.

    Raises :class:`ConfigError` with line and column for malformed JSON.
    """
    text = open(path, encoding="utf-8").read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc
    validate_config(doc)
    return doc


def validate_config(doc) -> None:
    import jsonschema

    schema = json.loads(resources.files("rapsolve.schemas").joinpath("config.schema.json")
                        .read_text(encoding="utf-8"))
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration: {exc.message}", where) from exc


def grid_from(doc: dict, default=(20.0, 0.01)) -> TimeGrid:
    g = doc.get("grid", {})
    return TimeGrid.symmetric(float(g.get("half_width", default[0])), float(g.get("dt", default[1])))


def nu_list(doc: dict, override=None) -> list[float]:
    if override is not None:
        return [float(v) for v in override]
    nu = doc.get("nu", 0.0)
    return [float(v) for v in (nu if isinstance(nu, list) else [nu])]


def tolerances(doc: dict, tol=None) -> dict:
    t = {"fixed_point_tol": 1e-8, "tail_tol": 1e-10, "residual_tol": 1e-4}
    t.update(doc.get("tolerances", {}))
    if tol is not None:
        t["fixed_point_tol"] = float(tol)
    return t


def matrix_function(doc) -> MatrixFunction:
    return MatrixFunction.from_dict(doc)


def dichotomy_from(doc) -> DichotomyData | None:
    if doc is None:
        return None
    return DichotomyData(np.atleast_2d(np.asarray(doc["P"], dtype=float)), float(doc["K"]),
                         float(doc["alpha"]))


def field_from(spec, dimension: int) -> Field:
    """A builtin id, or a polynomial document ``{"dimension", "n_vars", "terms"}``."""
    if isinstance(spec, str):
        if spec not in BUILTIN_FIELDS:
            raise ConfigError(f"unknown builtin field {spec!r}; choose from {sorted(BUILTIN_FIELDS)}")
        return BUILTIN_FIELDS[spec](dimension)
    if "signal" in spec:
        return forcing_field(Signal.from_dict(spec["signal"]), spec.get("n_vars"))
    return PolynomialField.from_dict(spec)


def param_field_from(spec, dimension: int) -> ParamField:
    """``g(t, x, nu) = nu * base(t, x)``; ``base`` given as in :func:`field_from`."""
    if spec is None:
        return ParamField.zero(dimension)
    if isinstance(spec, dict) and "field" in spec:
        spec = spec["field"]
    return ParamField.nu_times(field_from(spec, dimension))


def averaging_field_from(doc: dict) -> ParamField:
    """``f(t, x, nu) = base(t, x) + nu * extra(t, x)`` from ``{"base": .., "nu_part": ..}``."""
    base = field_from(doc["base"], int(doc.get("dimension", 1)))
    extra = doc.get("nu_part")
    if extra is None:
        return ParamField(base.dimension, lambda t, x, nu: base(t, x), base.n_vars,
                          lambda t, x, nu: base.jacobian(t, x))
    ex = field_from(extra, base.dimension)
    return ParamField(base.dimension, lambda t, x, nu: base(t, x) + nu * ex(t, x), base.n_vars,
                      lambda t, x, nu: base.jacobian(t, x) + nu * ex.jacobian(t, x))
