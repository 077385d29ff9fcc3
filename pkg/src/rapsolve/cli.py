"""Command-line front end.

Usage: ``rapsolve <command> [--config PATH] [--out DIR] [--nu LIST] [--tol FLOAT] [--svg]``

Exit codes: 0 success, 1 I/O or parse error, 2 hypothesis failure (the
report is still written), 64 unknown command.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

COMMANDS = ("signal-scan", "dichotomy", "solve", "solve-delay", "average", "demo")
EX_OK, EX_IO, EX_HYPOTHESIS, EX_USAGE = 0, 1, 2, 64

USAGE = """usage: rapsolve <command> [--config PATH] [--out DIR] [--nu LIST] [--tol FLOAT] [--svg]

commands:
  signal-scan   translation defects, epsilon-translation scan and ergodic mean of a signal
  dichotomy     fit and verify exponential dichotomy constants of x' = A(t) x
  solve         perturbed semilinear solve x' = A x + f(t, x) + nu g(t, x)
  solve-delay   delayed solve y' = A y + h(t) + nu g(t, y(t), y(t - lag))
  average       averaging reduction and solve of x' = nu f(t, x, nu)
  demo          built-in demonstrations (demo brusselator)
"""


def _limit_threads() -> int | None:
    """Honour ``RAPSOLVE_THREADS`` before numerical libraries load."""
    raw = os.environ.get("RAPSOLVE_THREADS")
    if raw is None:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("RAPSOLVE_THREADS must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rapsolve", add_help=True)
    p.add_argument("target", nargs="?", help="demo name (brusselator)")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--nu", type=lambda s: [float(v) for v in s.split(",") if v.strip()])
    p.add_argument("--tol", type=float)
    p.add_argument("--svg", action="store_true")
    return p


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")
    return path


def _json_default(o):
    import numpy as np

    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _nu_tag(nu: float) -> str:
    return f"nu={nu:g}"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_signal_scan(doc, args, out: Path) -> dict:
    import numpy as np

    from .signals import Signal, epsilon_translation_scan, ergodic_mean, remote_translation_defect, write_csv

    s = Signal.from_dict(doc["signal"])
    tail = float(doc.get("tail", 100.0))
    horizon = doc.get("horizon")
    taus = [float(v) for v in doc.get("tau", [])]
    rows = [[tau, remote_translation_defect(s, tau, tail, horizon)] for tau in taus]
    write_csv(out / "defects.csv", ["tau", "defect"], np.array(rows).reshape(-1, 2))
    report = {"defects": rows}
    if "epsilon" in doc:
        scan = epsilon_translation_scan(s, float(doc["epsilon"]), float(doc.get("search_range", 20.0)),
                                        tail, horizon)
        write_csv(out / "scan.csv", ["tau", "defect"], np.column_stack([scan.taus, scan.defects]))
        report["scan"] = {"epsilon": scan.epsilon, "accepted": int(scan.accepted.sum()),
                          "max_gap": scan.max_gap}
    if "ergodic_T" in doc:
        report["ergodic_mean"] = ergodic_mean(s, float(doc["ergodic_T"])).tolist()
    _write_json(out / "signal_report.json", {"schema_version": 1, "status": "ok", **report})
    return {"status": "ok"}


def cmd_dichotomy(doc, args, out: Path) -> dict:
    import numpy as np

    from . import config
    from .dichotomy import GreenKernel, estimate_dichotomy, integrate_fundamental, verify_dichotomy
    from .fixed_point import stable_projection

    A = config.matrix_function(doc["A"])
    grid = config.grid_from(doc, (30.0, 0.01))
    fund = integrate_fundamental(A, grid)
    P = doc.get("projection", "spectral")
    P = stable_projection(np.mean(A(grid.nodes), axis=0)) if P == "spectral" else np.asarray(P, float)
    fit = estimate_dichotomy(fund, P, int(doc.get("sample_pairs", 512)))
    kernel = GreenKernel(fund, fit.data)
    ver = verify_dichotomy(kernel, int(doc.get("verification_pairs", 512)), seed=int(doc.get("seed", 0)))
    ver.to_csv(out / "verify.csv")
    _write_json(out / "dichotomy_report.json", {"schema_version": 1, "status": "ok",
                                                "fit": fit.to_dict(), "P": fit.data.P,
                                                "verify_worst_ratio": ver.worst_ratio,
                                                "verify_passed": ver.passed})
    return {"status": "ok"}


def _solution_csv(path: Path, res) -> None:
    import numpy as np

    from .signals import write_csv

    d = res.xi.dimension
    header = ["t"] + [f"xi_{j + 1}" for j in range(d)] + [f"psi_{j + 1}" for j in range(d)]
    write_csv(path, header, np.column_stack([res.xi.t, res.xi.values, res.psi_nu.values]))


def cmd_solve(doc, args, out: Path) -> dict:
    from . import config
    from .fixed_point import PerturbedProblem, solve_perturbed

    A = config.matrix_function(doc["A"])
    d = A.dimension
    f = config.field_from(doc.get("f", "zero"), d)
    g = config.param_field_from(doc.get("g"), d)
    grid = config.grid_from(doc)
    tol = config.tolerances(doc, args.tol)
    enforce = bool(doc.get("enforce_hypotheses", True))
    dich = config.dichotomy_from(doc.get("dichotomy"))
    nus = config.nu_list(doc, args.nu)
    runs = []
    for nu in nus:
        prob = PerturbedProblem(A, f, g, nu, float(doc["r"]), grid, dich, tail_tol=tol["tail_tol"],
                                seed=int(doc.get("seed", 0)))
        res = solve_perturbed(prob, tol["fixed_point_tol"], enforce_hypotheses=enforce,
                              residual_tol=tol["residual_tol"])
        dich = prob.dichotomy
        name = "psi.csv" if len(nus) == 1 else f"psi_{_nu_tag(nu)}.csv"
        _solution_csv(out / name, res)
        runs.append({"nu": nu, "csv": name, **res.to_report()})
    ok = all(r["residual_ok"] for r in runs)
    _write_json(out / "solve_report.json", {"schema_version": 1, "status": "ok" if ok else "residual",
                                            "runs": runs})
    return {"status": "ok"}


def cmd_solve_delay(doc, args, out: Path) -> dict:
    from . import config
    from .fixed_point import solve_delay
    from .signals import Signal

    A = config.matrix_function(doc["A"])
    d = A.dimension
    h = Signal.from_dict(doc["h"]) if "h" in doc else Signal.zero(d)
    g = config.field_from(doc["g"], d)
    grid = config.grid_from(doc)
    tol = config.tolerances(doc, args.tol)
    dich = config.dichotomy_from(doc["dichotomy"])
    runs = []
    nus = config.nu_list(doc, args.nu)
    for nu in nus:
        res = solve_delay(A, dich, h, g, float(doc["lag"]), nu, float(doc["r"]), grid,
                          tol["fixed_point_tol"], tail_tol=tol["tail_tol"],
                          residual_tol=tol["residual_tol"], M1=doc.get("M1"), g_sup=doc.get("g_sup"),
                          seed=int(doc.get("seed", 0)))
        name = "psi.csv" if len(nus) == 1 else f"psi_{_nu_tag(nu)}.csv"
        _solution_csv(out / name, res)
        runs.append({"nu": nu, "csv": name, **res.to_report()})
    _write_json(out / "delay_report.json", {"schema_version": 1, "status": "ok", "runs": runs})
    return {"status": "ok"}


def cmd_average(doc, args, out: Path) -> dict:
    import numpy as np

    from . import config
    from .averaging import solve_averaged
    from .signals import write_csv

    fld = config.averaging_field_from(doc["field"])
    tol = config.tolerances(doc, args.tol)
    r0 = float(doc.get("r0", 0.5))
    x_init = doc.get("x_init", [0.0] * fld.n_vars)
    avg_T = float(doc.get("avg_T", 1000.0))
    grid = doc.get("grid", {})
    trace, per_nu = [], []
    eq = None
    for nu in config.nu_list(doc, args.nu):
        res = solve_averaged(fld, nu, r0, tol["fixed_point_tol"], x_init=x_init,
                             half_width=float(grid.get("half_width", 20.0)),
                             dt=float(grid.get("dt", 0.02)), residual_tol=tol["residual_tol"],
                             avg_T=avg_T)
        eq = res.hypothesis
        diag = res.info["diagnostics"]
        trace.append([nu, res.info["sup_F"], diag["sup_nuU"], diag["sup_nudU"], diag["sup_G"],
                      diag["sup_dG"]])
        name = f"phi_{_nu_tag(nu)}.csv"
        res.psi_nu.to_csv(out / name, prefix="phi_")
        per_nu.append({"nu": nu, "csv": name, "diagnostics": diag, "sup_F": res.info["sup_F"],
                       "residual_sup": res.residual_sup, "residual_ok": res.residual_ok,
                       "sup_phi_minus_x0": res.info["sup_phi_minus_x0"],
                       "iterate_norms": res.iterate_norms})
    write_csv(out / "reduced_trace.csv", ["nu", "sup_F", "sup_nuU", "sup_nudU", "sup_G", "sup_dG"],
              np.array(trace).reshape(-1, 6))
    report = {"schema_version": 1, "status": "ok", "x0": eq.x0, "eigenvalues":
              eq.to_dict()["eigenvalues"], "hyperbolic": eq.hyperbolic, "runs": per_nu}
    _write_json(out / "averaging_report.json", report)
    return {"status": "ok"}


def cmd_demo(doc, args, out: Path) -> dict:
    from . import config
    from .brusselator import BrusselatorSpec, run_demo
    from .signals import Signal

    name = args.target or "brusselator"
    if name != "brusselator":
        raise KeyError(f"unknown demo {name!r}")
    spec = BrusselatorSpec()
    if "a" in doc:
        spec.a = Signal.from_dict(doc["a"])
    if "b" in doc:
        spec.b = Signal.from_dict(doc["b"])
    if "r" in doc:
        spec.r = float(doc["r"])
    nus = config.nu_list(doc, args.nu) if ("nu" in doc or args.nu) else [spec.nu]
    spec.nu = nus[0]
    tol = config.tolerances(doc, args.tol)
    grid = config.grid_from(doc, (30.0, 0.01))
    run_demo(spec, grid, out, tol["fixed_point_tol"], tol["residual_tol"], svg=args.svg)
    return {"status": "ok"}


HANDLERS = {"signal-scan": cmd_signal_scan, "dichotomy": cmd_dichotomy, "solve": cmd_solve,
            "solve-delay": cmd_solve_delay, "average": cmd_average, "demo": cmd_demo}


def run(argv: list[str]) -> int:
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE)
        return EX_OK if argv else EX_USAGE
    command = argv[0]
    if command not in COMMANDS:
        sys.stderr.write(f"rapsolve: unknown command {command!r}\n\n{USAGE}")
        return EX_USAGE
    args = _parser().parse_args(argv[1:])
    out: Path = args.out
    try:
        threads = _limit_threads()
        out.mkdir(parents=True, exist_ok=True)
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"rapsolve: {exc}\n")
        return EX_IO

    from .config import ConfigError, load_config
    from .errors import HypothesisError, RapError

    def fail(code, kind, exc, report=None):
        doc = {"schema_version": 1, "status": "error", "command": command, "kind": kind,
               "error": str(exc), "exit_code": code}
        if report is not None:
            doc["report"] = report.to_dict() if hasattr(report, "to_dict") else report
        try:
            _write_json(out / "error_report.json", doc)
        except OSError:
            pass
        sys.stderr.write(f"rapsolve {command}: {exc}\n")
        return code

    try:
        doc = load_config(args.config) if args.config is not None else {"schema_version": 1}
    except ConfigError as exc:
        return fail(EX_IO, "config", exc)
    except OSError as exc:
        return fail(EX_IO, "io", exc)
    if threads is not None:
        doc.setdefault("threads", threads)
    try:
        HANDLERS[command](doc, args, out)
    except HypothesisError as exc:
        return fail(EX_HYPOTHESIS, "hypothesis", exc, exc.report)
    except (OSError, ConfigError, KeyError) as exc:
        return fail(EX_IO, "io", exc)
    except RapError as exc:
        return fail(EX_HYPOTHESIS, type(exc).__name__, exc, getattr(exc, "report", None))
    except ValueError as exc:
        return fail(EX_IO, "value", exc)
    except Exception as exc:  # report before propagating an unexpected failure
        fail(EX_IO, "internal", f"{exc}\n{traceback.format_exc()}")
        return EX_IO
    return EX_OK


def main(argv: list[str] | None = None) -> int:
    return run(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    raise SystemExit(main())
