"""Batch front end: ``frac-heat-lab <config.json> [--mode M] [--out DIR] [--threads K]``.

The experiment is described by a JSON config; the mode selects what is
run.  Outputs land in the output directory:

``manifest.json``
    config hash, package and library versions, input and output hashes.
``result.json``
    the mode's result, serialised with sorted keys.
``sweep.csv`` / ``sweep.svg``
    the lambda sweep table and plot (sweep mode).
``evolve.svg``
    sup-norm history (evolve mode).

Exit codes: 0 success, 2 invalid config or input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np
import scipy

from . import __version__
from .kernel import (KernelError, build_kernel, check_bounds, check_chapman_kolmogorov)
from .nonlinearity import (NonlinearityError, build_calculus, classify, estimate_qf,
                           from_spec)
from .semigroup import GridField, SemigroupError, discretize, indicator_ball, power_singularity
from .solvability import (SWEEP_COLUMNS, SolvabilityError, bracket_lambda0, check_necessary,
                          check_sufficient, check_supersolution, make_dcs)
from .solver import SolverError, mild_solve

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
MODES = ("classify", "kernel-check", "evolve", "necessary", "sufficient", "sweep")

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["nonlinearity", "N", "theta", "mode"],
    "additionalProperties": False,
    "properties": {
        "nonlinearity": {
            "type": "object",
            "required": ["family"],
            "properties": {
                "family": {"enum": ["power", "powersum", "powerlog", "expn", "exp", "custom"]},
            },
        },
        "N": {"enum": [1, 2, 3]},
        "theta": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
        "mode": {"enum": list(MODES)},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"L": _POS, "M": {"type": "integer", "minimum": 2}},
        },
        "time": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _POS, "dt": _POS, "cap": _POS, "tol": _POS, "safety": _POS,
                "scheme": {"enum": ["history", "stepping"]},
                "adaptive": {"type": "boolean"},
                "refine": {"enum": ["blowup", "always", "never"]},
            },
        },
        "data": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "indicator", "power", "dcs"]},
                "value": {"type": "number", "minimum": 0},
                "radius": _POS, "height": _POS, "a": _NUM, "scale": _POS,
                "family": {"enum": ["Generic", "Power", "Exp", "PowerLog", "ExpN"]},
                "params": {"type": "object"},
                "lambda": _POS, "cutoff": _POS,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_min": _POS, "lambda_max": _POS,
                "points": {"type": "integer", "minimum": 2},
                "bisections": {"type": "integer", "minimum": 0},
            },
        },
        "necessary": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "Cstar": _POS, "Tstar": _POS,
                "t_grid": {"type": "array", "items": _POS, "minItems": 1},
            },
        },
        "sufficient": {
            "type": "object",
            "additionalProperties": False,
            "required": ["beta", "delta", "eps", "T"],
            "properties": {"beta": _POS, "delta": _POS, "eps": _POS, "T": _POS,
                           "kappa": {"type": "number", "exclusiveMinimum": 1},
                           "steps": {"type": "integer", "minimum": 0}},
        },
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "grid": {"L": 2.0, "M": 1024},
    "time": {"T": 1e-4, "dt": 1e-5, "cap": 1e8, "tol": 1e-10, "safety": 0.05,
             "scheme": "stepping", "adaptive": True, "refine": "blowup"},
    "sweep": {"lambda_min": 1e-3, "lambda_max": 1e3, "points": 13, "bisections": 4},
    "necessary": {"Cstar": 1.0},
    "output": "out",
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""


def _path(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def load_config(source) -> dict:
    """Parse, validate and fill defaults.  Raises :class:`ConfigError`."""
    if isinstance(source, dict):
        cfg = copy.deepcopy(source)
    else:
        try:
            cfg = json.loads(Path(source).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {source} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            cfg[key] = {**value, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, value)
    M = cfg["grid"]["M"]
    if M & (M - 1):
        raise ConfigError(f"$.grid.M: {M} is not a power of two")
    sw = cfg["sweep"]
    if not sw["lambda_min"] < sw["lambda_max"]:
        raise ConfigError("$.sweep.lambda_min: must be smaller than lambda_max")
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the experiment content; the output location does not count."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


# ----------------------------------------------------------------------------
# plotting
# ----------------------------------------------------------------------------

def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "frac-heat-lab"
    matplotlib.rcParams["svg.fonttype"] = "path"
    return plt


def _save_svg(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    path.write_bytes(buf.getvalue())


VERDICT_COLORS = {"Converged": "tab:blue", "BlowUpEvidence": "tab:red",
                  "Inconclusive": "tab:gray"}


def plot_sweep(rows: Sequence[dict], path: Path) -> None:
    """lambda against final sup-norm, one marker per run coloured by verdict."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    if not rows:
        ax.text(0.5, 0.5, "empty sweep", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
    else:
        for verdict, color in VERDICT_COLORS.items():
            sel = [r for r in rows if r["verdict"] == verdict]
            if sel:
                ax.scatter([r["lambda"] for r in sel],
                           [max(r["sup_final"], 1e-300) for r in sel],
                           c=color, label=verdict, marker="o", gid=f"markers-{verdict}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("lambda")
        ax.set_ylabel("sup-norm at end of run")
        ax.legend(loc="best")
    _save_svg(fig, path)
    plt.close(fig)


def plot_evolution(times: Sequence[float], sups: Sequence[float], path: Path) -> None:
    """Sup-norm against time on a logarithmic value axis."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(times) == 0:
        ax.text(0.5, 0.5, "no history", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
    else:
        ax.plot(times, sups, color="tab:blue")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("sup-norm")
    _save_svg(fig, path)
    plt.close(fig)


def write_sweep_csv(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r["lambda"])), r["verdict"], repr(float(r["T_reached"])),
                        repr(float(r["sup_final"])), repr(float(r["residual_final"])),
                        "" if r["refinement_stable"] is None
                        else str(r["refinement_stable"]).lower()])


def render_report(out_dir) -> list:
    """Regenerate CSV and SVG files from ``result.json`` in ``out_dir``.

    Returns the list of files written.  Raises FileNotFoundError when the
    result file is missing.
    """
    out = Path(out_dir)
    result_path = out / "result.json"
    if not result_path.exists():
        raise FileNotFoundError(f"{result_path} does not exist")
    result = json.loads(result_path.read_text())
    written = []
    if "sweep" in result:
        rows = result["sweep"]["rows"]
        write_sweep_csv(rows, out / "sweep.csv")
        plot_sweep(rows, out / "sweep.svg")
        written += ["sweep.csv", "sweep.svg"]
    if "solve" in result:
        plot_evolution(result["solve"]["times"], result["solve"]["sup_history"],
                       out / "evolve.svg")
        written.append("evolve.svg")
    return written


# ----------------------------------------------------------------------------
# modes
# ----------------------------------------------------------------------------

def _finite(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    return obj


def _data_spec(cfg: dict, lam: Optional[float] = None):
    d = cfg.get("data")
    if d is None:
        raise ConfigError("$.data: required for this mode")
    kind = d["kind"]
    if kind == "constant":
        if "value" not in d:
            raise ConfigError("$.data.value: required for constant data")
        return float(d["value"])
    if kind == "indicator":
        return indicator_ball(d.get("radius", 1.0), d.get("height", 1.0))
    if kind == "power":
        if "a" not in d:
            raise ConfigError("$.data.a: required for power data")
        return power_singularity(d["a"], d.get("radius", 1.0), d.get("scale", 1.0))
    family = d.get("family", "Generic")
    lam = d.get("lambda", 1.0) if lam is None else lam
    calc = build_calculus(from_spec(cfg["nonlinearity"])) if family == "Generic" else None
    return make_dcs(family, lam, cfg["theta"], calculus=calc, params=d.get("params", {}),
                    cutoff=d.get("cutoff"))


def _grid_field(cfg: dict, spec) -> GridField:
    g = cfg["grid"]
    source = spec.as_data() if hasattr(spec, "as_data") else spec
    return discretize(source, cfg["N"], g["L"], g["M"])


def _solve(cfg: dict, k, nl, u0: GridField, keep_fields: bool = False):
    t = cfg["time"]
    adaptive = t["adaptive"] and t["scheme"] == "stepping"
    return mild_solve(k, nl, u0, t["T"], t["dt"], tol=t["tol"], cap=t["cap"],
                      refine=t["refine"], keep_fields=keep_fields, scheme=t["scheme"],
                      adaptive=adaptive, safety=t["safety"])


def run_classify(cfg: dict) -> dict:
    nl = from_spec(cfg["nonlinearity"])
    c = build_calculus(nl)
    est = estimate_qf(c, nl)
    crit = classify(c, cfg["N"], cfg["theta"])
    return {"classify": {"q_f": _finite(c.q_f), "p_f": _finite(c.p_f),
                         "q_source": c.q_source, "q_hat": _finite(est.q_hat),
                         "p_hat": _finite(est.p_hat), "q_converged": est.converged,
                         "p_theta": 1.0 + cfg["theta"] / cfg["N"],
                         "classification": crit.value,
                         "F0": _finite(c.F0), "G0": _finite(c.G0)}}


def run_kernel_check(cfg: dict) -> dict:
    k = build_kernel(cfg["N"], cfg["theta"])
    mass = k.total_mass()
    out = {"N": k.N, "theta": k.theta, "peak": k.peak, "mass": mass,
           "mass_error": mass - 1.0, "tail_coeff": k.tail_coeff}
    if k.N == 1:
        out["chapman_kolmogorov"] = check_chapman_kolmogorov(k, 1.0, 0.3)
    out["bound_constant"] = None if k.gaussian else check_bounds(k)
    return {"kernel": out}


def run_evolve(cfg: dict) -> dict:
    nl = from_spec(cfg["nonlinearity"])
    k = build_kernel(cfg["N"], cfg["theta"])
    u0 = _grid_field(cfg, _data_spec(cfg))
    rep = _solve(cfg, k, nl, u0)
    return {"solve": rep.to_dict()}


def run_necessary(cfg: dict) -> dict:
    nl = from_spec(cfg["nonlinearity"])
    c = build_calculus(nl)
    nec = cfg["necessary"]
    spec = _data_spec(cfg)
    if isinstance(spec, float):
        v = check_necessary(None, c, spec, nec["Cstar"], nec.get("Tstar"), nec.get("t_grid"))
    else:
        if "t_grid" not in nec:
            raise ConfigError("$.necessary.t_grid: required for non-constant data")
        k = build_kernel(cfg["N"], cfg["theta"])
        v = check_necessary(k, c, _grid_field(cfg, spec), nec["Cstar"], nec.get("Tstar"),
                            nec["t_grid"])
    return {"necessary": {"kind": v.kind.value, "witness": v.witness, "parameters": v.parameters}}


def run_sufficient(cfg: dict) -> dict:
    if "sufficient" not in cfg:
        raise ConfigError("$.sufficient: required for this mode")
    s = cfg["sufficient"]
    c = build_calculus(from_spec(cfg["nonlinearity"]))
    spec = _data_spec(cfg)
    v = check_sufficient(c, spec, cfg["N"], cfg["theta"], s["beta"], s["delta"], s["eps"], s["T"])
    params = dict(v.parameters)
    params["window"] = list(params["window"])
    out = {"kind": v.kind.value, "witness": v.witness, "parameters": params}
    if s.get("steps", 0) > 0:
        k = build_kernel(cfg["N"], cfg["theta"])
        u0 = _grid_field(cfg, spec)
        sup = check_supersolution(k, c, u0, s["beta"], s["T"], s["steps"], s.get("kappa", 2.0))
        out["supersolution"] = {"kappa": sup.kappa, "excess": sup.excess,
                                "worst_time": sup.worst_time, "holds": sup.holds}
    return {"sufficient": out}


def run_sweep(cfg: dict, threads: int = 1) -> dict:
    d = cfg.get("data")
    if d is None or d["kind"] != "dcs":
        raise ConfigError("$.data.kind: sweep mode needs dcs data")
    nl = from_spec(cfg["nonlinearity"])
    k = build_kernel(cfg["N"], cfg["theta"])
    sw = cfg["sweep"]
    lams = np.geomspace(sw["lambda_min"], sw["lambda_max"], sw["points"])

    def solve_for(lam):
        return _solve(cfg, k, nl, _grid_field(cfg, _data_spec(cfg, lam)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            br = bracket_lambda0(solve_for, lams, sw["bisections"], ex)
    else:
        br = bracket_lambda0(solve_for, lams, sw["bisections"])
    rows = [{"lambda": r.lam, "verdict": r.verdict, "T_reached": r.T_reached,
             "sup_final": r.sup_final, "residual_final": r.residual_final,
             "refinement_stable": r.refinement_stable, "stage": r.stage} for r in br.rows]
    return {"sweep": {"bracket": br.to_dict(), "rows": rows}}


class NumericalFailure(RuntimeError):
    """Run finished with a numerical-failure verdict."""


def run(config, mode: Optional[str] = None, out: Optional[str] = None,
        threads: int = 1) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        cfg = load_config(config)
        if mode is not None:
            if mode not in MODES:
                raise ConfigError(f"--mode: {mode!r} is not one of {', '.join(MODES)}")
            cfg["mode"] = mode
        if out is not None:
            cfg["output"] = out
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = Path(cfg["output"])
    status = EXIT_OK
    failure = None
    try:
        handlers = {"classify": run_classify, "kernel-check": run_kernel_check,
                    "evolve": run_evolve, "necessary": run_necessary,
                    "sufficient": run_sufficient}
        if cfg["mode"] == "sweep":
            result = run_sweep(cfg, threads)
            if result["sweep"]["bracket"]["lambda_lo"] is None \
                    or result["sweep"]["bracket"]["lambda_hi"] is None:
                status, failure = EXIT_NUMERICAL, "sweep produced no bracket"
        else:
            result = handlers[cfg["mode"]](cfg)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonlinearityError, KernelError, SemigroupError, SolverError,
            SolvabilityError) as exc:
        result = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        status, failure = EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"
    result = {"mode": cfg["mode"], "config_hash": config_hash(cfg), **result}
    if failure is not None:
        result["failure"] = failure
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(result), sort_keys=True, indent=2, allow_nan=False)
    (out_dir / "result.json").write_text(text + "\n")
    files = ["result.json"] + render_report(out_dir)
    manifest = {
        "config_hash": config_hash(cfg),
        "config": cfg,
        "versions": {"frac_heat_lab": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "kernel_cache": os.environ.get("FRACHEAT_CACHE"),
        "outputs": {name: hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
                    for name in files},
        "exit_code": status,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    if failure is not None:
        print(f"numerical failure: {failure}", file=sys.stderr)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frac-heat-lab",
                                description="Fractional semilinear heat experiments.")
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--mode", choices=MODES, help="override the config mode")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("invalid config: --threads: must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    return run(args.config, args.mode, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
