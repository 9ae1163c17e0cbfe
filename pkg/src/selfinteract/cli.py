"""Command-line front end: ``selfinteract <command> <config.json> [overrides]``.

A config file is a JSON object with the sections

- ``model``: ``{"kind": ..., "params": {...}}`` or explicit ``base``/``tensor``/``adjacency``;
- ``command``: optional, must match the subcommand when present;
- ``params``: the command's numeric parameters (unknown keys are rejected);
- ``output``: optional ``{"dir": ..., "prefix": ...}``.

Results go to ``<dir>/<prefix>.json`` plus CSV sidecars in the same
directory. ``dir`` defaults to ``$SELFINTERACT_OUT`` or ``selfinteract-out``.
Exit codes: 0 success, 2 validation error, 3 convergence failure, 4 infeasible.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .construct import ScheduleConfig, approximate_control, build_schedule
from .errors import (
    ConvergenceError,
    InfeasibleError,
    SelfInteractError,
    ValidationError,
)
from .measures import prob_vec
from .model import ModelSpec, check_assumptions, fixed_point, model_from_dict
from .rate import RateOptions, dv_evaluate, pstar_feasible, rate_upper
from .simulate import (
    mc_hit_probability,
    pair_empirical,
    run_chain,
    run_controlled,
    run_to_dict,
)
from .timescale import (
    TimeGrid,
    euler_mascheroni_brackets,
    psi_limit_gap,
    psi_normalization,
)

OUTPUT_ENV = "SELFINTERACT_OUT"
DEFAULT_OUTPUT = "selfinteract-out"
EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_INFEASIBLE = 0, 2, 3, 4

CONFIG_KEYS = {"model", "command", "params", "output"}
OUTPUT_KEYS = {"dir", "prefix"}
RESULT_KEYS = {"command", "version", "config", "result", "files"}


# ---------------------------------------------------------------------------
# parameter schemas


@dataclass(frozen=True)
class Param:
    kind: str  # "int", "float", "bool", "vector", "matrix", "str"
    default: Any = None
    required: bool = False
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _positive(x) -> bool:
    return x > 0


def _nonnegative(x) -> bool:
    return x >= 0


def _seed_ok(x) -> bool:
    return 0 <= x < 2**64


SCHEMAS: dict[str, dict[str, Param]] = {
    "simulate": {
        "n": Param("int", required=True, check=_positive, rule="n >= 1"),
        "seed": Param("int", 0, check=_seed_ok, rule="seed is a 64-bit unsigned integer"),
        "x0": Param("int", 0, check=_nonnegative, rule="x0 is a state index"),
        "thinning": Param("int", None, check=_positive, rule="thinning >= 1"),
        "full_path": Param("bool", False),
    },
    "fixed-point": {
        "damping": Param("float", 0.5, check=lambda x: 0 < x <= 1, rule="damping in (0, 1]"),
        "tol": Param("float", 1e-12, check=_positive, rule="tol > 0"),
        "max_iter": Param("int", 200_000, check=_positive, rule="max_iter >= 1"),
    },
    "dv-rate": {
        "m": Param("vector", required=True),
        "tol": Param("float", 1e-14, check=_positive, rule="tol > 0"),
    },
    "rate": {
        "m": Param("vector", required=True),
        "T": Param("float", 8.0, check=_positive, rule="T > 0"),
        "N": Param("int", 80, check=_positive, rule="N >= 1"),
        "floor": Param("float", 1e-6, check=lambda x: 0 < x < 1, rule="floor in (0, 1)"),
        "max_iter": Param("int", 2000, check=_positive, rule="max_iter >= 1"),
        "grad_tol": Param("float", 1e-10, check=_positive, rule="grad_tol > 0"),
    },
    "feasible": {
        "m": Param("vector", required=True),
        "adjacency": Param("matrix", None),
    },
    "construct": {
        "m": Param("vector", required=True),
        "T": Param("float", 4.0, check=_positive, rule="T > 0"),
        "N": Param("int", 20, check=_positive, rule="N >= 1"),
        "epsilon": Param("float", 0.05, check=_positive, rule="epsilon > 0"),
        "eps0": Param("float", 0.05, check=_positive, rule="eps0 > 0"),
        "eps1": Param("float", 0.05, check=lambda x: 0 < x < 1, rule="eps1 in (0, 1)"),
        "kappa_mix": Param("float", None, check=lambda x: 0 < x <= 1, rule="kappa_mix in (0, 1]"),
        "kappa_mollify": Param("float", None, check=_positive, rule="kappa_mollify > 0"),
        "block_length": Param("float", None, check=_positive, rule="block_length > 0"),
        "r1": Param("int", None, check=_positive, rule="r1 >= 1"),
        "calibration_reps": Param("int", 400, check=_positive, rule="calibration_reps >= 1"),
        "calibration_steps": Param("int", 20_000, check=lambda x: x >= 2, rule="calibration_steps >= 2"),
        "seed": Param("int", 0, check=_seed_ok, rule="seed is a 64-bit unsigned integer"),
        "runs": Param("int", 0, check=_nonnegative, rule="runs >= 0"),
        "n": Param("int", None, check=_positive, rule="n >= 1"),
    },
    "mc-prob": {
        "target": Param("vector", required=True),
        "radius": Param("float", required=True, check=_nonnegative, rule="radius >= 0"),
        "n": Param("int", required=True, check=_positive, rule="n >= 1"),
        "reps": Param("int", 10_000, check=_positive, rule="reps >= 1"),
        "seed": Param("int", 0, check=_seed_ok, rule="seed is a 64-bit unsigned integer"),
        "x0": Param("int", 0, check=_nonnegative, rule="x0 is a state index"),
    },
    "check-assumptions": {
        "n_random": Param("int", 1000, check=_nonnegative, rule="n_random >= 0"),
        "seed": Param("int", 0, check=_seed_ok, rule="seed is a 64-bit unsigned integer"),
    },
    "timescale": {
        "n": Param("int", required=True, check=lambda x: x >= 2, rule="n >= 2"),
        "t": Param("float", 5.0, check=_nonnegative, rule="t >= 0"),
        "brackets": Param("bool", True),
    },
}
COMMANDS = tuple(SCHEMAS)
OVERRIDES = ("seed", "n", "T", "N")


def _coerce(name: str, spec: Param, value: Any) -> Any:
    if value is None:
        if spec.required:
            raise ValidationError(f"parameter {name} is given")
        return None
    try:
        if spec.kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            value = int(value)
        elif spec.kind == "float":
            if isinstance(value, bool):
                raise TypeError
            value = float(value)
            if not math.isfinite(value):
                raise ValueError
        elif spec.kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
        elif spec.kind == "vector":
            value = np.asarray(value, dtype=float)
            if value.ndim != 1:
                raise ValueError
        elif spec.kind == "matrix":
            value = np.asarray(value, dtype=float)
            if value.ndim != 2:
                raise ValueError
    except (TypeError, ValueError):
        raise ValidationError(f"parameter {name} is a valid {spec.kind}", f"got {value!r}") from None
    if spec.check is not None and not spec.check(value):
        raise ValidationError(spec.rule or f"parameter {name} is valid", f"got {value!r}")
    return value


def parse_params(command: str, raw: dict[str, Any]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    unknown = set(raw) - set(schema)
    if unknown:
        raise ValidationError(f"{command} parameters are among {sorted(schema)}", f"unexpected {sorted(unknown)}")
    return {name: _coerce(name, spec, raw.get(name, spec.default)) for name, spec in schema.items()}


@dataclass(frozen=True)
class RunConfig:
    command: str
    model: ModelSpec
    model_doc: dict[str, Any]
    raw_params: dict[str, Any]
    params: dict[str, Any]
    out_dir: Path
    prefix: str


def parse_config(doc: Any, command: str, overrides: dict[str, Any] | None = None,
                 out: str | None = None) -> RunConfig:
    """Validate a config document (with CLI overrides applied) for ``command``."""
    if command not in SCHEMAS:
        raise ValidationError("command is one of " + ", ".join(COMMANDS), f"got {command!r}")
    if not isinstance(doc, dict):
        raise ValidationError("config is a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ValidationError(f"config keys are among {sorted(CONFIG_KEYS)}", f"unexpected {sorted(unknown)}")
    if doc.get("command", command) != command:
        raise ValidationError("config command matches the subcommand", f"{doc['command']!r} vs {command!r}")
    if "model" not in doc or not isinstance(doc["model"], dict):
        raise ValidationError("config has a model section")
    raw = dict(doc.get("params") or {})
    if not isinstance(raw, dict):
        raise ValidationError("params section is an object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in SCHEMAS[command]:
            raise ValidationError(f"override --{key} names a parameter of {command}")
        raw[key] = value
    params = parse_params(command, raw)
    output = doc.get("output") or {}
    if not isinstance(output, dict) or set(output) - OUTPUT_KEYS:
        raise ValidationError(f"output keys are among {sorted(OUTPUT_KEYS)}")
    prefix = str(output.get("prefix", command))
    if not prefix or Path(prefix).name != prefix or prefix in (".", ".."):
        raise ValidationError("output prefix is a plain file name", f"got {prefix!r}")
    out_dir = Path(out or output.get("dir") or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    model = model_from_dict(doc["model"])
    return RunConfig(command, model, doc["model"], raw, params, out_dir, prefix)


def parse_result(doc: Any) -> dict[str, Any]:
    """Check a result document's shape and that its config section still validates."""
    if not isinstance(doc, dict) or set(doc) != RESULT_KEYS:
        raise ValidationError(f"result document has keys {sorted(RESULT_KEYS)}")
    if doc["command"] not in SCHEMAS:
        raise ValidationError("result command is known", f"got {doc['command']!r}")
    if not isinstance(doc["result"], dict) or not isinstance(doc["files"], list):
        raise ValidationError("result section is an object and files a list")
    parse_config(doc["config"], doc["command"])
    return doc


# ---------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def to_json(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        obj = int(obj)
    if isinstance(obj, (np.bool_,)):
        obj = bool(obj)
    if obj is None or isinstance(obj, (bool, str)):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(to_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Outputs:
    """Collects CSV sidecars; everything is written at the end, inside one directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.tables: dict[str, str] = {}

    def table(self, suffix: str, header: list[str], rows) -> None:
        self.tables[f"{self.cfg.prefix}_{suffix}.csv"] = _csv_text(header, rows)

    def commit(self, result: dict[str, Any], config_doc: dict[str, Any]) -> Path:
        out = self.cfg.out_dir
        for name, text in self.tables.items():
            _atomic_write(out / name, text)
        doc = {
            "command": self.cfg.command,
            "version": __version__,
            "config": config_doc,
            "result": result,
            "files": sorted(self.tables),
        }
        target = out / f"{self.cfg.prefix}.json"
        _atomic_write(target, to_json(doc) + "\n")
        return target


# ---------------------------------------------------------------------------
# commands


def _path_rows(grid_n: int, steps, values):
    grid = TimeGrid(grid_n)
    for step, row in zip(steps, values):
        yield [int(step), float(grid.times[step])] + [float(v) for v in row]


def _cmd_simulate(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p, d = cfg.params, cfg.model.d
    run = run_chain(cfg.model, p["x0"], p["n"], p["seed"], p["thinning"])
    # the thinned path stores L^{k+1} at step k, i.e. the average of X_0..X_k
    out.table("path", ["step", "t"] + [f"L{x}" for x in range(d)], _path_rows(p["n"], run.path_steps, run.empirical_path))
    if p["full_path"]:
        out.table("states", ["step", "state"], ([k, int(s)] for k, s in enumerate(run.states)))
    doc = run_to_dict(run)
    doc["counts"] = run.counts.tolist()
    doc["pair_empirical"] = pair_empirical(run).tolist()
    return doc


def _cmd_fixed_point(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p = cfg.params
    fp = fixed_point(cfg.model, p["damping"], p["tol"], p["max_iter"])
    return {"point": fp.point.tolist(), "residual": fp.residual, "iterations": fp.iterations, "positive": fp.positive}


def _cmd_dv_rate(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    m = prob_vec(cfg.params["m"], cfg.model.d, name="m")
    res = dv_evaluate(m, cfg.model, tol=cfg.params["tol"])
    if res.gamma is not None:
        out.table("gamma", ["x", "y", "value"],
                  ([x, y, float(res.gamma[x, y])] for x in range(cfg.model.d) for y in range(cfg.model.d)))
    return {"m": m.tolist(), "value": res.value, "gamma": None if res.gamma is None else res.gamma.tolist()}


def _cmd_rate(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p = cfg.params
    opts = RateOptions(floor=p["floor"], max_iter=p["max_iter"], grad_tol=p["grad_tol"])
    cert = rate_upper(p["m"], cfg.model, T=p["T"], N=p["N"], options=opts)
    if cert.path is not None:
        h = cert.path.h
        d = cfg.model.d
        out.table("trajectory", ["step", "t"] + [f"M{x}" for x in range(d)],
                  ([j, j * h] + row.tolist() for j, row in enumerate(cert.path.trajectory)))
        out.table("controls", ["step", "t", "x", "y", "kernel", "pair"],
                  ([j, j * h, x, y, float(k[x, y]), float(eta[x, y])]
                   for j, (k, eta) in enumerate(zip(cert.path.kernels, cert.path.pair_controls))
                   for x in range(d) for y in range(d)))
    return cert.as_dict()


def _cmd_feasible(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p = cfg.params
    m = prob_vec(p["m"], cfg.model.d, name="m")
    adjacency = cfg.model.adjacency.mask if p["adjacency"] is None else p["adjacency"]
    return dict(pstar_feasible(m, adjacency).as_dict(), m=m.tolist())


def _cmd_construct(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p, model = cfg.params, cfg.model
    pistar = fixed_point(model).point
    cert = rate_upper(p["m"], model, T=p["T"], N=p["N"])
    if cert.path is None:
        raise InfeasibleError("the target has a finite rate", "no control path reaches m")
    approx = approximate_control(cert.path, model, pistar, p["epsilon"], kappa_mix=p["kappa_mix"],
                                 kappa_mollify=p["kappa_mollify"], block_length=p["block_length"])
    sched_cfg = ScheduleConfig(eps0=p["eps0"], eps1=p["eps1"], epsilon=p["epsilon"], r1=p["r1"],
                               block_length=approx.block_length, calibration_reps=p["calibration_reps"],
                               calibration_steps=p["calibration_steps"], calibration_seed=p["seed"])
    schedule = build_schedule(approx.blocked, model, pistar, sched_cfg)
    d = model.d
    out.table("betas", ["block", "x", "y", "beta", "conditional"], schedule.beta_rows())
    h = approx.blocked.h
    out.table("trajectory", ["step", "t"] + [f"M{x}" for x in range(d)],
              ([j, j * h] + row.tolist() for j, row in enumerate(approx.blocked.trajectory)))
    runs = []
    if p["runs"]:
        n = p["n"] if p["n"] is not None else schedule.minimum_n
        for r in range(p["runs"]):
            run = run_controlled(model, schedule, n, p["seed"], stream=r)
            doc = run_to_dict(run)
            doc["distance_to_target"] = float(np.abs(run.final_empirical - schedule.target).sum())
            runs.append(doc)
    return {
        "rate_upper": cert.value,
        "kappas": {"mix": approx.kappa_mix, "mollify": approx.kappa_mollify, "block_length": approx.block_length},
        "theory": approx.theory.as_dict(),
        "costs": approx.costs,
        "diagnostics": approx.diagnostics,
        "schedule": schedule.as_dict(),
        "runs": runs,
    }


def _cmd_mc_prob(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p = cfg.params
    target = prob_vec(p["target"], cfg.model.d, name="target")
    est = mc_hit_probability(cfg.model, target, p["radius"], p["n"], p["reps"], p["seed"], x0=p["x0"])
    return est.as_dict()


def _cmd_check(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    return check_assumptions(cfg.model, n_random=cfg.params["n_random"], seed=cfg.params["seed"]).as_dict()


def _cmd_timescale(cfg: RunConfig, out: Outputs) -> dict[str, Any]:
    p = cfg.params
    grid = TimeGrid(p["n"])
    doc: dict[str, Any] = {
        "n": p["n"],
        "t_n": grid.horizon,
        "psi_limit_gap": psi_limit_gap(p["n"], p["t"]) if p["t"] < grid.horizon else None,
        "psi_normalization": psi_normalization(p["n"]),
    }
    horizons = [s for s in np.linspace(0.0, p["t"], 21) if s < grid.horizon]
    out.table("gap", ["n", "t", "gap"], ([p["n"], float(s), psi_limit_gap(p["n"], float(s))] for s in horizons))
    if p["brackets"]:
        ok = euler_mascheroni_brackets(p["n"])
        bad = np.nonzero(~ok)[0]
        doc["brackets_hold"] = bool(ok.all())
        doc["first_bracket_failure"] = int(bad[0] + 2) if bad.size else None
    return doc


HANDLERS: dict[str, Callable[[RunConfig, Outputs], dict[str, Any]]] = {
    "simulate": _cmd_simulate,
    "fixed-point": _cmd_fixed_point,
    "dv-rate": _cmd_dv_rate,
    "rate": _cmd_rate,
    "feasible": _cmd_feasible,
    "construct": _cmd_construct,
    "mc-prob": _cmd_mc_prob,
    "check-assumptions": _cmd_check,
    "timescale": _cmd_timescale,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfinteract", description="Self-interacting Markov chain toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("config", help="JSON config file")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--out", help="output directory (overrides config and $" + OUTPUT_ENV + ")")
        cmd.add_argument("--n", type=int)
        cmd.add_argument("--T", type=float)
        cmd.add_argument("--N", type=int)
    return parser


def _config_echo(cfg: RunConfig) -> dict[str, Any]:
    return {"model": cfg.model_doc, "command": cfg.command, "params": cfg.raw_params,
            "output": {"dir": str(cfg.out_dir), "prefix": cfg.prefix}}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError("config file is readable", str(exc)) from None
        except json.JSONDecodeError as exc:
            raise ValidationError("config file is valid JSON", str(exc)) from None
        overrides = {key: getattr(args, key) for key in OVERRIDES}
        cfg = parse_config(doc, args.command, overrides, args.out)
        outputs = Outputs(cfg)
        result = HANDLERS[args.command](cfg, outputs)
        target = outputs.commit(result, _config_echo(cfg))
    except ValidationError as exc:
        return _fail(exc, EXIT_VALIDATION)
    except ConvergenceError as exc:
        return _fail(exc, EXIT_CONVERGENCE)
    except InfeasibleError as exc:
        return _fail(exc, EXIT_INFEASIBLE)
    except SelfInteractError as exc:
        return _fail(exc, EXIT_VALIDATION)
    print(target)
    return EXIT_OK


def _fail(exc: SelfInteractError, code: int) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code
