"""Run configuration: loading, defaults, validation and canonical echo.

A run is described by one TOML (or JSON) file. Missing keys take the defaults
below; the fully resolved form is written back as sorted-key JSON so that a
rerun from the echo reproduces the outputs exactly.

Top-level keys::

    model       "scalar-benchmark" | "opinion" | "constant-source" | "linear"
    T, steps    horizon and number of intervals
    integrator  "euler" | "rk4"
    seed        integer seed for every random draw
    out         output directory (the --out flag wins)

Tables: [model_params], [cost], [initial], [control], [optimizer], [checks].
"""
from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .forward import METHODS, ControlSignal, TimeGrid, read_trajectory_initial
from .measure import ParticleMeasure, _as_points, read_measure_csv
from .model import (
    PSI_KERNELS,
    S_KERNELS,
    ModelSpec,
    builtin_constant_source,
    builtin_linear_field,
    builtin_opinion_dynamics,
    builtin_scalar_benchmark,
    interaction_cost,
    second_moment_cost,
    sum_costs,
    with_control_drift,
    zero_cost,
)
from .optimize import OptimizerConfig, read_control_csv

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MODELS = ("scalar-benchmark", "opinion", "constant-source", "linear")

MODEL_DEFAULTS = {
    "scalar-benchmark": {},
    "opinion": {
        "dim": 1,
        "psi": "linear",
        "psi_scale": 1.0,
        "psi_width": 1.0,
        "S": "linear",
        "S_scale": 1.0,
        "S_width": 1.0,
        "drift": False,
        "drift_bound": 1.0,
    },
    "constant-source": {"dim": 1, "rate": 0.0},
    "linear": {"A": [[0.0]]},
}

# cost defaults depend on the model: the benchmark's own cost, interaction energy for opinions
COST_DEFAULTS = {
    "scalar-benchmark": ["second-moment"],
    "opinion": ["interaction"],
    "constant-source": ["second-moment"],
    "linear": ["second-moment"],
}

DEFAULTS = {
    "model": "scalar-benchmark",
    "T": 1.0,
    "steps": 1000,
    "integrator": "rk4",
    "seed": 0,
    "initial": {"atoms": [[2.0]], "weights": [1.0]},
    "control": {"source": "constant"},
    # integrator and seed come from the top level
    "optimizer": {f.name: f.default for f in fields(OptimizerConfig) if f.name not in ("integrator", "seed")},
    "checks": {
        "gradient_intervals": 8,
        "fd_step": 1e-5,
        "gradient_rtol": 1e-4,
        "hamiltonian_nodes": 21,
        "hamiltonian_rtol": 1e-12,
        "lipschitz_pairs": 200,
        "lipschitz_atoms": 5,
        "lipschitz_bounds": [1.0, 2.0, 4.0],
        "weak_form_refinements": 2,
    },
}

TOP_KEYS = {"model", "T", "steps", "integrator", "seed", "out", "model_params", "cost", "initial", "control", "optimizer", "checks"}
INITIAL_KINDS = ("atoms", "csv", "sample")


def load_raw(path: str | Path) -> dict:
    """Parse a TOML or JSON file (by extension; .json is JSON, anything else TOML)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if p.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a table")
    return raw


def _table(raw: dict, key: str) -> dict:
    val = raw.get(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"[{key}] must be a table")
    return val


def _unknown(section: str, given: dict, allowed) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def _model_dim(cfg: dict) -> int:
    if cfg["model"] == "linear":
        return len(cfg["model_params"]["A"])
    return int(cfg["model_params"].get("dim", 1))


def _resolve_path(value: str, base: Path) -> str:
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    return str(p.resolve())


def resolve(raw: dict, base_dir: str | Path = ".", seed: int | None = None) -> dict:
    """Expand defaults, validate, and make file references absolute."""
    base = Path(base_dir)
    raw = copy.deepcopy(raw)
    _unknown("config", raw, TOP_KEYS)
    cfg: dict = {}
    model = raw.get("model", DEFAULTS["model"])
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
    cfg["model"] = model
    try:
        cfg["T"] = float(raw.get("T", DEFAULTS["T"]))
        cfg["steps"] = int(raw.get("steps", DEFAULTS["steps"]))
        cfg["seed"] = int(seed if seed is not None else raw.get("seed", DEFAULTS["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scalar setting: {exc}") from exc
    if not cfg["T"] > 0:
        raise ConfigError("T must be positive")
    if cfg["steps"] < 1:
        raise ConfigError("steps must be >= 1")
    if cfg["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    cfg["integrator"] = raw.get("integrator", DEFAULTS["integrator"])
    if cfg["integrator"] not in METHODS:
        raise ConfigError(f"integrator must be one of {METHODS}")

    params = _table(raw, "model_params")
    _unknown("[model_params]", params, MODEL_DEFAULTS[model])
    cfg["model_params"] = {**MODEL_DEFAULTS[model], **params}

    cost = _table(raw, "cost")
    _unknown("[cost]", cost, ("terms", "center", "scale"))
    terms = cost.get("terms", COST_DEFAULTS[model])
    if isinstance(terms, str):
        terms = [terms]
    for t in terms:
        if t not in ("zero", "second-moment", "interaction"):
            raise ConfigError(f"unknown cost term {t!r}")
    cfg["cost"] = {"terms": list(terms), "center": cost.get("center", 0.0), "scale": float(cost.get("scale", 1.0))}

    init = _table(raw, "initial") or DEFAULTS["initial"]
    kinds = [k for k in INITIAL_KINDS if k in init]
    if len(kinds) != 1:
        raise ConfigError("[initial] needs exactly one of atoms, csv, sample")
    if kinds[0] == "atoms":
        _unknown("[initial]", init, ("atoms", "weights"))
        try:
            atoms = _as_points(init["atoms"], dim=_model_dim(cfg))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[initial] atoms: {exc}") from exc
        weights = init.get("weights", [1.0 / atoms.shape[0]] * atoms.shape[0])
        cfg["initial"] = {"atoms": atoms.tolist(), "weights": [float(w) for w in weights]}
    elif kinds[0] == "csv":
        _unknown("[initial]", init, ("csv",))
        cfg["initial"] = {"csv": _resolve_path(init["csv"], base)}
    else:
        _unknown("[initial]", init, ("sample",))
        s = dict(init["sample"])
        _unknown("[initial.sample]", s, ("distribution", "particles", "mean", "std", "low", "high", "mass"))
        dist = s.get("distribution", "normal")
        if dist not in ("normal", "uniform"):
            raise ConfigError("sample distribution must be normal or uniform")
        s.setdefault("particles", 64)
        s.setdefault("mass", 1.0)
        if dist == "normal":
            s.setdefault("mean", 0.0)
            s.setdefault("std", 1.0)
        else:
            s.setdefault("low", -1.0)
            s.setdefault("high", 1.0)
        s["distribution"] = dist
        cfg["initial"] = {"sample": s}

    ctrl = {**DEFAULTS["control"], **_table(raw, "control")}
    _unknown("[control]", ctrl, ("source", "value", "path"))
    if ctrl["source"] not in ("constant", "csv", "optimize"):
        raise ConfigError("control source must be constant, csv or optimize")
    if ctrl["source"] == "csv":
        if "path" not in ctrl:
            raise ConfigError("[control] source = csv needs path")
        ctrl["path"] = _resolve_path(ctrl["path"], base)
    cfg["control"] = ctrl

    opt = {**DEFAULTS["optimizer"], **_table(raw, "optimizer")}
    _unknown("[optimizer]", opt, DEFAULTS["optimizer"])
    cfg["optimizer"] = opt

    checks = {**DEFAULTS["checks"], **_table(raw, "checks")}
    _unknown("[checks]", checks, DEFAULTS["checks"])
    cfg["checks"] = checks

    if "out" in raw:
        cfg["out"] = str(raw["out"])
    # building everything once surfaces inconsistent settings as config errors
    build(cfg)
    return cfg


def canonical_json(cfg: dict) -> str:
    echo = {k: v for k, v in cfg.items() if k != "out"}
    return json.dumps(echo, sort_keys=True, indent=2) + "\n"


# --- construction -------------------------------------------------------------

def build_cost(cfg: dict, dim: int):
    c = cfg["cost"]
    center = np.broadcast_to(np.atleast_1d(np.asarray(c["center"], dtype=float)), (dim,)).copy()
    parts = []
    for t in c["terms"]:
        if t == "zero":
            parts.append(zero_cost())
        elif t == "second-moment":
            parts.append(second_moment_cost(center))
        else:
            parts.append(interaction_cost())
    cost = parts[0] if len(parts) == 1 else sum_costs(*parts)
    return cost if c["scale"] == 1.0 else cost.scaled(c["scale"])


def build_model(cfg: dict) -> ModelSpec:
    name, p = cfg["model"], cfg["model_params"]
    if name == "scalar-benchmark":
        return builtin_scalar_benchmark(build_cost(cfg, 1))
    if name == "opinion":
        dim = int(p["dim"])
        if p["psi"] not in PSI_KERNELS or p["S"] not in S_KERNELS:
            raise ConfigError(f"kernels: psi in {sorted(PSI_KERNELS)}, S in {sorted(S_KERNELS)}")
        psi = PSI_KERNELS[p["psi"]](p["psi_scale"]) if p["psi"] == "linear" else PSI_KERNELS[p["psi"]](p["psi_scale"], p["psi_width"])
        S = S_KERNELS[p["S"]](p["S_scale"]) if p["S"] != "gaussian" else S_KERNELS[p["S"]](p["S_scale"], p["S_width"])
        spec = builtin_opinion_dynamics(psi, S, dim=dim, cost=build_cost(cfg, dim))
        return with_control_drift(spec, float(p["drift_bound"])) if p["drift"] else spec
    if name == "constant-source":
        dim = int(p["dim"])
        return builtin_constant_source(float(p["rate"]), dim, build_cost(cfg, dim))
    A = np.atleast_2d(np.asarray(p["A"], dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ConfigError("linear model needs a square matrix A")
    return builtin_linear_field(A, build_cost(cfg, A.shape[0]))


def _read_initial_csv(path: str) -> ParticleMeasure:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header[:2] == ["t", "k"]:
        return read_trajectory_initial(path)
    return read_measure_csv(path)


def build_initial(cfg: dict) -> ParticleMeasure:
    init = cfg["initial"]
    if "atoms" in init:
        return ParticleMeasure(init["atoms"], init["weights"])
    if "csv" in init:
        return _read_initial_csv(init["csv"])
    s = init["sample"]
    dim = _model_dim(cfg)
    rng = np.random.default_rng(cfg["seed"])
    n = int(s["particles"])
    if s["distribution"] == "normal":
        pts = rng.normal(s["mean"], s["std"], size=(n, dim))
    else:
        pts = rng.uniform(s["low"], s["high"], size=(n, dim))
    return ParticleMeasure(pts, np.full(n, float(s["mass"]) / n))


def build_control(cfg: dict, spec: ModelSpec, grid: TimeGrid) -> ControlSignal | None:
    """The configured control, or None when it is left to the optimizer."""
    c = cfg["control"]
    if c["source"] == "optimize":
        return None
    if c["source"] == "csv":
        u = read_control_csv(c["path"], grid.M)
    else:
        value = c.get("value", 0.5 * (spec.control_lower + spec.control_upper))
        u = ControlSignal.constant(value, grid.M)
    u.check_admissible(spec)
    return u


@dataclass
class Run:
    spec: ModelSpec
    theta: ParticleMeasure
    grid: TimeGrid
    integrator: str
    control: ControlSignal | None
    optimizer: OptimizerConfig
    checks: dict
    seed: int


def build(cfg: dict) -> Run:
    try:
        spec = build_model(cfg)
        theta = build_initial(cfg)
        if theta.dim != spec.dim:
            raise ConfigError(f"initial measure lives in R^{theta.dim}, model in R^{spec.dim}")
        grid = TimeGrid(cfg["T"], cfg["steps"])
        control = build_control(cfg, spec, grid)
        opt = OptimizerConfig(**{**cfg["optimizer"], "integrator": cfg["integrator"], "seed": cfg["seed"]})
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    return Run(spec, theta, grid, cfg["integrator"], control, opt, cfg["checks"], cfg["seed"])
