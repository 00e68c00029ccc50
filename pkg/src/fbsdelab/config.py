"""Experiment configuration: JSON with a schema version, strict keys, fail-fast validation.

A config file looks like::

    {"schema": 1, "experiment": "solve", "seed": 7,
     "params": {"driver": {"kind": "entropic", "gamma": 1.0}, "paths": 100000}}

Every parameter has a default; anything not listed below is rejected with
the offending key named.  ``build`` turns the parameter map into the module
objects, so module preconditions are checked before any compute starts.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .drivers import make_driver, make_terminal
from .errors import DomainError
from .forward import brownian_model, constant_model, ou_model, tanh_drift_model
from .regression import RegressionBasis

SCHEMA_VERSION = 1
TOP_KEYS = {"schema", "experiment", "seed", "out", "threads", "params"}

_MODEL = {"kind": "brownian", "sigma": 1.0}
_BASIS = {"family": "poly", "degree": 4, "n_bins": 16}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "solve": {
        "model": _MODEL, "driver": {"kind": "zero"}, "terminal": {"kind": "cos"},
        "basis": _BASIS, "x0": 0.0, "T": 1.0, "epsilon": 1.0, "paths": 20000, "steps": 50,
        "picard": 3, "method": "regression", "bmo": False, "dump_field": False,
    },
    "pde": {
        "model": _MODEL, "driver": {"kind": "zero"}, "terminal": {"kind": "cos"},
        "T": 1.0, "epsilon": 1.0, "nx": 400, "nt": 400, "domain": None,
        "probes": [-1.0, -0.5, 0.0, 0.5, 1.0], "dump_field": False,
    },
    "sweep": {
        "model": {"kind": "ou", "theta": 1.0, "sigma": 1.0}, "driver": {"kind": "lipschitz", "lam": 1.0},
        "terminal": {"kind": "cos"}, "basis": _BASIS, "eps_list": [0.4, 0.2, 0.1, 0.05],
        "probes": [0.0, 0.5, 1.0], "T": 1.0, "paths": 20000, "steps": 50, "picard": 3,
    },
    "ldp": {
        "model": _MODEL, "x0": 0.0, "T": 1.0, "event": {"kind": "sup", "level": 1.0},
        "eps_list": [0.25, 0.15, 0.1], "nodes": 64, "restarts": 3, "paths": 100000, "steps": 200,
    },
    "burgers": {
        "a": 1.0, "lam": 1.0, "eps_list": [0.4, 0.2, 0.1, 0.05], "terminal": {"kind": "cos"},
        "basis": {"family": "partition", "degree": 4, "n_bins": 64}, "x0": 0.0, "T": 1.0,
        "paths": 20000, "steps": 50, "fd_probes": None, "nx": 400, "nt": 400,
        "coupled": False, "coupled_paths": 20000, "outer_iters": 10, "tol": 1e-3,
    },
    "ns2d": {
        "nu": 0.5, "K": [0.0, 0.0], "flow": {"kind": "taylor_green", "amp": 1.0}, "T": 0.5,
        "n_grid": 16, "paths": 10000, "steps": 20, "degree": 4, "picard": 3, "threshold": 5e-2,
    },
    "proptest": {
        "suites": ["comparison", "apriori", "continuity", "truncation", "gradient"],
        "paths": 20000, "steps": 25, "pairs": 20, "degree": 6,
    },
    "forward": {
        "model": _MODEL, "x0": 0.0, "T": 1.0, "epsilon": 1.0, "eps_list": [0.4, 0.2, 0.1, 0.05],
        "paths": 10000, "steps": 50,
    },
}

MODEL_PARAMS = {"brownian": {"sigma", "dim"}, "ou": {"theta", "sigma"}, "tanh": {"kappa", "sigma"},
                "constant": {"b", "sigma"}}
EVENT_PARAMS = {"everywhere": set(), "sup": {"level", "normal"}, "tube": {"radius", "center"},
                "halfspace": {"normal", "level"}, "ball": {"center", "radius"}}
FLOW_PARAMS = {"taylor_green": {"amp"}, "uniform": {"c"}}
NESTED = {"model", "driver", "terminal", "basis", "event", "flow"}


class ConfigError(DomainError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: Dict[str, Any]
    seed: int = 0
    out: Optional[str] = None
    threads: int = 1

    def echo(self) -> dict:
        return {"schema": SCHEMA_VERSION, "experiment": self.experiment, "seed": self.seed,
                "out": self.out, "threads": self.threads, "params": self.params}


def _merge(kind: str, user: dict) -> dict:
    base = copy.deepcopy(DEFAULTS[kind])
    for key, val in user.items():
        if key not in base:
            raise ConfigError(f"params.{key}", f"unknown parameter for experiment {kind!r}")
        if key in NESTED and isinstance(val, dict) and isinstance(base[key], dict) and "kind" in val \
                and val["kind"] != base[key].get("kind"):
            base[key] = copy.deepcopy(val)         # a different kind starts from scratch
        elif key in NESTED and isinstance(val, dict) and isinstance(base[key], dict):
            base[key].update(val)
        else:
            base[key] = val
    return base


def make_config(experiment: str, params: Optional[dict] = None, seed: int = 0, out: Optional[str] = None,
                threads: int = 1) -> ExperimentConfig:
    if experiment not in DEFAULTS:
        raise ConfigError("experiment", f"unknown experiment {experiment!r}; known: {sorted(DEFAULTS)}")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed", "must be an integer in [0, 2^64)")
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise ConfigError("threads", "must be a positive integer")
    cfg = ExperimentConfig(experiment, _merge(experiment, params or {}), seed, out, threads)
    build(cfg)   # fail fast
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read and validate a config file; ``overrides`` (seed, out, threads, params) win over the file."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw, overrides)


def config_from_dict(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError("schema", f"expected schema version {SCHEMA_VERSION}, got {raw.get('schema')!r}")
    if "experiment" not in raw:
        raise ConfigError("experiment", "missing")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params", "must be an object")
    ov = dict(overrides or {})
    params = {**params, **ov.pop("params", {})}
    merged = {"seed": raw.get("seed", 0), "out": raw.get("out"), "threads": raw.get("threads", 1)}
    merged.update({k: v for k, v in ov.items() if v is not None})
    return make_config(raw["experiment"], params, **merged)


# --- builders ------------------------------------------------------------------

def _kind_and_rest(spec, key, allowed: dict):
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(key, "must be an object with a 'kind' entry")
    kind = spec["kind"]
    rest = {k: v for k, v in spec.items() if k != "kind"}
    if allowed is not None:
        if kind not in allowed:
            raise ConfigError(f"{key}.kind", f"unknown kind {kind!r}; known: {sorted(allowed)}")
        extra = set(rest) - allowed[kind]
        if extra:
            raise ConfigError(f"{key}.{sorted(extra)[0]}", f"unknown parameter for {key} {kind!r}")
    return kind, rest


def build_model(spec, key="params.model"):
    kind, rest = _kind_and_rest(spec, key, MODEL_PARAMS)
    try:
        if kind == "brownian":
            return brownian_model(int(rest.get("dim", 1)), float(rest.get("sigma", 1.0)))
        if kind == "ou":
            return ou_model(float(rest.get("theta", 1.0)), float(rest.get("sigma", 1.0)))
        if kind == "tanh":
            return tanh_drift_model(float(rest.get("kappa", 1.0)), float(rest.get("sigma", 1.0)))
        return constant_model(rest.get("b", 0.0), rest.get("sigma", 1.0))
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def build_driver(spec, key="params.driver"):
    kind, rest = _kind_and_rest(spec, key, None)
    try:
        return make_driver(kind, rest)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def build_terminal(spec, key="params.terminal"):
    kind, rest = _kind_and_rest(spec, key, None)
    try:
        return make_terminal(kind, rest)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def build_basis(spec, dim=1, key="params.basis"):
    if not isinstance(spec, dict):
        raise ConfigError(key, "must be an object")
    extra = set(spec) - {"family", "degree", "n_bins"}
    if extra:
        raise ConfigError(f"{key}.{sorted(extra)[0]}", "unknown basis parameter")
    try:
        return RegressionBasis(spec.get("family", "poly"), int(spec.get("degree", 4)),
                               int(spec.get("n_bins", 16)), dim)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def build_event(spec, key="params.event"):
    from . import ldp
    kind, rest = _kind_and_rest(spec, key, EVENT_PARAMS)
    try:
        if kind == "everywhere":
            return ldp.Everywhere()
        if kind == "sup":
            return ldp.sup_exit(float(rest.get("level", 1.0)), tuple(rest.get("normal", (1.0,))))
        if kind == "tube":
            return ldp.tube_exit(float(rest.get("radius", 1.0)), rest.get("center"))
        if kind == "halfspace":
            return ldp.TerminalHalfspace(tuple(rest.get("normal", (1.0,))), float(rest.get("level", 1.0)))
        return ldp.EndpointBall(tuple(np.atleast_1d(rest.get("center", 1.0))), float(rest.get("radius", 0.0)))
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def build_flow(spec, key="params.flow"):
    from .experiments import taylor_green, uniform_flow
    kind, rest = _kind_and_rest(spec, key, FLOW_PARAMS)
    if kind == "taylor_green":
        return taylor_green(float(rest.get("amp", 1.0)))
    c = rest.get("c", (0.5, -0.25))
    if len(c) != 2:
        raise ConfigError(f"{key}.c", "needs two components")
    return uniform_flow(c)


def _pos(p, key, integer=False, minimum=None):
    v = p[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)
    if integer:
        ok = ok and float(v) == int(v)
    if not ok or v <= 0 or (minimum is not None and v < minimum):
        kind = "an integer" if integer else "a number"
        bound = f" >= {minimum}" if minimum is not None else " > 0"
        raise ConfigError(f"params.{key}", f"must be {kind}{bound}, got {v!r}")
    return int(v) if integer else float(v)


def _eps_list(p, key="eps_list", upper=1.0):
    v = p[key]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"params.{key}", "must be a non-empty list")
    if any(not isinstance(e, (int, float)) or not 0 < e <= upper for e in v):
        raise ConfigError(f"params.{key}", f"entries must lie in (0, {upper}]")
    if len(set(v)) != len(v):
        raise ConfigError(f"params.{key}", "entries must be distinct")
    return [float(e) for e in v]


def _epsilon(p):
    e = p["epsilon"]
    if not isinstance(e, (int, float)) or not 0 <= e <= 1:
        raise ConfigError("params.epsilon", "must lie in [0, 1]")
    return float(e)


def build(cfg: ExperimentConfig) -> dict:
    """Validated objects and scalars for ``cfg``; raises :class:`ConfigError` naming the key."""
    p, kind = cfg.params, cfg.experiment
    out: Dict[str, Any] = {}
    if "model" in p:
        out["model"] = build_model(p["model"])
    if "driver" in p:
        out["driver"] = build_driver(p["driver"])
    if "terminal" in p:
        out["terminal"] = build_terminal(p["terminal"])
    if "basis" in p:
        dim = out["model"].dim_state if "model" in out else 1
        out["basis"] = build_basis(p["basis"], dim)
    for key in ("paths", "steps", "nodes", "nx", "nt", "n_grid", "coupled_paths", "outer_iters", "pairs"):
        if key in p:
            out[key] = _pos(p, key, integer=True, minimum={"paths": 2, "nx": 8, "n_grid": 4}.get(key))
    for key in ("restarts", "picard", "degree"):
        if key in p:
            v = p[key]
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"params.{key}", f"must be a nonnegative integer, got {v!r}")
            out[key] = v
    for key in ("T", "nu", "tol", "threshold"):
        if key in p:
            out[key] = _pos(p, key)
    if "epsilon" in p:
        out["epsilon"] = _epsilon(p)
    if "eps_list" in p:
        out["eps_list"] = _eps_list(p, upper=np.inf if kind == "ldp" else 1.0)
    if "x0" in p:
        x0 = np.atleast_1d(np.asarray(p["x0"], dtype=float))
        if "model" in out and x0.size not in (1, out["model"].dim_state):
            raise ConfigError("params.x0", f"expected {out['model'].dim_state} components")
        out["x0"] = x0
    for key in ("probes", "fd_probes"):
        if key in p and p[key] is not None:
            v = p[key]
            if not isinstance(v, (list, tuple)) or not v or not all(isinstance(x, (int, float)) for x in v):
                raise ConfigError(f"params.{key}", "must be a non-empty list of numbers")
            out[key] = [float(x) for x in v]
    if kind == "solve":
        if p["method"] not in ("regression", "transform"):
            raise ConfigError("params.method", "must be 'regression' or 'transform'")
        if p["method"] == "transform":
            if out["driver"].kind not in ("entropic", "cross_quadratic"):
                raise ConfigError("params.method", "the transform solver needs an entropic or cross_quadratic driver")
            if out["model"].dim_state != 1:
                raise ConfigError("params.model", "the transform solver is scalar")
    if kind == "pde":
        if out["model"].dim_state != 1:
            raise ConfigError("params.model", "the finite-difference oracle is one-dimensional")
        dom = p["domain"]
        if dom is not None and (not isinstance(dom, (list, tuple)) or len(dom) != 2 or not dom[0] < dom[1]):
            raise ConfigError("params.domain", "must be [lo, hi] with lo < hi")
        if dom is not None and any(not dom[0] < x < dom[1] for x in out["probes"]):
            raise ConfigError("params.probes", "probes must be interior to the domain")
    if kind == "ldp":
        out["event"] = build_event(p["event"])
        m = out["model"]
        if not (m.bounded and m.time_homogeneous):
            raise ConfigError("params.model", "rate minimization needs a bounded, time-homogeneous model")
    if kind == "burgers":
        if not isinstance(p["a"], (int, float)):
            raise ConfigError("params.a", "must be a number")
        if not isinstance(p["lam"], (int, float)) or p["lam"] < 0:
            raise ConfigError("params.lam", "must be a nonnegative number")
        if not np.isfinite(out["terminal"].M):
            raise ConfigError("params.terminal", "Burgers needs a bounded terminal condition")
    if kind == "ns2d":
        K = p["K"]
        if not isinstance(K, (list, tuple)) or len(K) != 2:
            raise ConfigError("params.K", "must have two components")
        out["flow"] = build_flow(p["flow"])
        out["K"] = tuple(float(k) for k in K)
    if kind == "proptest":
        from .experiments import SUITES
        bad = [s for s in p["suites"] if s not in SUITES]
        if bad or not p["suites"]:
            raise ConfigError("params.suites", f"unknown suite(s) {bad}; known: {list(SUITES)}")
    return out
