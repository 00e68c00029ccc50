"""Command line front end.

Every subcommand reads an optional JSON config, lets command-line flags
override it, validates everything up front and then calls the library
directly.  Outputs are flat CSV files plus a ``manifest`` in ``--out``.

Exit codes: 0 success, 1 a run finished but flagged a failure, 2 invalid
configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .bsde import estimate_bmo_norm, solve_bsde, solve_by_transform
from .config import ConfigError, ExperimentConfig, build, load_config, make_config
from .drivers import build_linearizer
from .errors import DomainError, RegressionError, SimulationError, TransformRangeError
from .experiments import Ns2dProblem, run_burgers_damping, run_ns2d, run_proptests
from .forward import gap_table, simulate_forward
from .grid import make_grid, sample_ensemble
from .ldp import ActionProblem, empirical_ldp, extrapolate, minimize_rate
from .pde import PdeProblem, padded_domain, solve_pde
from .regression import RegressionBasis
from .sweep import SweepConfig, limit_consistency, run_sweep

COMMANDS = ("solve", "pde", "sweep", "ldp", "burgers", "ns2d", "proptest", "forward")


# --- output ---------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def write_manifest(out: Path, cfg: ExperimentConfig, files: List[str], status: dict) -> None:
    manifest = {
        "config": cfg.echo(),
        "seed": cfg.seed,
        "files": sorted(files),
        "status": status,
        "versions": {"fbsdelab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    (out / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_cell) + "\n")


# --- runners: each returns (files written, flagged, message) ------------------------

def _x0(objs, dim):
    x0 = objs["x0"]
    return np.repeat(x0, dim) if x0.size == 1 else x0


def run_solve(cfg, objs, out: Path):
    p = cfg.params
    model, drv, tc, basis = objs["model"], objs["driver"], objs["terminal"], objs["basis"]
    grid = make_grid(0.0, objs["T"], objs["steps"])
    ens = sample_ensemble(grid, objs["paths"], model.dim_noise, cfg.seed, workers=cfg.threads)
    fp = simulate_forward(model, grid, ens, _x0(objs, model.dim_state), objs["epsilon"], cfg.threads)
    if p["method"] == "transform":
        if drv.kind == "entropic":
            g = drv.params["gamma"] / 2
            coef = lambda y: np.full_like(np.asarray(y, dtype=float), g)
        else:
            c = drv.params["c"]
            coef = lambda y: c * np.asarray(y, dtype=float)
        lin = build_linearizer(coef, tc.M + 0.5)
        sol = solve_by_transform(fp, lin, tc, basis, cfg.threads)
    else:
        sol = solve_bsde(fp, drv, tc, basis, objs["picard"], workers=cfg.threads)
    bmo = estimate_bmo_norm(sol, workers=cfg.threads) if p["bmo"] else float("nan")
    d = model.dim_noise
    header = ["epsilon", "y0", "y0_stderr"] + [f"z0_{j}" for j in range(d)] + \
             ["clamp_y_fraction", "clamp_z_fraction", "clamp_warning", "bmo"]
    row = [objs["epsilon"], sol.y0, sol.y0_stderr, *sol.z0, sol.clamp.y_fraction, sol.clamp.z_fraction,
           sol.clamp.warning, bmo]
    write_csv(out / "solve.csv", header, [row])
    files = ["solve.csv"]
    if p["dump_field"] and model.dim_state == 1:
        rows = []
        for i, t in enumerate(grid.times):
            xs = np.quantile(fp.states[:, i, 0], np.linspace(0.01, 0.99, 21)) if i > 0 else fp.states[:1, 0, 0]
            us = sol.u(i, xs[:, None])
            rows += [(t, x, u) for x, u in zip(xs, us)]
        write_csv(out / "field.csv", ["t", "x", "u"], rows)
        files.append("field.csv")
    return files, sol.clamp.warning, "clamp activation above 10%" if sol.clamp.warning else ""


def run_pde(cfg, objs, out: Path):
    p = cfg.params
    probes = objs["probes"]
    if p["domain"] is None:
        lo, hi = padded_domain(min(probes), max(probes), objs["model"], objs["epsilon"], objs["T"])
    else:
        lo, hi = map(float, p["domain"])
    fg = solve_pde(PdeProblem(objs["model"], objs["driver"], objs["terminal"], objs["epsilon"], lo, hi,
                              objs["nx"], objs["nt"], objs["T"]))
    write_csv(out / "pde.csv", ["x", "u0"], zip(probes, fg.u0(probes)))
    files = ["pde.csv"]
    if p["dump_field"]:
        write_csv(out / "field.csv", ["t", "x", "u"],
                  ((t, x, u) for k, t in enumerate(fg.t) for x, u in zip(fg.x, fg.u[k])))
        files.append("field.csv")
    return files, False, ""


def sweep_config(cfg, objs) -> SweepConfig:
    return SweepConfig(objs["model"], objs["driver"], objs["terminal"], tuple(objs["eps_list"]),
                       tuple(objs["probes"]), objs["paths"], objs["steps"], objs["T"], cfg.seed,
                       objs["basis"], objs["picard"], workers=cfg.threads)


def run_sweep_cmd(cfg, objs, out: Path):
    sc = sweep_config(cfg, objs)
    res = run_sweep(sc)
    rep = limit_consistency(sc, res)
    write_csv(out / "sweep.csv",
              ["epsilon", "gapY", "gapY_stderr", "normZ", "slope_running", "normZ_stderr", "y0", "y0_limit",
               "y0_stderr", "max_abs_y", "flagged"],
              [(r.epsilon, r.gap_y, r.gap_y_stderr, r.norm_z, r.slope_running, r.norm_z_stderr, r.y0,
                r.y0_limit, r.y0_stderr, r.max_abs_y, r.flagged) for r in res.rows])
    write_csv(out / "sweep_summary.csv",
              ["slope", "band_lo", "band_hi", "z_slope", "degenerate", "z_monotone", "y_close", "y_deviation",
               "y_tolerance"],
              [(res.slope, *res.slope_band, res.z_slope, res.degenerate, rep.z_monotone, rep.y_close,
                rep.y_deviation, rep.y_tolerance)])
    bad = [r for r in res.rows if r.flagged]
    return ["sweep.csv", "sweep_summary.csv"], bool(bad), "; ".join(r.message for r in bad)


def run_ldp_cmd(cfg, objs, out: Path):
    model = objs["model"]
    x0 = _x0(objs, model.dim_state)
    prob = ActionProblem(model, x0, objs["T"], objs["event"], objs["nodes"])
    rate = minimize_rate(prob, objs["restarts"], cfg.seed)
    grid = make_grid(0.0, objs["T"], objs["steps"])
    ens = sample_ensemble(grid, objs["paths"], model.dim_noise, cfg.seed, workers=cfg.threads)
    rows = empirical_ldp(model, x0, objs["eps_list"], objs["event"], ens)
    intercept, slope = extrapolate(rows)
    write_csv(out / "ldp.csv", ["epsilon", "eps_log_p", "rate_bound", "stderr", "hits", "n_paths", "flagged"],
              [(r.epsilon, r.eps_log_p, -rate.value, r.stderr, r.hits, r.n_paths, r.flagged) for r in rows])
    path = np.asarray(rate.path)
    write_csv(out / "path.csv", ["s"] + [f"phi_{j}" for j in range(path.shape[1])],
              [(s, *row) for s, row in zip(rate.times, path)])
    write_csv(out / "ldp_summary.csv", ["rate", "intercept", "slope", "formulation", "feasible"],
              [(rate.value, intercept, slope, prob.formulation, rate.feasible)])
    flagged = any(r.flagged for r in rows)
    return ["ldp.csv", "path.csv", "ldp_summary.csv"], flagged, "zero-hit rows" if flagged else ""


def run_burgers_cmd(cfg, objs, out: Path):
    p = cfg.params
    rep = run_burgers_damping(p["a"], p["lam"], objs["eps_list"], objs["terminal"], objs["paths"], objs["steps"],
                              objs["T"], cfg.seed, float(objs["x0"][0]), objs["basis"], objs.get("fd_probes"),
                              objs["nx"], objs["nt"], bool(p["coupled"]), objs["coupled_paths"],
                              outer_iters=objs["outer_iters"], tol=objs["tol"], workers=cfg.threads)
    write_csv(out / "burgers.csv",
              ["epsilon", "y0", "y0_stderr", "max_abs_y", "sup_g", "sup_ok", "fd_deviation", "lipschitz",
               "lipschitz_bound", "coupled_converged", "flagged"],
              [(r.epsilon, r.y0, r.y0_stderr, r.max_abs_y, r.sup_g, r.sup_ok, r.fd_deviation, r.lipschitz,
                rep.lipschitz_bound, "" if r.coupled_converged is None else r.coupled_converged, r.flagged)
               for r in rep.rows])
    msgs = "; ".join(r.message for r in rep.rows if r.message)
    return ["burgers.csv"], not rep.passed, msgs or ("" if rep.passed else "sup bound violated")


def run_ns2d_cmd(cfg, objs, out: Path):
    psi, h, jac = objs["flow"]
    prob = Ns2dProblem(objs["nu"], objs["K"], psi, h, jac, objs["T"], objs["n_grid"], n_paths=objs["paths"],
                       n_steps=objs["steps"], basis=RegressionBasis("poly", objs["degree"], dim=2),
                       picard_iters=objs["picard"])
    rep = run_ns2d(prob, cfg.seed, objs["threshold"], workers=cfg.threads)
    write_csv(out / "ns2d_field.csv", ["x1", "x2", "u1", "u2"],
              [(*x, *u) for x, u in zip(rep.points, rep.u0)])
    write_csv(out / "ns2d.csv", ["div_fd", "div_gradient", "u_residual", "threshold", "routes_agree", "passed"],
              [(rep.div_fd, rep.div_gradient, rep.u_residual, rep.threshold, rep.routes_agree, rep.passed)])
    return ["ns2d.csv", "ns2d_field.csv"], not rep.passed, "" if rep.passed else "divergence check failed"


def run_proptest_cmd(cfg, objs, out: Path):
    p = cfg.params
    rep = run_proptests(p["suites"], cfg.seed, objs["paths"], objs["steps"], objs["pairs"],
                        RegressionBasis("poly", objs["degree"]))
    write_csv(out / "proptest.csv", ["suite", "case", "passed", "details"],
              [(c.suite, c.name, c.passed, json.dumps(c.details, sort_keys=True, default=_cell))
               for c in rep.cases])
    failed = [c.name for c in rep.cases if not c.passed]
    return ["proptest.csv"], bool(failed), ", ".join(failed)


def run_forward_cmd(cfg, objs, out: Path):
    model = objs["model"]
    x0 = _x0(objs, model.dim_state)
    grid = make_grid(0.0, objs["T"], objs["steps"])
    ens = sample_ensemble(grid, objs["paths"], model.dim_noise, cfg.seed, workers=cfg.threads)
    fp = simulate_forward(model, grid, ens, x0, objs["epsilon"], cfg.threads)
    m = model.dim_state
    write_csv(out / "terminal_states.csv", ["path"] + [f"x_{j}" for j in range(m)],
              [(k, *row) for k, row in enumerate(fp.states[:, -1])])
    rows, _ = gap_table(model, grid, ens, x0, objs["eps_list"], workers=cfg.threads)
    write_csv(out / "gaps.csv", ["epsilon", "gap_p2", "gap_p4"], rows)
    return ["terminal_states.csv", "gaps.csv"], False, ""


RUNNERS: Dict[str, Callable] = {
    "solve": run_solve, "pde": run_pde, "sweep": run_sweep_cmd, "ldp": run_ldp_cmd,
    "burgers": run_burgers_cmd, "ns2d": run_ns2d_cmd, "proptest": run_proptest_cmd, "forward": run_forward_cmd,
}


# --- argument parsing -----------------------------------------------------------

def _spec(text: str) -> dict:
    """``kind`` or ``kind:key=value,key=value`` into a nested parameter object."""
    kind, _, rest = text.partition(":")
    spec: dict = {"kind": kind.strip()}
    for item in filter(None, rest.split(",")):
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(kind, f"malformed parameter {item!r}; expected key=value")
        try:
            spec[key.strip()] = json.loads(val)
        except json.JSONDecodeError:
            spec[key.strip()] = val
    return spec


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("list", f"cannot parse {text!r} as comma-separated numbers") from None


FLAG_MAP = {
    # dest: (param key, converter)
    "driver": ("driver", _spec), "terminal": ("terminal", _spec), "model": ("model", _spec),
    "event": ("event", _spec), "flow": ("flow", _spec),
    "basis_degree": ("basis", lambda v: {"degree": v}), "basis_family": ("basis", lambda v: {"family": v}),
    "picard": ("picard", None), "paths": ("paths", None), "steps": ("steps", None), "x0": ("x0", None),
    "epsilon": ("epsilon", None), "method": ("method", None), "bmo": ("bmo", None),
    "dump_field": ("dump_field", None), "nx": ("nx", None), "nt": ("nt", None), "domain": ("domain", _floats),
    "probes": ("probes", _floats), "eps_list": ("eps_list", _floats), "nodes": ("nodes", None),
    "restarts": ("restarts", None), "a": ("a", None), "lam": ("lam", None), "fd_probes": ("fd_probes", _floats),
    "coupled": ("coupled", None), "nu": ("nu", None), "n_grid": ("n_grid", None), "T": ("T", None),
    "suites": ("suites", lambda v: [s for s in v.split(",") if s]), "pairs": ("pairs", None),
}


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        # subcommands repeat the global flags with suppressed defaults, so a
        # value given before the subcommand is not reset after it
        p = argparse.ArgumentParser(add_help=False, argument_default=default)
        p.add_argument("--config", help="JSON experiment file")
        p.add_argument("--seed", type=int, help="master seed (overrides the file)")
        p.add_argument("--out", help="output directory (default: fbsdelab-out)")
        p.add_argument("--threads", type=int, help="worker threads")
        return p

    parser = argparse.ArgumentParser(prog="fbsdelab", parents=[globals_(None)],
                                     description="Forward-backward SDE solvers and small-noise experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = globals_(argparse.SUPPRESS)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    def solver_flags(sp):
        sp.add_argument("--driver", help="kind[:k=v,...], e.g. entropic:gamma=1")
        sp.add_argument("--terminal", help="kind[:k=v,...], e.g. cos:amp=1")
        sp.add_argument("--model", help="kind[:k=v,...], e.g. ou:theta=1")
        sp.add_argument("--paths", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--T", type=float)

    sp = add("solve", "regression Monte Carlo solve at one start point")
    solver_flags(sp)
    sp.add_argument("--basis-degree", dest="basis_degree", type=int)
    sp.add_argument("--basis-family", dest="basis_family", choices=("poly", "partition"))
    sp.add_argument("--picard", type=int)
    sp.add_argument("--x0", type=float)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--method", choices=("regression", "transform"))
    sp.add_argument("--bmo", action="store_const", const=True)
    sp.add_argument("--dump-field", dest="dump_field", action="store_const", const=True)

    sp = add("pde", "finite-difference oracle")
    solver_flags(sp)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--nx", type=int)
    sp.add_argument("--nt", type=int)
    sp.add_argument("--domain", help="lo,hi")
    sp.add_argument("--probes", help="comma-separated points")
    sp.add_argument("--dump-field", dest="dump_field", action="store_const", const=True)

    sp = add("sweep", "vanishing-viscosity sweep")
    solver_flags(sp)
    sp.add_argument("--basis-degree", dest="basis_degree", type=int)
    sp.add_argument("--basis-family", dest="basis_family", choices=("poly", "partition"))
    sp.add_argument("--picard", type=int)
    sp.add_argument("--eps-list", dest="eps_list")
    sp.add_argument("--probes")

    sp = add("ldp", "rate minimization and empirical small-noise probabilities")
    sp.add_argument("--model")
    sp.add_argument("--event", help="kind[:k=v,...], e.g. sup:level=1")
    sp.add_argument("--eps-list", dest="eps_list")
    sp.add_argument("--nodes", type=int)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--x0", type=float)
    sp.add_argument("--T", type=float)

    sp = add("burgers", "viscous Burgers with damping")
    sp.add_argument("--a", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--terminal")
    sp.add_argument("--eps-list", dest="eps_list")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--fd-probes", dest="fd_probes")
    sp.add_argument("--coupled", action="store_const", const=True)

    sp = add("ns2d", "2-D Navier-Stokes divergence check")
    sp.add_argument("--nu", type=float)
    sp.add_argument("--flow")
    sp.add_argument("--n-grid", dest="n_grid", type=int)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--T", type=float)

    sp = add("proptest", "statistical property suites")
    sp.add_argument("--suites", help="comma-separated subset")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--pairs", type=int)

    sp = add("forward", "forward paths and the noise-gap table")
    sp.add_argument("--model")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--eps-list", dest="eps_list")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--x0", type=float)
    return parser


def _flag_params(ns) -> dict:
    params: dict = {}
    for dest, (key, conv) in FLAG_MAP.items():
        val = getattr(ns, dest, None)
        if val is None:
            continue
        val = conv(val) if conv else val
        if key == "basis" and key in params:
            params[key].update(val)
        else:
            params[key] = val
    return params


def resolve(ns) -> ExperimentConfig:
    overrides = {"seed": ns.seed, "out": ns.out, "threads": ns.threads, "params": _flag_params(ns)}
    if ns.config:
        cfg = load_config(ns.config, overrides)
        if cfg.experiment != ns.command:
            raise ConfigError("experiment", f"config is for {cfg.experiment!r}, command is {ns.command!r}")
        return cfg
    kw = {k: v for k, v in overrides.items() if k != "params" and v is not None}
    return make_config(ns.command, overrides["params"], **kw)


def run(cfg: ExperimentConfig, out: Optional[Path] = None) -> tuple:
    """Run ``cfg`` and write its files; returns ``(flagged, message)``."""
    out = Path(out or cfg.out or "fbsdelab-out")
    out.mkdir(parents=True, exist_ok=True)
    objs = build(cfg)
    try:
        files, flagged, msg = RUNNERS[cfg.experiment](cfg, objs, out)
    except (SimulationError, RegressionError, TransformRangeError) as exc:
        files, flagged, msg = [], True, f"{type(exc).__name__}: {exc}"
    write_manifest(out, cfg, files, {"flagged": bool(flagged), "message": msg})
    return bool(flagged), msg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns)
        flagged, msg = run(cfg)
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if flagged:
        print(f"flagged: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
