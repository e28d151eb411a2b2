"""Command-line driver: solver runs, gradient checks, rate studies, export.

Configuration is a flat ``key = value`` text file; any key can be
overridden on the command line with repeated ``--set key=value`` flags.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import problems
from .mesh import CellField
from .prox import Zero
from .problems.studies import (fitted_rate, manufactured_poisson_study,
                               poisson_fd_check, topo_fd_check)
from .trust_region import TrParams, run
from .vtk_io import write_vtk

log = logging.getLogger(__name__)

TR_KEYS = ("delta0", "eta1", "eta2", "gamma1", "gamma2", "gamma3", "theta",
           "kappa_val_bar", "kappa_der_bar", "tau_max_val", "tau_max_der",
           "gamma", "eps0", "eps_decay", "j_exp", "psi_tol", "max_iter",
           "kappa_rad", "subproblem_iters", "hessian", "lbfgs_memory")

BASE_DEFAULTS = {
    "problem": "poisson",
    "out": "out",
    "snapshot_stride": 0,
    "seed": 0,
    # trust-region constants (reported experiment settings)
    "delta0": 50.0, "eta1": 0.05, "eta2": 0.9,
    "gamma1": 0.25, "gamma2": 1.0, "gamma3": 2.5,
    "theta": 0.05,
    "kappa_val_bar": 1e6, "kappa_der_bar": 1e6,
    "tau_max_val": 1.0, "tau_max_der": 1.0,
    "gamma": 1.0 - 1e-3, "eps0": 1.0 - 1e-3, "eps_decay": 1.0,
    "j_exp": 0.9, "psi_tol": 1e-6, "max_iter": 100,
    "kappa_rad": 1.0, "subproblem_iters": 15,
    "hessian": "auto", "lbfgs_memory": 10,
    # problem data
    "alpha": 1e-4, "beta": 1e-2, "u_d": "corner",
    "v0": -1.0,                       # <0 means the example default
    "k_min": 1e-3, "k_max": 1.0,
    "filter_radius": problems.topo.DEFAULT_RADIUS,
    "source_q": 1e-2,
    "dof_budget": 10_000, "initial_n": 8,
    "solve_safety": 0.1, "solve_rel_cap": 1e-8,
}

PROBLEM_DEFAULTS = {
    "poisson": {"dof_budget": 10_000, "initial_n": 8, "max_iter": 40,
                "kappa_val_bar": 1e6, "kappa_der_bar": 1e6},
    "topo1": {"dof_budget": 150_000, "initial_n": 64, "max_iter": 300,
              "kappa_val_bar": 1e9, "kappa_der_bar": 1e9, "hessian": "lbfgs"},
    "topo2": {"dof_budget": 150_000, "initial_n": 64, "max_iter": 300,
              "kappa_val_bar": 1e9, "kappa_der_bar": 1e9, "hessian": "lbfgs"},
    "synthetic": {"max_iter": 50, "delta0": 10.0},
}

TARGETS = {
    "corner": problems.poisson.default_target,
    "sinsin": problems.poisson.sine_target,
    "zero": lambda x, y: np.zeros_like(x),
}


class ConfigError(ValueError):
    pass


def _convert(key, raw, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None, sets=()):
    """Resolve the run configuration from defaults, file, and overrides."""
    values = dict(BASE_DEFAULTS)
    explicit = {}

    def apply(key, raw, where):
        key = key.strip()
        if key not in values:
            raise ConfigError(f"unknown configuration key {key!r} ({where})")
        try:
            explicit[key] = _convert(key, raw.strip(), BASE_DEFAULTS[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({where})") from exc

    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key, raw, "--set")

    problem = explicit.get("problem", values["problem"])
    if problem not in PROBLEM_DEFAULTS:
        raise ConfigError(f"unknown problem {problem!r}")
    values.update(PROBLEM_DEFAULTS[problem])
    values.update(explicit)
    if values["u_d"] not in TARGETS:
        raise ConfigError(f"unknown target selector {values['u_d']!r}")
    return values


def build_problem(cfg):
    kind = cfg["problem"]
    if kind == "poisson":
        problem = problems.PoissonControl(
            alpha=cfg["alpha"], beta=cfg["beta"], u_d=TARGETS[cfg["u_d"]],
            n0=cfg["initial_n"], dof_budget=cfg["dof_budget"],
            theta=cfg["theta"], tau_max_val=cfg["tau_max_val"],
            tau_max_der=cfg["tau_max_der"], solve_safety=cfg["solve_safety"],
            solve_rel_cap=cfg["solve_rel_cap"])
        return problem, problem.phi, problem.initial_control()
    if kind in ("topo1", "topo2"):
        problem = problems.TopoOpt(
            example=int(kind[-1]), n0=cfg["initial_n"],
            v0=None if cfg["v0"] < 0 else cfg["v0"],
            k_min=cfg["k_min"], k_max=cfg["k_max"],
            filter_radius=cfg["filter_radius"], source_q=cfg["source_q"],
            dof_budget=cfg["dof_budget"], theta=cfg["theta"],
            tau_max_val=cfg["tau_max_val"], tau_max_der=cfg["tau_max_der"],
            solve_safety=cfg["solve_safety"], solve_rel_cap=cfg["solve_rel_cap"])
        return problem, problem.phi, problem.initial_control()
    if kind == "synthetic":
        rng = np.random.default_rng(cfg["seed"])
        mesh = problems.synthetic.two_cell_mesh()
        target = CellField(mesh, rng.normal(0.0, 2.0, mesh.num_cells))
        oracle = problems.QuadraticOracle(target)
        return oracle, Zero(), CellField.constant(mesh, 0.0)
    raise ConfigError(f"unknown problem {kind!r}")


def tr_params(cfg):
    return TrParams(**{k: cfg[k] for k in TR_KEYS})


def cmd_run(args):
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg["out"] = args.out
    if args.snapshot_stride is not None:
        cfg["snapshot_stride"] = args.snapshot_stride
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    oracle, phi, z0 = build_problem(cfg)
    params = tr_params(cfg)

    stride = cfg["snapshot_stride"]

    def snapshot(k, z, record):
        if stride <= 0 or k % stride:
            return
        path = out / f"iter_{k:04d}.vtk"
        if hasattr(oracle, "snapshot"):
            oracle.snapshot(z, path)
        else:
            write_vtk(path, z.mesh, cell_data={"control": z})

    start = time.perf_counter()
    result = run(oracle, phi, z0, params, callback=snapshot)
    wall = time.perf_counter() - start
    result.write_history_csv(out / "history.csv")

    final = result.history[-1] if result.history else None
    summary = {
        "problem": cfg["problem"],
        "status": result.status,
        "iterations": result.iterations,
        "accepted_steps": result.accepted_count,
        "final_psi": f"{result.psi:.17g}",
        "final_F": f"{final.F:.17g}" if final is not None else "nan",
        "final_dofs": final.dofs if final is not None else 0,
        "monotone_violations": len(result.monotone_violations),
        "wall_time_s": f"{wall:.3f}",
    }
    with open(out / "summary.txt", "w") as fh:
        for key, val in summary.items():
            fh.write(f"{key} = {val}\n")
        fh.write("\n# resolved parameters\n")
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
    for key, val in summary.items():
        print(f"{key} = {val}")
    return 0 if result.status == "converged" else 2


def cmd_check_gradient(args):
    cfg = load_config(args.config, args.set)
    if args.points < 1:
        print("check-gradient needs at least one point", file=sys.stderr)
        return 1
    kind = cfg["problem"]
    if kind == "poisson":
        err = poisson_fd_check(n_points=args.points, seed=cfg["seed"],
                               flip_adjoint=args.flip_sign)
        threshold = 1e-5
    elif kind in ("topo1", "topo2"):
        err = topo_fd_check(n_points=args.points, seed=cfg["seed"],
                            example=int(kind[-1]), flip_sign=args.flip_sign)
        threshold = 1e-4
    else:
        print(f"no gradient check for problem {kind!r}", file=sys.stderr)
        return 1
    status = "PASS" if err <= threshold else "FAIL"
    print(f"{kind}: max relative FD error {err:.3e} "
          f"(threshold {threshold:.0e}) {status}")
    return 0 if err <= threshold else 1


def cmd_estimate_rates(args):
    print(f"{'level':>5} {'dofs':>8} {'h':>10} {'error':>12} "
          f"{'estimator':>12} {'eff.':>8} {'rate':>6}")
    for degree in args.degrees:
        rows = manufactured_poisson_study(degree, args.levels)
        print(f"P{degree}:")
        for i, r in enumerate(rows):
            rate = f"{r['rate']:6.3f}" if r["rate"] is not None else "     —"
            print(f"{i:>5} {r['dofs']:>8} {r['h']:>10.4e} {r['error']:>12.5e} "
                  f"{r['estimator']:>12.5e} {r['effectivity']:>8.2f} {rate}")
        if len(rows) > 1:
            print(f"   fitted rate: {fitted_rate(rows):.3f}")
    return 0


def cmd_export_mesh(args):
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    oracle, _, z0 = build_problem(cfg)
    path = out / "mesh.vtk"
    write_vtk(path, z0.mesh, cell_data={"control": z0})
    print(f"wrote {path}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="trafem",
        description="Adaptive-FEM trust-region solver for nonsmooth "
                    "PDE-constrained optimization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")

    p_run = sub.add_parser("run", parents=[common], help="solve a problem")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--snapshot-stride", type=int, default=None,
                       help="write iter_####.vtk every N iterations")
    p_run.set_defaults(fn=cmd_run)

    p_chk = sub.add_parser("check-gradient", parents=[common],
                           help="finite-difference gradient verification")
    p_chk.add_argument("--points", type=int, default=5)
    p_chk.add_argument("--flip-sign", action="store_true",
                       help="negate the adjoint (negative control)")
    p_chk.set_defaults(fn=cmd_check_gradient)

    p_rat = sub.add_parser("estimate-rates", parents=[common],
                           help="manufactured-solution convergence study")
    p_rat.add_argument("--levels", type=int, default=5)
    p_rat.add_argument("--degrees", type=int, nargs="+", default=[1, 2])
    p_rat.set_defaults(fn=cmd_estimate_rates)

    p_exp = sub.add_parser("export-mesh", parents=[common],
                           help="write the initial mesh as VTK")
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(fn=cmd_export_mesh)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
