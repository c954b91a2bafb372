"""Command-line front end.

Subcommands: ex1, ex2, ex3 (experiment runs), convergence (interface-problem
mesh study at the initial stage), gradcheck (finite-difference check of the
shortcut gradient), quadcheck (monomial exactness of the embedded rules).
Exit codes: 0 success, 1 config error, 2 numerical failure, 3 check failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

SUMMARY_SCHEMA = "nefem-summary-v1"


def _load_config(problem, path, overrides=None):
    from .driver import ConfigError, RunConfig, default_config
    config = default_config(problem)
    data = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data.update(overrides or {})
    unknown = set(data) - set(asdict(config))
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for k in ("dims", "scales"):
        if k in data:
            data[k] = tuple(data[k])
    return replace(config, **data).validate()


def _prepare_out(path, files, overwrite):
    os.makedirs(path, exist_ok=True)
    if not overwrite:
        clashes = [f for f in files if os.path.exists(os.path.join(path, f))]
        if clashes:
            raise FileExistsError(
                f"refusing to overwrite {clashes} in {path}; pass --overwrite")


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def _summary(result, extra=None):
    e = result.errors
    payload = {
        "schema": SUMMARY_SCHEMA,
        "config": asdict(result.config),
        "dofs": {"p1": int(result.space.num_p1_dofs),
                 "enrichment": int(result.space.num_enrichment_dofs),
                 "total": int(result.space.num_dofs)},
        "final_loss": result.history.rows[-1]["loss"] if result.history.rows
        else None,
        "errors": None if e is None else {"e_l2": e[0], "e_h1": e[1],
                                          "e_energy": e[2]},
        "diagnostics": result.diagnostics,
    }
    if extra:
        payload.update(extra)
    return payload


def _run_experiment(problem_name, args):
    from .driver import (make_problem, run_adaptive_nefem, run_nefem,
                         save_run)
    from .problems import fem_reference
    config = _load_config(problem_name, args.config,
                          _cli_overrides(args))
    seeds = args.seeds
    names = []
    for s in seeds:
        names += [f"{problem_name}_seed{s}_history.csv",
                  f"{problem_name}_seed{s}_summary.json",
                  f"{problem_name}_seed{s}_run.json"]
    names.append(f"{problem_name}_aggregate.json")
    _prepare_out(args.out, names, args.overwrite)

    problem = make_problem(config)
    truth = None
    if config.track_errors and problem.exact is None and config.reference_nx:
        if args.verbose:
            print(f"computing {config.reference_nx}x{config.reference_nx} "
                  "reference field ...", flush=True)
        truth = fem_reference(problem, config.reference_nx,
                              degree=config.quadrature_degree,
                              config=config.solver())

    per_seed = []
    for s in seeds:
        cfg = replace(config, seed=s).validate()
        if args.verbose:
            print(f"[{problem_name}] seed {s}: {cfg.epochs} epochs on "
                  f"{cfg.nx}x{cfg.nx}", flush=True)
        runner = (run_adaptive_nefem if cfg.enrichment == "estimator-marked"
                  else run_nefem)
        result = runner(cfg, problem=problem, truth=truth)
        base = os.path.join(args.out, f"{problem_name}_seed{s}")
        with open(base + "_history.csv", "w") as f:
            result.history.to_csv(f, timing=cfg.timing)
        extra = {}
        if problem_name == "example2" and result.errors is not None:
            h1 = problem.h1_seminorm(result.assembler.equad)
            extra["relative_e_h1"] = result.errors[1] / h1
        _write_json(base + "_summary.json", _summary(result, extra))
        save_run(result, base + "_run.json")
        per_seed.append(_summary(result, extra))
        if args.verbose and result.errors:
            print(f"  e_l2={result.errors[0]:.3e} e_h1={result.errors[1]:.3e}",
                  flush=True)

    errs = [p["errors"] for p in per_seed if p["errors"]]
    agg = {"schema": SUMMARY_SCHEMA, "config": asdict(config),
           "seeds": list(seeds), "runs": len(per_seed)}
    if errs:
        for key in ("e_l2", "e_h1", "e_energy"):
            vals = np.array([e[key] for e in errs])
            agg[f"mean_{key}"] = float(vals.mean())
            agg[f"std_{key}"] = float(vals.std())
    if any("relative_e_h1" in p for p in per_seed):
        vals = np.array([p["relative_e_h1"] for p in per_seed])
        agg["mean_relative_e_h1"] = float(vals.mean())
    _write_json(os.path.join(args.out, f"{problem_name}_aggregate.json"), agg)
    return 0


def _cli_overrides(args):
    out = {}
    for k in ("nx", "epochs", "cond_every"):
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    if getattr(args, "no_timing", False):
        out["timing"] = False
    return out


def _cmd_convergence(args):
    from .driver import run_nefem
    config = _load_config("example3", args.config, _cli_overrides(args))
    levels = args.levels
    _prepare_out(args.out, ["convergence_aggregate.json"], args.overwrite)
    rows = []
    for nx in levels:
        errs = []
        for s in args.seeds:
            cfg = replace(config, nx=nx, seed=s,
                          epochs=args.epochs_override).validate()
            result = run_nefem(cfg)
            errs.append(result.errors[2])
            if args.verbose:
                print(f"[convergence] nx={nx} seed={s} e_E={errs[-1]:.4e}",
                      flush=True)
        rows.append({"nx": nx, "h": 2.0 / nx,
                     "mean_e_energy": float(np.mean(errs)),
                     "std_e_energy": float(np.std(errs)),
                     "samples": len(errs)})
    hs = np.log([r["h"] for r in rows])
    es = np.log([r["mean_e_energy"] for r in rows])
    slope = float(np.polyfit(hs, es, 1)[0])
    agg = {"schema": SUMMARY_SCHEMA, "config": asdict(config),
           "levels": rows, "fitted_slope": slope, "seeds": list(args.seeds)}
    _write_json(os.path.join(args.out, "convergence_aggregate.json"), agg)
    if args.verbose:
        print(f"fitted energy-error slope: {slope:.3f}", flush=True)
    return 0


def _cmd_gradcheck(args):
    from .assembly import Assembler, apply_dirichlet, ritz_loss
    from .linsolve import SolverConfig, solve_spd
    from .mesh import build_structured_mesh
    from .network import SPATIAL, init_network
    from .problems import example1
    from .space import build_space

    mesh = build_structured_mesh(4, 4)
    problem = example1()
    bnd = set(mesh.boundary_nodes.tolist())
    nodes = [i for i in range(mesh.num_nodes) if i not in bnd][:2]
    worst_all = 0.0
    for seed in args.seeds:
        nets = [init_network((2, 20, 20, 1), (3, 2), SPATIAL, mesh.nodes[n],
                             1000 * seed + k) for k, n in enumerate(nodes)]
        space = build_space(mesh, nodes, nets)
        asm = Assembler(space, problem, degree=8)

        def solve_loss():
            space.refresh_cache()
            system = asm.assemble()
            apply_dirichlet(system, 0.0, mesh)
            c = solve_spd(system.A_red, system.F_red,
                          SolverConfig(method="direct"))
            return system, c, ritz_loss(system, c)

        system, c, _ = solve_loss()
        grads = asm.loss_theta_gradient(system, c)
        gmax = max(np.abs(np.asarray(grads)).max(), 1e-300)
        step = 1e-4
        rng = np.random.default_rng(seed)
        worst = 0.0
        for m, net in enumerate(nets):
            base = net.params.copy()
            for k in rng.choice(net.num_params, size=args.samples,
                                replace=False):
                net.params[k] = base[k] + step
                net.bump_version()
                _, _, lp = solve_loss()
                net.params[k] = base[k] - step
                net.bump_version()
                _, _, lm = solve_loss()
                net.params[k] = base[k]
                net.bump_version()
                worst = max(worst, abs(grads[m][k] - (lp - lm) / (2 * step)))
        rel = worst / gmax
        worst_all = max(worst_all, rel)
        print(f"gradcheck seed {seed}: max relative gradient deviation "
              f"{rel:.3e}")
    ok = worst_all <= 1e-4
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} "
          f"(max deviation {worst_all:.3e}, tolerance 1.0e-04)")
    return 0 if ok else 3


def _cmd_quadcheck(args):
    from math import factorial

    from ._quad_data import RULES
    from .quadrature import _expand

    worst = 0.0
    for degree in sorted(RULES):
        pts, ws = _expand(RULES[degree])
        if args.corrupt and degree == max(RULES):
            ws = ws.copy()
            ws[0] *= 1.0 + 1e-6
        err = 0.0
        for p in range(degree + 1):
            for q in range(degree + 1 - p):
                exact = factorial(p) * factorial(q) / factorial(p + q + 2)
                got = 0.5 * np.sum(ws * pts[:, 1] ** p * pts[:, 2] ** q)
                err = max(err, abs(got - exact) / exact)
        n = pts.shape[0]
        print(f"quadcheck degree {degree:2d}: {n:3d} points, "
              f"max monomial relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst <= 1e-12
    print(f"quadcheck: {'PASS' if ok else 'FAIL'} "
          f"(worst {worst:.3e}, tolerance 1.0e-12)")
    return 0 if ok else 3


def _seed_list(text):
    return [int(s) for s in text.split(",") if s != ""]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nefem",
        description="Finite elements with trainable neural enrichment "
                    "functions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_seeds="0"):
        p.add_argument("--config", help="JSON config overriding the "
                                        "experiment defaults")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--seeds", type=_seed_list, default=default_seeds,
                       help="comma-separated seed list")
        p.add_argument("--overwrite", action="store_true",
                       help="allow overwriting existing result files")
        p.add_argument("--nx", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--cond-every", dest="cond_every", type=int)
        p.add_argument("--no-timing", action="store_true",
                       help="write zero wall times (reproducible output)")

    for name in ("ex1", "ex2", "ex3"):
        p = sub.add_parser(name, help=f"run experiment {name}")
        common(p)

    p = sub.add_parser("convergence",
                       help="interface-problem energy-error mesh study")
    common(p, default_seeds="0,1,2,3,4")
    p.add_argument("--levels", type=lambda t: [int(x) for x in t.split(",")],
                   default=[8, 16, 32, 64])
    p.add_argument("--epochs-override", type=int, default=0,
                   help="training epochs per run (0 = initial stage)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the "
                                         "loss gradient shortcut")
    p.add_argument("--seeds", type=_seed_list, default="0")
    p.add_argument("--samples", type=int, default=60,
                   help="parameters sampled per network")

    p = sub.add_parser("quadcheck", help="monomial exactness of the "
                                         "embedded quadrature rules")
    p.add_argument("--corrupt", action="store_true",
                   help="(negative control) corrupt one weight and expect "
                        "failure")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if isinstance(getattr(args, "seeds", None), str):
        args.seeds = _seed_list(args.seeds)
    from .driver import ConfigError
    from .linsolve import SolverError

    try:
        if args.command in ("ex1", "ex2", "ex3"):
            problem = {"ex1": "example1", "ex2": "example2",
                       "ex3": "example3"}[args.command]
            return _run_experiment(problem, args)
        if args.command == "convergence":
            return _cmd_convergence(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "quadcheck":
            return _cmd_quadcheck(args)
    except (ConfigError, FileExistsError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
