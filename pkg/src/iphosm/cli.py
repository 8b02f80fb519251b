"""Command line interface.

Subcommands: ``solve`` (monolithic Schur-CG), ``osm`` (Schwarz iteration),
``bench`` (experiment tables), ``spectra`` (dense spectral checks) and
``parabolic`` (backward Euler driver). Exit codes: 0 success, 1 input error,
2 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, spectral
from .assembly import assemble_system, default_alpha, l2_error, solve_monolithic
from .linalg import IndefiniteMatrixError
from .mesh import MeshError, PartitionError, generate_structured_mesh, load_mesh, partition_boxes, \
    partition_from_tags
from .schwarz import OptimizedSchwarz, SchwarzConfig, fixed_point_error, write_history

log = logging.getLogger("iphosm")

EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _boxes(text: str):
    try:
        px, py = (int(t) for t in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected PXxPY, got {text!r}") from exc
    if px < 1 or py < 1:
        raise argparse.ArgumentTypeError("box counts must be positive")
    return px, py


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("problem")
    g.add_argument("--config", help="file of 'key = value' lines mirroring the flags")
    g.add_argument("--mesh", help="ASCII mesh file")
    g.add_argument("--nx", type=int, default=16, help="structured cells per side (x)")
    g.add_argument("--ny", type=int, default=None, help="structured cells in y (default nx)")
    g.add_argument("--boxes", type=_boxes, default=None, help="box partition PXxPY")
    g.add_argument("--tags", help="file with one subdomain tag per element")
    g.add_argument("--k", type=int, default=1, help="polynomial degree")
    g.add_argument("--alpha-c", type=float, default=2.0, help="alpha = c (k+1)(k+2)")
    g.add_argument("--gamma", type=float, default=None)
    g.add_argument("--gamma-rule", default="tau_H",
                   choices=["fixed", "tau_const", "tau_H", "tau_H2", "asm"])
    g.add_argument("--eta", type=float, default=None, help="reaction coefficient (overrides rule)")
    g.add_argument("--eta-rule", default="const", choices=list(bench.ETA_RULES))
    g.add_argument("--eta-c", type=float, default=1.0, help="eta = c h^-p")
    g.add_argument("--tol", type=float, default=1e-8)
    g.add_argument("--maxit", type=int, default=50000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="output CSV path")
    g.add_argument("--rhs", default="one", choices=["one", "sine"], help="load function")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iphosm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="monolithic Schur complement solve")
    _common(p)

    p = sub.add_parser("osm", help="optimized Schwarz iteration")
    _common(p)
    p.add_argument("--check", action="store_true", help="compare against the monolithic solve")
    p.add_argument("--study", action="store_true",
                   help="random start around the monolithic traces, R-norm error indicator")

    p = sub.add_parser("bench", help="experiment tables")
    _common(p)
    p.add_argument("--table", required=True, choices=list(bench.RUNNERS))
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--alpha-mode", default=None, choices=["scaled", "fixed"])

    p = sub.add_parser("spectra", help="dense spectral checks")
    _common(p)
    p.add_argument("--check", required=True, choices=["schur", "b", "mk", "appendix", "ei", "all"])
    p.add_argument("--subdomain", type=int, default=0)
    p.add_argument("--levels", type=int, default=1, help="refinement levels (structured meshes)")
    p.add_argument("--samples", type=int, default=200)

    p = sub.add_parser("parabolic", help="backward Euler with Schwarz solves")
    _common(p)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--tau", type=float, default=None, help="time step (default 1/eta)")
    p.add_argument("--no-cold", action="store_true", help="skip the paired cold-start solves")
    p.set_defaults(eta_rule="h-2", gamma_rule="tau_H2", boxes=(2, 2))
    return parser


def _read_config(path) -> list:
    """Turn ``key = value`` lines into flag tokens."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    argv = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            argv.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            argv += [flag, value]
    return argv


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # config values first, command-line flags after so they win
        extra = _read_config(args.config)
        args = parser.parse_args([argv[0]] + extra + list(argv[1:]))
    return args


# ---------------------------------------------------------------- helpers


def _problem(args):
    if args.mesh:
        try:
            mesh, tags = load_mesh(args.mesh)
        except OSError as exc:
            raise InputError(f"cannot read mesh {args.mesh}: {exc}") from exc
    else:
        if args.nx < 1:
            raise InputError("--nx must be positive")
        mesh, tags = generate_structured_mesh(args.nx, args.ny or args.nx), None
    if args.tags:
        try:
            tags = np.loadtxt(args.tags, dtype=np.int64, ndmin=1)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read tags {args.tags}: {exc}") from exc
    if args.boxes is not None:
        part = partition_boxes(mesh, *args.boxes)
    elif tags is not None:
        part = partition_from_tags(mesh, tags)
    else:
        part = partition_boxes(mesh, 2, 1)
    return mesh, part


def _eta(args, mesh, part):
    if args.eta is not None:
        return args.eta
    return bench.eta_value(args.eta_rule, mesh.h, part.H, args.eta_c)


def _load(args):
    if args.rhs == "sine":
        return lambda x, y: (1.0 + 2 * math.pi ** 2) * np.sin(math.pi * x) * np.sin(math.pi * y)
    return bench.unit_load


def _config(args):
    rule = args.gamma_rule
    if args.gamma is not None and rule not in ("fixed",):
        rule = "fixed"
    return SchwarzConfig(gamma=args.gamma, gamma_rule=rule, tol=args.tol, maxit=args.maxit, seed=args.seed)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_solve(args) -> int:
    mesh, part = _problem(args)
    eta = _eta(args, mesh, part)
    system = assemble_system(mesh, part, args.k, eta, alpha=default_alpha(args.k, args.alpha_c), f=_load(args))
    sol = solve_monolithic(system, maxit=args.maxit)
    rows = [("n_elements", mesh.n_elements), ("n_subdomains", part.n_subdomains),
            ("n_trace", system.space.n_trace_global), ("eta", eta),
            ("cg_iterations", sol.cg.iterations if sol.cg else 0), ("block_residual", sol.residual)]
    if args.rhs == "sine":
        exact = lambda x, y: np.sin(math.pi * x) * np.sin(math.pi * y)
        rows.append(("l2_error", l2_error(system.space, sol.u, exact)))
    for key, val in rows:
        print(f"{key} = {val}")
    if args.out:
        _write_rows(args.out, ["quantity", "value"], rows)
    return EXIT_OK


def cmd_osm(args) -> int:
    mesh, part = _problem(args)
    eta = _eta(args, mesh, part)
    system = assemble_system(mesh, part, args.k, eta, alpha=default_alpha(args.k, args.alpha_c), f=_load(args))
    solver = OptimizedSchwarz(system, _config(args))
    mono = solve_monolithic(system) if (args.check or args.study) else None
    if args.study:
        res = solver.solve(reference=mono.lam, indicator="error")
    else:
        res = solver.solve(indicator="residual")
    print(f"gamma = {solver.gamma:.6g}")
    print(f"iterations = {res.iterations}")
    print(f"converged = {res.converged}")
    print(f"rho_obs = {res.rho_obs:.6g}")
    print(f"trace_disagreement = {res.disagreement:.3e}")
    if mono is not None:
        print(f"fixed_point_error = {fixed_point_error(res, mono):.3e}")
    if args.out:
        write_history(args.out, res.history)
    return EXIT_OK if res.converged else EXIT_NOCONV


def cmd_bench(args) -> int:
    overrides = dict(tol=args.tol, maxit=args.maxit, seed=args.seed, k=args.k, alpha_c=args.alpha_c)
    if args.alpha_mode:
        overrides["alpha_mode"] = args.alpha_mode
    spec = bench.standard_spec(args.table, args.levels, **overrides)
    table = bench.RUNNERS[args.table](spec)
    for row in table.rows:
        print(f"{row['label']:>10} level {row['level']} nx {row['nx']} k {row['k']} "
              f"eta {row['eta']:.4g} gamma {row['gamma']:.4f} iterations {row['iterations']} "
              f"rho_obs {row['rho_obs']:.5f} monotone {row['monotone']}")
    for key, val in table.meta.items():
        print(f"{key} = {val}")
    if args.out:
        table.write_csv(args.out)
    return EXIT_OK if table.all_converged else EXIT_NOCONV


def cmd_spectra(args) -> int:
    mesh0, part0 = _problem(args)
    report = spectral.SpectralReport(f"spectra-{args.check}")
    appendix = []
    checks = ["schur", "b", "mk", "appendix", "ei"] if args.check == "all" else [args.check]
    for lvl in range(args.levels):
        if lvl == 0:
            mesh, part = mesh0, part0
        elif args.mesh:
            raise InputError("--levels > 1 needs a structured mesh (--nx)")
        else:
            n = args.nx * 2 ** lvl
            mesh = generate_structured_mesh(n, (args.ny or args.nx) * 2 ** lvl)
            part = partition_boxes(mesh, *(args.boxes or (2, 1)))
        eta = _eta(args, mesh, part)
        system = assemble_system(mesh, part, args.k, eta, alpha=default_alpha(args.k, args.alpha_c))
        i = args.subdomain
        if not 0 <= i < part.n_subdomains:
            raise InputError(f"--subdomain must lie in [0, {part.n_subdomains})")
        if "schur" in checks:
            report.extend(spectral.schur_condition(system, level=lvl))
        if "b" in checks:
            report.extend(spectral.b_spectrum(system, i, level=lvl))
        if "mk" in checks:
            report.extend(spectral.mk_spectrum(system, i, level=lvl))
        if "appendix" in checks:
            r = spectral.verify_appendix_estimates(system, i, samples=args.samples, seed=args.seed, level=lvl)
            appendix.append(r)
            report.extend(r)
        if "ei" in checks and part.n_subdomains == 2:
            report.extend(spectral.ei_contraction_two(system, level=lvl, seed=args.seed))
    if len(appendix) > 1:
        report.extend(spectral.fit_constants(appendix))
    for r in report.rows:
        print(f"{r.quantity:>28} level {r.level} measured {r.measured:.6g} bound {r.bound:.6g} "
              f"{'ok' if r.passed else 'FAIL'}")
    if args.out:
        report.write_csv(args.out)
    return EXIT_OK


def cmd_parabolic(args) -> int:
    mesh, part = _problem(args)
    if args.mesh or args.tags:
        raise InputError("parabolic runs use the structured generator (--nx/--boxes)")
    rule = args.eta_rule
    if args.gamma_rule == "tau_H2" and rule not in ("H-2", "h-2"):
        raise InputError("gamma rule tau_H2 needs --eta-rule H-2 or h-2")
    spec = bench.ExperimentSpec("parabolic", sizes=(args.nx,), boxes=args.boxes, k=args.k,
                                alpha_c=args.alpha_c, gamma_rule=args.gamma_rule if args.gamma is None else "fixed",
                                gamma=args.gamma, eta_rule=rule, eta_c=args.eta_c, tol=args.tol,
                                maxit=args.maxit, seed=args.seed)
    tau = args.tau if args.tau is not None else (1.0 / args.eta if args.eta else None)
    table = bench.run_parabolic(spec, args.steps, g=bench.sine_initial, tau=tau, cold=not args.no_cold)
    for row in table.rows:
        print(f"step {row['step']} t {row['time']:.4g} iterations {row['iterations']} "
              f"cold {row['cold_iterations']} energy {row['energy']:.6g}")
    if args.out:
        table.write_csv(args.out)
    return EXIT_OK if all(r["converged"] for r in table.rows) else EXIT_NOCONV


COMMANDS = {"solve": cmd_solve, "osm": cmd_osm, "bench": cmd_bench, "spectra": cmd_spectra,
            "parabolic": cmd_parabolic}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, MeshError, PartitionError, IndefiniteMatrixError, spectral.SizeError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
