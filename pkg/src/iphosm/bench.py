"""Experiment drivers: h-refinement, polynomial degree, reaction strength,
weak scaling and a backward Euler loop. Every run records its fixed-point
check against the monolithic solve and the monotonicity of its history."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import assemble_load, assemble_system, default_alpha, l2_norm, l2_project, solve_monolithic
from .mesh import Mesh, Partition, generate_structured_mesh, partition_boxes
from .schwarz import OptimizedSchwarz, SchwarzConfig, fixed_point_error, is_monotone, theoretical_rho

log = logging.getLogger(__name__)

ETA_RULES = ("const", "h-1", "h-2", "H-2")


def unit_load(x, y):
    return np.ones_like(x)


def eta_value(rule: str, h: float, H: float, c: float = 1.0) -> float:
    """``eta = c h^-p`` (or ``c H^-2``) for the named rule."""
    if rule == "const":
        return c
    if rule == "h-1":
        return c / h
    if rule == "h-2":
        return c / h ** 2
    if rule == "H-2":
        return c / H ** 2
    raise ValueError(f"unknown eta rule {rule!r}; expected one of {ETA_RULES}")


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    sizes: tuple = (8, 16, 32, 64)
    boxes: tuple = (2, 1)
    k: int = 1
    ks: tuple = (1, 2, 3, 4)
    alpha_c: float = 2.0
    alpha_mode: str = "scaled"
    gamma_rule: str = "tau_H"
    gamma: float | None = None
    eta_rule: str = "const"
    eta_c: float = 1.0
    tol: float = 1e-8
    maxit: int = 50000
    seed: int = 0
    out: str | None = None
    box_levels: tuple | None = None

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"mesh sequence must strictly refine, got {self.sizes}")
        if self.eta_rule not in ETA_RULES:
            raise ValueError(f"unknown eta rule {self.eta_rule!r}")
        if self.alpha_mode not in ("scaled", "fixed"):
            raise ValueError("alpha_mode is 'scaled' or 'fixed'")
        if self.box_levels is not None and len(self.box_levels) != len(self.sizes):
            raise ValueError("box_levels needs one entry per mesh size")
        if self.gamma_rule == "tau_H2" and self.eta_rule not in ("H-2", "h-2"):
            raise ValueError("gamma rule tau_H2 is tuned for eta = O(H^-2); set eta_rule accordingly")

    def alpha(self, k: int) -> float:
        """Penalty constant: ``c (k+1)(k+2)``, or its ``k = 1`` value when
        ``alpha_mode = 'fixed'``."""
        return default_alpha(1 if self.alpha_mode == "fixed" else k, self.alpha_c)

    def config(self, gamma=None) -> SchwarzConfig:
        if gamma is not None:
            return SchwarzConfig(gamma=gamma, tol=self.tol, maxit=self.maxit, seed=self.seed)
        return SchwarzConfig(gamma=self.gamma, gamma_rule=self.gamma_rule, tol=self.tol,
                             maxit=self.maxit, seed=self.seed)


COLUMNS = ("label", "level", "nx", "h", "H", "n_sub", "k", "alpha", "eta", "gamma", "iterations",
           "converged", "rho_obs", "rho_theory", "monotone", "increases", "fixed_point_error",
           "wall_time")


@dataclass
class ResultTable:
    name: str
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    columns: tuple = COLUMNS

    def column(self, key, label=None):
        return [r[key] for r in self.rows if label is None or r.get("label") == label]

    def labels(self):
        seen = []
        for r in self.rows:
            if r.get("label") not in seen:
                seen.append(r.get("label"))
        return seen

    @property
    def all_converged(self) -> bool:
        return all(r["converged"] for r in self.rows)

    @property
    def all_monotone(self) -> bool:
        return all(r["monotone"] for r in self.rows if "monotone" in r)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.columns), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r.get(k, "")) for k in self.columns})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def growth_exponent(x, iterations) -> float:
    """Least-squares slope of ``log(iterations)`` against ``log(x)``; NaN
    for fewer than two points."""
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(iterations, float)), 1)[0])


def run_case(mesh: Mesh, part: Partition, k: int, eta: float, alpha: float,
             config: SchwarzConfig, label="", level=0, nx=None, f=unit_load) -> dict:
    """Assemble, solve monolithically, then run the error-decay study with
    a random start around the monolithic traces."""
    t0 = time.perf_counter()
    system = assemble_system(mesh, part, k, eta, alpha=alpha, f=f)
    mono = solve_monolithic(system)
    solver = OptimizedSchwarz(system, config)
    res = solver.solve(reference=mono.lam, indicator="error")
    wall = time.perf_counter() - t0
    mono_ok, ups = is_monotone(res.history)
    h, H = mesh.h, part.H
    floating = part.any_floating
    if floating and eta <= 0:
        rho_th = float("nan")
    else:
        rho_th = theoretical_rho(h, H, k, eta, solver.gamma, floating, alpha)
    row = dict(label=label, level=level, nx=nx, h=h, H=H, n_sub=part.n_subdomains, k=k, alpha=alpha,
               eta=eta, gamma=solver.gamma, iterations=res.iterations, converged=res.converged,
               rho_obs=res.rho_obs, rho_theory=rho_th, monotone=mono_ok, increases=ups,
               fixed_point_error=fixed_point_error(res, mono), wall_time=wall)
    if not res.converged:
        log.warning("%s level %d did not converge in %d iterations", label, level, res.iterations)
    if not mono_ok:
        log.warning("%s level %d: R-norm history increased %d times", label, level, ups)
    row["history"] = res.history
    return row


def _mesh(nx, boxes):
    mesh = generate_structured_mesh(nx, nx)
    return mesh, partition_boxes(mesh, *boxes)


def run_h_refinement(spec: ExperimentSpec) -> ResultTable:
    """Fixed partition, refined mesh; gamma from ``spec.gamma_rule``."""
    table = ResultTable("h-refinement")
    for lvl, nx in enumerate(spec.sizes):
        mesh, part = _mesh(nx, spec.boxes)
        eta = eta_value(spec.eta_rule, mesh.h, part.H, spec.eta_c)
        table.rows.append(run_case(mesh, part, spec.k, eta, spec.alpha(spec.k), spec.config(),
                                   label=spec.gamma_rule, level=lvl, nx=nx))
    table.meta["exponent"] = growth_exponent([1 / r["h"] for r in table.rows], table.column("iterations"))
    return table


def run_k_sweep(spec: ExperimentSpec) -> ResultTable:
    """Fixed mesh ``sizes[0]``, ``gamma = (1 + 1/k)/2``, ``eta`` per rule."""
    table = ResultTable("k-sweep")
    nx = spec.sizes[0]
    mesh, part = _mesh(nx, spec.boxes)
    for lvl, k in enumerate(spec.ks):
        eta = eta_value(spec.eta_rule, mesh.h, part.H, spec.eta_c)
        gamma = 0.5 * (1.0 + 1.0 / k)
        table.rows.append(run_case(mesh, part, k, eta, spec.alpha(k), spec.config(gamma=gamma),
                                   label=f"alpha_{spec.alpha_mode}", level=lvl, nx=nx))
    its = table.column("iterations")
    table.meta["exponent"] = growth_exponent(spec.ks, its)
    table.meta["per_k"] = [it / (k * its[0]) for k, it in zip(spec.ks, its)]
    return table


def run_eta_sweep(spec: ExperimentSpec, rules=("const", "h-1", "h-2")) -> ResultTable:
    """Rows for each ``eta`` rule over the mesh sequence, ``gamma = 1``."""
    table = ResultTable("eta-sweep")
    cfg = spec.config(gamma=1.0)
    for rule in rules:
        for lvl, nx in enumerate(spec.sizes):
            mesh, part = _mesh(nx, spec.boxes)
            eta = eta_value(rule, mesh.h, part.H, spec.eta_c)
            table.rows.append(run_case(mesh, part, spec.k, eta, spec.alpha(spec.k), cfg,
                                       label=rule, level=lvl, nx=nx))
    for rule in rules:
        its = table.column("iterations", rule)
        table.meta[f"ratios_{rule}"] = [b / a for a, b in zip(its, its[1:])]
    return table


def run_weak_scaling(spec: ExperimentSpec) -> ResultTable:
    """Mesh and partition refined together (``box_levels[l]`` boxes per side
    on an ``sizes[l]`` grid); ``eta = eta_c H^-2``."""
    table = ResultTable("weak-scaling")
    levels = spec.box_levels or tuple(max(1, s // 4) for s in spec.sizes)
    for lvl, (nx, q) in enumerate(zip(spec.sizes, levels)):
        mesh, part = _mesh(nx, (q, q))
        eta = eta_value("H-2", mesh.h, part.H, spec.eta_c)
        table.rows.append(run_case(mesh, part, spec.k, eta, spec.alpha(spec.k), spec.config(),
                                   label=f"{spec.gamma_rule}", level=lvl, nx=nx))
    its = table.column("iterations")
    table.meta["spread"] = max(its) / min(its) - 1.0
    return table


PARABOLIC_COLUMNS = ("step", "time", "iterations", "cold_iterations", "converged", "energy",
                     "disagreement")


def run_parabolic(spec: ExperimentSpec, time_steps: int, g=None, tau: float | None = None,
                  f=None, cold: bool = True) -> ResultTable:
    """Backward Euler for ``u_t - Laplace u = f`` with ``eta = 1/tau``.

    Each step solves ``(M/tau + K) u_n = M u_{n-1}/tau + f(t_n)`` with the
    Schwarz iteration started from the previous step's traces. The stopping
    rule is absolute, ``||residual|| <= tol ||interface data||``, so warm and
    cold starts are held to the same target. With ``cold=True`` every step
    is also solved from zero traces for comparison.
    """
    nx = spec.sizes[0]
    mesh, part = _mesh(nx, spec.boxes)
    if tau is None:
        tau = 1.0 / eta_value(spec.eta_rule, mesh.h, part.H, spec.eta_c)
    eta = 1.0 / tau
    system = assemble_system(mesh, part, spec.k, eta, alpha=spec.alpha(spec.k))
    space = system.space
    u = l2_project(space, g) if g is not None else [np.zeros(system.A[i].shape[0]) for i in range(system.n_subdomains)]
    table = ResultTable("parabolic", columns=PARABOLIC_COLUMNS)
    table.meta["energy0"] = l2_norm(space, system, u)
    lam_prev = None
    cfg = spec.config()
    for n in range(1, time_steps + 1):
        t = n * tau
        rhs = [eta * (system.M[i] @ u[i]) for i in range(system.n_subdomains)]
        if f is not None:
            load = assemble_load(mesh, part, space, lambda x, y: f(x, y, t))
            rhs = [a + b for a, b in zip(rhs, load)]
        step_sys = system.with_load(vectors=rhs)
        solver = OptimizedSchwarz(step_sys, cfg)
        scale = float(np.linalg.norm(solver._gcat))
        atol = spec.tol * scale
        zero = [np.zeros(len(ix)) for ix in solver.index]
        res = solver.solve(lam0=lam_prev if lam_prev is not None else zero, indicator="residual",
                           atol=atol, rtol=0.0)
        cold_its = ""
        if cold:
            cold_res = solver.solve(lam0=zero, indicator="residual", atol=atol, rtol=0.0)
            cold_its = cold_res.iterations
        u = res.u
        lam_prev = res.state.lam
        table.rows.append(dict(step=n, time=t, iterations=res.iterations, cold_iterations=cold_its,
                               converged=res.converged, energy=l2_norm(space, system, u),
                               disagreement=res.disagreement))
    table.meta["tau"] = tau
    return table


def standard_spec(table: str, levels: int = 4, **overrides) -> ExperimentSpec:
    """Defaults used by the command line and the acceptance suite."""
    sizes = tuple(8 * 2 ** l for l in range(levels))
    if table == "h-refinement":
        spec = ExperimentSpec("h-refinement", sizes=sizes, boxes=(2, 1), gamma_rule="tau_H", eta_rule="const")
    elif table == "k-sweep":
        spec = ExperimentSpec("k-sweep", sizes=(16,), boxes=(2, 1), ks=tuple(range(1, levels + 1)),
                              alpha_mode="fixed", eta_rule="const")
    elif table == "eta-sweep":
        spec = ExperimentSpec("eta-sweep", sizes=sizes, boxes=(2, 1), gamma_rule="asm")
    elif table == "weak-scaling":
        q = tuple(4 * 2 ** l for l in range(levels))
        spec = ExperimentSpec("weak-scaling", sizes=tuple(4 * x for x in q), box_levels=q,
                              gamma_rule="tau_H2", eta_rule="H-2", eta_c=10.0)
    elif table == "parabolic":
        spec = ExperimentSpec("parabolic", sizes=(16,), boxes=(2, 2), gamma_rule="tau_H2",
                              eta_rule="h-2")
    else:
        raise ValueError(f"unknown table {table!r}")
    return replace(spec, **overrides) if overrides else spec


RUNNERS = {
    "h-refinement": run_h_refinement,
    "k-sweep": run_k_sweep,
    "eta-sweep": run_eta_sweep,
    "weak-scaling": run_weak_scaling,
}


def sine_initial(x, y):
    return np.sin(math.pi * x) * np.sin(math.pi * y)
