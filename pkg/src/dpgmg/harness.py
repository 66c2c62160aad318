"""Experiment driver: two-grid and multilevel studies, adaptive cavity-flow
loops, Newton iteration for Navier-Stokes, and table-shaped reports.

Problems (--problem):
  poisson        unit forcing, homogeneous trace BC on [0,1]^dim
  stokes         smooth manufactured solution; with --adaptive, the
                 lid-driven cavity
  navier-stokes  Kovasznay flow (--re, default 40); with --adaptive, the
                 lid-driven cavity at --re (default 100)

Modes: --two-grid {h,p} runs the two-level study, --adaptive the greedy
refinement loop, otherwise a multilevel solve on a uniform mesh.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from . import __version__
from .assembly import (DofMap, LocalCache, Solution, assemble_condensed,
                       transfer_solution)
from .formulation import ProblemSpec, cavity_problem, manufactured_solution
from .krylov import SolveReport, pcg
from .mesh import MeshHierarchy, MeshTopology, build_hierarchy, greedy_select
from .multigrid import GridLevel, LevelSpec, VCycle, build_vcycle

__all__ = [
    "ExperimentConfig", "TableReport", "ConfigError",
    "run_two_grid", "run_multilevel", "run_adaptive_stokes",
    "run_adaptive_navier_stokes", "newton_solve", "emit_report", "main",
    "mg_solve", "make_problem", "uniform_mesh",
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "poisson"
    dim: int = 2
    k: int = 1
    delta_k: Optional[int] = None
    width: int = 4
    coarse_width: int = 2
    two_grid: Optional[str] = None        # 'h' | 'p' | None
    k_coarse: int = 1
    skip_intermediate_p: bool = True
    tol: float = 1e-10
    overlap_h: int = 1
    overlap_p: int = 0
    sigma_mode: str = "aggressive"
    adaptive: bool = False
    refs: int = 8
    refine_fraction: float = 0.2
    guess: str = "previous"               # 'previous' | 'zero'
    re: float = 40.0
    newton_eps0: float = 1e-4
    newton_eps_floor: float = 1e-8
    newton_max: int = 30
    max_iter: Optional[int] = None
    out: Optional[str] = None
    format: str = "json"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.width < 2 or (self.width & (self.width - 1)):
            raise ConfigError("width must be a power of 2 and >= 2")
        if self.k < 1:
            raise ConfigError("k must be >= 1 for experiments")
        if self.tol <= 0:
            raise ConfigError("tolerance must be positive")
        if self.two_grid not in (None, "h", "p"):
            raise ConfigError("two_grid must be 'h' or 'p'")
        if self.guess not in ("previous", "zero"):
            raise ConfigError("guess must be 'previous' or 'zero'")
        if self.format not in ("json", "csv"):
            raise ConfigError("format must be json or csv")
        if not 0.0 < self.refine_fraction <= 1.0:
            raise ConfigError("refine_fraction must lie in (0, 1]")

    @property
    def dk(self) -> int:
        return self.delta_k if self.delta_k is not None else self.dim

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TableReport:
    columns: tuple
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **kw):
        self.rows.append({c: kw.get(c) for c in self.columns})

    @property
    def all_converged(self) -> bool:
        return all(r.get("converged", True) for r in self.rows)

    def to_json(self) -> str:
        doc = {"schema": 1, "columns": list(self.columns),
               "meta": self.meta, "rows": self.rows}
        return json.dumps(doc, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r.get(c, "") for c in self.columns])
        return buf.getvalue()


def emit_report(report: TableReport, path, fmt: str = "json"):
    """Write a deterministic report file (no timestamps, stable key order)."""
    text = report.to_json() if fmt == "json" else report.to_csv()
    with open(path, "w") as fh:
        fh.write(text)
    return path


# ----------------------------------------------------------------------
# problem / mesh / solver plumbing
# ----------------------------------------------------------------------

def make_problem(cfg: ExperimentConfig) -> ProblemSpec:
    if cfg.problem == "poisson":
        return manufactured_solution("poisson", dim=cfg.dim)
    if cfg.problem == "stokes":
        if cfg.adaptive:
            return cavity_problem("stokes")
        return manufactured_solution("stokes")
    if cfg.problem == "navier-stokes":
        if cfg.adaptive:
            return cavity_problem("navier-stokes", re=cfg.re)
        return manufactured_solution("kovasznay", re=cfg.re)
    raise ConfigError(f"unknown problem {cfg.problem!r}")


def uniform_mesh(prob: ProblemSpec, width: int, k: int,
                 root_width: Optional[int] = None) -> MeshTopology:
    """Uniform mesh reached from a root grid by uniform refinement, so the
    coarse geometry exists in the refinement tree."""
    if root_width is None:
        root_width = width
    lo, hi = prob.domain
    mesh = MeshTopology.uniform(prob.dim, lo, hi, root_width, k)
    while root_width < width:
        mesh = mesh.refine_uniform(1)
        root_width *= 2
    return mesh


def _level_specs(hierarchy: MeshHierarchy, prob: ProblemSpec, form,
                 cfg: ExperimentConfig, background=None):
    """Per-level contexts with smoother overlap chosen by the transition
    kind directly below each level."""
    specs = []
    for i, mesh in enumerate(hierarchy.levels):
        dm = DofMap(mesh, form, prob.dirichlet)
        if i == 0:
            ov = cfg.overlap_p
        else:
            ov = cfg.overlap_h if hierarchy.kinds[i - 1] == "h" else cfg.overlap_p
        specs.append(LevelSpec(mesh, dm, form, cfg.dk, background, ov,
                               cfg.sigma_mode))
    return specs


def mg_solve(hierarchy: MeshHierarchy, prob: ProblemSpec, cfg: ExperimentConfig,
             background=None, bc_values=None, x0=None, cache=None,
             tol: Optional[float] = None, specs=None):
    """Assemble the fine level, build the V-cycle, and run preconditioned CG.

    Returns (system, x, SolveReport, fine DofMap)."""
    form = prob.form(background) if prob.nonlinear else prob.form()
    if specs is None:
        specs = _level_specs(hierarchy, prob, form, cfg, background)
    else:
        for s in specs:
            s.background = background
            s.form = form
    fine = specs[-1]
    system = assemble_condensed(fine.mesh, form, fine.dofmap, cfg.dk,
                                background=background,
                                pressure_pin=prob.pressure_pin,
                                bc_values=bc_values, cache=cache)
    if len(specs) == 1:
        vc = VCycle([GridLevel(system.A, None, None)])
    else:
        vc = build_vcycle(specs, hierarchy.kinds, system.A)
    x, report = pcg(system.A, system.b, vc, tol=tol or cfg.tol, x0=x0,
                    max_iter=cfg.max_iter)
    return system, x, report, fine.dofmap


def _direct_solve_system(system):
    return spla.spsolve(system.A.tocsc(), system.b)


def newton_solve(prob: ProblemSpec, mesh: MeshTopology, cfg: ExperimentConfig,
                 start: Optional[Solution] = None, eps: Optional[float] = None,
                 solver: str = "mg", hierarchy: Optional[MeshHierarchy] = None,
                 tol: Optional[float] = None):
    """Newton iteration for the nonlinear problem on a fixed mesh.

    Each step linearizes about the current iterate, solves the condensed
    increment system (by MG-PCG or a sparse direct solve), and updates the
    solution until the L2 norm of the field increment drops below ``eps``.

    Returns (solution, steps, per-step SolveReports, converged).
    """
    if not prob.nonlinear:
        raise ConfigError("newton_solve expects a nonlinear problem")
    eps = cfg.newton_eps0 if eps is None else eps
    if hierarchy is None and solver == "mg":
        hierarchy = build_hierarchy(mesh, cfg.k_coarse, cfg.skip_intermediate_p)
    sol = start
    reports = []
    converged = False
    specs = None
    if solver == "mg":
        specs = _level_specs(hierarchy, prob, prob.form(None), cfg)
    for step in range(cfg.newton_max):
        form = prob.form(sol)
        dm = specs[-1].dofmap if specs is not None else \
            DofMap(mesh, form, prob.dirichlet)
        cur = sol.traces if sol is not None else np.zeros(dm.n_master)
        bcv = np.zeros(dm.n_master)
        if len(dm.bc_idx):
            bcv[dm.bc_idx] = dm.bc_values[dm.bc_idx] - cur[dm.bc_idx]
        if solver == "mg":
            system, x, rep, dm = mg_solve(hierarchy, prob, cfg,
                                          background=sol, bc_values=bcv,
                                          tol=tol, specs=specs)
        else:
            system = assemble_condensed(mesh, form, dm, cfg.dk,
                                        background=sol,
                                        pressure_pin=prob.pressure_pin,
                                        bc_values=bcv)
            x = _direct_solve_system(system)
            rep = SolveReport(iterations=0, converged=True)
        reports.append(rep)
        dsol = system.solution_from(x)
        inc = dsol.field_l2_norm()
        if sol is None:
            sol = dsol
        else:
            sol.add(dsol)
        if inc < eps:
            converged = True
            break
    return sol, len(reports), reports, converged


def _three_step_background(prob: ProblemSpec, mesh: MeshTopology,
                           cfg: ExperimentConfig) -> Solution:
    """Background flow for the Navier-Stokes preconditioning studies: three
    Newton steps on the same grid at polynomial order one, direct solves."""
    linear_mesh = mesh.with_uniform_order(1)
    cfg1 = ExperimentConfig(**{**asdict(cfg), "k": 1, "adaptive": False,
                               "newton_max": 3, "out": None})
    sol, _, _, _ = newton_solve(prob, linear_mesh, cfg1, solver="direct",
                                eps=0.0)
    return sol


def _ns_background_for(prob, mesh, cfg):
    bg1 = _three_step_background(prob, mesh, cfg)
    form = prob.form(bg1)
    dm = DofMap(mesh, form, prob.dirichlet)
    return transfer_solution(bg1, mesh, dm)


# ----------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------

TWO_GRID_COLUMNS = ("problem", "mode", "k", "width", "dofs", "iterations",
                    "final_residual", "converged")


def run_two_grid(cfg: ExperimentConfig) -> TableReport:
    """Two-level study: h coarsening (one uniform unrefinement) or p
    coarsening to floor(k/2) on identical geometry."""
    if cfg.two_grid not in ("h", "p"):
        raise ConfigError("two_grid mode must be 'h' or 'p'")
    prob = make_problem(cfg)
    if cfg.two_grid == "h":
        if cfg.width < 2:
            raise ConfigError("nothing to coarsen in h mode")
        fine_mesh = uniform_mesh(prob, cfg.width, cfg.k,
                                 root_width=cfg.width // 2)
        coarse_mesh = fine_mesh.with_active(
            [c for c in fine_mesh.root_ids], cfg.k)
        kinds = ["h"]
    else:
        fine_mesh = uniform_mesh(prob, cfg.width, cfg.k)
        coarse_mesh = fine_mesh.with_uniform_order(cfg.k // 2)
        kinds = ["p"]
    hierarchy = MeshHierarchy([coarse_mesh, fine_mesh], kinds)
    background = None
    if prob.nonlinear:
        background = _ns_background_for(prob, fine_mesh, cfg)
        form = prob.form(background)
        dm = DofMap(fine_mesh, form, prob.dirichlet)
        bcv = np.zeros(dm.n_master)
        if len(dm.bc_idx):
            bcv[dm.bc_idx] = dm.bc_values[dm.bc_idx] \
                - background.traces[dm.bc_idx]
        system, x, rep, dm = mg_solve(hierarchy, prob, cfg,
                                      background=background, bc_values=bcv)
    else:
        system, x, rep, dm = mg_solve(hierarchy, prob, cfg)
    report = TableReport(TWO_GRID_COLUMNS,
                         meta={"config": cfg.hash(), "version": __version__})
    report.add(problem=cfg.problem, mode=cfg.two_grid, k=cfg.k,
               width=cfg.width, dofs=int(system.A.shape[0]),
               iterations=rep.iterations,
               final_residual=rep.final_relative_residual,
               converged=rep.converged)
    return report


MULTILEVEL_COLUMNS = ("problem", "k_fine", "k_coarse", "k_levels", "width",
                      "coarse_width", "h_levels", "dofs", "iterations",
                      "converged")


def run_multilevel(cfg: ExperimentConfig) -> TableReport:
    prob = make_problem(cfg)
    fine_mesh = uniform_mesh(prob, cfg.width, cfg.k,
                             root_width=cfg.coarse_width)
    hierarchy = build_hierarchy(fine_mesh, cfg.k_coarse,
                                cfg.skip_intermediate_p)
    background = None
    bcv = None
    if prob.nonlinear:
        background = _ns_background_for(prob, fine_mesh, cfg)
        form = prob.form(background)
        dm = DofMap(fine_mesh, form, prob.dirichlet)
        bcv = np.zeros(dm.n_master)
        if len(dm.bc_idx):
            bcv[dm.bc_idx] = dm.bc_values[dm.bc_idx] \
                - background.traces[dm.bc_idx]
    system, x, rep, dm = mg_solve(hierarchy, prob, cfg,
                                  background=background, bc_values=bcv)
    report = TableReport(MULTILEVEL_COLUMNS,
                         meta={"config": cfg.hash(), "version": __version__})
    report.add(problem=cfg.problem, k_fine=cfg.k, k_coarse=cfg.k_coarse,
               k_levels=hierarchy.kinds.count("p"), width=cfg.width,
               coarse_width=cfg.coarse_width,
               h_levels=hierarchy.kinds.count("h"),
               dofs=int(system.A.shape[0]), iterations=rep.iterations,
               converged=rep.converged)
    return report


ADAPTIVE_COLUMNS = ("ref", "h_max", "h_min", "ratio", "elements",
                    "energy_error", "iterations", "iterations_zero_guess",
                    "converged")


def run_adaptive_stokes(cfg: ExperimentConfig) -> TableReport:
    """Greedy adaptive cavity-flow study (Stokes): solve, estimate per-cell
    residual errors, refine everything above the fraction of the max."""
    prob = cavity_problem("stokes")
    mesh = MeshTopology.uniform(2, prob.domain[0], prob.domain[1], 2, cfg.k)
    form = prob.form()
    cache = LocalCache()
    report = TableReport(ADAPTIVE_COLUMNS,
                         meta={"config": cfg.hash(), "version": __version__})
    prev: Optional[Solution] = None
    for ref in range(cfg.refs + 1):
        hierarchy = build_hierarchy(mesh, cfg.k_coarse,
                                    cfg.skip_intermediate_p)
        specs = _level_specs(hierarchy, prob, form, cfg)
        fine = specs[-1]
        system = assemble_condensed(mesh, form, fine.dofmap, cfg.dk,
                                    pressure_pin=prob.pressure_pin,
                                    cache=cache)
        if len(specs) == 1:
            vc = VCycle([GridLevel(system.A, None, None)])
        else:
            vc = build_vcycle(specs, hierarchy.kinds, system.A)
        x0 = None
        if prev is not None and cfg.guess == "previous":
            carried = transfer_solution(prev, mesh, fine.dofmap)
            x0 = carried.traces[fine.dofmap.free_idx]
        x, rep = pcg(system.A, system.b, vc, tol=cfg.tol, x0=x0,
                     max_iter=cfg.max_iter)
        _, rep_zero = pcg(system.A, system.b, vc, tol=cfg.tol,
                          max_iter=cfg.max_iter)
        sol = system.solution_from(x)
        eta_cells = system.energy_errors(sol)
        eta = float(np.linalg.norm(eta_cells))
        h_max, h_min = mesh.h_range()
        report.add(ref=ref, h_max=h_max, h_min=h_min,
                   ratio=int(round(h_max / h_min)),
                   elements=len(mesh.active_ids),
                   energy_error=eta, iterations=rep.iterations,
                   iterations_zero_guess=rep_zero.iterations,
                   converged=rep.converged and rep_zero.converged)
        if ref == cfg.refs:
            break
        sel = greedy_select(eta_cells, cfg.refine_fraction)
        ids = [mesh.active_ids[i] for i in sorted(sel)]
        mesh = mesh.refine_cells(ids)
        prev = sol
    return report


NS_ADAPTIVE_COLUMNS = ("ref", "h_max", "h_min", "ratio", "elements",
                       "energy_error", "newton_steps", "total_iterations",
                       "per_step", "converged")


def run_adaptive_navier_stokes(cfg: ExperimentConfig) -> TableReport:
    """Greedy adaptive cavity flow for Navier-Stokes with an adaptive Newton
    threshold: eps_i = max(floor, min(eps0, 0.1 * previous relative energy
    error))."""
    prob = cavity_problem("navier-stokes", re=cfg.re)
    mesh = MeshTopology.uniform(2, prob.domain[0], prob.domain[1], 2, cfg.k)
    report = TableReport(NS_ADAPTIVE_COLUMNS,
                         meta={"config": cfg.hash(), "version": __version__})
    sol: Optional[Solution] = None
    eps = cfg.newton_eps0
    for ref in range(cfg.refs + 1):
        hierarchy = build_hierarchy(mesh, cfg.k_coarse,
                                    cfg.skip_intermediate_p)
        sol, steps, reports, newton_ok = newton_solve(
            prob, mesh, cfg, start=sol, eps=eps, solver="mg",
            hierarchy=hierarchy)
        total = sum(r.iterations for r in reports)
        ok = newton_ok and all(r.converged for r in reports)
        # converged-state energy error, relative to the background energy
        form = prob.form(sol)
        dm = DofMap(mesh, form, prob.dirichlet)
        system = assemble_condensed(mesh, form, dm, cfg.dk, background=sol,
                                    pressure_pin=prob.pressure_pin,
                                    bc_values=np.zeros(dm.n_master),
                                    keep_recovery=False)
        eta_cells = system.energy_errors(None)
        e_rel = float(np.linalg.norm(eta_cells) / system.energy_norm(sol))
        h_max, h_min = mesh.h_range()
        report.add(ref=ref, h_max=h_max, h_min=h_min,
                   ratio=int(round(h_max / h_min)),
                   elements=len(mesh.active_ids), energy_error=e_rel,
                   newton_steps=steps, total_iterations=total,
                   per_step=int(total / steps + 0.5), converged=ok)
        if ref == cfg.refs:
            break
        sel = greedy_select(eta_cells, cfg.refine_fraction)
        ids = [mesh.active_ids[i] for i in sorted(sel)]
        mesh = mesh.refine_cells(ids)
        ndm = DofMap(mesh, prob.form(None), prob.dirichlet)
        sol = transfer_solution(sol, mesh, ndm)
        eps = max(cfg.newton_eps_floor, min(cfg.newton_eps0, 0.1 * e_rel))
    return report


def run_experiment(cfg: ExperimentConfig) -> TableReport:
    if cfg.adaptive:
        if cfg.problem == "stokes":
            return run_adaptive_stokes(cfg)
        if cfg.problem == "navier-stokes":
            return run_adaptive_navier_stokes(cfg)
        raise ConfigError("adaptive runs support stokes and navier-stokes")
    if cfg.two_grid:
        return run_two_grid(cfg)
    return run_multilevel(cfg)


# ----------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------

def parse_config_file(path) -> dict:
    """Flat key = value lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _coerce(key: str, val: str):
    if key in ("dim", "k", "delta_k", "width", "coarse_width", "k_coarse",
               "overlap_h", "overlap_p", "refs", "newton_max", "max_iter"):
        return int(val)
    if key in ("tol", "re", "refine_fraction", "newton_eps0",
               "newton_eps_floor"):
        return float(val)
    if key in ("skip_intermediate_p", "adaptive"):
        if val.lower() not in _BOOLS:
            raise ConfigError(f"bad boolean for {key}: {val!r}")
        return _BOOLS[val.lower()]
    return val


def build_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        for key, val in parse_config_file(args.config).items():
            values[key] = _coerce(key, val)
    for key in ("problem", "dim", "k", "delta_k", "width", "coarse_width",
                "two_grid", "k_coarse", "tol", "overlap_h", "overlap_p",
                "sigma_mode", "refs", "guess", "re", "out", "format",
                "refine_fraction", "max_iter"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.skip_intermediate_p is not None:
        values["skip_intermediate_p"] = _BOOLS[args.skip_intermediate_p.lower()]
    if args.adaptive:
        values["adaptive"] = True
    return ExperimentConfig(**values)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="dpgmg",
        description="DPG solves preconditioned by geometric multigrid")
    ap.add_argument("--config", help="flat key=value config file")
    ap.add_argument("--problem", choices=["poisson", "stokes",
                                          "navier-stokes"])
    ap.add_argument("--dim", type=int)
    ap.add_argument("--k", type=int)
    ap.add_argument("--delta-k", dest="delta_k", type=int)
    ap.add_argument("--width", type=int)
    ap.add_argument("--coarse-width", dest="coarse_width", type=int)
    ap.add_argument("--two-grid", dest="two_grid", choices=["h", "p"])
    ap.add_argument("--k-coarse", dest="k_coarse", type=int)
    ap.add_argument("--skip-intermediate-p", dest="skip_intermediate_p",
                    choices=list(_BOOLS))
    ap.add_argument("--tol", type=float)
    ap.add_argument("--overlap-h", dest="overlap_h", type=int)
    ap.add_argument("--overlap-p", dest="overlap_p", type=int)
    ap.add_argument("--sigma-mode", dest="sigma_mode",
                    choices=["aggressive", "conservative"])
    ap.add_argument("--adaptive", action="store_true")
    ap.add_argument("--refs", type=int)
    ap.add_argument("--refine-fraction", dest="refine_fraction", type=float)
    ap.add_argument("--guess", choices=["previous", "zero"])
    ap.add_argument("--re", type=float)
    ap.add_argument("--max-iter", dest="max_iter", type=int)
    ap.add_argument("--out")
    ap.add_argument("--format", choices=["json", "csv"])
    args = ap.parse_args(argv)
    try:
        cfg = build_config(args)
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    text = report.to_json() if cfg.format == "json" else report.to_csv()
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return 0 if report.all_converged else 2


if __name__ == "__main__":
    sys.exit(main())
