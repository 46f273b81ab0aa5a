"""Presets, double-solve timing protocol and table/CSV output."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .comm import RankFailure, spawn_world
from .errors import ConfigurationError
from .grid import GridError, create_grid
from .ksp import SolverNode
from .options import OptionsParseError, build_solver_tree, fused_levels, parse
from .precond import MG, RASM, BJacobi
from .problems import ProblemSpec, assemble_problem
from .solvers import SolveReport
from .telescope import Telescope

__all__ = [
    "CSV_COLUMNS", "PRESETS", "PresetResult", "ProblemSpec", "TimingRecord", "assemble_problem", "emit_csv",
    "emit_table", "preset_options", "run_neumann", "run_options", "run_preset", "schedules",
]

CSV_COLUMNS = ("n_C", "N", "r", "T_setup_s", "T_apply_s", "T_solve_s", "iterations", "levels", "ranks")

OUTER = ["-ksp_type", "fgmres", "-ksp_rtol", "1e-8"]


def _truncation(p):
    return OUTER + [
        "-pc_type", "mg",
        "-pc_mg_levels", p["N"],
        "-mg_coarse_pc_type", "telescope",
        "-mg_coarse_pc_telescope_reduction_factor", p["nc"],
        "-mg_coarse_telescope_pc_type", "lu",
    ]


def _repartitioned_coarse(p):
    opts = OUTER + [
        "-pc_type", "mg",
        "-pc_mg_levels", p["N1"],
        "-pc_mg_galerkin",
        "-mg_coarse_pc_type", "telescope",
        "-mg_coarse_pc_telescope_reduction_factor", p["r"],
        "-mg_coarse_telescope_pc_type", "mg",
        "-mg_coarse_telescope_pc_mg_levels", p["N2"],
        "-mg_coarse_telescope_pc_mg_galerkin",
    ]
    if p.get("r2") is not None:
        # second stage of repartitioning below the inner hierarchy
        pre = "-mg_coarse_telescope_mg_coarse_"
        opts += [
            pre + "pc_type", "telescope",
            pre + "pc_telescope_reduction_factor", p["r2"],
        ]
        if p.get("N3") is None:
            opts += [pre + "telescope_pc_type", "lu"]
        else:
            opts += [
                pre + "telescope_pc_type", "mg",
                pre + "telescope_pc_mg_levels", p["N3"],
                pre + "telescope_pc_mg_galerkin",
            ]
    return opts


def _hybrid(p):
    return OUTER + [
        "-pc_type", "mg",
        "-pc_mg_levels", p["N1"],
        "-mg_coarse_pc_type", "telescope",
        "-mg_coarse_pc_telescope_reduction_factor", p["r"],
        "-mg_coarse_telescope_pc_type", "mg",
        "-mg_coarse_telescope_pc_mg_levels", p["N2"],
        "-mg_coarse_telescope_pc_mg_galerkin",
        # algebraic multigrid is out of scope; the chain ends in a direct solve
        "-mg_coarse_telescope_mg_coarse_pc_type", "lu",
    ]


def _const_subdomain_smoother(p):
    return OUTER + [
        "-pc_type", "mg",
        "-pc_mg_levels", p["N"],
        "-mg_levels_pc_type", "telescope",
        "-mg_levels_pc_telescope_reduction_factor", p["rn"],
        "-mg_levels_telescope_pc_type", "bjacobi",
    ]


def _zproc_smoother(p):
    return OUTER + [
        "-pc_type", "mg",
        "-pc_mg_levels", p["N"],
        "-mg_levels_pc_type", "telescope",
        "-mg_levels_pc_telescope_reduction_factor", p["r"],
        "-mg_levels_telescope_repart_da_processors_z", "1",
        "-mg_levels_telescope_pc_type", "bjacobi",
    ]


def _rasm(p):
    t = "-telescope_"
    return OUTER + [
        "-pc_type", "telescope",
        "-pc_telescope_reduction_factor", p["r"],
        t + "pc_type", "mg",
        t + "pc_mg_levels", p["N"],
        t + "mg_levels_ksp_type", "richardson",
        t + "mg_levels_ksp_max_it", "1",
        t + "mg_levels_ksp_richardson_scale", "1.0",
        t + "mg_levels_pc_type", "asm",
        t + "mg_levels_pc_asm_overlap", p["overlap"],
        t + "mg_levels_sub_ksp_type", "chebyshev",
        t + "mg_levels_sub_ksp_max_it", "10",
        t + "mg_levels_sub_pc_type", "jacobi",
        t + "mg_coarse_ksp_type", "gmres",
        t + "mg_coarse_ksp_max_it", "1",
        t + "mg_coarse_pc_type", "bjacobi",
    ]


PRESETS = {
    "truncation": (_truncation, {"N": 2, "nc": None}),
    "repartitioned_coarse": (_repartitioned_coarse, {"N1": 2, "N2": 2, "r": None, "r2": None, "N3": None}),
    "hybrid": (_hybrid, {"N1": 2, "N2": 2, "r": None}),
    "const_subdomain_smoother": (_const_subdomain_smoother, {"N": 2, "rn": 2}),
    "zproc_smoother": (_zproc_smoother, {"N": 2, "r": 2}),
    "rasm": (_rasm, {"N": 2, "r": 1, "overlap": 0}),
}


def preset_options(name: str, nranks: int, **params) -> list[str]:
    """Option tokens of a preset with its placeholders bound.

    Unbound reduction factors default to the number of ranks (full
    agglomeration); ``rn``/``r`` of the smoother presets default to 2 (capped
    at the number of ranks).
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    builder, defaults = PRESETS[name]
    unknown = set(params) - set(defaults)
    if unknown:
        raise KeyError(f"preset {name!r} has no placeholder(s) {sorted(unknown)}; known: {sorted(defaults)}")
    p = dict(defaults)
    p.update({k: v for k, v in params.items() if v is not None})
    for key in ("nc", "r"):
        if key in p and p[key] is None:
            p[key] = nranks
    for key in ("rn", "r"):
        if key in p and name in ("const_subdomain_smoother", "zproc_smoother", "rasm"):
            p[key] = min(int(p[key]), nranks)
    return [str(t) if not isinstance(t, str) else t for t in builder(p)]


# ---------------------------------------------------------------- timings

@dataclass
class TimingRecord:
    n_C: int
    N: int
    r: int
    T_setup_s: float
    T_apply_s: float
    T_solve_s: float
    iterations: int
    levels: str
    ranks: str
    T_inner_setup_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> list[str]:
        return [str(self.n_C), str(self.N), str(self.r), _sci(self.T_setup_s), _sci(self.T_apply_s),
                _sci(self.T_solve_s), str(self.iterations), self.levels, self.ranks]


def _sci(v: float) -> str:
    return f"{float(v):.2e}"


def emit_csv(records, path=None) -> str:
    """Write the records (header + one row each); returns the CSV text."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        w.writerow(rec.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def emit_table(records) -> str:
    records = list(records)
    if not records:
        raise ValueError("no records to format")
    rows = [list(CSV_COLUMNS)] + [r.row() for r in records]
    widths = [max(len(r[c]) for r in rows) for c in range(len(CSV_COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def telescope_instances(node: SolverNode) -> list:
    """Telescope states reachable from ``node`` on this rank, in a rank-consistent order."""
    out = []
    pc = node.pc
    if isinstance(pc, Telescope):
        out.append(pc.state)
        if pc.state.sub_solver is not None:
            out += telescope_instances(pc.state.sub_solver)
    elif isinstance(pc, MG):
        for s in pc.smoothers:
            out += telescope_instances(s)
        out += telescope_instances(pc.coarse)
    elif isinstance(pc, (BJacobi, RASM)):
        out += telescope_instances(pc.sub)
    return out


def schedules(desc: dict) -> tuple[list[int], list[int]]:
    """Per-stage multigrid levels and communicator sizes, finest stage first."""
    levels, ranks = [], []
    node = desc
    while node is not None:
        pc = node.get("pc") or {}
        size = node.get("comm_size")
        while pc.get("type") == "telescope":
            node = pc.get("inner")
            if node is None:
                return levels, ranks
            pc, size = node.get("pc") or {}, node.get("comm_size")
        if pc.get("type") == "mg":
            levels.append(pc["levels"])
            ranks.append(size)
            node = pc["coarse"]
            cpc = node.get("pc") or {}
            if cpc.get("type") != "telescope":
                break
        else:
            if levels:
                levels.append(1)
                ranks.append(size)
            break
    return levels, ranks


def _first_reduction(desc: dict) -> int:
    stack = [desc]
    while stack:
        d = stack.pop(0)
        if not isinstance(d, dict):
            continue
        if d.get("type") == "telescope":
            return int(d["reduction_factor"])
        for v in d.values():
            if isinstance(v, dict):
                stack.append(v)
            elif isinstance(v, list):
                stack.extend(x for x in v if isinstance(x, dict))
    return 1


def _natural(block_values: np.ndarray, nat: np.ndarray) -> np.ndarray:
    out = np.empty_like(block_values)
    out[nat] = block_values
    return out


@dataclass
class PresetResult:
    record: TimingRecord
    report: SolveReport
    first_report: SolveReport
    solution: np.ndarray  # natural (lexicographic) ordering
    exact: Optional[np.ndarray]
    description: dict
    options: list
    unused: list


def _rank_main(comm, spec: ProblemSpec, tokens: list[str], solves: int):
    grid = create_grid(comm, len(spec.npoints), spec.npoints, dof=spec.dof)
    A, b, u = spec.assemble(grid)
    db = parse(tokens)
    node = build_solver_tree(db, "", A, grid, spec.operator)
    tele = telescope_instances(node)
    reports = []
    t_solve = 0.0
    x = None
    for _ in range(solves):
        for st in tele:
            st.reset_timings()
        comm.barrier()
        t0 = comm.wtime()
        x, rep = node.solve(b)
        t_solve = comm.allreduce(comm.wtime() - t0, "max")
        reports.append(rep)
    timings = [st.timings() for st in tele]
    nat = grid.header.natural_ordering()
    xs = _natural(x.gather(), nat)
    us = _natural(u.gather(), nat) if u is not None else None
    if comm.rank != 0:
        return None
    desc = node.describe()
    lv, rk = schedules(desc)
    rec = TimingRecord(
        n_C=comm.size, N=spec.npoints[0], r=_first_reduction(desc.get("pc") or {}),
        T_setup_s=sum(t["T_setup"] for t in timings),
        T_apply_s=sum(t["T_apply"] for t in timings),
        T_solve_s=t_solve,
        iterations=reports[-1].iterations,
        levels=",".join(str(v) for v in lv),
        ranks=",".join(str(v) for v in rk),
        T_inner_setup_s=sum(t["T_inner_setup"] for t in timings),
        extra={"fused_levels": fused_levels(desc)},
    )
    return PresetResult(rec, reports[-1], reports[0], xs, us, desc, tokens, db.unused())


def run_options(tokens: list[str], nranks: int, spec: ProblemSpec | None = None, clock: str = "wall",
                solves: int = 2) -> PresetResult:
    """Solve ``spec`` on ``nranks`` ranks with an explicit option list (two solves by default)."""
    spec = spec or ProblemSpec()
    try:
        return spawn_world(nranks, _rank_main, spec, list(tokens), solves, clock=clock)[0]
    except RankFailure as exc:
        # configuration problems are raised identically on every rank; surface the original
        if isinstance(exc.error, (ConfigurationError, GridError, OptionsParseError)):
            raise exc.error from None
        raise


def run_preset(name: str, nranks: int = 8, spec: ProblemSpec | None = None, params: dict | None = None,
               extra: list[str] | None = None, clock: str = "wall", solves: int = 2) -> PresetResult:
    """Materialise a preset, solve twice and report the second solve.

    ``extra`` options are appended after the preset (so they override it).
    """
    tokens = preset_options(name, nranks, **(params or {})) + list(extra or [])
    return run_options(tokens, nranks, spec, clock, solves)


def discretization_errors(sizes=(9, 17, 33), nranks: int = 1) -> list[float]:
    """Max-norm error against ``u*`` of the forcing-based problem for each size."""
    errs = []
    for n in sizes:
        spec = ProblemSpec(npoints=(n, n, n), manufactured=False)
        levels = int(round(math.log2(n - 1)))
        res = run_preset("truncation", nranks, spec, {"N": levels}, solves=1,
                         extra=["-ksp_rtol", "1e-12"])
        errs.append(float(np.abs(res.solution - _exact_global(spec, nranks)).max()))
    return errs


def _exact_global(spec: ProblemSpec, nranks: int) -> np.ndarray:
    from .problems import exact_solution

    def main(comm):
        g = create_grid(comm, len(spec.npoints), spec.npoints, dof=spec.dof)
        return _natural(exact_solution(g).gather(), g.header.natural_ordering())

    return spawn_world(nranks, main)[0]


@dataclass
class NeumannResult:
    solution: np.ndarray
    rhs: np.ndarray
    matrix: object
    report: SolveReport
    description: dict


def _neumann_main(comm, npoints, tokens):
    from .linalg import NullSpace, attach_nullspace
    from .problems import laplacian
    from .solvers import deterministic_vector

    grid = create_grid(comm, len(npoints), npoints)
    A = attach_nullspace(laplacian(grid, bc="neumann"), NullSpace(has_constant=True))
    # a consistent right-hand side: image of a partition-independent vector
    b = A.mult(deterministic_vector(A.row_layout, comm))
    node = build_solver_tree(parse(tokens), "", A, grid)
    x, rep = node.solve(b)
    xs, bs, Ag = x.gather(), b.gather(), A.gather()
    return NeumannResult(xs, bs, Ag, rep, node.describe()) if comm.rank == 0 else None


def run_neumann(npoints, nranks: int, tokens: list[str], clock: str = "wall") -> NeumannResult:
    """Solve the singular pure-Neumann Laplacian (constant null space attached)."""
    return spawn_world(nranks, _neumann_main, tuple(npoints), list(tokens), clock=clock)[0]
