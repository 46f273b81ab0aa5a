"""Agglomerating ("telescoping") preconditioner.

The operator is moved onto the strided sub-communicator of every ``r``-th
rank, a nested solver runs there, and the result is scattered back.  The
ranks left out wait in the return scatter.

Three setup paths exist:

* no grid (or ``pc_telescope_ignore_dm``): contiguous row fusion;
* grid attached, no callback: the grid is repartitioned, the permutation
  ``P̂`` between the two block orderings is assembled, ``P̂ᵀAP̂`` is formed
  explicitly and redistributed to the new grid's layout;
* grid attached with a rediscretisation callback: the callback assembles
  the operator directly on the repartitioned grid.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

from .comm import Communicator
from .errors import ConfigurationError, PreconditionerWarning
from .grid import StructuredGrid, build_permutation, repartition_onto
from .linalg import DistMatrix, DistVector, ScatterPlan, propagate_nullspace, ptap, redistribute_rows
from .options import OptionsDatabase
from .precond import Preconditioner


@dataclass
class TelescopeState:
    reduction_factor: int
    comm: Communicator
    subcomm: Optional[Communicator]
    A: DistMatrix
    A_prime: Optional[DistMatrix]
    vec_plan: ScatterPlan
    path: str  # "rows", "explicit" or "callback"
    repartitioned_grid: Optional[StructuredGrid] = None
    permutation: Optional[DistMatrix] = None
    permutation_T: Optional[DistMatrix] = None
    sub_solver: object = None
    proc_grid_override: Optional[tuple] = None
    operator_callback: Optional[Callable] = None
    t_setup: float = 0.0
    t_inner_setup: float = 0.0
    t_apply_total: float = 0.0
    n_apply: int = 0
    inner_reports: list = field(default_factory=list)

    @property
    def is_member(self) -> bool:
        return self.subcomm is not None

    def reset_timings(self):
        self.t_apply_total = 0.0
        self.n_apply = 0

    def timings(self) -> dict:
        """Per-rank-max timings (collective on the parent communicator).

        ``T_apply`` is the mean permute+scatter time per application, taken
        over member ranks only (the other ranks' scatter time includes the
        wait for the nested solve).
        """
        mean = self.t_apply_total / self.n_apply if self.n_apply and self.is_member else 0.0
        return {
            "T_setup": self.t_setup,
            "T_inner_setup": self.t_inner_setup,
            "T_apply": self.comm.allreduce(mean, "max"),
            "applications": self.n_apply,
        }


def telescope_setup(A: DistMatrix, grid: StructuredGrid | None = None, *, reduction_factor: int,
                    db: OptionsDatabase | None = None, prefix: str = "", callback=None,
                    proc_grid_override=None) -> TelescopeState:
    """Collective on ``A.comm``."""
    from .ksp import SolverNode

    comm = A.comm
    r = int(reduction_factor)
    if r < 1 or r > comm.size:
        raise ConfigurationError(f"telescope reduction factor {r} must lie in [1, {comm.size}]")
    db = db if db is not None else OptionsDatabase()
    t0 = comm.wtime()
    sub = comm.split_strided(r)
    new_grid = Ph = PhT = None
    if grid is None:
        path = "rows"
        A_prime = redistribute_rows(A, sub)
    else:
        if grid.comm.cid != comm.cid or grid.layout != A.row_layout:
            raise ConfigurationError("the attached grid does not match the operator layout")
        new_grid = repartition_onto(grid, sub, proc_grid_override)
        Ph = build_permutation(grid, new_grid)
        PhT = Ph.transpose()
        if callback is not None:
            path = "callback"
            A_prime = callback(new_grid) if sub is not None else None
        else:
            path = "explicit"
            Ap = ptap(Ph, A)
            A_prime = redistribute_rows(Ap, sub, new_grid.layout if sub is not None else None)
    plan = ScatterPlan(comm, A.row_layout, sub, A_prime.row_layout if sub is not None else None)
    if A.nullspace is not None:
        move = (lambda v: plan.to_sub(PhT.mult(v))) if PhT is not None else plan.to_sub
        ns = propagate_nullspace(A.nullspace, move)
        if A_prime is not None:
            A_prime.nullspace = ns
    t_setup = comm.wtime() - t0
    state = TelescopeState(r, comm, sub, A, A_prime, plan, path, new_grid, Ph, PhT,
                           proc_grid_override=proc_grid_override, operator_callback=callback)
    t1 = comm.wtime()
    if sub is not None:
        state.sub_solver = SolverNode(db, prefix + "telescope_", role="telescope")
        state.sub_solver.setup(A_prime, grid=new_grid, callback=callback if path == "callback" else None)
    t_inner = comm.wtime() - t1
    state.t_setup = comm.allreduce(t_setup, "max")
    state.t_inner_setup = comm.allreduce(t_inner, "max")
    return state


def telescope_apply(state: TelescopeState, x: DistVector) -> DistVector:
    """``y = P̂ · scatter_back(solve'(scatter(P̂ᵀ x)))``; collective on the parent communicator."""
    comm = state.comm
    t0 = comm.wtime()
    w = state.permutation_T.mult(x) if state.permutation_T is not None else x
    xs = state.vec_plan.to_sub(w)
    t1 = comm.wtime()
    ys = None
    if state.is_member:
        ys, rep = state.sub_solver.solve(xs)
        if not rep.converged:
            state.inner_reports.append(rep)
            warnings.warn(PreconditionerWarning(
                f"telescope inner solve stopped with reason {rep.converged_reason!r} "
                f"after {rep.iterations} iterations", rep))
    t2 = comm.wtime()
    y = state.vec_plan.from_sub(ys)
    if state.permutation is not None:
        y = state.permutation.mult(y)
    t3 = comm.wtime()
    state.t_apply_total += (t1 - t0) + (t3 - t2)
    state.n_apply += 1
    return y


class Telescope(Preconditioner):
    """Preconditioner wrapper; options ``pc_telescope_reduction_factor``,
    ``pc_telescope_ignore_dm`` and ``telescope_repart_da_processors_{x,y,z}``;
    the nested tree reads ``telescope_*``."""

    kind = "telescope"

    def __init__(self, db=None, prefix=""):
        super().__init__(db, prefix)
        self.reduction_factor = self.db.get_int(prefix + "pc_telescope_reduction_factor", 1)
        self.ignore_dm = self.db.get_bool(prefix + "pc_telescope_ignore_dm", False)
        pg = [self.db.get_int(prefix + "telescope_repart_da_processors_" + ax) for ax in "xyz"]
        self.proc_grid_override = tuple(pg) if any(p is not None for p in pg) else None
        self.state: TelescopeState | None = None

    def setup(self, A, grid=None, callback=None):
        self.A = A
        use_grid = None if self.ignore_dm else grid
        override = None
        if self.proc_grid_override is not None and use_grid is not None:
            override = self.proc_grid_override[:use_grid.dim]
        self.state = telescope_setup(A, use_grid, reduction_factor=self.reduction_factor, db=self.db,
                                     prefix=self.prefix, callback=callback if use_grid is not None else None,
                                     proc_grid_override=override)
        return self

    def apply(self, x):
        return telescope_apply(self.state, x)

    def describe(self):
        st = self.state
        out = {"type": self.kind, "prefix": self.prefix, "reduction_factor": self.reduction_factor}
        if st is not None:
            out["path"] = st.path
            out["parent_size"] = st.comm.size
            out["subcomm_size"] = st.subcomm.size if st.subcomm is not None else None
            if st.repartitioned_grid is not None:
                out["proc_grid"] = list(st.repartitioned_grid.proc_grid)
            out["inner"] = st.sub_solver.describe() if st.sub_solver is not None else None
        return out


def telescope_as_preconditioner(state: TelescopeState) -> Telescope:
    pc = Telescope()
    pc.reduction_factor = state.reduction_factor
    pc.A = state.A
    pc.state = state
    return pc
