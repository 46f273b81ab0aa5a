"""Solver nodes: a Krylov configuration plus a preconditioner, read from prefixed options."""
from __future__ import annotations

from .errors import ConfigurationError
from .linalg import DistMatrix, DistVector
from .options import OptionsDatabase
from .solvers import METHODS, KrylovConfig, SolveReport, chebyshev_bounds_estimate, solve

PC_TYPES = ("none", "jacobi", "bjacobi", "ilu", "lu", "asm", "rasm", "mg", "telescope")
ROLES = ("outer", "levels", "coarse", "telescope", "sub")


def make_preconditioner(pc_type: str, db: OptionsDatabase, prefix: str):
    from . import precond
    from .telescope import Telescope

    table = {
        "none": precond.Identity,
        "jacobi": precond.Jacobi,
        "bjacobi": precond.BJacobi,
        "ilu": precond.ILU0,
        "lu": precond.LU,
        "asm": precond.RASM,
        "rasm": precond.RASM,
        "mg": precond.MG,
        "telescope": Telescope,
    }
    if pc_type == "gamg":
        raise ConfigurationError(f"-{prefix}pc_type gamg (algebraic multigrid) is not available; "
                                 f"use -{prefix}pc_type lu for the coarsest solve")
    if pc_type not in table:
        raise ConfigurationError(f"unknown pc_type {pc_type!r} for -{prefix}pc_type; "
                                 f"valid types: {', '.join(PC_TYPES)}")
    return table[pc_type](db, prefix)


class SolverNode:
    """A configurable Krylov method + preconditioner pair.

    ``role`` selects defaults:

    ========== ======================================= =====================
    role       ksp default                             pc default
    ========== ======================================= =====================
    outer      gmres                                   none
    levels     richardson (scale 0.8), 8 fixed its     jacobi
    coarse     preonly on 1 rank or when a pc is set,  lu on 1 rank,
               else gmres with rtol 1e-4               else bjacobi
    telescope  same as coarse                          same as coarse
    sub        preonly                                 ilu
    ========== ======================================= =====================

    ``levels`` and ``sub`` nodes run a fixed number of iterations
    (``ksp_max_it``; 10 for chebyshev, 8 otherwise).
    """

    def __init__(self, db: OptionsDatabase | None = None, prefix: str = "", role: str = "outer"):
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.db = db if db is not None else OptionsDatabase()
        self.prefix = prefix
        self.role = role
        self.A = None
        self.pc = None
        self.config = None
        self.last_report: SolveReport | None = None

    def _opt(self, name):
        return self.prefix + name

    def _configure(self, comm_size: int):
        db, role = self.db, self.role
        pc_explicit = db.get_str(self._opt("pc_type"))
        ksp_explicit = db.get_str(self._opt("ksp_type"))
        if role == "outer":
            ksp_d, pc_d = "gmres", "none"
        elif role == "levels":
            ksp_d, pc_d = "richardson", "jacobi"
        elif role == "sub":
            ksp_d, pc_d = "preonly", "ilu"
        else:
            pc_d = "lu" if comm_size == 1 else "bjacobi"
            ksp_d = "preonly" if (pc_explicit is not None or comm_size == 1) else "gmres"
        ksp_type = ksp_explicit or ksp_d
        pc_type = pc_explicit or pc_d
        if ksp_type not in METHODS:
            raise ConfigurationError(f"unknown ksp_type {ksp_type!r} for -{self._opt('ksp_type')}; "
                                     f"valid types: {', '.join(METHODS)}")
        fixed_mode = role in ("levels", "sub") and ksp_type != "preonly"
        max_it_d = (10 if ksp_type == "chebyshev" else 8) if fixed_mode else 10000
        max_it = db.get_int(self._opt("ksp_max_it"), max_it_d)
        rtol_d = 1e-4 if role in ("coarse", "telescope") else 1e-5
        bounds = db.get_float_list(self._opt("ksp_chebyshev_eigenvalues"))
        if bounds is not None and len(bounds) != 2:
            raise ConfigurationError(f"-{self._opt('ksp_chebyshev_eigenvalues')} needs two values")
        self.config = KrylovConfig(
            method=ksp_type,
            rtol=db.get_float(self._opt("ksp_rtol"), rtol_d),
            atol=db.get_float(self._opt("ksp_atol"), 1e-50),
            max_its=max_it,
            restart=db.get_int(self._opt("ksp_gmres_restart"), 30),
            fixed_its=max_it if fixed_mode else None,
            damping=db.get_float(self._opt("ksp_richardson_scale"), 0.8 if role == "levels" else 1.0),
            cheb_bounds=tuple(bounds) if bounds else None,
            dtol=db.get_float(self._opt("ksp_divtol"), 1e5),
            norm_type=db.get_str(self._opt("ksp_norm_type")),
            history=role == "outer",
        )
        return pc_type

    def setup(self, A: DistMatrix, grid=None, callback=None) -> "SolverNode":
        self.A = A
        self.grid = grid
        pc_type = self._configure(A.comm.size)
        self.pc = make_preconditioner(pc_type, self.db, self.prefix)
        self.pc.setup(A, grid=grid, callback=callback)
        if self.config.method == "chebyshev" and self.config.cheb_bounds is None:
            self.config.cheb_bounds = chebyshev_bounds_estimate(A, self.pc, nullspace=A.nullspace)
        return self

    @property
    def nullspace(self):
        return None if self.A is None else self.A.nullspace

    def solve(self, b: DistVector, x0: DistVector | None = None) -> tuple[DistVector, SolveReport]:
        if self.A is None:
            raise RuntimeError("solver node used before setup")
        x, rep = solve(self.config, self.A, self.pc, b, x0, nullspace=self.nullspace)
        self.last_report = rep
        return x, rep

    def apply(self, b: DistVector) -> DistVector:
        """Approximate ``A^{-1} b`` from a zero initial guess (preconditioner use)."""
        return self.solve(b)[0]

    def describe(self) -> dict:
        cfg = self.config
        out = {"prefix": self.prefix, "role": self.role}
        if cfg is not None:
            out.update({
                "ksp_type": cfg.method, "rtol": cfg.rtol, "atol": cfg.atol, "max_it": cfg.max_its,
                "fixed_its": cfg.fixed_its, "damping": cfg.damping, "restart": cfg.restart,
                "cheb_bounds": cfg.cheb_bounds, "norm_type": cfg.norm_type,
            })
        if self.A is not None:
            out["comm_size"] = self.A.comm.size
            out["n"] = self.A.shape[0]
        out["pc"] = self.pc.describe() if self.pc is not None else None
        return out
