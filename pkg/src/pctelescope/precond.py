"""Preconditioners: identity, Jacobi, block Jacobi, ILU(0), LU, RASM and multigrid.

Each class reads its own options (under its prefix) on construction and is
set up with ``setup(A, grid=None, callback=None)``.  ``apply(x)`` returns a
new vector and is linear for a fixed setup, unless a nested node runs a
tolerance-driven Krylov method.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .errors import ConfigurationError
from .grid import (GridError, StructuredGrid, coarsen, coarsen_depth, create_interpolation,
                   ghost_exchange, ghosted_box, local_array_to_vector, vector_to_local_array)
from .linalg import DistMatrix, DistVector, Layout, NullSpace, ptap
from .options import OptionsDatabase


def _local_matrix(comm, csr: sp.csr_matrix) -> DistMatrix:
    """Wrap a rank-local square CSR as a matrix on the size-one communicator."""
    csr = sp.csr_matrix(csr)
    csr.sort_indices()
    n = csr.shape[0]
    layout = Layout([0, n])
    return DistMatrix(comm, (n, n), layout, layout, csr.indptr, csr.indices, csr.data)


class Preconditioner:
    kind = "none"

    def __init__(self, db: OptionsDatabase | None = None, prefix: str = ""):
        self.db = db if db is not None else OptionsDatabase()
        self.prefix = prefix
        self.A = None

    def setup(self, A: DistMatrix, grid: StructuredGrid | None = None, callback=None):
        self.A = A
        return self

    def apply(self, x: DistVector) -> DistVector:
        return x.copy()

    def describe(self) -> dict:
        return {"type": self.kind, "prefix": self.prefix}


Identity = Preconditioner


class Jacobi(Preconditioner):
    """``y_i = x_i / A_ii``."""

    kind = "jacobi"

    def setup(self, A, grid=None, callback=None):
        self.A = A
        d = A.diagonal()
        bad = np.flatnonzero(d == 0.0)
        if len(bad):
            raise ZeroDivisionError(f"jacobi: zero diagonal entry in row {A.local_range[0] + int(bad[0])}")
        self.inv_diag = 1.0 / d
        return self

    def apply(self, x):
        return DistVector(x.comm, x.layout, x.values * self.inv_diag)


class ILU0(Preconditioner):
    """Zero-fill incomplete LU of the rank-local diagonal block, natural ordering."""

    kind = "ilu"

    def setup(self, A, grid=None, callback=None):
        self.A = A
        blk = A.local_block()
        self._ptr = blk.indptr.astype(np.int64)
        self._ind = blk.indices.astype(np.int64)
        try:
            self._lu, self._diag = kernels.ilu0_factor(self._ptr, self._ind, blk.data)
        except kernels.ZeroPivotError as exc:
            raise ZeroDivisionError(f"ilu: zero pivot in row {A.local_range[0] + exc.row}") from None
        return self

    def factors(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Dense-checkable ``(L, U)`` with unit-diagonal ``L``."""
        n = len(self._ptr) - 1
        F = sp.csr_matrix((self._lu, self._ind, self._ptr), shape=(n, n))
        return sp.tril(F, -1, format="csr") + sp.identity(n, format="csr"), sp.triu(F, format="csr")

    def apply(self, x):
        return DistVector(x.comm, x.layout, kernels.ilu0_solve(self._ptr, self._ind, self._lu, self._diag, x.values))


class LU(Preconditioner):
    """Sparse direct factorisation; only on a one-rank communicator."""

    kind = "lu"

    def setup(self, A, grid=None, callback=None):
        if A.comm.size != 1:
            raise ConfigurationError(
                f"lu runs on a single rank but the operator lives on {A.comm.size} ranks; "
                f"agglomerate first, e.g. -{self.prefix}pc_type telescope "
                f"-{self.prefix}pc_telescope_reduction_factor {A.comm.size} -{self.prefix}telescope_pc_type lu")
        self.A = A
        M = sp.csc_matrix(A.local_csr())
        try:
            self._lu = spla.splu(M)
        except RuntimeError as exc:
            raise ZeroDivisionError(f"lu: {exc}") from None
        return self

    def apply(self, x):
        return DistVector(x.comm, x.layout, self._lu.solve(x.values))


class BJacobi(Preconditioner):
    """One block per rank; each block solved by a nested node with prefix ``sub_``."""

    kind = "bjacobi"

    def setup(self, A, grid=None, callback=None):
        from .ksp import SolverNode

        self.A = A
        self._local = _local_matrix(A.comm.self_comm(), A.local_block())
        self.sub = SolverNode(self.db, self.prefix + "sub_", role="sub")
        self.sub.setup(self._local)
        return self

    def apply(self, x):
        xb = DistVector(self._local.comm, self._local.row_layout, x.values)
        return DistVector(x.comm, x.layout, self.sub.apply(xb).values)

    def describe(self):
        return {"type": self.kind, "prefix": self.prefix, "blocks": self.A.comm.size,
                "sub": self.sub.describe()}


class RASM(Preconditioner):
    """Restricted additive Schwarz over grid-overlapped sub-domains.

    Each rank extends its ownership box by ``-pc_asm_overlap`` vertex layers
    (clipped at the boundary), solves the sub-domain operator (Dirichlet
    truncation of ``A``) with the nested ``sub_`` node and keeps only the
    entries it owns.
    """

    kind = "asm"

    def __init__(self, db=None, prefix=""):
        super().__init__(db, prefix)
        self.overlap = self.db.get_int(prefix + "pc_asm_overlap", 1)
        if self.overlap < 0:
            raise ConfigurationError("pc_asm_overlap must be nonnegative")

    def setup(self, A, grid=None, callback=None):
        from .ksp import SolverNode

        if grid is None:
            raise ConfigurationError("asm needs a structured grid to define overlapping sub-domains")
        self.A, self.grid = A, grid
        hdr = grid.header
        widths = [min(e - s for s, e in axis) for axis, p in zip(hdr.ownership, hdr.proc_grid) if p > 1]
        k = self.overlap
        if widths and k > min(widths):
            warnings.warn(f"asm overlap {k} exceeds the narrowest neighbour extent {min(widths)}; clamped")
            k = min(widths)
        self.width = k
        box = ghosted_box(hdr, A.comm.rank, k)
        axes = [np.arange(s, e) for s, e in box]
        mesh = np.meshgrid(*reversed(axes), indexing="ij")
        verts = np.stack([m.ravel() for m in reversed(mesh)], axis=1)
        base = hdr.block_index(verts)
        idx = (base[:, None] + np.arange(grid.dof)[None, :]).ravel()
        rows = A.fetch_rows(idx)
        order = np.argsort(idx)
        sidx = idx[order]
        pos = np.searchsorted(sidx, rows.indices).clip(0, len(sidx) - 1)
        keep = sidx[pos] == rows.indices
        rr = np.repeat(np.arange(len(idx)), np.diff(rows.indptr))[keep]
        local = sp.csr_matrix((rows.data[keep], (rr, order[pos[keep]])), shape=(len(idx), len(idx)))
        self._local = _local_matrix(A.comm.self_comm(), local)
        self.sub = SolverNode(self.db, self.prefix + "sub_", role="sub")
        self.sub.setup(self._local)
        return self

    def apply(self, x):
        arr = vector_to_local_array(self.grid, x.values, self.width)
        ghost_exchange(self.grid, arr, self.width)
        xs = DistVector(self._local.comm, self._local.row_layout, arr.ravel())
        ys = self.sub.apply(xs).values.reshape(arr.shape)
        return DistVector(x.comm, x.layout, local_array_to_vector(self.grid, ys, self.width))

    def describe(self):
        return {"type": self.kind, "prefix": self.prefix, "overlap": self.width,
                "subdomains": self.A.comm.size, "sub": self.sub.describe()}


@dataclass
class MGLevel:
    grid: StructuredGrid
    A: DistMatrix
    P: DistMatrix | None = None  # interpolation to the next finer level
    smoother: object = None


@dataclass
class MGHierarchy:
    levels: list = field(default_factory=list)  # coarsest first, finest last
    coarse_solver: object = None
    galerkin: bool = False


class MG(Preconditioner):
    """Geometric multigrid V-cycle over repeatedly coarsened grids.

    Options: ``pc_mg_levels`` (default: deepest achievable hierarchy),
    ``pc_mg_galerkin`` (flag; otherwise coarse operators come from the
    rediscretisation callback).  Smoothers read ``mg_levels_*``, the coarse
    solver ``mg_coarse_*``.
    """

    kind = "mg"

    def __init__(self, db=None, prefix=""):
        super().__init__(db, prefix)
        self.nlevels = self.db.get_int(prefix + "pc_mg_levels")
        self.galerkin = self.db.get_bool(prefix + "pc_mg_galerkin", False)

    def setup(self, A, grid=None, callback=None):
        from .ksp import SolverNode

        if grid is None:
            raise ConfigurationError("mg needs a structured grid to build its hierarchy")
        n = self.nlevels if self.nlevels is not None else max(coarsen_depth(grid), 2)
        if n < 2:
            raise ConfigurationError(f"pc_mg_levels must be at least 2, got {n}")
        grids = [grid]
        for _ in range(n - 1):
            try:
                grids.append(coarsen(grids[-1]))
            except GridError as exc:
                raise ConfigurationError(
                    f"cannot build {n} multigrid levels on grid {grid.npoints} over processor grid "
                    f"{grid.proc_grid}: {exc}; achievable depth is {coarsen_depth(grid)}") from None
        if not self.galerkin and callback is None:
            raise ConfigurationError("rediscretised coarse operators need an operator callback "
                                     f"(or set -{self.prefix}pc_mg_galerkin)")
        self.A, self.grids = A, grids
        self.P = [create_interpolation(grids[l + 1], grids[l]) for l in range(n - 1)]
        self.R = [P.transpose() for P in self.P]
        # Rediscretised operators are not scaled for R = P^T; full weighting
        # divides the restricted residual by the coarse/fine volume ratio.
        self.restrict_scale = [
            1.0 if self.galerkin else
            1.0 / float(np.prod(np.asarray(grids[l + 1].spacing) / np.asarray(grids[l].spacing)))
            for l in range(n - 1)
        ]
        ops = [A]
        for l in range(n - 1):
            Ac = ptap(self.P[l], ops[l]) if self.galerkin else callback(grids[l + 1])
            if A.nullspace is not None and A.nullspace.has_constant:
                Ac.nullspace = NullSpace(has_constant=True)
            ops.append(Ac)
        self.ops = ops
        child_cb = None if self.galerkin else callback
        self.smoothers = []
        for l in range(n - 1):
            node = SolverNode(self.db, self.prefix + "mg_levels_", role="levels")
            node.setup(ops[l], grid=grids[l], callback=child_cb)
            self.smoothers.append(node)
        self.coarse = SolverNode(self.db, self.prefix + "mg_coarse_", role="coarse")
        self.coarse.setup(ops[-1], grid=grids[-1], callback=child_cb)
        return self

    @property
    def hierarchy(self) -> MGHierarchy:
        levels = [MGLevel(g, A, P, s) for g, A, P, s in
                  zip(self.grids, self.ops, [None] + self.P, self.smoothers + [None])]
        return MGHierarchy(list(reversed(levels)), self.coarse, self.galerkin)

    def _vcycle(self, l: int, b: DistVector) -> DistVector:
        if l == len(self.ops) - 1:
            return self.coarse.apply(b)
        smoother = self.smoothers[l]
        x, _ = smoother.solve(b)
        r = self.ops[l].mult(x)
        r.aypx(-1.0, b)
        rc = self.R[l].mult(r)
        if self.restrict_scale[l] != 1.0:
            rc.scale(self.restrict_scale[l])
        e = self._vcycle(l + 1, rc)
        x.axpy(1.0, self.P[l].mult(e))
        x, _ = smoother.solve(b, x)
        return x

    def apply(self, x):
        return self._vcycle(0, x)

    def describe(self):
        return {
            "type": self.kind,
            "prefix": self.prefix,
            "levels": len(self.ops),
            "galerkin": self.galerkin,
            "grids": [list(g.npoints) for g in self.grids],
            "smoothers": [s.describe() for s in self.smoothers],
            "coarse": self.coarse.describe(),
        }


def mg_setup(A, grid, n_levels: int, galerkin: bool = True, callback=None,
             db: OptionsDatabase | None = None, prefix: str = "") -> MG:
    """Programmatic multigrid setup; smoother/coarse settings come from ``db``."""
    db = (db or OptionsDatabase()).copy()
    db.set(prefix + "pc_mg_levels", n_levels)
    db.set(prefix + "pc_mg_galerkin", "true" if galerkin else "false")
    return MG(db, prefix).setup(A, grid, callback)


def mg_apply(mg: MG, x: DistVector) -> DistVector:
    return mg.apply(x)
