"""Finite-difference model problems on structured grids.

Every grid vertex is an unknown.  With Dirichlet conditions the boundary
vertices get decoupled rows ``sum_a 2 k / h_a^2`` (the same scale as the
interior diagonal) and their columns are eliminated from interior rows, so
the operator stays symmetric.  Interface coefficients are harmonic means of
the vertex values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grid import StructuredGrid
from .linalg import DistMatrix, DistVector

KINDS = ("poisson3d", "poisson3d_varcoef", "veclaplace3d")


def layered_coefficient(contrast: float = 1.0e3, layers: int = 4) -> Callable[[np.ndarray], np.ndarray]:
    """``k(x)`` alternating between 1 and ``contrast`` in bands along the last axis."""
    def k(x: np.ndarray) -> np.ndarray:
        band = np.floor(x[:, -1] * layers).astype(np.int64)
        return np.where(band % 2 == 1, contrast, 1.0)
    return k


def _vertex_k(coef, ijk: np.ndarray, h) -> np.ndarray:
    if callable(coef):
        return np.asarray(coef(ijk * np.asarray(h)), dtype=np.float64)
    return np.full(len(ijk), float(coef))


def laplacian(grid: StructuredGrid, coef=1.0, bc: str = "dirichlet") -> DistMatrix:
    """Assemble the (2*dim+1)-point operator ``-div(k grad u)`` on ``grid``, per dof.

    Parameters
    ----------
    coef : float or callable
        Constant ``k`` or a function of physical vertex coordinates
        ``(m, dim) -> (m,)``.
    bc : {"dirichlet", "neumann"}
        Homogeneous Dirichlet (decoupled boundary rows) or pure Neumann
        (edge-based, rows sum to zero, constant null space).
    """
    if bc not in ("dirichlet", "neumann"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    hdr = grid.header
    h = grid.spacing
    npts = np.asarray(grid.npoints)
    verts = grid.owned_vertices()
    m = len(verts)
    kv = _vertex_k(coef, verts, h)
    lo, _ = grid.local_range
    dof = grid.dof
    row_v = lo + np.arange(m, dtype=np.int64) * dof
    on_bdry = np.any((verts == 0) | (verts == npts - 1), axis=1)

    diag = np.zeros(m)
    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        inv_h2 = 1.0 / (h[a] * h[a])
        for step in (-1, 1):
            nb = verts.copy()
            nb[:, a] += step
            inside = (nb[:, a] >= 0) & (nb[:, a] < npts[a])
            if bc == "dirichlet":
                active = inside & ~on_bdry
                nb_bdry = np.zeros(m, dtype=bool)
                nb_bdry[inside] = np.any((nb[inside] == 0) | (nb[inside] == npts - 1), axis=1)
                couple = active & ~nb_bdry
            else:
                active = inside
                couple = inside
            ke = np.zeros(m)
            if np.any(active):
                kn = _vertex_k(coef, nb[active], h)
                ke[active] = 2.0 * kv[active] * kn / (kv[active] + kn)
            diag += ke * inv_h2
            if np.any(couple):
                base = hdr.block_index(nb[couple])
                for c in range(dof):
                    rows.append(row_v[couple] + c)
                    cols.append(base + c)
                    vals.append(-ke[couple] * inv_h2)
    if bc == "dirichlet":
        diag[on_bdry] = kv[on_bdry] * sum(2.0 / (hh * hh) for hh in h)
    for c in range(dof):
        rows.append(row_v + c)
        cols.append(row_v + c)
        vals.append(diag)
    return DistMatrix.from_coo(grid.comm, (grid.n, grid.n), grid.layout, grid.layout,
                               np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def exact_solution(grid: StructuredGrid) -> DistVector:
    """Samples of ``(c+1) * prod_a sin(pi x_a)`` for component ``c``; exactly zero on the boundary."""
    verts = grid.owned_vertices()
    x = verts * np.asarray(grid.spacing)
    u = np.prod(np.sin(np.pi * x), axis=1)
    u[np.any((verts == 0) | (verts == np.asarray(grid.npoints) - 1), axis=1)] = 0.0
    vals = (u[:, None] * np.arange(1, grid.dof + 1)[None, :]).ravel()
    return DistVector(grid.comm, grid.layout, vals)


def random_solution(grid: StructuredGrid) -> DistVector:
    """Pseudo-random samples keyed on the natural index (identical for every partition)."""
    verts = grid.owned_vertices()
    nat = grid.header.natural_index(verts)
    g = (nat[:, None] + np.arange(grid.dof)[None, :]).ravel().astype(np.float64)
    vals = np.sin(g * 12.9898 + 78.233) * 43758.5453
    return DistVector(grid.comm, grid.layout, vals - np.floor(vals) - 0.5)


def forcing(grid: StructuredGrid, coef=1.0) -> DistVector:
    """Continuous right-hand side ``f = dim * pi^2 * k * u*`` (zero on boundary rows)."""
    verts = grid.owned_vertices()
    h = grid.spacing
    u = exact_solution(grid).values.reshape(len(verts), grid.dof)
    k = _vertex_k(coef, verts, h)
    f = grid.dim * math.pi ** 2 * k[:, None] * u
    return DistVector(grid.comm, grid.layout, f.ravel())


@dataclass
class ProblemSpec:
    """A model problem: kind, extents and coefficient field.

    ``manufactured=True`` builds ``b = A u*`` so the discrete solution is
    exactly the sampled ``u*``; otherwise ``b`` samples the continuous
    forcing, for discretisation-error studies.  ``solution="random"`` swaps
    ``u*`` for partition-independent pseudo-random samples; ``u*`` itself is
    an eigenvector of the constant-coefficient operator, which makes Krylov
    iteration counts unrepresentatively small.
    """

    kind: str = "poisson3d"
    npoints: tuple = (9, 9, 9)
    k: float = 1.0
    contrast: float = 1.0e3
    layers: int = 4
    manufactured: bool = True
    dof: Optional[int] = None
    solution: str = "sine"

    def __post_init__(self):
        if self.solution not in ("sine", "random"):
            raise ValueError(f"unknown manufactured solution {self.solution!r}; expected 'sine' or 'random'")
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        self.npoints = tuple(int(n) for n in self.npoints)
        natural = 3 if self.kind == "veclaplace3d" else 1
        if self.dof is None:
            self.dof = natural
        elif self.dof != natural and self.kind != "veclaplace3d":
            raise ValueError(f"{self.kind} has one unknown per vertex")

    @property
    def coefficient(self):
        if self.kind == "poisson3d_varcoef":
            return layered_coefficient(self.contrast, self.layers)
        return self.k

    def operator(self, grid: StructuredGrid) -> DistMatrix:
        """Rediscretisation callback: the operator on any grid of the hierarchy."""
        return laplacian(grid, self.coefficient)

    def assemble(self, grid: StructuredGrid):
        """Return ``(A, b, u_exact)``; ``u_exact`` is ``None`` on the forcing path."""
        if tuple(grid.npoints) != self.npoints or grid.dof != self.dof:
            raise ValueError(f"grid {grid.npoints}x{grid.dof} does not match problem {self.npoints}x{self.dof}")
        A = self.operator(grid)
        if self.manufactured:
            u = exact_solution(grid) if self.solution == "sine" else random_solution(grid)
            return A, A.mult(u), u
        return A, forcing(grid, self.coefficient), None


def assemble_problem(spec: ProblemSpec, grid: StructuredGrid):
    return spec.assemble(grid)
