"""Vertex-centred structured grids distributed over a processor grid.

Conventions
-----------
* Axis 0 is ``i`` (fastest), axis 1 is ``j``, axis 2 is ``k``.
* Ranks are laid out i-fastest over the processor grid:
  ``rank = p_i + P_i * (p_j + P_j * p_k)``.
* Global unknowns are numbered rank block by rank block; inside a rank the
  owned vertices are lexicographic (i fastest) and the ``dof`` components of
  a vertex are contiguous.
* The natural index of component ``c`` at vertex ``(i, j, k)`` is
  ``((k * N_j + j) * N_i + i) * dof + c``.
"""
from __future__ import annotations

import itertools
import json
import functools
import math
from dataclasses import dataclass

import numpy as np

from .comm import Communicator
from .linalg import DistMatrix, Layout

_GHOST = ("ghost",)
_COORD = ("coords",)


class GridError(ValueError):
    """Raised when a grid cannot be built, coarsened or repartitioned."""


def split_range(n: int, parts: int) -> list[tuple[int, int]]:
    """Near-equal contiguous split of ``[0, n)``; the first ranks take the extra points."""
    base, extra = divmod(n, parts)
    out, s = [], 0
    for p in range(parts):
        e = s + base + (1 if p < extra else 0)
        out.append((s, e))
        s = e
    return out


def _factorizations(n: int, dim: int):
    if dim == 1:
        yield (n,)
        return
    for d in range(1, n + 1):
        if n % d == 0:
            for rest in _factorizations(n // d, dim - 1):
                yield (d,) + rest


def _surface_to_volume(sizes) -> float:
    vol = math.prod(sizes)
    if len(sizes) == 1:
        return 2.0 / vol
    surf = 0
    for a in range(len(sizes)):
        surf += 2 * vol // sizes[a]
    return surf / vol


def choose_proc_grid(size: int, npoints, fixed=None) -> tuple[int, ...]:
    """Processor grid minimising the worst per-rank surface-to-volume ratio.

    Ties go to the candidate with more ranks on the slowest axis.  ``fixed``
    may pin individual axes (``None`` entries are free).
    """
    dim = len(npoints)
    fixed = tuple(fixed) if fixed is not None else (None,) * dim
    best, best_key = None, None
    for pg in _factorizations(size, dim):
        if any(f is not None and f != p for f, p in zip(fixed, pg)):
            continue
        if any(p > n for p, n in zip(pg, npoints)):
            continue
        worst = _surface_to_volume([n // p for n, p in zip(npoints, pg)])
        key = (worst, tuple(-p for p in reversed(pg)))
        if best_key is None or key < best_key:
            best, best_key = pg, key
    if best is None:
        raise GridError(f"over-decomposed: {size} ranks cannot be arranged over grid {tuple(npoints)}"
                        + (f" with fixed axes {fixed}" if any(f is not None for f in fixed) else ""))
    return best


@dataclass(frozen=True)
class GridHeader:
    """Global, rank-independent description of a distributed grid."""

    npoints: tuple
    dof: int
    stencil_width: int
    proc_grid: tuple
    ownership: tuple  # per axis: tuple of (start, end)

    @property
    def dim(self) -> int:
        return len(self.npoints)

    @property
    def nranks(self) -> int:
        return math.prod(self.proc_grid)

    @property
    def nvertices(self) -> int:
        return math.prod(self.npoints)

    @property
    def n(self) -> int:
        return self.nvertices * self.dof

    def rank_coords(self, rank: int) -> tuple[int, ...]:
        out = []
        for p in self.proc_grid:
            out.append(rank % p)
            rank //= p
        return tuple(out)

    def rank_of_coords(self, pc) -> int:
        r, stride = 0, 1
        for c, p in zip(pc, self.proc_grid):
            r += c * stride
            stride *= p
        return r

    def box(self, rank: int) -> tuple[tuple[int, int], ...]:
        return tuple(self.ownership[a][c] for a, c in enumerate(self.rank_coords(rank)))

    def box_shape(self, rank: int) -> tuple[int, ...]:
        return tuple(e - s for s, e in self.box(rank))

    @functools.cached_property
    def _layout(self) -> Layout:
        return Layout.from_sizes([math.prod(self.box_shape(r)) * self.dof for r in range(self.nranks)])

    def block_index(self, ijk: np.ndarray, comp=0) -> np.ndarray:
        """Global (rank-block) index of vertices ``ijk`` (shape ``(m, dim)``), component ``comp``."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, self.dim)
        offsets = self._layout.offsets
        rank = np.zeros(len(ijk), dtype=np.int64)
        local = np.zeros(len(ijk), dtype=np.int64)
        stride_r = 1
        starts, widths = [], []
        for a in range(self.dim):
            st = np.array([s for s, _ in self.ownership[a]], dtype=np.int64)
            wd = np.array([e - s for s, e in self.ownership[a]], dtype=np.int64)
            pc = np.searchsorted(st, ijk[:, a], side="right") - 1
            starts.append(st[pc])
            widths.append(wd[pc])
            rank += pc * stride_r
            stride_r *= self.proc_grid[a]
        for a in reversed(range(self.dim)):
            local = local * widths[a] + (ijk[:, a] - starts[a])
        return offsets[rank] + local * self.dof + np.asarray(comp, dtype=np.int64)

    def owned_vertices(self, rank: int) -> np.ndarray:
        """Owned vertex coordinates of ``rank`` in block order, shape ``(m, dim)``."""
        axes = [np.arange(s, e) for s, e in self.box(rank)]
        mesh = np.meshgrid(*reversed(axes), indexing="ij")
        return np.stack([m.ravel() for m in reversed(mesh)], axis=1).astype(np.int64)

    def natural_index(self, ijk: np.ndarray, comp=0) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, self.dim)
        v = np.zeros(len(ijk), dtype=np.int64)
        for a in reversed(range(self.dim)):
            v = v * self.npoints[a] + ijk[:, a]
        return v * self.dof + np.asarray(comp, dtype=np.int64)

    def natural_ordering(self) -> np.ndarray:
        """``nat[g]`` = natural index of global block index ``g`` (a bijection)."""
        out = np.empty(self.n, dtype=np.int64)
        offsets = self._layout.offsets
        for r in range(self.nranks):
            v = self.natural_index(self.owned_vertices(r))
            idx = (v[:, None] + np.arange(self.dof)[None, :]).ravel()
            out[offsets[r]:offsets[r + 1]] = idx
        return out

    def layout(self) -> Layout:
        return self._layout

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "npoints": list(self.npoints),
            "dof": self.dof,
            "stencil_width": self.stencil_width,
            "proc_grid": list(self.proc_grid),
            "ownership": [[list(r) for r in axis] for axis in self.ownership],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridHeader":
        return cls(tuple(d["npoints"]), int(d["dof"]), int(d["stencil_width"]), tuple(d["proc_grid"]),
                   tuple(tuple(tuple(r) for r in axis) for axis in d["ownership"]))


def _make_header(npoints, dof, stencil_width, proc_grid) -> GridHeader:
    for p, n in zip(proc_grid, npoints):
        if p > n:
            raise GridError(f"over-decomposed: axis with {n} vertices cannot host {p} ranks")
    own = tuple(tuple(split_range(n, p)) for n, p in zip(npoints, proc_grid))
    return GridHeader(tuple(int(n) for n in npoints), int(dof), int(stencil_width),
                      tuple(int(p) for p in proc_grid), own)


class StructuredGrid:
    """Rank-local view of a distributed vertex-centred grid.

    Parameters
    ----------
    comm : Communicator
    header : GridHeader
        Global description shared by all ranks.
    coords : ndarray, optional
        Physical coordinates of the owned vertices (block order, shape
        ``(m, dim)``).  ``None`` means the unit cube with uniform spacing.
    """

    def __init__(self, comm: Communicator, header: GridHeader, coords: np.ndarray | None = None):
        if header.nranks != comm.size:
            raise GridError(f"processor grid {header.proc_grid} does not match {comm.size} ranks")
        self.comm = comm
        self.header = header
        self._coords = coords
        self.layout = header.layout()

    # header passthroughs
    dim = property(lambda self: self.header.dim)
    npoints = property(lambda self: self.header.npoints)
    dof = property(lambda self: self.header.dof)
    stencil_width = property(lambda self: self.header.stencil_width)
    proc_grid = property(lambda self: self.header.proc_grid)
    ownership = property(lambda self: self.header.ownership)

    @property
    def n(self) -> int:
        return self.header.n

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / (n - 1) if n > 1 else 1.0 for n in self.npoints)

    @property
    def box(self) -> tuple[tuple[int, int], ...]:
        return self.header.box(self.comm.rank)

    @property
    def box_shape(self) -> tuple[int, ...]:
        return self.header.box_shape(self.comm.rank)

    @property
    def local_range(self) -> tuple[int, int]:
        return self.layout.range(self.comm.rank)

    def owned_vertices(self) -> np.ndarray:
        return self.header.owned_vertices(self.comm.rank)

    def local_coordinates(self) -> np.ndarray:
        if self._coords is not None:
            return self._coords
        return self.owned_vertices() * np.asarray(self.spacing)

    @property
    def has_custom_coordinates(self) -> bool:
        return self._coords is not None

    def set_coordinates(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != (math.prod(self.box_shape), self.dim):
            raise ValueError(f"coordinates must have shape {(math.prod(self.box_shape), self.dim)}")
        self._coords = coords

    def to_json(self) -> str:
        return json.dumps(self.header.to_dict())

    def __repr__(self):
        return (f"StructuredGrid(npoints={self.npoints}, dof={self.dof}, "
                f"proc_grid={self.proc_grid}, rank={self.comm.rank}, box={self.box})")


def create_grid(comm: Communicator, dim: int, npoints, dof: int = 1, stencil_width: int = 1,
                proc_grid_hint=None) -> StructuredGrid:
    npoints = tuple(int(n) for n in np.atleast_1d(npoints))
    if dim not in (1, 2, 3) or len(npoints) != dim:
        raise GridError(f"need {dim} extents for a {dim}-dimensional grid, got {npoints}")
    if min(npoints) < 1 or dof < 1 or stencil_width < 0:
        raise GridError("grid extents and dof must be positive and stencil width nonnegative")
    if proc_grid_hint is not None:
        proc_grid = tuple(int(p) for p in proc_grid_hint)
        if len(proc_grid) != dim or math.prod(proc_grid) != comm.size:
            raise GridError(f"processor grid {proc_grid} does not multiply to {comm.size} ranks")
    else:
        proc_grid = choose_proc_grid(comm.size, npoints)
    return StructuredGrid(comm, _make_header(npoints, dof, stencil_width, proc_grid))


def _coarsen_header(h: GridHeader) -> GridHeader:
    for n in h.npoints:
        if n < 3 or n % 2 == 0:
            raise GridError(f"cannot coarsen: extents {h.npoints} are not all of the form 2M+1 with M>=1")
    own = []
    for axis in h.ownership:
        ranges = tuple((-(-s // 2), -(-e // 2)) for s, e in axis)
        if any(e <= s for s, e in ranges):
            raise GridError(f"cannot coarsen: coarse extents {tuple((n + 1) // 2 for n in h.npoints)} "
                            f"leave a rank of processor grid {h.proc_grid} without vertices")
        own.append(ranges)
    return GridHeader(tuple((n + 1) // 2 for n in h.npoints), h.dof, h.stencil_width, h.proc_grid, tuple(own))


def coarsen(grid: StructuredGrid) -> StructuredGrid:
    """Factor-2 vertex-centred coarsening on the same processor grid."""
    header = _coarsen_header(grid.header)
    coords = None
    if grid.has_custom_coordinates:
        # coarse vertex i is fine vertex 2i, which the same rank owns
        keep = np.all(grid.owned_vertices() % 2 == 0, axis=1)
        coords = grid.local_coordinates()[keep]
    return StructuredGrid(grid.comm, header, coords)


def coarsen_depth(grid: StructuredGrid) -> int:
    """Number of grids obtainable by repeated coarsening (including ``grid``)."""
    depth, h = 1, grid.header
    while True:
        try:
            h = _coarsen_header(h)
        except GridError:
            return depth
        depth += 1


def create_interpolation(coarse: StructuredGrid, fine: StructuredGrid) -> DistMatrix:
    """d-linear interpolation from ``coarse`` to ``fine`` (rows on the fine layout)."""
    if (coarse.dof != fine.dof or coarse.dim != fine.dim
            or any(2 * c - 1 != f for c, f in zip(coarse.npoints, fine.npoints))
            or coarse.comm.cid != fine.comm.cid):
        raise GridError(f"grids {coarse.npoints} and {fine.npoints} are not a coarse/fine pair")
    dof = fine.dof
    verts = fine.owned_vertices()
    m = len(verts)
    # per-axis (coarse index, weight) candidates: two slots, weight 0 when unused
    idx = np.empty((m, fine.dim, 2), dtype=np.int64)
    wts = np.empty((m, fine.dim, 2))
    for a in range(fine.dim):
        v = verts[:, a]
        even = v % 2 == 0
        idx[:, a, 0] = v // 2
        idx[:, a, 1] = np.where(even, v // 2, v // 2 + 1)
        wts[:, a, 0] = np.where(even, 1.0, 0.5)
        wts[:, a, 1] = np.where(even, 0.0, 0.5)
    rows, cols, vals = [], [], []
    lo, _ = fine.local_range
    fine_rows = lo + np.arange(m, dtype=np.int64) * dof
    for choice in itertools.product((0, 1), repeat=fine.dim):
        w = np.ones(m)
        cijk = np.empty((m, fine.dim), dtype=np.int64)
        for a, c in enumerate(choice):
            w = w * wts[:, a, c]
            cijk[:, a] = idx[:, a, c]
        keep = w != 0.0
        base = coarse.header.block_index(cijk[keep])
        for c in range(dof):
            rows.append(fine_rows[keep] + c)
            cols.append(base + c)
            vals.append(w[keep])
    return DistMatrix.from_coo(fine.comm, (fine.n, coarse.n), fine.layout, coarse.layout,
                               np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def _sub_header(grid: StructuredGrid, subcomm: Communicator | None, proc_grid_override):
    comm = grid.comm
    if comm.rank == 0:
        if subcomm is None or not subcomm.is_derived_from(comm):
            raise GridError("repartition target must be a sub-communicator of the grid communicator")
        size = subcomm.size
        if proc_grid_override is not None and all(p is not None for p in proc_grid_override):
            pg = tuple(int(p) for p in proc_grid_override)
            if math.prod(pg) != size:
                status = ("error", f"processor grid override {pg} does not multiply to {size} ranks")
            else:
                status = ("ok", pg)
        elif proc_grid_override is None and size == comm.size:
            status = ("ok", grid.proc_grid)
        else:
            try:
                status = ("ok", choose_proc_grid(size, grid.npoints, proc_grid_override))
            except GridError as exc:
                status = ("error", str(exc))
        if status[0] == "ok":
            try:
                hdr = _make_header(grid.npoints, grid.dof, grid.stencil_width, status[1])
                status = ("ok", hdr, list(subcomm.member_map))
            except GridError as exc:
                status = ("error", str(exc))
    else:
        status = None
    status = comm.bcast(status, 0)
    if status[0] == "error":
        raise GridError(status[1])
    return status[1], status[2]


def repartition_onto(grid: StructuredGrid, subcomm: Communicator | None,
                     proc_grid_override=None) -> StructuredGrid | None:
    """Same global grid, owned by the ranks of ``subcomm``.

    Collective on ``grid.comm``.  Non-members get ``None``.  When no
    override is given and the sub-communicator has as many ranks as the
    parent, the processor grid is kept.  Custom coordinates are gathered to
    parent rank 0 and scattered to the new owners.
    """
    header, member_map = _sub_header(grid, subcomm, proc_grid_override)
    coords = None
    custom = grid.comm.bcast(grid.has_custom_coordinates if grid.comm.rank == 0 else None, 0)
    if custom:
        gathered = grid.comm.gather((grid.header.natural_index(grid.owned_vertices()),
                                     grid.local_coordinates()), 0, tag=_COORD)
        parts = None
        if gathered is not None:
            allc = np.empty((grid.header.nvertices, grid.dim))
            for nat, c in gathered:
                allc[nat] = c
            parts = [allc[header.natural_index(header.owned_vertices(k))] for k in range(header.nranks)]
        if subcomm is not None:
            coords = subcomm.scatterv(parts, 0)
    if subcomm is None:
        return None
    return StructuredGrid(subcomm, header, coords)


def build_permutation(old: StructuredGrid, new: StructuredGrid | None) -> DistMatrix:
    """Permutation P̂ on ``old.comm`` with ``(P̂ᵀ x)`` in the new grid's block order.

    Row ``g_old(v, c)`` holds a single 1 in column ``g_new(v, c)``.  Both row
    and column layouts are the old grid's.  Collective on ``old.comm``.
    """
    comm = old.comm
    hdr = comm.bcast(new.header if (comm.rank == 0 and new is not None) else None, 0)
    if hdr is None:
        raise GridError("parent rank 0 must hold the repartitioned grid")
    if hdr.npoints != old.npoints or hdr.dof != old.dof:
        raise GridError(f"grids differ: {old.npoints}x{old.dof} vs {hdr.npoints}x{hdr.dof}")
    verts = old.owned_vertices()
    base = hdr.block_index(verts)
    cols = (base[:, None] + np.arange(old.dof)[None, :]).ravel()
    lo, hi = old.local_range
    return DistMatrix(comm, (old.n, old.n), old.layout, old.layout,
                      np.arange(hi - lo + 1), cols, np.ones(hi - lo))


def _intersect(b1, b2):
    out = tuple((max(s1, s2), min(e1, e2)) for (s1, e1), (s2, e2) in zip(b1, b2))
    return None if any(e <= s for s, e in out) else out


def ghosted_box(header: GridHeader, rank: int, width: int):
    return tuple((max(s - width, 0), min(e + width, n)) for (s, e), n in zip(header.box(rank), header.npoints))


def local_array_shape(grid: StructuredGrid, width: int | None = None) -> tuple[int, ...]:
    """Shape ``(..., n_k, n_j, n_i, dof)`` of an owned-plus-halo array (halo clipped at the boundary)."""
    w = grid.stencil_width if width is None else width
    gb = ghosted_box(grid.header, grid.comm.rank, w)
    return tuple(e - s for s, e in reversed(gb)) + (grid.dof,)


def _slices(box, frame):
    return tuple(slice(s - f0, e - f0) for (s, e), (f0, _) in zip(reversed(box), reversed(frame)))


def ghost_exchange(grid: StructuredGrid, local: np.ndarray, width: int | None = None) -> np.ndarray:
    """Fill the halo of ``local`` (shape from :func:`local_array_shape`) from the owners.

    The halo is a box stencil (corners included), clipped at the physical
    boundary.  Owned entries are left untouched.  Collective.
    """
    w = grid.stencil_width if width is None else width
    shape = local_array_shape(grid, w)
    if local.shape != shape:
        raise ValueError(f"local array has shape {local.shape}, expected {shape}")
    if w == 0:
        return local
    hdr, me, comm = grid.header, grid.comm.rank, grid.comm
    my_frame = ghosted_box(hdr, me, w)
    my_box = hdr.box(me)
    for q in range(comm.size):
        if q == me:
            continue
        part = _intersect(my_box, ghosted_box(hdr, q, w))
        if part is not None:
            comm.send(q, _GHOST, np.ascontiguousarray(local[_slices(part, my_frame)]))
    for q in range(comm.size):
        if q == me:
            continue
        part = _intersect(hdr.box(q), my_frame)
        if part is not None:
            local[_slices(part, my_frame)] = comm.recv(q, _GHOST)
    return local


def vector_to_local_array(grid: StructuredGrid, values: np.ndarray, width: int | None = None) -> np.ndarray:
    """Embed owned values (block order) in a zero-haloed array, without exchanging."""
    w = grid.stencil_width if width is None else width
    out = np.zeros(local_array_shape(grid, w))
    frame = ghosted_box(grid.header, grid.comm.rank, w)
    owned_shape = tuple(reversed(grid.box_shape)) + (grid.dof,)
    out[_slices(grid.box, frame)] = np.asarray(values).reshape(owned_shape)
    return out


def local_array_to_vector(grid: StructuredGrid, local: np.ndarray, width: int | None = None) -> np.ndarray:
    w = grid.stencil_width if width is None else width
    frame = ghosted_box(grid.header, grid.comm.rank, w)
    return np.ascontiguousarray(local[_slices(grid.box, frame)]).ravel()
