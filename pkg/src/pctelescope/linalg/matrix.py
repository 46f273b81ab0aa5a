"""Row-block partitioned CSR matrices.

Column indices are stored as *global* indices, sorted within each row.
Because every row is reduced in ascending column order, products are
independent of how the rows are partitioned over ranks.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .. import kernels
from ..comm import Communicator
from .vector import DistVector, Layout

_SPMV = ("spmv",)
_FETCH = ("fetch",)
_TRANSPOSE = ("transpose",)
_REDIST = ("redist",)


def _coo_to_csr(nrows: int, rows, cols, vals):
    """Sorted CSR (duplicates summed in input order) from local COO arrays."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows):
        new = np.ones(len(rows), dtype=bool)
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new)
        vals = np.add.reduceat(vals, starts) if len(starts) != len(vals) else vals
        rows, cols = rows[starts], cols[starts]
    indptr = np.zeros(nrows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols, vals


class DistMatrix:
    """The rows ``row_layout.range(rank)`` of a global ``n x m`` sparse matrix."""

    def __init__(self, comm: Communicator, shape, row_layout: Layout, col_layout: Layout,
                 indptr, indices, data):
        n, m = int(shape[0]), int(shape[1])
        if row_layout.n != n or col_layout.n != m:
            raise ValueError(f"layouts {row_layout.n}x{col_layout.n} do not match shape {n}x{m}")
        if row_layout.nparts != comm.size or col_layout.nparts != comm.size:
            raise ValueError("layout part count differs from communicator size")
        lo, hi = row_layout.range(comm.rank)
        indptr = np.asarray(indptr, dtype=np.int64)
        if len(indptr) != hi - lo + 1:
            raise ValueError(f"indptr has {len(indptr) - 1} rows, layout owns {hi - lo}")
        self.comm = comm
        self.shape = (n, m)
        self.row_layout = row_layout
        self.col_layout = col_layout
        self.indptr = indptr
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= m):
            raise ValueError("column index out of range")
        self.nullspace = None
        self._plan = None

    # ------------------------------------------------------------ builders
    @classmethod
    def from_coo(cls, comm, shape, row_layout, col_layout, rows, cols, vals) -> "DistMatrix":
        """Build from locally owned global (row, col, value) triplets."""
        lo, hi = row_layout.range(comm.rank)
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) and (rows.min() < lo or rows.max() >= hi):
            raise ValueError("triplet row not owned by this rank")
        indptr, indices, data = _coo_to_csr(hi - lo, rows - lo, cols, vals)
        return cls(comm, shape, row_layout, col_layout, indptr, indices, data)

    @classmethod
    def from_global(cls, comm, matrix, row_layout=None, col_layout=None) -> "DistMatrix":
        """Slice a global (dense or scipy) matrix known on every rank."""
        csr = sp.csr_matrix(matrix)
        csr.sort_indices()
        n, m = csr.shape
        row_layout = row_layout or Layout.uniform(n, comm.size)
        col_layout = col_layout or (row_layout if n == m else Layout.uniform(m, comm.size))
        lo, hi = row_layout.range(comm.rank)
        blk = csr[lo:hi]
        blk.sort_indices()
        return cls(comm, (n, m), row_layout, col_layout, blk.indptr, blk.indices, blk.data)

    @classmethod
    def identity(cls, comm, layout: Layout) -> "DistMatrix":
        lo, hi = layout.range(comm.rank)
        return cls(comm, (layout.n, layout.n), layout, layout, np.arange(hi - lo + 1),
                   np.arange(lo, hi), np.ones(hi - lo))

    # ------------------------------------------------------------ accessors
    @property
    def local_range(self) -> tuple[int, int]:
        return self.row_layout.range(self.comm.rank)

    @property
    def nlocal(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz_local(self) -> int:
        return len(self.data)

    def local_csr(self) -> sp.csr_matrix:
        """Owned rows with global column indices."""
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.nlocal, self.shape[1]))

    def local_triplets(self):
        lo, _ = self.local_range
        rows = np.repeat(np.arange(self.nlocal, dtype=np.int64), np.diff(self.indptr)) + lo
        return rows, self.indices.copy(), self.data.copy()

    def diagonal(self) -> np.ndarray:
        lo, _ = self.local_range
        return kernels.csr_diagonal(self.indptr, self.indices, self.data, lo)

    def local_block(self) -> sp.csr_matrix:
        """Diagonal block: owned rows and owned columns, local numbering."""
        clo, chi = self.col_layout.range(self.comm.rank)
        keep = (self.indices >= clo) & (self.indices < chi)
        rows = np.repeat(np.arange(self.nlocal), np.diff(self.indptr))[keep]
        blk = sp.csr_matrix((self.data[keep], (rows, self.indices[keep] - clo)),
                            shape=(self.nlocal, chi - clo))
        blk.sort_indices()
        return blk

    def create_vector(self, rows: bool = True) -> DistVector:
        return DistVector(self.comm, self.row_layout if rows else self.col_layout)

    def gather(self) -> sp.csr_matrix:
        """The full global matrix on every rank (for oracles and serial solves)."""
        parts = self.comm.allgather((self.indptr, self.indices, self.data))
        indptr = [np.zeros(1, dtype=np.int64)]
        base = 0
        for ip, _, _ in parts:
            indptr.append(ip[1:] + base)
            base += ip[-1]
        A = sp.csr_matrix((np.concatenate([p[2] for p in parts]),
                           np.concatenate([p[1] for p in parts]),
                           np.concatenate(indptr)), shape=self.shape)
        return A

    def gather_dense(self) -> np.ndarray:
        return self.gather().toarray()

    def __repr__(self):
        return f"DistMatrix({self.shape[0]}x{self.shape[1]}, rows={self.local_range}, nnz_local={self.nnz_local})"

    # ----------------------------------------------------------------- spmv
    def _halo_plan(self):
        if self._plan is None:
            comm = self.comm
            clo, chi = self.col_layout.range(comm.rank)
            ext = np.unique(self.indices)
            remote = ext[(ext < clo) | (ext >= chi)]
            owners = self.col_layout.owner(remote)
            need = [remote[owners == r] for r in range(comm.size)]
            asked = comm.alltoall(need, tag=("spmvplan",))
            send_idx = {r: asked[r] - clo for r in range(comm.size) if r != comm.rank and len(asked[r])}
            recv_pos = {r: np.searchsorted(ext, need[r]) for r in range(comm.size)
                        if r != comm.rank and len(need[r])}
            own_mask = (ext >= clo) & (ext < chi)
            self._plan = (ext, np.flatnonzero(own_mask), ext[own_mask] - clo, send_idx, recv_pos,
                          np.searchsorted(ext, self.indices))
        return self._plan

    def mult(self, x: DistVector, y: DistVector | None = None) -> DistVector:
        if x.layout != self.col_layout or x.comm.cid != self.comm.cid:
            raise ValueError(f"spmv: vector layout does not conform to {self.shape[0]}x{self.shape[1]} matrix")
        ext, own_pos, own_src, send_idx, recv_pos, local_cols = self._halo_plan()
        comm = self.comm
        for r, idx in send_idx.items():
            comm.send(r, _SPMV, x.values[idx])
        xe = np.empty(len(ext))
        xe[own_pos] = x.values[own_src]
        for r, pos in recv_pos.items():
            xe[pos] = comm.recv(r, _SPMV)
        out = kernels.csr_matvec(self.indptr, local_cols, self.data, xe)
        if y is None:
            return DistVector(comm, self.row_layout, out)
        y.values[:] = out
        return y

    # --------------------------------------------------------- collectives
    def transpose(self) -> "DistMatrix":
        comm = self.comm
        rows, cols, vals = self.local_triplets()
        owners = self.col_layout.owner(cols)
        parts = [(cols[owners == r], rows[owners == r], vals[owners == r]) for r in range(comm.size)]
        got = comm.alltoall(parts, tag=_TRANSPOSE)
        r_ = np.concatenate([g[0] for g in got])
        c_ = np.concatenate([g[1] for g in got])
        v_ = np.concatenate([g[2] for g in got])
        return DistMatrix.from_coo(comm, (self.shape[1], self.shape[0]), self.col_layout,
                                   self.row_layout, r_, c_, v_)

    def fetch_rows(self, global_rows) -> sp.csr_matrix:
        """Rows ``global_rows`` (any owner) as a local CSR with global columns.

        Collective: every rank must call, possibly with an empty request.
        """
        comm = self.comm
        global_rows = np.asarray(global_rows, dtype=np.int64)
        owners = self.row_layout.owner(global_rows)
        req = [global_rows[owners == r] for r in range(comm.size)]
        asked = comm.alltoall(req, tag=_FETCH)
        lo, _ = self.local_range
        replies = []
        for r in range(comm.size):
            idx = asked[r] - lo
            starts, ends = self.indptr[idx], self.indptr[idx + 1]
            counts = ends - starts
            take = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)]) if len(idx) else np.empty(0, np.int64)
            replies.append((counts, self.indices[take], self.data[take]))
        got = comm.alltoall(replies, tag=_FETCH)
        # reassemble in request order
        counts = np.zeros(len(global_rows), dtype=np.int64)
        chunks_i: list = [None] * len(global_rows)
        chunks_v: list = [None] * len(global_rows)
        for r in range(comm.size):
            pos = np.flatnonzero(owners == r)
            cnt, ind, dat = got[r]
            off = np.concatenate([[0], np.cumsum(cnt)])
            for t, p in enumerate(pos):
                chunks_i[p] = ind[off[t]:off[t + 1]]
                chunks_v[p] = dat[off[t]:off[t + 1]]
                counts[p] = cnt[t]
        indptr = np.concatenate([[0], np.cumsum(counts)])
        ind = np.concatenate(chunks_i) if len(global_rows) else np.empty(0, np.int64)
        dat = np.concatenate(chunks_v) if len(global_rows) else np.empty(0)
        return sp.csr_matrix((dat, ind, indptr), shape=(len(global_rows), self.shape[1]))


def spmv(A: DistMatrix, x: DistVector) -> DistVector:
    return A.mult(x)


def matmat(A: DistMatrix, B: DistMatrix) -> DistMatrix:
    """C = A B with C's rows laid out like A's and columns like B's."""
    if A.shape[1] != B.shape[0] or A.col_layout != B.row_layout:
        raise ValueError(f"matmat: shapes {A.shape} and {B.shape} do not conform")
    need = np.unique(A.indices)
    Bf = B.fetch_rows(need)
    Aloc = sp.csr_matrix((A.data, np.searchsorted(need, A.indices), A.indptr),
                         shape=(A.nlocal, len(need)))
    C = Aloc @ Bf
    C = sp.csr_matrix(C)
    C.sort_indices()
    return DistMatrix(A.comm, (A.shape[0], B.shape[1]), A.row_layout, B.col_layout,
                      C.indptr, C.indices, C.data)


def ptap(P: DistMatrix, A: DistMatrix) -> DistMatrix:
    """Explicit triple product P^T A P, rows laid out like P's columns."""
    if A.shape[0] != A.shape[1] or P.shape[0] != A.shape[0]:
        raise ValueError(f"ptap: P {P.shape} does not conform with A {A.shape}")
    if A.row_layout != P.row_layout or A.col_layout != P.row_layout:
        raise ValueError("ptap: P rows must be laid out like A")
    AP = matmat(A, P)
    return matmat(P.transpose(), AP)


def fused_layout(parent_layout: Layout, member_map, n_parent: int) -> Layout:
    """Row-fusion layout: member k takes the rows of parent ranks member_map[k]..member_map[k+1]-1."""
    bounds = list(member_map) + [n_parent]
    return Layout([int(parent_layout.offsets[b]) for b in bounds])


def _sub_description(parent: Communicator, subcomm: Communicator | None, proposal):
    """Broadcast (member_map, target offsets) from parent rank 0, always a member."""
    if parent.rank == 0:
        if subcomm is None:
            raise ValueError("parent rank 0 must be a member of the sub-communicator")
        if not subcomm.is_derived_from(parent) or subcomm.member_map is None:
            raise ValueError("sub-communicator is not derived from the matrix communicator")
        info = (list(subcomm.member_map), None if proposal is None else proposal.offsets)
    else:
        info = None
    return parent.bcast(info, 0)


def redistribute_rows(A: DistMatrix, subcomm: Communicator | None,
                      target_layout: Layout | None = None) -> DistMatrix | None:
    """Move A onto a strided sub-communicator by contiguous row fusion.

    By default member ``k`` receives the rows of parent ranks
    ``member_map[k] .. member_map[k+1]-1`` (the last member also takes the
    remainder).  A square matrix may instead be given an explicit
    ``target_layout`` on the sub-communicator.  Collective on ``A.comm``;
    non-members get ``None``.
    """
    parent = A.comm
    if subcomm is not None and not subcomm.is_derived_from(parent):
        raise ValueError("sub-communicator is not derived from the matrix communicator")
    member_map, tgt = _sub_description(parent, subcomm, target_layout)
    if tgt is None:
        row_t = fused_layout(A.row_layout, member_map, parent.size)
        col_t = fused_layout(A.col_layout, member_map, parent.size)
    else:
        if A.shape[0] != A.shape[1]:
            raise ValueError("explicit target layouts are supported for square matrices only")
        row_t = col_t = Layout(tgt)
        if row_t.n != A.shape[0]:
            raise ValueError("target layout size does not match the matrix")

    # phase (i): intermediate sequential row blocks on every parent rank
    lo, hi = A.local_range
    t_owner_lo = row_t.owner(lo) if hi > lo else 0
    sends = []
    if hi > lo:
        for k in range(int(t_owner_lo), row_t.nparts):
            a, b = row_t.range(k)
            s, e = max(a, lo), min(b, hi)
            if s >= e:
                if a >= hi:
                    break
                continue
            p0, p1 = A.indptr[s - lo], A.indptr[e - lo]
            sends.append((k, s, A.indptr[s - lo:e - lo + 1] - p0, A.indices[p0:p1], A.data[p0:p1]))
    my_k = subcomm.rank if subcomm is not None else None
    local_piece = None
    for k, s, ip, ind, dat in sends:
        if k == my_k:
            local_piece = (s, ip, ind, dat)
        else:
            parent.send(member_map[k], _REDIST, (s, ip, ind, dat))
    if subcomm is None:
        return None
    a, b = row_t.range(my_k)
    pieces = []
    src_lo = int(A.row_layout.owner(a)) if b > a else parent.size
    src_hi = int(A.row_layout.owner(b - 1)) if b > a else -1
    for src in range(src_lo, src_hi + 1):
        s0, s1 = A.row_layout.range(src)
        if max(s0, a) >= min(s1, b):
            continue
        if src == parent.rank:
            pieces.append(local_piece)
        else:
            pieces.append(parent.recv(src, _REDIST))
    pieces.sort(key=lambda p: p[0])
    indptr = [np.zeros(1, dtype=np.int64)]
    base = 0
    for s, ip, _, _ in pieces:
        indptr.append(ip[1:] + base)
        base += ip[-1]
    inter_indptr = np.concatenate(indptr)
    inter_ind = np.concatenate([p[2] for p in pieces]) if pieces else np.empty(0, np.int64)
    inter_dat = np.concatenate([p[3] for p in pieces]) if pieces else np.empty(0)
    if len(inter_indptr) - 1 != b - a:
        raise RuntimeError("row fusion lost rows")
    # phase (ii): assemble on the sub-communicator
    return DistMatrix(subcomm, A.shape, row_t, col_t, inter_indptr, inter_ind, inter_dat)
