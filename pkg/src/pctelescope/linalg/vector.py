"""Row-block layouts and distributed vectors."""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..comm import Communicator


class Layout:
    """Contiguous, rank-ordered ownership of ``[0, n)``.

    ``offsets[k]:offsets[k+1]`` is the range owned by rank ``k``.
    """

    __slots__ = ("offsets",)

    def __init__(self, offsets):
        off = np.asarray(offsets, dtype=np.int64)
        if off.ndim != 1 or len(off) < 2 or off[0] != 0 or np.any(np.diff(off) < 0):
            raise ValueError(f"invalid layout offsets {offsets!r}")
        self.offsets = off

    @classmethod
    def from_sizes(cls, sizes) -> "Layout":
        return cls(np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))]))

    @classmethod
    def from_local_size(cls, comm: Communicator, nlocal: int) -> "Layout":
        return cls.from_sizes(comm.allgather(int(nlocal)))

    @classmethod
    def uniform(cls, n: int, nparts: int) -> "Layout":
        base, extra = divmod(n, nparts)
        return cls.from_sizes([base + (1 if k < extra else 0) for k in range(nparts)])

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    @property
    def nparts(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def range(self, rank: int) -> tuple[int, int]:
        return int(self.offsets[rank]), int(self.offsets[rank + 1])

    def owner(self, idx):
        """Owning rank of each global index."""
        return np.searchsorted(self.offsets, idx, side="right") - 1

    def __eq__(self, other):
        return isinstance(other, Layout) and np.array_equal(self.offsets, other.offsets)

    def __hash__(self):
        return hash(self.offsets.tobytes())

    def __repr__(self):
        return f"Layout({self.offsets.tolist()})"


class DistVector:
    """Conforming slice of a global vector owned by one rank."""

    __slots__ = ("comm", "layout", "values")

    def __init__(self, comm: Communicator, layout: Layout, values=None):
        if layout.nparts != comm.size:
            raise ValueError(f"layout has {layout.nparts} parts for a communicator of size {comm.size}")
        lo, hi = layout.range(comm.rank)
        if values is None:
            values = np.zeros(hi - lo)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (hi - lo,):
                raise ValueError(f"local values have shape {values.shape}, layout expects {(hi - lo,)}")
        self.comm = comm
        self.layout = layout
        self.values = values

    @classmethod
    def from_global(cls, comm: Communicator, layout: Layout, array) -> "DistVector":
        lo, hi = layout.range(comm.rank)
        return cls(comm, layout, np.array(array[lo:hi], dtype=np.float64))

    @property
    def global_size(self) -> int:
        return self.layout.n

    @property
    def local_range(self) -> tuple[int, int]:
        return self.layout.range(self.comm.rank)

    def duplicate(self) -> "DistVector":
        return DistVector(self.comm, self.layout)

    def copy(self) -> "DistVector":
        return DistVector(self.comm, self.layout, self.values.copy())

    def _check(self, other: "DistVector"):
        if other.comm.cid != self.comm.cid or other.layout != self.layout:
            raise ValueError("vector layouts do not conform")

    # in-place updates -----------------------------------------------------
    def set(self, alpha: float) -> "DistVector":
        self.values[:] = alpha
        return self

    def scale(self, alpha: float) -> "DistVector":
        self.values *= alpha
        return self

    def assign(self, x: "DistVector") -> "DistVector":
        self._check(x)
        self.values[:] = x.values
        return self

    def axpy(self, alpha: float, x: "DistVector") -> "DistVector":
        """self += alpha * x"""
        self._check(x)
        self.values += alpha * x.values
        return self

    def aypx(self, alpha: float, x: "DistVector") -> "DistVector":
        """self = x + alpha * self"""
        self._check(x)
        self.values *= alpha
        self.values += x.values
        return self

    # reductions -----------------------------------------------------------
    def dot(self, y: "DistVector") -> float:
        return dot(self, y)

    def norm(self) -> float:
        return norm2(self)

    def gather(self) -> np.ndarray:
        """Full global vector on every rank."""
        return np.concatenate(self.comm.allgather(self.values))

    def __repr__(self):
        return f"DistVector(n={self.global_size}, local={self.local_range})"


def reproducible_sum(comm: Communicator, local_terms) -> float:
    """Correctly rounded global sum of every rank's terms.

    Each rank reduces its terms to an exact non-overlapping expansion; the
    expansions are combined and rounded once, so the result does not depend
    on how the terms are partitioned across ranks.
    """
    partials = kernels.exact_partials(np.asarray(local_terms, dtype=np.float64))
    if comm.size == 1:
        return math.fsum(partials.tolist()) if np.all(np.isfinite(partials)) else float(np.sum(partials))
    allp = np.concatenate(comm.allgather(partials))
    if not np.all(np.isfinite(allp)):
        return float(np.sum(allp))
    return math.fsum(allp.tolist())


def dot(x: DistVector, y: DistVector) -> float:
    x._check(y)
    return reproducible_sum(x.comm, x.values * y.values)


def norm2(x: DistVector) -> float:
    return math.sqrt(dot(x, x))


def axpy(alpha: float, x: DistVector, y: DistVector) -> DistVector:
    return y.axpy(alpha, x)


def scale(x: DistVector, alpha: float) -> DistVector:
    return x.scale(alpha)


def copy(x: DistVector) -> DistVector:
    return x.copy()
