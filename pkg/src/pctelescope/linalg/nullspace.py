"""Null spaces attached to operators and removed from iterates."""
from __future__ import annotations

import math
from typing import Callable, Sequence


from .vector import DistVector, dot, reproducible_sum


class NullSpace:
    """Span of an optional constant vector plus explicit basis vectors.

    The explicit vectors are orthonormalised (modified Gram-Schmidt) on
    construction unless ``orthonormalize=False``.  An optional ``remover``
    callback is applied after the projections.
    """

    def __init__(self, has_constant: bool = False, vectors: Sequence[DistVector] = (),
                 remover: Callable[[DistVector], None] | None = None, orthonormalize: bool = True):
        self.has_constant = bool(has_constant)
        self.remover = remover
        basis: list[DistVector] = []
        for v in vectors:
            w = v.copy()
            if orthonormalize:
                if self.has_constant:
                    _remove_mean(w)
                for q in basis:
                    w.axpy(-dot(q, w), q)
                nrm = math.sqrt(dot(w, w))
                if nrm == 0.0:
                    raise ValueError("null space vectors are linearly dependent")
                w.scale(1.0 / nrm)
            basis.append(w)
        self.vectors = basis

    @property
    def dim(self) -> int:
        return len(self.vectors) + int(self.has_constant)

    def remove(self, x: DistVector) -> DistVector:
        """Project ``x`` onto the orthogonal complement, in place."""
        if self.has_constant:
            _remove_mean(x)
        for q in self.vectors:
            x.axpy(-dot(q, x), q)
        if self.remover is not None:
            self.remover(x)
        return x

    def test(self, A, tol: float = 1e-10) -> bool:
        """True if every basis vector satisfies ``|A v| <= tol |v|``."""
        checks = list(self.vectors)
        if self.has_constant:
            c = checks[0].duplicate() if checks else A.create_vector(rows=False)
            c.set(1.0)
            checks.append(c)
        for v in checks:
            if A.mult(v).norm() > tol * max(v.norm(), 1.0):
                return False
        return True


def _remove_mean(x: DistVector):
    x.values -= reproducible_sum(x.comm, x.values) / x.global_size


def attach_nullspace(A, ns: NullSpace | None):
    A.nullspace = ns
    return A


def remove_component(ns: NullSpace | None, x: DistVector) -> DistVector:
    return x if ns is None else ns.remove(x)


def propagate_nullspace(ns: NullSpace | None, move: Callable[[DistVector], DistVector | None]):
    """Carry a null space through a vector map (e.g. a permutation and scatter).

    ``move`` is collective and returns ``None`` on ranks outside the target
    communicator; those ranks also get ``None`` back.  The ``remover``
    callback is carried over unchanged, so it must accept vectors of either
    layout.
    """
    if ns is None:
        return None
    moved = [move(v) for v in ns.vectors]
    if moved and moved[0] is None:
        return None
    out = NullSpace(ns.has_constant, [], ns.remover, orthonormalize=False)
    out.vectors = moved
    return out
