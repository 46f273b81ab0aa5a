"""Vector transfer between a communicator and a strided sub-communicator."""
from __future__ import annotations

import numpy as np

from ..comm import Communicator
from .vector import DistVector, Layout

_TO = ("scatter",)
_FROM = ("scatter",)


class ScatterPlan:
    """Move vectors between ``src_layout`` on ``parent`` and ``dst_layout`` on ``sub``.

    Both layouts number the same global entries, so a transfer is a pure
    repartitioning of contiguous index ranges.  Built collectively on
    ``parent``; ranks outside ``sub`` pass ``sub=None`` and ``dst_layout=None``.
    """

    def __init__(self, parent: Communicator, src_layout: Layout, sub: Communicator | None,
                 dst_layout: Layout | None):
        if parent.rank == 0:
            if sub is None or dst_layout is None:
                raise ValueError("parent rank 0 must be a member of the sub-communicator")
            info = (list(sub.member_map), dst_layout.offsets)
        else:
            info = None
        member_map, offsets = parent.bcast(info, 0)
        dst = Layout(offsets)
        if dst.n != src_layout.n:
            raise ValueError(f"scatter between sizes {src_layout.n} and {dst.n}")
        self.parent = parent
        self.sub = sub
        self.src_layout = src_layout
        self.dst_layout = dst
        self.member_map = member_map
        lo, hi = src_layout.range(parent.rank)
        # (sub rank, local src slice) pieces this rank owns in the source layout
        self._outgoing = []
        for k in range(dst.nparts):
            a, b = dst.range(k)
            s, e = max(a, lo), min(b, hi)
            if s < e:
                self._outgoing.append((k, s - lo, e - lo, s - a))
        self._incoming = []
        if sub is not None:
            a, b = dst.range(sub.rank)
            for src in range(parent.size):
                s0, s1 = src_layout.range(src)
                s, e = max(a, s0), min(b, s1)
                if s < e:
                    self._incoming.append((src, s - a, e - a, s - s0))

    def to_sub(self, x: DistVector) -> DistVector | None:
        if x.layout != self.src_layout:
            raise ValueError("vector does not conform to the scatter source layout")
        me = self.parent.rank
        keep = {}
        for k, s, e, _ in self._outgoing:
            if self.member_map[k] == me:
                keep[k] = x.values[s:e]
            else:
                self.parent.send(self.member_map[k], _TO, x.values[s:e])
        if self.sub is None:
            return None
        out = np.empty(self.dst_layout.sizes[self.sub.rank])
        for src, s, e, _ in self._incoming:
            out[s:e] = keep[self.sub.rank] if src == me else self.parent.recv(src, _TO)
        return DistVector(self.sub, self.dst_layout, out)

    def from_sub(self, y: DistVector | None, out: DistVector | None = None) -> DistVector:
        me = self.parent.rank
        keep = {}
        if self.sub is not None:
            if y is None or y.layout != self.dst_layout:
                raise ValueError("vector does not conform to the scatter destination layout")
            for src, s, e, _ in self._incoming:
                if src == me:
                    keep[src] = y.values[s:e]
                else:
                    self.parent.send(src, _FROM, y.values[s:e])
        if out is None:
            out = DistVector(self.parent, self.src_layout)
        for k, s, e, _ in self._outgoing:
            out.values[s:e] = keep[me] if self.member_map[k] == me else self.parent.recv(self.member_map[k], _FROM)
        return out


def scatter_to_sub(plan: ScatterPlan, x: DistVector) -> DistVector | None:
    return plan.to_sub(x)


def scatter_from_sub(plan: ScatterPlan, y: DistVector | None) -> DistVector:
    return plan.from_sub(y)
