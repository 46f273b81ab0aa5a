"""Distributed sparse linear algebra on simulated ranks."""
from .matrix import DistMatrix, fused_layout, matmat, ptap, redistribute_rows, spmv
from .nullspace import NullSpace, attach_nullspace, propagate_nullspace, remove_component
from .scatter import ScatterPlan, scatter_from_sub, scatter_to_sub
from .vector import DistVector, Layout, axpy, copy, dot, norm2, reproducible_sum, scale

__all__ = [
    "DistMatrix", "DistVector", "Layout", "NullSpace", "ScatterPlan",
    "attach_nullspace", "axpy", "copy", "dot", "fused_layout", "matmat", "norm2",
    "propagate_nullspace", "ptap", "redistribute_rows", "remove_component",
    "reproducible_sum", "scale", "scatter_from_sub", "scatter_to_sub", "spmv",
]
