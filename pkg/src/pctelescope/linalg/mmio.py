"""Matrix Market and plain-text vector I/O."""
from __future__ import annotations

import numpy as np
import scipy.io
import scipy.sparse as sp


def write_matrix(path, A) -> None:
    """Write a global sparse or dense matrix (or a DistMatrix, gathered) in Matrix Market form."""
    if hasattr(A, "gather"):
        A = A.gather()
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), precision=17)


def read_matrix(path) -> sp.csr_matrix:
    A = sp.csr_matrix(scipy.io.mmread(str(path)))
    A.sort_indices()
    return A


def write_vector(path, x) -> None:
    """One value per line, full precision."""
    if hasattr(x, "gather"):
        x = x.gather()
    np.savetxt(str(path), np.asarray(x, dtype=np.float64), fmt="%.17g")


def read_vector(path) -> np.ndarray:
    return np.atleast_1d(np.loadtxt(str(path), dtype=np.float64))
