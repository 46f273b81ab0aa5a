"""Hot inner loops: CSR products, ILU(0), exact summation partials.

Each kernel has a numba implementation and a numpy/scipy implementation
with the same signature.  The numba path is used unless numba is missing or
``PCTELESCOPE_NUMBA=0`` is set in the environment before import.  Both
implementations are importable as :data:`numba_impl` and :data:`numpy_impl`
for benchmarking (see ``benchmarks/bench_kernels.py``).
"""
from __future__ import annotations

import os
import types

import numpy as np
import scipy.sparse as sp

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("PCTELESCOPE_NUMBA", "1").lower() not in ("0", "false", "no")


class ZeroPivotError(ArithmeticError):
    def __init__(self, row: int):
        self.row = int(row)
        super().__init__(f"zero pivot in row {self.row}")


# --------------------------------------------------------------------------
# numpy / scipy implementations

def _np_csr_matvec(indptr, indices, data, x):
    n = len(indptr) - 1
    A = sp.csr_matrix((data, indices, indptr), shape=(n, len(x)))
    return A @ x


def _np_csr_diagonal(indptr, indices, data, row_offset):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    hit = indices == rows + row_offset
    d = np.zeros(n)
    d[rows[hit]] = data[hit]
    return d


def _np_diag_pointer(indptr, indices):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    hit = np.flatnonzero(indices == rows)
    ptr = np.full(n, -1, dtype=np.int64)
    ptr[rows[hit]] = hit
    return ptr


def _np_ilu0_factor(indptr, indices, data):
    n = len(indptr) - 1
    lu = data.astype(np.float64).copy()
    diag = _np_diag_pointer(indptr, indices)
    if n and diag.min() < 0:
        raise ZeroPivotError(int(np.flatnonzero(diag < 0)[0]))
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        cols = indices[start:end]
        pos = {int(c): start + t for t, c in enumerate(cols)}
        for kk in range(start, diag[i]):
            k = indices[kk]
            piv = lu[diag[k]]
            if piv == 0.0:
                raise ZeroPivotError(k)
            lu[kk] /= piv
            lik = lu[kk]
            for jj in range(diag[k] + 1, indptr[k + 1]):
                p = pos.get(int(indices[jj]))
                if p is not None:
                    lu[p] -= lik * lu[jj]
        if lu[diag[i]] == 0.0:
            raise ZeroPivotError(i)
    return lu, diag


def _np_ilu0_solve(indptr, indices, lu, diag, b):
    n = len(indptr) - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    lower = indices < rows
    upper = indices >= rows
    L = sp.csr_matrix((lu[lower], indices[lower], np.r_[0, np.cumsum(np.bincount(rows[lower], minlength=n))]),
                      shape=(n, n)) + sp.identity(n, format="csr")
    U = sp.csr_matrix((lu[upper], indices[upper], np.r_[0, np.cumsum(np.bincount(rows[upper], minlength=n))]),
                      shape=(n, n))
    from scipy.sparse.linalg import spsolve_triangular
    y = spsolve_triangular(L.tocsr(), b, lower=True, unit_diagonal=True)
    return spsolve_triangular(U.tocsr(), y, lower=False)


def _np_exact_partials(values):
    # the values themselves already form an exact (uncompressed) expansion
    return np.asarray(values, dtype=np.float64)


numpy_impl = types.SimpleNamespace(
    name="numpy",
    csr_matvec=_np_csr_matvec,
    csr_diagonal=_np_csr_diagonal,
    ilu0_factor=_np_ilu0_factor,
    ilu0_solve=_np_ilu0_solve,
    exact_partials=_np_exact_partials,
)


# --------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _nb_csr_matvec_into(indptr, indices, data, x, y):
        n = indptr.shape[0] - 1
        for i in range(n):
            s = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                s += data[jj] * x[indices[jj]]
            y[i] = s

    def _nb_csr_matvec(indptr, indices, data, x):
        y = np.empty(len(indptr) - 1)
        _nb_csr_matvec_into(indptr, indices, data, x, y)
        return y

    @njit(cache=True, nogil=True)
    def _nb_csr_diagonal(indptr, indices, data, row_offset):
        n = indptr.shape[0] - 1
        d = np.zeros(n)
        for i in range(n):
            for jj in range(indptr[i], indptr[i + 1]):
                if indices[jj] == i + row_offset:
                    d[i] = data[jj]
        return d

    @njit(cache=True, nogil=True)
    def _nb_ilu0_kernel(indptr, indices, lu, diag, work):
        # returns -1 on success, else the row with a zero pivot
        n = indptr.shape[0] - 1
        for i in range(n):
            diag[i] = -1
            for jj in range(indptr[i], indptr[i + 1]):
                if indices[jj] == i:
                    diag[i] = jj
            if diag[i] < 0:
                return i
        for i in range(n):
            start = indptr[i]
            end = indptr[i + 1]
            for jj in range(start, end):
                work[indices[jj]] = jj
            for kk in range(start, diag[i]):
                k = indices[kk]
                piv = lu[diag[k]]
                if piv == 0.0:
                    return k
                lu[kk] /= piv
                lik = lu[kk]
                for jj in range(diag[k] + 1, indptr[k + 1]):
                    p = work[indices[jj]]
                    if p >= 0:
                        lu[p] -= lik * lu[jj]
            for jj in range(start, end):
                work[indices[jj]] = -1
            if lu[diag[i]] == 0.0:
                return i
        return -1

    def _nb_ilu0_factor(indptr, indices, data):
        n = len(indptr) - 1
        lu = data.astype(np.float64).copy()
        diag = np.empty(n, dtype=np.int64)
        work = np.full(max(n, 1), -1, dtype=np.int64)
        bad = _nb_ilu0_kernel(indptr, indices, lu, diag, work)
        if bad >= 0:
            raise ZeroPivotError(bad)
        return lu, diag

    @njit(cache=True, nogil=True)
    def _nb_ilu0_solve(indptr, indices, lu, diag, b):
        n = indptr.shape[0] - 1
        x = np.empty(n)
        for i in range(n):
            s = b[i]
            for jj in range(indptr[i], diag[i]):
                s -= lu[jj] * x[indices[jj]]
            x[i] = s
        for i in range(n - 1, -1, -1):
            s = x[i]
            for jj in range(diag[i] + 1, indptr[i + 1]):
                s -= lu[jj] * x[indices[jj]]
            x[i] = s / lu[diag[i]]
        return x

    @njit(cache=True, nogil=True)
    def _nb_exact_partials(values):
        # Shewchuk's non-overlapping expansion; exact for finite input
        buf = np.empty(values.shape[0] + 1)
        m = 0
        for t in range(values.shape[0]):
            x = values[t]
            i = 0
            for j in range(m):
                y = buf[j]
                if abs(x) < abs(y):
                    x, y = y, x
                hi = x + y
                lo = y - (hi - x)
                if lo != 0.0:
                    buf[i] = lo
                    i += 1
                x = hi
            buf[i] = x
            m = i + 1
        return buf[:m].copy()

    def _nb_exact_partials_checked(values):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            return values
        return _nb_exact_partials(values)

    numba_impl = types.SimpleNamespace(
        name="numba",
        csr_matvec=_nb_csr_matvec,
        csr_diagonal=_nb_csr_diagonal,
        ilu0_factor=_nb_ilu0_factor,
        ilu0_solve=_nb_ilu0_solve,
        exact_partials=_nb_exact_partials_checked,
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl

csr_matvec = active.csr_matvec
csr_diagonal = active.csr_diagonal
ilu0_factor = active.ilu0_factor
ilu0_solve = active.ilu0_solve
exact_partials = active.exact_partials
