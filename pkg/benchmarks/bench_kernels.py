"""Compare the numba kernels against the numpy/scipy fallback.

Run ``python benchmarks/bench_kernels.py [N]``.  The operator is the 3D
7-point Laplacian on an N^3 vertex grid (default 33).  Each kernel is timed
as the best of several repeats after a warm-up call (which also triggers
numba compilation), and outputs of both back ends are checked for agreement.
"""
from __future__ import annotations

import math
import sys
import timeit

import numpy as np

from pctelescope import kernels
from pctelescope.comm import spawn_world
from pctelescope.grid import create_grid
from pctelescope.problems import laplacian


def _operator(n: int):
    def main(comm):
        return laplacian(create_grid(comm, 3, (n, n, n))).local_csr()
    return spawn_world(1, main)[0]


def _best(fn, repeat=5, number=3) -> float:
    fn()
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(n: int = 33) -> None:
    A = _operator(n)
    ip, ix, dv = A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data
    x = np.random.default_rng(0).standard_normal(A.shape[0])
    impls = [kernels.numpy_impl] + ([kernels.numba_impl] if kernels.numba_impl is not None else [])
    print(f"7-point Laplacian, {A.shape[0]} rows, {A.nnz} nonzeros")
    print(f"{'kernel':<16}" + "".join(f"{impl.name:>14}" for impl in impls))
    cases = {
        "csr_matvec": lambda k: (lambda: k.csr_matvec(ip, ix, dv, x)),
        "csr_diagonal": lambda k: (lambda: k.csr_diagonal(ip, ix, dv, 0)),
        "ilu0_factor": lambda k: (lambda: k.ilu0_factor(ip, ix, dv)),
        "ilu0_solve": lambda k: (lambda f=k.ilu0_factor(ip, ix, dv): k.ilu0_solve(ip, ix, f[0], f[1], x)),
        "exact_partials": lambda k: (lambda: k.exact_partials(x)),
    }
    for name, make in cases.items():
        times = [_best(make(impl)) for impl in impls]
        print(f"{name:<16}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times))
    if len(impls) == 2:
        a, b = impls
        assert np.allclose(a.csr_matvec(ip, ix, dv, x), b.csr_matvec(ip, ix, dv, x), rtol=0, atol=1e-12)
        fa, fb = a.ilu0_factor(ip, ix, dv), b.ilu0_factor(ip, ix, dv)
        assert np.allclose(a.ilu0_solve(ip, ix, *fa, x), b.ilu0_solve(ip, ix, *fb, x), rtol=1e-12, atol=1e-14)
        assert math.fsum(a.exact_partials(x)) == math.fsum(b.exact_partials(x))
        print("numpy and numba outputs agree")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 33)
