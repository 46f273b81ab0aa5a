import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from pctelescope.linalg import (DistMatrix, DistVector, Layout, NullSpace, ScatterPlan, attach_nullspace, dot,
                                norm2, propagate_nullspace, ptap, redistribute_rows, remove_component,
                                reproducible_sum, scatter_from_sub, scatter_to_sub, spmv)
from pctelescope.linalg.mmio import read_matrix, read_vector, write_matrix, write_vector

from conftest import random_sparse, run, run0


def tridiag(n, h=1.0):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


def random_layout(rng, n, parts):
    cuts = np.sort(rng.integers(0, n + 1, size=parts - 1))
    return Layout(np.concatenate([[0], cuts, [n]]))


# ---------------------------------------------------------------- vectors

def test_layout_helpers():
    L = Layout.from_sizes([2, 0, 3])
    assert L.n == 5 and L.nparts == 3 and L.range(2) == (2, 5)
    assert L.owner([0, 1, 2, 4]).tolist() == [0, 0, 2, 2]
    assert Layout.uniform(7, 3).sizes.tolist() == [3, 2, 2]
    with pytest.raises(ValueError):
        Layout([1, 2])


def test_dot_unit_vectors_and_norm():
    def main(c):
        L = Layout.uniform(10, c.size)
        e = [DistVector.from_global(c, L, np.eye(10)[i]) for i in (2, 7)]
        ones = DistVector.from_global(c, L, np.ones(10))
        return dot(e[0], e[0]), dot(e[0], e[1]), norm2(ones)

    for v in run(3, main):
        assert v == (1.0, 0.0, math.sqrt(10))


def test_dot_matches_exact_serial_oracle(rng):
    x, y = rng.standard_normal(100) * 10.0 ** rng.integers(-8, 8, 100), rng.standard_normal(100)
    oracle = math.fsum((x * y).tolist())

    def main(c):
        L = Layout.uniform(100, c.size)
        return dot(DistVector.from_global(c, L, x), DistVector.from_global(c, L, y))

    for n in (1, 2, 3, 8):
        assert set(run(n, main)) == {oracle}


def test_reproducible_sum_cancellation():
    vals = [1e16, 1.0, -1e16]
    assert run(3, lambda c: reproducible_sum(c, [vals[c.rank]])) == [1.0] * 3


def test_vector_ops():
    def main(c):
        L = Layout.uniform(6, c.size)
        x = DistVector.from_global(c, L, np.arange(6.0))
        y = x.duplicate().set(2.0)
        y.axpy(3.0, x)
        z = y.copy().scale(0.5)
        z.aypx(2.0, x)  # z = 2 z + x
        return z.gather()

    expected = 2 * 0.5 * (2 + 3 * np.arange(6.0)) + np.arange(6.0)
    assert np.array_equal(run0(2, main), expected)


def test_layout_mismatch_rejected():
    def main(c):
        a = DistVector.from_global(c, Layout.from_sizes([2, 2]), np.ones(4))
        b = DistVector.from_global(c, Layout.from_sizes([1, 3]), np.ones(4))
        with pytest.raises(ValueError):
            dot(a, b)
        return True

    assert all(run(2, main))


# ---------------------------------------------------------------- spmv

def test_spmv_identity():
    def main(c):
        L = Layout.uniform(9, c.size)
        x = DistVector.from_global(c, L, np.arange(9.0))
        return spmv(DistMatrix.identity(c, L), x).gather()

    assert np.array_equal(run0(3, main), np.arange(9.0))


def test_spmv_three_point_boundary_pattern():
    def main(c):
        A = DistMatrix.from_global(c, tridiag(4))
        return spmv(A, DistVector.from_global(c, A.row_layout, np.ones(4))).gather()

    assert run0(2, main).tolist() == [1.0, 0.0, 0.0, 1.0]


def test_spmv_shape_mismatch():
    def main(c):
        A = DistMatrix.from_global(c, np.ones((4, 4)))
        with pytest.raises(ValueError):
            A.mult(DistVector.from_global(c, Layout.uniform(5, c.size), np.ones(5)))
        return True

    assert all(run(2, main))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 64), m=st.integers(1, 64), ranks=st.integers(1, 8))
def test_spmv_dense_oracle(seed, n, m, ranks):
    rng = np.random.default_rng(seed)
    A = random_sparse(rng, n, m)
    x = rng.standard_normal(m)
    rl, cl = random_layout(rng, n, ranks), random_layout(rng, m, ranks)

    def main(c):
        D = DistMatrix.from_global(c, A, rl, cl)
        return D.mult(DistVector.from_global(c, cl, x)).gather()

    y = run0(ranks, main)
    # rows are reduced in ascending column order, exactly like scipy's CSR kernel
    assert np.allclose(y, A @ x, rtol=1e-13, atol=1e-13)
    assert np.array_equal(y, run0(1, main if ranks == 1 else (lambda c: DistMatrix.from_global(c, A).mult(
        DistVector.from_global(c, Layout.uniform(m, 1), x)).gather())))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40), ranks=st.integers(1, 6))
def test_transpose_oracle(seed, n, ranks):
    rng = np.random.default_rng(seed)
    A = random_sparse(rng, n, n + 3)

    def main(c):
        return DistMatrix.from_global(c, A).transpose().gather_dense()

    assert np.array_equal(run0(ranks, main), A.T.toarray())


# ---------------------------------------------------------------- ptap

def test_ptap_identity_and_permutation(rng):
    A = random_sparse(rng, 12)
    A = (A + A.T).tocsr()
    perm = rng.permutation(12)
    Pm = sp.csr_matrix((np.ones(12), (np.arange(12), perm)), shape=(12, 12))

    def main(c):
        D = DistMatrix.from_global(c, A)
        I = DistMatrix.identity(c, D.row_layout)
        P = DistMatrix.from_global(c, Pm)
        return ptap(I, D).gather_dense(), ptap(P, D).gather_dense()

    same, permuted = run0(3, main)
    assert np.array_equal(same, A.toarray())
    inv = np.argsort(perm)
    expected = A.toarray()[np.ix_(inv, inv)]
    assert np.array_equal(permuted, expected) and np.array_equal(permuted, permuted.T)
    assert sorted(np.diag(permuted)) == sorted(A.diagonal())
    assert np.linalg.norm(permuted) == np.linalg.norm(expected)


def test_ptap_1d_linear_interpolation():
    A = tridiag(5)
    P = np.array([[1, 0, 0], [.5, .5, 0], [0, 1, 0], [0, .5, .5], [0, 0, 1]])

    def main(c):
        return ptap(DistMatrix.from_global(c, P, Layout.uniform(5, c.size), Layout.uniform(3, c.size)),
                    DistMatrix.from_global(c, A)).gather_dense()

    got = run0(2, main)
    assert np.allclose(got, P.T @ A.toarray() @ P, rtol=0, atol=1e-15)
    # interior row: half the h=1 three-point stencil on the coarse grid
    assert got[1].tolist() == [-0.5, 1.0, -0.5]


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), m=st.integers(1, 20), ranks=st.integers(1, 6))
def test_ptap_dense_oracle(seed, n, m, ranks):
    rng = np.random.default_rng(seed)
    A, P = random_sparse(rng, n), random_sparse(rng, n, m, 0.3)
    rl, cl = random_layout(rng, n, ranks), random_layout(rng, m, ranks)

    def main(c):
        return ptap(DistMatrix.from_global(c, P, rl, cl), DistMatrix.from_global(c, A, rl, rl)).gather_dense()

    ref = P.T.toarray() @ A.toarray() @ P.toarray()
    assert np.allclose(run0(ranks, main), ref, rtol=1e-13, atol=1e-13 * max(1.0, np.abs(ref).max()))


def test_ptap_shape_mismatch():
    def main(c):
        with pytest.raises(ValueError):
            ptap(DistMatrix.from_global(c, np.ones((3, 2))), DistMatrix.from_global(c, np.eye(4)))
        return True

    assert all(run(2, main))


# ---------------------------------------------------------------- redistribution

def _redistribute(c, A, r, rl=None):
    D = DistMatrix.from_global(c, A, rl, rl)
    sub = c.split_strided(r)
    Ap = redistribute_rows(D, sub)
    if Ap is None:
        return None
    return Ap.gather(), Ap.row_layout.sizes.tolist(), sub.size


def test_redistribute_four_by_one_rows():
    A = tridiag(4)
    out = run(4, _redistribute, A, 2)
    assert out[1] is None and out[3] is None
    G, sizes, size = out[0]
    assert size == 2 and sizes == [2, 2] and (G != A).nnz == 0


def test_redistribute_full_serialisation(rng):
    A = random_sparse(rng, 10)
    G, sizes, size = run0(4, _redistribute, A, 4)
    assert size == 1 and sizes == [10] and np.array_equal(G.toarray(), A.toarray())


def test_redistribute_remainder_goes_to_last_member(rng):
    A = random_sparse(rng, 12)
    G, sizes, size = run0(6, _redistribute, A, 4)
    assert size == 2 and sizes == [8, 4]  # members {0, 4}: ranks 0-3 fuse, 4-5 fuse
    assert np.array_equal(G.toarray(), A.toarray())


def test_redistribute_rejects_foreign_subcomm():
    def main(c):
        other = c.self_comm()
        D = DistMatrix.from_global(c, np.eye(4))
        with pytest.raises(ValueError):
            redistribute_rows(D, other.split_strided(1))
        return True

    with pytest.raises(Exception):
        run(2, main)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 64), ranks=st.integers(2, 8), data=st.data())
def test_redistribute_bitwise(seed, n, ranks, data):
    r = data.draw(st.integers(2, ranks))
    rng = np.random.default_rng(seed)
    A = random_sparse(rng, n)
    A.data = rng.standard_normal(A.nnz) * 10.0 ** rng.integers(-30, 30, A.nnz)
    G, _, _ = run0(ranks, _redistribute, A, r, random_layout(rng, n, ranks))
    assert np.array_equal(G.indptr, A.indptr) and np.array_equal(G.indices, A.indices)
    assert G.data.tobytes() == A.data.tobytes()


# ---------------------------------------------------------------- scatters

def _roundtrip(c, n, r, x, src):
    L = src
    sub = c.split_strided(r)
    dst = Layout.uniform(n, sub.size) if sub is not None else None
    plan = ScatterPlan(c, L, sub, dst)
    v = DistVector.from_global(c, L, x)
    xs = scatter_to_sub(plan, v)
    gathered = xs.gather() if xs is not None else None
    back = scatter_from_sub(plan, xs)
    return gathered, back.gather()


def test_scatter_index_vector_and_constant():
    x = np.arange(11.0)
    for r in (1, 2, 3, 5):
        out = run(5, _roundtrip, 11, r, x, Layout.uniform(11, 5))
        assert np.array_equal(out[0][0], x) and all(np.array_equal(o[1], x) for o in out)
    c = np.full(7, 3.25)
    out = run(3, _roundtrip, 7, 2, c, Layout.uniform(7, 3))
    assert np.array_equal(out[0][0], c)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 50), ranks=st.integers(1, 8), data=st.data())
def test_scatter_roundtrip_bitwise(seed, n, ranks, data):
    r = data.draw(st.integers(1, ranks))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    out = run(ranks, _roundtrip, n, r, x, random_layout(rng, n, ranks))
    assert out[0][0].tobytes() == x.tobytes()
    assert all(o[1].tobytes() == x.tobytes() for o in out)


# ---------------------------------------------------------------- null spaces

def test_nullspace_orthonormalised_and_removal(rng):
    V = rng.standard_normal((12, 2))
    x = rng.standard_normal(12)

    def main(c):
        L = Layout.uniform(12, c.size)
        vecs = [DistVector.from_global(c, L, V[:, k]) for k in range(2)]
        ns = NullSpace(False, vecs)
        q = [v.gather() for v in ns.vectors]
        y = remove_component(ns, DistVector.from_global(c, L, x))
        inspan = remove_component(ns, DistVector.from_global(c, L, V[:, 0] * 3.0))
        perp = DistVector.from_global(c, L, x)
        remove_component(ns, perp)
        unchanged = remove_component(ns, perp.copy()).gather()
        return q, [dot(v, y) for v in ns.vectors], y.norm(), inspan.norm(), perp.gather(), unchanged

    q, dots, ynorm, inspan, perp, unchanged = run0(3, main)
    G = np.array([[a @ b for b in q] for a in q])
    assert np.allclose(G, np.eye(2), atol=1e-14)
    assert all(abs(d) <= 1e-12 * ynorm for d in dots)
    assert inspan < 1e-13
    assert np.allclose(perp, unchanged, atol=1e-15)


def test_constant_nullspace_mean_and_test(rng):
    x = rng.standard_normal(9) + 4.0

    def main(c):
        L = Layout.uniform(9, c.size)
        ns = NullSpace(has_constant=True)
        y = ns.remove(DistVector.from_global(c, L, x))
        lap = tridiag(9).tolil()
        lap[0, 0] = lap[8, 8] = 1.0
        A = attach_nullspace(DistMatrix.from_global(c, lap.tocsr()), ns)
        return y.gather().mean(), ns.test(A), ns.dim

    mean, ok, dim = run0(2, main)
    assert abs(mean) < 1e-13 and ok and dim == 1


def test_propagate_nullspace_through_scatter():
    n = 16

    def main(c):
        L = Layout.uniform(n, c.size)
        ones = DistVector.from_global(c, L, np.ones(n))
        alt = DistVector.from_global(c, L, (-1.0) ** np.arange(n))
        remover = lambda v: None  # noqa: E731
        ramp = DistVector.from_global(c, L, np.arange(n, dtype=float))
        ns = NullSpace(True, [alt, ramp], remover=remover)
        ns1 = NullSpace(False, [ones])
        sub = c.split_strided(4)
        plan = ScatterPlan(c, L, sub, Layout.uniform(n, sub.size) if sub else None)
        moved = propagate_nullspace(ns, plan.to_sub)
        moved1 = propagate_nullspace(ns1, plan.to_sub)
        if sub is None:
            return None
        q = [v.gather() for v in moved.vectors]
        return moved.has_constant, moved.remover is remover, q, moved1.vectors[0].gather()

    has_c, same_remover, q, unit = run0(8, main)
    assert has_c and same_remover
    assert np.allclose(np.array([[a @ b for b in q] for a in q]), np.eye(len(q)), atol=1e-14)
    assert np.allclose(unit, 1 / math.sqrt(n), rtol=0, atol=1e-16)
    assert abs(np.linalg.norm(unit) - 1) < 1e-15


# ---------------------------------------------------------------- I/O

def test_matrix_market_roundtrip(tmp_path, rng):
    A = random_sparse(rng, 9)
    write_matrix(tmp_path / "a.mtx", A)
    B = read_matrix(tmp_path / "a.mtx")
    assert np.allclose(B.toarray(), A.toarray(), rtol=1e-15)
    x = rng.standard_normal(5)
    write_vector(tmp_path / "x.txt", x)
    assert np.array_equal(read_vector(tmp_path / "x.txt"), x)
