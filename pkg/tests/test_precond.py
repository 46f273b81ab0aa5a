import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pctelescope.errors import ConfigurationError
from pctelescope.grid import create_grid
from pctelescope.linalg import DistMatrix, DistVector
from pctelescope.options import parse
from pctelescope.precond import ILU0, LU, MG, RASM, BJacobi, Jacobi, mg_setup
from pctelescope.problems import laplacian
from pctelescope.solvers import KrylovConfig, solve

from conftest import random_sparse, rank_error, run, run0


def tridiag(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def _apply_global(c, pc, A, x):
    D = DistMatrix.from_global(c, A)
    pc.setup(D)
    return pc.apply(DistVector.from_global(c, D.row_layout, x)).gather()


# ---------------------------------------------------------------- Jacobi
def test_jacobi_example():
    A = sp.diags([2.0, 4.0, 8.0], format="csr")
    y = run0(3, lambda c: _apply_global(c, Jacobi(), A, np.array([2.0, 2.0, 2.0])))
    assert y.tolist() == [1.0, 0.5, 0.25]


def test_jacobi_zero_diagonal_names_row():
    A = sp.diags([1.0, 1.0, 0.0, 1.0], format="csr")
    err = rank_error(2, lambda c: Jacobi().setup(DistMatrix.from_global(c, A)))
    assert isinstance(err, ZeroDivisionError) and "row 2" in str(err)


# ----------------------------------------------------------- block Jacobi
def test_bjacobi_matches_dense_blocks_and_sends_nothing(rng):
    n = 12
    A = random_sparse(rng, n) + sp.identity(n) * n
    A = sp.csr_matrix(A)
    x = rng.standard_normal(n)
    db = parse(["-sub_pc_type", "lu"])

    def main(c):
        D = DistMatrix.from_global(c, A)
        pc = BJacobi(db).setup(D)
        xv = DistVector.from_global(c, D.row_layout, x)
        before = c.message_counts()
        y = pc.apply(xv)
        after = c.message_counts()
        return y.gather(), after - before, D.row_layout

    out = run(3, main)
    y, _, layout = out[0]
    expect = np.empty(n)
    for r in range(3):
        s, e = layout.range(r)
        expect[s:e] = np.linalg.solve(A.toarray()[s:e, s:e], x[s:e])
    assert np.allclose(y, expect, rtol=1e-12, atol=1e-14)
    assert all(sum(d.values()) == 0 for _, d, _ in out)


# ------------------------------------------------------------------ ILU(0)
def dense_ilu0(A):
    """Textbook IKJ zero-fill factorisation restricted to the pattern of ``A``."""
    A = A.copy()
    n = A.shape[0]
    pat = A != 0
    for i in range(1, n):
        for k in range(i):
            if not pat[i, k]:
                continue
            A[i, k] /= A[k, k]
            for j in range(k + 1, n):
                if pat[i, j]:
                    A[i, j] -= A[i, k] * A[k, j]
    return np.tril(A, -1) + np.eye(n), np.triu(A)


def test_ilu0_exact_for_tridiagonal(rng):
    A = tridiag(9)
    b = rng.standard_normal(9)
    y = run0(1, lambda c: _apply_global(c, ILU0(), A, b))
    assert np.allclose(A @ y, b, atol=1e-12)


def test_ilu0_identity():
    y = run0(1, lambda c: _apply_global(c, ILU0(), sp.identity(5, format="csr"), np.arange(5.0)))
    assert y.tolist() == list(range(5))


def test_ilu0_2d_matches_bruteforce():
    def main(c):
        g = create_grid(c, 2, (6, 6))
        A = laplacian(g)
        pc = ILU0().setup(A)
        L, U = pc.factors()
        return A.gather().toarray(), L.toarray(), U.toarray()

    A, L, U = run0(1, main)
    Lr, Ur = dense_ilu0(A)
    assert np.allclose(L, Lr, rtol=1e-13, atol=0) and np.allclose(U, Ur, rtol=1e-13, atol=0)
    pat = A != 0
    R = L @ U - A
    assert np.abs(R[pat]).max() < 1e-10  # exact on the pattern


def test_ilu0_zero_pivot():
    A = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 1.0]]))
    err = rank_error(1, lambda c: ILU0().setup(DistMatrix.from_global(c, A)))
    assert isinstance(err, ZeroDivisionError) and "row 0" in str(err)


# --------------------------------------------------------------------- LU
def test_lu_exact(rng):
    A = sp.csr_matrix(rng.standard_normal((15, 15)) + 6 * np.eye(15))
    b = rng.standard_normal(15)
    y = run0(1, lambda c: _apply_global(c, LU(), A, b))
    assert np.allclose(A @ y, b, rtol=0, atol=1e-12)


def test_lu_rejects_parallel_operator():
    err = rank_error(2, lambda c: LU().setup(DistMatrix.from_global(c, tridiag(4))))
    assert isinstance(err, ConfigurationError) and "telescope" in str(err)


# -------------------------------------------------------------------- RASM
def _rasm_vs_global(nranks, npoints, overlap, its, sub_type="richardson"):
    db = parse(["-pc_asm_overlap", str(overlap), "-sub_ksp_type", sub_type, "-sub_ksp_max_it", str(its),
                "-sub_ksp_richardson_scale", "1.0", "-sub_pc_type", "jacobi"])

    def main(c):
        g = create_grid(c, len(npoints), npoints)
        A = laplacian(g)
        x = DistVector.from_global(c, A.row_layout, np.cos(np.arange(g.n) * 0.37))
        y = RASM(db).setup(A, g).apply(x)
        if sub_type == "preonly":
            z = Jacobi().setup(A).apply(x)
        else:
            z, _ = solve(KrylovConfig(method="richardson", fixed_its=its, damping=1.0, history=False),
                         A, Jacobi().setup(A), x)
        return y.gather(), z.gather()

    return run0(nranks, main)


def test_rasm_overlap0_single_jacobi_is_global_jacobi():
    y, z = _rasm_vs_global(4, (9, 9), 0, 1, "preonly")
    assert y.tobytes() == z.tobytes()


def test_rasm_single_rank_equals_global_smoother():
    y, z = _rasm_vs_global(1, (9, 9, 9), 1, 4)
    assert np.allclose(y, z, rtol=0, atol=1e-15)


@pytest.mark.parametrize("its", [2, 3])
def test_rasm_overlap_limit_reproduces_global_smoother(its):
    # m local sweeps are exact on owned vertices once the overlap reaches m-1
    y, z = _rasm_vs_global(4, (17, 17), its - 1, its)
    assert np.allclose(y, z, rtol=0, atol=1e-14)
    y0, z0 = _rasm_vs_global(4, (17, 17), 0, its)
    assert not np.allclose(y0, z0, rtol=0, atol=1e-6)


def test_rasm_clamps_overlap_with_warning():
    db = parse(["-pc_asm_overlap", "6"])

    def main(c):
        g = create_grid(c, 1, (9,))
        return RASM(db).setup(laplacian(g), g).width

    with pytest.warns(UserWarning, match="clamped"):
        assert run0(2, main) == 4


def test_rasm_requires_grid_and_valid_overlap():
    with pytest.raises(ConfigurationError):
        RASM(parse(["-pc_asm_overlap", "-1"]))
    err = rank_error(1, lambda c: RASM().setup(DistMatrix.from_global(c, tridiag(4))))
    assert isinstance(err, ConfigurationError) and "grid" in str(err)


# --------------------------------------------------------------- multigrid
def test_mg_galerkin_coarse_operator_matches_dense():
    def main(c):
        g = create_grid(c, 3, (9, 9, 9))
        A = laplacian(g)
        mg = mg_setup(A, g, 3, galerkin=True)
        return ([op.gather().toarray() for op in mg.ops], [P.gather().toarray() for P in mg.P])

    ops, Ps = run0(8, main)
    for l, P in enumerate(Ps):
        assert np.allclose(ops[l + 1], P.T @ ops[l] @ P, rtol=1e-13, atol=1e-10)


def test_mg_level_count_validation():
    def main(c, n):
        g = create_grid(c, 3, (9, 9, 9))
        return mg_setup(laplacian(g), g, n, galerkin=True)

    err = rank_error(1, main, 1)
    assert isinstance(err, ConfigurationError) and "at least 2" in str(err)
    err = rank_error(8, main, 5)
    assert isinstance(err, ConfigurationError) and "achievable depth is 4" in str(err)


def test_mg_needs_callback_without_galerkin():
    def main(c):
        g = create_grid(c, 2, (9, 9))
        return mg_setup(laplacian(g), g, 2, galerkin=False)

    err = rank_error(1, main)
    assert isinstance(err, ConfigurationError) and "callback" in str(err)
    err = rank_error(1, lambda c: MG().setup(DistMatrix.from_global(c, tridiag(5))))
    assert isinstance(err, ConfigurationError) and "grid" in str(err)


def test_two_grid_matches_formula():
    def main(c):
        g = create_grid(c, 2, (9, 9))
        A = laplacian(g)
        mg = mg_setup(A, g, 2, galerkin=True)
        x = np.sin(np.arange(g.n) * 1.3)
        y = mg.apply(DistVector.from_global(c, A.row_layout, x)).gather()
        return A.gather().toarray(), mg.P[0].gather().toarray(), x, y

    A, P, b, y = run0(1, main)
    Dinv = np.diag(1.0 / np.diag(A))
    S = np.eye(len(b)) - 0.8 * Dinv @ A
    x = np.zeros_like(b)
    for _ in range(8):
        x = S @ x + 0.8 * Dinv @ b
    x = x + P @ np.linalg.solve(P.T @ A @ P, P.T @ (b - A @ x))
    for _ in range(8):
        x = S @ x + 0.8 * Dinv @ b
    assert np.allclose(y, x, rtol=1e-12, atol=1e-12)


def _contraction(n, levels, galerkin):
    def main(c):
        g = create_grid(c, 3, (n, n, n))
        A = laplacian(g)
        mg = mg_setup(A, g, levels, galerkin=galerkin, callback=laplacian)
        e = DistVector.from_global(c, A.row_layout, np.random.default_rng(1).standard_normal(g.n))
        rate = 0.0
        for _ in range(15):
            e.scale(1.0 / e.norm())
            e = e.copy().axpy(-1.0, mg.apply(A.mult(e)))
            rate = e.norm()
        return rate

    return run0(1, main)


@pytest.mark.parametrize("galerkin", [False, True])
def test_vcycle_contraction_mesh_stable(galerkin):
    rates = [_contraction(n, lv, galerkin) for n, lv in ((9, 2), (17, 3), (33, 4))]
    assert max(rates) <= 0.2
    assert max(rates) - min(rates) <= 0.05


LINEAR = {
    "jacobi": [],
    "bjacobi": ["-sub_pc_type", "ilu"],
    "asm": ["-pc_asm_overlap", "1", "-sub_ksp_type", "chebyshev", "-sub_pc_type", "jacobi"],
    "mg": ["-pc_mg_galerkin", "-mg_coarse_ksp_type", "preonly", "-mg_coarse_pc_type", "bjacobi"],
}


@settings(max_examples=10)
@given(kind=st.sampled_from(sorted(LINEAR)), a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 999))
def test_preconditioners_are_linear(kind, a, b, seed):
    from pctelescope.ksp import make_preconditioner

    def main(c):
        g = create_grid(c, 2, (9, 9))
        A = laplacian(g)
        pc = make_preconditioner(kind, parse(LINEAR[kind]), "").setup(A, g)
        rng = np.random.default_rng(seed)
        x = DistVector.from_global(c, A.row_layout, rng.standard_normal(g.n))
        y = DistVector.from_global(c, A.row_layout, rng.standard_normal(g.n))
        lhs = pc.apply(x.copy().scale(a).axpy(b, y))
        rhs = pc.apply(x).scale(a).axpy(b, pc.apply(y))
        return lhs.gather(), rhs.gather()

    lhs, rhs = run0(2, main)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * (1 + np.abs(rhs).max()))


def test_hierarchy_view():
    def main(c):
        g = create_grid(c, 3, (9, 9, 9))
        h = mg_setup(laplacian(g), g, 3, galerkin=True).hierarchy
        return [lv.grid.npoints for lv in h.levels], [lv.P is None for lv in h.levels], h.galerkin

    npts, no_p, gal = run0(2, main)
    assert npts == [(3, 3, 3), (5, 5, 5), (9, 9, 9)] and gal
    assert no_p == [False, False, True]
