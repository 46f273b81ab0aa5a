import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from pctelescope.errors import ConfigurationError
from pctelescope.linalg import DistMatrix, DistVector
from pctelescope.precond import LU, Jacobi
from pctelescope.solvers import KrylovConfig, chebyshev_bounds_estimate, solve, write_history_csv

from conftest import run0


def tridiag(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def spd(rng, n):
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


class Counting:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def apply(self, x):
        self.calls += 1
        return self.inner.apply(x)


def _solve(c, A, b, cfg, pc=None, x0=None):
    D = DistMatrix.from_global(c, A)
    bb = DistVector.from_global(c, D.row_layout, b)
    M = None
    if pc == "jacobi":
        M = Jacobi().setup(D)
    x, rep = solve(cfg, D, M, bb, None if x0 is None else DistVector.from_global(c, D.row_layout, x0))
    return x.gather(), rep


def test_config_validation():
    with pytest.raises(ConfigurationError):
        KrylovConfig(method="gcr")
    with pytest.raises(ConfigurationError):
        KrylovConfig(rtol=-1)
    with pytest.raises(ConfigurationError):
        KrylovConfig(max_its=0)
    with pytest.raises(ConfigurationError):
        KrylovConfig(restart=0)
    assert KrylovConfig(method="fgmres").norm_type == "unpreconditioned"
    assert KrylovConfig(method="cg").norm_type == "preconditioned"


def test_cg_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    x, rep = run0(2, _solve, sp.eye(5, format="csr"), b, KrylovConfig(method="cg", rtol=1e-12))
    assert rep.iterations == 1 and rep.converged_reason in ("rtol", "atol") and np.allclose(x, b)
    assert len(rep.residual_history) == rep.iterations + 1


def test_cg_jacobi_rank_independent():
    A = tridiag(31)
    b = np.sin(np.arange(31.0))
    cfg = KrylovConfig(method="cg", rtol=1e-8)
    ref = run0(1, _solve, A, b, cfg, "jacobi")
    assert ref[1].converged_reason == "rtol"
    assert np.linalg.norm(A @ ref[0] - b) <= 1e-6 * np.linalg.norm(b)
    for n in (2, 4):
        x, rep = run0(n, _solve, A, b, cfg, "jacobi")
        assert rep.iterations == ref[1].iterations
        assert rep.residual_history == ref[1].residual_history
        assert x.tobytes() == ref[0].tobytes()


@given(seed=st.integers(0, 2**32 - 1), method=st.sampled_from(["cg", "gmres", "fgmres", "richardson", "chebyshev"]))
def test_histories_identical_across_rank_counts(seed, method):
    rng = np.random.default_rng(seed)
    n = 24
    A = sp.csr_matrix(spd(rng, n) if method != "richardson" else np.eye(n) * 4 + spd(rng, n) / (4 * n))
    b = rng.standard_normal(n)
    kw = {"max_its": 60, "rtol": 1e-10}
    if method == "chebyshev":
        ev = np.linalg.eigvalsh(np.diag(1 / A.diagonal()) @ A.toarray())
        kw["cheb_bounds"] = (ev[0], ev[-1])
    if method == "richardson":
        kw["damping"] = 0.5
    cfg = KrylovConfig(method=method, **kw)
    hist = [run0(k, _solve, A, b, cfg, "jacobi")[1].residual_history for k in (1, 2, 4, 8)]
    assert all(h == hist[0] for h in hist)


def test_richardson_fixed_its_applies_m_exactly():
    A = tridiag(10)

    def main(c):
        D = DistMatrix.from_global(c, A)
        M = Counting(Jacobi().setup(D))
        cfg = KrylovConfig(method="richardson", fixed_its=8, damping=1.0)
        _, rep = solve(cfg, D, M, DistVector.from_global(c, D.row_layout, np.ones(10)))
        return M.calls, rep.iterations, rep.converged_reason, rep.residual_history

    calls, its, reason, hist = run0(2, main)
    assert (calls, its, reason) == (8, 8, "fixed_its_done") and hist == []


def test_richardson_jacobi_matches_hand_iteration():
    A = tridiag(6).toarray()
    b = np.arange(6.0)
    x = np.zeros(6)
    for _ in range(3):
        x = x + 0.8 * (b - A @ x) / 2.0
    got, _ = run0(3, _solve, sp.csr_matrix(A), b, KrylovConfig(method="richardson", fixed_its=3, damping=0.8),
                  "jacobi")
    assert np.allclose(got, x, rtol=0, atol=1e-15)


def test_cg_error_a_norm_monotone(rng):
    n = 40
    A = spd(rng, n)
    b = rng.standard_normal(n)
    xs = np.linalg.solve(A, b)
    errs = []
    for k in range(1, 15):
        x, _ = run0(2, _solve, sp.csr_matrix(A), b, KrylovConfig(method="cg", fixed_its=k, history=False))
        e = x - xs
        errs.append(e @ A @ e)
    assert all(b2 <= a2 * (1 + 1e-12) for a2, b2 in zip(errs, errs[1:]))


def test_gmres_monotone_within_restart(rng):
    n = 50
    A = sp.csr_matrix(rng.standard_normal((n, n)) + 8 * np.eye(n))
    b = rng.standard_normal(n)
    for method in ("gmres", "fgmres"):
        x, rep = run0(3, _solve, A, b, KrylovConfig(method=method, rtol=1e-10, restart=7))
        h = rep.residual_history
        for s in range(0, len(h) - 1):
            if (s + 1) % 7:  # within a cycle
                assert h[s + 1] <= h[s] * (1 + 1e-12)
        assert rep.converged and np.linalg.norm(A @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_cg_indefinite_reports_divergence():
    A = sp.diags([1.0, -1.0, 2.0, -3.0], format="csr")
    _, rep = run0(2, _solve, A, np.ones(4), KrylovConfig(method="cg", rtol=1e-12))
    assert rep.converged_reason == "diverged"


def test_max_its_reason():
    _, rep = run0(1, _solve, tridiag(40), np.ones(40), KrylovConfig(method="cg", max_its=3))
    assert rep.converged_reason == "max_its" and rep.iterations == 3 and not rep.converged


def test_preonly_with_exact_preconditioner(rng):
    A = sp.csr_matrix(spd(rng, 12))
    b = rng.standard_normal(12)

    def main(c):
        D = DistMatrix.from_global(c, A)
        x, rep = solve(KrylovConfig(method="preonly"), D, LU().setup(D), DistVector.from_global(c, D.row_layout, b))
        return x.gather(), rep.iterations

    x, its = run0(1, main)
    assert its == 1 and np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_chebyshev_solves_and_respects_bounds():
    A = tridiag(20)
    ev = np.linalg.eigvalsh(A.toarray() / 2)
    cfg = KrylovConfig(method="chebyshev", cheb_bounds=(ev[0], ev[-1]), rtol=1e-10, max_its=500)
    x, rep = run0(2, _solve, A, np.ones(20), cfg, "jacobi")
    assert rep.converged and np.allclose(A @ x, 1.0, atol=1e-7)


def test_chebyshev_bounds_examples():
    def main(c, A, pc):
        D = DistMatrix.from_global(c, A)
        M = Jacobi().setup(D) if pc else None
        return chebyshev_bounds_estimate(D, M)

    lo, hi = run0(2, main, sp.eye(8, format="csr"), False)
    assert lo == pytest.approx(0.1) and hi == pytest.approx(1.1)
    lo, hi = run0(3, main, sp.diags(np.arange(1.0, 101.0), format="csr"), False)
    assert 95 <= hi / 1.1 <= 100 and lo == pytest.approx(hi / 11)
    lmax = np.linalg.eigvalsh(tridiag(31).toarray() / 2)[-1]
    lo, hi = run0(2, main, tridiag(31), True)
    assert 1.9 < hi / 1.1 < 2.0 and hi / 1.1 <= lmax + 1e-12


def test_chebyshev_bounds_fallback_warns():
    def main(c):
        D = DistMatrix.from_global(c, sp.csr_matrix((4, 4)))
        return chebyshev_bounds_estimate(D)

    with pytest.warns(UserWarning, match="eigenvalue estimate failed"):
        assert run0(1, main) == (0.1, 1.1)


def test_history_csv(tmp_path):
    _, rep = run0(1, _solve, tridiag(10), np.ones(10), KrylovConfig(method="cg"))
    write_history_csv(rep, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,residual" and len(lines) == len(rep.residual_history) + 1
    assert float(lines[1].split(",")[1]) == rep.residual_history[0]


def test_zero_rhs_returns_zero():
    x, rep = run0(2, _solve, tridiag(8), np.zeros(8), KrylovConfig(method="gmres"))
    assert not x.any() and rep.iterations == 0 and rep.converged_reason == "atol"
