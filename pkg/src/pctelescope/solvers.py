"""Fixed-point and Krylov iterations with pluggable preconditioners.

``A`` is anything with ``mult(x) -> DistVector``; ``M`` anything with
``apply(x) -> DistVector`` (``None`` means the identity).  All reductions go
through the reproducible dot product, so iteration counts and residual
histories do not depend on the number of ranks.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .linalg import DistVector, dot, norm2

METHODS = ("richardson", "chebyshev", "cg", "gmres", "fgmres", "preonly")
REASONS = ("rtol", "atol", "max_its", "fixed_its_done", "diverged")


@dataclass
class KrylovConfig:
    method: str = "gmres"
    rtol: float = 1e-5
    atol: float = 1e-50
    max_its: int = 10000
    restart: int = 30
    fixed_its: Optional[int] = None
    damping: float = 1.0
    cheb_bounds: Optional[tuple] = None
    dtol: float = 1e5
    norm_type: Optional[str] = None
    history: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown ksp_type {self.method!r}; valid types: {', '.join(METHODS)}")
        if self.rtol < 0 or self.atol < 0:
            raise ConfigurationError("tolerances must be nonnegative")
        if self.max_its < 1 or self.restart < 1:
            raise ConfigurationError("max_its and restart must be at least 1")
        if self.fixed_its is not None and self.fixed_its < 0:
            raise ConfigurationError("fixed_its must be nonnegative")
        if self.norm_type is None:
            self.norm_type = "unpreconditioned" if self.method == "fgmres" else "preconditioned"
        if self.norm_type not in ("preconditioned", "unpreconditioned"):
            raise ConfigurationError(f"unknown norm type {self.norm_type!r}")
        if self.method in ("gmres",) and self.norm_type != "preconditioned":
            raise ConfigurationError("left-preconditioned gmres supports only the preconditioned norm")
        if self.method == "fgmres" and self.norm_type != "unpreconditioned":
            raise ConfigurationError("fgmres monitors the unpreconditioned residual")


@dataclass
class SolveReport:
    converged_reason: str = "max_its"
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    norm_type: str = "preconditioned"

    @property
    def converged(self) -> bool:
        return self.converged_reason in ("rtol", "atol", "fixed_its_done")

    @property
    def diverged(self) -> bool:
        return self.converged_reason == "diverged"


def write_history_csv(report: SolveReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(report.residual_history):
            w.writerow([i, repr(float(r))])


class _Identity:
    def apply(self, x: DistVector) -> DistVector:
        return x.copy()


class _Monitor:
    """Convergence bookkeeping shared by the methods."""

    def __init__(self, cfg: KrylovConfig, report: SolveReport):
        self.cfg = cfg
        self.report = report
        self.r0 = None

    def check(self, its: int, rnorm: float) -> str | None:
        rep = self.report
        rep.iterations = its
        if self.cfg.history:
            rep.residual_history.append(rnorm)
        if not math.isfinite(rnorm):
            return "diverged"
        if self.r0 is None:
            self.r0 = rnorm
        if rnorm <= self.cfg.atol:
            return "atol"
        if rnorm <= self.cfg.rtol * self.r0:
            return "rtol"
        if rnorm > self.cfg.dtol * self.r0 and its > 0:
            return "diverged"
        if its >= self.cfg.max_its:
            return "max_its"
        return None


def _precond(M, nullspace, v):
    z = M.apply(v)
    if nullspace is not None:
        nullspace.remove(z)
    return z


def _residual(A, b, x, x_is_zero):
    if x_is_zero:
        return b.copy()
    r = A.mult(x)
    r.aypx(-1.0, b)
    return r


def solve(config: KrylovConfig, A, M, b: DistVector, x0: DistVector | None = None,
          nullspace=None) -> tuple[DistVector, SolveReport]:
    """Solve ``A x = b``.

    Stopping test ``|r_k| <= max(rtol |r_0|, atol)`` where the norm is the
    preconditioned residual for the left-preconditioned methods and the true
    residual for fgmres.  With ``fixed_its`` set the method runs exactly that
    many iterations and no norms are computed (smoother mode).
    """
    M = M if M is not None else _Identity()
    x_is_zero = x0 is None
    x = b.duplicate() if x0 is None else x0
    report = SolveReport(norm_type=config.norm_type)
    method = config.method
    if method == "preonly":
        z = _precond(M, nullspace, _residual(A, b, x, x_is_zero))
        x.axpy(1.0, z)
        report.iterations = 1
        report.converged_reason = "fixed_its_done"
    elif method == "richardson":
        _richardson(config, A, M, b, x, x_is_zero, nullspace, report)
    elif method == "chebyshev":
        _chebyshev(config, A, M, b, x, x_is_zero, nullspace, report)
    elif method == "cg":
        _cg(config, A, M, b, x, x_is_zero, nullspace, report)
    elif method == "gmres":
        _gmres(config, A, M, b, x, x_is_zero, nullspace, report, flexible=False)
    else:
        _gmres(config, A, M, b, x, x_is_zero, nullspace, report, flexible=True)
    if nullspace is not None:
        nullspace.remove(x)
    return x, report


# --------------------------------------------------------------------------
# fixed-point methods

def _richardson(cfg, A, M, b, x, x_is_zero, ns, rep):
    mon = _Monitor(cfg, rep)
    fixed = cfg.fixed_its
    r = _residual(A, b, x, x_is_zero)
    its = 0
    while True:
        if fixed is not None and its >= fixed:
            rep.iterations, rep.converged_reason = its, "fixed_its_done"
            return
        z = _precond(M, ns, r)
        if fixed is None:
            rn = norm2(z) if cfg.norm_type == "preconditioned" else norm2(r)
            reason = mon.check(its, rn)
            if reason:
                rep.converged_reason = reason
                return
        x.axpy(cfg.damping, z)
        its += 1
        if fixed is not None and its >= fixed:
            rep.iterations, rep.converged_reason = its, "fixed_its_done"
            return
        r = _residual(A, b, x, False)


def _chebyshev(cfg, A, M, b, x, x_is_zero, ns, rep):
    if cfg.cheb_bounds is None:
        raise ConfigurationError("chebyshev needs eigenvalue bounds (estimate them at setup)")
    lmin, lmax = cfg.cheb_bounds
    theta = 0.5 * (lmax + lmin)
    delta = 0.5 * (lmax - lmin)
    sigma = theta / delta
    rho = 1.0 / sigma
    mon = _Monitor(cfg, rep)
    fixed = cfg.fixed_its
    r = _residual(A, b, x, x_is_zero)
    z = _precond(M, ns, r)
    d = z.copy().scale(1.0 / theta)
    its = 0
    while True:
        if fixed is not None:
            if its >= fixed:
                rep.iterations, rep.converged_reason = its, "fixed_its_done"
                return
        else:
            rn = norm2(z) if cfg.norm_type == "preconditioned" else norm2(r)
            reason = mon.check(its, rn)
            if reason:
                rep.converged_reason = reason
                return
        x.axpy(1.0, d)
        r.axpy(-1.0, A.mult(d))
        its += 1
        if fixed is not None and its >= fixed:
            rep.iterations, rep.converged_reason = its, "fixed_its_done"
            return
        z = _precond(M, ns, r)
        rho_new = 1.0 / (2.0 * sigma - rho)
        d.scale(rho_new * rho).axpy(2.0 * rho_new / delta, z)
        rho = rho_new


# --------------------------------------------------------------------------
# Krylov methods

def _cg(cfg, A, M, b, x, x_is_zero, ns, rep, lanczos=None):
    mon = _Monitor(cfg, rep)
    fixed = cfg.fixed_its
    r = _residual(A, b, x, x_is_zero)
    z = _precond(M, ns, r)
    p = z.copy()
    rz = dot(r, z)
    its = 0
    while True:
        if fixed is None:
            rn = norm2(z) if cfg.norm_type == "preconditioned" else norm2(r)
            reason = mon.check(its, rn)
            if reason:
                rep.converged_reason = reason
                return
        if fixed is not None and its >= fixed:
            rep.iterations, rep.converged_reason = its, "fixed_its_done"
            return
        if rz < 0 or not math.isfinite(rz):
            rep.converged_reason = "diverged"
            return
        Ap = A.mult(p)
        pAp = dot(p, Ap)
        if pAp <= 0 or not math.isfinite(pAp):
            if rz == 0.0:
                rep.converged_reason = "atol"
                return
            rep.converged_reason = "diverged"
            return
        alpha = rz / pAp
        x.axpy(alpha, p)
        r.axpy(-alpha, Ap)
        z = _precond(M, ns, r)
        rz_new = dot(r, z)
        beta = rz_new / rz if rz != 0 else 0.0
        if lanczos is not None:
            lanczos.append((alpha, beta))
        rz = rz_new
        p.aypx(beta, z)
        its += 1


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    h = math.hypot(a, b)
    return a / h, b / h


def _gmres(cfg, A, M, b, x, x_is_zero, ns, rep, flexible):
    mon = _Monitor(cfg, rep)
    fixed = cfg.fixed_its
    m = cfg.restart
    its = 0
    first = True
    while True:
        r = _residual(A, b, x, x_is_zero and first)
        v0 = r if flexible else _precond(M, ns, r)
        beta = norm2(v0)
        if first:
            if fixed is None:
                reason = mon.check(its, beta)
                if reason:
                    rep.converged_reason = reason
                    return
            first = False
        if beta == 0.0:
            rep.converged_reason = "atol" if fixed is None else "fixed_its_done"
            rep.iterations = its
            return
        V = [v0.scale(1.0 / beta)]
        Z = []
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        k = 0
        done = None
        while k < m:
            if flexible:
                zk = _precond(M, ns, V[k])
                Z.append(zk)
                w = A.mult(zk)
            else:
                w = _precond(M, ns, A.mult(V[k]))
            for j in range(k + 1):
                H[j, k] = dot(w, V[j])
                w.axpy(-H[j, k], V[j])
            hn = norm2(w)
            H[k + 1, k] = hn
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            cs[k], sn[k] = _givens(H[k, k], H[k + 1, k])
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k += 1
            its += 1
            if fixed is not None:
                if its >= fixed:
                    done = "fixed_its_done"
            else:
                reason = mon.check(its, abs(g[k]))
                if reason:
                    done = reason
            if done or hn == 0.0:
                break
            V.append(w.scale(1.0 / hn))
        # x += basis * H^{-1} g
        if k:
            if np.any(np.diag(H[:k, :k]) == 0.0):
                rep.converged_reason = "diverged"
                return
            y = _back_substitute(H[:k, :k], g[:k])
            basis = Z if flexible else V
            upd = basis[0].duplicate()
            for j in range(k):
                upd.axpy(y[j], basis[j])
            x.axpy(1.0, upd)
        if done:
            rep.converged_reason = done
            rep.iterations = its
            return
        if fixed is None and its >= cfg.max_its:
            rep.converged_reason = "max_its"
            return


def _back_substitute(R: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:k] @ y[i + 1:k]) / R[i, i]
    return y


# --------------------------------------------------------------------------

def deterministic_vector(layout, comm) -> DistVector:
    """Partition-independent pseudo-random vector in [-0.5, 0.5)."""
    lo, hi = layout.range(comm.rank)
    g = np.arange(lo, hi, dtype=np.float64)
    vals = np.sin(g * 12.9898 + 78.233) * 43758.5453
    return DistVector(comm, layout, vals - np.floor(vals) - 0.5)


def chebyshev_bounds_estimate(A, M=None, steps: int = 10, nullspace=None) -> tuple[float, float]:
    """Chebyshev interval ``(0.1 λ̂max, 1.1 λ̂max)`` for ``M⁻¹A``.

    ``λ̂max`` is the largest Ritz value of the Lanczos tridiagonal matrix
    built from ``steps`` preconditioned CG iterations on a fixed,
    partition-independent right-hand side.
    """
    M = M if M is not None else _Identity()
    b = deterministic_vector(A.row_layout, A.comm)
    if nullspace is not None:
        nullspace.remove(b)
    coeffs: list = []
    cfg = KrylovConfig(method="cg", fixed_its=steps, history=False, rtol=0.0)
    rep = SolveReport()
    _cg(cfg, A, M, b, b.duplicate(), True, nullspace, rep, lanczos=coeffs)
    lmax = None
    if coeffs:
        k = len(coeffs)
        T = np.zeros((k, k))
        for j, (alpha, beta) in enumerate(coeffs):
            T[j, j] = 1.0 / alpha + (coeffs[j - 1][1] / coeffs[j - 1][0] if j else 0.0)
            if j + 1 < k:
                T[j, j + 1] = T[j + 1, j] = math.sqrt(max(beta, 0.0)) / alpha
        if np.all(np.isfinite(T)):
            lmax = float(np.linalg.eigvalsh(T)[-1])
    if lmax is None or not math.isfinite(lmax) or lmax <= 0:
        warnings.warn("eigenvalue estimate failed; using the Chebyshev interval (0.1, 1.1)")
        return 0.1, 1.1
    return 0.1 * lmax, 1.1 * lmax
