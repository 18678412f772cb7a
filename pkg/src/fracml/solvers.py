"""CG, PCG with Lanczos coefficients, and extreme eigenvalue estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import eigh_tridiagonal

__all__ = ["SolveResult", "EigenEstimate", "EigenReport", "as_operator", "cg", "pcg",
           "ritz_values", "lambda_max_power", "lambda_min_inverse_power", "IndefiniteError"]


class IndefiniteError(RuntimeError):
    """The preconditioner produced a non-positive <z, r>."""


def as_operator(M) -> spla.LinearOperator:
    """Wrap dense or sparse matrices, LinearOperators and callables."""
    if isinstance(M, spla.LinearOperator):
        return M
    if callable(M) and not hasattr(M, "shape"):
        raise TypeError("callables need an explicit dimension: wrap them in a LinearOperator")
    return spla.aslinearoperator(M)


def _identity(n):
    return spla.LinearOperator((n, n), matvec=lambda v: np.array(v, dtype=float), dtype=float)


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float                    # final relative residual ||b - A x|| / ||b||
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    betas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: list = field(default_factory=list)


def pcg(A, Binv, b, tol: float = 1e-8, max_iter: int | None = None,
        x0: np.ndarray | None = None, callback=None) -> SolveResult:
    """Preconditioned CG; stops once ||b - A x|| <= tol ||b||.

    The step lengths and ratios of the recurrence are kept so that the
    Lanczos matrix of the preconditioned operator can be formed afterwards.
    """
    A = as_operator(A)
    n = A.shape[0]
    Binv = _identity(n) if Binv is None else as_operator(Binv)
    b = np.asarray(b, dtype=float)
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), 0, True, 0.0)
    r = b - A.matvec(x)
    res = np.linalg.norm(r) / bnorm
    hist = [res]
    alphas, betas = [], []
    if res <= tol:
        return SolveResult(x, 0, True, res, history=hist)
    z = Binv.matvec(r)
    rz = float(r @ z)
    if rz <= 0.0:
        raise IndefiniteError("preconditioner is not positive definite")
    p = z.copy()
    it = 0
    while it < max_iter:
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise IndefiniteError("operator is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        alphas.append(alpha)
        res = np.linalg.norm(r) / bnorm
        hist.append(res)
        if callback is not None:
            callback(x)
        if res <= tol:
            break
        z = Binv.matvec(r)
        rz_new = float(r @ z)
        if rz_new <= 0.0:
            raise IndefiniteError("preconditioner is not positive definite")
        beta = rz_new / rz
        betas.append(beta)
        rz = rz_new
        p = z + beta * p
    return SolveResult(x, it, res <= tol, res, np.array(alphas), np.array(betas), hist)


def cg(A, b, tol: float = 1e-8, max_iter: int | None = None,
       x0: np.ndarray | None = None) -> SolveResult:
    return pcg(A, None, b, tol, max_iter, x0)


def ritz_values(alphas: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """Eigenvalues of the Lanczos tridiagonal matrix built from PCG coefficients."""
    k = len(alphas)
    if k == 0:
        return np.zeros(0)
    a = np.asarray(alphas, dtype=float)
    bt = np.asarray(betas[:k - 1], dtype=float)
    diag = 1.0 / a
    diag[1:] += bt / a[:-1]
    off = np.sqrt(bt) / a[:-1]
    return eigh_tridiagonal(diag, off, eigvals_only=True)


@dataclass
class EigenEstimate:
    value: float
    iterations: int
    converged: bool
    rel_change: float


@dataclass
class EigenReport:
    lambda_min: float
    lambda_max: float
    kappa: float
    iterations_min: int
    iterations_max: int
    converged: bool
    rel_change_min: float
    rel_change_max: float
    ritz_min: float = float("nan")
    ritz_max: float = float("nan")

    def __post_init__(self):
        if not (self.lambda_max >= self.lambda_min > 0.0):
            raise ValueError("eigenvalue estimates must satisfy lambda_max >= lambda_min > 0")


def _rq_loop(step, inner, x, tol, max_iter, window=3):
    """Power-type loop: ``step(x)`` returns (y, rayleigh quotient of x)."""
    prev = None
    streak = 0
    change = np.inf
    it = 0
    val = np.nan
    for it in range(1, max_iter + 1):
        y, val = step(x)
        if prev is not None:
            change = abs(val - prev) / abs(val)
            streak = streak + 1 if change < tol else 0
            if streak >= window:
                return EigenEstimate(val, it, True, change)
        prev = val
        nrm = np.sqrt(inner(y, y))
        if nrm == 0.0:
            return EigenEstimate(val, it, True, 0.0)
        x = y / nrm
    return EigenEstimate(val, it, False, change)


def lambda_max_power(P_apply, a_inner=None, n: int | None = None, tol: float = 1e-3,
                     max_iter: int = 2000, seed: int = 0) -> EigenEstimate:
    """Largest eigenvalue of ``P`` by power iteration in the given inner product.

    ``P_apply`` is a matrix or LinearOperator; ``a_inner(x, y)`` defaults to
    the Euclidean product.  Stops once the Rayleigh quotient changes by less
    than ``tol`` (relative) in 3 consecutive iterations.
    """
    P = as_operator(P_apply)
    n = P.shape[0] if n is None else n
    inner = a_inner or (lambda u, v: float(u @ v))
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.sqrt(inner(x, x))

    def step(x):
        y = P.matvec(x)
        return y, inner(y, x) / inner(x, x)

    return _rq_loop(step, inner, x, tol, max_iter)


def lambda_min_inverse_power(A, Binv=None, tol: float = 1e-3, max_iter: int = 2000,
                             inner_tol: float = 1e-10, seed: int = 1) -> EigenEstimate:
    """Smallest eigenvalue of ``P = Binv A`` by inverse iteration in the A-inner product.

    Each step applies P^{-1} = A^{-1} B: first ``B x`` by CG on ``Binv``, then
    ``A^{-1}`` by CG on A preconditioned with ``Binv``.  The Rayleigh
    quotient of P^{-1} in the A-product is <B x, x> / <A x, x>.
    """
    A = as_operator(A)
    n = A.shape[0]
    Bop = None if Binv is None else as_operator(Binv)
    inner = lambda u, v: float(u @ A.matvec(v))
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.sqrt(inner(x, x))

    def step(x):
        if Bop is None:
            z = x.copy()
        else:
            res = cg(Bop, x, tol=inner_tol, max_iter=50 * n + 100)
            if not res.converged:
                raise RuntimeError("inner CG on the preconditioner did not converge "
                                   f"(residual {res.residual:.2e})")
            z = res.x
        res = pcg(A, Bop, z, tol=inner_tol, max_iter=50 * n + 100)
        if not res.converged:
            raise RuntimeError(f"inner PCG did not converge (residual {res.residual:.2e})")
        return res.x, float(z @ x) / inner(x, x)

    est = _rq_loop(step, inner, x, tol, max_iter)
    return EigenEstimate(1.0 / est.value, est.iterations, est.converged, est.rel_change)
