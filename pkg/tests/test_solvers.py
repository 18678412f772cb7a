import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from fracml.solvers import (IndefiniteError, as_operator, cg, lambda_max_power,
                            lambda_min_inverse_power, pcg, ritz_values)


def _spd(rng, n, eigs=None):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.linspace(1.0, 50.0, n) if eigs is None else np.asarray(eigs, float)
    return (Q * eigs) @ Q.T


def test_cg_small_cases(rng):
    b = rng.standard_normal(6)
    r = cg(np.eye(6), b, tol=1e-12)
    assert r.iterations == 1 and np.allclose(r.x, b)
    r = cg(np.diag([1.0, 4.0]), np.array([1.0, 4.0]), tol=1e-14)
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-14)
    A = _spd(rng, 5, [1, 2, 3, 4, 5])
    r = cg(A, rng.standard_normal(5), tol=1e-10)
    assert r.converged and r.iterations <= 5
    assert cg(A, np.zeros(5)).iterations == 0


def test_cg_residual_contract_and_nonconvergence(rng):
    A = _spd(rng, 40)
    b = rng.standard_normal(40)
    r = cg(A, b, tol=1e-9)
    assert np.linalg.norm(b - A @ r.x) <= 1e-9 * np.linalg.norm(b)
    r = cg(A, b, tol=1e-14, max_iter=3)
    assert not r.converged and r.iterations == 3


def test_pcg_with_exact_inverse_and_identity(rng):
    A = _spd(rng, 12)
    b = rng.standard_normal(12)
    r = pcg(A, np.linalg.inv(A), b, tol=1e-10)
    assert r.iterations == 1
    xs_cg, xs_pcg = [], []
    pcg(A, None, b, tol=1e-10, callback=lambda x: xs_cg.append(x.copy()))
    pcg(A, np.eye(12), b, tol=1e-10, callback=lambda x: xs_pcg.append(x.copy()))
    np.testing.assert_allclose(np.array(xs_cg), np.array(xs_pcg), atol=1e-12)


def test_pcg_detects_indefinite_preconditioner(rng):
    A = _spd(rng, 8)
    with pytest.raises(IndefiniteError):
        pcg(A, -np.eye(8), rng.standard_normal(8))


def test_pcg_error_monotone_in_energy(rng):
    A = _spd(rng, 60, np.geomspace(1, 1e3, 60))
    D = np.diag(1 / np.diag(A))
    b = rng.standard_normal(60)
    xstar = np.linalg.solve(A, b)
    errs = []
    pcg(A, D, b, tol=1e-12, callback=lambda x: errs.append((x - xstar) @ A @ (x - xstar)))
    assert all(e1 <= e0 * (1 + 1e-12) for e0, e1 in zip(errs[:-1], errs[1:]))


def test_ritz_values_bracket_spectrum(rng):
    eigs = np.geomspace(1, 200, 30)
    A = _spd(rng, 30, eigs)
    r = pcg(A, None, rng.standard_normal(30), tol=1e-14, max_iter=200)
    ritz = ritz_values(r.alphas, r.betas)
    assert ritz.min() >= eigs.min() * (1 - 1e-8)
    assert ritz.max() <= eigs.max() * (1 + 1e-8)
    assert ritz.max() == pytest.approx(eigs.max(), rel=1e-6)
    assert len(ritz_values(np.zeros(0), np.zeros(0))) == 0


def test_power_iteration(rng):
    assert lambda_max_power(np.eye(4)).value == pytest.approx(1.0)
    assert lambda_max_power(np.diag([1.0, 3.0]), tol=1e-10).value == pytest.approx(3.0, rel=1e-8)
    A = _spd(rng, 25)
    B = np.diag(1 / np.diag(A))
    P = B @ A
    exact = np.linalg.eigvals(P).real
    est = lambda_max_power(P, lambda u, v: float(u @ A @ v), tol=1e-8)
    assert est.converged
    assert est.value == pytest.approx(exact.max(), rel=1e-3)
    r = pcg(A, B, rng.standard_normal(25), tol=1e-14, max_iter=200)
    assert ritz_values(r.alphas, r.betas).max() == pytest.approx(est.value, rel=0.05)


def test_inverse_power(rng):
    assert lambda_min_inverse_power(np.eye(3)).value == pytest.approx(1.0)
    M = np.array([[2.0, 1.0], [1.0, 3.0]])
    assert lambda_min_inverse_power(M, tol=1e-12).value == pytest.approx(
        np.linalg.eigvalsh(M).min(), rel=1e-8)
    A = _spd(rng, 25)
    B = np.diag(1 / np.diag(A))
    exact = np.linalg.eigvals(B @ A).real.min()
    est = lambda_min_inverse_power(A, B, tol=1e-8)
    assert est.value == pytest.approx(exact, rel=1e-3)
    r = pcg(A, B, rng.standard_normal(25), tol=1e-14, max_iter=200)
    assert ritz_values(r.alphas, r.betas).min() == pytest.approx(est.value, rel=0.05)


def test_eigen_bounds_contain_rayleigh_quotients(rng):
    A = _spd(rng, 20)
    B = np.diag(1 / np.diag(A))
    P = B @ A
    hi = lambda_max_power(P, lambda u, v: float(u @ A @ v), tol=1e-9).value
    lo = lambda_min_inverse_power(A, B, tol=1e-9).value
    Binv_inv = np.linalg.inv(B)
    for x in rng.standard_normal((20, 20)):
        rq = (x @ A @ x) / (x @ Binv_inv @ x)          # <Px,x>_A / <x,x>_A for y = B^-1 x
        assert lo * (1 - 1e-6) <= rq <= hi * (1 + 1e-6)


def test_operators_linear(rng):
    S = sp.random(30, 30, density=0.2, random_state=1, format="csr")
    for M in (S, S.toarray(), spla.aslinearoperator(S)):
        op = as_operator(M)
        x, y = rng.standard_normal((2, 30))
        a, b = 1.7, -0.3
        assert np.linalg.norm(op.matvec(a * x + b * y) - a * op.matvec(x) - b * op.matvec(y)) <= 1e-10
    with pytest.raises(TypeError):
        as_operator(lambda v: v)
