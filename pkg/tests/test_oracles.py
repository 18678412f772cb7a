"""Checks of the brute-force and quadrature oracles themselves."""
import numpy as np
import pytest

from fracml.fem import build_space
from fracml.kernel import FracParams, complement_weight
from fracml.mesh import make_initial_mesh, uniform_refine
from fracml.oracles import completion_bruteforce, fcc_bruteforce, stiffness_oracle
from fracml.quadrature import gauss_interval

from conftest import two_triangle_square


def _graded_unit_interval(n, q=4.0):
    """Gauss rule on [0, 1] graded toward both ends by x = t^q on each half."""
    t, w = gauss_interval(n)
    x = 0.5 * t ** q
    wx = 0.5 * q * t ** (q - 1) * w
    return np.concatenate([x, 1 - x[::-1]]), np.concatenate([wx, wx[::-1]])


def test_fcc_bruteforce_trivial_cases(square):
    T = uniform_refine(square, 1)
    assert fcc_bruteforce(T, T) == (set(), set(), set(T.elements))
    b1, b2, b3 = fcc_bruteforce(square, T)
    assert b1 == set(square.elements) and not b2 and not b3


def test_completion_bruteforce_known_case(square):
    # criss-cross refinement edges lie on the boundary: no closure needed
    res = completion_bruteforce(square, [square.elements[0]], depth=2)
    assert res.unique and res.coarsest
    assert len(res.minimal) == 5
    assert res.n_candidates > 1
    # a shared refinement edge forces the neighbour to be bisected too
    two = two_triangle_square()
    res = completion_bruteforce(two, [two.elements[0]], depth=2)
    assert res.unique and res.coarsest and len(res.minimal) == 4


def test_stiffness_oracle_p0_total_energy():
    """Sum of all p0 entries equals a(1, 1) = C int_Omega rho(x) dx."""
    p = FracParams(0.25)
    mesh = two_triangle_square()
    ref = stiffness_oracle(build_space(mesh, "p0"), p, n_x=8, m_theta=16)
    x, w = _graded_unit_interval(60)
    X, Y = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    rho = complement_weight(pts, make_initial_mesh("unit_square"), p)
    total = p.c_ds * np.sum(np.outer(w, w).ravel() * rho)
    assert ref.matrix.sum() == pytest.approx(total, rel=1e-5)


def test_stiffness_oracle_error_estimate_small():
    res = stiffness_oracle(build_space(make_initial_mesh("unit_square"), "p1_zero_bc"),
                           [FracParams(0.25), FracParams(0.75)], n_x=8, m_theta=16)
    assert len(res) == 2
    for r in res:
        assert r.matrix.shape == (1, 1) and r.matrix[0, 0] > 0
        assert r.error_estimate < 1e-4
    assert stiffness_oracle(build_space(two_triangle_square(), "p1_zero_bc"),
                            FracParams(0.5)).matrix.shape == (0, 0)
