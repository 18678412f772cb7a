import numpy as np
import pytest

from fracml.adaptive import (AdaptiveLoopError, EstimatorConfig, adaptive_loop, doerfler_mark,
                             estimate, estimator_weight)
from fracml.fem import CoefVector, build_space
from fracml.kernel import FracParams, eval_frac_laplacian
from fracml.mesh import make_initial_mesh, uniform_refine


def test_doerfler_examples():
    assert doerfler_mark(np.array([9.0, 4.0, 1.0]), 0.5) == [0]
    assert doerfler_mark(np.array([1.0, 0.0, 2.0]), 1.0) == [2, 0]
    for n in (4, 5, 7):
        assert len(doerfler_mark(np.ones(n), 0.5)) == int(np.ceil(n / 2))
    assert doerfler_mark(np.zeros(3), 0.5) == []
    with pytest.raises(ValueError):
        doerfler_mark(np.array([-1.0]), 0.5)
    with pytest.raises(ValueError):
        doerfler_mark(np.ones(2), 0.0)


def test_doerfler_minimal_and_tie_break(rng):
    for _ in range(50):
        eta = rng.integers(0, 5, size=12).astype(float)
        theta = rng.uniform(0.1, 1.0)
        ids = rng.permutation(100)[:12]
        m = doerfler_mark(eta, theta, ids)
        pos = {i: k for k, i in enumerate(ids.tolist())}
        total = eta[[pos[i] for i in m]].sum() if m else 0.0
        if eta.sum() > 0:
            assert total >= theta * eta.sum() * (1 - 1e-12)
            assert eta[[pos[i] for i in m[:-1]]].sum() < theta * eta.sum()
        vals = [eta[pos[i]] for i in m]
        assert vals == sorted(vals, reverse=True)
        for a, b in zip(m[:-1], m[1:]):
            if eta[pos[a]] == eta[pos[b]]:
                assert a < b


def test_estimator_weight_continuity():
    h, w = np.array([0.3, 0.1]), np.array([0.05, 0.02])
    np.testing.assert_allclose(estimator_weight(h, w, 0.5), h)
    np.testing.assert_allclose(estimator_weight(h, w, 0.5 + 1e-9), h, rtol=1e-7)
    np.testing.assert_allclose(estimator_weight(h, w, 0.25), np.sqrt(h))


def test_estimate_constant_residual():
    mesh = make_initial_mesh("unit_square")
    sp_ = build_space(mesh, "p1_zero_bc")
    u = CoefVector(sp_, np.zeros(sp_.ndof))
    p = FracParams(0.25)
    eta_sq = estimate(sp_, u, lambda x, y: np.ones_like(x), p)
    h = np.sqrt(mesh.areas)
    np.testing.assert_allclose(np.sqrt(eta_sq), h ** p.s * np.sqrt(mesh.areas), rtol=1e-13)


def test_estimate_zero_for_consistent_data(lshape, rng):
    mesh = uniform_refine(lshape, 1)
    sp_ = build_space(mesh, "p1_zero_bc")
    u = CoefVector(sp_, rng.standard_normal(sp_.ndof))
    p = FracParams(0.75)
    eta_sq = estimate(sp_, u, lambda x, y: eval_frac_laplacian(
        u, np.column_stack([x.ravel(), y.ravel()]), p).reshape(x.shape), p)
    assert np.max(eta_sq) <= 1e-20


def test_single_iteration():
    recs, H = adaptive_loop("unit_square", FracParams(0.5), max_iters=1)
    assert len(recs) == 1 and H.L == 0
    ref = uniform_refine(make_initial_mesh("unit_square"), 1)
    np.testing.assert_array_equal(recs[0].mesh.points, ref.points)
    assert recs[0].residual <= 1e-8


def test_loop_contracts_and_boundary_refinement():
    p = FracParams(0.75)
    recs, H = adaptive_loop("l_shape", p, EstimatorConfig(theta=0.5, s=p.s), max_iters=7)
    assert len(recs) == 7
    n = [r.ndof for r in recs]
    assert all(a < b for a, b in zip(n[:-1], n[1:]))
    for a, b in zip(H.levels[:-1], H.levels[1:]):
        assert b.refines(a)
    assert all(r.residual <= 1e-8 for r in recs)
    slope = np.polyfit(np.log(n), np.log([r.eta for r in recs]), 1)[0]
    assert slope < 0
    d, touch = _boundary_split(recs[-1].mesh)
    assert d[touch].min() <= d[~touch].min()
    assert np.median(d[touch]) < np.median(d[~touch])


def _boundary_split(mesh):
    bverts = mesh.boundary_vertices
    touch = np.array([bool(set(t) & bverts) for t in mesh.tri.tolist()])
    return mesh.diameters, touch


@pytest.mark.xfail(strict=True, reason="closure refines the layer around the reentrant corner "
                   "to the same size, so the two minima tie")
def test_boundary_minimum_strictly_smaller():
    recs, _ = adaptive_loop("l_shape", FracParams(0.75), max_iters=7)
    d, touch = _boundary_split(recs[-1].mesh)
    assert d[touch].min() < d[~touch].min()


def test_loop_failure_keeps_records():
    calls = []

    def bad_f(x, y):
        calls.append(1)
        if len(calls) > 2:
            return np.full_like(x, np.nan) * np.inf
        return np.ones_like(x)

    with pytest.raises(AdaptiveLoopError) as err:
        adaptive_loop("unit_square", FracParams(0.5), f=bad_f, max_iters=5, solver_tol=1e-8)
    assert len(err.value.records) >= 1
