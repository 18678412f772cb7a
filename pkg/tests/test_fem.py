import numpy as np
import pytest

from fracml.fem import (AveragingAssignment, CoefVector, assign_averaging,
                        assign_averaging_leveled, build_space, dual_basis_coefficients, evaluate,
                        marked_nodes, mass_matrix, prolongation, scott_zhang_apply,
                        scott_zhang_matrix)
from fracml.hierarchy import build_fcc_hierarchy, build_uniform_hierarchy, fcc, uniform_mesh
from fracml.kernel import FracParams, QuadConfig, assemble_stiffness
from fracml.mesh import MeshError, make_initial_mesh, refine, uniform_refine
from fracml.quadrature import triangle_rule

from conftest import random_refinement


def _interior_count_euler(mesh):
    # V - E + F = 1 on a simply connected domain; 2E = 3F + E_b
    F, Eb = len(mesh), len(mesh.boundary_edges)
    return 1 + F // 2 - Eb // 2


def test_dof_counts(square, lshape):
    assert build_space(square, "p1_zero_bc").ndof == 1
    assert build_space(square, "p0").ndof == 4
    assert build_space(square, "p1").ndof == 5
    for mesh in (uniform_refine(square, 2), uniform_refine(lshape, 2)):
        assert build_space(mesh, "p1_zero_bc").ndof == _interior_count_euler(mesh)
    with pytest.raises(ValueError):
        build_space(square, "p2")


def test_node_order_lexicographic(lshape):
    sp_ = build_space(uniform_refine(lshape, 1), "p1")
    xy = sp_.node_xy
    assert all(tuple(a) <= tuple(b) for a, b in zip(xy[:-1], xy[1:]))


def test_prolongation_basic(square):
    s0 = build_space(square, "p1")
    np.testing.assert_array_equal(prolongation(s0, s0).toarray(), np.eye(5))
    fine = uniform_refine(square, 1)
    s1 = build_space(fine, "p1")
    P = prolongation(s0, s1).toarray()
    c = s0.dof_of_node[4]                              # centre vertex
    col = P[:, c]
    xy = s1.node_xy
    for i, v in enumerate(col):
        d = np.linalg.norm(xy[i] - (0.5, 0.5))
        if d == 0:
            assert v == 1.0
        elif d in (0.25, np.sqrt(2) / 4) and v:
            assert v == 0.5
    assert np.all((P >= 0) & (P <= 1))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)
    # p0: each fine element maps to its ancestor
    P0 = prolongation(build_space(square, "p0"), build_space(fine, "p0")).toarray()
    np.testing.assert_array_equal(P0.sum(axis=0), 4.0)
    with pytest.raises(MeshError):
        prolongation(s1, s0)


def test_prolongation_reproduces_function(lshape, rng):
    coarse = random_refinement(lshape, rng, 2)
    fine = random_refinement(coarse, rng, 3)
    sc, sf = build_space(coarse, "p1"), build_space(fine, "p1")
    u = CoefVector(sc, rng.standard_normal(sc.ndof))
    v = CoefVector(sf, prolongation(sc, sf) @ u.values)
    pts = fine.points.mean(axis=1)
    np.testing.assert_allclose(evaluate(v, pts), evaluate(u, pts), atol=1e-13)


def test_prolongation_preserves_energy(lshape, rng):
    coarse = uniform_refine(lshape, 1)
    fine = refine(coarse, coarse.elements[:5])
    # the identity is exact; order 12 keeps the quadrature error below the tolerance
    p, q = FracParams(0.4), QuadConfig(gauss_order=12)
    sc, sf = build_space(coarse, "p1_zero_bc"), build_space(fine, "p1_zero_bc")
    Ac, Af = assemble_stiffness(sc, p, q), assemble_stiffness(sf, p, q)
    P = prolongation(sc, sf).toarray()
    u = rng.standard_normal(sc.ndof)
    assert (P @ u) @ Af @ (P @ u) == pytest.approx(u @ Ac @ u, rel=1e-8)


def test_dual_basis_identity():
    pts, w = triangle_rule(2)          # exact for quadratics
    lam = np.column_stack([1 - pts.sum(axis=1), pts])
    for area in (0.5, 0.125, 1 / 3):
        C = dual_basis_coefficients(area)
        psi = lam @ C.T
        gram = area * np.einsum("q,qa,qb->ab", w, psi, lam)
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-13)


def _any_assignment(space, rng=None):
    vp = space.mesh.vertex_patches
    if rng is None:
        return AveragingAssignment({int(z): min(vp[int(z)]) for z in space.nodes})
    return AveragingAssignment({int(z): int(rng.choice(vp[int(z)])) for z in space.nodes})


def test_sz_reproduces_constants_and_is_projection(lshape, rng):
    mesh = random_refinement(lshape, rng, 3)
    sp_ = build_space(mesh, "p1")
    avg = _any_assignment(sp_, rng)
    one = scott_zhang_apply(sp_, avg, lambda x, y: np.ones_like(x))
    np.testing.assert_allclose(one.values, 1.0, atol=1e-13)
    u = CoefVector(sp_, rng.standard_normal(sp_.ndof))
    np.testing.assert_allclose(scott_zhang_apply(sp_, avg, u).values, u.values, atol=1e-12)
    # averaging-set independence on discrete input
    other = _any_assignment(sp_, rng)
    np.testing.assert_allclose(scott_zhang_apply(sp_, other, u).values, u.values, atol=1e-12)


def _sz_midpoint_oracle(target, avg, u, depth):
    """int_{T_z} psi*_z u by uniform subdivision and the edge-midpoint rule."""
    from fracml.mesh import MeshView
    f = target.mesh.forest
    out = np.zeros(target.ndof)
    for i, z in enumerate(target.nodes.tolist()):
        tz = avg[z]
        sub = MeshView(f, [tz])
        for _ in range(depth):
            sub = refine(sub, sub.elements)
        xy = f.triangle_coords(tz)
        area = f.area(tz)
        k = f.tri[tz].index(z)
        for P, a in zip(sub.points, sub.areas):
            mids = (P + P[[1, 2, 0]]) / 2
            vals = evaluate(u, mids)
            lam = np.linalg.solve(np.vstack([xy.T, np.ones(3)]), np.vstack([mids.T, np.ones(3)]))
            psi = (12 * lam[k] - 3) / area
            out[i] += a / 3 * np.sum(vals * psi)
    return out


def test_sz_of_fine_hat_matches_subdivision_oracle(square):
    coarse = uniform_refine(square, 1)
    fine = refine(coarse, coarse.elements[:3])
    fine = refine(fine, fine.elements[:4])
    sf, sc = build_space(fine, "p1"), build_space(coarse, "p1")
    avg = _any_assignment(sc)
    for j in (0, sf.ndof // 2, sf.ndof - 1):
        e = np.zeros(sf.ndof)
        e[j] = 1.0
        u = CoefVector(sf, e)
        got = scott_zhang_apply(sc, avg, u).values
        ref = _sz_midpoint_oracle(sc, avg, u, depth=2 * 3)
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_assign_averaging_identity_case(square, rng):
    T = random_refinement(square, rng, 3)
    hat, tilde = assign_averaging(T, T, T)
    assert hat.T_z == tilde.T_z
    U = uniform_mesh(T.forest, 2)
    wrong = uniform_mesh(T.forest, 1)
    assert fcc(T, U) != wrong
    with pytest.raises(MeshError):
        assign_averaging(T, U, wrong)


def test_assign_averaging_interior_node_own_element(square):
    T = uniform_refine(square, 1)
    hat = uniform_mesh(T.forest, 1)
    e = T.elements[3]
    bary = tuple(T.forest.triangle_coords(e).mean(axis=0))
    h, t = assign_averaging(T, hat, fcc(T, hat), extra_nodes={"c": bary})
    assert h["c"] == e and t["c"] == e


def test_assign_averaging_prefers_fine_element_inside_T():
    square = make_initial_mesh("unit_square")
    # T: coarse on the left half, refined on the right
    T = refine(square, [square.elements[1]])
    T = refine(T, [e for e in T.elements if T.forest.generation[e] == 1])
    hat_mesh = uniform_mesh(T.forest, 1)
    tilde_mesh = fcc(T, hat_mesh)
    hat, tilde = assign_averaging(T, hat_mesh, tilde_mesh)
    f = T.forest
    # nodes of shared elements: a split choice pairs a fine element with its T ancestor
    common = {z for e in hat_mesh.element_set & tilde_mesh.element_set for z in f.tri[e]}
    split = [z for z in common if hat[z] != tilde[z]]
    assert split, "instance must exercise the paired choice"
    for z in split:
        assert tilde[z] in T.element_set
        assert f.is_ancestor(tilde[z], hat[z])
        assert hat[z] in hat_mesh.element_set
    for z, e in hat.T_z.items():
        assert z in f.tri[e]
    for z, e in tilde.T_z.items():
        assert z in f.tri[e]


def test_sz_coincidence_hat_tilde(lshape, rng):
    T = random_refinement(lshape, rng, 8)
    src = build_space(T, "p1")
    us = rng.standard_normal((4, src.ndof))
    for l in range(1, 4):
        hm = uniform_mesh(T.forest, l)
        tm = fcc(T, hm)
        h, t = assign_averaging(T, hm, tm)
        sh, st = build_space(hm, "p1"), build_space(tm, "p1")
        pts = np.vstack([hm.coords[hm.vertex_ids], tm.coords[tm.vertex_ids]])
        for u in us:
            a = evaluate(CoefVector(sh, scott_zhang_matrix(sh, h, src) @ u), pts)
            b = evaluate(CoefVector(st, scott_zhang_matrix(st, t, src) @ u), pts)
            assert np.max(np.abs(a - b)) <= 1e-12


def test_leveled_assignments(lshape, rng):
    T = uniform_refine(lshape, 2)
    U = build_uniform_hierarchy(lshape, 2)
    H = build_fcc_hierarchy(T)
    assert H.levels == U.levels
    for l in range(1, 3):
        new = set(H.levels[l].interior_vertices.tolist())
        assert set(marked_nodes(H.levels[l - 1], H.levels[l], "p1_zero_bc").tolist()) == new
    T = random_refinement(lshape, rng, 8)
    H = build_fcc_hierarchy(T)
    assign = assign_averaging_leveled(T, H)
    inherited = 0
    for l in range(1, len(H.levels)):
        marked = set(marked_nodes(H.levels[l - 1], H.levels[l], "p1_zero_bc").tolist())
        for z in H.levels[l].interior_vertices.tolist():
            if z not in marked:
                assert assign[l][z] == assign[l - 1][z]
                inherited += 1
    assert inherited > 0
    src = build_space(T, "p1_zero_bc")
    spaces = [build_space(m, "p1_zero_bc") for m in H.levels]
    for u in rng.standard_normal((3, src.ndof)):
        vals = [scott_zhang_matrix(s_, a, src) @ u for s_, a in zip(spaces, assign)]
        for l in range(1, len(spaces)):
            diff = vals[l] - prolongation(spaces[l - 1], spaces[l]) @ vals[l - 1]
            marked = set(marked_nodes(H.levels[l - 1], H.levels[l], "p1_zero_bc").tolist())
            keep = [i for i, z in enumerate(spaces[l].nodes.tolist()) if z not in marked]
            assert np.max(np.abs(diff[keep]), initial=0.0) <= 1e-12


def test_mass_matrix(square):
    sp_ = build_space(uniform_refine(square, 1), "p1")
    M = mass_matrix(sp_).toarray()
    assert M.sum() == pytest.approx(1.0, rel=1e-14)
    M0 = mass_matrix(build_space(square, "p0")).toarray()
    np.testing.assert_allclose(np.diag(M0), 0.25)


def test_locate_and_evaluation_matrix(lshape, rng):
    from fracml.fem import barycentric, evaluation_matrix, locate
    mesh = random_refinement(uniform_refine(lshape, 1), rng, 3)
    pts = np.vstack([mesh.coords[mesh.vertex_ids], rng.uniform(-1, 1, (200, 2))])
    pts = pts[~((pts[:, 0] > 0) & (pts[:, 1] > 0))]        # drop the missing quadrant
    elems = locate(mesh, pts)
    f = mesh.forest
    for x, e in zip(pts, elems):
        assert e in mesh.element_set
        assert barycentric(f.triangle_coords(e)[None], x[None]).min() >= -1e-12
    for family in ("p1", "p1_zero_bc", "p0"):
        space = build_space(mesh, family)
        u = CoefVector(space, rng.standard_normal(space.ndof))
        E = evaluation_matrix(space, pts)
        np.testing.assert_allclose(E @ u.values, evaluate(u, pts), atol=1e-14)
