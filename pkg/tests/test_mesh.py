import itertools

import numpy as np
import pytest

from fracml.mesh import (MeshError, MeshView, RefinementForest, bisect, hanging_nodes,
                         make_initial_mesh, patch, read_mesh, refine, shape_regularity,
                         uniform_refine, write_mesh)
from fracml.oracles import completion_bruteforce

from conftest import random_refinement, two_triangle_square


def _unit_right_triangle():
    f = RefinementForest(np.array([(0, 0), (1, 0), (0, 1)], dtype=float), [(0, 1, 2)])
    return MeshView(f, f.roots)


def _covers(mesh, area):
    return abs(mesh.areas.sum() - area) <= 1e-14 * area


def test_initial_meshes(square, lshape):
    assert len(square) == 4 and len(lshape) == 6
    assert _covers(square, 1.0) and _covers(lshape, 3.0)
    assert set(map(tuple, square.coords[square.tri[:, 0]].tolist())) == {(0.5, 0.5)}
    # every initial triangle is a right isosceles triangle: value of the unit right triangle
    ref = shape_regularity(_unit_right_triangle())
    assert ref == pytest.approx(2.0, abs=1e-14)
    assert shape_regularity(square) == pytest.approx(ref, abs=1e-14)
    assert shape_regularity(lshape) == pytest.approx(ref, abs=1e-14)
    with pytest.raises(MeshError):
        make_initial_mesh("disk")


def test_bisect_halves_area_and_shares_midpoint(square):
    f = square.forest
    e = square.elements[0]
    area = f.area(e)
    c1, c2 = bisect(f, e)
    assert f.area(c1) == pytest.approx(area / 2, rel=1e-15)
    assert f.area(c2) == pytest.approx(area / 2, rel=1e-15)
    assert f.generation[c1] == f.generation[e] + 1
    with pytest.raises(MeshError):
        bisect(f, e)


def test_shared_refinement_edge_creates_one_vertex():
    mesh = two_triangle_square()
    f = mesh.forest
    nv = f.n_vertices
    bisect(f, 0)
    bisect(f, 1)
    assert f.n_vertices == nv + 1
    assert f.vertex(nv) == (0.5, 0.5)


def test_new_vertex_is_midpoint_and_refinement_edge_opposite(square):
    f = square.forest
    e = square.elements[1]
    v0, v1, v2 = f.tri[e]
    c1, c2 = bisect(f, e)
    m = f.tri[c1][0]
    assert f.tri[c2][0] == m
    assert np.allclose(f.vertex(m), (np.array(f.vertex(v1)) + np.array(f.vertex(v2))) / 2, atol=0)


def _similarity_key(xy):
    e = sorted(np.linalg.norm(xy[[1, 2, 0]] - xy, axis=1))
    return tuple(np.round(np.array(e) / e[-1], 12))


def test_finitely_many_similarity_classes(square):
    f = square.forest
    frontier = [square.elements[0]]
    classes = set()
    for _ in range(10):
        nxt = []
        for n in frontier:
            classes.add(_similarity_key(f.triangle_coords(n)))
            nxt.extend(f.split(n))
        frontier = nxt
    assert len(classes) <= 4


def test_refine_empty_and_all(square):
    assert refine(square, []) == square
    fine = refine(square, square.elements)
    assert len(fine) == 8
    assert set(fine.generations.tolist()) == {1}


def test_refine_closure_on_neighbour():
    mesh = uniform_refine(make_initial_mesh("unit_square"), 1)
    f = mesh.forest
    # find an element whose refinement edge is not shared with the neighbour across it
    for e in mesh.elements:
        v1, v2 = f.tri[e][1:]
        nb = [o for o in mesh.edge_map[(min(v1, v2), max(v1, v2))] if o != e]
        if nb and set(f.tri[nb[0]][1:]) != {v1, v2}:
            break
    else:
        pytest.fail("no incompatible neighbour found")
    out = refine(mesh, [e])
    assert hanging_nodes(out) == []
    assert nb[0] not in out.element_set           # closure bisected the neighbour
    assert hanging_nodes(refine(mesh, [e], closure=False)) != []


def test_uniform_refine(square, lshape):
    assert uniform_refine(square, 0) == square
    assert len(uniform_refine(square, 1)) == 16
    d0 = lshape.diameters.max()
    assert uniform_refine(lshape, 3).diameters.max() == pytest.approx(d0 / 8, abs=1e-12)
    with pytest.raises(MeshError):
        uniform_refine(square, -1)


def test_refine_invariants_random(lshape, rng):
    mesh = lshape
    for _ in range(8):
        k = max(1, len(mesh) // 5)
        fine = refine(mesh, rng.choice(np.array(mesh.elements), size=k, replace=False).tolist())
        assert hanging_nodes(fine) == []
        assert fine.refines(mesh)
        assert _covers(fine, 3.0)
        f = fine.forest
        for e, g in zip(fine.elements, fine.generations.tolist()):
            root = f.root_of(e)
            assert f.area(e) == pytest.approx(f.area(root) * 2.0 ** (-g), rel=1e-14)
        mesh = fine


def test_patches(square, rng):
    mesh = uniform_refine(square, 1)
    f = mesh.forest
    e = mesh.elements[0]
    p1 = patch(mesh, element=e)
    verts = set(f.tri[e])
    expected = {o for o in mesh.elements if verts & set(f.tri[o])}
    assert p1 == expected
    with pytest.raises(MeshError):
        patch(mesh, element=e, order=0)
    with pytest.raises(MeshError):
        patch(mesh, element=-5)
    rand = random_refinement(square, rng, 4)
    for e in rand.elements[:10]:
        one = patch(rand, element=e)
        two = set().union(*(patch(rand, element=o) for o in one))
        assert patch(rand, element=e, order=2) == two


def test_corner_vertex_patches(square):
    # criss-cross square: each corner touches two triangles
    assert all(len(patch(square, vertex=v)) == 2 for v in range(4))
    # diagonal square: the two corners off the diagonal touch one triangle
    two = two_triangle_square()
    assert len(patch(two, vertex=1)) == 1 and len(patch(two, vertex=3)) == 1


def test_shape_regularity_bounded_by_classes(square, rng):
    f = square.forest
    frontier = list(square.elements)
    worst = 0.0
    for _ in range(8):
        nxt = []
        for n in frontier:
            xy = f.triangle_coords(n)
            d = max(np.linalg.norm(xy[i] - xy[j]) for i, j in itertools.combinations(range(3), 2))
            worst = max(worst, d / np.sqrt(f.area(n)))
            nxt.extend(f.split(n))
        frontier = nxt
    mesh = random_refinement(make_initial_mesh("unit_square"), rng, 6)
    assert shape_regularity(mesh) <= worst + 1e-12
    assert shape_regularity(uniform_refine(mesh, 1)) <= worst + 1e-12


def test_degenerate_root_rejected():
    with pytest.raises(MeshError):
        RefinementForest(np.array([(0, 0), (1, 0), (2, 0)], dtype=float), [(0, 1, 2)])


def test_mesh_text_roundtrip(tmp_path, lshape, rng):
    mesh = random_refinement(lshape, rng, 3)
    path = tmp_path / "m.txt"
    write_mesh(mesh, path)
    xy, tri, gen = read_mesh(path)
    assert tri.shape == (len(mesh), 3)
    np.testing.assert_array_equal(xy[tri], mesh.points)
    np.testing.assert_array_equal(gen, mesh.generations)


def test_minimal_completion_unique(rng):
    for trial in range(6):
        mesh = make_initial_mesh("unit_square")
        if trial % 2:
            mesh = refine(mesh, [mesh.elements[trial % len(mesh)]])
        marked = rng.choice(np.array(mesh.elements), size=1 + trial % 2, replace=False).tolist()
        res = completion_bruteforce(mesh, marked, depth=2)
        assert res.unique and res.coarsest
        assert res.minimal == refine(mesh, marked)
