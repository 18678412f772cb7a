"""Finite element spaces, prolongations and Scott-Zhang quasi-interpolation.

Families
--------
``p1``          continuous piecewise linears, one dof per vertex
``p1_zero_bc``  the same with zero trace, one dof per interior vertex
``p0``          piecewise constants, one dof per element
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, MeshView
from .quadrature import triangle_rule

__all__ = [
    "FeSpace", "CoefVector", "AveragingAssignment", "build_space", "prolongation",
    "locate", "evaluate", "evaluation_matrix", "mass_matrix", "dual_basis_coefficients", "assign_averaging",
    "assign_averaging_implicit", "assign_averaging_leveled", "scott_zhang_apply",
    "marked_nodes", "scott_zhang_matrix", "FAMILIES",
]

FAMILIES = ("p1", "p1_zero_bc", "p0")


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: MeshView
    family: str
    nodes: np.ndarray          # vertex ids (p1 families) or element ids (p0)

    @cached_property
    def dof_of_node(self) -> dict[int, int]:
        return {int(n): i for i, n in enumerate(self.nodes)}

    @property
    def ndof(self) -> int:
        return len(self.nodes)

    @cached_property
    def node_xy(self) -> np.ndarray:
        if self.family == "p0":
            return self.mesh.points[[self.mesh.index[e] for e in self.nodes]].mean(axis=1)
        return self.mesh.coords[self.nodes]

    @cached_property
    def element_dofs(self) -> np.ndarray:
        """(ne, nloc) dof index of each local basis function, -1 if absent."""
        if self.family == "p0":
            d = self.dof_of_node
            return np.array([[d[e]] for e in self.mesh.elements], dtype=np.int64).reshape(-1, 1)
        lut = np.full(self.mesh.coords.shape[0], -1, dtype=np.int64)
        lut[self.nodes] = np.arange(self.ndof)
        return lut[self.mesh.tri]

    @property
    def nloc(self) -> int:
        return 1 if self.family == "p0" else 3


@dataclass
class CoefVector:
    space: FeSpace
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.space.ndof,):
            raise ValueError("coefficient length does not match the dof count")


@dataclass
class AveragingAssignment:
    """Averaging element ``T_z`` (forest node id) for every node ``z``."""

    T_z: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, z: int) -> int:
        return self.T_z[z]

    def __len__(self) -> int:
        return len(self.T_z)


def build_space(mesh: MeshView, family: str) -> FeSpace:
    """Nodes in lexicographic order of their coordinates."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if family == "p0":
        ids = np.array(mesh.elements, dtype=np.int64)
        xy = mesh.points.mean(axis=1)
    else:
        ids = mesh.vertex_ids if family == "p1" else mesh.interior_vertices
        xy = mesh.coords[ids]
    order = np.lexsort((xy[:, 1], xy[:, 0])) if len(ids) else np.array([], dtype=np.int64)
    return FeSpace(mesh, family, ids[order])


def barycentric(tri_xy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` (n, 2) in triangles ``tri_xy`` (n, 3, 2)."""
    a, b, c = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    e1, e2, r = b - a, c - a, x - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def _ancestor_in(forest, node: int, members) -> int | None:
    if node in members:
        return node
    for a in forest.ancestors(node):
        if a in members:
            return a
    return None


def locate(mesh: MeshView, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Forest node id of a mesh element containing each point (closed triangles)."""
    f = mesh.forest
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if not len(points):
        return np.zeros(0, dtype=np.int64)
    xy = f.coords()
    tri = np.array(f.tri, dtype=np.int64)
    children = np.array([c if c is not None else (-1, -1) for c in f.children], dtype=np.int64)
    member = np.zeros(f.n_nodes, dtype=bool)
    member[list(mesh.element_set)] = True
    node = np.full(len(points), -1, dtype=np.int64)
    for r in reversed(f.roots):
        lam = barycentric(np.broadcast_to(xy[tri[r]], (len(points), 3, 2)), points)
        node[lam.min(axis=1) >= -tol] = r
    if np.any(node < 0):
        raise MeshError(f"point {points[np.argmin(node)]} lies outside the domain")
    active = np.nonzero(~member[node])[0]
    while len(active):
        ch = children[node[active]]
        if np.any(ch < 0):
            raise MeshError("mesh does not cover the forest cut")
        x = points[active]
        l0 = barycentric(xy[tri[ch[:, 0]]], x).min(axis=1)
        l1 = barycentric(xy[tri[ch[:, 1]]], x).min(axis=1)
        node[active] = np.where(l0 >= l1, ch[:, 0], ch[:, 1])
        active = active[~member[node[active]]]
    return node


def evaluation_matrix(space: FeSpace, points: np.ndarray) -> sp.csr_matrix:
    """Sparse E with E @ coefficients = point values (points located once)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = space.mesh
    elems = locate(mesh, points)
    rows = np.array([mesh.index[e] for e in elems.tolist()], dtype=np.int64)
    dofs = space.element_dofs[rows]
    if space.family == "p0":
        w = np.ones((len(points), 1))
        dofs = dofs[:, :1]
    else:
        w = barycentric(mesh.points[rows], points)
    r = np.repeat(np.arange(len(points)), dofs.shape[1])
    keep = dofs.ravel() >= 0
    return sp.csr_matrix((w.ravel()[keep], (r[keep], dofs.ravel()[keep])),
                         shape=(len(points), space.ndof))


def _eval_on_elements(u: CoefVector, elems: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ``u`` at points ``x`` known to lie in forest elements ``elems``."""
    sp_ = u.space
    mesh = sp_.mesh
    rows = np.array([mesh.index[e] for e in elems], dtype=np.int64)
    dofs = sp_.element_dofs[rows]
    coef = np.where(dofs >= 0, u.values[np.maximum(dofs, 0)], 0.0)
    if sp_.family == "p0":
        return coef[:, 0]
    lam = barycentric(mesh.points[rows], x)
    return np.sum(lam * coef, axis=1)


def evaluate(u: CoefVector, points: np.ndarray) -> np.ndarray:
    """Point values of a discrete function."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    elems = locate(u.space.mesh, points)
    return _eval_on_elements(u, elems, points)


def prolongation(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Matrix mapping coarse coefficients to fine coefficients of the same function."""
    if coarse.family != fine.family:
        raise ValueError("spaces belong to different families")
    if not fine.mesh.refines(coarse.mesh):
        raise MeshError("fine mesh does not refine the coarse mesh")
    f = fine.mesh.forest
    members = coarse.mesh.element_set
    rows, cols, vals = [], [], []
    if coarse.family == "p0":
        cd = coarse.dof_of_node
        for i, e in enumerate(fine.nodes.tolist()):
            rows.append(i)
            cols.append(cd[_ancestor_in(f, e, members)])
            vals.append(1.0)
    else:
        cd = coarse.dof_of_node
        vp = fine.mesh.vertex_patches
        xy = fine.mesh.coords
        owners = np.array([_ancestor_in(f, vp[z][0], members) for z in fine.nodes.tolist()],
                          dtype=np.int64)
        if len(owners):
            lam = barycentric(np.array([f.triangle_coords(o) for o in owners]), xy[fine.nodes])
        for i, (z, o) in enumerate(zip(fine.nodes.tolist(), owners.tolist())):
            if z in cd:
                rows.append(i)
                cols.append(cd[z])
                vals.append(1.0)
                continue
            for k, v in enumerate(f.tri[o]):
                if v in cd and abs(lam[i, k]) > 1e-14:
                    rows.append(i)
                    cols.append(cd[v])
                    vals.append(lam[i, k])
    return sp.csr_matrix((vals, (rows, cols)), shape=(fine.ndof, coarse.ndof))


def mass_matrix(space: FeSpace) -> sp.csr_matrix:
    """L2 Gram matrix of the basis."""
    mesh = space.mesh
    dofs = space.element_dofs
    if space.family == "p0":
        return sp.csr_matrix(sp.diags(mesh.areas[np.argsort(dofs[:, 0])]))
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            ok = (dofs[:, a] >= 0) & (dofs[:, b] >= 0)
            rows.append(dofs[ok, a])
            cols.append(dofs[ok, b])
            vals.append(mesh.areas[ok] * local[a, b])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(space.ndof, space.ndof))


def dual_basis_coefficients(area: float) -> np.ndarray:
    """Matrix C with psi*_a = sum_b C[a, b] lambda_b on a triangle of the given area.

    C is the inverse of the local P1 mass matrix.
    """
    return (3.0 / area) * (4.0 * np.eye(3) - np.ones((3, 3)))


# ---------------------------------------------------------------------------
# averaging elements
# ---------------------------------------------------------------------------

def _contains_open(xy: np.ndarray, p: np.ndarray) -> bool:
    lam = barycentric(xy[None], p[None])[0]
    return bool(lam.min() > 1e-12)


def _contains_closed(xy: np.ndarray, p: np.ndarray) -> bool:
    lam = barycentric(xy[None], p[None])[0]
    return bool(lam.min() >= -1e-12)


def assign_averaging(T: MeshView, hat_mesh: MeshView, tilde_mesh: MeshView,
                     extra_nodes: Mapping[object, tuple[float, float]] | None = None
                     ) -> tuple[AveragingAssignment, AveragingAssignment]:
    """Paired averaging elements for the uniform and the coarsened mesh.

    Nodes are the mesh vertices plus optional ``extra_nodes`` given by
    coordinates (keys must not clash with vertex ids).  Loops run over
    sorted forest ids.  When several pairs qualify for the "finer element
    inside a final-mesh element" rule, the pair with the smallest final-mesh
    element id (then smallest fine element id) is taken.
    """
    from .hierarchy import fcc
    if fcc(T, hat_mesh) != tilde_mesh:
        raise MeshError("tilde mesh is not the fcc of T and the hat mesh")
    f = T.forest
    T_set = T.element_set
    hat_set, tilde_set = hat_mesh.element_set, tilde_mesh.element_set
    extra = {k: np.asarray(v, dtype=float) for k, v in (extra_nodes or {}).items()}
    xy = T.coords

    def nodes_of(el):
        out = list(f.tri[el])
        txy = f.triangle_coords(el)
        out += [k for k, p in extra.items() if _contains_closed(txy, p)]
        return out

    def is_inside(z, el):
        return z in extra and _contains_open(f.triangle_coords(el), extra[z])

    def hat_patch(z):
        if z in extra:
            return [e for e in hat_mesh.elements if _contains_closed(f.triangle_coords(e), extra[z])]
        return list(hat_mesh.vertex_patches.get(z, ()))

    hat, tilde = {}, {}
    for el in sorted(hat_set & tilde_set):
        for z in nodes_of(el):
            if z in hat and z in tilde:
                continue
            if is_inside(z, el):
                hat.setdefault(z, el)
                tilde.setdefault(z, el)
                continue
            pairs = []
            for tp in hat_patch(z):
                anc = next((a for a in f.ancestors(tp) if a in T_set), None)
                if anc is not None:
                    pairs.append((anc, tp))
            if pairs:
                anc, tp = min(pairs)
                hat.setdefault(z, tp)
                tilde.setdefault(z, anc)
            else:
                hat.setdefault(z, el)
                tilde.setdefault(z, el)
    for el in sorted(tilde_set - hat_set):
        for z in nodes_of(el):
            tilde.setdefault(z, el)
    for el in sorted(hat_set - tilde_set):
        for z in nodes_of(el):
            hat.setdefault(z, el)
    del xy
    return AveragingAssignment(hat), AveragingAssignment(tilde)


def assign_averaging_implicit(T: MeshView, tilde_mesh: MeshView, level: int,
                              preset: Mapping[int, int] | None = None) -> AveragingAssignment:
    """Averaging elements on ``tilde_mesh = fcc(T, uniform(level))`` without the uniform mesh.

    Gives the same choice as :func:`assign_averaging` for the vertex nodes.
    Nodes in ``preset`` keep their given element.
    """
    f = T.forest
    T_set = T.element_set
    cut = 2 * level
    vp = tilde_mesh.vertex_patches
    tilde = dict(preset or {})
    gens = f.generation
    common = sorted(e for e in tilde_mesh.elements if gens[e] == cut)
    for el in common:
        for z in f.tri[el]:
            if z in tilde:
                continue
            cands = [e for e in vp[z] if gens[e] < cut and e in T_set]
            tilde[z] = min(cands) if cands else el
    for el in sorted(e for e in tilde_mesh.elements if gens[e] < cut):
        for z in f.tri[el]:
            tilde.setdefault(z, el)
    return AveragingAssignment(tilde)


def marked_nodes(coarse: MeshView | None, fine: MeshView, family: str) -> np.ndarray:
    """Nodes of ``fine`` that are new or whose vertex patch changed (sorted ids).

    For ``p0`` these are the elements of ``fine`` not present in ``coarse``.
    """
    if family == "p0":
        if coarse is None:
            return np.array(fine.elements, dtype=np.int64)
        return np.array(sorted(fine.element_set - coarse.element_set), dtype=np.int64)
    nodes = fine.vertex_ids if family == "p1" else fine.interior_vertices
    if coarse is None:
        return np.array(sorted(nodes.tolist()), dtype=np.int64)
    cp, fp = coarse.vertex_patches, fine.vertex_patches
    out = [z for z in nodes.tolist() if z not in cp or cp[z] != fp[z]]
    return np.array(sorted(out), dtype=np.int64)


def assign_averaging_leveled(T: MeshView, hierarchy, family: str = "p1_zero_bc"
                             ) -> list[AveragingAssignment]:
    """Per-level averaging elements where unmarked nodes inherit the previous choice."""
    if hierarchy.kind != "fcc":
        raise ValueError("leveled assignments need an fcc hierarchy")
    out: list[AveragingAssignment] = []
    prev = None
    for l, mesh in enumerate(hierarchy.levels):
        preset = {}
        if prev is not None:
            marked = set(marked_nodes(hierarchy.levels[l - 1], mesh, family).tolist())
            nodes = mesh.vertex_ids if family == "p1" else mesh.interior_vertices
            preset = {z: prev.T_z[z] for z in nodes.tolist() if z not in marked}
        cur = assign_averaging_implicit(T, mesh, l, preset)
        out.append(cur)
        prev = cur
    return out


# ---------------------------------------------------------------------------
# Scott-Zhang application
# ---------------------------------------------------------------------------

def _descendants_in(forest, node: int, members) -> list[int]:
    out, stack = [], [node]
    while stack:
        e = stack.pop()
        if e in members:
            out.append(e)
            continue
        ch = forest.children[e]
        if ch is None:
            raise MeshError("input mesh does not cover the averaging element")
        stack.extend(ch)
    return out


def _sz_pieces(space: FeSpace, avg: AveragingAssignment, source: MeshView | None):
    """Integration pieces (dof index, averaging element, piece element, source element)."""
    f = space.mesh.forest
    dof_idx, avg_el, piece, src = [], [], [], []
    members = source.element_set if source is not None else None
    for i, z in enumerate(space.nodes.tolist()):
        tz = avg.T_z[z]
        if members is None:
            pieces = [(tz, tz)]
        else:
            owner = _ancestor_in(f, tz, members)
            pieces = [(tz, owner)] if owner is not None else \
                [(d, d) for d in _descendants_in(f, tz, members)]
        for pc, so in pieces:
            dof_idx.append(i)
            avg_el.append(tz)
            piece.append(pc)
            src.append(so)
    return np.array(dof_idx, dtype=np.int64), avg_el, piece, src


def _sz_weights(f, z_list, dof_idx, avg_el, piece):
    """Quadrature points on the pieces and the weights |piece| w_q psi*_z(x_q)."""
    ref_pts, ref_w = triangle_rule(5)
    avg_xy = np.array([f.triangle_coords(e) for e in avg_el])
    piece_xy = np.array([f.triangle_coords(e) for e in piece])
    e1, e2 = piece_xy[:, 1] - piece_xy[:, 0], piece_xy[:, 2] - piece_xy[:, 0]
    piece_area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    lam_ref = np.column_stack([1 - ref_pts.sum(axis=1), ref_pts])
    x = np.einsum("qk,nkd->nqd", lam_ref, piece_xy)
    n, nq = x.shape[:2]
    a1, a2 = avg_xy[:, 1] - avg_xy[:, 0], avg_xy[:, 2] - avg_xy[:, 0]
    avg_area = 0.5 * np.abs(a1[:, 0] * a2[:, 1] - a1[:, 1] * a2[:, 0])
    lam = barycentric(np.repeat(avg_xy, nq, axis=0), x.reshape(-1, 2)).reshape(n, nq, 3)
    zk = np.array([f.tri[e].index(z_list[i]) for e, i in zip(avg_el, dof_idx)])
    psi = (12.0 * lam[np.arange(n), :, zk] - 3.0) / avg_area[:, None]
    return x, piece_area[:, None] * ref_w[None, :] * psi


def scott_zhang_matrix(space: FeSpace, avg: AveragingAssignment, source: FeSpace) -> sp.csr_matrix:
    """Sparse matrix of the Scott-Zhang functionals acting on coefficients of ``source``.

    ``source`` must be a p1 family on a mesh of the same forest; the
    integrals are exact since the integrands are quadratic on every piece.
    """
    if space.family == "p0" or source.family == "p0":
        raise ValueError("Scott-Zhang is defined for the p1 families")
    f = space.mesh.forest
    z_list = space.nodes.tolist()
    dof_idx, avg_el, piece, src = _sz_pieces(space, avg, source.mesh)
    if len(dof_idx) == 0:
        return sp.csr_matrix((space.ndof, source.ndof))
    x, wpsi = _sz_weights(f, z_list, dof_idx, avg_el, piece)
    n, nq = wpsi.shape
    src_rows = np.array([source.mesh.index[e] for e in src], dtype=np.int64)
    lam = barycentric(np.repeat(source.mesh.points[src_rows], nq, axis=0),
                      x.reshape(-1, 2)).reshape(n, nq, 3)
    vals = np.einsum("nq,nqk->nk", wpsi, lam)
    cols = source.element_dofs[src_rows]
    rows = np.repeat(dof_idx[:, None], 3, axis=1)
    ok = cols >= 0
    return sp.csr_matrix((vals[ok], (rows[ok], cols[ok])), shape=(space.ndof, source.ndof))


def scott_zhang_apply(space: FeSpace, avg: AveragingAssignment,
                      u: Callable | CoefVector) -> CoefVector:
    """Coefficients ``int_{T_z} psi*_z u`` for every dof node ``z``.

    ``u`` is either a callable ``u(x, y)`` (integrated with the 7-point
    degree-5 rule) or a discrete p1 function on a mesh of the same forest
    (integrated exactly, piece by piece).
    """
    if space.family == "p0":
        raise ValueError("Scott-Zhang is defined for the p1 families")
    if isinstance(u, CoefVector):
        return CoefVector(space, scott_zhang_matrix(space, avg, u.space) @ u.values)
    f = space.mesh.forest
    dof_idx, avg_el, piece, _ = _sz_pieces(space, avg, None)
    if len(dof_idx) == 0:
        return CoefVector(space, np.zeros(space.ndof))
    x, wpsi = _sz_weights(f, space.nodes.tolist(), dof_idx, avg_el, piece)
    vals = np.asarray(u(x[..., 0], x[..., 1]), dtype=float) * np.ones(wpsi.shape)
    out = np.zeros(space.ndof)
    np.add.at(out, dof_idx, np.sum(wpsi * vals, axis=1))
    return CoefVector(space, out)
