"""Newest-vertex bisection forests and mesh snapshots in 2D.

Every triangle ever created lives in a :class:`RefinementForest`.  A mesh is
a :class:`MeshView`, i.e. a sorted tuple of forest node ids that partition the
domain.  Triangles store their vertices as ``(v0, v1, v2)`` where ``v0`` is the
newest vertex and ``(v1, v2)`` is the refinement edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RefinementForest",
    "MeshView",
    "MeshError",
    "make_initial_mesh",
    "bisect",
    "refine",
    "uniform_refine",
    "patch",
    "shape_regularity",
    "hanging_nodes",
    "write_mesh",
    "read_mesh",
]


class MeshError(ValueError):
    """Raised for invalid forest or mesh operations."""


class RefinementForest:
    """Binary forest of triangles created by newest-vertex bisection.

    Nodes are never removed, so any :class:`MeshView` taken earlier stays
    valid after further refinement.
    """

    def __init__(self, coords: np.ndarray, triangles: Sequence[Sequence[int]]):
        coords = np.asarray(coords, dtype=float)
        if not np.all(np.isfinite(coords)):
            raise MeshError("vertex coordinates must be finite")
        self._xy: list[tuple[float, float]] = [(float(x), float(y)) for x, y in coords]
        self.tri: list[tuple[int, int, int]] = []
        self.parent: list[int] = []
        self.children: list[tuple[int, int] | None] = []
        self.generation: list[int] = []
        self._midpoint: dict[tuple[int, int], int] = {}
        for t in triangles:
            self._add_node(tuple(int(v) for v in t), -1, 0)
        self.roots = tuple(range(len(self.tri)))
        for r in self.roots:
            if self.area(r) <= 0.0:
                raise MeshError(f"root {r} must be positively oriented")

    # -- storage -----------------------------------------------------------
    def _add_node(self, verts, parent, gen):
        self.tri.append(verts)
        self.parent.append(parent)
        self.children.append(None)
        self.generation.append(gen)
        return len(self.tri) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.tri)

    @property
    def n_vertices(self) -> int:
        return len(self._xy)

    def coords(self) -> np.ndarray:
        return np.array(self._xy, dtype=float).reshape(-1, 2)

    def vertex(self, v: int) -> tuple[float, float]:
        return self._xy[v]

    def triangle_coords(self, node: int) -> np.ndarray:
        return np.array([self._xy[v] for v in self.tri[node]])

    def area(self, node: int) -> float:
        (ax, ay), (bx, by), (cx, cy) = (self._xy[v] for v in self.tri[node])
        return 0.5 * ((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))

    def is_leaf(self, node: int) -> bool:
        return self.children[node] is None

    def ancestors(self, node: int) -> list[int]:
        """Strict ancestors, nearest first."""
        out = []
        p = self.parent[node]
        while p >= 0:
            out.append(p)
            p = self.parent[p]
        return out

    def root_of(self, node: int) -> int:
        while self.parent[node] >= 0:
            node = self.parent[node]
        return node

    def is_ancestor(self, a: int, b: int) -> bool:
        """True if ``a`` is a strict ancestor of ``b``."""
        if self.generation[a] >= self.generation[b]:
            return False
        while self.generation[b] > self.generation[a]:
            b = self.parent[b]
        return a == b

    def midpoint_vertex(self, a: int, b: int) -> int | None:
        return self._midpoint.get((min(a, b), max(a, b)))

    # -- bisection -----------------------------------------------------------
    def _midpoint_of(self, a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        m = self._midpoint.get(key)
        if m is None:
            (ax, ay), (bx, by) = self._xy[a], self._xy[b]
            self._xy.append((0.5 * (ax + bx), 0.5 * (ay + by)))
            m = len(self._xy) - 1
            self._midpoint[key] = m
        return m

    def split(self, node: int) -> tuple[int, int]:
        """Children of ``node``, bisecting it first if it is a leaf."""
        ch = self.children[node]
        if ch is not None:
            return ch
        v0, v1, v2 = self.tri[node]
        m = self._midpoint_of(v1, v2)
        g = self.generation[node] + 1
        c1 = self._add_node((m, v0, v1), node, g)
        c2 = self._add_node((m, v2, v0), node, g)
        self.children[node] = (c1, c2)
        return c1, c2


def bisect(forest: RefinementForest, node: int) -> tuple[int, int]:
    """Bisect a leaf of the forest and return its two children."""
    if not 0 <= node < forest.n_nodes:
        raise MeshError(f"unknown forest node {node}")
    if not forest.is_leaf(node):
        raise MeshError(f"node {node} is already bisected")
    return forest.split(node)


@dataclass(frozen=True, eq=False)
class MeshView:
    """Immutable triangulation given by a cut through the forest."""

    forest: RefinementForest
    elements: tuple[int, ...] = field()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(sorted(int(e) for e in self.elements)))

    def __len__(self) -> int:
        return len(self.elements)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MeshView) and other.forest is self.forest
                and other.elements == self.elements)

    def __hash__(self) -> int:
        return hash((id(self.forest), self.elements))

    @cached_property
    def element_set(self) -> frozenset[int]:
        return frozenset(self.elements)

    @cached_property
    def index(self) -> dict[int, int]:
        """Forest node id -> row in the element arrays."""
        return {e: i for i, e in enumerate(self.elements)}

    @cached_property
    def tri(self) -> np.ndarray:
        """(ne, 3) forest vertex ids, newest vertex first."""
        return np.array([self.forest.tri[e] for e in self.elements], dtype=np.int64).reshape(-1, 3)

    @cached_property
    def vertex_ids(self) -> np.ndarray:
        return np.unique(self.tri)

    @cached_property
    def coords(self) -> np.ndarray:
        """Coordinates of all forest vertices (indexed by forest vertex id)."""
        return self.forest.coords()

    @cached_property
    def points(self) -> np.ndarray:
        """(ne, 3, 2) vertex coordinates per element."""
        return self.coords[self.tri]

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.points
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        p = self.points
        d = [np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return np.max(d, axis=0)

    @cached_property
    def generations(self) -> np.ndarray:
        return np.array([self.forest.generation[e] for e in self.elements], dtype=np.int64)

    @cached_property
    def edge_map(self) -> dict[tuple[int, int], list[int]]:
        """Sorted vertex pair -> element rows containing that edge."""
        out: dict[tuple[int, int], list[int]] = {}
        for i, (a, b, c) in enumerate(self.tri.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                out.setdefault((min(u, v), max(u, v)), []).append(i)
        return out

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """(nb, 2) boundary edges, oriented with the domain on the left."""
        out = []
        for i, (a, b, c) in enumerate(self.tri.tolist()):
            for u, v in ((a, b), (b, c), (c, a)):
                if len(self.edge_map[(min(u, v), max(u, v))]) == 1:
                    out.append((u, v))
        return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)

    @cached_property
    def boundary_vertices(self) -> frozenset[int]:
        return frozenset(self.boundary_edges.ravel().tolist())

    @cached_property
    def interior_vertices(self) -> np.ndarray:
        b = self.boundary_vertices
        return np.array([v for v in self.vertex_ids.tolist() if v not in b], dtype=np.int64)

    @cached_property
    def vertex_patches(self) -> dict[int, tuple[int, ...]]:
        """Vertex id -> sorted forest ids of the elements containing it."""
        out: dict[int, list[int]] = {}
        for e, t in zip(self.elements, self.tri.tolist()):
            for v in t:
                out.setdefault(v, []).append(e)
        return {v: tuple(sorted(es)) for v, es in out.items()}

    @property
    def max_generation(self) -> int:
        return int(self.generations.max()) if len(self) else 0

    def refines(self, other: "MeshView") -> bool:
        """True if every element is a descendant-or-equal of an element of ``other``."""
        if other.forest is not self.forest:
            return False
        coarse = other.element_set
        f = self.forest
        for e in self.elements:
            if e in coarse:
                continue
            if not any(a in coarse for a in f.ancestors(e)):
                return False
        return True


def make_initial_mesh(domain: str) -> MeshView:
    """Initial criss-cross mesh of ``unit_square`` or ``l_shape``.

    All triangles are isosceles right triangles with the hypotenuse as
    refinement edge.
    """
    if domain == "unit_square":
        coords = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)]
        c = 4
        tris = [(c, 0, 1), (c, 1, 2), (c, 2, 3), (c, 3, 0)]
    elif domain == "l_shape":
        coords = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1)]
        # each unit square is cut by its diagonal through the origin (vertex 4)
        tris = [
            (1, 4, 0), (3, 0, 4),   # [-1,0]x[-1,0]
            (5, 4, 2), (1, 2, 4),   # [0,1]x[-1,0]
            (3, 4, 6), (7, 6, 4),   # [-1,0]x[0,1]
        ]
    else:
        raise MeshError(f"unknown domain {domain!r}")
    forest = RefinementForest(np.array(coords, dtype=float), tris)
    mesh = MeshView(forest, forest.roots)
    if not _is_compatible(mesh):
        raise MeshError("initial refinement edges are not compatible")
    return mesh


def _is_compatible(mesh: MeshView) -> bool:
    ref = {}
    for t in mesh.tri.tolist():
        ref[(min(t[1], t[2]), max(t[1], t[2]))] = ref.get((min(t[1], t[2]), max(t[1], t[2])), 0) + 1
    for edge, owners in mesh.edge_map.items():
        if len(owners) == 2 and ref.get(edge, 0) == 1:
            return False
    return True


def _ref_edge(t) -> tuple[int, int]:
    return (min(t[1], t[2]), max(t[1], t[2]))


def refine(mesh: MeshView, marked: Iterable[int], closure: bool = True) -> MeshView:
    """Bisect the marked elements and close the mesh to the minimal regular one.

    With ``closure=False`` only the marked elements are bisected; the result
    may contain hanging nodes (used for fault injection in tests).
    """
    f = mesh.forest
    marked = set(int(m) for m in marked)
    if not marked:
        return mesh
    if not marked <= mesh.element_set:
        raise MeshError("marked elements must belong to the mesh")
    if not closure:
        out = set(mesh.elements) - marked
        for m in marked:
            out.update(f.split(m))
        return MeshView(f, out)

    # closure on edges: an element with a marked edge must mark its refinement edge
    edge_owner = {}
    for e, t in zip(mesh.elements, mesh.tri.tolist()):
        for u, v in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            edge_owner.setdefault((min(u, v), max(u, v)), []).append(e)
    marked_edges: set[tuple[int, int]] = set()
    stack = [_ref_edge(f.tri[m]) for m in marked]
    while stack:
        edge = stack.pop()
        if edge in marked_edges:
            continue
        marked_edges.add(edge)
        for e in edge_owner[edge]:
            r = _ref_edge(f.tri[e])
            if r not in marked_edges:
                stack.append(r)

    out: list[int] = []
    max_gen = mesh.max_generation + 3

    def _descend(node: int) -> None:
        t = f.tri[node]
        if _ref_edge(t) not in marked_edges:
            out.append(node)
            return
        if f.generation[node] > max_gen:
            raise MeshError("closure did not terminate")
        for c in f.split(node):
            ct = f.tri[c]
            # the child's refinement edge is an edge of the parent
            if _ref_edge(ct) in marked_edges:
                _descend(c)
            else:
                out.append(c)

    for e in mesh.elements:
        _descend(e)
    return MeshView(f, out)


def uniform_refine(mesh: MeshView, steps: int = 1) -> MeshView:
    """Replace every element by its four grandchildren, ``steps`` times."""
    if steps < 0:
        raise MeshError("steps must be non-negative")
    for _ in range(2 * steps):
        mesh = refine(mesh, mesh.elements)
    return mesh


def patch(mesh: MeshView, element: int | None = None, vertex: int | None = None,
          order: int = 1) -> frozenset[int]:
    """Element patch of order ``order`` or the vertex patch of ``vertex``."""
    if (element is None) == (vertex is None):
        raise MeshError("give exactly one of element or vertex")
    vp = mesh.vertex_patches
    if vertex is not None:
        if vertex not in vp:
            raise MeshError(f"vertex {vertex} is not in the mesh")
        return frozenset(vp[vertex])
    if element not in mesh.element_set:
        raise MeshError(f"element {element} is not in the mesh")
    if order < 1:
        raise MeshError("patch order must be at least 1")
    f = mesh.forest
    current = {element}
    for _ in range(order):
        verts = {v for e in current for v in f.tri[e]}
        current = {e for v in verts for e in vp[v]}
    return frozenset(current)


def shape_regularity(mesh: MeshView) -> float:
    """max over elements of diam(T) / |T|^(1/2)."""
    a = mesh.areas
    if np.any(a <= 0.0):
        raise MeshError("degenerate element")
    return float(np.max(mesh.diameters / np.sqrt(a)))


def hanging_nodes(mesh: MeshView) -> list[int]:
    """Vertices of the mesh that lie in the interior of an element edge."""
    used = set(mesh.vertex_ids.tolist())
    f = mesh.forest
    out = set()
    for a, b in mesh.edge_map:
        m = f.midpoint_vertex(a, b)
        if m is not None and m in used:
            out.add(m)
    return sorted(out)


def write_mesh(mesh: MeshView, path) -> None:
    """Write the mesh in the plain text format (``nv ne``, coords, elements)."""
    vids = mesh.vertex_ids
    local = {v: i for i, v in enumerate(vids.tolist())}
    xy = mesh.coords[vids]
    with open(path, "w") as fh:
        fh.write(f"{len(vids)} {len(mesh)}\n")
        for x, y in xy:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for t, g in zip(mesh.tri.tolist(), mesh.generations.tolist()):
            fh.write(f"{local[t[0]]} {local[t[1]]} {local[t[2]]} {g}\n")


def read_mesh(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read the text format back as ``(coords, triangles, generations)``."""
    with open(path) as fh:
        nv, ne = (int(t) for t in fh.readline().split())
        xy = np.array([[float(t) for t in fh.readline().split()] for _ in range(nv)]).reshape(-1, 2)
        rows = np.array([[int(t) for t in fh.readline().split()] for _ in range(ne)],
                        dtype=np.int64).reshape(-1, 4)
    return xy, rows[:, :3], rows[:, 3]
