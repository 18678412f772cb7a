"""Finest common coarsening and nested mesh hierarchies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .mesh import MeshError, MeshView, uniform_refine

__all__ = ["fcc", "fcc_parts", "Hierarchy", "build_fcc_hierarchy",
           "build_adaptive_hierarchy", "build_uniform_hierarchy", "uniform_mesh", "chop"]


def _strict_ancestor_in(forest, node: int, members: frozenset[int]) -> int | None:
    for a in forest.ancestors(node):
        if a in members:
            return a
    return None


def fcc_parts(a: MeshView, b: MeshView) -> tuple[set[int], set[int], set[int]]:
    """Return the sets (B1, B2, B3) whose union is the finest common coarsening.

    B1 holds elements of ``a`` that strictly contain elements of ``b``, B2 the
    converse, and B3 the shared elements.
    """
    if a.forest is not b.forest:
        raise MeshError("meshes live on different forests")
    f = a.forest
    sa, sb = a.element_set, b.element_set
    b3 = set(sa & sb)
    # an element of a without an ancestor in b has descendants in b (cuts of one forest)
    b1 = {t for t in sa - sb if _strict_ancestor_in(f, t, sb) is None}
    b2 = {t for t in sb - sa if _strict_ancestor_in(f, t, sa) is None}
    return b1, b2, b3


def fcc(a: MeshView, b: MeshView) -> MeshView:
    """Finest common coarsening of two meshes over the same forest."""
    b1, b2, b3 = fcc_parts(a, b)
    return MeshView(a.forest, b1 | b2 | b3)


def uniform_mesh(forest, level: int) -> MeshView:
    """The ``level``-fold uniform refinement of the forest roots (cached on the forest)."""
    cache = forest.__dict__.setdefault("_uniform_levels", {})
    if level not in cache:
        cache[level] = MeshView(forest, forest.roots) if level == 0 else \
            uniform_refine(uniform_mesh(forest, level - 1), 1)
    return cache[level]


@dataclass
class Hierarchy:
    """Nested sequence of meshes over one forest.

    ``levels[l+1]`` refines ``levels[l]``.  Node and marked sets are attached
    later by the preconditioner code (``extra`` holds such per-run caches).
    """

    forest: object
    levels: list[MeshView]
    kind: str
    extra: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.levels) - 1

    def hat_h(self, level: int) -> float:
        """Mesh size of the uniform reference mesh at ``level``."""
        base = MeshView(self.forest, self.forest.roots)
        return float(base.diameters.max()) * 2.0 ** (-level)


def _check_nested(levels: Sequence[MeshView]) -> None:
    for lo, hi in zip(levels[:-1], levels[1:]):
        if not hi.refines(lo):
            raise MeshError("hierarchy levels are not nested")


def required_depth(t_final: MeshView) -> int:
    """Smallest L with max generation <= 2 L."""
    return (t_final.max_generation + 1) // 2


def chop(t_final: MeshView, level: int) -> MeshView:
    """``fcc(t_final, uniform(level))`` without building the uniform mesh.

    Elements up to generation ``2 level`` are kept, deeper ones are replaced by
    their ancestor of generation ``2 level``.
    """
    f = t_final.forest
    cut = 2 * level
    out = set()
    for e in t_final.elements:
        while f.generation[e] > cut:
            e = f.parent[e]
        out.add(e)
    return MeshView(f, out)


def build_fcc_hierarchy(t_final: MeshView, L: int | None = None) -> Hierarchy:
    """Levels ``fcc(t_final, uniform(l))`` for l = 0..L."""
    if L is not None and L < 0:
        raise MeshError("L must be non-negative")
    Lmax = required_depth(t_final)
    L = Lmax if L is None else min(L, Lmax)
    f = t_final.forest
    levels = [chop(t_final, l) for l in range(L + 1)]
    if L == Lmax and levels[-1] != t_final:
        raise MeshError("top level of the fcc hierarchy differs from the final mesh")
    _check_nested(levels)
    return Hierarchy(f, levels, "fcc")


def build_adaptive_hierarchy(snapshots: Sequence[MeshView]) -> Hierarchy:
    """Wrap a nested sequence of adaptively refined meshes."""
    snapshots = list(snapshots)
    if not snapshots:
        raise MeshError("need at least one mesh")
    f = snapshots[0].forest
    if any(s.forest is not f for s in snapshots):
        raise MeshError("meshes live on different forests")
    _check_nested(snapshots)
    return Hierarchy(f, snapshots, "adaptive")


def build_uniform_hierarchy(initial: MeshView, L: int) -> Hierarchy:
    levels = [initial]
    for _ in range(L):
        levels.append(uniform_refine(levels[-1], 1))
    return Hierarchy(initial.forest, levels, "uniform")
