"""Local multilevel diagonal preconditioner and stable-decomposition diagnostics.

The preconditioner is

    B^{-1} = sum_l I^l D_l (I^l)^T,

where I^l embeds level l into the finest space and D_l holds the inverse
diagonal entries of the level-l stiffness matrix on the marked nodes M_l
only.  Vectors are kept in a workspace indexed by forest vertex ids (or
element ids for p0), so restriction and prolongation touch only the nodes
that are new on a level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (FeSpace, CoefVector, build_space, prolongation, marked_nodes,
                  assign_averaging_leveled, scott_zhang_apply, AveragingAssignment)
from .hierarchy import Hierarchy
from .kernel import FracParams, QuadConfig, patch_diagonal, element_diagonal
from .solvers import (EigenReport, lambda_max_power, lambda_min_inverse_power, pcg,
                      ritz_values)

__all__ = ["LevelData", "MlPreconditioner", "DiagonalCache", "level_diagonal",
           "level_marked_nodes", "build_preconditioner", "apply_preconditioner",
           "condition_report", "stable_decomposition", "Decomposition", "quasi_uniformity"]


def level_marked_nodes(hierarchy: Hierarchy, level: int, family: str) -> np.ndarray:
    """Marked set M_l (all nodes on level 0)."""
    if not 0 <= level <= hierarchy.L:
        raise ValueError("level out of range")
    coarse = None if level == 0 else hierarchy.levels[level - 1]
    return marked_nodes(coarse, hierarchy.levels[level], family)


class DiagonalCache:
    """a(phi_z, phi_z) keyed by (node, vertex patch); valid across levels of one forest."""

    def __init__(self, params: FracParams, quad: QuadConfig = QuadConfig()):
        self.params = params
        self.quad = quad
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, space: FeSpace, nodes: np.ndarray) -> np.ndarray:
        mesh = space.mesh
        if space.family == "p0":
            keys = [("e", int(e)) for e in nodes]
        else:
            vp = mesh.vertex_patches
            keys = [(int(z), vp[int(z)]) for z in nodes]
        missing = [i for i, k in enumerate(keys) if k not in self._store]
        self.hits += len(keys) - len(missing)
        self.misses += len(missing)
        if missing:
            vals = level_diagonal(space, nodes[missing], self.params, self.quad, invert=False)
            for i, v in zip(missing, vals):
                self._store[keys[i]] = v
        return np.array([self._store[k] for k in keys])


def level_diagonal(space: FeSpace, marked, params: FracParams,
                   quad: QuadConfig = QuadConfig(), invert: bool = True) -> np.ndarray:
    """1 / a(phi_z, phi_z) for z in ``marked`` (or the entries themselves)."""
    marked = np.asarray(marked, dtype=np.int64)
    if space.family == "p0":
        d = element_diagonal(space.mesh, marked, params, quad)
    else:
        d = patch_diagonal(space, marked, params, quad)
    if np.any(~(d > 0.0)):
        raise ArithmeticError("non-positive diagonal entry: quadrature failure")
    return 1.0 / d if invert else d


@dataclass
class LevelData:
    level: int
    space: FeSpace
    marked: np.ndarray          # node ids in M_l
    diag_inv: np.ndarray        # aligned with ``marked``
    new_nodes: np.ndarray       # node ids present on this level but not on the previous one
    q_row: np.ndarray           # two-level prolongation restricted to the new nodes, as
    q_col: np.ndarray           # triplets (new node id, previous-level node id, value)
    q_val: np.ndarray

    def __post_init__(self):
        if np.any(self.diag_inv <= 0.0):
            raise ValueError("diagonal entries must be positive")


@dataclass
class MlPreconditioner:
    levels: list[LevelData]
    params: FracParams
    family: str
    workspace_size: int
    flops_last: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def finest(self) -> FeSpace:
        return self.levels[-1].space

    @property
    def n(self) -> int:
        return self.finest.ndof

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply_preconditioner(self, x)

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator((self.n, self.n), matvec=self.apply, dtype=float)

    def level_matrix(self, level: int) -> sp.csr_matrix:
        """Explicit I^l as a sparse matrix (tests only)."""
        I = sp.identity(self.levels[level].space.ndof, format="csr")
        for lv in self.levels[level + 1:]:
            prev = self.levels[lv.level - 1].space
            I = prolongation(prev, lv.space) @ I
        return I.tocsr()

    def dense(self) -> np.ndarray:
        """Explicit sum_l I^l D_l (I^l)^T (tests only)."""
        out = np.zeros((self.n, self.n))
        for lv in self.levels:
            I = self.level_matrix(lv.level)
            D = np.zeros(lv.space.ndof)
            pos = np.array([lv.space.dof_of_node[int(z)] for z in lv.marked], dtype=np.int64)
            if len(pos):
                D[pos] = lv.diag_inv
            out += (I @ sp.diags(D) @ I.T).toarray()
        return out


def build_preconditioner(hierarchy: Hierarchy, params: FracParams, family: str = "p1_zero_bc",
                         quad: QuadConfig = QuadConfig(), cache: DiagonalCache | None = None
                         ) -> MlPreconditioner:
    if family == "p1":
        raise ValueError("the fractional form needs p1_zero_bc or p0")
    cache = cache or DiagonalCache(params, quad)
    if cache.params != params or cache.quad != quad:
        raise ValueError("diagonal cache was built for other parameters")
    levels = []
    prev_space = None
    for l, mesh in enumerate(hierarchy.levels):
        space = build_space(mesh, family)
        marked = level_marked_nodes(hierarchy, l, family)
        in_space = np.isin(marked, space.nodes)
        marked = marked[in_space]
        diag_inv = 1.0 / cache.get(space, marked) if len(marked) else np.zeros(0)
        if prev_space is None:
            new_nodes = np.array(space.nodes, dtype=np.int64)
            q = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        else:
            P = prolongation(prev_space, space)
            old = set(prev_space.nodes.tolist())
            new_idx = np.array([i for i, z in enumerate(space.nodes.tolist()) if z not in old],
                               dtype=np.int64)
            new_nodes = space.nodes[new_idx]
            Q = P[new_idx].tocoo()
            keep = Q.data != 0.0
            q = (new_nodes[Q.row[keep]], prev_space.nodes[Q.col[keep]], Q.data[keep])
        levels.append(LevelData(l, space, marked, diag_inv, new_nodes, *q))
        prev_space = space
    size = len(hierarchy.forest.tri) if family == "p0" else len(hierarchy.forest.coords())
    return MlPreconditioner(levels, params, family, size,
                            stats={"cache_hits": cache.hits, "cache_misses": cache.misses})


def apply_preconditioner(prec: MlPreconditioner, x: np.ndarray) -> np.ndarray:
    """y = sum_l I^l D_l (I^l)^T x with work proportional to sum_l card M_l + new nodes."""
    x = np.asarray(x, dtype=float)
    if x.shape != (prec.n,):
        raise ValueError("vector length does not match the finest space")
    flops = 0
    r = np.zeros(prec.workspace_size)
    r[prec.finest.nodes] = x
    z_l = [None] * len(prec.levels)
    # restriction: finest to coarsest
    for lv in reversed(prec.levels):
        z_l[lv.level] = lv.diag_inv * r[lv.marked]
        flops += len(lv.marked)
        if lv.level == 0:
            break
        # r[coarse] += Q^T r[new]
        np.add.at(r, lv.q_col, lv.q_val * r[lv.q_row])
        flops += 2 * len(lv.q_val)
    # prolongation: coarsest to finest
    acc = np.zeros(prec.workspace_size)
    for lv in prec.levels:
        if lv.level > 0:
            # acc[new] = Q acc[coarse]
            acc[lv.new_nodes] = 0.0
            np.add.at(acc, lv.q_row, lv.q_val * acc[lv.q_col])
            flops += 2 * len(lv.q_val)
        acc[lv.marked] += z_l[lv.level]
        flops += len(lv.marked)
    prec.flops_last = flops
    return acc[prec.finest.nodes]


def condition_report(A, prec: MlPreconditioner | None, tol: float = 1e-3,
                     max_iter: int = 2000, seed: int = 0) -> EigenReport:
    """Extreme eigenvalues of B^{-1} A in the A-inner product (B = I if ``prec`` is None)."""
    A = np.asarray(A)
    n = A.shape[0]
    if n == 1:
        v = float(A[0, 0] * (prec.apply(np.ones(1))[0] if prec is not None else 1.0))
        return EigenReport(v, v, 1.0, 0, 0, True, 0.0, 0.0, v, v)
    Bop = prec.as_operator() if prec is not None else None
    if Bop is None:
        P = spla.aslinearoperator(A)
    else:
        P = spla.LinearOperator((n, n), matvec=lambda v: Bop.matvec(A @ v), dtype=float)
    inner = lambda u, v: float(u @ (A @ v))
    hi = lambda_max_power(P, inner, n, tol=tol, max_iter=max_iter, seed=seed)
    lo = lambda_min_inverse_power(A, Bop, tol=tol, max_iter=max_iter, seed=seed + 1)
    b = np.random.default_rng(seed + 2).standard_normal(n)
    run = pcg(A, Bop, b, tol=1e-12, max_iter=max(n, 50))
    ritz = ritz_values(run.alphas, run.betas)
    r_lo, r_hi = (float(ritz[0]), float(ritz[-1])) if len(ritz) else (np.nan, np.nan)
    return EigenReport(lo.value, hi.value, hi.value / lo.value, lo.iterations, hi.iterations,
                       lo.converged and hi.converged, lo.rel_change, hi.rel_change, r_lo, r_hi)


# ---------------------------------------------------------------------------
# stable decomposition
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    components: list[CoefVector]      # u_l on the level spaces
    ratio: float                      # sum_l a~_l(u_l, u_l) / a(u, u)
    ratio_diag: float                 # the same with a(phi_z, phi_z) as local weights
    reconstruction_error: float       # max |sum_l I^l u_l - u|
    szzero_defect: float              # max |(I_l - I_{l-1}) u (z)| over unmarked z


def _leveled_sz(u: CoefVector, hierarchy: Hierarchy, assignments, spaces):
    """Coefficients of I~_{0,l} u on every level."""
    return [scott_zhang_apply(sp_, avg, u) for sp_, avg in zip(spaces, assignments)]


def stable_decomposition(u: CoefVector, hierarchy: Hierarchy,
                         assignments: list[AveragingAssignment] | None = None,
                         A: np.ndarray | None = None, params: FracParams | None = None,
                         diag_cache: DiagonalCache | None = None) -> Decomposition:
    """u = sum_l u_l with u_l = sum_{z in M_l} (I_l - I_{l-1}) u (z) phi^l_z.

    ``A`` is the finest stiffness matrix (for a(u, u)); ``params`` gives s.
    """
    if hierarchy.kind != "fcc":
        raise ValueError("the decomposition needs an fcc hierarchy")
    if u.space.family != "p1_zero_bc" or u.space.mesh != hierarchy.levels[-1]:
        raise ValueError("u must live on the p1_zero_bc space of the finest level")
    T = hierarchy.levels[-1]
    if assignments is None:
        assignments = assign_averaging_leveled(T, hierarchy, "p1_zero_bc")
    if len(assignments) != len(hierarchy.levels):
        raise ValueError("one averaging assignment per level is required")
    spaces = [build_space(m, "p1_zero_bc") for m in hierarchy.levels]
    sz = _leveled_sz(u, hierarchy, assignments, spaces)
    s = params.s
    comps = []
    energy = 0.0
    energy_diag = 0.0
    defect = 0.0
    total = np.zeros(u.space.ndof)
    for l, space in enumerate(spaces):
        cur = sz[l].values
        if l == 0:
            prev_on_l = np.zeros(space.ndof)
        else:
            prev_on_l = prolongation(spaces[l - 1], space) @ sz[l - 1].values
        diff = cur - prev_on_l
        marked = level_marked_nodes(hierarchy, l, "p1_zero_bc")
        mpos = np.array([space.dof_of_node[z] for z in marked.tolist() if z in space.dof_of_node],
                        dtype=np.int64)
        mask = np.zeros(space.ndof, dtype=bool)
        mask[mpos] = True
        if np.any(~mask):
            defect = max(defect, float(np.max(np.abs(diff[~mask]))))
        coef = np.where(mask, diff, 0.0)
        comps.append(CoefVector(space, coef))
        # local energies
        vp = space.mesh.vertex_patches
        areas = dict(zip(space.mesh.elements, space.mesh.areas))
        nodes = space.nodes[mpos]
        l2sq = np.array([sum(areas[e] for e in vp[int(z)]) / 6.0 for z in nodes])
        energy += hierarchy.hat_h(l) ** (-2 * s) * float(np.sum(l2sq * coef[mpos] ** 2))
        if diag_cache is not None and len(nodes):
            energy_diag += float(np.sum(diag_cache.get(space, nodes) * coef[mpos] ** 2))
        # accumulate on the finest level
        v = coef
        for k in range(l + 1, len(spaces)):
            v = prolongation(spaces[k - 1], spaces[k]) @ v
        total += v
    au = float(u.values @ (A @ u.values))
    rec = float(np.max(np.abs(total - u.values))) if len(total) else 0.0
    return Decomposition(comps, energy / au, energy_diag / au if diag_cache else np.nan,
                         rec, defect)


def quasi_uniformity(hierarchy: Hierarchy, family: str = "p1_zero_bc") -> list[tuple[float, float]]:
    """Per level (min, max) of h_l(z) / h^_l over z in M_l, h_l(z) the largest patch diameter."""
    out = []
    for l, mesh in enumerate(hierarchy.levels):
        marked = level_marked_nodes(hierarchy, l, family)
        if len(marked) == 0:
            out.append((np.nan, np.nan))
            continue
        vp = mesh.vertex_patches
        diam = dict(zip(mesh.elements, mesh.diameters))
        h = np.array([max(diam[e] for e in vp[int(z)]) for z in marked])
        r = h / hierarchy.hat_h(l)
        out.append((float(r.min()), float(r.max())))
    return out
