"""SOLVE - ESTIMATE - MARK - REFINE with a weighted residual estimator."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import CoefVector, FeSpace, build_space, prolongation
from .hierarchy import Hierarchy, build_adaptive_hierarchy
from .kernel import FracParams, QuadConfig, assemble_load, assemble_stiffness, eval_frac_laplacian
from .mesh import MeshView, make_initial_mesh, refine, uniform_refine
from .preconditioner import DiagonalCache, build_preconditioner
from .quadrature import triangle_rule
from .solvers import pcg

__all__ = ["AdaptiveLoopError", "EstimatorConfig", "LoopRecord", "estimate", "doerfler_mark",
           "adaptive_loop", "estimator_weight"]


class AdaptiveLoopError(RuntimeError):
    """A solve or estimate failed; ``records`` holds the completed iterations."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class EstimatorConfig:
    theta: float = 0.5
    degree: int = 5            # triangle rule used for residual sampling
    s: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")


@dataclass
class LoopRecord:
    mesh: MeshView
    ndof: int
    solution: CoefVector
    eta: float
    eta_T: np.ndarray
    iterations: int
    residual: float
    timing: dict = field(default_factory=dict)


def estimator_weight(h: np.ndarray, w: np.ndarray, s: float) -> np.ndarray:
    """h~^{2s}: h^{2s} for s <= 1/2 and h w^{2s-1} for s > 1/2."""
    h = np.asarray(h, dtype=float)
    if s <= 0.5:
        return h ** (2 * s) * np.ones_like(np.asarray(w, dtype=float))
    return h * np.asarray(w, dtype=float) ** (2 * s - 1)


def _dist_to_element_edges(tri_xy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Distance of points (n, q, 2) to the boundary of their triangles (n, 3, 2)."""
    out = np.full(x.shape[:2], np.inf)
    for k in range(3):
        a, b = tri_xy[:, k][:, None, :], tri_xy[:, (k + 1) % 3][:, None, :]
        e = b - a
        t = np.clip(np.sum((x - a) * e, axis=-1) / np.sum(e * e, axis=-1), 0.0, 1.0)
        out = np.minimum(out, np.linalg.norm(x - a - t[..., None] * e, axis=-1))
    return out


def estimate(space: FeSpace, u: CoefVector, f: Callable, params: FracParams,
             config: EstimatorConfig | None = None, quad: QuadConfig = QuadConfig()
             ) -> np.ndarray:
    """Squared local contributions eta_T^2 (aligned with ``space.mesh.elements``).

    eta_T^2 = sum_q |T| w_q h~(x_q)^{2s} (f - (-Delta)^s u)(x_q)^2 with the
    interior points x_q of the triangle rule, h_T = |T|^{1/2} and
    w(x) = dist(x, boundary of T).
    """
    config = config or EstimatorConfig(s=params.s)
    mesh = space.mesh
    ref, wq = triangle_rule(config.degree)
    lam = np.column_stack([1 - ref.sum(axis=1), ref])
    if lam.min() <= 0.0:
        raise ValueError("estimator rule must have interior points only")
    X = np.einsum("qk,ekd->eqd", lam, mesh.points)
    owners = np.repeat(np.array(mesh.elements, dtype=np.int64), len(wq))
    res = np.asarray(f(X[..., 0], X[..., 1]), dtype=float) * np.ones(X.shape[:2])
    try:
        lap = eval_frac_laplacian(u, X.reshape(-1, 2), params, quad, owners=owners)
    except Exception as exc:
        raise RuntimeError(f"residual evaluation failed: {exc}") from exc
    res = res - lap.reshape(X.shape[:2])
    h = np.sqrt(mesh.areas)[:, None]
    w = _dist_to_element_edges(mesh.points, X)
    weight = estimator_weight(h, w, params.s)
    return mesh.areas * np.sum(wq[None, :] * weight * res ** 2, axis=1)


def doerfler_mark(eta_sq: np.ndarray, theta: float, ids=None) -> list:
    """Smallest greedy set with sum eta^2 >= theta * total (descending, ties by id)."""
    eta_sq = np.asarray(eta_sq, dtype=float)
    if np.any(eta_sq < 0):
        raise ValueError("contributions must be nonnegative")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    ids = np.arange(len(eta_sq)) if ids is None else np.asarray(ids)
    total = eta_sq.sum()
    if total == 0.0:
        return []
    order = np.lexsort((ids, -eta_sq))
    csum = np.cumsum(eta_sq[order])
    k = int(np.searchsorted(csum, theta * total * (1 - 1e-15), side="left")) + 1
    k = min(k, len(order))
    chosen = [i for i in order[:k] if eta_sq[i] > 0.0]
    return [ids[i].item() for i in chosen]


def adaptive_loop(domain: str, params: FracParams, est_config: EstimatorConfig | None = None,
                  f: Callable = lambda x, y: np.ones_like(x), max_dofs: int = 3000,
                  max_iters: int = 50, initial_refinements: int = 1,
                  quad: QuadConfig = QuadConfig(), solver_tol: float = 1e-8,
                  family: str = "p1_zero_bc", callback=None, observer=None
                  ) -> tuple[list[LoopRecord], Hierarchy]:
    """Run the adaptive loop; stop after ``max_iters`` solves or once N exceeds ``max_dofs``.

    The linear systems are solved by PCG with the local multilevel
    preconditioner over the meshes generated so far.  ``callback(record)``
    runs after every iteration, ``observer(record, A, prec)`` additionally
    sees the stiffness matrix and the preconditioner of that iteration.
    """
    est_config = est_config or EstimatorConfig(s=params.s)
    mesh = uniform_refine(make_initial_mesh(domain), initial_refinements)
    snapshots: list[MeshView] = []
    records: list[LoopRecord] = []
    cache = DiagonalCache(params, quad)
    prev_u = None
    while True:
        snapshots.append(mesh)
        timing = {}
        t0 = time.perf_counter()
        space = build_space(mesh, family)
        A = assemble_stiffness(space, params, quad)
        b = assemble_load(space, f).values
        timing["assemble"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        prec = build_preconditioner(build_adaptive_hierarchy(snapshots), params, family, quad,
                                    cache)
        x0 = None
        if prev_u is not None:
            x0 = prolongation(prev_u.space, space) @ prev_u.values
        run = pcg(A, prec.as_operator(), b, tol=solver_tol, max_iter=10 * space.ndof + 100,
                  x0=x0)
        if not run.converged:
            raise AdaptiveLoopError(f"PCG did not converge on {space.ndof} dofs", records)
        u = CoefVector(space, run.x)
        timing["solve"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        try:
            eta_T = estimate(space, u, f, params, est_config, quad)
        except RuntimeError as exc:
            raise AdaptiveLoopError(str(exc), records) from exc
        timing["estimate"] = time.perf_counter() - t0
        rec = LoopRecord(mesh, space.ndof, u, float(np.sqrt(eta_T.sum())), eta_T,
                         run.iterations, run.residual, timing)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if observer is not None:
            observer(rec, A, prec)
        if len(records) >= max_iters or space.ndof >= max_dofs:
            break
        marked = doerfler_mark(eta_T, est_config.theta, ids=np.array(mesh.elements))
        if not marked:
            break
        old = mesh
        mesh = refine(old, marked)
        # boundary-only bisections add no dofs; bisect the new elements again
        while build_space(mesh, family).ndof <= space.ndof:
            fresh = sorted(set(mesh.elements) - set(old.elements))
            old, mesh = mesh, refine(mesh, fresh)
        prev_u = u
    return records, build_adaptive_hierarchy(snapshots)
