"""Brute-force reference computations used by the property suite and the tests.

Everything here is written independently of the production code paths: the
finest common coarsening is decided from element geometry, the minimal
completion by enumerating candidate refinements, and stiffness entries by
integrating along rays with exact radial antiderivatives.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .fem import FeSpace
from .kernel import FracParams
from .mesh import MeshView, hanging_nodes
from .quadrature import gauss_interval

__all__ = ["fcc_bruteforce", "completion_bruteforce", "CompletionResult",
           "stiffness_oracle", "OracleResult"]


# ---------------------------------------------------------------------------
# finest common coarsening by geometry
# ---------------------------------------------------------------------------

def _inside_closed(tri: np.ndarray, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """For a triangle (3, 2) and points (..., 2): all barycentric coordinates >= -tol."""
    a, b, c = tri
    m = np.array([b - a, c - a]).T
    lam12 = np.linalg.solve(m, (pts - a).reshape(-1, 2).T).T.reshape(pts.shape)
    lam0 = 1.0 - lam12.sum(axis=-1)
    return (lam0 >= -tol) & np.all(lam12 >= -tol, axis=-1)


def fcc_bruteforce(a: MeshView, b: MeshView) -> tuple[set, set, set]:
    """(B1, B2, B3) from element geometry alone.

    B1: elements of ``a`` strictly containing an element of ``b``; B2 the
    converse; B3: elements present in both (same vertex set).
    """
    pa, pb = a.points, b.points
    key = lambda p: tuple(sorted(map(tuple, np.round(p, 14).tolist())))
    kb = {key(p): e for e, p in zip(b.elements, pb)}
    b3 = {e for e, p in zip(a.elements, pa) if key(p) in kb}

    def strict(src: MeshView, ps, other_ps, other_area):
        out = set()
        for e, tri, area in zip(src.elements, ps, src.areas):
            smaller = other_area < area * (1 - 1e-12)
            if not np.any(smaller):
                continue
            inside = _inside_closed(tri, other_ps[smaller]).all(axis=1)
            if np.any(inside):
                out.add(e)
        return out

    return strict(a, pa, pb, b.areas), strict(b, pb, pa, a.areas), b3


# ---------------------------------------------------------------------------
# minimal completion by enumeration
# ---------------------------------------------------------------------------

@dataclass
class CompletionResult:
    minimal: MeshView | None        # coarsest conforming candidate
    n_candidates: int               # conforming candidates found
    unique: bool                    # a single candidate of minimal size
    coarsest: bool                  # every candidate refines the minimal one


def _subtree_options(f, node: int, depth: int) -> list[tuple[int, ...]]:
    opts = [(node,)]
    if depth > 0:
        c1, c2 = f.split(node)
        for x, y in itertools.product(_subtree_options(f, c1, depth - 1),
                                      _subtree_options(f, c2, depth - 1)):
            opts.append(x + y)
    return opts


def completion_bruteforce(mesh: MeshView, marked, depth: int = 2,
                          max_candidates: int = 200_000) -> CompletionResult:
    """Search all refinements of ``mesh`` of relative depth <= ``depth``.

    Keeps the conforming ones in which every marked element is bisected and
    returns the one with the fewest elements.
    """
    f = mesh.forest
    marked = set(int(m) for m in marked)
    per_elem = []
    total = 1
    for e in mesh.elements:
        opts = _subtree_options(f, e, depth)
        if e in marked:
            opts = opts[1:]
        per_elem.append(opts)
        total *= len(opts)
    if total > max_candidates:
        raise ValueError(f"{total} candidates exceed the search budget")
    found = []
    for combo in itertools.product(*per_elem):
        cand = MeshView(f, [e for part in combo for e in part])
        if not hanging_nodes(cand):
            found.append(cand)
    if not found:
        return CompletionResult(None, 0, False, False)
    sizes = np.array([len(c) for c in found])
    best = found[int(np.argmin(sizes))]
    unique = int(np.sum(sizes == sizes.min())) == 1
    coarsest = all(c.refines(best) for c in found)
    return CompletionResult(best, len(found), unique, coarsest)


# ---------------------------------------------------------------------------
# stiffness entries by ray integration
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    matrix: np.ndarray
    error_estimate: float           # max |A(n) - A(2n)| relative to max |A|


def _radial_moment(k: int, s: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """int_a^b r^(k - 1 - 2 s) dr for 0 <= a <= b <= inf (k - 2s > 0 when a = 0)."""
    p = k - 2.0 * s
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if abs(p) < 1e-14:
            out = np.log(b / a)
        else:
            out = (np.power(b, p) - np.power(a, p)) / p
    out = np.where(b <= a, 0.0, out)
    return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)


class _PiecewiseLinear:
    """Basis functions of a small space, evaluated by brute-force location."""

    def __init__(self, space: FeSpace):
        mesh = space.mesh
        self.P = mesh.points
        ne = len(mesh)
        self.nb = space.ndof
        # vals[e, k, i]: value of basis i at vertex k of element e
        self.vals = np.zeros((ne, 3, self.nb))
        if space.family == "p0":
            for i, el in enumerate(space.nodes.tolist()):
                self.vals[mesh.index[el], :, i] = 1.0
        else:
            for i, z in enumerate(space.nodes.tolist()):
                self.vals[:, :, i] = (mesh.tri == z)
        a = self.P[:, 0]
        m = np.stack([self.P[:, 1] - a, self.P[:, 2] - a], axis=-1)   # (ne, 2, 2)
        self.minv = np.linalg.inv(m)
        self.a = a

    def __call__(self, y: np.ndarray):
        """Values (..., nb) at points (..., 2) and an inside-domain mask.

        A point is given to the element where its smallest barycentric
        coordinate is largest, which settles points close to edges.
        """
        shp = y.shape[:-1]
        y = y.reshape(-1, 2)
        l12 = np.einsum("eij,nej->nei", self.minv, y[:, None, :] - self.a[None, :, :])
        lam = np.concatenate([1 - l12.sum(axis=2, keepdims=True), l12], axis=2)   # (n, ne, 3)
        best = np.argmax(lam.min(axis=2), axis=1)
        lb = lam[np.arange(len(y)), best]
        found = lb.min(axis=1) >= -1e-12
        out = np.einsum("nk,nki->ni", lb, self.vals[best]) * found[:, None]
        return out.reshape(shp + (self.nb,)), found.reshape(shp)

    def on_element(self, e: int, y: np.ndarray) -> np.ndarray:
        l12 = (y - self.a[e]) @ self.minv[e].T
        lam = np.column_stack([1 - l12.sum(axis=1), l12])
        return lam @ self.vals[e]

    def grad_on_element(self, e: int) -> np.ndarray:
        """(nb, 2) gradients of the basis functions on element ``e``."""
        g12 = self.minv[e]                                    # rows: grad lambda_1, lambda_2
        g = np.vstack([-g12.sum(axis=0), g12])                # (3, 2)
        return self.vals[e].T @ g


def _graded_points(tri: np.ndarray, n: int, p_edge: float, q_end: float = 2.0):
    """Points and weights on a triangle, graded toward all three edges and corners.

    Also returns for every point the local edge it was graded toward and its
    distance to that edge, computed without cancellation.
    """
    t, w = gauss_interval(n)
    c = tri.mean(axis=0)
    xs, ws, ks, gaps = [], [], [], []
    for k in range(3):
        A, B = tri[k], tri[(k + 1) % 3]
        # v = 1 - t^p (distance to AB shrinks like t^p); u graded toward both ends
        T1, T2 = np.meshgrid(t, t, indexing="ij")
        W1, W2 = np.meshgrid(w, w, indexing="ij")
        v = 1.0 - T1 ** p_edge
        dv = p_edge * T1 ** (p_edge - 1.0)
        num, den = T2 ** q_end, T2 ** q_end + (1 - T2) ** q_end
        u = num / den
        du = (q_end * T2 ** (q_end - 1) * den
              - num * q_end * (T2 ** (q_end - 1) - (1 - T2) ** (q_end - 1))) / den ** 2
        base = A[None, None, :] + u[..., None] * (B - A)[None, None, :]
        x = c + v[..., None] * (base - c)
        jac = v * abs((A[0] - c[0]) * (B[1] - A[1]) - (A[1] - c[1]) * (B[0] - A[0]))
        xs.append(x.reshape(-1, 2))
        ws.append((W1 * W2 * dv * du * jac).ravel())
        h = abs((A[0] - c[0]) * (B[1] - c[1]) - (A[1] - c[1]) * (B[0] - c[0])) / np.hypot(*(B - A))
        ks.append(np.full(x.shape[0] * x.shape[1], k))
        gaps.append((T1 ** p_edge * h).ravel())
    return np.concatenate(xs), np.concatenate(ws), np.concatenate(ks), np.concatenate(gaps)


def _graded_unit(n: int, q: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule on [0, 1] pulled toward both ends by tau^q / (tau^q + (1-tau)^q)."""
    t, w = gauss_interval(n)
    num, den = t ** q, t ** q + (1 - t) ** q
    dmap = q * (t ** (q - 1) * den - num * (t ** (q - 1) - (1 - t) ** (q - 1))) / den ** 2
    return num / den, w * dmap


def _ray_kernel_sum(x: np.ndarray, ux_all: np.ndarray, grad: np.ndarray,
                    near_edge: np.ndarray, gap: np.ndarray, space_fn: _PiecewiseLinear,
                    edges: np.ndarray, verts: np.ndarray, s_list, m_theta: int,
                    chunk: int = 32) -> np.ndarray:
    """For points x (n, 2): int_0^{2 pi} sum_k w_k int (du)(dv) r^(-1-2s) dr dtheta.

    ``grad`` (nb, 2) holds the basis gradients on the element containing all
    points; ``near_edge``/``gap`` give for each point one edge index and the
    accurately known distance to it.
    """
    n = len(x)
    nb = space_fn.nb
    out = np.zeros((len(s_list), n, nb, nb))
    tg, wg = _graded_unit(m_theta)
    A, B = edges[:, 0], edges[:, 1]
    e = B - A                                                     # (E, 2)
    for c0 in range(0, n, chunk):
        xc = x[c0:c0 + chunk]                                     # (c, 2)
        u_x = ux_all[c0:c0 + chunk]                               # (c, nb)
        dv = verts[None, :, :] - xc[:, None, :]
        ang = np.sort(np.mod(np.arctan2(dv[..., 1], dv[..., 0]), 2 * np.pi), axis=1)
        brk = np.concatenate([np.zeros((len(xc), 1)), ang, np.full((len(xc), 1), 2 * np.pi)],
                             axis=1)
        lo, width = brk[:, :-1], np.diff(brk, axis=1)             # (c, V+1)
        th = (lo[..., None] + width[..., None] * tg).reshape(len(xc), -1)
        wth = (width[..., None] * wg).reshape(len(xc), -1)        # (c, m)
        om = np.stack([np.cos(th), np.sin(th)], axis=-1)          # (c, m, 2)
        # ray-edge crossings: x + r om = A + t (B - A)
        det = -om[..., None, 0] * e[:, 1] + om[..., None, 1] * e[:, 0]      # (c, m, E)
        d = A[None, :, :] - xc[:, None, :]                                  # (c, E, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = (-d[:, None, :, 0] * e[:, 1] + d[:, None, :, 1] * e[:, 0]) / det
            tt = (om[..., None, 0] * d[:, None, :, 1] - om[..., None, 1] * d[:, None, :, 0]) / det
        # crossing with the nearby edge from the known distance
        ci = np.arange(len(xc))
        ke = near_edge[c0:c0 + chunk]
        nrm = np.stack([e[ke, 1], -e[ke, 0]], axis=-1) / np.linalg.norm(e[ke], axis=1)[:, None]
        side = np.sign(np.einsum("cd,cd->c", d[ci, ke], nrm))
        cosn = np.einsum("cmd,cd->cm", om, nrm * side[:, None])
        with np.errstate(divide="ignore"):
            r[ci, :, ke] = np.where(cosn > 0, gap[c0:c0 + chunk, None] / cosn, -1.0)
        ok = (np.abs(det) > 1e-14) & (r > 0.0) & (tt >= -1e-12) & (tt <= 1 + 1e-12)
        r = np.sort(np.where(ok, r, np.inf), axis=-1)
        r = np.concatenate([np.zeros(r.shape[:-1] + (1,)), r], axis=-1)     # (c, m, E+1)
        r_lo, r_hi = r[..., :-1], r[..., 1:]
        valid = np.isfinite(r_lo)
        bounded = np.isfinite(r_hi)
        r_lo_f = np.where(valid, r_lo, 0.0)
        span = np.where(bounded, r_hi - r_lo_f, 1.0)
        seg = valid & (~bounded | (span > 1e-13 * np.maximum(r_lo_f, 1e-300)))
        span = np.where(seg, span, 1.0)
        r1 = r_lo_f + 0.25 * span
        r2 = r_lo_f + 0.75 * span
        f1, in1 = space_fn(xc[:, None, None, :] + r1[..., None] * om[:, :, None, :])
        f2, _ = space_fn(xc[:, None, None, :] + r2[..., None] * om[:, :, None, :])
        beta = (f2 - f1) / (r2 - r1)[..., None]
        alpha = f1 - beta * r1[..., None] - u_x[:, None, None, :]          # du = alpha + beta r
        unb = ~bounded
        beta = np.where(unb[..., None], 0.0, beta)
        alpha = np.where(unb[..., None], -u_x[:, None, None, :], alpha)
        alpha[:, :, 0, :] = 0.0                                             # du(0) = 0
        beta[:, :, 0, :] = np.einsum("cmd,bd->cmb", om, grad)
        wseg = np.where(in1 & bounded, 0.5, 1.0) * seg
        rl = np.where(valid, r_lo, 1.0)
        for si, s in enumerate(s_list):
            m0 = _radial_moment(0, s, rl, r_hi) * wseg
            m1 = _radial_moment(1, s, rl, r_hi) * wseg
            m2 = _radial_moment(2, s, rl, r_hi) * wseg
            m1[..., 0] = 0.0
            m0[..., 0] = 0.0
            m2[..., 0] = _radial_moment(2, s, np.zeros_like(r_hi[..., 0]), r_hi[..., 0]) * \
                wseg[..., 0]
            c0_ = np.einsum("cmk,cmka,cmkb->cmab", m0, alpha, alpha)
            c1_ = np.einsum("cmk,cmka,cmkb->cmab", m1, alpha, beta)
            c2_ = np.einsum("cmk,cmka,cmkb->cmab", m2, beta, beta)
            out[si, c0:c0 + chunk] = np.einsum("cm,cmab->cab", wth,
                                               c0_ + c1_ + c1_.transpose(0, 1, 3, 2) + c2_)
    return out


def _oracle_once(space: FeSpace, s_list, n_x: int, m_theta: int) -> np.ndarray:
    mesh = space.mesh
    fn = _PiecewiseLinear(space)
    tri = mesh.tri
    E = {tuple(sorted((int(t[k]), int(t[(k + 1) % 3])))) for t in tri for k in range(3)}
    E = np.array(sorted(E))
    edges = mesh.coords[E]                                         # (E, 2, 2)
    verts = mesh.coords[mesh.vertex_ids]
    # grading toward edges cancels the d^(-2s) singularity of the p0 integrand
    p_edge = max(1.0 / (1.0 - 2.0 * max(s_list)), 2.0) if space.family == "p0" else 2.0
    A = np.zeros((len(s_list), space.ndof, space.ndof))
    eidx = {tuple(ed): i for i, ed in enumerate(E.tolist())}
    for e, P in enumerate(mesh.points):
        xq, wq, kq, gq = _graded_points(P, n_x, p_edge)
        t_e = tri[e].tolist()
        glob = np.array([eidx[tuple(sorted((t_e[k], t_e[(k + 1) % 3])))] for k in range(3)])
        G = _ray_kernel_sum(xq, fn.on_element(e, xq), fn.grad_on_element(e), glob[kq], gq,
                            fn, edges, verts, s_list, m_theta)
        A += np.einsum("q,sqab->sab", wq, G)
    return A


def stiffness_oracle(space: FeSpace, params, n_x: int = 12,
                     m_theta: int = 24):
    """Stiffness matrix of a small space by ray integration.

    a(u, v) = C int_Omega int_{R^2} w(y) (u(x)-u(y)) (v(x)-v(y)) |x-y|^{-2-2s} dy dx
    with w = 1/2 in Omega and 1 outside.  The inner integral runs over rays
    from x; along each ray the integrand is piecewise polynomial times a power
    of r and is integrated exactly.  Angles are split at the directions of
    the mesh vertices and the outer integral uses Gauss rules graded toward
    the element edges.  The result at (n_x + 4, m_theta + 8) is returned and
    compared with the one at (n_x, m_theta) to give an error estimate.

    ``params`` is a :class:`FracParams` or a sequence of them; the ray
    geometry is then shared and a list of results is returned.
    """
    many = isinstance(params, (list, tuple))
    plist = list(params) if many else [params]
    if space.ndof == 0:
        res = [OracleResult(np.zeros((0, 0)), 0.0) for _ in plist]
        return res if many else res[0]
    s_list = [p.s for p in plist]
    base = _oracle_once(space, s_list, n_x, m_theta)
    finer = _oracle_once(space, s_list, n_x + 4, m_theta + 8)
    res = []
    for p, b, f in zip(plist, base, finer):
        b = p.c_ds * 0.5 * (b + b.T)
        f = p.c_ds * 0.5 * (f + f.T)
        res.append(OracleResult(f, float(np.max(np.abs(f - b)) / np.max(np.abs(f)))))
    return res if many else res[0]
