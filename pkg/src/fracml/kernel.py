"""Galerkin discretisation of the integral fractional Laplacian in 2D.

The bilinear form is

    a(u, v) = C/2 * int_{Om x Om} (u(x)-u(y)) (v(x)-v(y)) |x-y|^(-2-2s)
              + C * int_Om u v rho,      rho(x) = int_{Om^c} |x-y|^(-2-2s) dy,

with C = C(2, s).  Element pairs are sorted into identical, edge-adjacent,
vertex-adjacent, near and far pairs.  For touching pairs the integrand is
homogeneous in the distance to the common vertex set, so the radial
variable is integrated in closed form and only smooth angular integrals
remain for Gauss rules.  The weight rho is evaluated through the
divergence theorem as a boundary integral with a closed-form antiderivative.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.special import beta as beta_fn, betainc, gammaln

from . import _loops
from .fem import FeSpace, CoefVector, barycentric
from .mesh import MeshError, MeshView
from .quadrature import collapsed_rule, gauss_interval, gauss_cube, triangle_rule

__all__ = ["FracParams", "QuadConfig", "cds_constant", "pair_interaction",
           "complement_weight", "edge_potential", "assemble_stiffness", "assemble_load",
           "eval_frac_laplacian", "patch_diagonal", "element_diagonal"]


def cds_constant(d: int, s: float) -> float:
    """2^{2s} s Gamma(s+d/2) / (pi^{d/2} Gamma(1-s))."""
    if not 0.0 < s < 1.0:
        raise ValueError("s must lie in (0, 1)")
    return float(np.exp(2 * s * np.log(2.0) + np.log(s) + gammaln(s + d / 2)
                        - d / 2 * np.log(np.pi) - gammaln(1 - s)))


@dataclass(frozen=True)
class FracParams:
    s: float
    d: int = 2

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if self.d != 2:
            raise ValueError("only d = 2 is supported")

    @property
    def c_ds(self) -> float:
        return cds_constant(self.d, self.s)


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature settings.

    ``gauss_order`` is the number of Gauss points per direction in the
    regularised coordinates of touching pairs; it also fixes the collapsed
    rule (``gauss_order``^2 points) used for near pairs and for elements close
    to the boundary.  Far pairs use the 7-point degree-5 rule.  Two elements
    are near when their centroid distance is below
    ``comparable_radius_factor`` times the larger diameter.  Doubling
    ``gauss_order`` changes entries by less than ``tolerance`` (relative to
    the largest entry).  Pointwise evaluation integrates an element in polar
    coordinates around x when x is within ``eval_radius_factor`` diameters
    of its centroid, with ``angular_factor * gauss_order`` nodes per sector.
    Pairs (and evaluation points) farther than ``coarse_factor`` diameters
    apart switch to the 3-point degree-2 rule; 0 disables this tier.
    """

    gauss_order: int = 5
    comparable_radius_factor: float = 3.0
    tolerance: float = 1e-3
    eval_radius_factor: float = 1.5
    angular_factor: int = 3
    coarse_factor: float = 8.0

    def __post_init__(self):
        if self.gauss_order < 2:
            raise ValueError("gauss_order must be at least 2")


# ---------------------------------------------------------------------------
# reference rules for touching pairs
# ---------------------------------------------------------------------------

_HEX = np.array([(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)], dtype=float)
_GHAT = np.array([(-1.0, -1.0), (1.0, 0.0), (0.0, 1.0)])


@lru_cache(maxsize=None)
def _identical_rule(n: int):
    """Points h on the boundary of T - T (reference), weights, numerators (3x3)."""
    t, w = gauss_interval(n)
    H = np.concatenate([_HEX[k] + t[:, None] * (_HEX[(k + 1) % 6] - _HEX[k]) for k in range(6)])
    W = np.tile(w, 6)
    g = H @ _GHAT.T                       # (npts, 3) derivative of lambda_a along h
    N = g[:, :, None] * g[:, None, :]
    return H, W, N


def _subtri_rule(n, tris):
    pts, w = collapsed_rule(n)
    P, Wt = [], []
    for a, b, c in tris:
        a, b, c = (np.asarray(v, float) for v in (a, b, c))
        P.append(a + pts[:, :1] * (b - a) + pts[:, 1:] * (c - a))
        area = 0.5 * abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
        Wt.append(w * area)
    return np.concatenate(P), np.concatenate(Wt)


@lru_cache(maxsize=None)
def _edge_rule(n: int, s: float, family: str):
    """Angular rule for edge-adjacent pairs.

    Returns coefficients (npts, 3) of (e, r, -r'), weights including the
    closed-form radial factor, and numerator products (npts, nl, nl).
    """
    k = 0 if family == "p0" else 2
    q = k - 2 - 2 * s
    h = 0.5
    plus = [((0, h), (h, h), (0, 1)), ((0, 0), (1, 0), (h, h)), ((0, 0), (h, h), (0, h))]
    minus = [((h, 0), (1, 0), (h, h)), ((0, 0), (h, h), (0, 1)), ((0, 0), (h, 0), (h, h))]
    coef, W = [], []
    for sign, tris in ((1.0, plus), (-1.0, minus)):
        pts, w = _subtri_rule(n, tris)
        b, bp = pts[:, 0], pts[:, 1]
        z = sign * (1.0 - b - bp)
        m = np.maximum(bp + np.maximum(-z, 0.0), b + np.maximum(z, 0.0))
        W.append(w * m ** (-(3 + q)) / ((3 + q) * (4 + q)))
        coef.append(np.column_stack([z, b, bp]))
    coef, W = np.concatenate(coef), np.concatenate(W)
    if family == "p0":
        N = np.broadcast_to(np.array([[1.0, -1.0], [-1.0, 1.0]]), (len(W), 2, 2)).copy()
    else:
        # functions P, Q, R, R': (tau, beta, beta') so that phi(x)-phi(y) = tau z + beta b - beta' b'
        tb = np.array([(-1, -1, -1), (1, 0, 0), (0, 1, 0), (0, 0, 1)], dtype=float)
        d = coef[:, :1] * tb[:, 0] + coef[:, 1:2] * tb[:, 1] - coef[:, 2:3] * tb[:, 2]
        N = d[:, :, None] * d[:, None, :]
    return coef, W, N


@lru_cache(maxsize=None)
def _vertex_rule(n: int, s: float, family: str):
    """Rule for vertex-adjacent pairs: coefficients of (u, v, -u', -v')."""
    k = 0 if family == "p0" else 2
    q = k - 2 - 2 * s
    X, w = gauss_cube(n)
    e1, e2, e3 = X[:, 0], X[:, 1], X[:, 2]
    big = np.column_stack([e1, 1 - e1])
    small = e2[:, None] * np.column_stack([e3, 1 - e3])
    coef = np.concatenate([np.column_stack([big, small]), np.column_stack([small, big])])
    W = np.concatenate([w * e2, w * e2]) / (4 + q)
    a, b, c, d = coef.T
    if family == "p0":
        N = np.broadcast_to(np.array([[1.0, -1.0], [-1.0, 1.0]]), (len(W), 2, 2)).copy()
    else:
        # functions P, Q, R, Q', R'
        diff = np.column_stack([-a - b + c + d, a, b, -c, -d])
        N = diff[:, :, None] * diff[:, None, :]
    return coef, W, N


def _kernel_blocks(coef, W, N, vecs, s, chunk=4096):
    """sum_pts W N |coef . vecs|^(-2-2s) for each pair; vecs is (npairs, m, 2)."""
    npairs = vecs.shape[0]
    nl = N.shape[1]
    WN = (W[:, None] * N.reshape(len(W), -1))
    out = np.empty((npairs, nl * nl))
    step = max(1, chunk * 64 // max(len(W), 1))
    for a in range(0, npairs, step):
        v = np.einsum("pm,nmd->npd", coef, vecs[a:a + step])
        K = np.einsum("npd,npd->np", v, v) ** (-1.0 - s)
        out[a:a + step] = K @ WN
    return out.reshape(npairs, nl, nl)


# ---------------------------------------------------------------------------
# exterior weight
# ---------------------------------------------------------------------------

def edge_potential(x: np.ndarray, A: np.ndarray, B: np.ndarray, s: float) -> np.ndarray:
    """int_[A,B] (y-x).n |y-x|^(-2-2s) dS_y for all points x (n,2) and edges (m,2).

    ``n`` is the right-hand normal of A->B (outward when the domain lies to
    the left).  Returns an (n, m) array.
    """
    x = np.atleast_2d(x)[:, None, :]
    A, B = np.atleast_2d(A)[None], np.atleast_2d(B)[None]
    L = np.linalg.norm(B - A, axis=-1)
    t = (B - A) / L[..., None]
    nrm = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    delta = np.sum((A - x) * nrm, axis=-1)
    t1 = np.sum((A - x) * t, axis=-1)
    t2 = np.sum((B - x) * t, axis=-1)
    d2 = delta * delta
    a, b = s + 0.5, 0.5
    half = 0.5 * beta_fn(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail1 = half * betainc(a, b, d2 / (d2 + t1 * t1))
        tail2 = half * betainc(a, b, d2 / (d2 + t2 * t2))
        D = np.where(t1 >= 0, tail1 - tail2,
                     np.where(t2 <= 0, tail2 - tail1, 2 * half - tail1 - tail2))
        val = np.sign(delta) * np.abs(delta) ** (-2 * s) * D
    val = np.where(delta == 0.0, 0.0, val)
    return val


def _domain_polygon(mesh: MeshView):
    root = MeshView(mesh.forest, mesh.forest.roots)
    be = root.boundary_edges
    xy = root.coords
    return xy[be[:, 0]], xy[be[:, 1]]


def complement_weight(x, omega: MeshView, params: FracParams) -> np.ndarray:
    """rho(x) = int over the complement of the domain of |x-y|^(-2-2s) dy."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    A, B = _domain_polygon(omega)
    _reject_boundary_points(x, A, B)
    return edge_potential(x, A, B, params.s).sum(axis=1) / (2 * params.s)


def _reject_boundary_points(x, A, B):
    if np.any(_dist_to_segments(x, A, B) <= 1e-14):
        raise ValueError("point lies on the boundary")
    # winding number test for points outside the polygon
    a, b = A[None] - x[:, None, :], B[None] - x[:, None, :]
    ang = np.arctan2(b[..., 1], b[..., 0]) - np.arctan2(a[..., 1], a[..., 0])
    wind = np.round(np.sum((ang + np.pi) % (2 * np.pi) - np.pi, axis=1) / (2 * np.pi))
    if np.any(wind == 0):
        raise ValueError("point lies outside the domain")


# singular element/edge integrals ------------------------------------------------

@lru_cache(maxsize=None)
def _bnd_edge_rule(n: int, s: float, k: int):
    """Rule in beta for E an edge of T (x = A + a e + b c, y on E)."""
    qb = k - 1 - 2 * s
    t, w = gauss_interval(n)
    betas, zs, W = [], [], []
    for lo, hi in ((0.0, 0.5), (0.5, 1.0)):      # z >= 0 branch, kink at 1/2
        b = lo + (hi - lo) * t
        m = np.maximum(b, 1 - b)
        betas.append(b)
        zs.append(1 - b)
        W.append((hi - lo) * w * m ** (-(2 + qb)))
    betas.append(t)                               # z < 0 branch, m = 1
    zs.append(-(1 - t))
    W.append(w.copy())
    b = np.concatenate(betas)
    return b, np.concatenate(zs), np.concatenate(W) / ((2 + qb) * (3 + qb))


def _edge_of_element_integral(Axy, Bxy, Cxy, s, n, k):
    """int_T lambda_C^k * potential of edge AB, for many triangles at once."""
    b, z, W = _bnd_edge_rule(n, s, k)
    e = Bxy - Axy
    c = Cxy - Axy
    L = np.linalg.norm(e, axis=1)
    tan = e / L[:, None]
    nrm = np.column_stack([tan[:, 1], -tan[:, 0]])
    hn = -np.sum(c * nrm, axis=1)
    area2 = np.abs(e[:, 0] * c[:, 1] - e[:, 1] * c[:, 0])
    v = z[None, :, None] * e[:, None, :] - b[None, :, None] * c[:, None, :]
    K = np.sum(v * v, axis=-1) ** (-1 - s)
    vals = (b ** k * b)[None, :] * hn[:, None] * K
    return area2 * L * (vals @ W)


@lru_cache(maxsize=None)
def _bnd_vertex_rule(n: int, s: float, k: int):
    qb = k - 1 - 2 * s
    t, w = gauss_interval(n)
    E1, E2 = np.meshgrid(t, t, indexing="ij")
    E1, E2 = E1.ravel(), E2.ravel()
    ww = (w[:, None] * w[None, :]).ravel()
    # region 1: a+b = 1, tau = eta2 ; region 2: tau = 1, (a, b) = eta2 (eta1, 1-eta1)
    a = np.concatenate([E1, E2 * E1])
    bb = np.concatenate([1 - E1, E2 * (1 - E1)])
    tau = np.concatenate([E2, np.ones_like(E2)])
    W = np.concatenate([ww, ww * E2]) / (3 + qb)
    return a, bb, tau, W


def _vertex_touch_integral(Pxy, Qxy, Rxy, Sxy, s, n, k):
    """int_T m(x) * potential of edge PS where T = (P, Q, R).

    Returns (nT, 3) for the monomials (a^2, ab, b^2) when k = 2 and (nT, 1)
    for k = 0, with lambda_Q = a and lambda_R = b.
    """
    a, b, tau, W = _bnd_vertex_rule(n, s, k)
    u, v, t = Qxy - Pxy, Rxy - Pxy, Sxy - Pxy
    L = np.linalg.norm(t, axis=1)
    tan = t / L[:, None]
    nrm = np.column_stack([tan[:, 1], -tan[:, 0]])
    area2 = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    xv = a[None, :, None] * u[:, None, :] + b[None, :, None] * v[:, None, :]
    yv = tau[None, :, None] * t[:, None, :]
    d = yv - xv
    K = np.sum(d * d, axis=-1) ** (-1 - s)
    dn = np.sum(d * nrm[:, None, :], axis=-1)
    base = dn * K
    mons = [a * a, a * b, b * b] if k == 2 else [np.ones_like(a)]
    return np.column_stack([(base * m[None, :]) @ W for m in mons]) * (area2 * L)[:, None]


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _element_rule_points(points: np.ndarray, rule):
    ref, w = rule
    lam = np.column_stack([1 - ref.sum(axis=1), ref])
    X = np.einsum("qk,ekd->eqd", lam, points)
    return X, lam, w


def _touching_pairs(mesh: MeshView):
    """Arrays (i, j, nshared) for element rows i < j sharing at least one vertex."""
    ne = len(mesh)
    if ne == 0:
        return (np.zeros(0, np.int64),) * 3
    M = sp.csr_matrix((np.ones(3 * ne), (np.repeat(np.arange(ne), 3), mesh.tri.ravel())))
    S = (M @ M.T).tocoo()
    keep = S.row < S.col
    return S.row[keep].astype(np.int64), S.col[keep].astype(np.int64), S.data[keep].astype(np.int64)


def _near_pairs(mesh: MeshView, factor: float, exclude: set):
    cen = mesh.points.mean(axis=1)
    diam = mesh.diameters
    tree = cKDTree(cen)
    pi, pj = [], []
    for i, nb in enumerate(tree.query_ball_point(cen, factor * diam)):
        for j in nb:
            if j == i:
                continue
            if diam[j] < diam[i] or (diam[j] == diam[i] and j > i):
                a, b = (i, j) if i < j else (j, i)
                if (a, b) not in exclude:
                    pi.append(a)
                    pj.append(b)
    return np.array(pi, dtype=np.int64), np.array(pj, dtype=np.int64)


def _csr_from_pairs(ne, i, j):
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    ptr = np.zeros(ne + 1, dtype=np.int64)
    np.add.at(ptr, i + 1, 1)
    return np.cumsum(ptr), j.astype(np.int64)


def _scatter(A, dofs, blocks):
    """A[dofs[n,a], dofs[n,b]] += blocks[n,a,b] ignoring negative dofs."""
    nl = dofs.shape[1]
    I = np.repeat(dofs, nl, axis=1).ravel()
    J = np.tile(dofs, (1, nl)).ravel()
    V = blocks.reshape(-1)
    ok = (I >= 0) & (J >= 0)
    np.add.at(A, (I[ok], J[ok]), V[ok])


# ---------------------------------------------------------------------------
# touching-pair geometry
# ---------------------------------------------------------------------------

def _edge_pair_data(mesh: MeshView, i, j):
    """Local vertex order (P, Q, R, R') and vectors (e, r, -r') per pair."""
    tri = mesh.tri
    xy = mesh.coords
    out_v, vecs = [], []
    for a, b in zip(i.tolist(), j.tolist()):
        ta, tb = tri[a].tolist(), tri[b].tolist()
        shared = [v for v in ta if v in tb]
        P, Q = shared
        R = next(v for v in ta if v not in shared)
        Rp = next(v for v in tb if v not in shared)
        out_v.append((P, Q, R, Rp))
    V = np.array(out_v, dtype=np.int64).reshape(-1, 4)
    p = xy[V]
    vecs = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], -(p[:, 3] - p[:, 0])], axis=1)
    return V, vecs


def _vertex_pair_data(mesh: MeshView, i, j):
    tri = mesh.tri
    xy = mesh.coords
    out_v = []
    for a, b in zip(i.tolist(), j.tolist()):
        ta, tb = tri[a].tolist(), tri[b].tolist()
        P = next(v for v in ta if v in tb)
        ka, kb = ta.index(P), tb.index(P)
        out_v.append((P, ta[(ka + 1) % 3], ta[(ka + 2) % 3], tb[(kb + 1) % 3], tb[(kb + 2) % 3]))
    V = np.array(out_v, dtype=np.int64).reshape(-1, 5)
    p = xy[V]
    vecs = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0],
                     -(p[:, 3] - p[:, 0]), -(p[:, 4] - p[:, 0])], axis=1)
    return V, vecs


def _touching_blocks(mesh, kind, i, j, s, n, family):
    """Raw double integrals over T_i x T_j for touching pairs, with local ids.

    Returns (local ids, blocks).  For p1 local ids are vertex ids, for p0 the
    element rows (i, j).
    """
    areas2 = 2 * mesh.areas
    if kind == "identical":
        p = mesh.points[i]
        vecs = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        H, W, N = _identical_rule(n)
        c = 1.0 / ((2 - 2 * s) * (3 - 2 * s) * (4 - 2 * s))
        blocks = _kernel_blocks(H, W, N, vecs, s) * (c * areas2[i] ** 2)[:, None, None]
        return mesh.tri[i], blocks
    if kind == "edge":
        V, vecs = _edge_pair_data(mesh, i, j)
        coef, W, N = _edge_rule(n, s, family)
    else:
        V, vecs = _vertex_pair_data(mesh, i, j)
        coef, W, N = _vertex_rule(n, s, family)
    blocks = _kernel_blocks(coef, W, N, vecs, s) * (areas2[i] * areas2[j])[:, None, None]
    if family == "p0":
        return np.column_stack([i, j]), blocks
    return V, blocks


def pair_interaction(mesh: MeshView, Ta: int, Tb: int, family: str, params: FracParams,
                     quad: QuadConfig = QuadConfig()):
    """Local block of int_{Ta x Tb} (phi_i(x)-phi_i(y))(phi_j(x)-phi_j(y)) k(x,y).

    ``Ta`` and ``Tb`` are forest node ids of elements of ``mesh``.  Returns
    ``(ids, block)`` where ``ids`` are the vertex ids (p1) or element ids (p0)
    of the local basis functions.
    """
    s = params.s
    if family == "p0" and s >= 0.5:
        raise ValueError("piecewise constants need s < 1/2")
    fam = "p0" if family == "p0" else "p1"
    ia, ib = mesh.index[Ta], mesh.index[Tb]
    ta, tb = set(mesh.tri[ia].tolist()), set(mesh.tri[ib].tolist())
    shared = len(ta & tb)
    n = quad.gauss_order
    I, J = np.array([ia]), np.array([ib])
    if ia == ib:
        if fam == "p0":
            return np.array([Ta]), np.zeros((1, 1))
        ids, blk = _touching_blocks(mesh, "identical", I, J, s, n, fam)
        return np.array(mesh.forest.tri[Ta]), blk[0]
    if shared:
        ids, blk = _touching_blocks(mesh, "edge" if shared == 2 else "vertex", I, J, s, n, fam)
        if fam == "p0":
            return np.array([Ta, Tb]), blk[0]
        return ids[0], blk[0]
    # disjoint pair: collapsed rule on both triangles
    pts = mesh.points[[ia, ib]]
    rule = collapsed_rule(max(n, 2) + 3)
    X, lam, w = _element_rule_points(pts, rule)
    Wt = w[None, :] * mesh.areas[[ia, ib]][:, None]
    R = np.ones((len(w), 1)) if fam == "p0" else lam
    nl = R.shape[1]
    dofs = np.arange(2 * nl).reshape(2, nl)
    A = np.zeros((2 * nl, 2 * nl))
    _loops.pair_list(np.array([0]), np.array([1]), X, Wt, R, dofs, 1.0 + s, A,
                     _loops.pow_mode(1.0 + s))
    ids = np.array([Ta, Tb]) if fam == "p0" else np.concatenate([mesh.tri[ia], mesh.tri[ib]])
    return ids, A


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _check_family(space: FeSpace, s: float):
    if space.family == "p1":
        raise ValueError("the fractional form needs zero boundary values: use p1_zero_bc")
    if space.family == "p0" and s >= 0.5:
        raise ValueError("piecewise constants need s < 1/2")


def _local_dofs_for(space: FeSpace, V):
    """Map local vertex ids (p1) to dof indices, -1 for non-dofs."""
    lut = np.full(space.mesh.coords.shape[0], -1, dtype=np.int64)
    lut[space.nodes] = np.arange(space.ndof)
    return lut[V]


def assemble_stiffness(space: FeSpace, params: FracParams,
                       quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """Dense symmetric stiffness matrix of the fractional Laplacian."""
    s = params.s
    _check_family(space, s)
    mesh = space.mesh
    N = space.ndof
    A = np.zeros((N, N))
    if N == 0:
        return A
    n = quad.gauss_order
    fam = space.family
    kfam = "p0" if fam == "p0" else "p1"
    dofs = space.element_dofs
    has_dof = np.any(dofs >= 0, axis=1)
    ne = len(mesh)

    M0 = np.zeros((N, N))     # sum of identical-pair integrals
    M1 = np.zeros((N, N))     # sum over unordered distinct pairs
    if kfam == "p1":
        rows = np.nonzero(has_dof)[0]
        ids, blk = _touching_blocks(mesh, "identical", rows, rows, s, n, kfam)
        _scatter(M0, _local_dofs_for(space, ids), blk)

    ti, tj, ns = _touching_pairs(mesh)
    keep = has_dof[ti] | has_dof[tj]
    for kind, sel in (("edge", ns == 2), ("vertex", ns == 1)):
        m = sel & keep
        if not np.any(m):
            continue
        ids, blk = _touching_blocks(mesh, kind, ti[m], tj[m], s, n, kfam)
        loc = dofs[ids][:, :, 0] if kfam == "p0" else _local_dofs_for(space, ids)
        _scatter(M1, loc, blk)

    touching = set(zip(ti.tolist(), tj.tolist()))
    ni, nj = _near_pairs(mesh, quad.comparable_radius_factor, touching)
    nm = has_dof[ni] | has_dof[nj]
    ni, nj = ni[nm], nj[nm]
    R_near_rule = collapsed_rule(n)
    Xn, lam_n, wn = _element_rule_points(mesh.points, R_near_rule)
    Wn = wn[None, :] * mesh.areas[:, None]
    Rn = np.ones((len(wn), 1)) if kfam == "p0" else lam_n
    mode = _loops.pow_mode(1.0 + s)
    _loops.pair_list(ni, nj, Xn, Wn, Rn, dofs, 1.0 + s, M1, mode)

    skip_i = np.concatenate([ti, ni])
    skip_j = np.concatenate([tj, nj])
    ptr, idx = _csr_from_pairs(ne, skip_i, skip_j)
    Xf, lam_f, wf = _element_rule_points(mesh.points, triangle_rule(5))
    Wf = wf[None, :] * mesh.areas[:, None]
    Rf = np.ones((len(wf), 1)) if kfam == "p0" else lam_f
    kappa = np.zeros(Wf.shape)
    Xc, lam_c, wc = _element_rule_points(mesh.points, triangle_rule(2))
    Wc = wc[None, :] * mesh.areas[:, None]
    Rc = np.ones((len(wc), 1)) if kfam == "p0" else lam_c
    kappa_c = np.zeros(Wc.shape)
    F = np.zeros_like(M1)
    _loops.far_field(Xf, Wf, Rf, dofs, has_dof, ptr, idx, 1.0 + s, F, kappa, mode,
                     Xc, Wc, Rc, kappa_c, mesh.points.mean(axis=1), mesh.diameters,
                     float(quad.coarse_factor))
    M1 += F
    M1 += F.T
    del F
    loc = np.einsum("eq,qa,qb->eab", Wf * kappa, Rf, Rf)
    loc += np.einsum("eq,qa,qb->eab", Wc * kappa_c, Rc, Rc)
    _scatter(M1, dofs, loc)

    E = _exterior_matrix(space, s, quad)
    C = params.c_ds
    A = C * (0.5 * M0 + M1 + E)
    return 0.5 * (A + A.T)


def _exterior_matrix(space: FeSpace, s: float, quad: QuadConfig) -> np.ndarray:
    """sum_T int_T phi_a phi_b rho for the dofs of ``space`` (without C)."""
    mesh = space.mesh
    N = space.ndof
    E = np.zeros((N, N))
    dofs = space.element_dofs
    Apoly, Bpoly = _domain_polygon(mesh)
    blocks = _weighted_mass_blocks(mesh, space.family, dofs, s, quad,
                                   mesh.boundary_edges, Apoly, Bpoly)
    _scatter(E, dofs, blocks)
    return E


def _weighted_mass_blocks(mesh, family, dofs, s, quad, bedges, Apoly, Bpoly,
                          rows=None):
    """Per-element blocks int_T phi_a phi_b rho_G, where G is a closed polygon.

    ``bedges`` are the (fine) edges of G, oriented with the region on the
    left; ``Apoly``/``Bpoly`` describe the same polygon (possibly with
    coarser edges).  The basis functions must vanish on every edge of
    ``bedges`` that touches their element (hat functions of vertices
    not on G), or be constants with s < 1/2.
    """
    xy = mesh.coords
    rows = np.arange(len(mesh)) if rows is None else np.asarray(rows)
    nl = dofs.shape[1]
    out = np.zeros((len(rows), nl, nl))
    k = 0 if family == "p0" else 2
    n = quad.gauss_order
    pts = mesh.points[rows]
    diam = mesh.diameters[rows]
    tri = mesh.tri[rows]
    gverts = set(bedges.ravel().tolist())
    # distance from elements to the polygon
    dist = _dist_to_segments(pts.reshape(-1, 2), Apoly, Bpoly).reshape(-1, 3).min(axis=1)
    touch = np.array([any(v in gverts for v in t) for t in tri.tolist()], dtype=bool)
    near = dist < quad.comparable_radius_factor * diam

    def _add_rule(sel, rule, remove):
        if not np.any(sel):
            return
        X, lam, w = _element_rule_points(pts[sel], rule)
        rho = edge_potential(X.reshape(-1, 2), Apoly, Bpoly, s).sum(axis=1).reshape(X.shape[:2])
        if remove is not None:
            rho = rho - remove(np.nonzero(sel)[0], X)
        R = np.ones((len(w), 1)) if family == "p0" else lam
        area = mesh.areas[rows][sel]
        out[sel] += np.einsum("eq,q,qa,qb->eab", rho, w, R, R) * area[:, None, None]

    # edges of G touching each element
    by_vertex: dict[int, list[int]] = {}
    for m_, (a, b) in enumerate(bedges.tolist()):
        by_vertex.setdefault(a, []).append(m_)
        by_vertex.setdefault(b, []).append(m_)
    touching_edges = [sorted({m_ for v in t for m_ in by_vertex.get(v, [])}) for t in tri.tolist()]

    def remove_touching(idx, X):
        sub = np.zeros(X.shape[:2])
        for r, i in enumerate(idx):
            te = touching_edges[i]
            if te:
                e = bedges[te]
                sub[r] = edge_potential(X[r], xy[e[:, 0]], xy[e[:, 1]], s).sum(axis=1)
        return sub

    _add_rule(~near, triangle_rule(5), None)
    _add_rule(near, collapsed_rule(n + 1), remove_touching)

    # singular parts from touching edges
    ed_rows, ed_C, ed_A, ed_B = [], [], [], []
    vt_rows, vt_P, vt_Q, vt_R, vt_S = [], [], [], [], []
    for r, t in enumerate(tri.tolist()):
        for m_ in touching_edges[r]:
            a, b = bedges[m_]
            if a in t and b in t:
                c = next(v for v in t if v != a and v != b)
                ed_rows.append(r); ed_A.append(a); ed_B.append(b); ed_C.append(c)
            else:
                P = a if a in t else b
                S = b if P == a else a
                kp = t.index(P)
                Q, R = t[(kp + 1) % 3], t[(kp + 2) % 3]
                # orient the edge with the region on the left: potential uses n of A->B
                vt_rows.append(r); vt_P.append(P); vt_Q.append(Q); vt_R.append(R)
                vt_S.append((S, P == a))
    if ed_rows:
        ed_rows = np.array(ed_rows)
        val = _edge_of_element_integral(xy[ed_A], xy[ed_B], xy[ed_C], s, 2 * n, k)
        if family == "p0":
            np.add.at(out, (ed_rows, 0, 0), val)
        else:
            kc = np.array([tri[r].tolist().index(c) for r, c in zip(ed_rows, ed_C)])
            np.add.at(out, (ed_rows, kc, kc), val)
    if vt_rows:
        vt_rows = np.array(vt_rows)
        S = np.array([sv for sv, _ in vt_S])
        forward = np.array([fw for _, fw in vt_S])
        val = _vertex_touch_integral(xy[vt_P], xy[vt_Q], xy[vt_R], xy[S], s, 2 * n, k)
        # edge potential of B->A is the negative of A->B with the normal flipped:
        # the stored orientation is A->B = P->S when forward, else S->P
        sign = np.where(forward, 1.0, -1.0)
        val = val * sign[:, None]
        if family == "p0":
            np.add.at(out, (vt_rows, 0, 0), val[:, 0])
        else:
            kq = np.array([tri[r].tolist().index(q) for r, q in zip(vt_rows, vt_Q)])
            kr = np.array([tri[r].tolist().index(q) for r, q in zip(vt_rows, vt_R)])
            np.add.at(out, (vt_rows, kq, kq), val[:, 0])
            np.add.at(out, (vt_rows, kq, kr), val[:, 1])
            np.add.at(out, (vt_rows, kr, kq), val[:, 1])
            np.add.at(out, (vt_rows, kr, kr), val[:, 2])
    return out / (2 * s)


def _dist_to_segments(x, A, B):
    e = B - A
    r = x[:, None, :] - A[None]
    tpar = np.clip(np.sum(r * e, axis=-1) / np.sum(e * e, axis=-1), 0.0, 1.0)
    return np.linalg.norm(r - tpar[..., None] * e, axis=-1).min(axis=1)


def assemble_load(space: FeSpace, f) -> CoefVector:
    """b_k = int f phi_k with the 7-point rule on every element."""
    mesh = space.mesh
    X, lam, w = _element_rule_points(mesh.points, triangle_rule(5))
    fx = np.asarray(f(X[..., 0], X[..., 1]), dtype=float) * np.ones(X.shape[:2])
    R = np.ones((len(w), 1)) if space.family == "p0" else lam
    loc = np.einsum("eq,q,qa->ea", fx, w, R) * mesh.areas[:, None]
    b = np.zeros(space.ndof)
    d = space.element_dofs
    ok = d >= 0
    np.add.at(b, d[ok], loc[ok])
    return CoefVector(space, b)


# ---------------------------------------------------------------------------
# diagonal entries from vertex patches
# ---------------------------------------------------------------------------

def patch_diagonal(space: FeSpace, nodes, params: FracParams,
                   quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """a(phi_z, phi_z) for the given vertex ids using only the patch of z.

    With omega the patch of z, a(phi_z, phi_z) equals C/2 times the double
    integral over omega x omega plus C times the integral of phi_z^2 against
    the complement weight of omega; the latter is a boundary integral over
    the patch boundary.
    """
    s = params.s
    mesh = space.mesh
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.zeros(len(nodes))
    if len(nodes) == 0:
        return out
    if space.family == "p0":
        return element_diagonal(mesh, nodes, params, quad)
    n = quad.gauss_order
    vp = mesh.vertex_patches
    index = mesh.index
    # identical pairs
    rows_all = sorted({index[e] for z in nodes.tolist() for e in vp[z]})
    rows_all = np.array(rows_all, dtype=np.int64)
    ids, blk = _touching_blocks(mesh, "identical", rows_all, rows_all, s, n, "p1")
    ident = {int(r): (ids[k].tolist(), blk[k]) for k, r in enumerate(rows_all)}
    # pairs within each patch
    pair_i, pair_j, pair_node, kinds = [], [], [], []
    for zi, z in enumerate(nodes.tolist()):
        els = [index[e] for e in vp[z]]
        for a in range(len(els)):
            for b in range(a + 1, len(els)):
                i, j = min(els[a], els[b]), max(els[a], els[b])
                shared = len(set(mesh.tri[i].tolist()) & set(mesh.tri[j].tolist()))
                pair_i.append(i); pair_j.append(j); pair_node.append(zi); kinds.append(shared)
    pair_i, pair_j = np.array(pair_i, dtype=np.int64), np.array(pair_j, dtype=np.int64)
    pair_node, kinds = np.array(pair_node), np.array(kinds)
    double = np.zeros(len(nodes))
    for zi, z in enumerate(nodes.tolist()):
        for e in vp[z]:
            vid, b = ident[index[e]]
            k = vid.index(z)
            double[zi] += 0.5 * b[k, k]
    for kind, code in (("edge", 2), ("vertex", 1)):
        m = kinds == code
        if not np.any(m):
            continue
        V, blk = _touching_blocks(mesh, kind, pair_i[m], pair_j[m], s, n, "p1")
        zs = nodes[pair_node[m]]
        k = np.argmax(V == zs[:, None], axis=1)
        double += np.bincount(pair_node[m], weights=blk[np.arange(len(k)), k, k],
                              minlength=len(nodes))
    # exterior of the patch
    ext = np.zeros(len(nodes))
    for zi, z in enumerate(nodes.tolist()):
        els = list(vp[z])
        rows = np.array([index[e] for e in els])
        bed = []
        for r in rows.tolist():
            t = mesh.tri[r].tolist()
            kz = t.index(z)
            bed.append((t[(kz + 1) % 3], t[(kz + 2) % 3]))
        bed = np.array(bed, dtype=np.int64)
        xy = mesh.coords
        local = np.where(mesh.tri[rows] == z, 0, -1)
        blocks = _weighted_mass_blocks(mesh, "p1", local, s, quad, bed,
                                       xy[bed[:, 0]], xy[bed[:, 1]], rows=rows)
        kz = np.argmax(mesh.tri[rows] == z, axis=1)
        ext[zi] = blocks[np.arange(len(rows)), kz, kz].sum()
    return params.c_ds * (double + ext)


def element_diagonal(mesh: MeshView, elements, params: FracParams,
                     quad: QuadConfig = QuadConfig()) -> np.ndarray:
    """a(chi_T, chi_T) = C int_T rho_T for piecewise constants."""
    s = params.s
    if s >= 0.5:
        raise ValueError("piecewise constants need s < 1/2")
    rows = np.array([mesh.index[e] for e in np.asarray(elements).tolist()], dtype=np.int64)
    p = mesh.points[rows]
    n = quad.gauss_order
    total = np.zeros(len(rows))
    for k in range(3):
        A, B, C = p[:, (k + 1) % 3], p[:, (k + 2) % 3], p[:, k]
        total += _edge_of_element_integral(A, B, C, s, 2 * n, 0)
    return params.c_ds * total / (2 * s)


# ---------------------------------------------------------------------------
# pointwise evaluation
# ---------------------------------------------------------------------------

def _affine_coefficients(u: CoefVector) -> np.ndarray:
    """(ne, 3) with u = c0 + c1 x + c2 y on every element."""
    space = u.space
    mesh = space.mesh
    d = space.element_dofs
    vals = np.where(d >= 0, u.values[np.maximum(d, 0)], 0.0)
    if space.family == "p0":
        return np.column_stack([vals[:, 0], np.zeros(len(mesh)), np.zeros(len(mesh))])
    p = mesh.points
    M = np.concatenate([np.ones((len(mesh), 3, 1)), p], axis=2)
    return np.linalg.solve(M, vals[..., None])[..., 0]


def eval_frac_laplacian(u: CoefVector, points, params: FracParams,
                        quad: QuadConfig = QuadConfig(), owners=None) -> np.ndarray:
    """(-Delta)^s u_h at points strictly inside elements.

    ``owners`` (forest ids) may be given to skip point location.
    """
    from .fem import locate
    s = params.s
    mesh = u.space.mesh
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if owners is None:
        owners = locate(mesh, pts)
    orow = np.array([mesh.index[o] for o in np.asarray(owners).tolist()], dtype=np.int64)
    lam = barycentric(mesh.points[orow], pts)
    if np.any(lam.min(axis=1) <= 1e-13):
        raise ValueError("evaluation points must lie strictly inside an element")
    coef = _affine_coefficients(u)
    Xq, lamq, wq = _element_rule_points(mesh.points, triangle_rule(5))
    Wq = wq[None, :] * mesh.areas[:, None]
    Uq = coef[:, :1] + coef[:, 1:2] * Xq[..., 0] + coef[:, 2:3] * Xq[..., 1]
    Xc, _, wc = _element_rule_points(mesh.points, triangle_rule(2))
    Wc = wc[None, :] * mesh.areas[:, None]
    Uc = coef[:, :1] + coef[:, 1:2] * Xc[..., 0] + coef[:, 2:3] * Xc[..., 1]
    t_in, w_in = gauss_interval(quad.angular_factor * quad.gauss_order)
    t_out, w_out = gauss_interval(quad.angular_factor * quad.gauss_order)
    integral = _loops.eval_points(pts, orow, mesh.points, coef, Xq, Wq, Uq,
                                  mesh.points.mean(axis=1), mesh.diameters,
                                  quad.eval_radius_factor, s, t_in, w_in, t_out, w_out,
                                  _loops.pow_mode(1.0 + s), Xc, Wc, Uc,
                                  float(quad.coarse_factor))
    ux = coef[orow, 0] + coef[orow, 1] * pts[:, 0] + coef[orow, 2] * pts[:, 1]
    Apoly, Bpoly = _domain_polygon(mesh)
    rho = edge_potential(pts, Apoly, Bpoly, s).sum(axis=1) / (2 * s)
    return params.c_ds * (integral + ux * rho)
