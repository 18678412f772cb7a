"""Compiled inner loops for the dense far-field parts of the kernel code."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def kernel_pow(r2, alpha, mode):
    # r2^(-alpha) with cheap special cases for s = 1/4, 1/2, 3/4
    if mode == 1:
        return 1.0 / (r2 * math.sqrt(math.sqrt(r2)))
    if mode == 2:
        return 1.0 / (r2 * math.sqrt(r2))
    if mode == 3:
        q = math.sqrt(r2)
        return 1.0 / (r2 * q * math.sqrt(q))
    return math.exp(-alpha * math.log(r2))


def pow_mode(alpha):
    for mode, a in ((1, 1.25), (2, 1.5), (3, 1.75)):
        if alpha == a:
            return mode
    return 0


@njit(cache=True, inline="always")
def _pair_block(i, j, X, W, R, WR, dofs, alpha, A, kappa, mode, t):
    nq = W.shape[1]
    nloc = R.shape[1]
    for p in range(nq):
        x0 = X[i, p, 0]
        x1 = X[i, p, 1]
        wp = W[i, p]
        acc = 0.0
        for b in range(nloc):
            t[p, b] = 0.0
        for q in range(nq):
            d0 = x0 - X[j, q, 0]
            d1 = x1 - X[j, q, 1]
            kk = kernel_pow(d0 * d0 + d1 * d1, alpha, mode)
            acc += W[j, q] * kk
            kappa[j, q] += wp * kk
            for b in range(nloc):
                t[p, b] += WR[j, q, b] * kk
        kappa[i, p] += acc
    for a in range(nloc):
        da = dofs[i, a]
        if da < 0:
            continue
        for b in range(nloc):
            db = dofs[j, b]
            if db < 0:
                continue
            v = 0.0
            for p in range(nq):
                v += W[i, p] * R[p, a] * t[p, b]
            A[da, db] -= v


@njit(cache=True)
def far_field(X, W, R, dofs, has_dof, skip_ptr, skip_idx, alpha, A, kappa, mode,
              Xc, Wc, Rc, kappa_c, cen, diam, coarse_factor):
    """Accumulate the regular part of the double integral over all pairs i < j.

    X (ne, nq, 2) quadrature points, W (ne, nq) physical weights, R (nq, nloc)
    basis values.  Pairs listed in the skip CSR are left out.  Cross terms
    are added to ``A`` with a minus sign in one orientation only (the caller
    adds the transpose, which keeps the writes row-local); the row integrals of the kernel
    are collected in ``kappa`` and turned into mass-like terms by the caller.
    Pairs whose centroid distance exceeds ``coarse_factor`` times the larger
    diameter use the coarse rule (Xc, Wc, Rc) and collect into ``kappa_c``
    (a factor <= 0 disables this tier).  Returns the number of kernel
    evaluations.
    """
    ne, nq = W.shape
    nloc = R.shape[1]
    mark = np.zeros(ne, dtype=np.bool_)
    t = np.empty((nq, nloc))
    tc = np.empty((Wc.shape[1], nloc))
    WR = np.empty((ne, nq, nloc))
    WRc = np.empty((ne, Wc.shape[1], nloc))
    for j in range(ne):
        for q in range(nq):
            for b in range(nloc):
                WR[j, q, b] = W[j, q] * R[q, b]
        for q in range(Wc.shape[1]):
            for b in range(nloc):
                WRc[j, q, b] = Wc[j, q] * Rc[q, b]
    count = 0
    use_coarse = coarse_factor > 0.0
    for i in range(ne):
        for k in range(skip_ptr[i], skip_ptr[i + 1]):
            mark[skip_idx[k]] = True
        for j in range(i + 1, ne):
            if mark[j] or not (has_dof[i] or has_dof[j]):
                continue
            if use_coarse:
                c0 = cen[i, 0] - cen[j, 0]
                c1 = cen[i, 1] - cen[j, 1]
                lim = coarse_factor * max(diam[i], diam[j])
                if c0 * c0 + c1 * c1 > lim * lim:
                    _pair_block(i, j, Xc, Wc, Rc, WRc, dofs, alpha, A, kappa_c, mode, tc)
                    count += Wc.shape[1] * Wc.shape[1]
                    continue
            count += nq * nq
            _pair_block(i, j, X, W, R, WR, dofs, alpha, A, kappa, mode, t)
        for k in range(skip_ptr[i], skip_ptr[i + 1]):
            mark[skip_idx[k]] = False
    return count


@njit(cache=True)
def pair_list(pi, pj, X, W, R, dofs, alpha, A, mode):
    """Full local contribution of the listed disjoint pairs (rule given by X, W)."""
    nq = W.shape[1]
    nloc = R.shape[1]
    kap_i = np.empty(nq)
    kap_j = np.empty(nq)
    t = np.empty((nq, nloc))
    for n in range(pi.shape[0]):
        i = pi[n]
        j = pj[n]
        for q in range(nq):
            kap_j[q] = 0.0
        for p in range(nq):
            kap_i[p] = 0.0
            for b in range(nloc):
                t[p, b] = 0.0
            for q in range(nq):
                d0 = X[i, p, 0] - X[j, q, 0]
                d1 = X[i, p, 1] - X[j, q, 1]
                kk = kernel_pow(d0 * d0 + d1 * d1, alpha, mode)
                kap_i[p] += W[j, q] * kk
                kap_j[q] += W[i, p] * kk
                for b in range(nloc):
                    t[p, b] += W[j, q] * kk * R[q, b]
        for a in range(nloc):
            da = dofs[i, a]
            for b in range(nloc):
                # mass-like terms on i and on j
                db = dofs[i, b]
                if da >= 0 and db >= 0:
                    v = 0.0
                    for p in range(nq):
                        v += W[i, p] * R[p, a] * R[p, b] * kap_i[p]
                    A[da, db] += v
                ea = dofs[j, a]
                eb = dofs[j, b]
                if ea >= 0 and eb >= 0:
                    v = 0.0
                    for q in range(nq):
                        v += W[j, q] * R[q, a] * R[q, b] * kap_j[q]
                    A[ea, eb] += v
                eb = dofs[j, b]
                if da >= 0 and eb >= 0:
                    v = 0.0
                    for p in range(nq):
                        v += W[i, p] * R[p, a] * t[p, b]
                    A[da, eb] -= v
                    A[eb, da] -= v


@njit(cache=True)
def _ray_dist(x0, x1, c, sn, p0, p1, q0, q1):
    # distance along the ray (cos, sin) from x to the line through p and q
    e0 = q0 - p0
    e1 = q1 - p1
    den = c * e1 - sn * e0
    if den == 0.0:
        return np.inf
    return ((p0 - x0) * e1 - (p1 - x1) * e0) / den


@njit(cache=True)
def _radial(r1, r2, a0, b, s):
    # int_{r1}^{r2} (a0 - r b) r^(-1-2s) dr
    out = a0 * (r1 ** (-2.0 * s) - r2 ** (-2.0 * s)) / (2.0 * s)
    if abs(s - 0.5) < 1e-14:
        out -= b * (math.log(r2) - math.log(r1))
    else:
        out -= b * (r2 ** (1.0 - 2.0 * s) - r1 ** (1.0 - 2.0 * s)) / (1.0 - 2.0 * s)
    return out


@njit(cache=True)
def _order3(a):
    o = np.empty(3, dtype=np.int64)
    i, j, k = 0, 1, 2
    if a[i] > a[j]:
        i, j = j, i
    if a[j] > a[k]:
        j, k = k, j
    if a[i] > a[j]:
        i, j = j, i
    o[0] = i
    o[1] = j
    o[2] = k
    return o


@njit(cache=True)
def _seg_dist(x0, x1, a0, a1, b0, b1):
    e0 = b0 - a0
    e1 = b1 - a1
    t = ((x0 - a0) * e0 + (x1 - a1) * e1) / (e0 * e0 + e1 * e1)
    t = min(max(t, 0.0), 1.0)
    d0 = x0 - a0 - t * e0
    d1 = x1 - a1 - t * e1
    return math.sqrt(d0 * d0 + d1 * d1)


@njit(cache=True)
def polar_outside(x0, x1, P, a0, g0, g1, s, nodes, weights):
    """int_T (a0 - g.(y-x)) |x-y|^(-2-2s) dy for a triangle P (3,2) not containing x.

    Angles are split at the vertex directions; in each sector the ray enters
    and leaves through two fixed edges and the radial integral is exact.
    """
    ang = np.empty(3)
    for k in range(3):
        ang[k] = math.atan2(P[k, 1] - x1, P[k, 0] - x0)
    # unwrap relative to the first vertex so the span is below pi
    for k in range(1, 3):
        d = ang[k] - ang[0]
        if d > math.pi:
            ang[k] -= 2.0 * math.pi
        elif d < -math.pi:
            ang[k] += 2.0 * math.pi
    order = _order3(ang)
    # the ray enters no closer than the distance to the triangle; guards
    # against rounding when x lies on the line through an edge
    dmin = np.inf
    for k in range(3):
        dmin = min(dmin, _seg_dist(x0, x1, P[k, 0], P[k, 1], P[(k + 1) % 3, 0], P[(k + 1) % 3, 1]))
    total = 0.0
    for sec in range(2):
        ta = ang[order[sec]]
        tb = ang[order[sec + 1]]
        if tb - ta <= 1e-13:
            continue
        # edges bounding this sector: the long edge (order0-order2) and the short one
        i0 = order[0]
        i2 = order[2]
        j0 = order[sec]
        j1 = order[sec + 1]
        for n in range(nodes.shape[0]):
            th = ta + (tb - ta) * nodes[n]
            c = math.cos(th)
            sn = math.sin(th)
            r_long = _ray_dist(x0, x1, c, sn, P[i0, 0], P[i0, 1], P[i2, 0], P[i2, 1])
            r_short = _ray_dist(x0, x1, c, sn, P[j0, 0], P[j0, 1], P[j1, 0], P[j1, 1])
            r1 = max(min(r_long, r_short), dmin)
            r2 = max(r_long, r_short, r1)
            gb = g0 * c + g1 * sn
            total += (tb - ta) * weights[n] * _radial(r1, r2, a0, gb, s)
    return total


@njit(cache=True)
def polar_inside(x0, x1, P, g0, g1, s, nodes, weights):
    """Principal value of int_T -g.(y-x) |x-y|^(-2-2s) dy for x inside P."""
    ang = np.empty(3)
    for k in range(3):
        ang[k] = math.atan2(P[k, 1] - x1, P[k, 0] - x0)
    order = _order3(ang)
    total = 0.0
    for sec in range(3):
        ka = order[sec]
        kb = order[(sec + 1) % 3]
        ta = ang[ka]
        tb = ang[kb]
        if sec == 2:
            tb += 2.0 * math.pi
        for n in range(nodes.shape[0]):
            th = ta + (tb - ta) * nodes[n]
            c = math.cos(th)
            sn = math.sin(th)
            R = _ray_dist(x0, x1, c, sn, P[ka, 0], P[ka, 1], P[kb, 0], P[kb, 1])
            if abs(s - 0.5) < 1e-14:
                F = math.log(R)
            else:
                F = R ** (1.0 - 2.0 * s) / (1.0 - 2.0 * s)
            total -= (tb - ta) * weights[n] * (g0 * c + g1 * sn) * F
    return total


@njit(cache=True)
def eval_points(xs, owner, P, coef, Xq, Wq, Uq, cen, diam, factor, s, nodes_in, w_in,
                nodes_out, w_out, mode, Xc, Wc, Uc, coarse_factor):
    """Sum over elements of int (u(x) - u(y)) |x-y|^(-2-2s) dy at each point.

    ``coef`` (ne, 3) holds the affine representation u = c0 + c1 x + c2 y per
    element.  Elements whose centroid lies within ``factor`` diameters of x
    are integrated in polar coordinates around x, the rest with the element
    rule (Xq, Wq, Uq), or with the coarse rule (Xc, Wc, Uc) beyond
    ``coarse_factor`` diameters (disabled when <= 0).
    """
    nqc = Wc.shape[1]
    npnt = xs.shape[0]
    ne = P.shape[0]
    nq = Wq.shape[1]
    alpha = 1.0 + s
    out = np.zeros(npnt)
    for m in range(npnt):
        x0 = xs[m, 0]
        x1 = xs[m, 1]
        o = owner[m]
        ux = coef[o, 0] + coef[o, 1] * x0 + coef[o, 2] * x1
        acc = polar_inside(x0, x1, P[o], coef[o, 1], coef[o, 2], s, nodes_in, w_in)
        for e in range(ne):
            if e == o:
                continue
            c0 = x0 - cen[e, 0]
            c1 = x1 - cen[e, 1]
            lim = factor * diam[e]
            if c0 * c0 + c1 * c1 < lim * lim:
                # u(x) - u(y) = (ux - u_e(x)) - g_e.(y - x)
                a0 = ux - (coef[e, 0] + coef[e, 1] * x0 + coef[e, 2] * x1)
                acc += polar_outside(x0, x1, P[e], a0, coef[e, 1], coef[e, 2], s,
                                     nodes_out, w_out)
            elif coarse_factor > 0.0 and c0 * c0 + c1 * c1 > (coarse_factor * diam[e]) ** 2:
                for q in range(nqc):
                    d0 = x0 - Xc[e, q, 0]
                    d1 = x1 - Xc[e, q, 1]
                    acc += Wc[e, q] * (ux - Uc[e, q]) * kernel_pow(d0 * d0 + d1 * d1, alpha, mode)
            else:
                for q in range(nq):
                    d0 = x0 - Xq[e, q, 0]
                    d1 = x1 - Xq[e, q, 1]
                    acc += Wq[e, q] * (ux - Uq[e, q]) * kernel_pow(d0 * d0 + d1 * d1, alpha, mode)
        out[m] = acc
    return out
