"""Hot numerical kernels: tiny-MLP evaluation/backprop and element assembly.

Every kernel exists in two flavors: a numba ``@njit`` version and a pure-numpy
fallback.  The numba path is used when numba imports successfully and the
environment variable ``NEFEM_DISABLE_NUMBA`` is not set to ``1``.  Both paths
implement identical formulas; they differ only in summation order at the
1e-16 level.

Network parameter layout (flat vector), for dims ``[d, h1, h2, 1]``:

    W1 (h1*d, row-major) | b1 (h1) | W2 (h2*h1) | b2 (h2) | W3 (h2) | a1, a2

The two hidden layers use the adaptive sine activation ``sin(n_k a_k (Wz+b))``
where ``n_k`` is a fixed integer scale and ``a_k`` a trainable slope.  The
output layer is a pure weight row (no bias).
"""

import os

import numpy as np

NUMBA_ENABLED = False
if os.environ.get("NEFEM_DISABLE_NUMBA", "0") != "1":
    try:
        from numba import njit, prange

        NUMBA_ENABLED = True
    except ImportError:
        pass

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

    prange = range


def param_count(d, h1, h2):
    return h1 * d + h1 + h2 * h1 + h2 + h2 + 2


def param_offsets(d, h1, h2):
    """Offsets of (W1, b1, W2, b2, W3, slopes) in the flat parameter vector."""
    ow1 = 0
    ob1 = ow1 + h1 * d
    ow2 = ob1 + h1
    ob2 = ow2 + h2 * h1
    ow3 = ob2 + h2
    oa = ow3 + h2
    return ow1, ob1, ow2, ob2, ow3, oa


# ---------------------------------------------------------------------------
# single-network batched kernels (numba path)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_forward(theta, d, h1, h2, n1, n2, X, vals, grads):
    ow1 = 0
    ob1 = ow1 + h1 * d
    ow2 = ob1 + h1
    ob2 = ow2 + h2 * h1
    ow3 = ob2 + h2
    oa = ow3 + h2
    s1 = n1 * theta[oa]
    s2 = n2 * theta[oa + 1]
    P = X.shape[0]
    h1v = np.empty(h1)
    c1 = np.empty(h1)
    J1 = np.empty((h1, d))
    for p in range(P):
        for k in range(h1):
            u = theta[ob1 + k]
            for j in range(d):
                u += theta[ow1 + k * d + j] * X[p, j]
            z = s1 * u
            h1v[k] = np.sin(z)
            c1[k] = np.cos(z)
            for j in range(d):
                J1[k, j] = c1[k] * s1 * theta[ow1 + k * d + j]
        val = 0.0
        for j in range(d):
            grads[p, j] = 0.0
        for m in range(h2):
            u = theta[ob2 + m]
            for k in range(h1):
                u += theta[ow2 + m * h1 + k] * h1v[k]
            z = s2 * u
            h2v = np.sin(z)
            c2 = np.cos(z)
            w3 = theta[ow3 + m]
            val += w3 * h2v
            for j in range(d):
                pj = 0.0
                for k in range(h1):
                    pj += theta[ow2 + m * h1 + k] * J1[k, j]
                grads[p, j] += w3 * c2 * s2 * pj
        vals[p] = val


@njit(cache=True)
def _nb_forward_lap(theta, h1, h2, n1, n2, X, vals, grads, laps):
    # spatial mode only (d = 2); propagates the Hessian diagonal
    d = 2
    ow1 = 0
    ob1 = ow1 + h1 * d
    ow2 = ob1 + h1
    ob2 = ow2 + h2 * h1
    ow3 = ob2 + h2
    oa = ow3 + h2
    s1 = n1 * theta[oa]
    s2 = n2 * theta[oa + 1]
    P = X.shape[0]
    h1v = np.empty(h1)
    J1 = np.empty((h1, d))
    H1 = np.empty((h1, d))
    for p in range(P):
        for k in range(h1):
            u = theta[ob1 + k]
            for j in range(d):
                u += theta[ow1 + k * d + j] * X[p, j]
            z = s1 * u
            sk = np.sin(z)
            ck = np.cos(z)
            h1v[k] = sk
            for j in range(d):
                a1kj = s1 * theta[ow1 + k * d + j]
                J1[k, j] = ck * a1kj
                H1[k, j] = -sk * a1kj * a1kj
        val = 0.0
        lap = 0.0
        gx = 0.0
        gy = 0.0
        for m in range(h2):
            u = theta[ob2 + m]
            p2x = 0.0
            p2y = 0.0
            hx = 0.0
            hy = 0.0
            for k in range(h1):
                w2mk = theta[ow2 + m * h1 + k]
                u += w2mk * h1v[k]
                p2x += w2mk * J1[k, 0]
                p2y += w2mk * J1[k, 1]
                hx += w2mk * H1[k, 0]
                hy += w2mk * H1[k, 1]
            z = s2 * u
            sm = np.sin(z)
            cm = np.cos(z)
            b2x = s2 * p2x
            b2y = s2 * p2y
            w3 = theta[ow3 + m]
            val += w3 * sm
            gx += w3 * cm * b2x
            gy += w3 * cm * b2y
            lap += w3 * (cm * s2 * hx - sm * b2x * b2x
                         + cm * s2 * hy - sm * b2y * b2y)
        vals[p] = val
        grads[p, 0] = gx
        grads[p, 1] = gy
        laps[p] = lap


@njit(cache=True)
def _nb_backward(theta, d, h1, h2, n1, n2, X, wv, wg, gout):
    """Accumulate d/dtheta of sum_p wv[p]*N(x_p) + wg[p,:].grad N(x_p)."""
    ow1 = 0
    ob1 = ow1 + h1 * d
    ow2 = ob1 + h1
    ob2 = ow2 + h2 * h1
    ow3 = ob2 + h2
    oa = ow3 + h2
    s1 = n1 * theta[oa]
    s2 = n2 * theta[oa + 1]
    P = X.shape[0]
    u1 = np.empty(h1)
    h1v = np.empty(h1)
    c1 = np.empty(h1)
    J1 = np.empty((h1, d))
    u2 = np.empty(h2)
    h2v = np.empty(h2)
    c2 = np.empty(h2)
    P2 = np.empty((h2, d))
    dJ1 = np.empty((h1, d))
    dh1 = np.empty(h1)
    for p in range(P):
        # forward
        for k in range(h1):
            u = theta[ob1 + k]
            for j in range(d):
                u += theta[ow1 + k * d + j] * X[p, j]
            u1[k] = u
            z = s1 * u
            h1v[k] = np.sin(z)
            c1[k] = np.cos(z)
            for j in range(d):
                J1[k, j] = c1[k] * s1 * theta[ow1 + k * d + j]
        for m in range(h2):
            u = theta[ob2 + m]
            for j in range(d):
                P2[m, j] = 0.0
            for k in range(h1):
                w2mk = theta[ow2 + m * h1 + k]
                u += w2mk * h1v[k]
                for j in range(d):
                    P2[m, j] += w2mk * J1[k, j]
            u2[m] = u
            z = s2 * u
            h2v[m] = np.sin(z)
            c2[m] = np.cos(z)
        # reverse
        ds1 = 0.0
        ds2 = 0.0
        for k in range(h1):
            dh1[k] = 0.0
            for j in range(d):
                dJ1[k, j] = 0.0
        for m in range(h2):
            w3 = theta[ow3 + m]
            gw3 = wv[p] * h2v[m]
            dc2 = 0.0
            dz2 = wv[p] * w3 * c2[m]
            for j in range(d):
                j2 = c2[m] * s2 * P2[m, j]
                gw3 += wg[p, j] * j2
                dj2 = wg[p, j] * w3
                dc2 += dj2 * s2 * P2[m, j]
                db2 = c2[m] * dj2
                ds2 += db2 * P2[m, j]
                dp2 = s2 * db2
                for k in range(h1):
                    w2mk = theta[ow2 + m * h1 + k]
                    gout[ow2 + m * h1 + k] += dp2 * J1[k, j]
                    dJ1[k, j] += w2mk * dp2
            gout[ow3 + m] += gw3
            dz2 -= dc2 * h2v[m]
            ds2 += dz2 * u2[m]
            du2 = s2 * dz2
            gout[ob2 + m] += du2
            for k in range(h1):
                w2mk = theta[ow2 + m * h1 + k]
                gout[ow2 + m * h1 + k] += du2 * h1v[k]
                dh1[k] += w2mk * du2
        for k in range(h1):
            dc1 = 0.0
            for j in range(d):
                w1kj = theta[ow1 + k * d + j]
                dc1 += dJ1[k, j] * s1 * w1kj
                da1 = c1[k] * dJ1[k, j]
                ds1 += da1 * w1kj
                gout[ow1 + k * d + j] += s1 * da1
            dz1 = dh1[k] * c1[k] - dc1 * h1v[k]
            ds1 += dz1 * u1[k]
            du1 = s1 * dz1
            gout[ob1 + k] += du1
            for j in range(d):
                gout[ow1 + k * d + j] += du1 * X[p, j]
        gout[oa] += n1 * ds1
        gout[oa + 1] += n2 * ds2


# ---------------------------------------------------------------------------
# single-network batched kernels (numpy fallback)
# ---------------------------------------------------------------------------

def _np_unpack(theta, d, h1, h2):
    ow1, ob1, ow2, ob2, ow3, oa = param_offsets(d, h1, h2)
    W1 = theta[ow1:ob1].reshape(h1, d)
    b1 = theta[ob1:ow2]
    W2 = theta[ow2:ob2].reshape(h2, h1)
    b2 = theta[ob2:ow3]
    W3 = theta[ow3:oa]
    a = theta[oa:oa + 2]
    return W1, b1, W2, b2, W3, a


def _np_forward(theta, d, h1, h2, n1, n2, X, vals, grads):
    W1, b1, W2, b2, W3, a = _np_unpack(theta, d, h1, h2)
    s1, s2 = n1 * a[0], n2 * a[1]
    z1 = s1 * (X @ W1.T + b1)                       # (P, h1)
    h1v, c1 = np.sin(z1), np.cos(z1)
    J1 = c1[:, :, None] * (s1 * W1)[None, :, :]     # (P, h1, d)
    z2 = s2 * (h1v @ W2.T + b2)                     # (P, h2)
    h2v, c2 = np.sin(z2), np.cos(z2)
    P2 = np.einsum("mk,pkj->pmj", W2, J1)           # (P, h2, d)
    J2 = c2[:, :, None] * (s2 * P2)
    vals[:] = h2v @ W3
    grads[:] = np.einsum("m,pmj->pj", W3, J2)


def _np_forward_lap(theta, h1, h2, n1, n2, X, vals, grads, laps):
    d = 2
    W1, b1, W2, b2, W3, a = _np_unpack(theta, d, h1, h2)
    s1, s2 = n1 * a[0], n2 * a[1]
    A1 = s1 * W1
    z1 = s1 * (X @ W1.T + b1)
    h1v, c1 = np.sin(z1), np.cos(z1)
    J1 = c1[:, :, None] * A1[None, :, :]
    H1 = -h1v[:, :, None] * (A1 * A1)[None, :, :]
    z2 = s2 * (h1v @ W2.T + b2)
    h2v, c2 = np.sin(z2), np.cos(z2)
    P2 = np.einsum("mk,pkj->pmj", W2, J1)
    HP = s2 * np.einsum("mk,pkj->pmj", W2, H1)
    B2 = s2 * P2
    H2 = c2[:, :, None] * HP - h2v[:, :, None] * B2 * B2
    vals[:] = h2v @ W3
    grads[:] = np.einsum("m,pmj->pj", W3, c2[:, :, None] * B2)
    laps[:] = np.einsum("m,pmj->p", W3, H2)


def _np_backward(theta, d, h1, h2, n1, n2, X, wv, wg, gout):
    W1, b1, W2, b2, W3, a = _np_unpack(theta, d, h1, h2)
    s1, s2 = n1 * a[0], n2 * a[1]
    u1 = X @ W1.T + b1
    z1 = s1 * u1
    h1v, c1 = np.sin(z1), np.cos(z1)
    J1 = c1[:, :, None] * (s1 * W1)[None, :, :]
    u2 = h1v @ W2.T + b2
    z2 = s2 * u2
    h2v, c2 = np.sin(z2), np.cos(z2)
    P2 = np.einsum("mk,pkj->pmj", W2, J1)

    J2 = c2[:, :, None] * (s2 * P2)
    gW3 = wv @ h2v + np.einsum("pj,pmj->m", wg, J2)
    dh2 = wv[:, None] * W3[None, :]
    dJ2 = wg[:, None, :] * W3[None, :, None]
    dc2 = np.einsum("pmj,pmj->pm", dJ2, s2 * P2)
    dB2 = c2[:, :, None] * dJ2
    dz2 = dh2 * c2 - dc2 * h2v
    ds2 = np.einsum("pmj,pmj->", dB2, P2) + np.einsum("pm,pm->", dz2, u2)
    dP2 = s2 * dB2
    gW2 = np.einsum("pmj,pkj->mk", dP2, J1)
    dJ1 = np.einsum("mk,pmj->pkj", W2, dP2)
    du2 = s2 * dz2
    gW2 += du2.T @ h1v
    gb2 = du2.sum(axis=0)
    dh1 = du2 @ W2
    dc1 = np.einsum("pkj,kj->pk", dJ1, s1 * W1)
    dA1 = c1[:, :, None] * dJ1
    dz1 = dh1 * c1 - dc1 * h1v
    ds1 = np.einsum("pkj,kj->", dA1, W1) + np.einsum("pk,pk->", dz1, u1)
    gW1 = s1 * dA1.sum(axis=0)
    du1 = s1 * dz1
    gW1 += du1.T @ X
    gb1 = du1.sum(axis=0)

    ow1, ob1, ow2, ob2, ow3, oa = param_offsets(d, h1, h2)
    gout[ow1:ob1] += gW1.ravel()
    gout[ob1:ow2] += gb1
    gout[ow2:ob2] += gW2.ravel()
    gout[ob2:ow3] += gb2
    gout[ow3:oa] += gW3
    gout[oa] += n1 * ds1
    gout[oa + 1] += n2 * ds2


# ---------------------------------------------------------------------------
# public single-network entry points
# ---------------------------------------------------------------------------

def mlp_forward(theta, d, h1, h2, n1, n2, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    vals = np.empty(X.shape[0])
    grads = np.empty((X.shape[0], d))
    if NUMBA_ENABLED:
        _nb_forward(theta, d, h1, h2, float(n1), float(n2), X, vals, grads)
    else:
        _np_forward(theta, d, h1, h2, float(n1), float(n2), X, vals, grads)
    return vals, grads


def mlp_forward_lap(theta, h1, h2, n1, n2, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    vals = np.empty(X.shape[0])
    grads = np.empty((X.shape[0], 2))
    laps = np.empty(X.shape[0])
    if NUMBA_ENABLED:
        _nb_forward_lap(theta, h1, h2, float(n1), float(n2), X, vals, grads, laps)
    else:
        _np_forward_lap(theta, h1, h2, float(n1), float(n2), X, vals, grads, laps)
    return vals, grads, laps


def mlp_backward(theta, d, h1, h2, n1, n2, X, wv, wg):
    X = np.ascontiguousarray(X, dtype=np.float64)
    wv = np.ascontiguousarray(wv, dtype=np.float64)
    wg = np.ascontiguousarray(wg, dtype=np.float64)
    gout = np.zeros(theta.shape[0])
    if NUMBA_ENABLED:
        _nb_backward(theta, d, h1, h2, float(n1), float(n2), X, wv, wg, gout)
    else:
        _np_backward(theta, d, h1, h2, float(n1), float(n2), X, wv, wg, gout)
    return gout


# ---------------------------------------------------------------------------
# epoch-level kernels over all networks / all elements
# ---------------------------------------------------------------------------
# Data layout (see assembly.py): quadrature points of all elements live in one
# CSR-style block pts[NQ, 2] with elem_ptr[E+1]; each element has up to 3
# enrichment slots (one per enriched vertex).

@njit(cache=True, parallel=True)
def _nb_fill_enrichment(params, anchors, d, h1, h2, n1, n2,
                        patch_ptr, patch_elems, patch_slots,
                        elem_ptr, pts, dist_mode, Dv, Dg,
                        verts_xy, verts_D,
                        enr_val, enr_grad, vert_val):
    M = params.shape[0]
    for m in prange(M):
        theta = params[m]
        ax = anchors[m, 0]
        ay = anchors[m, 1]
        x = np.empty((1, 3))
        vals = np.empty(1)
        grads = np.empty((1, 3))
        for idx in range(patch_ptr[m], patch_ptr[m + 1]):
            K = patch_elems[idx]
            s = patch_slots[idx]
            for q in range(elem_ptr[K], elem_ptr[K + 1]):
                x[0, 0] = pts[q, 0] - ax
                x[0, 1] = pts[q, 1] - ay
                if dist_mode == 1:
                    x[0, 2] = Dv[q]
                    _nb_forward(theta, d, h1, h2, n1, n2, x[:, :3], vals, grads)
                    enr_val[q, s] = vals[0]
                    enr_grad[q, s, 0] = grads[0, 0] + grads[0, 2] * Dg[q, 0]
                    enr_grad[q, s, 1] = grads[0, 1] + grads[0, 2] * Dg[q, 1]
                else:
                    _nb_forward(theta, d, h1, h2, n1, n2, x[:, :2], vals, grads)
                    enr_val[q, s] = vals[0]
                    enr_grad[q, s, 0] = grads[0, 0]
                    enr_grad[q, s, 1] = grads[0, 1]
            for v in range(3):
                x[0, 0] = verts_xy[K, v, 0] - ax
                x[0, 1] = verts_xy[K, v, 1] - ay
                if dist_mode == 1:
                    x[0, 2] = verts_D[K, v]
                    _nb_forward(theta, d, h1, h2, n1, n2, x[:, :3], vals, grads)
                else:
                    _nb_forward(theta, d, h1, h2, n1, n2, x[:, :2], vals, grads)
                vert_val[K, s, v] = vals[0]


@njit(cache=True, parallel=True)
def _nb_local_system(elem_ptr, w, aq, fq, lam, dlam, enr_act,
                     enr_val, enr_grad, vert_val,
                     Aloc, Floc, basis_val, basis_grad):
    # enrichment slot s corresponds to local vertex s; enr_act[K, s] marks
    # slots whose vertex carries an enrichment DoF
    E = elem_ptr.shape[0] - 1
    for K in prange(E):
        for i in range(6):
            Floc[K, i] = 0.0
            for j in range(6):
                Aloc[K, i, j] = 0.0
        for q in range(elem_ptr[K], elem_ptr[K + 1]):
            for v in range(3):
                basis_val[q, v] = lam[q, v]
                basis_grad[q, v, 0] = dlam[K, v, 0]
                basis_grad[q, v, 1] = dlam[K, v, 1]
            # enrichment basis: L_s (N - interp(N)) with nodal values vert_val
            for s in range(3):
                if enr_act[K, s] == 0:
                    continue
                ell = 0.0
                ellgx = 0.0
                ellgy = 0.0
                for v in range(3):
                    cv = vert_val[K, s, v]
                    ell += lam[q, v] * cv
                    ellgx += dlam[K, v, 0] * cv
                    ellgy += dlam[K, v, 1] * cv
                diff = enr_val[q, s] - ell
                basis_val[q, 3 + s] = lam[q, s] * diff
                basis_grad[q, 3 + s, 0] = (dlam[K, s, 0] * diff
                                           + lam[q, s] * (enr_grad[q, s, 0] - ellgx))
                basis_grad[q, 3 + s, 1] = (dlam[K, s, 1] * diff
                                           + lam[q, s] * (enr_grad[q, s, 1] - ellgy))
            wa = w[q] * aq[q]
            wf = w[q] * fq[q]
            for i in range(6):
                if i >= 3 and enr_act[K, i - 3] == 0:
                    continue
                Floc[K, i] += wf * basis_val[q, i]
                gix = basis_grad[q, i, 0]
                giy = basis_grad[q, i, 1]
                for j in range(i + 1):
                    if j >= 3 and enr_act[K, j - 3] == 0:
                        continue
                    Aloc[K, i, j] += wa * (gix * basis_grad[q, j, 0]
                                           + giy * basis_grad[q, j, 1])
        for i in range(6):
            for j in range(i):
                Aloc[K, j, i] = Aloc[K, i, j]


@njit(cache=True, parallel=True)
def _nb_cotangents(elem_ptr, w, aq, fq, lam, dlam, enr_act,
                   basis_grad, coef_loc, enr_coef,
                   qcot_v, qcot_g, vcot):
    E = elem_ptr.shape[0] - 1
    for K in prange(E):
        for s in range(3):
            for v in range(3):
                vcot[K, s, v] = 0.0
        for q in range(elem_ptr[K], elem_ptr[K + 1]):
            gux = 0.0
            guy = 0.0
            for i in range(6):
                gux += coef_loc[K, i] * basis_grad[q, i, 0]
                guy += coef_loc[K, i] * basis_grad[q, i, 1]
            for s in range(3):
                if enr_act[K, s] == 0:
                    continue
                ce = enr_coef[K, s]
                wa = w[q] * aq[q]
                wf = w[q] * fq[q]
                adot = wa * (gux * dlam[K, s, 0] + guy * dlam[K, s, 1])
                qcot_v[q, s] = ce * (adot - wf * lam[q, s])
                qcot_g[q, s, 0] = ce * wa * lam[q, s] * gux
                qcot_g[q, s, 1] = ce * wa * lam[q, s] * guy
                for v in range(3):
                    gv = (adot * lam[q, v]
                          + wa * lam[q, s] * (gux * dlam[K, v, 0] + guy * dlam[K, v, 1])
                          - wf * lam[q, s] * lam[q, v])
                    vcot[K, s, v] -= ce * gv


@njit(cache=True, parallel=True)
def _nb_backward_all(params, anchors, d, h1, h2, n1, n2,
                     patch_ptr, patch_elems, patch_slots,
                     elem_ptr, pts, dist_mode, Dv, Dg,
                     verts_xy, verts_D,
                     qcot_v, qcot_g, vcot, grads):
    M = params.shape[0]
    for m in prange(M):
        theta = params[m]
        ax = anchors[m, 0]
        ay = anchors[m, 1]
        x = np.empty((1, 3))
        wv = np.empty(1)
        wg = np.empty((1, 3))
        g = grads[m]
        for idx in range(patch_ptr[m], patch_ptr[m + 1]):
            K = patch_elems[idx]
            s = patch_slots[idx]
            for q in range(elem_ptr[K], elem_ptr[K + 1]):
                x[0, 0] = pts[q, 0] - ax
                x[0, 1] = pts[q, 1] - ay
                wv[0] = qcot_v[q, s]
                wg[0, 0] = qcot_g[q, s, 0]
                wg[0, 1] = qcot_g[q, s, 1]
                if dist_mode == 1:
                    x[0, 2] = Dv[q]
                    wg[0, 2] = qcot_g[q, s, 0] * Dg[q, 0] + qcot_g[q, s, 1] * Dg[q, 1]
                    _nb_backward(theta, d, h1, h2, n1, n2, x[:, :3], wv, wg[:, :3], g)
                else:
                    _nb_backward(theta, d, h1, h2, n1, n2, x[:, :2], wv, wg[:, :2], g)
            for v in range(3):
                x[0, 0] = verts_xy[K, v, 0] - ax
                x[0, 1] = verts_xy[K, v, 1] - ay
                wv[0] = vcot[K, s, v]
                wg[0, 0] = 0.0
                wg[0, 1] = 0.0
                if dist_mode == 1:
                    x[0, 2] = verts_D[K, v]
                    wg[0, 2] = 0.0
                    _nb_backward(theta, d, h1, h2, n1, n2, x[:, :3], wv, wg[:, :3], g)
                else:
                    _nb_backward(theta, d, h1, h2, n1, n2, x[:, :2], wv, wg[:, :2], g)


# ---------------------------------------------------------------------------
# numpy fallbacks for the epoch-level kernels
# ---------------------------------------------------------------------------

def _np_fill_enrichment(params, anchors, d, h1, h2, n1, n2,
                        patch_ptr, patch_elems, patch_slots,
                        elem_ptr, pts, dist_mode, Dv, Dg,
                        verts_xy, verts_D,
                        enr_val, enr_grad, vert_val):
    M = params.shape[0]
    for m in range(M):
        theta = params[m]
        for idx in range(patch_ptr[m], patch_ptr[m + 1]):
            K = patch_elems[idx]
            s = patch_slots[idx]
            lo, hi = elem_ptr[K], elem_ptr[K + 1]
            Xq = pts[lo:hi] - anchors[m]
            Xv = verts_xy[K] - anchors[m]
            if dist_mode:
                Xq = np.column_stack([Xq, Dv[lo:hi]])
                Xv = np.column_stack([Xv, verts_D[K]])
            vals = np.empty(hi - lo)
            grads = np.empty((hi - lo, d))
            _np_forward(theta, d, h1, h2, n1, n2, Xq, vals, grads)
            enr_val[lo:hi, s] = vals
            if dist_mode:
                enr_grad[lo:hi, s, :] = grads[:, :2] + grads[:, 2:3] * Dg[lo:hi]
            else:
                enr_grad[lo:hi, s, :] = grads
            vv = np.empty(3)
            gv = np.empty((3, d))
            _np_forward(theta, d, h1, h2, n1, n2, Xv, vv, gv)
            vert_val[K, s, :] = vv


def _np_local_system(elem_ptr, w, aq, fq, lam, dlam, enr_act,
                     enr_val, enr_grad, vert_val,
                     Aloc, Floc, basis_val, basis_grad):
    E = elem_ptr.shape[0] - 1
    Aloc[:] = 0.0
    Floc[:] = 0.0
    for K in range(E):
        lo, hi = elem_ptr[K], elem_ptr[K + 1]
        bv = basis_val[lo:hi]
        bg = basis_grad[lo:hi]
        bv[:, :3] = lam[lo:hi]
        bg[:, :3, :] = dlam[K][None, :, :]
        for s in range(3):
            if not enr_act[K, s]:
                continue
            cv = vert_val[K, s]
            ell = lam[lo:hi] @ cv
            ellg = dlam[K].T @ cv
            diff = enr_val[lo:hi, s] - ell
            bv[:, 3 + s] = lam[lo:hi, s] * diff
            bg[:, 3 + s, :] = (dlam[K, s][None, :] * diff[:, None]
                               + lam[lo:hi, s:s + 1] * (enr_grad[lo:hi, s, :] - ellg))
        wa = w[lo:hi] * aq[lo:hi]
        wf = w[lo:hi] * fq[lo:hi]
        Aloc[K] = np.einsum("q,qid,qjd->ij", wa, bg, bg)
        Floc[K] = wf @ bv


def _np_cotangents(elem_ptr, w, aq, fq, lam, dlam, enr_act,
                   basis_grad, coef_loc, enr_coef,
                   qcot_v, qcot_g, vcot):
    E = elem_ptr.shape[0] - 1
    vcot[:] = 0.0
    for K in range(E):
        lo, hi = elem_ptr[K], elem_ptr[K + 1]
        gu = np.einsum("i,qid->qd", coef_loc[K], basis_grad[lo:hi])
        wa = w[lo:hi] * aq[lo:hi]
        wf = w[lo:hi] * fq[lo:hi]
        for s in range(3):
            if not enr_act[K, s]:
                continue
            ce = enr_coef[K, s]
            adot = wa * (gu @ dlam[K, s])
            qcot_v[lo:hi, s] = ce * (adot - wf * lam[lo:hi, s])
            qcot_g[lo:hi, s, :] = ce * (wa * lam[lo:hi, s])[:, None] * gu
            for v in range(3):
                gvq = (adot * lam[lo:hi, v]
                       + wa * lam[lo:hi, s] * (gu @ dlam[K, v])
                       - wf * lam[lo:hi, s] * lam[lo:hi, v])
                vcot[K, s, v] = -ce * gvq.sum()


def _np_backward_all(params, anchors, d, h1, h2, n1, n2,
                     patch_ptr, patch_elems, patch_slots,
                     elem_ptr, pts, dist_mode, Dv, Dg,
                     verts_xy, verts_D,
                     qcot_v, qcot_g, vcot, grads):
    M = params.shape[0]
    for m in range(M):
        theta = params[m]
        g = grads[m]
        for idx in range(patch_ptr[m], patch_ptr[m + 1]):
            K = patch_elems[idx]
            s = patch_slots[idx]
            lo, hi = elem_ptr[K], elem_ptr[K + 1]
            Xq = pts[lo:hi] - anchors[m]
            Xv = verts_xy[K] - anchors[m]
            wv = qcot_v[lo:hi, s]
            if dist_mode:
                Xq = np.column_stack([Xq, Dv[lo:hi]])
                Xv = np.column_stack([Xv, verts_D[K]])
                wg = np.column_stack([qcot_g[lo:hi, s, :],
                                      np.einsum("qd,qd->q", qcot_g[lo:hi, s, :], Dg[lo:hi])])
            else:
                wg = qcot_g[lo:hi, s, :]
            _np_backward(theta, d, h1, h2, n1, n2, Xq, wv, wg, g)
            _np_backward(theta, d, h1, h2, n1, n2, Xv, vcot[K, s],
                         np.zeros((3, d)), g)


# dispatch table
if NUMBA_ENABLED:
    fill_enrichment = _nb_fill_enrichment
    local_system = _nb_local_system
    cotangents = _nb_cotangents
    backward_all = _nb_backward_all
else:
    fill_enrichment = _np_fill_enrichment
    local_system = _np_local_system
    cotangents = _np_cotangents
    backward_all = _np_backward_all
