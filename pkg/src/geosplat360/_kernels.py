"""Numba kernels for the panorama splatting renderer.

All geometry here is in the camera frame. Per-Gaussian inputs:

P    (G, 3)     centers
A    (G, 3, 3)  principal axes as columns
S    (G, 3)     scales
OP   (G,)       opacities
COL  (G, 3)     colors
NIDX (G,)       index of the smallest scale (the disc normal axis)

Per-pixel fragments are ordered by (depth, gaussian index); the candidate
lists are always ascending in index, so a stable insertion keeps that order
in both reference and tiled modes.
"""

import math

import numpy as np
from numba import njit, prange

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
GRAZING = 1e-8
COVERAGE_MIN = 1e-8
TILE = 16
N_GRAD = 19  # dP(3) dA(9, column k at 3 + 3k) dS(3) dOP(1) dCOL(3)
N_CHUNKS = 8


@njit(cache=True, inline="always")
def _fragment(r, g, FT, OP, literal, near):
    """Return (ok, depth, alpha, t) of the hit of ray ``r`` on Gaussian ``g``.

    ``FT`` is the table built by ``fragment_table``.
    """
    nr = FT[g, 4] * r[0] + FT[g, 5] * r[1] + FT[g, 6] * r[2]
    if abs(nr) < GRAZING:
        return False, 0.0, 0.0, 0.0
    t = FT[g, 7] / nr
    if t <= near:
        return False, 0.0, 0.0, 0.0
    u0 = t * (FT[g, 8] * r[0] + FT[g, 9] * r[1] + FT[g, 10] * r[2]) - FT[g, 11]
    u1 = t * (FT[g, 12] * r[0] + FT[g, 13] * r[1] + FT[g, 14] * r[2]) - FT[g, 15]
    a = OP[g] * math.exp(-0.5 * (u0 * u0 + u1 * u1))
    if a < ALPHA_MIN:
        return False, 0.0, 0.0, 0.0
    depth = t * r[2] if literal else t
    return True, depth, a, t


@njit(cache=True, inline="always")
def _collect(r, cands, ncand, OP, FT, literal, near, cull, buf_d, buf_i, buf_a):
    cnt = 0
    for j in range(ncand):
        g = cands[j]
        # conservative cone test: ray must pass the Gaussian's bounding sphere
        if cull and r[0] * FT[g, 0] + r[1] * FT[g, 1] + r[2] * FT[g, 2] < FT[g, 3]:
            continue
        ok, d, a, _ = _fragment(r, g, FT, OP, literal, near)
        if not ok:
            continue
        # stable insertion: equal depths keep ascending gaussian index
        pos = cnt
        while pos > 0 and buf_d[pos - 1] > d:
            buf_d[pos] = buf_d[pos - 1]
            buf_i[pos] = buf_i[pos - 1]
            buf_a[pos] = buf_a[pos - 1]
            pos -= 1
        buf_d[pos] = d
        buf_i[pos] = g
        buf_a[pos] = a
        cnt += 1
    return cnt


@njit(cache=True)
def _render_tile(ty, tx, H, W, dirs, cands, ncand, OP, COL, FT, bg,
                 literal, near, cull, rgb, depth, alpha, CN, CI, CA, CD):
    buf_d = np.empty(max(ncand, 1))
    buf_i = np.empty(max(ncand, 1), dtype=np.int64)
    buf_a = np.empty(max(ncand, 1))
    r = np.empty(3)
    cap = CI.shape[2]
    for v in range(ty * TILE, min(H, (ty + 1) * TILE)):
        for u in range(tx * TILE, min(W, (tx + 1) * TILE)):
            # compositing is written out here rather than in a helper: array
            # arguments cost refcount traffic per call, which dominated
            # sparse tiles
            r[0] = dirs[v, u, 0]
            r[1] = dirs[v, u, 1]
            r[2] = dirs[v, u, 2]
            cnt = 0
            if ncand > 0:
                cnt = _collect(r, cands, ncand, OP, FT, literal, near, cull, buf_d, buf_i, buf_a)
            T = 1.0
            num = 0.0
            den = 0.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            used = cnt
            for i in range(cnt):
                a = buf_a[i]
                w = a * T
                g = buf_i[i]
                num += buf_d[i] * w
                den += w
                c0 += COL[g, 0] * w
                c1 += COL[g, 1] * w
                c2 += COL[g, 2] * w
                T *= 1.0 - a
                if T < T_MIN:
                    used = i + 1
                    break
            if cap > 0:
                # keep the composited fragments for the backward pass
                if used <= cap:
                    CN[v, u] = used
                    for i in range(used):
                        CI[v, u, i] = buf_i[i]
                        CA[v, u, i] = buf_a[i]
                        CD[v, u, i] = buf_d[i]
                else:
                    CN[v, u] = -1
            rgb[v, u, 0] = c0 + T * bg[0]
            rgb[v, u, 1] = c1 + T * bg[1]
            rgb[v, u, 2] = c2 + T * bg[2]
            depth[v, u] = num / den if den >= COVERAGE_MIN else -1.0
            alpha[v, u] = den


@njit(parallel=True, cache=True)
def render_reference(dirs, P, A, S, OP, COL, NIDX, FT, bg, literal, near, CN, CI, CA, CD):
    H, W = dirs.shape[0], dirs.shape[1]
    G = P.shape[0]
    rgb = np.empty((H, W, 3))
    depth = np.empty((H, W))
    alpha = np.empty((H, W))
    cands = np.arange(G)
    nty = (H + TILE - 1) // TILE
    ntx = (W + TILE - 1) // TILE
    for t in prange(nty * ntx):
        # every Gaussian gets the full hit test, with no bounding-cone shortcut
        _render_tile(t // ntx, t % ntx, H, W, dirs, cands, G, OP, COL, FT, bg,
                     literal, near, False, rgb, depth, alpha, CN, CI, CA, CD)
    return rgb, depth, alpha


@njit(parallel=True, cache=True)
def render_tiled(dirs, P, A, S, OP, COL, NIDX, FT, bg, literal, near, offsets, items,
                 CN, CI, CA, CD):
    H, W = dirs.shape[0], dirs.shape[1]
    rgb = np.empty((H, W, 3))
    depth = np.empty((H, W))
    alpha = np.empty((H, W))
    nty = (H + TILE - 1) // TILE
    ntx = (W + TILE - 1) // TILE
    for t in prange(nty * ntx):
        start = offsets[t]
        n = offsets[t + 1] - start
        _render_tile(t // ntx, t % ntx, H, W, dirs, items[start:start + n], n, OP, COL,
                     FT, bg, literal, near, True, rgb, depth, alpha, CN, CI, CA, CD)
    return rgb, depth, alpha


def fragment_cache(H, W, capacity, reuse=None):
    """Per-pixel storage (count, index, alpha, depth) for composited fragments.

    Only the count plane is initialised; ``reuse`` may hold a previous cache
    of the same geometry whose buffers are recycled.
    """
    if capacity <= 0:
        H = W = 1
        capacity = 0
    if reuse is not None and reuse[1].shape == (H, W, capacity):
        reuse[0].fill(-1)
        return reuse
    return (np.full((H, W), -1, dtype=np.int64), np.empty((H, W, capacity), dtype=np.int64),
            np.empty((H, W, capacity)), np.empty((H, W, capacity)))


@njit(cache=True)
def fragment_table(P, A, S, OP, NIDX, margin):
    """Per-Gaussian constants for the ray hit test, one contiguous row each.

    0:3   unit direction to the center
    3     cosine of the angular radius of the sphere holding every point
          whose falloff exceeds ALPHA_MIN (-2: camera inside, +2: never hit)
    4:7   disc normal n, 7: n . p
    8:11  first tangent axis divided by its scale, 11: that axis . p / scale
    12:15 second tangent axis likewise, 15: its offset
    """
    G = P.shape[0]
    ft = np.zeros((G, 16))
    for g in range(G):
        m = NIDX[g]
        k0 = 1 if m == 0 else 0
        k1 = 1 if m == 2 else 2
        npd = 0.0
        o0 = 0.0
        o1 = 0.0
        for i in range(3):
            ft[g, 4 + i] = A[g, i, m]
            ft[g, 8 + i] = A[g, i, k0] / S[g, k0]
            ft[g, 12 + i] = A[g, i, k1] / S[g, k1]
            npd += A[g, i, m] * P[g, i]
            o0 += ft[g, 8 + i] * P[g, i]
            o1 += ft[g, 12 + i] * P[g, i]
        ft[g, 7] = npd
        ft[g, 11] = o0
        ft[g, 15] = o1
        dist = math.sqrt(P[g, 0] ** 2 + P[g, 1] ** 2 + P[g, 2] ** 2)
        ft[g, 2] = 1.0
        if OP[g] < ALPHA_MIN:
            ft[g, 3] = 2.0
            continue
        rad = math.sqrt(2.0 * math.log(OP[g] / ALPHA_MIN)) * max(S[g, 0], max(S[g, 1], S[g, 2])) * margin
        if dist <= rad:
            ft[g, 3] = -2.0
            continue
        ft[g, 0] = P[g, 0] / dist
        ft[g, 1] = P[g, 1] / dist
        ft[g, 2] = P[g, 2] / dist
        x = rad / dist
        # cos(asin(x)) with a little slack against rounding
        ft[g, 3] = math.sqrt(1.0 - x * x) - 1e-12
    return ft


@njit(cache=True)
def _footprint(g, P, S, OP, H, W, margin):
    """Conservative pixel box (v0, v1, u0, u1, full_width) of Gaussian g.

    Uses the bounding sphere of the region where the falloff stays above
    ALPHA_MIN; returns v1 < v0 when the Gaussian can never contribute.
    """
    if OP[g] < ALPHA_MIN:
        return 0, -1, 0, -1, False
    mmax = 2.0 * math.log(OP[g] / ALPHA_MIN)
    smax = max(S[g, 0], max(S[g, 1], S[g, 2]))
    rad = math.sqrt(mmax) * smax * margin
    dist = math.sqrt(P[g, 0] ** 2 + P[g, 1] ** 2 + P[g, 2] ** 2)
    if dist <= rad:
        return 0, H - 1, 0, W - 1, True
    theta = math.asin(rad / dist)
    lat = math.asin(min(1.0, max(-1.0, P[g, 1] / dist)))
    lon = math.atan2(P[g, 0], P[g, 2])
    lat_hi = lat + theta
    lat_lo = lat - theta
    vc_lo = (0.5 * math.pi - lat_hi) / math.pi * H - 0.5
    vc_hi = (0.5 * math.pi - lat_lo) / math.pi * H - 0.5
    v0 = max(0, int(math.floor(vc_lo)) - 1)
    v1 = min(H - 1, int(math.ceil(vc_hi)) + 1)
    if lat_hi >= 0.5 * math.pi or lat_lo <= -0.5 * math.pi:
        return v0, v1, 0, W - 1, True
    s = math.sin(theta) / math.cos(lat)
    if s >= 1.0:
        return v0, v1, 0, W - 1, True
    dlon = math.asin(s)
    uc_lo = (lon - dlon + math.pi) / (2.0 * math.pi) * W - 0.5
    uc_hi = (lon + dlon + math.pi) / (2.0 * math.pi) * W - 0.5
    u0 = int(math.floor(uc_lo)) - 1
    u1 = int(math.ceil(uc_hi)) + 1
    if u1 - u0 + 1 >= W:
        return v0, v1, 0, W - 1, True
    return v0, v1, u0, u1, False


@njit(cache=True)
def _mark_columns(u0, u1, full, W, ntx, mark):
    for c in range(ntx):
        mark[c] = False
    if full:
        for c in range(ntx):
            mark[c] = True
        return
    for u in range(u0, u1 + 1, 1):
        uu = u % W
        mark[uu // TILE] = True


@njit(cache=True)
def bin_gaussians(P, S, OP, H, W, margin):
    """CSR tile lists (offsets, items); each list is ascending in Gaussian index."""
    G = P.shape[0]
    nty = (H + TILE - 1) // TILE
    ntx = (W + TILE - 1) // TILE
    counts = np.zeros(nty * ntx + 1, dtype=np.int64)
    mark = np.zeros(ntx, dtype=np.bool_)
    boxes = np.empty((G, 5), dtype=np.int64)
    for g in range(G):
        v0, v1, u0, u1, full = _footprint(g, P, S, OP, H, W, margin)
        boxes[g, 0] = v0
        boxes[g, 1] = v1
        boxes[g, 2] = u0
        boxes[g, 3] = u1
        boxes[g, 4] = 1 if full else 0
        if v1 < v0:
            continue
        _mark_columns(u0, u1, full, W, ntx, mark)
        for ty in range(v0 // TILE, v1 // TILE + 1):
            for tx in range(ntx):
                if mark[tx]:
                    counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for g in range(G):
        v0 = boxes[g, 0]
        v1 = boxes[g, 1]
        if v1 < v0:
            continue
        _mark_columns(boxes[g, 2], boxes[g, 3], boxes[g, 4] == 1, W, ntx, mark)
        for ty in range(v0 // TILE, v1 // TILE + 1):
            for tx in range(ntx):
                if mark[tx]:
                    t = ty * ntx + tx
                    items[fill[t]] = g
                    fill[t] += 1
    return offsets, items


@njit(cache=True, inline="always")
def _fragment_backward(r, g, P, A, S, OP, NIDX, literal, near, g_alpha, g_depth, grad):
    m = NIDX[g]
    nr = A[g, 0, m] * r[0] + A[g, 1, m] * r[1] + A[g, 2, m] * r[2]
    npd = A[g, 0, m] * P[g, 0] + A[g, 1, m] * P[g, 1] + A[g, 2, m] * P[g, 2]
    t = npd / nr
    d0 = t * r[0] - P[g, 0]
    d1 = t * r[1] - P[g, 1]
    d2 = t * r[2] - P[g, 2]
    # the two in-plane axes
    k0 = 1 if m == 0 else 0
    k1 = 1 if m == 2 else 2
    s0 = S[g, k0]
    s1 = S[g, k1]
    u0 = (d0 * A[g, 0, k0] + d1 * A[g, 1, k0] + d2 * A[g, 2, k0]) / s0
    u1 = (d0 * A[g, 0, k1] + d1 * A[g, 1, k1] + d2 * A[g, 2, k1]) / s1
    e = math.exp(-0.5 * (u0 * u0 + u1 * u1))
    a = OP[g] * e
    grad[g, 15] += g_alpha * e
    g_mah = -0.5 * a * g_alpha
    h0 = 2.0 * u0 * g_mah / s0
    h1 = 2.0 * u1 * g_mah / s1
    grad[g, 12 + k0] -= u0 * h0
    grad[g, 12 + k1] -= u1 * h1
    gd0 = A[g, 0, k0] * h0 + A[g, 0, k1] * h1
    gd1 = A[g, 1, k0] * h0 + A[g, 1, k1] * h1
    gd2 = A[g, 2, k0] * h0 + A[g, 2, k1] * h1
    grad[g, 3 + 3 * k0] += d0 * h0
    grad[g, 4 + 3 * k0] += d1 * h0
    grad[g, 5 + 3 * k0] += d2 * h0
    grad[g, 3 + 3 * k1] += d0 * h1
    grad[g, 4 + 3 * k1] += d1 * h1
    grad[g, 5 + 3 * k1] += d2 * h1
    f = r[2] if literal else 1.0
    g_t = g_depth * f + r[0] * gd0 + r[1] * gd1 + r[2] * gd2
    q = g_t / nr
    grad[g, 0] += q * A[g, 0, m] - gd0
    grad[g, 1] += q * A[g, 1, m] - gd1
    grad[g, 2] += q * A[g, 2, m] - gd2
    grad[g, 3 + 3 * m] -= q * d0
    grad[g, 4 + 3 * m] -= q * d1
    grad[g, 5 + 3 * m] -= q * d2


@njit(cache=True)
def _backward_tile(ty, tx, H, W, dirs, cands, ncand, P, A, S, OP, COL, NIDX, FT, bg, literal, near,
                   g_rgb, g_depth, g_alpha, grad, CN, CI, CA, CD):
    buf_d = np.empty(max(ncand, 1))
    buf_i = np.empty(max(ncand, 1), dtype=np.int64)
    buf_a = np.empty(max(ncand, 1))
    buf_T = np.empty(max(ncand, 1))
    cap = CI.shape[2]
    for v in range(ty * TILE, min(H, (ty + 1) * TILE)):
        for u in range(tx * TILE, min(W, (tx + 1) * TILE)):
            gr0 = g_rgb[v, u, 0]
            gr1 = g_rgb[v, u, 1]
            gr2 = g_rgb[v, u, 2]
            gD = g_depth[v, u]
            gA = g_alpha[v, u]
            if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and gD == 0.0 and gA == 0.0:
                continue
            r = dirs[v, u]
            if cap > 0 and CN[v, u] >= 0:
                cnt = CN[v, u]
                for i in range(cnt):
                    buf_i[i] = CI[v, u, i]
                    buf_a[i] = CA[v, u, i]
                    buf_d[i] = CD[v, u, i]
            else:
                cnt = _collect(r, cands, ncand, OP, FT, literal, near, True, buf_d, buf_i, buf_a)
            T = 1.0
            num = 0.0
            den = 0.0
            used = cnt
            for i in range(cnt):
                buf_T[i] = T
                w = buf_a[i] * T
                num += buf_d[i] * w
                den += w
                T *= 1.0 - buf_a[i]
                if T < T_MIN:
                    used = i + 1
                    break
            if den >= COVERAGE_MIN:
                Dhat = num / den
            else:
                Dhat = 0.0
                gD = 0.0
            Gd = 0.0
            Gw = 0.0
            Gc0 = bg[0]
            Gc1 = bg[1]
            Gc2 = bg[2]
            for i in range(used - 1, -1, -1):
                a = buf_a[i]
                Ti = buf_T[i]
                d = buf_d[i]
                g = buf_i[i]
                c0 = COL[g, 0]
                c1 = COL[g, 1]
                c2 = COL[g, 2]
                ga = Ti * (gr0 * (c0 - Gc0) + gr1 * (c1 - Gc1) + gr2 * (c2 - Gc2))
                ga += gA * Ti * (1.0 - Gw)
                gd = 0.0
                if gD != 0.0:
                    ga += gD * Ti * ((d - Gd) - Dhat * (1.0 - Gw)) / den
                    gd = gD * a * Ti / den
                w = a * Ti
                grad[g, 16] += gr0 * w
                grad[g, 17] += gr1 * w
                grad[g, 18] += gr2 * w
                Gd = a * d + (1.0 - a) * Gd
                Gw = a + (1.0 - a) * Gw
                Gc0 = a * c0 + (1.0 - a) * Gc0
                Gc1 = a * c1 + (1.0 - a) * Gc1
                Gc2 = a * c2 + (1.0 - a) * Gc2
                _fragment_backward(r, g, P, A, S, OP, NIDX, literal, near, ga, gd, grad)


@njit(parallel=True, cache=True)
def backward(dirs, P, A, S, OP, COL, NIDX, FT, bg, literal, near, offsets, items, tiled,
             g_rgb, g_depth, g_alpha, CN, CI, CA, CD):
    """Accumulate d(loss)/d(camera-frame Gaussian inputs) into a (G, N_GRAD) array.

    Tiles are dealt round-robin to a fixed number of chunks, each with its
    own accumulator, and the chunks are summed in order: the result does
    not depend on the thread count. ``CN, CI, CA, CD`` are the fragment
    cache filled by a forward pass over the same inputs (capacity 0 to
    recollect every pixel).
    """
    H, W = dirs.shape[0], dirs.shape[1]
    G = P.shape[0]
    nty = (H + TILE - 1) // TILE
    ntx = (W + TILE - 1) // TILE
    ntiles = nty * ntx
    partial = np.zeros((N_CHUNKS, G, N_GRAD))
    all_cands = np.arange(G)
    for c in prange(N_CHUNKS):
        for t in range(c, ntiles, N_CHUNKS):
            if tiled:
                start = offsets[t]
                n = offsets[t + 1] - start
                cands = items[start:start + n]
            else:
                n = G
                cands = all_cands
            _backward_tile(t // ntx, t % ntx, H, W, dirs, cands, n, P, A, S, OP, COL, NIDX, FT, bg,
                           literal, near, g_rgb, g_depth, g_alpha, partial[c], CN, CI, CA, CD)
    out = np.zeros((G, N_GRAD))
    for c in range(N_CHUNKS):
        out += partial[c]
    return out
