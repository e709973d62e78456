"""Numba kernels for ray tracing and weighted EM.

The ray-triangle test is Moeller-Trumbore, two-sided.  Nearest-hit selection
uses the exact minimum of t with bitwise ties broken by lowest triangle
index; the rule is order-independent, so the grid-accelerated path and the
brute-force scan agree exactly.
"""

from __future__ import annotations

import numpy as np
from numba import njit

EPS_T = 1e-6  # m, minimum accepted hit distance (avoids surface re-hits)
DET_EPS = 1e-12
GRAZE_EPS = 1e-9  # |d.n| below this terminates the ray
PLANE_VERTEX_EPS = 1e-9  # hit point this close to the UE plane counts as a crossing
TIE_MARGIN = 1e-9  # grid traversal keeps searching this far past the best hit

NB_OPTS = dict(cache=True, nogil=True)


@njit(inline="always", **NB_OPTS)
def _mt_t(tris, i, ox, oy, oz, dx, dy, dz):
    """Ray parameter of the hit with triangle i, or -1.0 on miss."""
    ax = tris[i, 0, 0]
    ay = tris[i, 0, 1]
    az = tris[i, 0, 2]
    e1x = tris[i, 1, 0] - ax
    e1y = tris[i, 1, 1] - ay
    e1z = tris[i, 1, 2] - az
    e2x = tris[i, 2, 0] - ax
    e2y = tris[i, 2, 1] - ay
    e2z = tris[i, 2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if -DET_EPS < det < DET_EPS:
        return -1.0
    inv = 1.0 / det
    tx = ox - ax
    ty = oy - ay
    tz = oz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= EPS_T:
        return -1.0
    return t


@njit(**NB_OPTS)
def brute_nearest(tris, ox, oy, oz, dx, dy, dz):
    """All-triangle scan; reference implementation.  Returns (t, index)."""
    best_t = np.inf
    best_i = -1
    for i in range(tris.shape[0]):
        t = _mt_t(tris, i, ox, oy, oz, dx, dy, dz)
        if t > 0.0 and (t < best_t or (t == best_t and i < best_i)):
            best_t = t
            best_i = i
    return best_t, best_i


@njit(**NB_OPTS)
def grid_nearest(
    tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris,
    ox, oy, oz, dx, dy, dz,
):
    """Uniform-grid 3D-DDA nearest hit.  Same selection rule as brute_nearest."""
    ix = int((ox - gmin[0]) * inv_cell[0])
    iy = int((oy - gmin[1]) * inv_cell[1])
    iz = int((oz - gmin[2]) * inv_cell[2])
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix >= dims[0]:
        ix = dims[0] - 1
    if iy >= dims[1]:
        iy = dims[1] - 1
    if iz >= dims[2]:
        iz = dims[2] - 1

    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    step_z = 1 if dz > 0 else -1
    if dx != 0.0:
        nx = gmin[0] + (ix + (1 if dx > 0 else 0)) * cell_size[0]
        tmax_x = (nx - ox) / dx
        tdel_x = cell_size[0] / abs(dx)
    else:
        tmax_x = np.inf
        tdel_x = np.inf
    if dy != 0.0:
        ny = gmin[1] + (iy + (1 if dy > 0 else 0)) * cell_size[1]
        tmax_y = (ny - oy) / dy
        tdel_y = cell_size[1] / abs(dy)
    else:
        tmax_y = np.inf
        tdel_y = np.inf
    if dz != 0.0:
        nz = gmin[2] + (iz + (1 if dz > 0 else 0)) * cell_size[2]
        tmax_z = (nz - oz) / dz
        tdel_z = cell_size[2] / abs(dz)
    else:
        tmax_z = np.inf
        tdel_z = np.inf

    best_t = np.inf
    best_i = -1
    while True:
        cell = (ix * dims[1] + iy) * dims[2] + iz
        for j in range(cell_start[cell], cell_start[cell + 1]):
            i = cell_tris[j]
            t = _mt_t(tris, i, ox, oy, oz, dx, dy, dz)
            if t > 0.0 and (t < best_t or (t == best_t and i < best_i)):
                best_t = t
                best_i = i
        t_next = min(tmax_x, min(tmax_y, tmax_z))
        if best_i >= 0 and t_next > best_t + TIE_MARGIN:
            break
        if tmax_x <= tmax_y and tmax_x <= tmax_z:
            ix += step_x
            if ix < 0 or ix >= dims[0]:
                break
            tmax_x += tdel_x
        elif tmax_y <= tmax_z:
            iy += step_y
            if iy < 0 or iy >= dims[1]:
                break
            tmax_y += tdel_y
        else:
            iz += step_z
            if iz < 0 or iz >= dims[2]:
                break
            tmax_z += tdel_z
    return best_t, best_i


@njit(inline="always", **NB_OPTS)
def _nearest(
    use_grid, tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris,
    ox, oy, oz, dx, dy, dz,
):
    if use_grid:
        return grid_nearest(
            tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris,
            ox, oy, oz, dx, dy, dz,
        )
    return brute_nearest(tris, ox, oy, oz, dx, dy, dz)


@njit(**NB_OPTS)
def trace_one(
    tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris, use_grid,
    ox, oy, oz, dx, dy, dz, max_bounces, plane_z,
    out_xy, out_bounce, out_plen,
):
    """Trace one specular polyline; record UE-plane crossings.

    Each straight segment is monotone in z, so it holds at most one crossing:
    either a transversal interior crossing or (vertex rule) a hit point lying
    on the plane, attributed to the incoming segment.  Returns the number of
    crossings written to the output buffers (capacity max_bounces + 1).
    """
    n_cross = 0
    plen = 0.0
    for seg in range(max_bounces + 1):
        t, idx = _nearest(
            use_grid, tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris,
            ox, oy, oz, dx, dy, dz,
        )
        if idx < 0:
            break
        hx = ox + t * dx
        hy = oy + t * dy
        hz = oz + t * dz
        s0 = oz - plane_z
        s1 = hz - plane_z
        if -PLANE_VERTEX_EPS <= s1 <= PLANE_VERTEX_EPS:
            out_xy[n_cross, 0] = hx
            out_xy[n_cross, 1] = hy
            out_bounce[n_cross] = seg
            out_plen[n_cross] = plen + t
            n_cross += 1
        elif (s0 > 0.0) != (s1 > 0.0):
            f = s0 / (s0 - s1)
            out_xy[n_cross, 0] = ox + f * (hx - ox)
            out_xy[n_cross, 1] = oy + f * (hy - oy)
            out_bounce[n_cross] = seg
            out_plen[n_cross] = plen + f * t
            n_cross += 1
        plen += t
        if seg == max_bounces:
            break
        # geometric normal from winding, flipped against the incoming ray
        e1x = tris[idx, 1, 0] - tris[idx, 0, 0]
        e1y = tris[idx, 1, 1] - tris[idx, 0, 1]
        e1z = tris[idx, 1, 2] - tris[idx, 0, 2]
        e2x = tris[idx, 2, 0] - tris[idx, 0, 0]
        e2y = tris[idx, 2, 1] - tris[idx, 0, 1]
        e2z = tris[idx, 2, 2] - tris[idx, 0, 2]
        nx = e1y * e2z - e1z * e2y
        ny = e1z * e2x - e1x * e2z
        nz = e1x * e2y - e1y * e2x
        nn = (nx * nx + ny * ny + nz * nz) ** 0.5
        nx /= nn
        ny /= nn
        nz /= nn
        dn = dx * nx + dy * ny + dz * nz
        if dn > 0.0:
            nx = -nx
            ny = -ny
            nz = -nz
            dn = -dn
        if -GRAZE_EPS < dn < GRAZE_EPS:
            break  # degenerate grazing reflection terminates the ray
        dx = dx - 2.0 * dn * nx
        dy = dy - 2.0 * dn * ny
        dz = dz - 2.0 * dn * nz
        dl = (dx * dx + dy * dy + dz * dz) ** 0.5
        dx /= dl
        dy /= dl
        dz /= dl
        ox = hx + EPS_T * dx
        oy = hy + EPS_T * dy
        oz = hz + EPS_T * dz
    return n_cross


@njit(**NB_OPTS)
def trace_batch(
    tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris, use_grid,
    origin, dirs, max_bounces, plane_z,
):
    """Trace a batch of rays from a common origin.

    Returns (xy, bounce, plen, counts); row r holds counts[r] crossings.
    """
    n = dirs.shape[0]
    cap = max_bounces + 1
    xy = np.empty((n, cap, 2))
    bounce = np.empty((n, cap), dtype=np.int64)
    plen = np.empty((n, cap))
    counts = np.empty(n, dtype=np.int64)
    for r in range(n):
        counts[r] = trace_one(
            tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris, use_grid,
            origin[0], origin[1], origin[2],
            dirs[r, 0], dirs[r, 1], dirs[r, 2],
            max_bounces, plane_z,
            xy[r], bounce[r], plen[r],
        )
    return xy, bounce, plen, counts


@njit(**NB_OPTS)
def nearest_crossing_batch(
    tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris, use_grid,
    origin, dirs, max_bounces, plane_z, target,
):
    """Per ray: squared distance to `target` of its nearest crossing, and the
    crossing's path length (inf/inf when the ray never crosses the plane)."""
    n = dirs.shape[0]
    cap = max_bounces + 1
    xy = np.empty((cap, 2))
    bounce = np.empty(cap, dtype=np.int64)
    plen = np.empty(cap)
    dist2 = np.full(n, np.inf)
    path = np.full(n, np.inf)
    for r in range(n):
        m = trace_one(
            tris, gmin, inv_cell, cell_size, dims, cell_start, cell_tris, use_grid,
            origin[0], origin[1], origin[2],
            dirs[r, 0], dirs[r, 1], dirs[r, 2],
            max_bounces, plane_z,
            xy, bounce, plen,
        )
        for c in range(m):
            dx = xy[c, 0] - target[0]
            dy = xy[c, 1] - target[1]
            d2 = dx * dx + dy * dy
            if d2 < dist2[r] - 1e-15 or (
                d2 <= dist2[r] + 1e-15 and plen[c] < path[r]
            ):
                dist2[r] = d2
                path[r] = plen[c]
    return dist2, path


# ---------------------------------------------------------------------------
# Weighted EM for 2D full-covariance Gaussian mixtures

LOG_2PI = 1.8378770664093453


@njit(cache=True, nogil=True, fastmath=True)
def em_fit(X, w, pis, means, covs, max_iter, tol, rel_tol, cov_floor):
    """Weighted EM, in place on (pis, means, covs).

    Stops when the weighted log-likelihood improves by less than
    max(tol, rel_tol * |ll|).  Returns (ll_history, n_iter).
    """
    n = X.shape[0]
    k = pis.shape[0]
    w_tot = 0.0
    for i in range(n):
        w_tot += w[i]

    logdet = np.empty(k)
    ia = np.empty(k)
    ib = np.empty(k)
    ic = np.empty(k)
    logpi = np.empty(k)
    lp = np.empty(k)
    nk = np.empty(k)
    sx = np.empty(k)
    sy = np.empty(k)
    sxx = np.empty(k)
    sxy = np.empty(k)
    syy = np.empty(k)
    ll_hist = np.empty(max_iter)
    prev_ll = -np.inf
    n_iter = 0

    for it in range(max_iter):
        for j in range(k):
            a = covs[j, 0, 0]
            b = covs[j, 0, 1]
            c = covs[j, 1, 1]
            det = a * c - b * b
            logdet[j] = np.log(det)
            ia[j] = c / det
            ib[j] = -b / det
            ic[j] = a / det
            logpi[j] = np.log(pis[j]) if pis[j] > 0.0 else -1e300
            nk[j] = 0.0
            sx[j] = 0.0
            sy[j] = 0.0
            sxx[j] = 0.0
            sxy[j] = 0.0
            syy[j] = 0.0

        ll = 0.0
        for i in range(n):
            x = X[i, 0]
            y = X[i, 1]
            mx = -np.inf
            for j in range(k):
                dx = x - means[j, 0]
                dy = y - means[j, 1]
                q = ia[j] * dx * dx + 2.0 * ib[j] * dx * dy + ic[j] * dy * dy
                # 2D Gaussian: -log(2 pi) - 0.5 (logdet + quadratic form)
                lp[j] = logpi[j] - LOG_2PI - 0.5 * (logdet[j] + q)
                if lp[j] > mx:
                    mx = lp[j]
            tot = 0.0
            for j in range(k):
                lp[j] = np.exp(lp[j] - mx)
                tot += lp[j]
            ll += w[i] * (mx + np.log(tot))
            cw = w[i] / tot
            for j in range(k):
                r = lp[j] * cw
                nk[j] += r
                sx[j] += r * x
                sy[j] += r * y
                sxx[j] += r * x * x
                sxy[j] += r * x * y
                syy[j] += r * y * y

        ll_hist[it] = ll
        n_iter = it + 1

        for j in range(k):
            if nk[j] <= 1e-300:
                # dead component; keep parameters, zero weight
                pis[j] = 0.0
                continue
            pis[j] = nk[j] / w_tot
            mx_ = sx[j] / nk[j]
            my_ = sy[j] / nk[j]
            means[j, 0] = mx_
            means[j, 1] = my_
            a = sxx[j] / nk[j] - mx_ * mx_
            b = sxy[j] / nk[j] - mx_ * my_
            c = syy[j] / nk[j] - my_ * my_
            a, b, c = _floor_cov(a, b, c, cov_floor)
            covs[j, 0, 0] = a
            covs[j, 0, 1] = b
            covs[j, 1, 0] = b
            covs[j, 1, 1] = c

        if ll - prev_ll < max(tol, rel_tol * abs(ll)) and it > 0:
            break
        prev_ll = ll

    return ll_hist[:n_iter], n_iter


@njit(inline="always", cache=True, nogil=True)
def _floor_cov(a, b, c, floor):
    """Clamp the eigenvalues of [[a, b], [b, c]] to be >= floor."""
    tr = a + c
    disc = ((a - c) * (a - c) + 4.0 * b * b) ** 0.5
    l1 = 0.5 * (tr + disc)
    l2 = 0.5 * (tr - disc)
    if l2 >= floor:
        return a, b, c
    if disc < 1e-300:
        return max(a, floor), 0.0, max(c, floor)
    # eigenvector for l1
    if abs(b) > 1e-300:
        vx = l1 - c
        vy = b
    elif a >= c:
        vx = 1.0
        vy = 0.0
    else:
        vx = 0.0
        vy = 1.0
    vn = (vx * vx + vy * vy) ** 0.5
    vx /= vn
    vy /= vn
    l1 = max(l1, floor)
    l2 = floor
    na = l1 * vx * vx + l2 * vy * vy
    nb = (l1 - l2) * vx * vy
    nc = l1 * vy * vy + l2 * vx * vx
    return na, nb, nc
