"""Low-level geometric kernels.

Generalized winding numbers, scanline voxelization, exact point-to-triangle
distances and triangle-triangle intersection tests. The heavy loops are
numba-compiled; parallel loops are only used where every iteration writes
its own output slot, so results are bit-identical to sequential execution.
"""

import numpy as np
from numba import njit, prange

_FOUR_PI = 4.0 * np.pi


# ---------------------------------------------------------------------------
# winding numbers

@njit(cache=True)
def _solid_angle_sum(px, py, pz, tv0, tv1, tv2):
    tot = 0.0
    for t in range(tv0.shape[0]):
        ax = tv0[t, 0] - px
        ay = tv0[t, 1] - py
        az = tv0[t, 2] - pz
        bx = tv1[t, 0] - px
        by = tv1[t, 1] - py
        bz = tv1[t, 2] - pz
        cx = tv2[t, 0] - px
        cy = tv2[t, 1] - py
        cz = tv2[t, 2] - pz
        la = np.sqrt(ax * ax + ay * ay + az * az)
        lb = np.sqrt(bx * bx + by * by + bz * bz)
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        det = (ax * (by * cz - bz * cy)
               - ay * (bx * cz - bz * cx)
               + az * (bx * cy - by * cx))
        denom = (la * lb * lc
                 + (ax * bx + ay * by + az * bz) * lc
                 + (bx * cx + by * cy + bz * cz) * la
                 + (cx * ax + cy * ay + cz * az) * lb)
        tot += 2.0 * np.arctan2(det, denom)
    return tot


@njit(parallel=True, cache=True)
def _winding_many(points, tv0, tv1, tv2, out):
    for i in prange(points.shape[0]):
        out[i] = _solid_angle_sum(points[i, 0], points[i, 1], points[i, 2],
                                  tv0, tv1, tv2) / _FOUR_PI


def winding_numbers(points, vertices, faces):
    """Generalized winding number of each point with respect to the surface."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    out = np.empty(points.shape[0])
    if f.shape[0] == 0:
        out[:] = 0.0
        return out
    tv0 = np.ascontiguousarray(v[f[:, 0]])
    tv1 = np.ascontiguousarray(v[f[:, 1]])
    tv2 = np.ascontiguousarray(v[f[:, 2]])
    _winding_many(points, tv0, tv1, tv2, out)
    return out


# ---------------------------------------------------------------------------
# scanline voxelization (x-rays, parity fill)

@njit(parallel=True, cache=True)
def _scanline_fill(ox, oy, oz, sx, sy, sz, nx, ny, nz,
                   tv0, tv1, tv2, row_ptr, row_tris, jy, jz, out):
    for r in prange(ny * nz):
        j = r // nz
        k = r % nz
        y = oy + j * sy + jy
        z = oz + k * sz + jz
        lo = row_ptr[r]
        hi = row_ptr[r + 1]
        xs = np.empty(hi - lo)
        cnt = 0
        for it in range(lo, hi):
            t = row_tris[it]
            ay = tv0[t, 1]
            az = tv0[t, 2]
            e1y = tv1[t, 1] - ay
            e1z = tv1[t, 2] - az
            e2y = tv2[t, 1] - ay
            e2z = tv2[t, 2] - az
            det = e1y * e2z - e1z * e2y
            if det == 0.0:
                continue
            qy = y - ay
            qz = z - az
            u = (qy * e2z - qz * e2y) / det
            v = (e1y * qz - e1z * qy) / det
            if u < 0.0 or v < 0.0 or u + v > 1.0:
                continue
            xs[cnt] = (tv0[t, 0]
                       + u * (tv1[t, 0] - tv0[t, 0])
                       + v * (tv2[t, 0] - tv0[t, 0]))
            cnt += 1
        hits = np.sort(xs[:cnt])
        parity = np.uint8(0)
        ci = 0
        for i in range(nx):
            xc = ox + i * sx
            while ci < cnt and hits[ci] < xc:
                ci += 1
                parity ^= np.uint8(1)
            out[i, j, k] = parity


def scanline_stencil(origin, spacing, dims, vertices, faces):
    """Binary voxelization of a closed surface by x-ray parity counting.

    Ray rows are jittered by a tiny fixed fraction of the voxel spacing so
    that rays passing exactly through mesh edges or vertices (which would
    make the parity count ambiguous) only occur for adversarial inputs.
    Agrees with the winding-number definition away from that measure-zero
    set; the winding test is the reference semantics.
    """
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    out = np.zeros((nx, ny, nz), dtype=np.uint8)
    if f.shape[0] == 0:
        return out
    tv0 = np.ascontiguousarray(v[f[:, 0]])
    tv1 = np.ascontiguousarray(v[f[:, 1]])
    tv2 = np.ascontiguousarray(v[f[:, 2]])
    jy = 0.37e-6 * spacing[1]
    jz = 0.61e-6 * spacing[2]

    # bin triangles into the (y, z) ray rows their bounding box covers
    ymin = np.minimum(np.minimum(tv0[:, 1], tv1[:, 1]), tv2[:, 1])
    ymax = np.maximum(np.maximum(tv0[:, 1], tv1[:, 1]), tv2[:, 1])
    zmin = np.minimum(np.minimum(tv0[:, 2], tv1[:, 2]), tv2[:, 2])
    zmax = np.maximum(np.maximum(tv0[:, 2], tv1[:, 2]), tv2[:, 2])
    j0 = np.clip(np.ceil((ymin - jy - origin[1]) / spacing[1] - 1e-12), 0, ny).astype(np.int64)
    j1 = np.clip(np.floor((ymax - jy - origin[1]) / spacing[1] + 1e-12), -1, ny - 1).astype(np.int64)
    k0 = np.clip(np.ceil((zmin - jz - origin[2]) / spacing[2] - 1e-12), 0, nz).astype(np.int64)
    k1 = np.clip(np.floor((zmax - jz - origin[2]) / spacing[2] + 1e-12), -1, nz - 1).astype(np.int64)
    nj = np.maximum(j1 - j0 + 1, 0)
    nk = np.maximum(k1 - k0 + 1, 0)
    counts = nj * nk
    keep = counts > 0
    if not keep.any():
        return out
    tri_ids = np.repeat(np.nonzero(keep)[0], counts[keep])
    rows = np.empty(tri_ids.shape[0], dtype=np.int64)
    pos = 0
    for t in np.nonzero(keep)[0]:
        jj = np.arange(j0[t], j1[t] + 1)
        kk = np.arange(k0[t], k1[t] + 1)
        block = (jj[:, None] * nz + kk[None, :]).ravel()
        rows[pos:pos + block.shape[0]] = block
        pos += block.shape[0]
    order = np.argsort(rows, kind="stable")
    rows = rows[order]
    row_tris = tri_ids[order]
    row_ptr = np.zeros(ny * nz + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)
    _scanline_fill(origin[0], origin[1], origin[2],
                   spacing[0], spacing[1], spacing[2], nx, ny, nz,
                   tv0, tv1, tv2, row_ptr, row_tris, jy, jz, out)
    return out


# ---------------------------------------------------------------------------
# exact point-to-triangle distance

@njit(cache=True)
def _pt_tri_d2(px, py, pz, a, b, c):
    # Eberly's region classification on the triangle parameter plane.
    e0x = b[0] - a[0]
    e0y = b[1] - a[1]
    e0z = b[2] - a[2]
    e1x = c[0] - a[0]
    e1y = c[1] - a[1]
    e1z = c[2] - a[2]
    dx = a[0] - px
    dy = a[1] - py
    dz = a[2] - pz
    aa = e0x * e0x + e0y * e0y + e0z * e0z
    bb = e0x * e1x + e0y * e1y + e0z * e1z
    cc = e1x * e1x + e1y * e1y + e1z * e1z
    dd = e0x * dx + e0y * dy + e0z * dz
    ee = e1x * dx + e1y * dy + e1z * dz
    det = aa * cc - bb * bb
    s = bb * ee - cc * dd
    t = bb * dd - aa * ee
    if s + t <= det:
        if s < 0.0:
            if t < 0.0:
                if dd < 0.0:
                    t = 0.0
                    s = min(max(-dd / aa, 0.0), 1.0) if aa > 0.0 else 0.0
                else:
                    s = 0.0
                    t = min(max(-ee / cc, 0.0), 1.0) if cc > 0.0 else 0.0
            else:
                s = 0.0
                t = min(max(-ee / cc, 0.0), 1.0) if cc > 0.0 else 0.0
        elif t < 0.0:
            t = 0.0
            s = min(max(-dd / aa, 0.0), 1.0) if aa > 0.0 else 0.0
        else:
            if det > 0.0:
                inv = 1.0 / det
                s *= inv
                t *= inv
            else:
                s = 0.0
                t = 0.0
    else:
        if s < 0.0:
            tmp0 = bb + dd
            tmp1 = cc + ee
            if tmp1 > tmp0:
                numer = tmp1 - tmp0
                denom = aa - 2.0 * bb + cc
                s = min(max(numer / denom, 0.0), 1.0) if denom > 0.0 else 0.0
                t = 1.0 - s
            else:
                s = 0.0
                t = min(max(-ee / cc, 0.0), 1.0) if cc > 0.0 else 0.0
        elif t < 0.0:
            tmp0 = bb + ee
            tmp1 = aa + dd
            if tmp1 > tmp0:
                numer = tmp1 - tmp0
                denom = aa - 2.0 * bb + cc
                t = min(max(numer / denom, 0.0), 1.0) if denom > 0.0 else 0.0
                s = 1.0 - t
            else:
                t = 0.0
                s = min(max(-dd / aa, 0.0), 1.0) if aa > 0.0 else 0.0
        else:
            numer = cc + ee - bb - dd
            denom = aa - 2.0 * bb + cc
            s = min(max(numer / denom, 0.0), 1.0) if denom > 0.0 else 0.0
            t = 1.0 - s
    qx = a[0] + s * e0x + t * e1x - px
    qy = a[1] + s * e0y + t * e1y - py
    qz = a[2] + s * e0z + t * e1z - pz
    return qx * qx + qy * qy + qz * qz


@njit(parallel=True, cache=True)
def _pt_surf_dist(points, tv0, tv1, tv2, tlo, thi, out):
    for i in prange(points.shape[0]):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        best = np.inf
        for t in range(tv0.shape[0]):
            # cheap lower bound from the triangle's bounding box
            lb = 0.0
            for k in range(3):
                pk = points[i, k]
                if pk < tlo[t, k]:
                    d = tlo[t, k] - pk
                    lb += d * d
                elif pk > thi[t, k]:
                    d = pk - thi[t, k]
                    lb += d * d
            if lb >= best:
                continue
            d2 = _pt_tri_d2(px, py, pz, tv0[t], tv1[t], tv2[t])
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)


def point_surface_distances(points, vertices, faces):
    """Exact distance from each point to the closest point of the surface."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if f.shape[0] == 0:
        raise ValueError("surface has no faces")
    tv0 = np.ascontiguousarray(v[f[:, 0]])
    tv1 = np.ascontiguousarray(v[f[:, 1]])
    tv2 = np.ascontiguousarray(v[f[:, 2]])
    tlo = np.minimum(np.minimum(tv0, tv1), tv2)
    thi = np.maximum(np.maximum(tv0, tv1), tv2)
    out = np.empty(points.shape[0])
    _pt_surf_dist(points, tv0, tv1, tv2, tlo, thi, out)
    return out


# ---------------------------------------------------------------------------
# triangle-triangle intersection (Moller 1997, interval test)

@njit(cache=True)
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True)
def _tri_interval(d0, d1, d2, p0, p1, p2):
    # projections p*, signed distances d*: interval of the intersection line
    if d0 * d1 > 0.0:
        # d2 on the other side
        t1 = p2 + (p0 - p2) * d2 / (d2 - d0)
        t2 = p2 + (p1 - p2) * d2 / (d2 - d1)
    elif d0 * d2 > 0.0:
        t1 = p1 + (p0 - p1) * d1 / (d1 - d0)
        t2 = p1 + (p2 - p1) * d1 / (d1 - d2)
    else:
        t1 = p0 + (p1 - p0) * d0 / (d0 - d1) if d0 != d1 else p0
        t2 = p0 + (p2 - p0) * d0 / (d0 - d2) if d0 != d2 else p0
    if t1 > t2:
        t1, t2 = t2, t1
    return t1, t2


@njit(cache=True)
def _coplanar_overlap(p1, q1, r1, n):
    # project on the dominant axis plane and run 2D triangle overlap
    ax = abs(n[0])
    ay = abs(n[1])
    az = abs(n[2])
    if ax >= ay and ax >= az:
        i0, i1 = 1, 2
    elif ay >= az:
        i0, i1 = 0, 2
    else:
        i0, i1 = 0, 1
    return i0, i1


@njit(cache=True)
def _edge_edge_2d(ax, ay, bx, by, cx, cy, dx, dy):
    d1 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    d2 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
    d3 = (dx - cx) * (ay - cy) - (dy - cy) * (ax - cx)
    d4 = (dx - cx) * (by - cy) - (dy - cy) * (bx - cx)
    return d1 * d2 < 0.0 and d3 * d4 < 0.0


@njit(cache=True)
def _pt_in_tri_2d(px, py, ax, ay, bx, by, cx, cy):
    s1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    s2 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    s3 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    return (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)


@njit(cache=True)
def _tri_tri_intersect(a0, a1, a2, b0, b1, b2):
    # plane of B
    e1 = (b1[0] - b0[0], b1[1] - b0[1], b1[2] - b0[2])
    e2 = (b2[0] - b0[0], b2[1] - b0[1], b2[2] - b0[2])
    n2 = _cross(e1[0], e1[1], e1[2], e2[0], e2[1], e2[2])
    d2c = -(n2[0] * b0[0] + n2[1] * b0[1] + n2[2] * b0[2])
    da0 = n2[0] * a0[0] + n2[1] * a0[1] + n2[2] * a0[2] + d2c
    da1 = n2[0] * a1[0] + n2[1] * a1[1] + n2[2] * a1[2] + d2c
    da2 = n2[0] * a2[0] + n2[1] * a2[1] + n2[2] * a2[2] + d2c
    if (da0 > 0 and da1 > 0 and da2 > 0) or (da0 < 0 and da1 < 0 and da2 < 0):
        return False
    # plane of A
    f1 = (a1[0] - a0[0], a1[1] - a0[1], a1[2] - a0[2])
    f2 = (a2[0] - a0[0], a2[1] - a0[1], a2[2] - a0[2])
    n1 = _cross(f1[0], f1[1], f1[2], f2[0], f2[1], f2[2])
    d1c = -(n1[0] * a0[0] + n1[1] * a0[1] + n1[2] * a0[2])
    db0 = n1[0] * b0[0] + n1[1] * b0[1] + n1[2] * b0[2] + d1c
    db1 = n1[0] * b1[0] + n1[1] * b1[1] + n1[2] * b1[2] + d1c
    db2 = n1[0] * b2[0] + n1[1] * b2[1] + n1[2] * b2[2] + d1c
    if (db0 > 0 and db1 > 0 and db2 > 0) or (db0 < 0 and db1 < 0 and db2 < 0):
        return False
    if da0 == 0.0 and da1 == 0.0 and da2 == 0.0:
        # coplanar: 2D overlap test on the dominant plane
        i0, i1 = _coplanar_overlap(a0, a1, a2, n1)
        pts_a = ((a0[i0], a0[i1]), (a1[i0], a1[i1]), (a2[i0], a2[i1]))
        pts_b = ((b0[i0], b0[i1]), (b1[i0], b1[i1]), (b2[i0], b2[i1]))
        for i in range(3):
            for j in range(3):
                if _edge_edge_2d(pts_a[i][0], pts_a[i][1],
                                 pts_a[(i + 1) % 3][0], pts_a[(i + 1) % 3][1],
                                 pts_b[j][0], pts_b[j][1],
                                 pts_b[(j + 1) % 3][0], pts_b[(j + 1) % 3][1]):
                    return True
        if _pt_in_tri_2d(pts_a[0][0], pts_a[0][1], pts_b[0][0], pts_b[0][1],
                         pts_b[1][0], pts_b[1][1], pts_b[2][0], pts_b[2][1]):
            return True
        if _pt_in_tri_2d(pts_b[0][0], pts_b[0][1], pts_a[0][0], pts_a[0][1],
                         pts_a[1][0], pts_a[1][1], pts_a[2][0], pts_a[2][1]):
            return True
        return False
    # intersection line direction
    d = _cross(n1[0], n1[1], n1[2], n2[0], n2[1], n2[2])
    ax = abs(d[0])
    ay = abs(d[1])
    az = abs(d[2])
    if ax >= ay and ax >= az:
        k = 0
    elif ay >= az:
        k = 1
    else:
        k = 2
    t1, t2 = _tri_interval(da0, da1, da2, a0[k], a1[k], a2[k])
    s1, s2 = _tri_interval(db0, db1, db2, b0[k], b1[k], b2[k])
    return max(t1, s1) < min(t2, s2)


@njit(cache=True)
def _check_pairs(pa, pb, av0, av1, av2, bv0, bv1, bv2):
    for i in range(pa.shape[0]):
        t = pa[i]
        u = pb[i]
        if _tri_tri_intersect(av0[t], av1[t], av2[t], bv0[u], bv1[u], bv2[u]):
            return i
    return -1


def first_intersecting_pair(verts_a, faces_a, verts_b, faces_b, pairs):
    """Test the given (face_a, face_b) candidate pairs, return the first hit."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return None
    va = np.asarray(verts_a, dtype=np.float64)
    fa = np.asarray(faces_a, dtype=np.int64)
    vb = np.asarray(verts_b, dtype=np.float64)
    fb = np.asarray(faces_b, dtype=np.int64)
    i = _check_pairs(np.ascontiguousarray(pairs[:, 0]),
                     np.ascontiguousarray(pairs[:, 1]),
                     np.ascontiguousarray(va[fa[:, 0]]),
                     np.ascontiguousarray(va[fa[:, 1]]),
                     np.ascontiguousarray(va[fa[:, 2]]),
                     np.ascontiguousarray(vb[fb[:, 0]]),
                     np.ascontiguousarray(vb[fb[:, 1]]),
                     np.ascontiguousarray(vb[fb[:, 2]]))
    if i < 0:
        return None
    return int(pairs[i, 0]), int(pairs[i, 1])


# ---------------------------------------------------------------------------
# misc surface helpers

def triangle_areas(vertices, faces):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(n, axis=1)


def closed_volume(vertices, faces):
    """Signed enclosed volume (positive for outward-oriented surfaces)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a = v[f[:, 0]]
    b = v[f[:, 1]]
    c = v[f[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals, unit length."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, f[:, k], fn)
    norm = np.linalg.norm(out, axis=1)
    bad = norm < 1e-300
    norm[bad] = 1.0
    out /= norm[:, None]
    out[bad] = (1.0, 0.0, 0.0)
    return out


def symmetric_mean_distance(a, b):
    """Average of the two directional mean nearest-neighbor distances."""
    from scipy.spatial import cKDTree
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point cloud")
    da = cKDTree(b).query(a)[0]
    db = cKDTree(a).query(b)[0]
    return 0.5 * (float(da.mean()) + float(db.mean()))


def sample_surface(vertices, faces, n, seed):
    """n points sampled uniformly by area; deterministic for a fixed seed."""
    if n == 0:
        return np.zeros((0, 3))
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    areas = triangle_areas(v, f)
    tot = areas.sum()
    if tot <= 0:
        raise ValueError("surface has zero area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(f.shape[0], size=n, p=areas / tot)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = v[f[idx, 0]]
    b = v[f[idx, 1]]
    c = v[f[idx, 2]]
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
