"""Constrained simplification of the free calcification surface.

Faces whose three nodes coincide with heart-mesh nodes are contact faces;
they and the contact/free border ring must survive untouched so the
stitched mesh stays conforming. Everything else is simplified by
centroidal vertex clustering: vertices greedily trade cluster membership
to maximize the weighted cluster-energy sum (equivalently, to minimize
within-cluster variance), then each cluster contributes one output vertex
and each input face with three distinct clusters one output triangle.

Border vertices are locked singleton clusters, so their exact positions
propagate to every iterate, and the contact sub-surface is reattached
verbatim afterward.
"""

import numpy as np
from numba import njit

from . import geometry
from .meshes import TriSurface, is_watertight_manifold, surface_edges
from .metrics import heart_surface


def separate_contact(s, heart, tol=1e-9):
    """Split into (contact, free) by the all-three-nodes-coincident rule.

    Both halves carry vertex_tags["source_vertex"] with indices into the
    input surface; border vertices appear in both halves.
    """
    from scipy.spatial import cKDTree
    hs = heart_surface(heart)
    if s.n_vertices == 0:
        empty = TriSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        empty.vertex_tags["source_vertex"] = np.zeros(0, dtype=np.int64)
        return empty.copy(), empty.copy()
    d = cKDTree(hs.vertices).query(s.vertices)[0]
    coincident = d <= tol
    face_contact = coincident[s.faces].all(axis=1)

    def _sub(face_mask):
        faces = s.faces[face_mask]
        used = np.unique(faces) if faces.size else np.zeros(0, dtype=np.int64)
        remap = np.full(s.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        sub = TriSurface(s.vertices[used],
                         remap[faces] if faces.size else faces)
        sub.vertex_tags["source_vertex"] = used
        return sub

    return _sub(face_contact), _sub(~face_contact)


@njit(cache=True)
def _farthest_order(pts, start, k):
    n = pts.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = start
    for i in range(k):
        chosen[i] = cur
        for v in range(n):
            dx = pts[v, 0] - pts[cur, 0]
            dy = pts[v, 1] - pts[cur, 1]
            dz = pts[v, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < dist[v]:
                dist[v] = d
        best = 0
        bd = -1.0
        for v in range(n):
            if dist[v] > bd:
                bd = dist[v]
                best = v
        cur = best
    return chosen


@njit(cache=True)
def _multi_bfs(indptr, indices, cluster, locked):
    """Grow non-locked seed clusters over unassigned vertices; locked
    singleton clusters never claim neighbors."""
    n = cluster.size
    q = np.empty(n, dtype=np.int64)
    tail = 0
    for v in range(n):
        if cluster[v] >= 0 and not locked[cluster[v]]:
            q[tail] = v
            tail += 1
    head = 0
    while head < tail:
        v = q[head]
        head += 1
        cv = cluster[v]
        for e in range(indptr[v], indptr[v + 1]):
            u = indices[e]
            if cluster[u] == -1:
                cluster[u] = cv
                q[tail] = u
                tail += 1


@njit(cache=True)
def _has_edge(indptr, indices, a, b):
    for e in range(indptr[a], indptr[a + 1]):
        if indices[e] == b:
            return True
    return False


@njit(cache=True)
def _ring_connected(indptr, indices, cluster, v, target):
    """True when v's neighbors in cluster `target` form one connected arc
    of the one-ring (the local test that keeps clusters disk-like)."""
    deg = indptr[v + 1] - indptr[v]
    mem = np.empty(deg, dtype=np.int64)
    k = 0
    for e in range(indptr[v], indptr[v + 1]):
        if cluster[indices[e]] == target:
            mem[k] = indices[e]
            k += 1
    if k == 0:
        return False
    if k == 1:
        return True
    seen = np.zeros(k, dtype=np.uint8)
    stack = np.empty(k, dtype=np.int64)
    stack[0] = 0
    seen[0] = 1
    top = 1
    reached = 1
    while top > 0:
        top -= 1
        i = stack[top]
        for j in range(k):
            if seen[j] == 0 and _has_edge(indptr, indices, mem[i], mem[j]):
                seen[j] = 1
                stack[top] = j
                top += 1
                reached += 1
    return reached == k


@njit(cache=True)
def _swap_pass(indptr, indices, cluster, locked, w, pts, S, W, count):
    moves = 0
    n = cluster.size
    for v in range(n):
        cv = cluster[v]
        if locked[cv] or count[cv] <= 1:
            continue
        # leaving cv must not split it (unless v is already cut off)
        has_cv_nbr = False
        for e in range(indptr[v], indptr[v + 1]):
            if cluster[indices[e]] == cv:
                has_cv_nbr = True
                break
        if has_cv_nbr and not _ring_connected(indptr, indices, cluster,
                                              v, cv):
            continue
        wv = w[v]
        qx = pts[v, 0] * wv
        qy = pts[v, 1] * wv
        qz = pts[v, 2] * wv
        ea = (S[cv, 0] ** 2 + S[cv, 1] ** 2 + S[cv, 2] ** 2) / W[cv]
        wa2 = W[cv] - wv
        ea2 = (((S[cv, 0] - qx) ** 2 + (S[cv, 1] - qy) ** 2
                + (S[cv, 2] - qz) ** 2) / wa2)
        best_gain = 0.0
        best_c = -1
        for e in range(indptr[v], indptr[v + 1]):
            u = indices[e]
            cu = cluster[u]
            if cu == cv or locked[cu] or cu == best_c:
                continue
            eb = (S[cu, 0] ** 2 + S[cu, 1] ** 2 + S[cu, 2] ** 2) / W[cu]
            eb2 = (((S[cu, 0] + qx) ** 2 + (S[cu, 1] + qy) ** 2
                    + (S[cu, 2] + qz) ** 2) / (W[cu] + wv))
            gain = (ea2 + eb2) - (ea + eb)
            better = gain > best_gain or (gain == best_gain and best_c >= 0
                                          and cu < best_c)
            if better and _ring_connected(indptr, indices, cluster, v, cu):
                best_gain = gain
                best_c = cu
        if best_c >= 0 and best_gain > 0.0:
            S[cv, 0] -= qx
            S[cv, 1] -= qy
            S[cv, 2] -= qz
            W[cv] -= wv
            count[cv] -= 1
            S[best_c, 0] += qx
            S[best_c, 1] += qy
            S[best_c, 2] += qz
            W[best_c] += wv
            count[best_c] += 1
            cluster[v] = best_c
            moves += 1
    return moves


def _cluster_faces(cluster, faces, k_total):
    """Faces in cluster-id space, degenerate rows dropped, duplicates
    cancelled by orientation. Returns None when nothing survives.

    Signed cancellation per unordered triple: a pair with opposite
    orientations is a collapsed fin and must vanish entirely, otherwise
    the survivor punches a spurious boundary or fin edge into the result.
    """
    fc = cluster[faces]
    distinct = ((fc[:, 0] != fc[:, 1]) & (fc[:, 1] != fc[:, 2])
                & (fc[:, 0] != fc[:, 2]))
    fc = fc[distinct]
    if fc.shape[0] == 0:
        return None
    tri = np.sort(fc, axis=1)
    key = (tri[:, 0] * k_total + tri[:, 1]) * k_total + tri[:, 2]
    a, b, c = fc[:, 0], fc[:, 1], fc[:, 2]
    even = ((a < b) & (b < c)) | ((b < c) & (c < a)) | ((c < a) & (a < b))
    sign = np.where(even, 1, -1).astype(np.int64)
    uniq, inv = np.unique(key, return_inverse=True)
    net = np.zeros(uniq.size, dtype=np.int64)
    np.add.at(net, inv, sign)
    match = np.sign(net)[inv] == sign
    rows = np.nonzero(match)[0]
    first = np.full(uniq.size, fc.shape[0], dtype=np.int64)
    np.minimum.at(first, inv[rows], rows)
    first = first[first < fc.shape[0]]
    if first.size == 0:
        return None
    return fc[np.sort(first)]


def _arc_components(members, indptr, indices):
    """Connected components of the member set under surface adjacency."""
    mset = set(int(v) for v in members)
    comps = []
    seen = set()
    for v in members:
        v = int(v)
        if v in seen:
            continue
        comp = [v]
        seen.add(v)
        stack = [v]
        while stack:
            x = stack.pop()
            for e in range(indptr[x], indptr[x + 1]):
                u = int(indices[e])
                if u in mset and u not in seen:
                    seen.add(u)
                    comp.append(u)
                    stack.append(u)
        comps.append(np.array(comp, dtype=np.int64))
    return comps


def _facing_arcs(cluster, indptr, indices, ca, cb):
    """Arcs of cluster ca's vertices that touch cluster cb."""
    members = np.nonzero(cluster == ca)[0]
    facing = [v for v in members
              if (cluster[indices[indptr[v]:indptr[v + 1]]] == cb).any()]
    return members, _arc_components(np.asarray(facing, dtype=np.int64),
                                    indptr, indices)


def _split_double_arcs(cluster, indptr, indices, locked, fc):
    """Break cluster pairs whose shared boundary folds the output.

    An output edge used by more than two faces means its two clusters
    touch either along two separate stretches of the input surface, or at
    a vertex whose ring meets the opposite cluster twice. The smaller
    stretch (or one stretch end) on an unlocked side is carved into a
    fresh cluster. Returns the extended locked array, or None when
    nothing was split.
    """
    e = np.sort(np.concatenate([fc[:, [0, 1]], fc[:, [1, 2]],
                                fc[:, [2, 0]]]), axis=1)
    eu, cnt = np.unique(e, axis=0, return_counts=True)
    bad = eu[cnt > 2]
    if bad.size == 0:
        return None
    grown = [locked]
    k = locked.size
    changed = False
    for cu, cv in bad:
        cu, cv = int(cu), int(cv)
        if locked[cu]:
            cu, cv = cv, cu
        if locked[cu]:
            continue
        sides = [(cu, cv)] if locked[cv] else [(cu, cv), (cv, cu)]
        carve = None
        for ca, cb in sides:
            members, arcs = _facing_arcs(cluster, indptr, indices, ca, cb)
            if len(arcs) >= 2 and members.size > min(len(a) for a in arcs):
                arcs.sort(key=len)
                carve = arcs[0]
                break
        if carve is None:
            # single shared arc folded at a pinch vertex: carve one end
            for ca, cb in sides:
                members, arcs = _facing_arcs(cluster, indptr, indices,
                                             ca, cb)
                if arcs and members.size > 1:
                    carve = arcs[0][:1]
                    break
        if carve is None:
            continue
        cluster[carve] = k
        k += 1
        grown.append(np.zeros(1, dtype=np.bool_))
        changed = True
    if not changed:
        return None
    return np.concatenate(grown)


def _vertex_adjacency(n, faces):
    e = surface_edges(faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    order = np.argsort(rows, kind="stable")
    rows = rows[order]
    cols = cols[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, cols


def constrained_clustering(free, ratio, border_mask, n_iters=8, seed=0):
    """One clustering pass over the free surface.

    border_mask marks locked vertices (singleton clusters, positions kept
    bit-exact). Returns (surface, status) where status is "ok", "identity"
    (nothing to simplify) or "warning: ..." when the result would not be
    triangulable and the input is returned unchanged.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    n = free.n_vertices
    if n == 0 or free.n_faces == 0:
        return free.copy(), "identity"
    border_mask = np.asarray(border_mask, dtype=bool)
    nonborder = np.nonzero(~border_mask)[0]
    nb = int(border_mask.sum())
    k_free = int(np.ceil(ratio * (n - nb)))
    if nonborder.size == 0 or k_free >= nonborder.size:
        return free.copy(), "identity"

    pts = free.vertices
    rng = np.random.default_rng(seed)
    start = int(rng.integers(nonborder.size))
    seeds = nonborder[_farthest_order(pts[nonborder], start, k_free)]

    cluster = np.full(n, -1, dtype=np.int64)
    cluster[seeds] = np.arange(k_free)
    cluster[border_mask] = k_free + np.arange(nb)
    k_total = k_free + nb
    locked = np.zeros(k_total, dtype=np.bool_)
    locked[k_free:] = True

    indptr, indices = _vertex_adjacency(n, free.faces)
    _multi_bfs(indptr, indices, cluster, locked)
    if (cluster == -1).any():
        # free patches cut off from every seed: nearest seed by position
        from scipy.spatial import cKDTree
        lost = np.nonzero(cluster == -1)[0]
        near = cKDTree(pts[seeds]).query(pts[lost])[1]
        cluster[lost] = near

    areas = geometry.triangle_areas(pts, free.faces)
    w = np.zeros(n)
    for k in range(3):
        np.add.at(w, free.faces[:, k], areas / 3.0)
    w = np.maximum(w, 1e-300)
    S = np.zeros((k_total, 3))
    W = np.zeros(k_total)
    count = np.zeros(k_total, dtype=np.int64)
    np.add.at(S, cluster, pts * w[:, None])
    np.add.at(W, cluster, w)
    np.add.at(count, cluster, 1)
    for _ in range(n_iters):
        if _swap_pass(indptr, indices, cluster, locked, w, pts, S, W,
                      count) == 0:
            break

    fc = _cluster_faces(cluster, free.faces, k_total)
    if fc is None:
        return free.copy(), "warning: clustering left no triangles"
    for _ in range(4):
        grown = _split_double_arcs(cluster, indptr, indices, locked, fc)
        if grown is None:
            break
        locked = grown
        k_total = int(locked.size)
        fc = _cluster_faces(cluster, free.faces, k_total)
        if fc is None:
            return free.copy(), "warning: clustering left no triangles"

    S = np.zeros((k_total, 3))
    W = np.zeros(k_total)
    np.add.at(S, cluster, pts * w[:, None])
    np.add.at(W, cluster, w)
    rep = S / np.maximum(W, 1e-300)[:, None]
    rep[k_free:k_free + nb] = pts[border_mask]   # locked keep positions

    src = np.full(k_total, -1, dtype=np.int64)
    srcs = free.vertex_tags.get("source_vertex")
    if srcs is not None:
        src[k_free:k_free + nb] = srcs[border_mask]
    used = np.unique(fc)
    remap = np.full(k_total, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    out = TriSurface(rep[used], remap[fc])
    out.vertex_tags["source_vertex"] = src[used]
    return out, "ok"


def merge(contact, free2):
    """Reattach by exact border correspondence (shared source ids)."""
    csrc = contact.vertex_tags["source_vertex"]
    fsrc = free2.vertex_tags["source_vertex"]
    order = np.argsort(csrc)
    sorted_src = csrc[order]
    pos = np.searchsorted(sorted_src, fsrc)
    pos = np.clip(pos, 0, max(len(csrc) - 1, 0))
    if len(csrc):
        matched = (fsrc >= 0) & (sorted_src[pos] == fsrc)
    else:
        matched = np.zeros(len(fsrc), dtype=bool)
    fmap = np.full(free2.n_vertices, -1, dtype=np.int64)
    fmap[matched] = order[pos[matched]]
    fresh = np.nonzero(~matched)[0]
    fmap[fresh] = contact.n_vertices + np.arange(fresh.size)
    verts = np.vstack([contact.vertices, free2.vertices[fresh]])
    faces = np.vstack([contact.faces, fmap[free2.faces]]) \
        if free2.n_faces else contact.faces.copy()
    out = TriSurface(verts, faces)
    out.vertex_tags["source_vertex"] = np.concatenate(
        [csrc, fsrc[fresh]])
    out.face_tags["contact"] = np.concatenate(
        [np.ones(contact.n_faces, dtype=np.int64),
         np.zeros(free2.n_faces, dtype=np.int64)])
    return out


def constrained_remesh(s, heart, n_remesh=15, ratio=0.8, cluster_iters=8,
                       seed=0, contact_tol=1e-9):
    """Iterated clustering; returns (iterates, info).

    iterates[0] is the input surface; each subsequent entry passed the
    manifold check. Non-manifold candidates are excluded and the next
    attempt reruns from the last good free surface with a shifted seed.
    """
    contact, free = separate_contact(s, heart, contact_tol)
    border_sources = np.intersect1d(contact.vertex_tags["source_vertex"],
                                    free.vertex_tags["source_vertex"])
    iterates = [s]
    info = {"excluded": [], "statuses": []}
    cur_free = free
    for i in range(1, n_remesh + 1):
        bmask = np.isin(cur_free.vertex_tags["source_vertex"],
                        border_sources)
        sub_seed = int(np.random.default_rng([seed, i]).integers(2 ** 31))
        new_free, status = constrained_clustering(cur_free, ratio, bmask,
                                                  cluster_iters, sub_seed)
        info["statuses"].append(status)
        if status.startswith("warning"):
            info["excluded"].append(i)
            continue
        if status == "identity" or (
                new_free.n_vertices == cur_free.n_vertices
                and new_free.n_faces == cur_free.n_faces):
            break
        candidate = merge(contact, new_free)
        if not is_watertight_manifold(candidate).ok:
            info["excluded"].append(i)
            continue
        iterates.append(candidate)
        cur_free = new_free
    return iterates, info
