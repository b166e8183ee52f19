"""Triangle and tetrahedral mesh containers and topology utilities."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .isosurf import marching_tets, cube_lattice, lattice_points

# element component codes
AORTA = 1
LEAFLET1 = 2
LEAFLET2 = 3
LEAFLET3 = 4
LV = 5
CALCIFICATION = 6
BACKGROUND = 7

COMPONENT_NAMES = {
    AORTA: "aorta",
    LEAFLET1: "leaflet1",
    LEAFLET2: "leaflet2",
    LEAFLET3: "leaflet3",
    LV: "lv",
    CALCIFICATION: "calcification",
    BACKGROUND: "background",
}
COMPONENT_CODES = {v: k for k, v in COMPONENT_NAMES.items()}
LEAFLETS = (LEAFLET1, LEAFLET2, LEAFLET3)


@dataclass
class TriSurface:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_tags: dict = field(default_factory=dict)
    face_tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def copy(self):
        return TriSurface(self.vertices.copy(), self.faces.copy(),
                          {k: v.copy() for k, v in self.vertex_tags.items()},
                          {k: v.copy() for k, v in self.face_tags.items()})


@dataclass
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    element_component: np.ndarray = None
    node_flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.element_component is None:
            self.element_component = np.full(len(self.tets), BACKGROUND,
                                             dtype=np.int64)
        else:
            self.element_component = np.asarray(self.element_component,
                                                dtype=np.int64).reshape(-1)
        if len(self.element_component) != len(self.tets):
            raise ValueError("one component label per tet required")
        if self.tets.size and (self.tets.min() < 0
                               or self.tets.max() >= len(self.vertices)):
            raise ValueError("tet index out of range")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    def copy(self):
        return TetMesh(self.vertices.copy(), self.tets.copy(),
                       self.element_component.copy(),
                       {k: v.copy() for k, v in self.node_flags.items()})


def signed_tet_volumes(vertices, tets):
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(tets, dtype=np.int64)
    a = v[t[:, 0]]
    return np.einsum("ij,ij->i", v[t[:, 1]] - a,
                     np.cross(v[t[:, 2]] - a, v[t[:, 3]] - a)) / 6.0


def orient_tets_positive(vertices, tets):
    """Swap two nodes of every negatively oriented tet."""
    t = np.array(tets, dtype=np.int64, copy=True)
    vol = signed_tet_volumes(vertices, t)
    neg = vol < 0
    t[neg, 2], t[neg, 3] = t[neg, 3], t[neg, 2].copy()
    return t


# faces of a positively oriented tet (a, b, c, d), outward-oriented
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))


def tet_faces_outward(tets):
    t = np.asarray(tets, dtype=np.int64)
    out = np.empty((t.shape[0] * 4, 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(_TET_FACES):
        out[i::4, 0] = t[:, a]
        out[i::4, 1] = t[:, b]
        out[i::4, 2] = t[:, c]
    return out


def _face_keys(faces, n):
    s = np.sort(faces, axis=1)
    return (s[:, 0] * np.int64(n) + s[:, 1]) * np.int64(n) + s[:, 2]


def boundary_faces(tets, n_vertices):
    """Faces belonging to exactly one tet, in outward orientation."""
    allf = tet_faces_outward(tets)
    keys = _face_keys(allf, n_vertices)
    uniq, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
    return allf[cnt[inv] == 1]


def extract_component_surface(mesh, components):
    """Boundary surface of the selected components; vertex map back to mesh.

    Returns a TriSurface with a "mesh_vertex" vertex tag giving, for every
    surface vertex, the index of the tet-mesh vertex it copies.
    """
    components = set(int(c) for c in components)
    if not components:
        raise ValueError("empty component selection")
    sel = np.isin(mesh.element_component, list(components))
    if not sel.any():
        raise ValueError("no elements with components %r" % sorted(components))
    faces = boundary_faces(mesh.tets[sel], mesh.n_vertices)
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.shape[0])
    surf = TriSurface(mesh.vertices[used], remap[faces])
    surf.vertex_tags["mesh_vertex"] = used
    return surf


@dataclass
class WatertightReport:
    ok: bool
    boundary_edges: int
    nonmanifold_edges: int
    duplicate_vertices: int
    degenerate_faces: int = 0


def is_watertight_manifold(surface, dup_tol=1e-9):
    """Closed-2-manifold check: every edge in exactly 2 consistently
    oriented faces, no degenerate faces, no near-duplicate vertices."""
    v = surface.vertices
    f = surface.faces
    n = len(v)
    degen = int(((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                 | (f[:, 0] == f[:, 2])).sum()) if f.size else 0
    if f.size == 0:
        return WatertightReport(False, 0, 0, 0, 0)
    d_edges = np.concatenate([f[:, (0, 1)], f[:, (1, 2)], f[:, (2, 0)]], axis=0)
    und = np.sort(d_edges, axis=1)
    und_keys = und[:, 0] * np.int64(n) + und[:, 1]
    ukeys, inv, cnt = np.unique(und_keys, return_inverse=True,
                                return_counts=True)
    n_boundary = int((cnt == 1).sum())
    n_nonmanifold = int((cnt > 2).sum())
    # an undirected edge traversed twice in the same direction means two
    # faces disagree on orientation; count it as non-manifold as well
    dir_keys = d_edges[:, 0] * np.int64(n) + d_edges[:, 1]
    dkeys, dcnt = np.unique(dir_keys, return_counts=True)
    if (dcnt > 1).any():
        bad_dir = dkeys[dcnt > 1]
        bad_und = np.unique(np.minimum(bad_dir // n, bad_dir % n)
                            * np.int64(n)
                            + np.maximum(bad_dir // n, bad_dir % n))
        two = set(ukeys[cnt == 2].tolist())
        n_nonmanifold += sum(1 for k in bad_und.tolist() if k in two)
    if n > 1 and dup_tol > 0:
        n_dup = len(cKDTree(v).query_pairs(dup_tol))
    else:
        n_dup = 0
    ok = (n_boundary == 0 and n_nonmanifold == 0 and n_dup == 0
          and degen == 0)
    return WatertightReport(ok, n_boundary, n_nonmanifold, n_dup, degen)


def point_inside(surface, points):
    """Generalized winding number > 0.5 test; scalar in, scalar out."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w = geometry.winding_numbers(p, surface.vertices, surface.faces)
    inside = w > 0.5
    if np.asarray(points).ndim == 1:
        return bool(inside[0])
    return inside


def surface_edges(faces):
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, (0, 1)], f[:, (1, 2)], f[:, (2, 0)]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def compact_surface(vertices, faces):
    """Drop unreferenced vertices; returns (verts, faces, old_of_new)."""
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(used.shape[0])
    return vertices[used], remap[np.asarray(faces)], used


def merge_close_vertices(vertices, faces, tol, prefer=None):
    """Union-find merge of vertices closer than tol.

    Each proximity-connected group collapses onto its lowest-index member
    and keeps that member's exact position; when `prefer` marks some
    vertices (e.g. ones pinned to host-mesh nodes), the lowest-index
    preferred member of a group supplies the position instead. Returns
    (verts, faces, vmap) where vmap sends old vertex ids to new ones.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    n = len(v)
    parent = np.arange(n, dtype=np.int64)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    if n > 1:
        for i, j in sorted(cKDTree(v).query_pairs(tol)):
            ri, rj = find(i), find(j)
            if ri != rj:
                if ri < rj:
                    parent[rj] = ri
                else:
                    parent[ri] = rj
    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    keep = np.unique(roots)
    kept_pos = v[keep]
    if prefer is not None and n:
        pref_idx = np.nonzero(np.asarray(prefer, dtype=bool))[0]
        best = np.full(n, n, dtype=np.int64)
        np.minimum.at(best, roots[pref_idx], pref_idx)
        chosen = best[keep]
        has_pref = chosen < n
        kept_pos = kept_pos.copy()
        kept_pos[has_pref] = v[chosen[has_pref]]
    new_id = np.full(n, -1, dtype=np.int64)
    new_id[keep] = np.arange(keep.shape[0])
    vmap = new_id[roots]
    new_faces = vmap[f]
    verts2, faces2, old_of_new = compact_surface(kept_pos, new_faces)
    # vmap must follow the compaction
    final = np.full(keep.shape[0], -1, dtype=np.int64)
    final[old_of_new] = np.arange(old_of_new.shape[0])
    return verts2, faces2, final[vmap]


def drop_degenerate_and_flap_faces(faces):
    """Remove faces with repeated vertices, cancel opposite-orientation
    duplicate pairs, collapse remaining exact duplicates to one copy.

    Returns (faces, n_degenerate, n_cancelled, n_collapsed).
    """
    f = np.asarray(faces, dtype=np.int64)
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    n_degen = int((~distinct).sum())
    f = f[distinct]
    if f.shape[0] == 0:
        return f, n_degen, 0, 0
    # canonical rotation: smallest vertex first, orientation preserved
    shift = np.argmin(f, axis=1)
    canon = np.stack([f[np.arange(len(f)), shift],
                      f[np.arange(len(f)), (shift + 1) % 3],
                      f[np.arange(len(f)), (shift + 2) % 3]], axis=1)
    skey = np.sort(f, axis=1)
    order = np.lexsort((canon[:, 2], canon[:, 1],
                        skey[:, 2], skey[:, 1], skey[:, 0]))
    keep = np.ones(len(f), dtype=bool)
    n_cancel = 0
    n_dupes = 0
    i = 0
    so = skey[order]
    co = canon[order]
    while i < len(order):
        j = i
        while j < len(order) and (so[j] == so[i]).all():
            j += 1
        if j - i > 1:
            # pair off opposite orientations within the duplicate group
            group = list(range(i, j))
            used = [False] * len(group)
            for a_i in range(len(group)):
                if used[a_i]:
                    continue
                for b_i in range(a_i + 1, len(group)):
                    if used[b_i]:
                        continue
                    ca = co[group[a_i]]
                    cb = co[group[b_i]]
                    if ca[1] == cb[2] and ca[2] == cb[1]:
                        used[a_i] = used[b_i] = True
                        keep[order[group[a_i]]] = False
                        keep[order[group[b_i]]] = False
                        n_cancel += 2
                        break
            # collapse remaining same-orientation copies to the first
            rest = [g for g, u in zip(group, used) if not u]
            for extra in range(1, len(rest)):
                if (co[rest[extra]] == co[rest[0]]).all():
                    keep[order[rest[extra]]] = False
                    n_dupes += 1
        i = j
    return f[keep], n_degen, n_cancel, n_dupes


def merge_surfaces(a, b):
    """Disjoint union of two closed manifold surfaces.

    Rejects the merge if any triangle of a intersects any triangle of b.
    """
    for name, s in (("first", a), ("second", b)):
        rep = is_watertight_manifold(s)
        if not rep.ok:
            raise ValueError("%s surface not watertight manifold: %r" % (name, rep))
    va, fa = a.vertices, a.faces
    vb, fb = b.vertices, b.faces
    ca = va[fa].mean(axis=1)
    cb = vb[fb].mean(axis=1)
    ra = np.linalg.norm(va[fa] - ca[:, None, :], axis=2).max(axis=1)
    rb = np.linalg.norm(vb[fb] - cb[:, None, :], axis=2).max(axis=1)
    tree = cKDTree(cb)
    rb_max = float(rb.max()) if len(rb) else 0.0
    pairs = []
    for i, nbrs in enumerate(tree.query_ball_point(ca, ra + rb_max)):
        for j in nbrs:
            if np.linalg.norm(ca[i] - cb[j]) <= ra[i] + rb[j] + 1e-12:
                pairs.append((i, j))
    hit = geometry.first_intersecting_pair(va, fa, vb, fb, pairs)
    if hit is not None:
        raise ValueError("surfaces intersect at face pair %r" % (hit,))
    verts = np.concatenate([va, vb], axis=0)
    faces = np.concatenate([fa, fb + len(va)], axis=0)
    return TriSurface(verts, faces)


def _face_components(faces, n_vertices):
    """Connected components over faces via shared vertices."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    f = np.asarray(faces)
    nf = len(f)
    rows = np.repeat(np.arange(nf), 3)
    cols = f.ravel()
    m = coo_matrix((np.ones(nf * 3), (rows, cols)), shape=(nf, n_vertices))
    g = m @ m.T
    _, labels = connected_components(g, directed=False)
    return labels


def split_components(surface):
    """List of (faces-subset indices) per connected component."""
    labels = _face_components(surface.faces, surface.n_vertices)
    return [np.nonzero(labels == c)[0] for c in range(labels.max() + 1)]


def offset_surface(surface, distance, resolution, samples_per_area=None):
    """Closed surface approximating the set of points at the given unsigned
    distance from the input, extracted from a sampled distance field on a
    conforming tet lattice. Only the outermost shell is kept.
    """
    if distance < 2.0 * resolution:
        raise ValueError("offset distance below twice the sampling resolution")
    v = surface.vertices
    area = geometry.triangle_areas(v, surface.faces).sum()
    spacing = resolution / 2.0
    n_samp = int(np.ceil(area / (spacing * spacing))) + 1
    pts = geometry.sample_surface(v, surface.faces, n_samp, seed=7)
    pts = np.concatenate([pts, v], axis=0)
    tree = cKDTree(pts)
    lo = v.min(axis=0) - (distance + 3.0 * resolution)
    hi = v.max(axis=0) + (distance + 3.0 * resolution)
    dims = np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 2)
    nodes = lattice_points(lo, (resolution,) * 3, dims)
    d, _ = tree.query(nodes, workers=-1)
    field = distance - d
    _, tets = cube_lattice(dims)
    verts, topo = marching_tets(nodes, tets, field)
    if topo.faces.shape[0] == 0:
        raise ValueError("offset surface is empty")
    labels = _face_components(topo.faces, len(verts))
    best, best_vol = None, -1.0
    for c in range(labels.max() + 1):
        faces_c = topo.faces[labels == c]
        vol = abs(geometry.closed_volume(verts, faces_c))
        if vol > best_vol:
            best, best_vol = faces_c, vol
    verts2, faces2, _ = compact_surface(verts, best)
    return TriSurface(verts2, faces2)
