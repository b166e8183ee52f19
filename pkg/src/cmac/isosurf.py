"""Marching tetrahedra.

The isosurface of a nodal scalar field over a tetrahedral mesh is extracted
from a fixed 16-case table keyed by the per-tet sign pattern. An edge is a
crossing edge when one endpoint value is on the positive side and the other
is not; the crossing vertex is the linear zero of the field along the edge,

    v' = (v_a * s_b - v_b * s_a) / (s_b - s_a),

which reduces exactly to an endpoint when that endpoint's value is 0. Two
sign conventions are supported: "le_gt" treats values > 0 as inside (so a
value of exactly 0 is outside), "lt_ge" treats values >= 0 as inside.
Emitted triangles are oriented with normals pointing away from the inside.

The table below was derived on the canonical positively oriented reference
tet by enumerating sign patterns and checking each emitted triangle against
the inside-vertex centroid; the unit tests re-derive orientation and
cross-tet consistency from scratch.
"""

from dataclasses import dataclass

import numpy as np

# local tet edges, in fixed order
EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# case id = sum over inside vertices i of 2**i; entries are triangles as
# triples of edge ids from EDGES
TRI_TABLE = (
    (),
    ((0, 1, 2),),
    ((0, 4, 3),),
    ((1, 2, 4), (1, 4, 3)),
    ((1, 3, 5),),
    ((0, 5, 2), (0, 3, 5)),
    ((0, 4, 5), (0, 5, 1)),
    ((2, 4, 5),),
    ((2, 5, 4),),
    ((0, 5, 4), (0, 1, 5)),
    ((0, 2, 5), (0, 5, 3)),
    ((1, 5, 3),),
    ((1, 4, 2), (1, 3, 4)),
    ((0, 3, 4),),
    ((0, 2, 1),),
    (),
)

# Kuhn decomposition of the unit cube into 6 tets sharing the main diagonal
# (corner bit order: x = bit 0, y = bit 1, z = bit 2). All are positively
# oriented, and the decomposition is translation-invariant, so stacked cubes
# produce a conforming tetrahedral lattice.
CUBE_TETS = (
    (0, 1, 3, 7),
    (0, 5, 1, 7),
    (0, 3, 2, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 6, 4, 7),
)


@dataclass
class CrossingTopology:
    """Fixed combinatorics of an extracted isosurface.

    crossing_edges[:, 0] is the outside endpoint (value on the non-inside
    side), crossing_edges[:, 1] the inside endpoint. faces index into the
    crossing-edge list; output vertex k lives on crossing edge k.
    """
    crossing_edges: np.ndarray
    faces: np.ndarray
    n_points: int
    convention: str

    @property
    def n_vertices(self):
        return self.crossing_edges.shape[0]


def inside_mask(values, convention):
    if convention == "le_gt":
        return values > 0.0
    if convention == "lt_ge":
        return values >= 0.0
    raise ValueError("unknown crossing convention %r" % (convention,))


def interp_crossing(points, values, topo):
    """Crossing-vertex positions for the current point/value state."""
    a = topo.crossing_edges[:, 0]
    b = topo.crossing_edges[:, 1]
    sa = values[a]
    sb = values[b]
    denom = (sb - sa)[:, None]
    verts = (points[a] * sb[:, None] - points[b] * sa[:, None]) / denom
    snap_a = sa == 0.0
    if snap_a.any():
        verts[snap_a] = points[a[snap_a]]
    snap_b = sb == 0.0
    if snap_b.any():
        verts[snap_b] = points[b[snap_b]]
    return verts


def marching_tets(points, tets, values, convention="le_gt"):
    """Extract the isosurface; returns (vertices, topology).

    Faces are triples of crossing-edge ids (equal to output vertex ids).
    Crossing edges shared between tets are emitted once, so the surface is
    combinatorially closed wherever the tet mesh itself has no boundary
    crossing.
    """
    points = np.asarray(points, dtype=np.float64)
    tets = np.asarray(tets, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = points.shape[0]
    pos = inside_mask(values, convention)
    if tets.shape[0] == 0:
        topo = CrossingTopology(np.zeros((0, 2), dtype=np.int64),
                                np.zeros((0, 3), dtype=np.int64), n, convention)
        return np.zeros((0, 3)), topo
    case = (pos[tets[:, 0]].astype(np.int64)
            + 2 * pos[tets[:, 1]]
            + 4 * pos[tets[:, 2]]
            + 8 * pos[tets[:, 3]])
    blocks = []
    for cid in range(1, 15):
        tris = TRI_TABLE[cid]
        if not tris:
            continue
        rows = np.nonzero(case == cid)[0]
        if rows.size == 0:
            continue
        tt = tets[rows]
        for tri in tris:
            ends = np.empty((rows.size, 3, 2), dtype=np.int64)
            for c, e in enumerate(tri):
                i, j = EDGES[e]
                ends[:, c, 0] = tt[:, i]
                ends[:, c, 1] = tt[:, j]
            blocks.append(ends)
    if not blocks:
        topo = CrossingTopology(np.zeros((0, 2), dtype=np.int64),
                                np.zeros((0, 3), dtype=np.int64), n, convention)
        return np.zeros((0, 3)), topo
    ends = np.concatenate(blocks, axis=0)
    lo = ends.min(axis=2)
    hi = ends.max(axis=2)
    keys = lo * np.int64(n) + hi
    uniq, inv = np.unique(keys, return_inverse=True)
    faces = inv.reshape(-1, 3).astype(np.int64)
    ulo = uniq // n
    uhi = uniq % n
    # orient each crossing edge as (outside end, inside end)
    lo_in = pos[ulo]
    a = np.where(lo_in, uhi, ulo)
    b = np.where(lo_in, ulo, uhi)
    topo = CrossingTopology(np.stack([a, b], axis=1), faces, n, convention)
    return interp_crossing(points, values, topo), topo


def cube_lattice(dims):
    """Conforming 6-tets-per-cube lattice over a grid of the given node dims.

    Returns (ids, tets) where ids maps (i, j, k) node index to flat node id
    and tets is the (ncells*6, 4) connectivity.
    """
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    ids = np.arange(nx * ny * nz, dtype=np.int64).reshape(nx, ny, nz)
    base = ids[:-1, :-1, :-1].ravel()
    corner = np.empty(8, dtype=np.int64)
    for b in range(8):
        corner[b] = ((b & 1) * ny * nz + ((b >> 1) & 1) * nz + ((b >> 2) & 1))
    tets = np.empty((base.shape[0] * 6, 4), dtype=np.int64)
    for t, quad in enumerate(CUBE_TETS):
        for c in range(4):
            tets[t::6, c] = base + corner[quad[c]]
    return ids, tets


def lattice_points(origin, spacing, dims):
    """World positions of the lattice nodes, flattened to match cube_lattice."""
    ax = [np.asarray(origin)[d] + np.asarray(spacing)[d] * np.arange(dims[d])
          for d in range(3)]
    g = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    return np.stack([g[0].ravel(), g[1].ravel(), g[2].ravel()], axis=1)


def isosurface_from_label(data, origin, spacing, pad=2):
    """0.5-isosurface of a binary label grid as a closed triangle surface.

    The field is the label minus 0.5 at voxel centers, padded with one
    outside layer so surfaces touching the grid boundary still close. The
    grid is cropped to the foreground bounding box first.
    """
    data = np.asarray(data)
    idx = np.nonzero(data)
    if len(idx[0]) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.asarray(spacing, dtype=np.float64)
    lo = np.array([int(i.min()) - pad for i in idx])
    hi = np.array([int(i.max()) + pad + 1 for i in idx])
    lo = np.maximum(lo, -1)
    hi = np.minimum(hi, np.array(data.shape) + 1)
    dims = hi - lo
    field = np.full(tuple(dims), -0.5)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, data.shape)
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    field[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = (
        data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]] - 0.5)
    _, tets = cube_lattice(dims)
    pts = lattice_points(origin + lo * spacing, spacing, dims)
    verts, topo = marching_tets(pts, tets, field.ravel())
    return verts, topo.faces
