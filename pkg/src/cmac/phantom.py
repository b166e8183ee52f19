"""Synthetic test cases: analytic heart meshes plus voxel calcifications.

Two geometries. "sphere-shell" is a solid ball whose outermost element
band is split into three longitude sectors labeled as leaflets, with
calcification blobs sitting on (or a configurable gap away from) the
spherical wall. "tube-leaflets" is an open cylindrical wall with three
inward pad patches as leaflets and blobs floating in the lumen next to
the pads. All coordinates are normalized to the unit cube and the
calcification is rasterized on a cubic voxel grid.
"""

from dataclasses import dataclass, field

import numpy as np

from .grid import VoxelGrid
from .isosurf import CUBE_TETS
from .meshes import (AORTA, LEAFLET1, TetMesh, orient_tets_positive)


@dataclass
class Phantom:
    heart: TetMesh
    calcification: VoxelGrid
    descriptor: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# icosphere

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
    (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
    (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
], dtype=np.float64)
_ICO_FACES = np.array([
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
], dtype=np.int64)


def icosphere(subdiv):
    """Unit icosphere (verts, faces), outward oriented."""
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1)[:, None]
    verts = [tuple(v) for v in verts]
    faces = [tuple(f) for f in _ICO_FACES]
    for _ in range(subdiv):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = np.array(verts[a]) + np.array(verts[b])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        out = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = out
    return np.array(verts), np.array(faces, dtype=np.int64)


def _split_prism(b0, b1, b2, t0, t1, t2):
    """Three tets for a prism, diagonals keyed on global vertex ids so
    adjacent prisms pick matching quad diagonals."""
    v = [b0, b1, b2, t0, t1, t2]
    small = int(np.argmin(v))
    if small >= 3:
        # flip the prism so the smallest id sits on the bottom
        v = [v[3], v[5], v[4], v[0], v[2], v[1]]
        small -= 3
        if small == 1:
            small = 2
        elif small == 2:
            small = 1
    # rotate the smallest id to position 0 (top follows its pair)
    r = small
    v = [v[r % 3], v[(r + 1) % 3], v[(r + 2) % 3],
         v[3 + r % 3], v[3 + (r + 1) % 3], v[3 + (r + 2) % 3]]
    if min(v[1], v[5]) < min(v[2], v[4]):
        return [(v[0], v[1], v[2], v[5]), (v[0], v[1], v[5], v[4]),
                (v[0], v[4], v[5], v[3])]
    return [(v[0], v[1], v[2], v[4]), (v[0], v[4], v[2], v[5]),
            (v[0], v[4], v[5], v[3])]


def _sphere_heart(center, radius, layers=3, subdiv=2):
    unit, faces = icosphere(subdiv)
    nv = len(unit)
    verts = [np.asarray(center, dtype=np.float64)]
    for k in range(1, layers + 1):
        verts.append(center + unit * (radius * k / layers))
    verts = np.vstack([verts[0][None, :]] + verts[1:])
    tets = []
    band = []
    for a, b, c in faces:
        tets.append((0, 1 + a, 1 + b, 1 + c))
        band.append(0)
    for k in range(1, layers):
        lo = 1 + (k - 1) * nv
        hi = 1 + k * nv
        for a, b, c in faces:
            for t in _split_prism(lo + a, lo + b, lo + c,
                                  hi + a, hi + b, hi + c):
                tets.append(t)
                band.append(k)
    tets = orient_tets_positive(verts, np.array(tets, dtype=np.int64))
    band = np.array(band)
    cent = verts[tets].mean(axis=1)
    phi = np.arctan2(cent[:, 1] - center[1], cent[:, 0] - center[0])
    sector = np.clip(((phi + np.pi) / (2 * np.pi / 3)).astype(int), 0, 2)
    comp = np.full(len(tets), AORTA, dtype=np.int64)
    outer = band == band.max()
    comp[outer] = LEAFLET1 + sector[outer]
    return TetMesh(verts, tets, comp)


def _tube_heart(center_xy=(0.5, 0.5), r_in=0.16, dr=0.02, n_wall=2,
                n_theta=24, z0=0.2, z1=0.8, n_z=9, pad_layers=1):
    """Open cylinder wall with three inward leaflet pads at mid-height."""
    sector_width = n_theta // 3 - 1           # one-cell gaps between pads
    kz0, kz1 = n_z // 3, 2 * n_z // 3
    dz = (z1 - z0) / n_z
    nodes = {}
    verts = []

    def node(i, j, k):
        j = j % n_theta
        key = (i, j, k)
        if key not in nodes:
            r = r_in + i * dr
            th = 2.0 * np.pi * j / n_theta
            nodes[key] = len(verts)
            verts.append((center_xy[0] + r * np.cos(th),
                          center_xy[1] + r * np.sin(th),
                          z0 + k * dz))
        return nodes[key]

    def pad_sector(j):
        s = j // (n_theta // 3)
        return s if j % (n_theta // 3) < sector_width else -1

    cells = []
    for i in range(0, n_wall):
        for j in range(n_theta):
            for k in range(n_z):
                cells.append((i, j, k, AORTA))
    for i in range(-pad_layers, 0):
        for j in range(n_theta):
            s = pad_sector(j)
            if s < 0:
                continue
            for k in range(kz0, kz1):
                cells.append((i, j, k, LEAFLET1 + s))
    tets = []
    comp = []
    for i, j, k, code in cells:
        corner = [node(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1))
                  for b in range(8)]
        for t in CUBE_TETS:
            tets.append((corner[t[0]], corner[t[1]], corner[t[2]],
                         corner[t[3]]))
            comp.append(code)
    verts = np.array(verts)
    tets = orient_tets_positive(verts, np.array(tets, dtype=np.int64))
    return TetMesh(verts, tets, np.array(comp, dtype=np.int64))


# ---------------------------------------------------------------------------
# calcification rasterization

def _unit_grid(dims):
    s = 1.0 / dims
    return VoxelGrid(np.zeros((dims, dims, dims), dtype=np.uint8),
                     (s, s, s), (s / 2, s / 2, s / 2), "u8")


def _rasterize_balls(grid, centers, radii):
    ax = [grid.origin[d] + grid.spacing[d] * np.arange(grid.dims[d])
          for d in range(3)]
    X, Y, Z = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    for c, r in zip(centers, radii):
        d2 = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2
        grid.data |= (d2 <= r * r).astype(np.uint8)
    return grid


def make_phantom(kind, seed, dims=48, gap_voxels=0.0, n_blobs=None,
                 blob_radius_vox=None, blob_volume_vox=None, **kw):
    """Build a synthetic case; fully determined by (kind, seed, params).

    blob_radius_vox defaults to (2, 3) voxels at dims=48 and scales with
    dims so blob world size is resolution independent. blob_volume_vox
    pins every blob to a target volume (in voxel units cubed) instead.
    """
    if blob_radius_vox is None:
        blob_radius_vox = (2.0 * dims / 48.0, 3.0 * dims / 48.0)
    if blob_volume_vox is not None:
        r = (3.0 * blob_volume_vox / (4.0 * np.pi)) ** (1.0 / 3.0)
        blob_radius_vox = (r, r)
    if kind == "sphere-shell":
        return _make_sphere_phantom(seed, dims, gap_voxels, n_blobs,
                                    blob_radius_vox, **kw)
    if kind == "tube-leaflets":
        return _make_tube_phantom(seed, dims, gap_voxels, n_blobs,
                                  blob_radius_vox, **kw)
    raise ValueError("unknown phantom kind %r" % kind)


def _make_sphere_phantom(seed, dims, gap_voxels, n_blobs, blob_radius_vox,
                         radius=0.22, layers=3, subdiv=None):
    rng = np.random.default_rng([seed, 101])
    center = np.array([0.5, 0.5, 0.5])
    if subdiv is None:
        # keep wall triangles no coarser than the image so small deposits
        # can still cover whole triangles at the contact
        subdiv = 2 if dims < 96 else 3
    heart = _sphere_heart(center, radius, layers, subdiv)
    h = 1.0 / dims
    if n_blobs is None:
        n_blobs = int(rng.integers(1, 4))
    centers = []
    radii = []
    for _ in range(n_blobs):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r = float(rng.uniform(*blob_radius_vox)) * h
        d = radius + r + gap_voxels * h
        centers.append(center + u * d)
        radii.append(r)
    grid = _rasterize_balls(_unit_grid(dims), centers, radii)
    desc = {"kind": "sphere-shell", "seed": seed, "dims": dims,
            "gap_voxels": gap_voxels, "radius": radius,
            "blob_centers": [list(map(float, c)) for c in centers],
            "blob_radii": [float(r) for r in radii]}
    return Phantom(heart, grid, desc)


def _make_tube_phantom(seed, dims, gap_voxels, n_blobs, blob_radius_vox,
                       r_in=0.16, dr=0.02, pad_layers=1, n_theta=24):
    rng = np.random.default_rng([seed, 202])
    heart = _tube_heart(r_in=r_in, dr=dr, pad_layers=pad_layers,
                        n_theta=n_theta)
    h = 1.0 / dims
    if n_blobs is None:
        n_blobs = int(rng.integers(1, 4))
    r_pad = r_in - pad_layers * dr
    centers = []
    radii = []
    sectors = rng.permutation(3)
    for b in range(n_blobs):
        s = sectors[b % 3]
        th = (2.0 * np.pi / 3.0) * s + 0.9 \
            + float(rng.uniform(-0.15, 0.15))
        r = float(rng.uniform(*blob_radius_vox)) * h
        rad = r_pad - r - gap_voxels * h
        z = 0.5 + float(rng.uniform(-0.04, 0.04))
        centers.append((0.5 + rad * np.cos(th), 0.5 + rad * np.sin(th), z))
        radii.append(r)
    grid = _rasterize_balls(_unit_grid(dims), centers, radii)
    desc = {"kind": "tube-leaflets", "seed": seed, "dims": dims,
            "gap_voxels": gap_voxels, "r_in": r_in,
            "blob_centers": [list(map(float, c)) for c in centers],
            "blob_radii": [float(r) for r in radii]}
    return Phantom(heart, grid, desc)
