"""Voxel grids: containers, preprocessing, morphology, components, sampling.

A VoxelGrid stores a dense array indexed [x, y, z]; origin is the world
position of the center of voxel (0, 0, 0) and serialization is x-fastest
(Fortran ravel order). Label grids are binary or small-integer component
maps, scalar grids are float.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .isosurf import isosurface_from_label


@dataclass
class VoxelGrid:
    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    kind: str = "u8"   # "u8" label or "f32" scalar

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("voxel data must be 3D")
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if (self.spacing <= 0).any():
            raise ValueError("spacing must be positive")
        if self.kind not in ("u8", "f32"):
            raise ValueError("kind must be u8 or f32")

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def voxel_centers(self):
        """(nx*ny*nz, 3) world positions of all voxel centers, x fastest."""
        ax = [self.origin[d] + self.spacing[d] * np.arange(self.dims[d])
              for d in range(3)]
        g = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
        return np.stack([a.ravel(order="F") for a in g], axis=1)

    def like(self, data, kind=None):
        return VoxelGrid(data, self.spacing.copy(), self.origin.copy(),
                         kind or self.kind)

    def copy(self):
        return self.like(self.data.copy())


def grids_congruent(a, b):
    return (a.dims == b.dims and np.allclose(a.spacing, b.spacing)
            and np.allclose(a.origin, b.origin))


# ---------------------------------------------------------------------------
# vgrid file format

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


def save_vgrid(grid, path):
    """JSON header + raw little-endian x-fastest payload."""
    base = os.path.splitext(path)[0]
    data_file = os.path.basename(base) + ".bin"
    dt = _DTYPES[grid.kind]
    if grid.kind == "u8":
        if grid.data.min() < 0 or grid.data.max() > 255:
            raise ValueError("label values do not fit u8")
    payload = np.ascontiguousarray(
        grid.data.astype(dt).ravel(order="F")).tobytes()
    header = {
        "dims": [int(d) for d in grid.dims],
        "spacing": [float(s) for s in grid.spacing],
        "origin": [float(o) for o in grid.origin],
        "dtype": grid.kind,
        "order": "x-fastest",
        "data_file": data_file,
    }
    with open(path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(os.path.join(os.path.dirname(path) or ".", data_file), "wb") as fh:
        fh.write(payload)


def load_vgrid(path):
    with open(path) as fh:
        header = json.load(fh)
    if header.get("order") != "x-fastest":
        raise ValueError("unsupported vgrid order %r" % header.get("order"))
    kind = header["dtype"]
    dt = _DTYPES[kind]
    dims = tuple(int(d) for d in header["dims"])
    n = dims[0] * dims[1] * dims[2]
    data_path = os.path.join(os.path.dirname(path) or ".", header["data_file"])
    with open(data_path, "rb") as fh:
        raw = fh.read()
    if len(raw) != n * dt.itemsize:
        raise ValueError("vgrid payload is %d bytes, expected %d"
                         % (len(raw), n * dt.itemsize))
    data = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    return VoxelGrid(np.array(data), header["spacing"], header["origin"], kind)


# ---------------------------------------------------------------------------
# sampling and preprocessing

def sample_trilinear(grid, points, mode="clamp"):
    """Trilinear interpolation at world points.

    mode "clamp" extends boundary values outward; mode "zero" returns 0 for
    points outside the voxel-center hull.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = (p - grid.origin) / grid.spacing
    dims = np.array(grid.dims)
    outside = ((c < 0) | (c > dims - 1)).any(axis=1)
    cc = np.clip(c, 0, dims - 1)
    i0 = np.minimum(np.floor(cc).astype(np.int64), dims - 2)
    i0 = np.maximum(i0, 0)
    f = cc - i0
    data = grid.data.astype(np.float64, copy=False)
    out = np.zeros(len(p))
    for b in range(8):
        dx, dy, dz = b & 1, (b >> 1) & 1, (b >> 2) & 1
        w = (np.where(dx, f[:, 0], 1 - f[:, 0])
             * np.where(dy, f[:, 1], 1 - f[:, 1])
             * np.where(dz, f[:, 2], 1 - f[:, 2]))
        ix = np.minimum(i0[:, 0] + dx, dims[0] - 1)
        iy = np.minimum(i0[:, 1] + dy, dims[1] - 1)
        iz = np.minimum(i0[:, 2] + dz, dims[2] - 1)
        out += w * data[ix, iy, iz]
    if mode == "zero":
        out[outside] = 0.0
    elif mode != "clamp":
        raise ValueError("mode must be clamp or zero")
    return out


def sample_nearest(grid, points, mode="zero"):
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = (p - grid.origin) / grid.spacing
    dims = np.array(grid.dims)
    idx = np.rint(c).astype(np.int64)
    outside = ((idx < 0) | (idx >= dims)).any(axis=1)
    idx = np.clip(idx, 0, dims - 1)
    out = grid.data[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)
    if mode == "zero":
        out[outside] = 0.0
    return out


def preprocess(image, spacing_iso, crop_center, crop_dims, clip_lo, clip_hi):
    """Resample to isotropic spacing on a crop and min-max normalize.

    Scalar grids are interpolated trilinearly, clipped to [clip_lo, clip_hi]
    and mapped to [0, 1]; label grids use nearest-neighbor lookup and keep
    their values. Regions outside the source image read as 0.
    """
    if not (np.isfinite(clip_lo) and np.isfinite(clip_hi)):
        raise ValueError("clip bounds must be finite")
    if clip_lo >= clip_hi:
        raise ValueError("clip_lo must be below clip_hi")
    crop_dims = tuple(int(d) for d in crop_dims)
    if min(crop_dims) <= 0:
        raise ValueError("zero-size crop")
    crop_center = np.asarray(crop_center, dtype=np.float64)
    dims = np.array(crop_dims)
    origin = crop_center - (dims - 1) / 2.0 * spacing_iso
    out = VoxelGrid(np.zeros(crop_dims, dtype=np.float32),
                    (spacing_iso,) * 3, origin, "f32")
    pts = out.voxel_centers()
    if image.kind == "u8":
        vals = sample_nearest(image, pts, mode="zero")
        data = vals.reshape(crop_dims, order="F").astype(np.uint8)
        return VoxelGrid(data, out.spacing, out.origin, "u8")
    vals = sample_trilinear(image, pts, mode="zero")
    vals = np.clip(vals, clip_lo, clip_hi)
    vals = (vals - clip_lo) / (clip_hi - clip_lo)
    out.data = vals.reshape(crop_dims, order="F").astype(np.float32)
    return out


def normalize_to_unit(grid):
    """Rescale grid coordinates so the volume spans [0, 1]^3.

    Returns (grid in normalized units, mm_per_unit). Requires a cubic
    volume (equal extent on all axes).
    """
    extent = np.array(grid.dims) * grid.spacing
    if not np.allclose(extent, extent[0]):
        raise ValueError("normalized coordinates require a cubic volume")
    mm_per_unit = float(extent[0])
    spacing = grid.spacing / mm_per_unit
    origin = spacing / 2.0
    return VoxelGrid(grid.data, spacing, origin, grid.kind), mm_per_unit


def threshold_segment(image, tau):
    """Binary segmentation: 1 where the scalar image is >= tau."""
    if image.kind != "f32":
        raise ValueError("threshold_segment expects a scalar grid")
    return image.like((image.data.astype(np.float64) >= tau).astype(np.uint8),
                      kind="u8")


# ---------------------------------------------------------------------------
# kernels and morphology

@dataclass
class Kernel:
    shape: tuple
    weights: np.ndarray
    kind: str


def _check_odd(shape):
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 or s % 2 == 0 for s in shape):
        raise ValueError("kernel shape must be odd and positive")
    return shape


def adaptive_kernel(direction, shape=(7, 7, 7), semiaxes=(3.0, 1.5, 1.5)):
    """Binary ellipsoid kernel with the first semiaxis along direction."""
    shape = _check_odd(shape)
    u = np.asarray(direction, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu == 0:
        raise ValueError("zero direction")
    u = u / nu
    e = np.zeros(3)
    e[np.argmin(np.abs(u))] = 1.0
    b1 = np.cross(u, e)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(u, b1)
    h = [(s - 1) // 2 for s in shape]
    ax = [np.arange(-hh, hh + 1, dtype=np.float64) for hh in h]
    g = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
    d = np.stack([a.ravel() for a in g], axis=1)
    s0, s1, s2 = semiaxes
    val = ((d @ u) / s0) ** 2 + ((d @ b1) / s1) ** 2 + ((d @ b2) / s2) ** 2
    w = (val <= 1.0 + 1e-12).reshape(shape)
    kind = "isotropic-ball" if s0 == s1 == s2 else "adaptive-ellipsoid"
    return Kernel(shape, w, kind)


def ball_kernel(shape=(3, 3, 3)):
    r = (min(shape) - 1) / 2.0
    return adaptive_kernel((1.0, 0.0, 0.0), shape, (r, r, r))


def _check_binary(grid):
    u = np.unique(grid.data)
    if u.size and not np.isin(u, (0, 1)).all():
        raise ValueError("binary label grid required")


def morphology(label, op, kernel):
    """dilate / erode / close with zero padding outside the grid."""
    _check_binary(label)
    data = label.data.astype(bool)
    w = kernel.weights
    if op == "dilate":
        out = ndimage.binary_dilation(data, structure=w)
    elif op == "erode":
        out = ndimage.binary_erosion(data, structure=w, border_value=0)
    elif op == "close":
        out = ndimage.binary_erosion(
            ndimage.binary_dilation(data, structure=w), structure=w,
            border_value=0)
    else:
        raise ValueError("op must be dilate, erode or close")
    return label.like(out.astype(np.uint8), kind="u8")


def connected_components(label, connectivity=26):
    """(component map, counts). Components are numbered 1..K in order of
    first appearance in the x-fastest scan."""
    _check_binary(label)
    if connectivity == 6:
        struct = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        struct = np.ones((3, 3, 3), dtype=bool)
    else:
        raise ValueError("connectivity must be 6 or 26")
    lab, k = ndimage.label(label.data, structure=struct)
    if k == 0:
        return label.like(lab.astype(np.int32), kind="u8"), np.zeros(0, dtype=np.int64)
    flat = lab.ravel(order="F")
    first = np.full(k + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, k + 1)
    out = remap[lab]
    counts = np.bincount(out.ravel(), minlength=k + 1)[1:].astype(np.int64)
    return label.like(out, kind="u8"), counts


def upsample_nearest(label, factor):
    """Replicate each voxel factor^3 times; world extent is preserved."""
    f = int(factor)
    if f < 1:
        raise ValueError("factor must be >= 1")
    if f == 1:
        return label.copy()
    data = label.data
    for ax in range(3):
        data = np.repeat(data, f, axis=ax)
    spacing = label.spacing / f
    origin = label.origin - (f - 1) / (2.0 * f) * label.spacing
    return VoxelGrid(data, spacing, origin, label.kind)


# ---------------------------------------------------------------------------
# surface interplay

def stencil_mesh(surface, template):
    """Binary mask of voxels whose centers lie inside the closed surface."""
    rep_faces = surface.faces
    if rep_faces.shape[0] == 0:
        return template.like(np.zeros(template.dims, dtype=np.uint8), kind="u8")
    from .meshes import is_watertight_manifold
    rep = is_watertight_manifold(surface, dup_tol=0.0)
    if rep.boundary_edges > 0:
        raise ValueError("surface is not closed: %d boundary edges"
                         % rep.boundary_edges)
    out = geometry.scanline_stencil(template.origin, template.spacing,
                                    template.dims, surface.vertices,
                                    surface.faces)
    return template.like(out, kind="u8")


def sdf_from_label(label):
    """Distance from each voxel center to the 0.5-isosurface, positive
    inside the labeled region, negative outside."""
    _check_binary(label)
    sign = np.where(label.data > 0, 1.0, -1.0)
    if not label.data.any():
        return label.like(np.full(label.dims, -np.inf, dtype=np.float32),
                          kind="f32")
    verts, faces = isosurface_from_label(label.data, label.origin,
                                         label.spacing)
    d = geometry.point_surface_distances(label.voxel_centers(), verts, faces)
    sdf = sign * d.reshape(label.dims, order="F")
    return label.like(sdf.astype(np.float32), kind="f32")


def surface_points(label, n, seed):
    """n area-uniform samples on the 0.5-isosurface of a binary grid."""
    _check_binary(label)
    if n == 0:
        return np.zeros((0, 3))
    verts, faces = isosurface_from_label(label.data, label.origin,
                                         label.spacing)
    if faces.shape[0] == 0:
        raise ValueError("empty label grid has no isosurface")
    return geometry.sample_surface(verts, faces, n, seed)
