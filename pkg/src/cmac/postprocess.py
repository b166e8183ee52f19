"""Anatomical cleanup of a raw calcification segmentation.

The segmentation is grouped into per-leaflet islands, each group is closed
toward nearby heart tissue with direction-adaptive ellipsoid kernels, and
the heart itself is subtracted on a refined grid with small islands
removed. The closing kernels align with the local heart surface normal so
gaps between deposits and the wall fill without ballooning sideways.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.spatial import cKDTree

from . import geometry
from .config import PostprocessConfig
from .grid import (adaptive_kernel, ball_kernel, connected_components,
                   morphology, stencil_mesh, upsample_nearest)
from .meshes import (AORTA, LEAFLETS, extract_component_surface)

_STRUCT6 = ndimage.generate_binary_structure(3, 1)


@njit(cache=True)
def _stamp_kernels(out, sites, kidx, kernels):
    """OR each site's kernel into `out`, clipped at the grid edge."""
    nx, ny, nz = out.shape
    kx, ky, kz = kernels.shape[1], kernels.shape[2], kernels.shape[3]
    hx, hy, hz = kx // 2, ky // 2, kz // 2
    for n in range(sites.shape[0]):
        x0 = sites[n, 0] - hx
        y0 = sites[n, 1] - hy
        z0 = sites[n, 2] - hz
        k = kernels[kidx[n]]
        for i in range(kx):
            x = x0 + i
            if x < 0 or x >= nx:
                continue
            for j in range(ky):
                y = y0 + j
                if y < 0 or y >= ny:
                    continue
                for m in range(kz):
                    z = z0 + m
                    if 0 <= z < nz and k[i, j, m]:
                        out[x, y, z] = True


@njit(cache=True)
def _probe_kernels(mask, sites, kidx, kernels, keep):
    """keep[n] = True iff site n's whole kernel lies inside the mask
    (outside the grid counts as background)."""
    nx, ny, nz = mask.shape
    kx, ky, kz = kernels.shape[1], kernels.shape[2], kernels.shape[3]
    hx, hy, hz = kx // 2, ky // 2, kz // 2
    for n in range(sites.shape[0]):
        k = kernels[kidx[n]]
        ok = True
        for i in range(kx):
            x = sites[n, 0] - hx + i
            for j in range(ky):
                y = sites[n, 1] - hy + j
                for m in range(kz):
                    if not k[i, j, m]:
                        continue
                    z = sites[n, 2] - hz + m
                    if (x < 0 or x >= nx or y < 0 or y >= ny
                            or z < 0 or z >= nz or not mask[x, y, z]):
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        keep[n] = ok


@dataclass
class GroupedSegmentation:
    groups: list           # three binary VoxelGrids, leaflet order
    source: str = ""


class _HeartContext:
    """Heart surface data shared by the per-group operations."""

    def __init__(self, heart, template, cfg):
        comps = [AORTA] + list(LEAFLETS)
        present = [c for c in comps if (heart.element_component == c).any()]
        if not any(c in present for c in LEAFLETS):
            raise ValueError("heart mesh has no leaflet components")
        self.surface = extract_component_surface(heart, present)
        self.normals = geometry.vertex_normals(self.surface.vertices,
                                               self.surface.faces)
        self.tree = cKDTree(self.surface.vertices)
        self.cfg = cfg
        self.stencil = stencil_mesh(self.surface, template)
        self.leaflet_nodes = {}
        for lf in LEAFLETS:
            if (heart.element_component == lf).any():
                self.leaflet_nodes[lf] = extract_component_surface(
                    heart, [lf]).vertices

    def site_kernels(self, template, sites):
        """Per-site kernels oriented along the nearest surface normal.

        sites is an (N, 3) integer index array. Returns (kidx, kernels)
        where kernels is a (U, kx, ky, kz) bool stack of the unique
        kernels appearing and kidx maps each site into it.
        """
        pts = template.origin + sites * template.spacing
        nearest = self.tree.query(pts)[1]
        uniq, kidx = np.unique(nearest, return_inverse=True)
        kernels = np.stack([
            adaptive_kernel(self.normals[node], self.cfg.kernel_shape,
                            self.cfg.kernel_semiaxes).weights
            for node in uniq])
        return kidx.astype(np.int64), kernels


def _adaptive_dilate(mask, template, ctx):
    out = np.zeros_like(mask)
    sites = np.argwhere(mask)
    if sites.shape[0] == 0:
        return out
    kidx, kernels = ctx.site_kernels(template, sites)
    _stamp_kernels(out, sites, kidx, kernels)
    return out


def _adaptive_erode(mask, template, ctx):
    """Keep a site only if its own kernel fits entirely inside the mask."""
    out = np.zeros_like(mask)
    sites = np.argwhere(mask)
    if sites.shape[0] == 0:
        return out
    kidx, kernels = ctx.site_kernels(template, sites)
    keep = np.zeros(sites.shape[0], dtype=np.bool_)
    _probe_kernels(mask, sites, kidx, kernels, keep)
    out[sites[keep, 0], sites[keep, 1], sites[keep, 2]] = True
    return out


def _boundary_voxels(mask):
    return mask & ~ndimage.binary_erosion(mask, structure=_STRUCT6,
                                          border_value=0)


def _island_centers(template, comp_map, island, boundary):
    sel = np.nonzero((comp_map == island) & boundary)
    return template.origin + np.stack(sel, axis=1) * template.spacing


def group_by_leaflets(y0, heart):
    """Assign each 26-connected island to its closest leaflet.

    Closeness is the mean symmetric nearest-neighbor distance between the
    island's boundary voxel centers and the leaflet's surface nodes; ties
    go to the lowest leaflet index.
    """
    ctx = _HeartContext(heart, y0, PostprocessConfig())
    return _group_by_leaflets(y0, ctx)


def _group_by_leaflets(y0, ctx):
    comp, counts = connected_components(y0, 26)
    groups = [y0.like(np.zeros(y0.dims, dtype=np.uint8), kind="u8")
              for _ in LEAFLETS]
    if counts.size == 0:
        return GroupedSegmentation(groups)
    boundary = _boundary_voxels(y0.data.astype(bool))
    for island in range(1, counts.size + 1):
        centers = _island_centers(y0, comp.data, island, boundary)
        best = None
        for gi, lf in enumerate(LEAFLETS):
            if lf not in ctx.leaflet_nodes:
                continue
            d = geometry.symmetric_mean_distance(centers,
                                                 ctx.leaflet_nodes[lf])
            if best is None or d < best[0]:
                best = (d, gi)
        groups[best[1]].data |= ((comp.data == island)
                                 .astype(np.uint8))
    return GroupedSegmentation(groups)


def filter_heart_seg(y_i, heart):
    """Heart voxels in islands reachable from the dilated segmentation."""
    ctx = _HeartContext(heart, y_i, PostprocessConfig())
    return _filter_heart_seg(y_i, ctx)


def _filter_heart_seg(y_i, ctx):
    empty = y_i.like(np.zeros(y_i.dims, dtype=np.uint8), kind="u8")
    mask = y_i.data.astype(bool)
    if not mask.any():
        return empty
    # two dilations: the close dilates both the segmentation and the heart
    # side, so its bridging reach is twice the kernel, and the gate must
    # admit every wall component the close could actually connect to
    dilated = _adaptive_dilate(mask, y_i, ctx)
    dilated = _adaptive_dilate(dilated, y_i, ctx)
    hcomp, hcounts = connected_components(ctx.stencil, 26)
    if hcounts.size == 0:
        return empty
    hit = np.unique(hcomp.data[dilated & (hcomp.data > 0)])
    keep = np.isin(hcomp.data, hit) & (hcomp.data > 0)
    return y_i.like(keep.astype(np.uint8), kind="u8")


def adaptive_close(y_i, heart_seg, heart):
    """Close the union of segmentation and retained heart voxels.

    Adaptive ellipsoid close first, isotropic 3-ball close second. Heart
    voxels are subtracted before returning; they only serve as closing
    targets. The heart mesh supplies the kernel orientations.
    """
    ctx = _HeartContext(heart, y_i, PostprocessConfig())
    return _adaptive_close(y_i, heart_seg, ctx)


def _adaptive_close(y_i, heart_seg, ctx):
    union = y_i.data.astype(bool) | heart_seg.data.astype(bool)
    if not union.any():
        return y_i.like(np.zeros(y_i.dims, dtype=np.uint8), kind="u8")
    closed = _adaptive_erode(_adaptive_dilate(union, y_i, ctx), y_i, ctx)
    grid = y_i.like(closed.astype(np.uint8), kind="u8")
    grid = morphology(grid, "close", ball_kernel((3, 3, 3)))
    out = grid.data.astype(bool) & ~heart_seg.data.astype(bool)
    return y_i.like(out.astype(np.uint8), kind="u8")


def subtract_and_filter(groups, heart, min_volume_mm3=5.0,
                        mm_per_unit=160.0, factor=3):
    """Refine, subtract the heart, and drop sub-threshold islands."""
    union = groups.groups[0].copy()
    for g in groups.groups[1:]:
        union.data |= g.data
    y3 = upsample_nearest(union, factor)
    comps = [AORTA] + list(LEAFLETS)
    present = [c for c in comps if (heart.element_component == c).any()]
    surf = extract_component_surface(heart, present)
    sten = stencil_mesh(surf, y3)
    y3.data &= ~sten.data.astype(bool)
    comp, counts = connected_components(y3, 26)
    if counts.size:
        voxvol = float(np.prod(y3.spacing * mm_per_unit))
        small = np.nonzero(counts * voxvol < min_volume_mm3)[0] + 1
        if small.size:
            y3.data[np.isin(comp.data, small)] = 0
    return y3


def post_process(y0, heart, iterations=None, cfg=None, mm_per_unit=160.0):
    """Full cleanup loop; returns the refined segmentation y_ca2.

    Runs group / filter / close passes until the voxel set stops changing
    or the iteration cap is hit, then subtracts the heart on a x3 grid and
    removes islands below the volume threshold.
    """
    cfg = cfg or PostprocessConfig()
    if iterations is None:
        iterations = cfg.iterations
    ctx = _HeartContext(heart, y0, cfg)
    cur = y0.copy()
    for _ in range(iterations):
        grouped = _group_by_leaflets(cur, ctx)
        parts = []
        for g in grouped.groups:
            seg = _filter_heart_seg(g, ctx)
            parts.append(_adaptive_close(g, seg, ctx))
        merged = np.zeros(y0.dims, dtype=np.uint8)
        for p in parts:
            merged |= p.data
        if (merged == cur.data).all():
            break
        cur = y0.like(merged, kind="u8")
    grouped = _group_by_leaflets(cur, ctx)
    return subtract_and_filter(grouped, heart, cfg.min_volume_mm3,
                               mm_per_unit, cfg.upsample_factor)
