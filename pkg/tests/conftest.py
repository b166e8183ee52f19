"""Shared fixtures: the phantom corpus and a reusable background mesh.

The corpus fixture runs the full pipeline on 50 synthetic cases once per
session and keeps only small per-case records (numbers and flags), so the
acceptance tests can assert over the whole corpus without holding 50 tet
meshes in memory.
"""

import numpy as np
import pytest
from scipy import ndimage

from cmac import pipeline
from cmac.assemble import find_mesher
from cmac.bgmesh import generate_background_mesh
from cmac.config import PipelineConfig
from cmac.geometry import symmetric_mean_distance
from cmac.grid import isosurface_from_label, stencil_mesh
from cmac.meshes import (CALCIFICATION, TriSurface, is_watertight_manifold,
                         surface_edges)
from cmac.metrics import cd_heart, heart_surface
from cmac.phantom import make_phantom
from cmac.postprocess import post_process
from cmac.remesh import separate_contact

DIMS = 48

CORPUS_CASES = (
    [("sphere-shell", s, 0.0) for s in range(20)]
    + [("sphere-shell", s, 2.0) for s in range(100, 110)]
    + [("tube-leaflets", s, 0.0) for s in range(12)]
    + [("tube-leaflets", s, 2.0) for s in range(100, 108)]
)


@pytest.fixture(scope="session")
def mesher():
    try:
        return find_mesher()
    except Exception as e:
        pytest.skip("tetrahedral mesher unavailable: %s" % e)


# ---------------------------------------------------------------------------
# helpers reused by the corpus builder and by individual tests

def icosphere(radius=1.0, center=(0.0, 0.0, 0.0), subdiv=2):
    """Analytic triangulated sphere with outward-oriented faces."""
    from cmac.geometry import closed_volume

    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 dtype=np.float64)
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    for _ in range(subdiv):
        cache = {}
        verts = list(v)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(nf)
    v = v * radius + np.asarray(center, dtype=np.float64)
    if closed_volume(v, f) < 0:
        f = f[:, ::-1]
    return TriSurface(v, np.ascontiguousarray(f))


def label_isosurface(grid):
    verts, faces = isosurface_from_label(grid.data, grid.origin, grid.spacing)
    return TriSurface(verts, faces)


def min_stencil_distance(grid, wall):
    """Distance from the nearest labeled voxel center to the nearest wall
    stencil voxel center, in voxel steps of the grid; 0 on overlap."""
    mask = grid.data.astype(bool)
    if not mask.any():
        return np.inf
    sten = stencil_mesh(wall, grid).data.astype(bool)
    if (mask & sten).any():
        return 0.0
    edt = ndimage.distance_transform_edt(~sten)
    return float(edt[mask].min())


def _lex_less(a, b):
    """Row-wise lexicographic a < b for float matrices of equal shape."""
    out = np.zeros(len(a), dtype=bool)
    decided = np.zeros(len(a), dtype=bool)
    for k in range(a.shape[1]):
        lt = ~decided & (a[:, k] < b[:, k])
        gt = ~decided & (a[:, k] > b[:, k])
        out |= lt
        decided |= lt | gt
    return out


def canonical_contact(surface, heart, tol=1e-9):
    """Byte string identifying the contact faces by corner coordinates.

    Faces are rotation-normalized (smallest corner first, orientation
    preserved) and sorted, so two surfaces with the same contact triangles
    produce identical bytes regardless of vertex indexing.
    """
    contact, _ = separate_contact(surface, heart, tol)
    if len(contact.faces) == 0:
        return b"", 0
    tri = contact.vertices[contact.faces]
    flat = np.stack([tri.reshape(-1, 9),
                     np.roll(tri, -1, axis=1).reshape(-1, 9),
                     np.roll(tri, -2, axis=1).reshape(-1, 9)], axis=1)
    n = len(tri)
    best = np.zeros(n, dtype=int)
    rows = np.arange(n)
    for r in (1, 2):
        take = _lex_less(flat[rows, r], flat[rows, best])
        best = np.where(take, r, best)
    canon = flat[rows, best]
    order = np.lexsort(canon.T[::-1])
    return np.ascontiguousarray(canon[order]).tobytes(), n


def free_vertex_cloud(surface, heart, tol=1e-9):
    """(positions, count) of the vertices used by non-contact faces."""
    _, free = separate_contact(surface, heart, tol)
    if len(free.faces) == 0:
        return np.zeros((0, 3)), 0
    used = np.unique(free.faces)
    return free.vertices[used], int(len(used))


def calc_component_merge_counts(final):
    """Merged heart nodes per connected calcification component of the
    stitched mesh."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    tets = final.tets[final.element_component == CALCIFICATION]
    if len(tets) == 0:
        return []
    flags = np.asarray(final.node_flags["heart_node"])
    nt = len(tets)
    rows = np.repeat(np.arange(nt), 4)
    inc = coo_matrix((np.ones(4 * nt, dtype=np.int8), (rows, tets.ravel())),
                     shape=(nt, final.n_vertices)).tocsr()
    n, labels = connected_components(inc @ inc.T, directed=False)
    counts = []
    for c in range(n):
        vs = np.unique(tets[labels == c])
        counts.append(int(flags[vs].sum()))
    return counts


# ---------------------------------------------------------------------------
# corpus

def _case_record(kind, seed, gap, mesher_path):
    ph = make_phantom(kind, seed, dims=DIMS, gap_voxels=gap)
    cfg = PipelineConfig(out="", mesher=mesher_path)
    cfg.remesh.mode = "always"
    res = pipeline.run(cfg, heart=ph.heart, seg=ph.calcification)
    rec = {"kind": kind, "seed": seed, "gap": gap, "status": res.status}
    if res.status != "ok":
        return rec
    heart = ph.heart

    trace = res.dmtet_info.get("loss_trace") or []
    rec["loss_first"] = float(trace[0]) if trace else None
    rec["loss_last"] = float(trace[-1]) if trace else None

    rec["wt_dmtet"] = bool(is_watertight_manifold(res.dmtet_surface).ok)
    rec["wt_calc"] = bool(is_watertight_manifold(res.calc_surface).ok)

    contact, _ = separate_contact(res.calc_surface, heart)
    used = (np.unique(contact.faces) if len(contact.faces)
            else np.zeros(0, dtype=int))
    heart_rows = {v.tobytes() for v in heart.vertices}
    rec["n_contact_vertices"] = int(len(used))
    rec["n_contact_exact"] = int(sum(
        contact.vertices[i].tobytes() in heart_rows for i in used))

    rep = res.stitch_report
    rec["merged_nodes"] = int(rep.merged_node_count)
    rec["components_kept"] = int(rep.components_kept)
    rec["components_dropped"] = int(rep.components_dropped)
    rec["per_component_merged"] = calc_component_merge_counts(res.final_mesh)

    sel = res.selection or {}
    rec["selected"] = sel.get("selected")
    rec["iterate_statuses"] = [d.get("status")
                               for d in sel.get("iterates", [])]
    rec["bg_ok"] = res.background is not None
    rec["sj_opt"] = res.report.get("min_scaled_jacobian_calc")

    iterates = res.iterates or [res.dmtet_surface]
    canons = []
    free_counts = []
    clouds = []
    for it in iterates:
        cb, nfaces = canonical_contact(it, heart)
        canons.append(cb)
        pts, nused = free_vertex_cloud(it, heart)
        free_counts.append(nused)
        clouds.append(pts)
    rec["contact_stable"] = all(c == canons[0] for c in canons)
    rec["n_contact_faces"] = len(canons[0]) // 72 if canons[0] else 0
    rec["free_counts"] = free_counts
    free0 = separate_contact(iterates[0], heart)[1]
    edges = surface_edges(free0.faces)
    if len(edges):
        lens = np.linalg.norm(free0.vertices[edges[:, 0]]
                              - free0.vertices[edges[:, 1]], axis=1)
        rec["free_mean_edge"] = float(lens.mean())
    else:
        rec["free_mean_edge"] = None
    if len(clouds[0]) and len(clouds[-1]):
        rec["free_drift"] = float(symmetric_mean_distance(clouds[0],
                                                          clouds[-1]))
    else:
        rec["free_drift"] = None

    if gap > 0:
        wall = heart_surface(heart)
        rec["gap_raw"] = min_stencil_distance(res.seg_raw, wall)
        rec["gap_proc"] = min_stencil_distance(res.seg_processed, wall)
        rec["cd_raw"] = cd_heart(label_isosurface(res.seg_raw), heart,
                                 n_samples=4000)
        rec["cd_proc"] = cd_heart(label_isosurface(res.seg_processed), heart,
                                  n_samples=4000)

    cfg_v = PipelineConfig(out="", mesher=mesher_path)
    cfg_v.remesh.mode = "never"
    cfg_v.dmtet.n_opt = 0
    res_v = pipeline.run(cfg_v, heart=ph.heart, seg=ph.calcification)
    rec["status_variant"] = res_v.status
    rec["sj_variant"] = res_v.report.get("min_scaled_jacobian_calc")
    return rec


@pytest.fixture(scope="session")
def corpus(mesher):
    """Per-case records for 50 pipeline runs plus unoptimized variants."""
    return [_case_record(kind, seed, gap, mesher)
            for kind, seed, gap in CORPUS_CASES]


@pytest.fixture(scope="session")
def sphere_case(mesher):
    """One sphere phantom with its background mesh and processed labels."""
    ph = make_phantom("sphere-shell", 7, dims=DIMS)
    h = 1.0 / DIMS
    bg = generate_background_mesh(ph.heart, 10.0 * h, 2.0 * h, mesher=mesher)
    proc = post_process(ph.calcification, ph.heart)
    return ph, bg, proc
