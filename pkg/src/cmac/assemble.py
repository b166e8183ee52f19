"""Final tetrahedralization and mesh stitching.

Tetrahedralization goes through an external constrained-Delaunay mesher
(TetGen-compatible CLI) via ASCII file exchange with 17-significant-digit
floats, so input surface vertices come back bit-identical. Candidate
surfaces from the remeshing stage are all tetrahedralized and the one with
the best worst-element quality wins. Stitching merges calcification nodes
onto coincident heart nodes without ever touching the heart mesh itself.
"""

import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .config import MesherError, StageError
from .mesh_io import read_tetgen_ele, read_tetgen_node, write_tetgen_poly
from .meshes import (AORTA, CALCIFICATION, LEAFLETS, TetMesh, boundary_faces,
                     extract_component_surface, is_watertight_manifold,
                     orient_tets_positive)
from .metrics import scaled_jacobian


def find_mesher(explicit=None):
    """Resolve the tetrahedralizer executable.

    Order: explicit path, CMAC_TETGEN env var, `tetgen` on PATH, then the
    repo-local build at .tetgen/tetgen.
    """
    candidates = []
    if explicit:
        candidates.append(explicit)
    env = os.environ.get("CMAC_TETGEN")
    if env:
        candidates.append(env)
    which = shutil.which("tetgen")
    if which:
        candidates.append(which)
    here = os.path.dirname(os.path.abspath(__file__))
    candidates.append(os.path.join(os.path.dirname(os.path.dirname(here)),
                                   ".tetgen", "tetgen"))
    for c in candidates:
        if os.path.isfile(c) and os.access(c, os.X_OK):
            return c
    raise MesherError("mesher", "no tetrahedralizer found; set CMAC_TETGEN "
                      "or run tools/build_tetgen.sh")


@dataclass
class MesherJob:
    input_surface: object
    executable: str
    workdir: str = None
    timeout_s: int = 120
    radius_edge_ratio: float = None
    max_volume: float = None
    preserve_surface: bool = True
    extra_switches: str = ""


def _switches(job):
    sw = "-p"
    if job.preserve_surface:
        sw += "Y"
    if job.radius_edge_ratio is not None:
        sw += "q%.4g" % job.radius_edge_ratio
    if job.max_volume is not None:
        sw += "a%.17g" % job.max_volume
    sw += job.extra_switches
    sw += "Q"
    return sw


def _run_mesher(job, workdir):
    poly = os.path.join(workdir, "mesh.poly")
    write_tetgen_poly(job.input_surface, poly)
    cmd = [job.executable, _switches(job), poly]
    last = None
    for _ in range(2):
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True,
                                  timeout=job.timeout_s, cwd=workdir)
        except subprocess.TimeoutExpired:
            last = "timeout after %ds" % job.timeout_s
            continue
        if proc.returncode == 0:
            break
        last = "exit %d: %s" % (proc.returncode,
                                (proc.stderr + proc.stdout)[-2000:])
    else:
        raise MesherError("tetrahedralize", last or "mesher failed")
    node_file = os.path.join(workdir, "mesh.1.node")
    ele_file = os.path.join(workdir, "mesh.1.ele")
    if not (os.path.isfile(node_file) and os.path.isfile(ele_file)):
        raise MesherError("tetrahedralize",
                          "mesher produced no output files")
    verts = read_tetgen_node(node_file)
    tets = read_tetgen_ele(ele_file)
    return verts, tets


def tetrahedralize(job):
    """Run the external mesher on a closed surface.

    The input surface must be watertight and manifold; its vertices are
    required to come back bit-identical (and first, in input order) among
    the output vertices.
    """
    rep = is_watertight_manifold(job.input_surface)
    if not rep.ok:
        raise StageError("tetrahedralize",
                         "input surface rejected: %d boundary edges, %d "
                         "non-manifold edges, %d duplicate vertices"
                         % (rep.boundary_edges, rep.nonmanifold_edges,
                            rep.duplicate_vertices))
    own_dir = job.workdir is None
    workdir = job.workdir or tempfile.mkdtemp(prefix="cmac-tet-")
    try:
        verts, tets = _run_mesher(job, workdir)
        n_in = job.input_surface.n_vertices
        vin = job.input_surface.vertices
        if len(verts) < n_in or not np.array_equal(verts[:n_in], vin):
            raise MesherError("tetrahedralize",
                              "mesher did not preserve input vertices "
                              "verbatim")
        if tets.shape[0] == 0:
            raise MesherError("tetrahedralize", "mesher returned no tets")
        mesh = TetMesh(verts, orient_tets_positive(verts, tets))
    finally:
        if own_dir:
            shutil.rmtree(workdir, ignore_errors=True)
    return mesh


def tetrahedralize_plc(surface, mesher=None, radius_edge_ratio=None,
                       max_volume=None, timeout_s=120, preserve_surface=True):
    job = MesherJob(surface, find_mesher(mesher), None, timeout_s,
                    radius_edge_ratio, max_volume, preserve_surface)
    return tetrahedralize(job)


def select_best_iterate(iterates, mesher=None, radius_edge_ratio=None,
                        max_volume=None, timeout_s=120):
    """Tetrahedralize every manifold candidate and keep the best one.

    Quality is the minimum scaled Jacobian; ties go to the later (more
    simplified) iterate. Returns (surface, mesh, info).
    """
    exe = find_mesher(mesher)
    best = None
    diagnostics = []
    for i, surf in enumerate(iterates):
        rep = is_watertight_manifold(surf)
        if not rep.ok:
            diagnostics.append({"iterate": i, "status": "non-manifold"})
            continue
        job = MesherJob(surf, exe, None, timeout_s, radius_edge_ratio,
                        max_volume)
        try:
            mesh = tetrahedralize(job)
        except (MesherError, StageError) as e:
            diagnostics.append({"iterate": i, "status": "failed",
                                "error": str(e)})
            continue
        sj = scaled_jacobian(mesh)
        diagnostics.append({"iterate": i, "status": "ok",
                            "min_scaled_jacobian": sj["min"]})
        if best is None or sj["min"] >= best[0]:
            best = (sj["min"], i, surf, mesh)
    if best is None:
        raise MesherError("select_best_iterate",
                          "no iterate tetrahedralized: %r" % diagnostics)
    info = {"selected": best[1], "min_scaled_jacobian": best[0],
            "iterates": diagnostics}
    return best[2], best[3], info


# ---------------------------------------------------------------------------
# stitching

@dataclass
class StitchReport:
    merged_node_count: int = 0
    components_kept: int = 0
    components_dropped: int = 0
    per_component_leaflet: dict = field(default_factory=dict)
    collapsed_tets: int = 0


def _calc_components(mesh):
    """Tet-adjacency components; two tets connect when they share a node."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    nt = mesh.n_tets
    rows = np.repeat(np.arange(nt), 4)
    cols = mesh.tets.ravel()
    inc = coo_matrix((np.ones(4 * nt, dtype=np.int8), (rows, cols)),
                     shape=(nt, mesh.n_vertices)).tocsr()
    adj = inc @ inc.T
    n, labels = connected_components(adj, directed=False)
    return n, labels


def stitch(calc, heart, tol=1e-3):
    """Merge a calcification tet mesh into the heart mesh.

    Each calcification component is assigned to the leaflet whose surface
    nodes it is closest to; its nodes within tol of the assigned leaflet
    or the aortic wall are replaced by the coincident heart node. A
    stitched component needs at least 3 merged nodes (one shared face) to
    be kept. Heart geometry and connectivity pass through bit-identical.
    """
    leaflet_nodes = {}
    for lf in LEAFLETS:
        if (heart.element_component == lf).any():
            s = extract_component_surface(heart, [lf])
            leaflet_nodes[lf] = (s.vertices, s.vertex_tags["mesh_vertex"])
    if not leaflet_nodes:
        raise ValueError("heart mesh has no leaflet components")
    if (heart.element_component == AORTA).any():
        s = extract_component_surface(heart, [AORTA])
        aorta_nodes = (s.vertices, s.vertex_tags["mesh_vertex"])
    else:
        aorta_nodes = (np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    report = StitchReport()
    combined_comp = np.concatenate([heart.element_component])
    if calc.n_tets == 0:
        out = TetMesh(heart.vertices.copy(), heart.tets.copy(),
                      combined_comp)
        out.node_flags["heart_node"] = np.ones(out.n_vertices,
                                               dtype=np.int64)
        return out, report

    n_comp, tet_label = _calc_components(calc)
    nh = heart.n_vertices
    # target index for every calc node: heart node id, or nh + new id
    target = np.full(calc.n_vertices, -1, dtype=np.int64)
    keep_tets = np.zeros(calc.n_tets, dtype=bool)
    for comp in range(n_comp):
        ctets = calc.tets[tet_label == comp]
        csurf = boundary_faces(ctets, calc.n_vertices)
        surf_nodes = np.unique(csurf)
        if surf_nodes.size == 0:
            surf_nodes = np.unique(ctets)
        best = None
        for lf in sorted(leaflet_nodes):
            d = geometry.symmetric_mean_distance(
                calc.vertices[surf_nodes], leaflet_nodes[lf][0])
            if best is None or d < best[0]:
                best = (d, lf)
        lf = best[1]
        report.per_component_leaflet[int(comp)] = int(lf)
        tpos = np.concatenate([leaflet_nodes[lf][0], aorta_nodes[0]])
        tids = np.concatenate([leaflet_nodes[lf][1], aorta_nodes[1]])
        tree = cKDTree(tpos)
        cnodes = np.unique(ctets)
        d, idx = tree.query(calc.vertices[cnodes])
        hit = d < tol
        n_merged = int(hit.sum())
        if n_merged < 3:
            report.components_dropped += 1
            continue
        report.components_kept += 1
        report.merged_node_count += n_merged
        target[cnodes[hit]] = tids[idx[hit]]
        target[cnodes[~hit]] = -2        # kept, needs a fresh index
        keep_tets[tet_label == comp] = True

    fresh = np.nonzero(target == -2)[0]
    target[fresh] = nh + np.arange(fresh.size)
    new_verts = np.vstack([heart.vertices, calc.vertices[fresh]])
    ctets = target[calc.tets[keep_tets]]
    st = np.sort(ctets, axis=1)
    distinct = (np.diff(st, axis=1) != 0).all(axis=1)
    report.collapsed_tets = int((~distinct).sum())
    ctets = ctets[distinct]
    tets = np.vstack([heart.tets, ctets])
    comp_codes = np.concatenate([
        heart.element_component,
        np.full(len(ctets), CALCIFICATION, dtype=np.int64)])
    out = TetMesh(new_verts, tets, comp_codes)
    flags = np.zeros(out.n_vertices, dtype=np.int64)
    flags[:nh] = 1
    out.node_flags["heart_node"] = flags
    return out, report
