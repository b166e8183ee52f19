"""Background tetrahedral mesh for the implicit-surface optimization.

The domain is the space between the aorta+leaflet surface and an offset
shell around it. The heart surface enters the external mesher as a
constraint and its nodes survive verbatim, which is what later makes
exact node-to-node contact possible. Every boundary face additionally
receives a padding tet to a single shared far-inside node, so the
implicit surface can close flush against the domain walls.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .assemble import tetrahedralize_plc
from .config import MesherError, StageError
from .meshes import (AORTA, BACKGROUND, LEAFLETS, TetMesh, boundary_faces,
                     extract_component_surface, is_watertight_manifold,
                     merge_surfaces, offset_surface)


@dataclass
class BackgroundMesh:
    mesh: TetMesh
    boundary_nodes: np.ndarray
    fake_node: int
    fake_tets: np.ndarray
    surface_correspondence: dict = field(default_factory=dict)

    @property
    def real_tet_mask(self):
        m = np.ones(self.mesh.n_tets, dtype=bool)
        m[self.fake_tets] = False
        return m

    def real_mesh(self):
        """The mesh with fake padding removed; vertex order preserved."""
        sel = self.real_tet_mask
        return TetMesh(self.mesh.vertices[:self.fake_node].copy(),
                       self.mesh.tets[sel],
                       self.mesh.element_component[sel])


def hollow(prelim, aorta):
    """Drop every tet whose centroid falls inside the aortic surface."""
    cent = prelim.vertices[prelim.tets].mean(axis=1)
    w = geometry.winding_numbers(cent, aorta.vertices, aorta.faces)
    keep = w <= 0.5
    if not keep.any():
        raise ValueError("hollowing removed every tet")
    tets = prelim.tets[keep]
    used = np.unique(tets)
    remap = np.full(prelim.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TetMesh(prelim.vertices[used], remap[tets],
                   prelim.element_component[keep])


def create_fake_elems(hollowed, heart_surface=None, match_tol=1e-9):
    """Append the shared padding node and one padding tet per boundary face.

    The padding node sits at the boundary centroid; its position never
    reaches the output because padding-edge crossings snap to the boundary
    end. Padding tets get component code 0 so quality metrics skip them.
    """
    bfaces = boundary_faces(hollowed.tets, hollowed.n_vertices)
    if bfaces.shape[0] == 0:
        raise ValueError("hollowed mesh has no boundary")
    bnodes = np.unique(bfaces)
    fake_pos = hollowed.vertices[bnodes].mean(axis=0)
    verts = np.vstack([hollowed.vertices, fake_pos[None, :]])
    fake_id = hollowed.n_vertices
    ftets = np.column_stack([bfaces,
                             np.full(len(bfaces), fake_id, dtype=np.int64)])
    tets = np.vstack([hollowed.tets, ftets])
    comp = np.concatenate([hollowed.element_component,
                           np.zeros(len(ftets), dtype=np.int64)])
    mesh = TetMesh(verts, tets, comp)
    flags = np.zeros(mesh.n_vertices, dtype=np.int64)
    flags[bnodes] = 1
    mesh.node_flags["boundary"] = flags
    fake_tet_ids = np.arange(hollowed.n_tets, mesh.n_tets)
    corr = {}
    if heart_surface is not None and heart_surface.n_vertices:
        heart_ids = heart_surface.vertex_tags.get(
            "mesh_vertex", np.arange(heart_surface.n_vertices))
        tree = cKDTree(heart_surface.vertices)
        d, idx = tree.query(verts[bnodes])
        for bn, dd, ii in zip(bnodes, d, idx):
            if dd < match_tol:
                corr[int(bn)] = int(heart_ids[ii])
    return BackgroundMesh(mesh, bnodes, fake_id, fake_tet_ids, corr)


def generate_background_mesh(heart, offset_distance, resolution,
                             radius_edge_ratio=1.6, mesher=None,
                             timeout_s=120):
    """Aorta+leaflet surface -> offset shell -> constrained tets -> hollow
    -> padding elements. Raises StageError naming the failing phase."""
    comps = [c for c in [AORTA] + list(LEAFLETS)
             if (heart.element_component == c).any()]
    if not comps:
        raise StageError("surface-extraction",
                         "heart mesh has no aorta or leaflet components")
    surf = extract_component_surface(heart, comps)
    rep = is_watertight_manifold(surf)
    if not rep.ok:
        raise StageError("surface-extraction",
                         "heart surface not watertight: %d boundary, %d "
                         "non-manifold edges" % (rep.boundary_edges,
                                                 rep.nonmanifold_edges))
    try:
        shell = offset_surface(surf, offset_distance, resolution)
    except Exception as e:
        raise StageError("offset-surface", str(e)) from e
    try:
        merged = merge_surfaces(surf, shell)
    except Exception as e:
        raise StageError("merge-surfaces", str(e)) from e
    max_volume = resolution ** 3 / (6.0 * np.sqrt(2.0))
    try:
        prelim = tetrahedralize_plc(merged, mesher, radius_edge_ratio,
                                    max_volume, timeout_s)
    except MesherError:
        raise
    except Exception as e:
        raise StageError("background-tetrahedralize", str(e)) from e
    prelim.element_component[:] = BACKGROUND
    try:
        hollowed = hollow(prelim, surf)
    except Exception as e:
        raise StageError("hollow", str(e)) from e
    try:
        bg = create_fake_elems(hollowed, surf)
    except Exception as e:
        raise StageError("fake-elements", str(e)) from e
    return bg
