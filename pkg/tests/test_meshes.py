"""Tet mesh and triangle surface containers and their topology checks."""

import numpy as np
import pytest

from cmac.meshes import (TetMesh, TriSurface, boundary_faces, compact_surface,
                         drop_degenerate_and_flap_faces,
                         extract_component_surface, is_watertight_manifold,
                         merge_close_vertices, merge_surfaces,
                         offset_surface, orient_tets_positive, point_inside,
                         signed_tet_volumes, split_components, surface_edges)

from conftest import icosphere

UNIT_TET_V = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                       [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def single_tet_surface():
    verts = UNIT_TET_V.copy()
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriSurface(verts, faces)


def test_signed_volume_flips_with_vertex_order():
    tets = np.array([[0, 1, 2, 3]])
    v = signed_tet_volumes(UNIT_TET_V, tets)
    assert abs(v[0] - 1.0 / 6.0) < 1e-15
    swapped = np.array([[1, 0, 2, 3]])
    assert abs(signed_tet_volumes(UNIT_TET_V, swapped)[0] + 1.0 / 6.0) < 1e-15
    fixed = orient_tets_positive(UNIT_TET_V, swapped)
    assert signed_tet_volumes(UNIT_TET_V, fixed)[0] > 0


def test_two_glued_tets_expose_six_boundary_faces():
    verts = np.vstack([UNIT_TET_V, [[1.0, 1.0, 1.0]]])
    tets = orient_tets_positive(verts, np.array([[0, 1, 2, 3],
                                                 [1, 2, 3, 4]]))
    faces = boundary_faces(tets, len(verts))
    assert len(faces) == 6
    surf = TriSurface(verts, faces)
    assert is_watertight_manifold(surf).ok


def test_five_tet_cube_surface_has_twelve_triangles():
    bits = [(i, j, k) for k in (0, 1) for j in (0, 1) for i in (0, 1)]
    verts = np.array([[i, j, k] for i, j, k in bits], dtype=np.float64)

    def vid(i, j, k):
        return i + 2 * j + 4 * k

    tets = np.array([
        [vid(1, 0, 0), vid(0, 0, 0), vid(1, 1, 0), vid(1, 0, 1)],
        [vid(0, 1, 0), vid(0, 0, 0), vid(0, 1, 1), vid(1, 1, 0)],
        [vid(0, 0, 1), vid(0, 0, 0), vid(1, 0, 1), vid(0, 1, 1)],
        [vid(1, 1, 1), vid(1, 1, 0), vid(0, 1, 1), vid(1, 0, 1)],
        [vid(0, 0, 0), vid(1, 1, 0), vid(0, 1, 1), vid(1, 0, 1)],
    ])
    tets = orient_tets_positive(verts, tets)
    assert abs(signed_tet_volumes(verts, tets).sum() - 1.0) < 1e-12
    faces = boundary_faces(tets, len(verts))
    assert len(faces) == 12
    assert is_watertight_manifold(TriSurface(verts, faces)).ok


def test_missing_face_yields_three_boundary_edges():
    surf = single_tet_surface()
    open_surf = TriSurface(surf.vertices, surf.faces[:-1])
    rep = is_watertight_manifold(open_surf)
    assert not rep.ok
    assert rep.boundary_edges == 3


def test_three_faces_on_one_edge_are_flagged_non_manifold():
    surf = single_tet_surface()
    extra = np.vstack([surf.vertices, [[2.0, 2.0, 2.0]]])
    faces = np.vstack([surf.faces, [[1, 2, 4]]])
    rep = is_watertight_manifold(TriSurface(extra, faces))
    assert not rep.ok
    assert rep.nonmanifold_edges >= 1


def test_duplicate_vertices_are_reported():
    surf = single_tet_surface()
    verts = np.vstack([surf.vertices, surf.vertices[0:1] + 1e-12])
    rep = is_watertight_manifold(TriSurface(verts, surf.faces), dup_tol=1e-9)
    assert rep.duplicate_vertices >= 1


def box_surface(lo, hi):
    v = np.array([[lo, lo, lo], [hi, lo, lo], [hi, hi, lo], [lo, hi, lo],
                  [lo, lo, hi], [hi, lo, hi], [hi, hi, hi], [lo, hi, hi]],
                 dtype=np.float64)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                  [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriSurface(v, f)


def test_point_membership_matches_the_box_oracle():
    lo, hi = 0.25, 0.75
    surf = box_surface(lo, hi)
    assert is_watertight_manifold(surf).ok
    rng = np.random.default_rng(77)
    pts = rng.uniform(0.0, 1.0, (1000, 3))
    inside = point_inside(surf, pts)
    oracle = np.all((pts > lo) & (pts < hi), axis=1)
    assert np.array_equal(inside, oracle)


def test_offset_surface_grows_a_sphere_by_the_requested_distance():
    r, d, res = 0.25, 0.15, 0.05
    sphere = icosphere(r, (0.5, 0.5, 0.5), subdiv=2)
    grown = offset_surface(sphere, d, res)
    rep = is_watertight_manifold(grown)
    assert rep.ok
    radii = np.linalg.norm(grown.vertices - 0.5, axis=1)
    assert np.abs(radii - (r + d)).max() < 2.0 * res
    # the offset surface strictly encloses the input
    assert point_inside(grown, sphere.vertices).all()
    with pytest.raises(ValueError):
        offset_surface(sphere, 0.5 * res, res)


def test_merging_disjoint_closed_surfaces_concatenates_them():
    a = single_tet_surface()
    b = TriSurface(a.vertices + 5.0, a.faces.copy())
    merged = merge_surfaces(a, b)
    assert len(merged.faces) == 8
    assert len(merged.vertices) == 8
    assert is_watertight_manifold(merged).ok  # closed, just two shells
    parts = split_components(merged)
    assert len(parts) == 2


def test_merging_intersecting_surfaces_is_rejected():
    a = single_tet_surface()
    b = TriSurface(a.vertices + 0.1, a.faces.copy())
    with pytest.raises(ValueError, match="intersect"):
        merge_surfaces(a, b)


def test_vertex_welding_respects_preference_mask():
    # three near-duplicate vertices within tolerance of originals
    a = single_tet_surface()
    verts = np.vstack([a.vertices, a.vertices[[1, 2, 3]] + 1e-12])
    faces = np.vstack([a.faces, [[4, 5, 6]]])
    prefer = np.zeros(len(verts), dtype=bool)
    prefer[4:] = True
    v2, f2, vmap = merge_close_vertices(verts, faces, 1e-9, prefer=prefer)
    assert len(v2) == 4
    assert vmap.shape == (7,)
    # the preferred (jittered) copies provide the merged coordinates
    for src in (4, 5, 6):
        assert np.array_equal(v2[vmap[src]], verts[src])


def test_degenerate_and_cancelling_faces_are_dropped():
    faces = np.array([[0, 1, 2], [0, 2, 1], [3, 3, 4], [5, 6, 7],
                      [5, 6, 7]])
    kept, n_degen, n_cancel, n_dup = drop_degenerate_and_flap_faces(faces)
    assert n_degen == 1
    assert n_cancel == 2
    assert n_dup == 1
    assert kept.tolist() == [[5, 6, 7]]


def test_surface_edges_and_compaction():
    surf = single_tet_surface()
    edges = surface_edges(surf.faces)
    assert len(edges) == 6
    padded = TriSurface(np.vstack([surf.vertices, [[9.0, 9.0, 9.0]]]),
                        surf.faces)
    slim = compact_surface(padded)
    assert len(slim.vertices) == 4
    assert is_watertight_manifold(slim).ok


def test_component_surface_reuses_mesh_vertices_verbatim():
    verts = np.vstack([UNIT_TET_V, UNIT_TET_V + 3.0])
    tets = orient_tets_positive(
        verts, np.array([[0, 1, 2, 3], [4, 5, 6, 7]]))
    mesh = TetMesh(verts, tets, element_component=np.array([1, 5]))
    surf = extract_component_surface(mesh, [1])
    assert len(surf.faces) == 4
    tags = surf.vertex_tags["mesh_vertex"]
    assert np.array_equal(np.sort(tags), np.arange(4))
    for i, t in enumerate(tags):
        assert np.array_equal(surf.vertices[i], verts[t])
    both = extract_component_surface(mesh, [1, 5])
    assert len(both.faces) == 8
