"""Evaluation metrics: overlap, surface distances, element quality, reports.

Surface distance conventions: cd and hd compare area-uniform point samples
of the two surfaces (point-to-sample); the calcification-to-heart distance
uses exact point-to-triangle distances so merged contact samples score 0.
"""

import json
import os

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .meshes import AORTA, LEAFLETS, extract_component_surface

REPORT_SCHEMA = "cmac-report/1"


def dice(y, yhat):
    """Overlap coefficient of two binary grids; 1 when both are empty."""
    a = (np.asarray(y.data if hasattr(y, "data") else y) > 0)
    b = (np.asarray(yhat.data if hasattr(yhat, "data") else yhat) > 0)
    if a.shape != b.shape:
        raise ValueError("dice inputs have mismatched shapes")
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def _as_samples(obj, n_samples, seed):
    if hasattr(obj, "faces"):
        return geometry.sample_surface(obj.vertices, obj.faces, n_samples,
                                       seed)
    return np.atleast_2d(np.asarray(obj, dtype=np.float64))


def surface_distances(a, b, n_samples=10000, seed=0, hd_percentile=None):
    """{"hd", "cd"} between two surfaces or point clouds.

    cd is the average of the two directional mean nearest-neighbor
    distances, hd the maximum over both directions (or a percentile when
    hd_percentile is given).
    """
    pa = _as_samples(a, n_samples, seed)
    pb = _as_samples(b, n_samples, seed)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("empty geometry in surface_distances")
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    cd = 0.5 * (float(da.mean()) + float(db.mean()))
    both = np.concatenate([da, db])
    if hd_percentile is None:
        hd = float(both.max())
    else:
        hd = float(np.percentile(both, hd_percentile))
    return {"hd": hd, "cd": cd}


def heart_surface(heart):
    comps = [c for c in [AORTA] + list(LEAFLETS)
             if (heart.element_component == c).any()]
    if not comps:
        raise ValueError("heart mesh has no aorta or leaflet components")
    return extract_component_surface(heart, comps)


def cd_heart(calc_surface, heart, n_samples=10000, seed=0):
    """Mean distance from calcification surface samples to the heart wall.

    Exact point-to-triangle distances against the aorta+leaflet boundary;
    an empty calcification surface scores 0 by convention.
    """
    if calc_surface is None or calc_surface.n_faces == 0:
        return 0.0
    hs = heart_surface(heart)
    pts = geometry.sample_surface(calc_surface.vertices, calc_surface.faces,
                                  n_samples, seed)
    d = geometry.point_surface_distances(pts, hs.vertices, hs.faces)
    return float(d.mean())


def scaled_jacobian(mesh, n_bins=20):
    """Shape quality per tet: 6*sqrt(2)*V / (RMS edge length)^3.

    Equals 1 on the regular tetrahedron, 0 for flat elements, negative for
    inverted ones. Elements with component code 0 (fake padding tets) are
    skipped.
    """
    sel = mesh.element_component != 0
    tets = mesh.tets[sel]
    if tets.shape[0] == 0:
        raise ValueError("no real elements")
    v = mesh.vertices
    a, b, c, d = (v[tets[:, k]] for k in range(4))
    vol = np.einsum("ij,ij->i", b - a, np.cross(c - a, d - a)) / 6.0
    e = np.stack([b - a, c - a, d - a, c - b, d - b, d - c])
    ms = np.mean(np.sum(e * e, axis=2), axis=0)
    rms = np.sqrt(ms)
    sj = 6.0 * np.sqrt(2.0) * vol / np.maximum(rms, 1e-300) ** 3
    hist, edges = np.histogram(np.clip(sj, -1, 1), bins=n_bins,
                               range=(-1.0, 1.0))
    return {"min": float(sj.min()), "mean": float(sj.mean()),
            "histogram": hist.tolist(), "bin_edges": edges.tolist(),
            "values": sj}


def emit_report(path=None, dice_value=None, hd=None, cd=None,
                cd_heart_value=None, cd_heart_empty=False,
                min_scaled_jacobian=None, mean_scaled_jacobian=None,
                merged_nodes=None, tet_success=False, timings=None,
                mm_per_unit=1.0, extra=None):
    """Assemble the JSON quality report; distance fields arrive in
    normalized units and are reported in mm.

    Wall-clock timings are written to a sibling timings.json rather than
    into the report itself so that reruns with the same config produce a
    byte-identical report file.
    """
    def _mm(x):
        return None if x is None else float(x) * mm_per_unit

    report = {
        "schema": REPORT_SCHEMA,
        "dice": None if dice_value is None else float(dice_value),
        "hd_mm": _mm(hd),
        "cd_mm": _mm(cd),
        "cd_heart_mm": _mm(cd_heart_value),
        "cd_heart_empty": bool(cd_heart_empty),
        "min_scaled_jacobian": (None if min_scaled_jacobian is None
                                else float(min_scaled_jacobian)),
        "mean_scaled_jacobian": (None if mean_scaled_jacobian is None
                                 else float(mean_scaled_jacobian)),
        "merged_nodes": None if merged_nodes is None else int(merged_nodes),
        "tet_success": bool(tet_success),
        "mm_per_unit": float(mm_per_unit),
        "cd_definition": "point-to-sample",
        "cd_heart_definition": "point-to-surface",
    }
    if extra:
        report.update(extra)
    if path is not None:
        with open(path, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
        if timings is not None:
            tpath = os.path.join(os.path.dirname(os.path.abspath(path)),
                                 "timings.json")
            with open(tpath, "w") as fh:
                json.dump({k: float(t) for k, t in timings.items()}, fh,
                          indent=1, sort_keys=True)
                fh.write("\n")
    return report
