"""Implicit calcification surface on the background mesh.

The surface is the zero set of a nodal signed-distance-like field,
extracted by marching tetrahedra. Node positions and field values both
carry small optimized offsets; the crossing topology is computed once and
frozen (sign changes are prohibited), so optimization only slides
crossing vertices along their edges and shifts background nodes. Boundary
nodes are pinned at field value 0, which snaps contact vertices exactly
onto heart-mesh node positions.

The quality loss has four terms: uniform-Laplacian smoothness, deviation
of edge lengths from a target, deviation of corner angles from 60 degrees
(gated so mid-range angles are cheap), and a penalty on background node
displacement. Gradients are analytic, including through the crossing
interpolation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.special import expit

from .config import DmtetConfig
from .grid import sample_trilinear
from .isosurf import interp_crossing
from .isosurf import marching_tets as _mt_core
from .meshes import (TriSurface, drop_degenerate_and_flap_faces,
                     merge_close_vertices, signed_tet_volumes)

FAKE_SDF = -1e12
_RAD2DEG = 180.0 / np.pi


@dataclass
class NodalField:
    values: np.ndarray
    frozen_mask: np.ndarray

    def copy(self):
        return NodalField(self.values.copy(), self.frozen_mask.copy())


def interp_sdf(y_ca2, bg):
    """Per-node field: trilinear sample of the segmentation mapped 2y-1.

    Nodes outside the grid read the background value -1.
    """
    y = sample_trilinear(y_ca2, bg.mesh.vertices, mode="zero")
    vals = 2.0 * y - 1.0
    return NodalField(vals, np.zeros(bg.mesh.n_vertices, dtype=bool))


def modify_edge_cases(sdf, bg):
    """Pin boundary nodes to 0 and the padding node far negative."""
    out = sdf.copy()
    out.values[bg.boundary_nodes] = 0.0
    out.values[bg.fake_node] = FAKE_SDF
    out.frozen_mask[bg.boundary_nodes] = True
    out.frozen_mask[bg.fake_node] = True
    return out


def marching_tets(bg, sdf, convention="le_gt"):
    """Crossing surface of the field over the background mesh.

    Returns (TriSurface, CrossingTopology). Vertices on edges with a
    frozen zero endpoint coincide bit-exactly with that endpoint.
    """
    real = bg.real_tet_mask
    vols = signed_tet_volumes(bg.mesh.vertices, bg.mesh.tets[real])
    if (vols == 0.0).any():
        raise ValueError("degenerate tet in the background mesh")
    verts, topo = _mt_core(bg.mesh.vertices, bg.mesh.tets, sdf.values,
                           convention)
    return TriSurface(verts, topo.faces), topo


def _pinched_zero_edges(topo, values, n_nodes):
    """Mesh edges with zero values at both ends that more than two surface
    faces would share once snapped duplicates are welded."""
    ce = topo.crossing_edges
    if topo.faces.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    snapped = np.where(values[ce[:, 0]] == 0.0, ce[:, 0],
                       np.where(values[ce[:, 1]] == 0.0, ce[:, 1], -1))
    n_cross = len(ce)
    key = np.where(snapped >= 0, n_cross + snapped,
                   np.arange(n_cross, dtype=np.int64))
    kf = key[topo.faces]
    # welded-degenerate faces drop out in cleanup; they must not count
    ok = ((kf[:, 0] != kf[:, 1]) & (kf[:, 1] != kf[:, 2])
          & (kf[:, 0] != kf[:, 2]))
    kf = kf[ok]
    fe = np.vstack([kf[:, [0, 1]], kf[:, [1, 2]], kf[:, [2, 0]]])
    fe.sort(axis=1)
    uniq, cnt = np.unique(fe, axis=0, return_counts=True)
    bad = uniq[(cnt > 2) & (uniq[:, 0] >= n_cross)]
    return bad - n_cross


def repair_pinches(sdf, bg, convention="le_gt", max_rounds=10):
    """Fill sliver pockets that would pinch the surface along a zero edge.

    A mesh edge with both nodal values zero can end up shared by four
    surface faces: two contact caps and two skirts around a thin negative
    pocket in the fan of tets at the edge. Setting the pocket nodes
    positive removes the pinch; repeat until the extracted surface welds
    to a two-manifold. Returns (field, diagnostics).
    """
    out = sdf.copy()
    tets = bg.mesh.tets
    filled = 0
    rounds = 0
    bad = np.zeros((0, 2), dtype=np.int64)
    for rounds in range(1, max_rounds + 1):
        _, topo = _mt_core(bg.mesh.vertices, tets, out.values, convention)
        bad = _pinched_zero_edges(topo, out.values, bg.mesh.n_vertices)
        if bad.shape[0] == 0:
            break
        fill = set()
        for u, v in bad:
            rows = np.nonzero(((tets == u) | (tets == v)).sum(axis=1)
                              == 2)[0]
            for n in np.unique(tets[rows]):
                if n != u and n != v and out.values[n] < 0.0 \
                        and not out.frozen_mask[n]:
                    fill.add(int(n))
        if not fill:
            break
        idx = np.fromiter(fill, dtype=np.int64)
        out.values[idx] = 0.5
        filled += len(idx)
    return out, {"rounds": rounds, "filled": filled,
                 "unresolved": int(bad.shape[0])}


class DmtetProblem:
    """Fixed-topology loss/gradient evaluator for one optimization run."""

    def __init__(self, bg, sdf_mod, topo, cfg=None):
        self.cfg = cfg or DmtetConfig()
        self.bg = bg
        self.base_pos = bg.mesh.vertices
        self.base_sdf = sdf_mod.values
        self.frozen = sdf_mod.frozen_mask
        self.topo = topo
        self.faces = topo.faces
        self.edge_a = topo.crossing_edges[:, 0]
        self.edge_b = topo.crossing_edges[:, 1]
        nv = topo.n_vertices
        # unique undirected surface edges
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        self.surf_edges = np.unique(pairs[:, 0] * nv + pairs[:, 1])
        self.surf_edges = np.column_stack([self.surf_edges // nv,
                                           self.surf_edges % nv])
        # row-normalized vertex adjacency for the uniform Laplacian
        i = np.concatenate([self.surf_edges[:, 0], self.surf_edges[:, 1]])
        j = np.concatenate([self.surf_edges[:, 1], self.surf_edges[:, 0]])
        deg = np.bincount(i, minlength=nv).astype(np.float64)
        w = 1.0 / deg[i]
        self.adj = csr_matrix((w, (i, j)), shape=(nv, nv))
        self.adjT = self.adj.T.tocsr()
        # corner index triples (B = apex)
        f = self.faces
        self.cb = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        self.ca = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        self.cc = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])

    def surface_at(self, delta_v, delta_sdf):
        pos = self.base_pos + delta_v
        s = self.base_sdf + delta_sdf
        return interp_crossing(pos, s, self.topo), pos, s

    def eval_state(self, delta_v, delta_sdf):
        """Loss and gradients; frozen entries are masked before evaluating
        so their gradients are exactly zero."""
        cfg = self.cfg
        l0, l1, l2, l3 = cfg.lambdas
        dv = np.array(delta_v, dtype=np.float64)
        ds = np.array(delta_sdf, dtype=np.float64)
        dv[self.frozen] = 0.0
        ds[self.frozen] = 0.0
        verts, pos, s = self.surface_at(dv, ds)
        gverts = np.zeros_like(verts)
        diag = {"skipped_edges": 0, "skipped_corners": 0,
                "zero_laplacian": 0}

        # term 0: uniform Laplacian magnitude
        r = self.adj @ verts - verts
        rn = np.linalg.norm(r, axis=1)
        ok = rn > 1e-15
        diag["zero_laplacian"] = int((~ok).sum())
        term0 = float(rn[ok].sum())
        u = np.zeros_like(r)
        u[ok] = r[ok] / rn[ok, None]
        gverts += l0 * (self.adjT @ u - u)

        # term 1: edge lengths vs target
        i, j = self.surf_edges[:, 0], self.surf_edges[:, 1]
        dvec = verts[i] - verts[j]
        ln = np.linalg.norm(dvec, axis=1)
        eok = ln > 1e-15
        diag["skipped_edges"] = int((~eok).sum())
        resid = ln[eok] - cfg.eps_len
        ssum = float(resid @ resid)
        term1 = np.sqrt(ssum)
        if ssum > 1e-300:
            dlen = resid / term1
            gd = (dlen / ln[eok])[:, None] * dvec[eok]
            np.add.at(gverts, i[eok], l1 * gd)
            np.add.at(gverts, j[eok], -l1 * gd)

        # term 2: corner angles vs target, gated outside [10, 150] degrees
        ua = verts[self.ca] - verts[self.cb]
        wc = verts[self.cc] - verts[self.cb]
        cr = np.cross(ua, wc)
        sn = np.linalg.norm(cr, axis=1)
        cs = np.einsum("ij,ij->i", ua, wc)
        cok = sn > 1e-15
        diag["skipped_corners"] = int((~cok).sum())
        theta = np.degrees(np.arctan2(sn[cok], cs[cok]))
        sig_lo = expit(theta - 10.0)
        sig_hi = expit(theta - 150.0)
        sigma = (1.0 - sig_lo) + sig_hi
        dsigma = -sig_lo * (1.0 - sig_lo) + sig_hi * (1.0 - sig_hi)
        da = theta - cfg.alpha_deg
        tsum = float(np.sum(da * da * sigma))
        term2 = np.sqrt(tsum)
        if tsum > 1e-300:
            dtheta = (2.0 * da * sigma + da * da * dsigma) / (2.0 * term2)
            den = sn[cok] ** 2 + cs[cok] ** 2
            mhat = cr[cok] / sn[cok, None]
            dth_du = ((cs[cok, None] * np.cross(wc[cok], mhat)
                       - sn[cok, None] * wc[cok]) / den[:, None])
            dth_dw = ((cs[cok, None] * np.cross(mhat, ua[cok])
                       - sn[cok, None] * ua[cok]) / den[:, None])
            coef = (l2 * _RAD2DEG * dtheta)[:, None]
            np.add.at(gverts, self.ca[cok], coef * dth_du)
            np.add.at(gverts, self.cc[cok], coef * dth_dw)
            np.add.at(gverts, self.cb[cok], -coef * (dth_du + dth_dw))

        # term 3: background displacement magnitude
        dnorm = np.linalg.norm(dv, axis=1)
        term3 = float(dnorm.sum())
        g_dv = np.zeros_like(dv)
        nzero = dnorm > 1e-15
        g_dv[nzero] = l3 * dv[nzero] / dnorm[nzero, None]

        # backpropagate surface-vertex gradients through the crossing
        # interpolation (quotient rule in positions and field values)
        a, b = self.edge_a, self.edge_b
        sa, sb = s[a], s[b]
        dd = sb - sa
        pd = pos[a] - pos[b]
        g_sdf = np.zeros(len(s))
        ga = gverts * (sb / dd)[:, None]
        gb = gverts * (-sa / dd)[:, None]
        gsa = np.einsum("ij,ij->i", gverts, pd * (sb / dd ** 2)[:, None])
        gsb = np.einsum("ij,ij->i", gverts, -pd * (sa / dd ** 2)[:, None])
        gp = np.zeros_like(dv)
        np.add.at(gp, a, ga)
        np.add.at(gp, b, gb)
        np.add.at(g_sdf, a, gsa)
        np.add.at(g_sdf, b, gsb)
        g_dv += gp
        g_dv[self.frozen] = 0.0
        g_sdf[self.frozen] = 0.0
        loss = l0 * term0 + l1 * term1 + l2 * term2 + l3 * term3
        terms = (l0 * term0, l1 * term1, l2 * term2, l3 * term3)
        return loss, g_dv, g_sdf, {"terms": terms, **diag}


def dmtet_loss(problem, delta_v, delta_sdf):
    """(value, grad wrt node offsets, grad wrt field offsets)."""
    loss, g_dv, g_sdf, _ = problem.eval_state(delta_v, delta_sdf)
    return loss, g_dv, g_sdf


def _node_shift_limits(bg, frac):
    """Max per-node displacement: frac times the node's smallest altitude
    in any incident real tet. Volume is linear in each vertex, so if all
    four vertices of a tet move by under a quarter of their altitudes the
    tet cannot invert; frac below 0.25 keeps the deformed background
    embedding fold-free."""
    tets = bg.mesh.tets[bg.real_tet_mask]
    verts = bg.mesh.vertices
    vols = np.abs(signed_tet_volumes(verts, tets))
    limit = np.full(bg.mesh.n_vertices, np.inf)
    for i in range(4):
        opp = tets[:, [j for j in range(4) if j != i]]
        a = verts[opp[:, 1]] - verts[opp[:, 0]]
        b = verts[opp[:, 2]] - verts[opp[:, 0]]
        area = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
        alt = 3.0 * vols / np.maximum(area, 1e-300)
        np.minimum.at(limit, tets[:, i], alt)
    limit[~np.isfinite(limit)] = 0.0
    return frac * limit


def _clamp_shift(dv, limit):
    mag = np.linalg.norm(dv, axis=1)
    over = mag > limit
    if over.any():
        dv[over] *= (limit[over] / mag[over])[:, None]
    return dv


def _clamp_sign(base, delta):
    """Keep sign(base + delta) equal to sign(base), in the crossing sense
    (positive vs non-positive)."""
    new = base + delta
    flip = (new > 0) != (base > 0)
    delta[flip] = -0.99 * base[flip]
    return delta


def clean_mesh(s, tol=1e-9, prefer=None):
    """Merge near-coincident vertices and drop collapsed faces.

    Opposite-orientation duplicate face pairs cancel; same-orientation
    duplicates collapse to one. Unreferenced vertices are removed. A
    `prefer` mask protects chosen vertices (contact snaps) from having
    their exact position absorbed into a neighbor's.
    """
    verts, faces, _ = merge_close_vertices(s.vertices, s.faces, tol, prefer)
    faces, n_degen, n_cancel, n_dup = drop_degenerate_and_flap_faces(faces)
    used = np.unique(faces) if faces.size else np.zeros(0, dtype=np.int64)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    out = TriSurface(verts[used], remap[faces] if faces.size else faces)
    out.face_tags["cleaned"] = np.zeros(out.n_faces, dtype=np.int64)
    return out


def optimize(y_ca2, bg, n_opt=100, lr=1e-2, seed=0, cfg=None):
    """Adam loop over node and field offsets on a fixed crossing topology.

    Returns (cleaned TriSurface, info). info["status"] is "empty" when the
    segmentation produces no crossing, otherwise "ok" with a loss trace
    covering step 0 through n_opt.
    """
    cfg = cfg or DmtetConfig()
    sdf0 = interp_sdf(y_ca2, bg)
    sdfm = modify_edge_cases(sdf0, bg)
    sdfm, repair_diag = repair_pinches(sdfm, bg, cfg.crossing_convention)
    surf0, topo = marching_tets(bg, sdfm, cfg.crossing_convention)
    if topo.n_vertices == 0:
        return (TriSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)),
                {"status": "empty", "loss_trace": []})
    problem = DmtetProblem(bg, sdfm, topo, cfg)
    n = bg.mesh.n_vertices
    if n_opt == 0:
        # plain marching-tetrahedra baseline, no perturbation at all
        dv = np.zeros((n, 3))
        ds = np.zeros(n)
    else:
        rng = np.random.default_rng(seed)
        dv = rng.uniform(-1e-3, 1e-3, size=(n, 3))
        ds = rng.uniform(-1e-3, 1e-3, size=n)
        dv[sdfm.frozen_mask] = 0.0
        ds[sdfm.frozen_mask] = 0.0
        ds = _clamp_sign(sdfm.values, ds)
    limit = _node_shift_limits(bg, cfg.max_shift_frac)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m_v = np.zeros_like(dv)
    v_v = np.zeros_like(dv)
    m_s = np.zeros_like(ds)
    v_s = np.zeros_like(ds)
    trace = []
    for step in range(1, n_opt + 1):
        loss, g_dv, g_ds, diag = problem.eval_state(dv, ds)
        trace.append(loss)
        m_v = b1 * m_v + (1 - b1) * g_dv
        v_v = b2 * v_v + (1 - b2) * g_dv ** 2
        m_s = b1 * m_s + (1 - b1) * g_ds
        v_s = b2 * v_s + (1 - b2) * g_ds ** 2
        c1 = 1 - b1 ** step
        c2 = 1 - b2 ** step
        dv = dv - lr * (m_v / c1) / (np.sqrt(v_v / c2) + eps)
        ds = ds - lr * (m_s / c1) / (np.sqrt(v_s / c2) + eps)
        dv[sdfm.frozen_mask] = 0.0
        dv = _clamp_shift(dv, limit)
        ds[sdfm.frozen_mask] = 0.0
        ds = _clamp_sign(sdfm.values, ds)
    final_loss, _, _, diag = problem.eval_state(dv, ds)
    trace.append(final_loss)
    verts, _, sfin = problem.surface_at(dv, ds)
    raw = TriSurface(verts, topo.faces)
    snapped = (sfin[topo.crossing_edges[:, 0]] == 0.0) \
        | (sfin[topo.crossing_edges[:, 1]] == 0.0)
    cleaned = clean_mesh(raw, cfg.clean_tol, prefer=snapped)
    info = {"status": "ok", "loss_trace": trace, "diag": diag,
            "repair": repair_diag, "topology": topo, "raw_surface": raw,
            "delta_v": dv, "delta_sdf": ds, "problem": problem}
    return cleaned, info
