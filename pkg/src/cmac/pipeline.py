"""End-to-end driver: segmentation plus host mesh in, stitched mesh out.

run() wires the stages together: load/threshold the segmentation, repair
it against the heart wall, build the background shell mesh, extract and
optimize the calcification surface, optionally remesh it under contact
constraints, tetrahedralize, stitch into the host mesh and write the
quality report. All randomness flows from config.seed, and every output
file is deterministic for a fixed config (wall-clock timings go to a
separate timings.json).
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .assemble import (find_mesher, select_best_iterate, stitch,
                       tetrahedralize_plc)
from .bgmesh import generate_background_mesh
from .config import (ConfigError, StageError, config_from_dict,
                     config_to_dict)
from .dmtet import optimize
from .grid import (load_vgrid, normalize_to_unit, save_vgrid,
                   threshold_segment, upsample_nearest)
from .mesh_io import load_tet_mesh, save_surface, save_tet_mesh, write_vtk
from .meshes import CALCIFICATION, TetMesh
from .metrics import (cd_heart, dice, emit_report, scaled_jacobian,
                      surface_distances)
from .phantom import make_phantom
from .postprocess import post_process
from .remesh import constrained_remesh

log = logging.getLogger("cmac")


class StageClock:
    """Per-stage wall-clock accounting with one log line per stage."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.seconds = {}

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t
            self.seconds[name] = self.seconds.get(name, 0.0) + dt
            log.info("stage=%s elapsed=%.3fs", name, dt)

    def done(self):
        self.seconds["total"] = time.perf_counter() - self.t0
        return dict(self.seconds)


@dataclass
class RunResult:
    status: str
    report: dict = field(default_factory=dict)
    out_dir: str = None
    heart: TetMesh = None
    seg_raw: object = None
    seg_processed: object = None
    background: object = None
    dmtet_surface: object = None
    dmtet_info: dict = None
    iterates: list = None
    remesh_info: dict = None
    calc_surface: object = None
    calc_mesh: TetMesh = None
    final_mesh: TetMesh = None
    stitch_report: object = None
    selection: dict = None
    remeshed: bool = None
    timings: dict = field(default_factory=dict)
    mm_per_unit: float = 1.0


def _load_inputs(cfg, heart, seg):
    if heart is None:
        if not cfg.heart:
            raise ConfigError("config needs a heart mesh path")
        heart = load_tet_mesh(cfg.heart)
    if seg is None:
        if cfg.seg:
            seg = load_vgrid(cfg.seg)
        elif cfg.image:
            seg = load_vgrid(cfg.image)
        else:
            raise ConfigError("config needs a seg or image input")
    if seg.kind != "u8":
        if cfg.threshold is None:
            raise ConfigError("scalar image input requires a threshold")
        if not cfg.allow_threshold:
            raise ConfigError("thresholding a raw image requires "
                              "allow_threshold (intensities are not "
                              "assumed calibrated)")
        seg = threshold_segment(seg, cfg.threshold)
    y0, mpu = normalize_to_unit(seg)
    if abs(mpu - 1.0) < 1e-9:
        # already in normalized coordinates; physical scale from config
        mpu = cfg.mm_per_unit
    return heart, y0, mpu


def _out_path(res, name):
    return None if res.out_dir is None else os.path.join(res.out_dir, name)


def _finish(res, cfg, clock, status, tet_success, dice_value=None, sd=None,
            cdh=None, sj=None, sj_calc=None, extra=None):
    res.status = status
    res.timings = clock.done()
    info = {"status": status, "seed": int(cfg.seed),
            "remeshed": res.remeshed,
            "config": config_to_dict(cfg)}
    if res.selection is not None:
        info["selection"] = {k: res.selection[k]
                             for k in ("selected", "min_scaled_jacobian")}
    if res.stitch_report is not None:
        info["components_kept"] = res.stitch_report.components_kept
        info["components_dropped"] = res.stitch_report.components_dropped
    if extra:
        info.update(extra)
    res.report = emit_report(
        _out_path(res, "report.json"),
        dice_value=dice_value,
        hd=None if sd is None else sd["hd"],
        cd=None if sd is None else sd["cd"],
        cd_heart_value=cdh,
        cd_heart_empty=(status == "empty"),
        min_scaled_jacobian=None if sj is None else sj["min"],
        mean_scaled_jacobian=None if sj is None else sj["mean"],
        merged_nodes=(None if res.stitch_report is None
                      else res.stitch_report.merged_node_count),
        tet_success=tet_success,
        timings=res.timings,
        mm_per_unit=res.mm_per_unit,
        extra=info if sj_calc is None else
              dict(info, min_scaled_jacobian_calc=sj_calc["min"],
                   mean_scaled_jacobian_calc=sj_calc["mean"]))
    return res


def run(config, heart=None, seg=None):
    """Execute the pipeline; returns a RunResult whose .report is the
    quality report dict (also written to <out>/report.json).

    heart and seg may be passed as in-memory objects to skip file IO;
    otherwise they are loaded from the paths in the config.
    """
    cfg = config.validate()
    res = RunResult(status="running", out_dir=cfg.out or None)
    if res.out_dir:
        os.makedirs(res.out_dir, exist_ok=True)
    clock = StageClock()
    try:
        return _run_stages(cfg, heart, seg, clock, res)
    except StageError as e:
        log.error("pipeline failed: %s", e)
        _finish(res, cfg, clock, "failed", False,
                extra={"failed_stage": e.stage, "error": str(e)})
        raise


def _run_stages(cfg, heart, seg, clock, res):
    with clock.stage("load"):
        heart, y0, mpu = _load_inputs(cfg, heart, seg)
    res.heart, res.seg_raw, res.mm_per_unit = heart, y0, mpu

    with clock.stage("postprocess"):
        y_ca2 = post_process(y0, heart, cfg.postprocess.iterations,
                             cfg.postprocess, mpu)
        res.seg_processed = y_ca2
        if res.out_dir:
            save_vgrid(y_ca2, _out_path(res, "postprocessed.vgrid"))
    n_vox = int(np.count_nonzero(y_ca2.data))
    log.info("postprocess voxels=%d", n_vox)
    d3 = dice(upsample_nearest(y0, cfg.postprocess.upsample_factor), y_ca2)
    if n_vox == 0:
        return _finish(res, cfg, clock, "empty", False, dice_value=d3,
                       cdh=0.0)

    exe = find_mesher(cfg.mesher)
    h = float(y0.spacing[0])
    with clock.stage("background-mesh"):
        bg = generate_background_mesh(
            heart, cfg.bgmesh.offset_voxels * h, cfg.bgmesh.edge_voxels * h,
            cfg.bgmesh.radius_edge_ratio, mesher=exe,
            timeout_s=cfg.assemble.timeout_s)
        res.background = bg
        if res.out_dir:
            save_tet_mesh(bg.mesh, _out_path(res, "background.tmesh"))
    log.info("background nodes=%d tets=%d (fake %d)", bg.mesh.n_vertices,
             bg.mesh.n_tets, len(bg.fake_tets))

    with clock.stage("dmtet"):
        calc0, oinfo = optimize(y_ca2, bg, cfg.dmtet.n_opt, cfg.dmtet.lr,
                                seed=cfg.seed, cfg=cfg.dmtet)
    res.dmtet_surface, res.dmtet_info = calc0, oinfo
    if oinfo["status"] == "empty":
        return _finish(res, cfg, clock, "empty", False, dice_value=d3,
                       cdh=0.0)
    with clock.stage("write"):
        if res.out_dir:
            save_surface(calc0, _out_path(res, "dmtet_surface.tsurf"))
    log.info("dmtet verts=%d faces=%d loss %.4g -> %.4g", calc0.n_vertices,
             calc0.n_faces, oinfo["loss_trace"][0], oinfo["loss_trace"][-1])

    direct = None
    mode = cfg.remesh.mode
    rer = cfg.assemble.radius_edge_ratio
    if mode in ("auto", "never"):
        with clock.stage("tetrahedralize"):
            try:
                dmesh = tetrahedralize_plc(calc0, exe, rer, None,
                                           cfg.assemble.timeout_s)
                direct = (dmesh, scaled_jacobian(dmesh)["min"])
            except StageError as e:
                if mode == "never":
                    raise
                log.info("direct tetrahedralization rejected (%s)", e)
    use_direct = mode == "never" or (
        mode == "auto" and direct is not None
        and direct[1] >= cfg.assemble.jacobian_threshold)

    if use_direct:
        res.remeshed = False
        calc_surface, calc_mesh = calc0, direct[0]
        res.selection = {"selected": 0, "min_scaled_jacobian": direct[1],
                         "iterates": [{"iterate": 0, "status": "ok",
                                       "min_scaled_jacobian": direct[1]}]}
    else:
        res.remeshed = True
        with clock.stage("remesh"):
            iterates, rinfo = constrained_remesh(
                calc0, heart, cfg.remesh.n_remesh, cfg.remesh.ratio,
                cfg.remesh.cluster_iters, cfg.seed)
        res.iterates, res.remesh_info = iterates, rinfo
        with clock.stage("write"):
            if res.out_dir:
                for i, it in enumerate(iterates):
                    save_surface(it, _out_path(res,
                                               "remesh_%02d.tsurf" % i))
        with clock.stage("tetrahedralize"):
            calc_surface, calc_mesh, sel = select_best_iterate(
                iterates, exe, rer, None, cfg.assemble.timeout_s)
        res.selection = sel
        log.info("remesh iterates=%d selected=%d", len(iterates),
                 sel["selected"])
    res.calc_surface, res.calc_mesh = calc_surface, calc_mesh
    with clock.stage("write"):
        if res.out_dir:
            save_surface(calc_surface, _out_path(res, "calc_surface.tsurf"))
            save_tet_mesh(calc_mesh, _out_path(res, "calc_mesh.tmesh"))

    with clock.stage("stitch"):
        final, srep = stitch(calc_mesh, heart, cfg.assemble.stitch_tol)
    res.final_mesh, res.stitch_report = final, srep
    log.info("stitch merged=%d kept=%d dropped=%d", srep.merged_node_count,
             srep.components_kept, srep.components_dropped)

    with clock.stage("metrics"):
        sj = scaled_jacobian(final)
        calc_tets = final.tets[final.element_component == CALCIFICATION]
        if calc_tets.shape[0]:
            calc_part = TetMesh(final.vertices, calc_tets)
            sj_calc = scaled_jacobian(calc_part)
            sj_calc.pop("values")
        else:
            sj_calc = None
        sd = surface_distances(calc_surface, calc0, seed=cfg.seed)
        cdh = cd_heart(calc_surface, heart, seed=cfg.seed)
    sj.pop("values")

    with clock.stage("write"):
        if res.out_dir:
            save_tet_mesh(final, _out_path(res, "final.tmesh"))
            write_vtk(final, _out_path(res, "final.vtk"))
    return _finish(res, cfg, clock, "ok", True, dice_value=d3, sd=sd,
                   cdh=cdh, sj=sj, sj_calc=sj_calc)


# ---------------------------------------------------------------------------
# batch benchmarking over generated phantoms

def _bench_case(config, k):
    kind = "sphere-shell" if k % 2 == 0 else "tube-leaflets"
    gap = 2.0 if (k // 2) % 2 else 0.0
    cfg = config_from_dict(config_to_dict(config))
    cfg.seed = config.seed + k
    if config.out:
        cfg.out = os.path.join(config.out, "case_%03d" % k)
    ph = make_phantom(kind, cfg.seed, gap_voxels=gap)
    t0 = time.perf_counter()
    try:
        r = run(cfg, heart=ph.heart, seg=ph.calcification)
        return {"case": k, "kind": kind, "gap": gap, "status": r.status,
                "timings": r.timings,
                "elapsed": time.perf_counter() - t0}
    except Exception as e:            # crash isolation between cases
        return {"case": k, "kind": kind, "gap": gap, "status": "error",
                "error": str(e), "timings": {},
                "elapsed": time.perf_counter() - t0}


def bench(config, cases, workers=1):
    """Run the pipeline over generated phantoms; per-stage wall-clock
    summary across cases."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda k: _bench_case(config, k),
                                 range(cases)))
    else:
        rows = [_bench_case(config, k) for k in range(cases)]
    stages = {}
    for row in rows:
        for name, sec in row["timings"].items():
            stages.setdefault(name, []).append(sec)
    summary = {name: {"mean": float(np.mean(v)), "min": float(np.min(v)),
                      "max": float(np.max(v)), "sum": float(np.sum(v))}
               for name, v in sorted(stages.items())}
    n_ok = sum(r["status"] in ("ok", "empty") for r in rows)
    return {"cases": rows, "stages": summary, "n_cases": cases,
            "n_ok": n_ok}
