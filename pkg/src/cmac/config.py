"""Pipeline configuration.

All tunables of the pipeline live here with their defaults. Geometry is
expressed in normalized crop coordinates: the cropped image volume spans
[0, 1]^3, so with the default 128-voxel crop at 1.25 mm isotropic spacing
one normalized unit corresponds to 160 mm (mm_per_unit). Length-valued
settings (edge targets, merge tolerances) are in normalized units;
min_volume is in mm^3 and is converted through mm_per_unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__("[%s] %s" % (stage, message))
        self.stage = stage


class MesherError(StageError):
    """The external tetrahedralizer failed, timed out or misbehaved."""


@dataclass
class PreprocessConfig:
    spacing_mm: float = 1.25
    crop_dims: tuple = (128, 128, 128)
    clip_lo: float = -158.0
    clip_hi: float = 864.0


@dataclass
class PostprocessConfig:
    iterations: int = 3
    min_volume_mm3: float = 5.0
    kernel_shape: tuple = (7, 7, 7)
    kernel_semiaxes: tuple = (3.0, 1.5, 1.5)
    upsample_factor: int = 3


@dataclass
class BgMeshConfig:
    offset_voxels: float = 10.0          # offset distance in voxel spacings
    edge_voxels: float = 2.0             # target background edge length, voxels
    radius_edge_ratio: float = 1.6


@dataclass
class DmtetConfig:
    n_opt: int = 100
    lr: float = 1e-2
    lambdas: tuple = (10.0, 1.0, 1.0, 0.5)
    eps_len: float = 0.1
    alpha_deg: float = 60.0
    # node offsets are clamped to this fraction of the node's smallest
    # altitude over incident background tets; below 0.25 no tet can fold
    max_shift_frac: float = 0.2
    # weld tolerance for coincident crossing vertices; kept tiny so cleanup
    # only fuses exact snap duplicates and cannot pinch thin sheets
    clean_tol: float = 1e-9
    # "le_gt": crossing edges have one value <= 0 and the other > 0 (the
    # printed rule). "lt_ge": one value < 0 and the other >= 0.
    crossing_convention: str = "le_gt"


@dataclass
class RemeshConfig:
    n_remesh: int = 15
    ratio: float = 0.8
    cluster_iters: int = 8
    # auto: remesh only when the direct tetrahedralization quality is below
    # jacobian_threshold; always/never force the choice.
    mode: str = "auto"


@dataclass
class AssembleConfig:
    stitch_tol: float = 1e-3
    jacobian_threshold: float = 0.2
    radius_edge_ratio: float | None = 1.6   # final-mesh quality switch
    timeout_s: int = 120


@dataclass
class PipelineConfig:
    heart: str = ""
    seg: str | None = None
    image: str | None = None
    threshold: float | None = None
    allow_threshold: bool = False
    out: str = "out"
    mesher: str | None = None
    mm_per_unit: float = 160.0
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    bgmesh: BgMeshConfig = field(default_factory=BgMeshConfig)
    dmtet: DmtetConfig = field(default_factory=DmtetConfig)
    remesh: RemeshConfig = field(default_factory=RemeshConfig)
    assemble: AssembleConfig = field(default_factory=AssembleConfig)

    def validate(self):
        d = self.dmtet
        if d.n_opt < 0 or d.lr <= 0:
            raise ConfigError("dmtet: n_opt must be >= 0 and lr > 0")
        if len(d.lambdas) != 4 or any(l < 0 for l in d.lambdas):
            raise ConfigError("dmtet: lambdas must be 4 non-negative weights")
        if d.eps_len <= 0 or not (0 < d.alpha_deg < 180):
            raise ConfigError("dmtet: bad eps_len/alpha_deg")
        if d.crossing_convention not in ("le_gt", "lt_ge"):
            raise ConfigError("dmtet: crossing_convention must be le_gt or lt_ge")
        r = self.remesh
        if not (0 < r.ratio <= 1):
            raise ConfigError("remesh: ratio must be in (0, 1]")
        if r.n_remesh < 0 or r.mode not in ("auto", "always", "never"):
            raise ConfigError("remesh: bad n_remesh/mode")
        if self.assemble.stitch_tol <= 0:
            raise ConfigError("assemble: stitch_tol must be > 0")
        rer = self.assemble.radius_edge_ratio
        if rer is not None and rer < 1.0:
            raise ConfigError("assemble: radius_edge_ratio must be >= 1")
        if self.bgmesh.offset_voxels <= 0 or self.bgmesh.edge_voxels <= 0:
            raise ConfigError("bgmesh: offsets must be > 0")
        p = self.postprocess
        if p.iterations < 1 or p.min_volume_mm3 < 0 or p.upsample_factor < 1:
            raise ConfigError("postprocess: bad iterations/min_volume/upsample")
        if any(s % 2 == 0 for s in p.kernel_shape):
            raise ConfigError("postprocess: kernel_shape components must be odd")
        if self.preprocess.clip_lo >= self.preprocess.clip_hi:
            raise ConfigError("preprocess: clip_lo must be < clip_hi")
        if self.mm_per_unit <= 0:
            raise ConfigError("mm_per_unit must be > 0")
        return self


_SUB = {
    "preprocess": PreprocessConfig,
    "postprocess": PostprocessConfig,
    "bgmesh": BgMeshConfig,
    "dmtet": DmtetConfig,
    "remesh": RemeshConfig,
    "assemble": AssembleConfig,
}


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, val in data.items():
        if key in _SUB:
            sub = getattr(cfg, key)
            for k, v in val.items():
                if not hasattr(sub, k):
                    raise ConfigError("unknown %s option %r" % (key, k))
                cur = getattr(sub, k)
                setattr(sub, k, tuple(v) if isinstance(cur, tuple) else v)
        elif hasattr(cfg, key):
            setattr(cfg, key, val)
        else:
            raise ConfigError("unknown config option %r" % key)
    return cfg.validate()


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return asdict(cfg)
