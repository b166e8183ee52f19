"""Calcification meshing: embed a voxel segmentation into a labeled
tetrahedral heart mesh as a node-stitched, watertight calcification mesh."""

from .config import (ConfigError, MesherError, PipelineConfig, StageError,
                     config_from_dict, load_config)
from .grid import VoxelGrid, load_vgrid, save_vgrid
from .mesh_io import (load_surface, load_tet_mesh, save_surface,
                      save_tet_mesh)
from .meshes import TetMesh, TriSurface, is_watertight_manifold
from .metrics import (cd_heart, dice, emit_report, scaled_jacobian,
                      surface_distances)
from .phantom import Phantom, make_phantom
from .pipeline import RunResult, bench, run

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "MesherError", "Phantom", "PipelineConfig", "RunResult",
    "StageError", "TetMesh", "TriSurface", "VoxelGrid", "bench", "cd_heart",
    "config_from_dict", "dice", "emit_report", "is_watertight_manifold",
    "load_config", "load_surface", "load_tet_mesh", "load_vgrid",
    "make_phantom", "run", "save_surface", "save_tet_mesh", "save_vgrid",
    "scaled_jacobian", "surface_distances",
]
