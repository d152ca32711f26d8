"""Texture reconstruction with global alignment of texture fragments."""

from .align import (GaugeDeficiencyError, SparseSystem, Solution, assemble_system, build_A_k,
                    correction_matrix, corrected_point, solve_corrections)
from .geometry import (DepthMap, FaceAdjacency, Intrinsics, Keyframe, Mesh, Pose, back_project,
                       face_adjacency, is_visible, project)
from .pipeline import PipelineConfig, run_pipeline
from .raster import rasterize, rasterize_depth

__version__ = "0.1.0"
