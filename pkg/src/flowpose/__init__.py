"""flowpose: render-and-compare 6D object pose estimation.

Coarse hypothesis sampling over SO(3), dense-flow-driven refinement through a
differentiable weighted PnP layer, multi-scale cascade updates, RGB-D depth
refinement, and BOP-style evaluation, with pluggable flow/score providers.
"""

from .geom import Camera, Pose, lift, project, rotation_geodesic_distance
from .mesh import Mesh, load_mesh
from .render import BBox, RenderOutput, adjust_intrinsics, rasterize, translation_from_bbox

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Pose",
    "Mesh",
    "BBox",
    "RenderOutput",
    "lift",
    "project",
    "rotation_geodesic_distance",
    "load_mesh",
    "rasterize",
    "adjust_intrinsics",
    "translation_from_bbox",
    "__version__",
]
