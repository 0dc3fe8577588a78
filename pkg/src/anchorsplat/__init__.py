"""Layered Gaussian avatars bound to the faces of a skinned body mesh."""
from .anchor import DEFAULT_CLASSES, ClassTable, GaussianLayer, ReferenceGaussians, Splats, reference_from_mesh
from .config import RunConfig
from .geometry import Pose, SkinnedMesh, build_adjacency
from .labels import FaceLabeling, refine
from .layering import LayeredAvatar, animate, reorder, transfer_layer
from .losses import LossWeights
from .metrics import chamfer, extract_mesh, penetration
from .optim import FitSchedule
from .pipeline import evaluate, render_avatar, run_pipeline
from .render import Camera, render

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CLASSES",
    "Camera",
    "ClassTable",
    "FaceLabeling",
    "FitSchedule",
    "GaussianLayer",
    "LayeredAvatar",
    "LossWeights",
    "Pose",
    "ReferenceGaussians",
    "RunConfig",
    "SkinnedMesh",
    "Splats",
    "animate",
    "build_adjacency",
    "chamfer",
    "evaluate",
    "extract_mesh",
    "penetration",
    "reference_from_mesh",
    "refine",
    "render",
    "render_avatar",
    "reorder",
    "run_pipeline",
    "transfer_layer",
]
