"""Multi-face 3D morphable-model reconstruction by analysis-by-synthesis.

All faces in an image share one perspective camera; each face carries a
parameter vector (center score, identity, expression, albedo, pose,
lighting) that decodes to a posed colored mesh, is shaded with spherical
harmonics, and is rasterized into the frame.  Fitting minimizes a hybrid
objective (masked photometric, perception features, weighted landmarks,
priors) with hand-written reverse-mode gradients.
"""

from .assets import BasisBundle, load_bundle, save_bundle, synth_bundle
from .camera import Intrinsics, Pose, intrinsic_matrix, project, rotation_from_axis_angle
from .detect import Heatmap, build_gt_heatmap, extract_peaks, peaks_to_face_centers
from .fitter import FitConfig, FitResult, Scene, fit_multiface, fit_stage, init_scene
from .losses import LossBreakdown, LossWeights, Observations, total_loss
from .morphable import DecodedFace, FaceParams, decode, project_landmarks
from .raster import RenderOutput, ScreenMesh, rasterize, render_scene
from .shading import shade, sh_basis

__all__ = [
    "BasisBundle", "load_bundle", "save_bundle", "synth_bundle",
    "Intrinsics", "Pose", "intrinsic_matrix", "project", "rotation_from_axis_angle",
    "Heatmap", "build_gt_heatmap", "extract_peaks", "peaks_to_face_centers",
    "FitConfig", "FitResult", "Scene", "fit_multiface", "fit_stage", "init_scene",
    "LossBreakdown", "LossWeights", "Observations", "total_loss",
    "DecodedFace", "FaceParams", "decode", "project_landmarks",
    "RenderOutput", "ScreenMesh", "rasterize", "render_scene",
    "shade", "sh_basis",
]

__version__ = "0.1.0"
