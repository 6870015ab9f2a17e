"""Stage-wise gradient fitting of all faces in an image under the shared camera.

Fitting replaces a trained encoder: every face's parameter vector is
optimized jointly against the composited render.  Stage one aligns pose and
shape with the landmark loss plus regularizers; stage two switches on the
full photometric objective.  The optimizer is Adam (bias-corrected first and
second moments) over the packed parameter vector, with the face depth
optimized in log space so it stays positive, and the pose block given a
larger step because its curvature is pixel-scaled rather than unit-variance.

Face centers (c_x, c_y) stay frozen at their detected values; the in-plane
offsets d_x, d_y absorb any residual center error, which is exactly what the
translation decoding is parameterized for.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import detect
from .assets import BasisBundle
from .camera import Intrinsics
from .detect import Heatmap, OutOfFrameCenterError
from .losses import LossBreakdown, LossWeights, Observations, total_loss
from .morphable import FaceParams

STAGE1_TERMS = frozenset({"lan", "norm", "var"})
STAGE2_TERMS = frozenset({"pix", "per", "lan", "norm", "var"})


class FitDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class NoFacesFoundError(ValueError):
    pass


@dataclass
class Scene:
    """Shared intrinsics plus the faces being reconstructed in one image."""

    intr: Intrinsics
    faces: list

    def __post_init__(self):
        for fp in self.faces:
            if fp.pose.trans_code[2] <= 0:
                raise ValueError("every face must start in front of the camera (d_z > 0)")

    def copy(self) -> "Scene":
        return Scene(self.intr, [fp.copy() for fp in self.faces])


@dataclass
class FitConfig:
    stage1_iters: int = 300
    stage2_iters: int = 500
    step_size: float = 0.01
    decay_factor: float = 0.1
    decay_at: float = 0.75          # fraction of the stage at which the step decays
    convergence_tol: float = 1e-6
    convergence_window: int = 20
    pose_step_scale: float = 10.0
    depth_floor: float = 0.05
    face_frame_fraction: float = 0.4  # projected face size for the default depth
    default_depth: float | None = None
    shared_light: bool = False
    peak_threshold: float = detect.DEFAULT_THRESHOLD
    max_faces: int = 32
    threads: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")


@dataclass
class FitResult:
    scene: Scene
    breakdown: LossBreakdown
    stage1_trace: list
    stage2_trace: list


def _model_radius(bundle: BasisBundle) -> float:
    pts = bundle.shape_points()
    return float(np.linalg.norm(pts - pts.mean(axis=1, keepdims=True), axis=0).max())


def _interocular_model(bundle: BasisBundle) -> float:
    pts = bundle.shape_points()[:, bundle.landmark_indices]  # (3, 68)
    right = pts[:, 36:42].mean(axis=1)
    left = pts[:, 42:48].mean(axis=1)
    # in-plane separation is what the pinhole scales by 1/z
    return float(np.hypot(right[0] - left[0], right[1] - left[1]))


def default_depth(bundle: BasisBundle, intr: Intrinsics, frame_fraction: float) -> float:
    radius = max(_model_radius(bundle), 1e-9)
    return 2.0 * radius * intr.f_g / (frame_fraction * min(intr.w, intr.h))


def init_scene(
    centers,
    landmarks,
    intr: Intrinsics,
    bundle: BasisBundle,
    config: FitConfig | None = None,
) -> Scene:
    """Mean faces at the detected centers, depth scaled from the landmark spread.

    With landmarks, each depth comes from matching the projected mean-face
    inter-ocular distance to the observed one; otherwise the configured
    default depth (or the frame-fraction rule) applies.
    """
    cfg = config or FitConfig()
    faces = []
    fallback = cfg.default_depth or default_depth(bundle, intr, cfg.face_frame_fraction)
    iod_model = _interocular_model(bundle)
    for k, (cx, cy) in enumerate(centers):
        if not (0.0 <= cx <= intr.w and 0.0 <= cy <= intr.h):
            raise OutOfFrameCenterError(f"center ({cx}, {cy}) outside {intr.w}x{intr.h} frame")
        if landmarks is not None and iod_model > 1e-12:
            gt = np.asarray(landmarks[k])
            right = gt[36:42].mean(axis=0)
            left = gt[42:48].mean(axis=0)
            iod_px = float(np.hypot(*(right - left)))
            depth = intr.f_g * iod_model / max(iod_px, 1e-9)
        else:
            depth = fallback
        depth = max(depth, cfg.depth_floor)
        faces.append(FaceParams.zeros(bundle, center=(cx, cy), depth=depth))
    return Scene(intr=intr, faces=faces)


def _slot_layout(bundle: BasisBundle):
    dim = 1 + bundle.n_id + bundle.n_exp + bundle.n_alb + 6 + 27
    pose0 = 1 + bundle.n_id + bundle.n_exp + bundle.n_alb
    illum0 = pose0 + 6
    dz = pose0 + 5
    return dim, pose0, illum0, dz


def fit_stage(
    scene: Scene,
    bundle: BasisBundle,
    obs: Observations,
    terms,
    iters: int,
    config: FitConfig | None = None,
    weights: LossWeights | None = None,
    extractor=None,
) -> tuple[Scene, list]:
    """Run one optimization stage; returns the updated scene and a loss trace.

    Trace rows are (iteration, LossBreakdown); the last row is evaluated at
    the final parameters.  A non-finite total aborts with the trace attached.
    """
    cfg = config or FitConfig()
    weights = weights or LossWeights()
    scene = scene.copy()
    if iters == 0 or not scene.faces:
        return scene, []

    dim, pose0, illum0, dz = _slot_layout(bundle)
    n = len(scene.faces)
    centers = [fp.pose.face_center.copy() for fp in scene.faces]

    step_scale = np.ones(dim)
    step_scale[pose0 : pose0 + 6] = cfg.pose_step_scale
    step_scale = np.tile(step_scale, n)
    dz_slots = np.array([f * dim + dz for f in range(n)])

    x = np.concatenate([fp.pack() for fp in scene.faces])
    y = x.copy()
    y[dz_slots] = np.log(x[dz_slots])

    m1 = np.zeros_like(y)
    m2 = np.zeros_like(y)
    trace: list[tuple[int, LossBreakdown]] = []
    decay_iter = int(np.floor(cfg.decay_at * iters))
    step = cfg.step_size

    def rebuild(vec):
        return [
            FaceParams.unpack(vec[f * dim : (f + 1) * dim], bundle, centers[f])
            for f in range(n)
        ]

    for it in range(iters):
        scene.faces = rebuild(x)
        breakdown, grads, _ = total_loss(
            scene, bundle, obs, weights, terms=terms, extractor=extractor,
            threads=cfg.threads,
        )
        trace.append((it, breakdown))
        if not np.isfinite(breakdown.total):
            raise FitDivergedError(f"total loss became {breakdown.total} at iteration {it}", trace)
        if len(trace) > cfg.convergence_window:
            prev = trace[-1 - cfg.convergence_window][1].total
            if abs(breakdown.total - prev) < cfg.convergence_tol * max(abs(prev), 1e-12):
                break

        g = np.concatenate(grads)
        if cfg.shared_light and n > 1:
            ill = np.stack([g[f * dim + illum0 : (f + 1) * dim] for f in range(n)])
            mean_ill = ill.mean(axis=0)
            for f in range(n):
                g[f * dim + illum0 : (f + 1) * dim] = mean_ill
        g[dz_slots] *= x[dz_slots]  # chain rule through d_z = exp(y)

        if it == decay_iter and it > 0:
            step = cfg.step_size * cfg.decay_factor
        t = it + 1
        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g
        m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g * g
        m1_hat = m1 / (1.0 - cfg.beta1**t)
        m2_hat = m2 / (1.0 - cfg.beta2**t)
        y = y - step * step_scale * m1_hat / (np.sqrt(m2_hat) + cfg.adam_eps)
        y[dz_slots] = np.maximum(y[dz_slots], np.log(cfg.depth_floor))
        x = y.copy()
        x[dz_slots] = np.exp(y[dz_slots])

    scene.faces = rebuild(x)
    final, _, _ = total_loss(
        scene, bundle, obs, weights, terms=terms, extractor=extractor, threads=cfg.threads
    )
    trace.append((len(trace), final))
    if not np.isfinite(final.total):
        raise FitDivergedError(f"total loss became {final.total} after the last step", trace)
    return scene, trace


def fit_multiface(
    image: np.ndarray,
    heatmap_or_centers,
    landmarks,
    skin_mask,
    bundle: BasisBundle,
    intr: Intrinsics,
    config: FitConfig | None = None,
    weights: LossWeights | None = None,
    extractor=None,
) -> FitResult:
    """Full inference-by-fitting: detect centers, init, stage 1, stage 2.

    All faces are optimized against the same composited render, so occlusions
    between faces are handled by the joint z-buffer pass.
    """
    cfg = config or FitConfig()
    if isinstance(heatmap_or_centers, Heatmap):
        peaks = detect.extract_peaks(heatmap_or_centers, cfg.peak_threshold, cfg.max_faces)
        centers = detect.peaks_to_face_centers(peaks, heatmap_or_centers.stride)
    else:
        centers = list(heatmap_or_centers)
    if not centers:
        raise NoFacesFoundError("no face centers detected")

    scene = init_scene(centers, landmarks, intr, bundle, cfg)
    obs = Observations(
        image=image, skin_mask=skin_mask, landmarks=landmarks, centers=centers,
    )
    scene, tr1 = fit_stage(scene, bundle, obs, STAGE1_TERMS, cfg.stage1_iters, cfg, weights, extractor)
    scene, tr2 = fit_stage(scene, bundle, obs, STAGE2_TERMS, cfg.stage2_iters, cfg, weights, extractor)
    final = tr2[-1][1] if tr2 else (tr1[-1][1] if tr1 else LossBreakdown())
    return FitResult(scene=scene, breakdown=final, stage1_trace=tr1, stage2_trace=tr2)


# ---------------------------------------------------------------------------
# serialization


def save_scene(path, scene: Scene) -> None:
    """Text scene file: 'f_g w h' header, then per face the packed parameters
    followed by (c_x, c_y).  Floats use %.17g so the round trip is exact."""
    with open(path, "w") as fh:
        fh.write("%.17g %d %d\n" % (scene.intr.f_g, scene.intr.w, scene.intr.h))
        for fp in scene.faces:
            vals = list(fp.pack()) + list(fp.pose.face_center)
            fh.write(" ".join("%.17g" % v for v in vals) + "\n")


def load_scene(path, bundle: BasisBundle) -> Scene:
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    f_g, w, h = lines[0].split()
    intr = Intrinsics(f_g=float(f_g), w=int(w), h=int(h))
    dim, *_ = _slot_layout(bundle)
    faces = []
    for ln in lines[1:]:
        vals = np.array([float(tok) for tok in ln.split()])
        if vals.size != dim + 2:
            raise ValueError(f"scene row has {vals.size} values, expected {dim + 2}")
        faces.append(FaceParams.unpack(vals[:dim], bundle, vals[dim:]))
    return Scene(intr=intr, faces=faces)


def trace_to_csv(trace) -> str:
    """Loss trace as CSV rows (iter, c, pix, per, lan, norm, var, total)."""
    buf = io.StringIO()
    buf.write("iter,c,pix,per,lan,norm,var,total\n")
    for it, row in trace:
        buf.write("%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n" % ((it,) + row.as_row()))
    return buf.getvalue()
