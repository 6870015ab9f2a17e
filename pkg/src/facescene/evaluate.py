"""Alignment metrics (sparse/dense NME, CED), synthetic scenes, cost benchmark.

The NME normalizer is the square root of the ground-truth landmark
bounding-box area, the convention the AFLW2000-3D comparisons rely on;
dense NME projects every mesh vertex.  The synthetic-scene generator draws
scenes from the engine's own forward model so recovery tests have exactly
renderable ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import camera, raster, shading
from .assets import BasisBundle
from .camera import Intrinsics
from .fitter import Scene
from .losses import LossWeights, Observations, total_loss
from .morphable import FaceParams
from .shading import WHITE_FURNACE_L0

YAW_BUCKETS = ("[0,30)", "[30,60)", "[60,90]")


class ZeroNormError(ValueError):
    pass


def nme(pred: np.ndarray, gt: np.ndarray, norm: float) -> float:
    """Mean landmark distance normalized by `norm`, in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"point sets must match: {pred.shape} vs {gt.shape}")
    if norm <= 0:
        raise ZeroNormError(f"normalizer must be positive, got {norm}")
    d = np.linalg.norm(pred - gt, axis=1)
    return float(d.mean() / norm * 100.0)


def landmark_bbox_norm(gt: np.ndarray) -> float:
    """sqrt(w * h) of the ground-truth landmark bounding box."""
    gt = np.asarray(gt)
    w = float(gt[:, 0].max() - gt[:, 0].min())
    h = float(gt[:, 1].max() - gt[:, 1].min())
    return float(np.sqrt(w * h))


def ced_curve(errors, thresholds) -> list[tuple[float, float]]:
    """(threshold, fraction of errors <= threshold) pairs."""
    errors = np.asarray(list(errors), dtype=np.float64)
    if errors.size == 0:
        raise ValueError("errors must be nonempty")
    return [(float(t), float((errors <= t).mean())) for t in thresholds]


def yaw_degrees(rot: np.ndarray) -> float:
    """Yaw angle of an axis-angle rotation, degrees."""
    r = camera.rotation_from_axis_angle(rot)
    return float(np.degrees(np.arctan2(r[0, 2], r[2, 2])))


def yaw_bucket(yaw_deg: float) -> str:
    a = abs(yaw_deg)
    if a < 30.0:
        return YAW_BUCKETS[0]
    if a < 60.0:
        return YAW_BUCKETS[1]
    return YAW_BUCKETS[2]


@dataclass
class EvalRecord:
    nme68: float
    nme_dense: float | None
    yaw_bucket: str


def evaluate_scene(
    fitted: Scene,
    gt_landmarks: np.ndarray,
    bundle: BasisBundle,
    gt_scene: Scene | None = None,
) -> list[EvalRecord]:
    """Per-face sparse (and, given a ground-truth scene, dense) NME records."""
    records = []
    for k, fp in enumerate(fitted.faces):
        uv_fit, _ = camera.project(_decode_points(fp, bundle, fitted.intr), fp.pose, fitted.intr)
        lm_fit = uv_fit[:, bundle.landmark_indices].T
        norm = landmark_bbox_norm(gt_landmarks[k])
        sparse = nme(lm_fit, gt_landmarks[k], norm)
        dense = None
        bucket = YAW_BUCKETS[0]
        if gt_scene is not None:
            gp = gt_scene.faces[k]
            uv_gt, _ = camera.project(_decode_points(gp, bundle, gt_scene.intr), gp.pose, gt_scene.intr)
            dense = nme(uv_fit.T, uv_gt.T, norm)
            bucket = yaw_bucket(yaw_degrees(gp.pose.rot))
        records.append(EvalRecord(nme68=sparse, nme_dense=dense, yaw_bucket=bucket))
    return records


def _decode_points(fp: FaceParams, bundle: BasisBundle, intr: Intrinsics) -> np.ndarray:
    shape = bundle.mean_shape + bundle.id_basis @ fp.id + bundle.exp_basis @ fp.exp
    return shape.reshape(3, bundle.vertex_count)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthScene:
    image: np.ndarray          # (h, w, 3) float, exactly renderable from `scene`
    skin_mask: np.ndarray      # (h, w) bool
    landmarks: np.ndarray      # (n, 68, 2)
    centers: list              # per-face (c_x, c_y)
    scene: Scene               # ground truth parameters
    boxes: list                # per-face projected boxes (x0, y0, x1, y1)


class PlacementError(RuntimeError):
    pass


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def synth_scene(
    seed: int,
    n_faces: int,
    image_size: tuple[int, int],
    bundle: BasisBundle,
    focal_224: float = camera.DEFAULT_FOCAL_224,
    max_yaw_deg: float = 80.0,
    coeff_limit: float = 2.0,
    max_iou: float = 0.3,
    max_retries: int = 1000,
) -> SynthScene:
    """Random multi-face scene rendered from the model itself.

    Coefficients are clipped normal draws within |coeff_limit|; yaw is
    uniform within +-max_yaw_deg; placements retry until projected boxes
    overlap below max_iou.  Rendering the returned scene reproduces the
    returned image bit for bit.
    """
    if not (1 <= n_faces <= 10):
        raise ValueError("n_faces must be within 1..10")
    w, h = image_size
    intr = Intrinsics.for_frame(w, h, focal_224)
    rng = np.random.default_rng(np.random.SeedSequence([7203, seed, n_faces, w, h]))
    radius = float(
        np.linalg.norm(
            bundle.shape_points() - bundle.shape_points().mean(axis=1, keepdims=True), axis=0
        ).max()
    )

    hi = min(0.42, 0.9 / np.sqrt(n_faces))
    lo = max(0.15, hi / 2.2)
    faces, boxes, centers = [], [], []
    retries = 0
    while len(faces) < n_faces:
        if retries > max_retries:
            raise PlacementError(
                f"could not place {n_faces} faces with IoU < {max_iou} after {max_retries} retries"
            )
        frac = rng.uniform(lo, hi)
        d_z = 2.0 * radius * intr.f_g / (frac * min(w, h))
        rp = frac * min(w, h) / 2.0
        margin = rp * 1.15 + 2.0
        if 2 * margin >= min(w, h):
            retries += 1
            continue
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        yaw = np.radians(rng.uniform(-max_yaw_deg, max_yaw_deg))

        fp = FaceParams(
            center_score=1.0,
            id=np.clip(rng.standard_normal(bundle.n_id), -coeff_limit, coeff_limit),
            exp=np.clip(rng.standard_normal(bundle.n_exp), -coeff_limit, coeff_limit),
            alb=np.clip(rng.standard_normal(bundle.n_alb), -coeff_limit, coeff_limit),
            pose=camera.Pose(
                rot=np.array([0.0, yaw, 0.0]),
                trans_code=np.array([rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), d_z]),
                face_center=np.array([cx, cy]),
            ),
            illum=_random_light(rng),
        )
        mesh, _ = raster.shade_and_project(fp, bundle, intr)
        u, v = mesh.verts[:, 0], mesh.verts[:, 1]
        box = (float(u.min()), float(v.min()), float(u.max()), float(v.max()))
        if box[0] < 0 or box[1] < 0 or box[2] > w or box[3] > h:
            retries += 1
            continue
        if any(_box_iou(box, other) >= max_iou for other in boxes):
            retries += 1
            continue
        faces.append(fp)
        boxes.append(box)
        centers.append((cx, cy))

    scene = Scene(intr=intr, faces=faces)
    render = raster.render_scene(scene, bundle)
    landmarks = np.stack(
        [raster.shade_and_project(fp, bundle, intr)[0].verts[bundle.landmark_indices] for fp in faces]
    )
    return SynthScene(
        image=render.rgb,
        skin_mask=render.mask.copy(),
        landmarks=landmarks,
        centers=centers,
        scene=scene,
        boxes=boxes,
    )


def _random_light(rng) -> np.ndarray:
    sh = np.zeros((9, 3))
    sh[0] = WHITE_FURNACE_L0 * rng.uniform(0.80, 1.02)
    sh[0] *= 1.0 + 0.05 * rng.standard_normal(3)
    direction = 0.10 * WHITE_FURNACE_L0 * rng.standard_normal(3)
    sh[1:4] = direction[:, None] * (1.0 + 0.1 * rng.standard_normal((3, 3)))
    sh[4:] = 0.02 * WHITE_FURNACE_L0 * rng.standard_normal((5, 3))
    return sh


# ---------------------------------------------------------------------------
# shared-decoder benchmark


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample of an (h, w, 3) image."""
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = img[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
    b = img[np.ix_(y0, x1)] * (1 - fy) * fx
    c = img[np.ix_(y1, x0)] * fy * (1 - fx)
    d = img[np.ix_(y1, x1)] * fy * fx
    return a + b + c + d


CROP_SIZE = 224


def _joint_pass(synth: SynthScene, bundle: BasisBundle) -> None:
    obs = Observations(image=synth.image, skin_mask=synth.skin_mask, landmarks=synth.landmarks)
    total_loss(synth.scene, bundle, obs, LossWeights(), compute_grads=False)


def _per_face_pass(synth: SynthScene, bundle: BasisBundle, radius: float) -> None:
    intr224 = Intrinsics(f_g=camera.DEFAULT_FOCAL_224, w=CROP_SIZE, h=CROP_SIZE)
    # crop fills the frame up to a 10% pad on each side, as a rectified face would
    d_z = 2.0 * radius * intr224.f_g / ((1.0 / 1.2) * CROP_SIZE)
    for k, fp in enumerate(synth.scene.faces):
        x0, y0, x1, y1 = (int(round(v)) for v in synth.boxes[k])
        x0, y0 = max(0, x0), max(0, y0)
        x1 = min(synth.image.shape[1], max(x1, x0 + 2))
        y1 = min(synth.image.shape[0], max(y1, y0 + 2))
        crop = resize_bilinear(synth.image[y0:y1, x0:x1], CROP_SIZE, CROP_SIZE)
        face = fp.copy()
        face.pose.face_center = np.array([CROP_SIZE / 2.0, CROP_SIZE / 2.0])
        face.pose.trans_code = np.array([0.0, 0.0, d_z])
        one = Scene(intr=intr224, faces=[face])
        mesh, _ = raster.shade_and_project(face, bundle, intr224)
        lms = mesh.verts[bundle.landmark_indices][None]
        obs = Observations(image=crop, skin_mask=None, landmarks=lms)
        total_loss(one, bundle, obs, LossWeights(), compute_grads=False)


def bench_shared_decoder(
    scene_sizes,
    bundle: BasisBundle,
    image_size: tuple[int, int] = (512, 512),
    runs: int = 5,
    seed: int = 0,
) -> list[tuple[int, float, float]]:
    """Median wall-clock of one joint scene pass vs n single-face passes.

    The per-face pipeline emulates the conventional route: crop, resize to a
    fixed 224 frame, then a single-face forward pass at crop resolution.
    Returns rows (n, t_joint_seconds, t_perface_seconds).
    """
    radius = float(
        np.linalg.norm(
            bundle.shape_points() - bundle.shape_points().mean(axis=1, keepdims=True), axis=0
        ).max()
    )
    rows = []
    for n in scene_sizes:
        synth = synth_scene(seed, n, image_size, bundle)
        _joint_pass(synth, bundle)  # warm-up
        _per_face_pass(synth, bundle, radius)
        tj, tp = [], []
        for _ in range(max(5, runs)):
            t0 = time.perf_counter()
            _joint_pass(synth, bundle)
            tj.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            _per_face_pass(synth, bundle, radius)
            tp.append(time.perf_counter() - t0)
        rows.append((int(n), float(np.median(tj)), float(np.median(tp))))
    return rows


def bench_csv(rows) -> str:
    lines = ["n,t_joint,t_perface"]
    lines += ["%d,%.6f,%.6f" % row for row in rows]
    return "\n".join(lines) + "\n"


def linear_r2(xs, ys) -> float:
    """Coefficient of determination of the best-fit line."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    slope, icpt = np.polyfit(xs, ys, 1)
    pred = slope * xs + icpt
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
