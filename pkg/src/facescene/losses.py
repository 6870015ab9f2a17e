"""Hybrid fitting objective: center focal loss, masked photometric l_{2,1},
perception features, weighted landmark reprojection, coefficient priors,
albedo flattening, and their weighted total with full parameter gradients.

The total is
    L = lc*Lc + lpix*Lpix + lper*Lper + llan*Llan + Lreg,
    Lreg = lnorm*Lnorm + lvar*Lvar,
with the weight defaults wired to the published operating point
(1, 100, 0.01, 0.1; 1.0, 0.8, 0.0017; 1e-4; 1e-3; gamma 2; mouth/nose 20).
Gradients are assembled by chaining the module backward passes:
rasterizer -> shading -> decode -> camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camera, morphable, raster, shading
from .assets import BasisBundle
from .detect import Heatmap, build_gt_heatmap
from .morphable import DecodedFace, DecodedFaceGrad, FaceParams
from .raster import RenderOutput, ScreenMesh

ALL_TERMS = frozenset({"c", "pix", "per", "lan", "norm", "var"})


class EmptyGtError(ValueError):
    pass


class ProbabilityRangeError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class LossWeights:
    """Objective weights; defaults are the published operating point."""

    lambda_c: float = 1.0
    lambda_pix: float = 100.0
    lambda_per: float = 0.01
    lambda_lan: float = 0.1
    lambda_norm: float = 1e-4
    lambda_var: float = 1e-3
    lambda_id: float = 1.0
    lambda_exp: float = 0.8
    lambda_alb: float = 0.0017
    gamma: float = 2.0
    omega_mouthnose: float = 20.0
    omega_other: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass
class LossBreakdown:
    c: float = 0.0
    pix: float = 0.0
    per: float = 0.0
    lan: float = 0.0
    norm: float = 0.0
    var: float = 0.0
    reg: float = 0.0
    total: float = 0.0

    def as_row(self) -> tuple[float, ...]:
        return (self.c, self.pix, self.per, self.lan, self.norm, self.var, self.total)


def combine(weights: LossWeights, **terms) -> LossBreakdown:
    """Assemble a breakdown from raw term values, honoring the invariant
    total = lc*c + lpix*pix + lper*per + llan*lan + reg."""
    b = LossBreakdown(**{k: float(v) for k, v in terms.items() if k in vars(LossBreakdown())})
    b.reg = weights.lambda_norm * b.norm + weights.lambda_var * b.var
    b.total = (
        weights.lambda_c * b.c
        + weights.lambda_pix * b.pix
        + weights.lambda_per * b.per
        + weights.lambda_lan * b.lan
        + b.reg
    )
    return b


# ---------------------------------------------------------------------------
# individual terms


def center_focal_loss(pred: Heatmap, gt_centers, gamma: float = 2.0) -> float:
    """Focal-reweighted pixelwise logistic loss over the center grid.

    gt_centers are grid (row, col) cells; exactly those cells are positive.
    """
    cells = list(gt_centers)
    if not cells:
        raise EmptyGtError("at least one ground-truth center is required")
    p = pred.grid
    if p.min() <= 0.0 or p.max() >= 1.0:
        raise ProbabilityRangeError("heatmap values must lie strictly inside (0, 1)")
    h, w = p.shape
    positive = np.zeros((h, w), dtype=bool)
    for row, col in cells:
        if not (0 <= row < h and 0 <= col < w):
            raise EmptyGtError(f"center cell ({row}, {col}) outside {h}x{w} grid")
        positive[row, col] = True
    p_hat = np.where(positive, p, 1.0 - p)
    n = len(cells)
    return float(-np.sum((1.0 - p_hat) ** gamma * np.log(p_hat)) / n)


def pixel_l21_loss(rendered: RenderOutput, target: np.ndarray, skin_mask: np.ndarray) -> float:
    return _pixel_l21(rendered, target, skin_mask, want_grad=False)[0]


def pixel_l21_with_grad(rendered, target, skin_mask):
    return _pixel_l21(rendered, target, skin_mask, want_grad=True)


def _pixel_l21(rendered: RenderOutput, target, skin_mask, want_grad):
    if target.shape != rendered.rgb.shape:
        raise ShapeMismatchError(f"target {target.shape} vs render {rendered.rgb.shape}")
    if skin_mask.shape != rendered.mask.shape:
        raise ShapeMismatchError(f"mask {skin_mask.shape} vs render {rendered.mask.shape}")
    m = skin_mask & rendered.mask
    count = int(m.sum())
    grad = np.zeros_like(rendered.rgb) if want_grad else None
    if count == 0:
        return 0.0, grad
    diff = rendered.rgb[m] - target[m]
    norms = np.sqrt((diff * diff).sum(axis=1))
    value = float(norms.sum() / count)
    if want_grad:
        safe = np.maximum(norms, 1e-12)
        grad[m] = diff / (safe[:, None] * count)
    return value, grad


class GrayPatchExtractor:
    """Documented stand-in for a face-recognition embedder.

    Mean-pools the grayscale crop onto a grid x grid raster and unit-
    normalizes.  Nothing identity-aware about it; it exists so the
    perception-loss plumbing and gradients are real and testable.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid

    def _bins(self, n: int) -> np.ndarray:
        return np.minimum((np.arange(n) * self.grid) // max(n, 1), self.grid - 1)

    def features(self, crop: np.ndarray) -> np.ndarray:
        pooled, _ = self._pool(crop)
        norm = np.linalg.norm(pooled)
        return pooled / norm if norm > 1e-12 else pooled

    def _pool(self, crop):
        gray = crop.mean(axis=2)
        hc, wc = gray.shape
        rb, cb = self._bins(hc), self._bins(wc)
        pooled = np.zeros((self.grid, self.grid))
        counts = np.zeros((self.grid, self.grid))
        np.add.at(pooled, (rb[:, None], cb[None, :]), gray)
        np.add.at(counts, (rb[:, None], cb[None, :]), 1.0)
        counts = np.maximum(counts, 1.0)
        return (pooled / counts).ravel(), counts

    def features_backward(self, crop: np.ndarray, grad_feat: np.ndarray) -> np.ndarray:
        pooled, counts = self._pool(crop)
        norm = np.linalg.norm(pooled)
        if norm <= 1e-12:
            return np.zeros_like(crop)
        f = pooled / norm
        g_pool = (grad_feat - f * float(f @ grad_feat)) / norm
        g_cells = g_pool.reshape(self.grid, self.grid) / counts
        hc, wc = crop.shape[:2]
        rb, cb = self._bins(hc), self._bins(wc)
        per_pixel = g_cells[rb[:, None], cb[None, :]]
        return np.repeat(per_pixel[..., None], 3, axis=2) / 3.0


def perception_loss(rendered_crops, target_crops, extractor) -> float:
    """Mean squared feature distance over per-face crops."""
    if len(rendered_crops) != len(target_crops):
        raise ShapeMismatchError("crop lists differ in length")
    if not rendered_crops:
        return 0.0
    total = 0.0
    for rc, tc in zip(rendered_crops, target_crops):
        if rc.shape != tc.shape:
            raise ShapeMismatchError(f"crop shapes differ: {rc.shape} vs {tc.shape}")
        d = extractor.features(rc) - extractor.features(tc)
        total += float(d @ d)
    return total / len(rendered_crops)


def landmark_loss(projected, gt, weights, visible=None) -> float:
    return _landmark(projected, gt, weights, visible, want_grad=False)[0]


def landmark_with_grad(projected, gt, weights, visible=None):
    return _landmark(projected, gt, weights, visible, want_grad=True)


def _landmark(projected, gt, weights, visible, want_grad):
    projected = np.asarray(projected, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if projected.shape != gt.shape:
        raise ShapeMismatchError(f"projected {projected.shape} vs gt {gt.shape}")
    if projected.ndim == 2:
        projected, gt = projected[None], gt[None]
        if visible is not None:
            visible = np.asarray(visible)[None]
    n, m, _ = projected.shape
    weights = np.asarray(weights, dtype=np.float64).reshape(m)
    if visible is None:
        visible = np.ones((n, m), dtype=bool)
    grad = np.zeros_like(projected) if want_grad else None
    total = 0.0
    for k in range(n):
        vis = visible[k]
        sw = float(weights[vis].sum())
        if sw <= 0.0:
            continue
        d = projected[k] - gt[k]
        sq = (d * d).sum(axis=1)
        total += float((weights[vis] * sq[vis]).sum() / sw)
        if want_grad:
            grad[k][vis] = (2.0 / (n * sw)) * weights[vis, None] * d[vis]
    return total / n, grad


def coefficient_prior(params_list, weights: LossWeights) -> float:
    """Mean-face prior: per-face weighted squared norms of the coefficient blocks."""
    n = len(params_list)
    if n == 0:
        return 0.0
    total = 0.0
    for p in params_list:
        total += (
            weights.lambda_id * float(p.id @ p.id)
            + weights.lambda_exp * float(p.exp @ p.exp)
            + weights.lambda_alb * float(p.alb @ p.alb)
        )
    return total / n


def albedo_flatten_loss(decoded_faces, skin_region) -> float:
    return _flatten(decoded_faces, skin_region, want_grad=False)[0]


def albedo_flatten_with_grad(decoded_faces, skin_region):
    return _flatten(decoded_faces, skin_region, want_grad=True)


def _flatten(decoded_faces, skin_region, want_grad):
    region = np.asarray(skin_region)
    if region.size == 0:
        raise ValueError("skin region is empty")
    n = len(decoded_faces)
    if n == 0:
        return 0.0, []
    grads = []
    total = 0.0
    s = region.size
    for dec in decoded_faces:
        a = dec.albedo[:, region]  # (3, S)
        mean = a.mean(axis=1, keepdims=True)
        centered = a - mean
        total += float((centered * centered).mean(axis=1).sum())
        if want_grad:
            g = np.zeros_like(dec.albedo)
            g[:, region] += (2.0 / (s * n)) * centered
            grads.append(g)
    return total / n, grads


# ---------------------------------------------------------------------------
# total objective


@dataclass
class Observations:
    """Everything measured about one image that the objective compares against."""

    image: np.ndarray                       # (h, w, 3) target in [0, 1]
    skin_mask: np.ndarray | None = None     # (h, w) bool; None = everywhere
    landmarks: np.ndarray | None = None     # (n, 68, 2)
    landmark_visible: np.ndarray | None = None
    centers: list | None = None             # per-face (c_x, c_y) pixels
    heatmap: Heatmap | None = None          # externally produced center scores


@dataclass
class TotalLossAux:
    render: RenderOutput
    meshes: list
    decoded: list
    landmarks_px: np.ndarray | None
    crop_boxes: list


def crop_boxes_from_meshes(meshes, w, h, pad: float = 0.1, min_size: int = 4):
    """Per-face integer boxes (x0, y0, x1, y1) from projected bounds, padded."""
    boxes = []
    for mesh in meshes:
        u, v = mesh.verts[:, 0], mesh.verts[:, 1]
        x0, x1 = float(u.min()), float(u.max())
        y0, y1 = float(v.min()), float(v.max())
        px, py = pad * (x1 - x0), pad * (y1 - y0)
        ix0, iy0 = max(0, int(np.floor(x0 - px))), max(0, int(np.floor(y0 - py)))
        ix1, iy1 = min(w, int(np.ceil(x1 + px))), min(h, int(np.ceil(y1 + py)))
        if ix1 - ix0 < min_size or iy1 - iy0 < min_size:
            boxes.append(None)
        else:
            boxes.append((ix0, iy0, ix1, iy1))
    return boxes


def total_loss(
    scene,
    bundle: BasisBundle,
    obs: Observations,
    weights: LossWeights | None = None,
    terms=None,
    extractor=None,
    crop_boxes=None,
    threads: int = 1,
    compute_grads: bool = True,
):
    """Weighted objective over a whole scene plus gradients per face.

    Returns (LossBreakdown, [flat gradient vectors in FaceParams.pack order],
    TotalLossAux).  Inactive terms contribute exactly zero.  The center term
    needs an externally produced heatmap and ground-truth centers; it carries
    no face-parameter gradient.  compute_grads=False skips the backward chain
    (forward cost only, as in the shared-decoder benchmark).
    """
    weights = weights or LossWeights()
    terms = ALL_TERMS if terms is None else frozenset(terms)
    extractor = extractor or GrayPatchExtractor()
    intr = scene.intr
    faces = scene.faces
    n = len(faces)

    meshes, decoded = [], []
    for fp in faces:
        mesh, dec = raster.shade_and_project(fp, bundle, intr)
        meshes.append(mesh)
        decoded.append(dec)
    # rasterization only pays off when a photometric term consumes it
    needs_render = bool(terms & {"pix", "per"}) and n > 0
    render = raster.rasterize(meshes, intr, threads=threads) if needs_render else None

    lm_idx = bundle.landmark_indices
    landmarks_px = np.stack([m.verts[lm_idx] for m in meshes]) if n else None

    values = {k: 0.0 for k in ("c", "pix", "per", "lan", "norm", "var")}
    grad_rgb = np.zeros((intr.h, intr.w, 3)) if needs_render else None
    lan_grad = None
    flat_grads = None

    if "c" in terms and obs.heatmap is not None and obs.centers:
        gt_cells = []
        r = obs.heatmap.stride
        gw, gh = obs.heatmap.grid.shape[1], obs.heatmap.grid.shape[0]
        gt_grid = build_gt_heatmap(obs.centers, (gw * r, gh * r), r)
        gt_cells = [tuple(c) for c in np.argwhere(gt_grid.grid == 1.0)]
        values["c"] = center_focal_loss(obs.heatmap, gt_cells, gamma=weights.gamma)

    if "pix" in terms and n:
        skin = obs.skin_mask if obs.skin_mask is not None else np.ones(render.mask.shape, bool)
        if compute_grads:
            values["pix"], g = pixel_l21_with_grad(render, obs.image, skin)
            grad_rgb += weights.lambda_pix * g
        else:
            values["pix"] = pixel_l21_loss(render, obs.image, skin)

    boxes = crop_boxes
    if "per" in terms and n:
        if boxes is None:
            boxes = crop_boxes_from_meshes(meshes, intr.w, intr.h)
        live = [b for b in boxes if b is not None]
        per_total = 0.0
        for b in boxes:
            if b is None:
                continue
            x0, y0, x1, y1 = b
            rc = render.rgb[y0:y1, x0:x1]
            tc = obs.image[y0:y1, x0:x1]
            fr, ft = extractor.features(rc), extractor.features(tc)
            d = fr - ft
            per_total += float(d @ d)
            if compute_grads:
                g_crop = extractor.features_backward(rc, 2.0 * d / n)
                grad_rgb[y0:y1, x0:x1] += weights.lambda_per * g_crop
        values["per"] = per_total / n
    if boxes is None:
        boxes = [None] * n

    if "lan" in terms and obs.landmarks is not None and n:
        w68 = bundle.landmark_weights(weights.omega_mouthnose, weights.omega_other)
        values["lan"], lan_grad = landmark_with_grad(
            landmarks_px, obs.landmarks, w68, obs.landmark_visible
        )

    if "norm" in terms and n:
        values["norm"] = coefficient_prior(faces, weights)

    if "var" in terms and n:
        values["var"], flat_grads = albedo_flatten_with_grad(decoded, bundle.skin_region)

    # ----- backward chain -----
    if not compute_grads:
        breakdown = combine(weights, **values)
        aux = TotalLossAux(
            render=render, meshes=meshes, decoded=decoded,
            landmarks_px=landmarks_px, crop_boxes=boxes,
        )
        return breakdown, [], aux
    if needs_render:
        raster_grads = raster.rasterize_backward(grad_rgb, render, meshes)
    else:
        raster_grads = [
            (np.zeros_like(m.colors), np.zeros_like(m.verts), np.zeros_like(m.depths))
            for m in meshes
        ]
    packed = []
    for k, fp in enumerate(faces):
        g_col, g_vert, g_dep = raster_grads[k]
        g_vert = g_vert.copy()
        if lan_grad is not None:
            np.add.at(g_vert, lm_idx, weights.lambda_lan * lan_grad[k])
        g_alb, g_nrm, g_ill = shading.shade_backward(
            g_col.T, decoded[k].albedo, decoded[k].normals, fp.illum
        )
        if flat_grads is not None:
            g_alb = g_alb + weights.lambda_var * flat_grads[k]
        g_cam = camera.project_camera_points_backward(
            decoded[k].shape_cam, intr, g_vert.T, g_dep
        )
        fg = morphable.decode_backward(
            DecodedFaceGrad(shape_cam=g_cam, albedo=g_alb, normals=g_nrm),
            fp, bundle, intr, decoded=decoded[k],
        )
        fg.illum = g_ill
        if "norm" in terms:
            fg.id += weights.lambda_norm * (2.0 / n) * weights.lambda_id * fp.id
            fg.exp += weights.lambda_norm * (2.0 / n) * weights.lambda_exp * fp.exp
            fg.alb += weights.lambda_norm * (2.0 / n) * weights.lambda_alb * fp.alb
        packed.append(fg.pack())

    breakdown = combine(weights, **values)
    aux = TotalLossAux(
        render=render, meshes=meshes, decoded=decoded,
        landmarks_px=landmarks_px, crop_boxes=boxes,
    )
    return breakdown, packed, aux
