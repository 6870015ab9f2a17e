"""Decode a face parameter vector into a posed, colored mesh, and back-propagate.

The parameter vector splits into semantic blocks: a center score (used only
by detection), identity/expression/albedo coefficients, a 6-dof rigid pose,
and 27 lighting values.  At paper-scale basis widths (80/64/80) the total is
258.  Shape and pre-clamp albedo are affine in the coefficients; the rigid
transform comes from the camera module; normals are computed in camera space
so lighting is scene-fixed rather than head-fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import camera
from .assets import BasisBundle
from .camera import Intrinsics, Pose

POSE_DIM = 6
ILLUM_DIM = 27


class DimensionMismatchError(ValueError):
    pass


@dataclass
class FaceParams:
    """One face's free parameters, split into blocks."""

    center_score: float
    id: np.ndarray
    exp: np.ndarray
    alb: np.ndarray
    pose: Pose
    illum: np.ndarray  # (9, 3)

    @classmethod
    def zeros(cls, bundle: BasisBundle, center=(0.0, 0.0), depth: float = 1.0) -> "FaceParams":
        """Mean face at rest: zero coefficients, neutral band-0 light."""
        from .shading import neutral_light

        return cls(
            center_score=0.0,
            id=np.zeros(bundle.n_id),
            exp=np.zeros(bundle.n_exp),
            alb=np.zeros(bundle.n_alb),
            pose=Pose(
                rot=np.zeros(3),
                trans_code=np.array([0.0, 0.0, depth]),
                face_center=np.asarray(center, dtype=np.float64),
            ),
            illum=neutral_light(),
        )

    @property
    def dim(self) -> int:
        return 1 + self.id.size + self.exp.size + self.alb.size + POSE_DIM + ILLUM_DIM

    def pack(self) -> np.ndarray:
        """Flatten to (dim,) in block order (m, id, exp, alb, pose, illum)."""
        return np.concatenate(
            [
                [self.center_score],
                self.id,
                self.exp,
                self.alb,
                self.pose.rot,
                self.pose.trans_code,
                self.illum.ravel(),
            ]
        )

    @classmethod
    def unpack(cls, vec: np.ndarray, bundle: BasisBundle, face_center) -> "FaceParams":
        vec = np.asarray(vec, dtype=np.float64)
        ni, ne, na = bundle.n_id, bundle.n_exp, bundle.n_alb
        expected = 1 + ni + ne + na + POSE_DIM + ILLUM_DIM
        if vec.size != expected:
            raise DimensionMismatchError(f"expected {expected} parameters, got {vec.size}")
        o = 1
        pid, o = vec[o : o + ni], o + ni
        pexp, o = vec[o : o + ne], o + ne
        palb, o = vec[o : o + na], o + na
        rot, o = vec[o : o + 3], o + 3
        trans, o = vec[o : o + 3], o + 3
        illum = vec[o:].reshape(9, 3)
        return cls(
            center_score=float(vec[0]),
            id=pid.copy(),
            exp=pexp.copy(),
            alb=palb.copy(),
            pose=Pose(rot.copy(), trans.copy(), np.asarray(face_center, dtype=np.float64)),
            illum=illum.copy(),
        )

    def copy(self) -> "FaceParams":
        return FaceParams(
            self.center_score, self.id.copy(), self.exp.copy(), self.alb.copy(),
            self.pose.copy(), self.illum.copy(),
        )


@dataclass
class DecodedFace:
    shape_model: np.ndarray  # (3, N) model space
    shape_cam: np.ndarray    # (3, N) camera space, R X + t
    albedo: np.ndarray       # (3, N) in [0, 1]
    normals: np.ndarray      # (3, N) unit, camera space
    # cached forward state for the backward pass
    pre_clamp_albedo: np.ndarray = field(repr=False, default=None)
    raw_normals: np.ndarray = field(repr=False, default=None)


def _check_dims(params: FaceParams, bundle: BasisBundle) -> None:
    if (
        params.id.size != bundle.n_id
        or params.exp.size != bundle.n_exp
        or params.alb.size != bundle.n_alb
    ):
        raise DimensionMismatchError(
            f"parameter blocks ({params.id.size}/{params.exp.size}/{params.alb.size}) do not "
            f"match bundle bases ({bundle.n_id}/{bundle.n_exp}/{bundle.n_alb})"
        )


def vertex_normals(points: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted vertex normals of a (3, N) mesh.

    Returns (unit_normals, raw_sums); summing raw cross products is exactly
    the area weighting.
    """
    p = points.T  # (N, 3)
    a, b, c = p[triangles[:, 0]], p[triangles[:, 1]], p[triangles[:, 2]]
    face_n = np.cross(b - a, c - a)  # (T, 3)
    raw = np.zeros_like(p)
    np.add.at(raw, triangles[:, 0], face_n)
    np.add.at(raw, triangles[:, 1], face_n)
    np.add.at(raw, triangles[:, 2], face_n)
    lens = np.linalg.norm(raw, axis=1)
    # vertices whose incident triangles cancel (or that have none) get a
    # camera-facing unit normal so downstream shading stays well-defined
    degenerate = lens < 1e-20
    unit = np.where(degenerate[:, None], [[0.0, 0.0, -1.0]], raw / np.maximum(lens, 1e-20)[:, None])
    return unit.T, raw.T


def vertex_normals_backward(
    points: np.ndarray,
    triangles: np.ndarray,
    raw: np.ndarray,
    grad_unit: np.ndarray,
) -> np.ndarray:
    """Adjoint of vertex_normals onto the points, given dL/d(unit normals)."""
    raw_t = raw.T  # (N, 3)
    lens = np.linalg.norm(raw_t, axis=1)
    degenerate = lens < 1e-20
    lens = np.maximum(lens, 1e-20)
    unit = raw_t / lens[:, None]
    g = grad_unit.T  # (N, 3)
    # d(normalize)/draw = (I - n n^T) / |raw|; degenerate vertices got a
    # constant fallback normal, so no gradient flows through them
    grad_raw = (g - unit * (unit * g).sum(axis=1, keepdims=True)) / lens[:, None]
    grad_raw[degenerate] = 0.0

    p = points.T
    a_idx, b_idx, c_idx = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    a, b, c = p[a_idx], p[b_idx], p[c_idx]
    # each face normal fed the raw sums of its three corners
    g_face = grad_raw[a_idx] + grad_raw[b_idx] + grad_raw[c_idx]  # (T, 3)
    e1, e2 = b - a, c - a
    # n = e1 x e2  =>  dL/de1 = e2 x g,  dL/de2 = g x e1
    g_e1 = np.cross(e2, g_face)
    g_e2 = np.cross(g_face, e1)
    grad_p = np.zeros_like(p)
    np.add.at(grad_p, a_idx, -(g_e1 + g_e2))
    np.add.at(grad_p, b_idx, g_e1)
    np.add.at(grad_p, c_idx, g_e2)
    return grad_p.T


def decode(params: FaceParams, bundle: BasisBundle, intr: Intrinsics) -> DecodedFace:
    """Parameters to a posed colored mesh.

    shape = mean + id_basis . delta_id + exp_basis . delta_exp
    albedo = clamp(mean + alb_basis . delta_alb, 0, 1)
    """
    _check_dims(params, bundle)
    n = bundle.vertex_count
    shape_flat = bundle.mean_shape + bundle.id_basis @ params.id + bundle.exp_basis @ params.exp
    shape_model = shape_flat.reshape(3, n)
    pre_alb = (bundle.mean_albedo + bundle.alb_basis @ params.alb).reshape(3, n)
    albedo = np.clip(pre_alb, 0.0, 1.0)

    r = camera.rotation_from_axis_angle(params.pose.rot)
    t = camera.decode_translation(params.pose, intr)
    shape_cam = r @ shape_model + t[:, None]
    normals, raw = vertex_normals(shape_cam, bundle.triangles)
    return DecodedFace(
        shape_model=shape_model,
        shape_cam=shape_cam,
        albedo=albedo,
        normals=normals,
        pre_clamp_albedo=pre_alb,
        raw_normals=raw,
    )


@dataclass
class DecodedFaceGrad:
    """Upstream gradients wrt the fields of a DecodedFace (any may be None)."""

    shape_cam: np.ndarray | None = None
    albedo: np.ndarray | None = None
    normals: np.ndarray | None = None
    shape_model: np.ndarray | None = None


@dataclass
class FaceParamsGrad:
    id: np.ndarray
    exp: np.ndarray
    alb: np.ndarray
    rot: np.ndarray
    trans_code: np.ndarray
    illum: np.ndarray  # (9, 3); filled by the shading chain, zero here

    @classmethod
    def zeros(cls, bundle: BasisBundle) -> "FaceParamsGrad":
        return cls(
            id=np.zeros(bundle.n_id),
            exp=np.zeros(bundle.n_exp),
            alb=np.zeros(bundle.n_alb),
            rot=np.zeros(3),
            trans_code=np.zeros(3),
            illum=np.zeros((9, 3)),
        )

    def pack(self) -> np.ndarray:
        """Same layout as FaceParams.pack(); the center-score slot is zero."""
        return np.concatenate(
            [[0.0], self.id, self.exp, self.alb, self.rot, self.trans_code, self.illum.ravel()]
        )

    def add_(self, other: "FaceParamsGrad") -> "FaceParamsGrad":
        self.id += other.id
        self.exp += other.exp
        self.alb += other.alb
        self.rot += other.rot
        self.trans_code += other.trans_code
        self.illum += other.illum
        return self


def decode_backward(
    grad_out: DecodedFaceGrad,
    params: FaceParams,
    bundle: BasisBundle,
    intr: Intrinsics,
    decoded: DecodedFace | None = None,
) -> FaceParamsGrad:
    """Exact adjoint of decode, clamp subgradients included."""
    _check_dims(params, bundle)
    if decoded is None:
        decoded = decode(params, bundle, intr)
    n = bundle.vertex_count
    out = FaceParamsGrad.zeros(bundle)

    g_cam = np.zeros((3, n))
    if grad_out.shape_cam is not None:
        g_cam += grad_out.shape_cam
    if grad_out.normals is not None:
        g_cam += vertex_normals_backward(
            decoded.shape_cam, bundle.triangles, decoded.raw_normals, grad_out.normals
        )

    r = camera.rotation_from_axis_angle(params.pose.rot)
    g_model = r.T @ g_cam
    if grad_out.shape_model is not None:
        g_model = g_model + grad_out.shape_model
    if np.any(g_cam):
        grad_r = g_cam @ decoded.shape_model.T
        out.rot = camera.rotation_backward(params.pose.rot, grad_r)
        grad_t = g_cam.sum(axis=1)
        out.trans_code = camera.decode_translation_backward(params.pose, intr, grad_t)

    g_model_flat = g_model.reshape(-1)
    out.id = bundle.id_basis.T @ g_model_flat
    out.exp = bundle.exp_basis.T @ g_model_flat

    if grad_out.albedo is not None:
        inside = (decoded.pre_clamp_albedo > 0.0) & (decoded.pre_clamp_albedo < 1.0)
        g_alb = (grad_out.albedo * inside).reshape(-1)
        out.alb = bundle.alb_basis.T @ g_alb
    return out


def project_landmarks(
    face: DecodedFace, bundle: BasisBundle, pose: Pose, intr: Intrinsics
) -> np.ndarray:
    """Pixel coordinates (68, 2) of the landmark vertices."""
    uv, _ = camera.project(face.shape_model[:, bundle.landmark_indices], pose, intr)
    return uv.T


def export_obj(path, faces, bundle: BasisBundle, space: str = "camera") -> None:
    """Write one or more decoded faces as a Wavefront OBJ with vertex colors.

    Vertices carry `v x y z r g b`; camera space (the default) preserves the
    relative placement of multiple faces under the shared camera.
    """
    if isinstance(faces, DecodedFace):
        faces = [faces]
    tris = bundle.triangles
    with open(path, "w") as fh:
        fh.write(f"# facescene mesh export: {len(faces)} face(s), {bundle.vertex_count} vertices each\n")
        offset = 0
        for face in faces:
            pts = face.shape_cam if space == "camera" else face.shape_model
            col = face.albedo
            for i in range(bundle.vertex_count):
                fh.write(
                    "v %.6f %.6f %.6f %.6f %.6f %.6f\n"
                    % (pts[0, i], pts[1, i], pts[2, i], col[0, i], col[1, i], col[2, i])
                )
        for k in range(len(faces)):
            base = 1 + k * bundle.vertex_count
            for t in tris:
                fh.write(f"f {base + t[0]} {base + t[1]} {base + t[2]}\n")
            offset += bundle.vertex_count
