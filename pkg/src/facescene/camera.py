"""Single global perspective camera, per-face rigid pose, projection.

Every face in an image shares one intrinsic matrix; a face's placement is
carried entirely by its rigid pose, whose translation is decoded from a
depth plus an offset around the face's image-plane center.  Camera frame is
x right, y down, z forward; points in front of the camera have z > 0.

Pixel-center convention: integer pixel (i, j) samples the continuous
coordinate (i + 0.5, j + 0.5).  The rasterizer and the losses use the same
convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# focal length for a 224-px crop frame; scaled linearly with frame size
DEFAULT_FOCAL_224 = 1015.0

MIN_DEPTH = 1e-6


class BehindCameraError(ValueError):
    pass


class NonPositiveDepthError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics: focal length in pixels plus frame size."""

    f_g: float
    w: int
    h: int

    def __post_init__(self):
        if self.f_g <= 0:
            raise ValueError(f"focal length must be positive, got {self.f_g}")
        for name in ("w", "h"):
            v = getattr(self, name)
            if v <= 0 or v % 32 != 0:
                raise ValueError(f"{name} must be a positive multiple of 32, got {v}")

    @classmethod
    def for_frame(cls, w: int, h: int, focal_224: float = DEFAULT_FOCAL_224) -> "Intrinsics":
        """Default intrinsics for a frame, focal scaled from the 224-px reference."""
        return cls(f_g=focal_224 * min(w, h) / 224.0, w=w, h=h)


@dataclass
class Pose:
    """Rigid pose of one face.

    rot is axis-angle in radians; trans_code = (d_x, d_y, d_z) with d_z the
    camera-space depth; face_center = (c_x, c_y) is the pixel anchor the
    translation decoding is relative to.
    """

    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans_code: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    face_center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(3)
        self.trans_code = np.asarray(self.trans_code, dtype=np.float64).reshape(3)
        self.face_center = np.asarray(self.face_center, dtype=np.float64).reshape(2)

    def copy(self) -> "Pose":
        return Pose(self.rot.copy(), self.trans_code.copy(), self.face_center.copy())


def intrinsic_matrix(intr: Intrinsics) -> np.ndarray:
    """[[f, 0, w/2], [0, f, h/2], [0, 0, 1]]."""
    return np.array(
        [
            [intr.f_g, 0.0, intr.w / 2.0],
            [0.0, intr.f_g, intr.h / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )


def rotation_from_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Exponential map of an axis-angle vector to a proper rotation matrix.

    Uses the Rodrigues form with series fallbacks for tiny angles, so the
    result is smooth through rot = 0.
    """
    rot = np.asarray(rot, dtype=np.float64).reshape(3)
    theta2 = float(rot @ rot)
    k = _skew(rot)
    a, b = _rodrigues_ab(theta2)
    return np.eye(3) + a * k + b * (k @ k)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _rodrigues_ab(theta2: float) -> tuple[float, float]:
    """Coefficients a = sin(t)/t and b = (1-cos(t))/t^2 with small-angle series."""
    if theta2 < 1e-16:
        return 1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0
    t = np.sqrt(theta2)
    return np.sin(t) / t, (1.0 - np.cos(t)) / theta2


_GENERATORS = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=np.float64,
)


def rotation_jacobian(rot: np.ndarray) -> np.ndarray:
    """dR/drot as a (3, 3, 3) array: [i] = partial of R wrt rot[i]."""
    rot = np.asarray(rot, dtype=np.float64).reshape(3)
    theta2 = float(rot @ rot)
    k = _skew(rot)
    k2 = k @ k
    a, b = _rodrigues_ab(theta2)
    # da/dtheta / theta and db/dtheta / theta, finite through theta = 0
    if theta2 < 1e-16:
        da_over_t = -1.0 / 3.0 + theta2 / 30.0
        db_over_t = -1.0 / 12.0 + theta2 / 180.0
    else:
        t = np.sqrt(theta2)
        da_over_t = (t * np.cos(t) - np.sin(t)) / (theta2 * t)
        db_over_t = (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (theta2 * theta2)
    jac = np.empty((3, 3, 3))
    for i in range(3):
        g = _GENERATORS[i]
        jac[i] = (
            da_over_t * rot[i] * k
            + a * g
            + db_over_t * rot[i] * k2
            + b * (g @ k + k @ g)
        )
    return jac


def rotation_backward(rot: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Adjoint of rotation_from_axis_angle: dL/drot from dL/dR."""
    jac = rotation_jacobian(rot)
    return np.einsum("ijk,jk->i", jac, grad_r)


def decode_translation(pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Camera-space translation from (d, c): depth times the pixel offset ray.

    t = (d_z (d_x + c_x - w/2) / f,  d_z (d_y + c_y - h/2) / f,  d_z)
    """
    d = pose.trans_code
    if d[2] <= 0:
        raise NonPositiveDepthError(f"d_z must be positive, got {d[2]}")
    c = pose.face_center
    return np.array(
        [
            d[2] * (d[0] + c[0] - intr.w / 2.0) / intr.f_g,
            d[2] * (d[1] + c[1] - intr.h / 2.0) / intr.f_g,
            d[2],
        ]
    )


def decode_translation_backward(pose: Pose, intr: Intrinsics, grad_t: np.ndarray) -> np.ndarray:
    """dL/d(trans_code) from dL/dt (face_center is a fixed anchor)."""
    d = pose.trans_code
    c = pose.face_center
    gx, gy, gz = grad_t
    return np.array(
        [
            gx * d[2] / intr.f_g,
            gy * d[2] / intr.f_g,
            gx * (d[0] + c[0] - intr.w / 2.0) / intr.f_g
            + gy * (d[1] + c[1] - intr.h / 2.0) / intr.f_g
            + gz,
        ]
    )


def transform(points: np.ndarray, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Model points (3, k) into camera space: R X + t."""
    r = rotation_from_axis_angle(pose.rot)
    t = decode_translation(pose, intr)
    return r @ points + t[:, None]


def project_camera_points(points_cam: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Perspective-divide camera-space points (3, k) to pixels (2, k) + depths (k,)."""
    z = points_cam[2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"point behind camera: min depth {z.min():.3g}")
    u = intr.f_g * points_cam[0] / z + intr.w / 2.0
    v = intr.f_g * points_cam[1] / z + intr.h / 2.0
    return np.stack([u, v]), z.copy()


def project_camera_points_backward(
    points_cam: np.ndarray,
    intr: Intrinsics,
    grad_uv: np.ndarray,
    grad_depth: np.ndarray | None = None,
) -> np.ndarray:
    """Adjoint of project_camera_points onto the camera-space points."""
    x, y, z = points_cam
    gu, gv = grad_uv
    gx = intr.f_g * gu / z
    gy = intr.f_g * gv / z
    gz = -intr.f_g * (gu * x + gv * y) / (z * z)
    if grad_depth is not None:
        gz = gz + grad_depth
    return np.stack([gx, gy, gz])


def project(points: np.ndarray, pose: Pose, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project model-space points (3, k): p ~ K(RX + t); returns pixels + depths."""
    return project_camera_points(transform(points, pose, intr), intr)


def unproject(uv: np.ndarray, depth: np.ndarray, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Inverse of project for known depths; returns model-space points (3, k)."""
    u, v = uv
    x = (u - intr.w / 2.0) * depth / intr.f_g
    y = (v - intr.h / 2.0) * depth / intr.f_g
    cam = np.stack([x, y, depth])
    r = rotation_from_axis_angle(pose.rot)
    t = decode_translation(pose, intr)
    return r.T @ (cam - t[:, None])
