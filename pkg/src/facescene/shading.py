"""Three-band spherical-harmonics irradiance shading of per-vertex albedo.

Lighting is 9 SH weights per RGB channel (27 values per face).  Shaded color
is albedo times the SH-evaluated irradiance, clamped to [0, 1]; the clamp
subgradient is zero outside the open interval.
"""

from __future__ import annotations

import numpy as np

# standard real SH constants for bands 0..2
C0 = 0.282095
C1 = 0.488603
C2 = 1.092548
C3 = 0.315392
C4 = 0.546274

# band-0 weight that makes a unit-albedo surface render at exactly its albedo
WHITE_FURNACE_L0 = 1.0 / C0

N_SH = 9


class NonUnitNormalError(ValueError):
    pass


def sh_basis(normals: np.ndarray, check: bool = True) -> np.ndarray:
    """SH basis values Y0..Y8 for unit normals.

    Accepts (3,) or (3, k); returns (9,) or (9, k).  Basis order:
    1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2 (with the usual constants).
    """
    n = np.asarray(normals, dtype=np.float64)
    single = n.ndim == 1
    if single:
        n = n[:, None]
    if check:
        lens = np.sqrt((n * n).sum(axis=0))
        if np.any(np.abs(lens - 1.0) > 1e-6):
            worst = float(np.abs(lens - 1.0).max())
            raise NonUnitNormalError(f"normals must be unit length (off by {worst:.3g})")
    x, y, z = n
    out = np.stack(
        [
            np.full(x.shape, C0),
            C1 * y,
            C1 * z,
            C1 * x,
            C2 * x * y,
            C2 * y * z,
            C3 * (3.0 * z * z - 1.0),
            C2 * x * z,
            C4 * (x * x - y * y),
        ]
    )
    return out[:, 0] if single else out


def sh_basis_jacobian(normals: np.ndarray) -> np.ndarray:
    """d(sh_basis)/d(normal) as (9, 3) or (9, 3, k)."""
    n = np.asarray(normals, dtype=np.float64)
    single = n.ndim == 1
    if single:
        n = n[:, None]
    x, y, z = n
    zero = np.zeros_like(x)
    jac = np.stack(
        [
            np.stack([zero, zero, zero]),
            np.stack([zero, np.full_like(x, C1), zero]),
            np.stack([zero, zero, np.full_like(x, C1)]),
            np.stack([np.full_like(x, C1), zero, zero]),
            np.stack([C2 * y, C2 * x, zero]),
            np.stack([zero, C2 * z, C2 * y]),
            np.stack([zero, zero, C3 * 6.0 * z]),
            np.stack([C2 * z, zero, C2 * x]),
            np.stack([C4 * 2.0 * x, -C4 * 2.0 * y, zero]),
        ]
    )
    return jac[:, :, 0] if single else jac


def neutral_light() -> np.ndarray:
    """Gray band-0 lighting under which shade(albedo) == albedo."""
    sh = np.zeros((N_SH, 3))
    sh[0] = WHITE_FURNACE_L0
    return sh


def shade(albedo: np.ndarray, normals: np.ndarray, sh: np.ndarray) -> np.ndarray:
    """Shaded RGB = clamp(albedo * (Y(n) . sh), 0, 1), per channel.

    albedo and normals are (3,) / (3, k); sh is (9, 3).
    """
    basis = sh_basis(normals)  # (9,) or (9, k)
    sh = np.asarray(sh, dtype=np.float64).reshape(N_SH, 3)
    if basis.ndim == 1:
        irr = sh.T @ basis  # (3,)
    else:
        irr = np.einsum("jc,jk->ck", sh, basis)
    return np.clip(np.asarray(albedo, dtype=np.float64) * irr, 0.0, 1.0)


def shade_backward(
    grad_rgb: np.ndarray,
    albedo: np.ndarray,
    normals: np.ndarray,
    sh: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of shade: gradients wrt albedo, normals, sh.

    Channels that the forward clamp saturated pass no gradient.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    sh = np.asarray(sh, dtype=np.float64).reshape(N_SH, 3)
    single = np.asarray(normals).ndim == 1
    nrm = np.asarray(normals, dtype=np.float64)
    alb = albedo[:, None] if single else albedo
    g = np.asarray(grad_rgb, dtype=np.float64)
    g = g[:, None] if single else g
    nn = nrm[:, None] if single else nrm

    basis = sh_basis(nn)  # (9, k)
    irr = np.einsum("jc,jk->ck", sh, basis)  # (3, k)
    pre = alb * irr
    open_interval = (pre > 0.0) & (pre < 1.0)
    g = g * open_interval

    grad_albedo = g * irr
    grad_irr = g * alb  # (3, k)
    grad_sh = np.einsum("ck,jk->jc", grad_irr, basis)
    # through the basis into the normal
    jac = sh_basis_jacobian(nn)  # (9, 3, k)
    grad_basis = np.einsum("ck,jc->jk", grad_irr, sh)  # (9, k)
    grad_normal = np.einsum("jk,jak->ak", grad_basis, jac)
    if single:
        return grad_albedo[:, 0], grad_normal[:, 0], grad_sh
    return grad_albedo, grad_normal, grad_sh
