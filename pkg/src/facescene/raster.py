"""Deterministic software rasterizer with a defined gradient contract.

Z-buffered triangle fill with perspective-correct barycentric interpolation
of per-vertex colors.  Pixel (i, j) samples the continuous point
(j + 0.5, i + 0.5) (u right, v down), matching the camera module.  Coverage
follows the top-left fill rule; depth ties go to the ascending (face index,
triangle index) pair, so output is bit-identical no matter how the work is
scheduled.  Back faces (counter-clockwise from outside) are culled.

Gradient contract: the backward pass differentiates interpolation with
visibility held fixed.  Color gradients are exact; position/depth gradients
differentiate the perspective-correct weights with respect to the covering
triangle's screen vertices.  Occlusion boundaries and silhouettes carry no
gradient, so finite-difference checks must stay away from edges
(see interior_mask).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import camera, shading
from .camera import Intrinsics


class BufferMismatchError(ValueError):
    pass


@dataclass
class ScreenMesh:
    """One face after decode/shade/project: everything the rasterizer needs."""

    verts: np.ndarray      # (V, 2) screen coords
    depths: np.ndarray     # (V,) camera-space z > 0
    colors: np.ndarray     # (V, 3) in [0, 1]
    triangles: np.ndarray  # (T, 3) int


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (h, w, 3)
    mask: np.ndarray    # (h, w) bool
    depth: np.ndarray   # (h, w), +inf where empty
    tri_id: np.ndarray  # (h, w, 2) int32 (face, triangle), -1 where empty
    bary: np.ndarray    # (h, w, 3) perspective-correct weights


def _edge(p, q, xu, xv):
    """cross(q - p, x - p): positive in the triangle interior after the flip."""
    return (q[0] - p[0]) * (xv - p[1]) - (q[1] - p[1]) * (xu - p[0])


def _top_left(d: np.ndarray) -> bool:
    # for the flipped (interior-positive) traversal: left edges run upward,
    # top edges run right
    return d[1] < 0 or (d[1] == 0 and d[0] > 0)


def _accept(w, d):
    return (w > 0) | ((w == 0) & _top_left(d))


def _pixel_range(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Indices whose +0.5 centers fall in [lo, hi], clipped to [0, n)."""
    a = int(np.ceil(lo - 0.5))
    b = int(np.floor(hi - 0.5))
    return max(a, 0), min(b, n - 1)


def _raster_band(faces, w, h, row0, row1):
    rows_n = row1 - row0
    rgb = np.zeros((rows_n, w, 3))
    depth = np.full((rows_n, w), np.inf)
    tri_id = np.full((rows_n, w, 2), -1, dtype=np.int32)
    bary = np.zeros((rows_n, w, 3))

    for fi, mesh in enumerate(faces):
        verts = mesh.verts
        zs = mesh.depths
        cols = mesh.colors
        for ti, tri in enumerate(mesh.triangles):
            p0, p1, p2 = verts[tri[0]], verts[tri[1]], verts[tri[2]]
            area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
            if area2 >= 0.0:  # back-facing or degenerate
                continue
            ahat = -area2
            c0, c1 = _pixel_range(min(p0[0], p1[0], p2[0]), max(p0[0], p1[0], p2[0]), w)
            if c1 < c0:
                continue
            r0, r1 = _pixel_range(min(p0[1], p1[1], p2[1]), max(p0[1], p1[1], p2[1]), h)
            r0, r1 = max(r0, row0), min(r1, row1 - 1)
            if r1 < r0:
                continue
            xu = np.arange(c0, c1 + 1) + 0.5
            xv = (np.arange(r0, r1 + 1) + 0.5)[:, None]
            w0 = -_edge(p1, p2, xu, xv)
            w1 = -_edge(p2, p0, xu, xv)
            w2 = -_edge(p0, p1, xu, xv)
            inside = (
                _accept(w0, p1 - p2)
                & _accept(w1, p2 - p0)
                & _accept(w2, p0 - p1)
            )
            if not inside.any():
                continue
            a0, a1, a2 = w0 / ahat, w1 / ahat, w2 / ahat
            z0, z1, z2 = zs[tri[0]], zs[tri[1]], zs[tri[2]]
            q = a0 / z0 + a1 / z1 + a2 / z2
            zpix = 1.0 / np.where(q > 0, q, 1.0)
            band = slice(r0 - row0, r1 - row0 + 1), slice(c0, c1 + 1)
            win = inside & (q > 0) & (zpix < depth[band])
            if not win.any():
                continue
            b0 = (a0 / z0) * zpix
            b1 = (a1 / z1) * zpix
            b2 = (a2 / z2) * zpix
            color = (
                b0[..., None] * cols[tri[0]]
                + b1[..., None] * cols[tri[1]]
                + b2[..., None] * cols[tri[2]]
            )
            sub_rgb = rgb[band]
            sub_rgb[win] = color[win]
            sub_d = depth[band]
            sub_d[win] = zpix[win]
            sub_t = tri_id[band]
            sub_t[win] = (fi, ti)
            sub_b = bary[band]
            sub_b[win] = np.stack([b0, b1, b2], axis=-1)[win]
    return rgb, depth, tri_id, bary


def rasterize(faces: list[ScreenMesh], intr: Intrinsics, threads: int = 1) -> RenderOutput:
    """Composite all faces into one frame in a single z-buffered pass.

    Bands of rows are independent, so any thread count produces identical
    output.
    """
    w, h = intr.w, intr.h
    threads = max(1, int(threads))
    if threads == 1 or h < 2 * threads:
        rgb, depth, tri_id, bary = _raster_band(faces, w, h, 0, h)
    else:
        edges = np.linspace(0, h, threads + 1).astype(int)
        spans = [(int(edges[i]), int(edges[i + 1])) for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: _raster_band(faces, w, h, s[0], s[1]), spans))
        rgb = np.concatenate([p[0] for p in parts], axis=0)
        depth = np.concatenate([p[1] for p in parts], axis=0)
        tri_id = np.concatenate([p[2] for p in parts], axis=0)
        bary = np.concatenate([p[3] for p in parts], axis=0)
    mask = tri_id[..., 0] >= 0
    return RenderOutput(rgb=rgb, mask=mask, depth=depth, tri_id=tri_id, bary=bary)


def rasterize_backward(
    grad_rgb: np.ndarray,
    out: RenderOutput,
    faces: list[ScreenMesh],
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Gradients of sum(grad_rgb * rgb) wrt each face's colors, verts, depths.

    Returns one (grad_colors (V,3), grad_verts (V,2), grad_depths (V,)) per
    face.  Uncovered pixels contribute nothing; visibility is held fixed.
    Accumulation order is fixed (np.add.at in pixel order), so results are
    deterministic.
    """
    h, w = out.mask.shape
    if grad_rgb.shape != (h, w, 3):
        raise BufferMismatchError(f"grad_rgb shape {grad_rgb.shape} != {(h, w, 3)}")
    results = []
    vv, uu = np.mgrid[0:h, 0:w]
    px_u = uu + 0.5
    px_v = vv + 0.5
    for fi, mesh in enumerate(faces):
        g_col = np.zeros_like(mesh.colors)
        g_vert = np.zeros_like(mesh.verts)
        g_dep = np.zeros_like(mesh.depths)
        sel = out.tri_id[..., 0] == fi
        if not sel.any():
            results.append((g_col, g_vert, g_dep))
            continue
        tids = out.tri_id[..., 1][sel]                    # (P,)
        tri = mesh.triangles[tids]                        # (P, 3)
        pv = mesh.verts[tri]                              # (P, 3, 2)
        pz = mesh.depths[tri]                             # (P, 3)
        pc = mesh.colors[tri]                             # (P, 3, 3)
        g = grad_rgb[sel]                                 # (P, 3)
        xu = px_u[sel]
        xv = px_v[sel]

        # recompute the flipped edge functions at the pixel centers
        def e(pa, pb):
            return (pb[:, 0] - pa[:, 0]) * (xv - pa[:, 1]) - (pb[:, 1] - pa[:, 1]) * (xu - pa[:, 0])

        p0, p1, p2 = pv[:, 0], pv[:, 1], pv[:, 2]
        w_hat = np.stack([e(p2, p1), e(p0, p2), e(p1, p0)], axis=1)  # (P, 3)
        ahat = w_hat.sum(axis=1)
        a = w_hat / ahat[:, None]
        zq = a / pz                                       # a_k / z_k
        dsum = zq.sum(axis=1)
        wt = zq / dsum[:, None]                           # perspective weights

        g_col_pix = wt[..., None] * g[:, None, :]         # (P, 3, 3)

        # chain: color = sum_k wt_k c_k
        dl_dw = np.einsum("pkc,pc->pk", pc, g)            # (P, 3)
        inner = (dl_dw * wt).sum(axis=1, keepdims=True)
        dl_dq = (dl_dw - inner) / dsum[:, None]
        dl_da = dl_dq / pz
        dl_dz = -dl_dq * a / (pz * pz)

        inner_a = (dl_da * a).sum(axis=1, keepdims=True)
        dl_dwhat = (dl_da - inner_a) / ahat[:, None]      # (P, 3)

        # dE(p, q, x)/dp = (q.v - x.v, x.u - q.u); dE/dq = (x.v - p.v, p.u - x.u)
        def dp(q):
            return np.stack([q[:, 1] - xv, xu - q[:, 0]], axis=1)

        def dq(p):
            return np.stack([xv - p[:, 1], p[:, 0] - xu], axis=1)

        g_pix_vert = np.zeros((len(tids), 3, 2))
        # w_hat[0] = e(p2, p1): p arg is vertex 2, q arg is vertex 1
        g_pix_vert[:, 2] += dl_dwhat[:, 0:1] * dp(p1)
        g_pix_vert[:, 1] += dl_dwhat[:, 0:1] * dq(p2)
        # w_hat[1] = e(p0, p2)
        g_pix_vert[:, 0] += dl_dwhat[:, 1:2] * dp(p2)
        g_pix_vert[:, 2] += dl_dwhat[:, 1:2] * dq(p0)
        # w_hat[2] = e(p1, p0)
        g_pix_vert[:, 1] += dl_dwhat[:, 2:3] * dp(p0)
        g_pix_vert[:, 0] += dl_dwhat[:, 2:3] * dq(p1)

        np.add.at(g_col, tri, g_col_pix)
        np.add.at(g_vert, tri, g_pix_vert)
        np.add.at(g_dep, tri, dl_dz)
        results.append((g_col, g_vert, g_dep))
    return results


def interior_mask(out: RenderOutput, margin: int = 2) -> np.ndarray:
    """Pixels whose whole (2*margin+1)^2 window shows the same triangle.

    This is the pixel set on which the position-gradient contract is exact:
    no triangle edge, silhouette, or depth discontinuity within `margin`
    pixels.
    """
    fid = out.tri_id[..., 0]
    tid = out.tri_id[..., 1]
    ok = out.mask.copy()
    h, w = ok.shape
    for di in range(-margin, margin + 1):
        for dj in range(-margin, margin + 1):
            if di == 0 and dj == 0:
                continue
            shifted_f = np.full_like(fid, -2)
            shifted_t = np.full_like(tid, -2)
            si = slice(max(0, di), min(h, h + di))
            sj = slice(max(0, dj), min(w, w + dj))
            ti = slice(max(0, -di), min(h, h - di))
            tj = slice(max(0, -dj), min(w, w - dj))
            shifted_f[ti, tj] = fid[si, sj]
            shifted_t[ti, tj] = tid[si, sj]
            ok &= (shifted_f == fid) & (shifted_t == tid)
    return ok


def shade_and_project(face_params, bundle, intr: Intrinsics):
    """decode -> shade -> project one face; returns (ScreenMesh, DecodedFace)."""
    from . import morphable

    dec = morphable.decode(face_params, bundle, intr)
    colors = shading.shade(dec.albedo, dec.normals, face_params.illum)
    uv, z = camera.project_camera_points(dec.shape_cam, intr)
    mesh = ScreenMesh(
        verts=uv.T.copy(),
        depths=z,
        colors=colors.T.copy(),
        triangles=bundle.triangles,
    )
    return mesh, dec


def render_scene(scene, bundle, threads: int = 1) -> RenderOutput:
    """Decode, shade, project, and rasterize every face under the shared camera."""
    meshes = [shade_and_project(fp, bundle, scene.intr)[0] for fp in scene.faces]
    return rasterize(meshes, scene.intr, threads=threads)
