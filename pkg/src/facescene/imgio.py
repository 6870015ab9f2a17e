"""File I/O for images, masks, heatmaps, and landmark ground truth.

PPM/PGM writers are hand-rolled so output bytes are reproducible; PNG goes
through Pillow.  Float images use [0, 1] with quantization round(v * 255)
(or 65535 for 16-bit).
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _pnm_header(blob: bytes, magic: bytes, path) -> tuple[list[int], int]:
    """Parse 'magic w h maxval' allowing comments; returns fields and payload offset."""
    if not blob.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file")
    fields: list[int] = []
    i = len(magic)
    n = len(blob)
    while len(fields) < 3:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i : i + 1] == b"#":
            while i < n and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < n and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError(f"{path}: truncated header")
        fields.append(int(blob[i:j]))
        i = j
    return fields, i + 1  # single whitespace byte separates header and payload


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM (P6). rgb is (h, w, 3) float in [0,1] or uint8."""
    data = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """P6 PPM to float (h, w, 3) in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), off = _pnm_header(blob, b"P6", path)
    raw = np.frombuffer(blob[off : off + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return raw.astype(np.float64) / maxval


def write_pgm(path, gray: np.ndarray, bits: int = 8) -> None:
    """Binary PGM (P5), 8- or 16-bit. Floats map [0,1] onto the full range."""
    g = np.asarray(gray)
    if bits == 8:
        data = g if g.dtype == np.uint8 else np.clip(np.round(g * 255.0), 0, 255).astype(np.uint8)
        maxval, payload = 255, data.tobytes()
    elif bits == 16:
        if g.dtype == np.uint16:
            data = g
        else:
            data = np.clip(np.round(g * 65535.0), 0, 65535).astype(np.uint16)
        maxval, payload = 65535, data.astype(">u2").tobytes()  # 16-bit PGM is big-endian
    else:
        raise ValueError("bits must be 8 or 16")
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(payload)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Binary PGM to a float array in [0, 1] plus the file's maxval."""
    with open(path, "rb") as fh:
        blob = fh.read()
    (w, h, maxval), off = _pnm_header(blob, b"P5", path)
    if maxval > 255:
        raw = np.frombuffer(blob[off : off + w * h * 2], dtype=">u2").reshape(h, w)
    else:
        raw = np.frombuffer(blob[off : off + w * h], dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float64) / maxval, maxval


def write_png(path, img: np.ndarray) -> None:
    """RGB or grayscale PNG from float [0,1] or uint8."""
    data = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(data).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Any supported image file to float RGB (h, w, 3) in [0, 1]."""
    p = str(path)
    if p.endswith(".ppm"):
        return read_ppm(p)
    if p.endswith(".pgm"):
        g, _ = read_pgm(p)
        return np.repeat(g[..., None], 3, axis=2)
    arr = np.asarray(Image.open(p).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """Single-channel mask image; nonzero means selected."""
    p = str(path)
    if p.endswith(".pgm"):
        g, _ = read_pgm(p)
        return g > 0
    arr = np.asarray(Image.open(p).convert("L"))
    return arr > 0


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(mask, 255, 0).astype(np.uint8), bits=8)


def write_depth_debug(path, depth: np.ndarray) -> None:
    """Depth buffer as 16-bit PGM, near = bright, empty pixels black."""
    finite = np.isfinite(depth)
    out = np.zeros_like(depth, dtype=np.float64)
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = 1.0 - (depth[finite] - lo) / span
    write_pgm(path, out, bits=16)


def write_landmarks(path, points: np.ndarray, visible: np.ndarray | None = None) -> None:
    """68 lines of 'x y [visible]'."""
    with open(path, "w") as fh:
        for j, (x, y) in enumerate(np.asarray(points)):
            if visible is None:
                fh.write(f"{x:.6f} {y:.6f}\n")
            else:
                fh.write(f"{x:.6f} {y:.6f} {int(visible[j])}\n")


def read_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    """Landmark text file to ((68, 2) points, (68,) visibility)."""
    pts, vis = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            pts.append((float(parts[0]), float(parts[1])))
            vis.append(bool(int(parts[2])) if len(parts) > 2 else True)
    return np.asarray(pts, dtype=np.float64), np.asarray(vis, dtype=bool)
