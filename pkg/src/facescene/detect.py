"""Stride-8 center heatmap construction and peak-based face extraction.

The heatmap grid scores whether a cell is a face center.  Ground-truth
labels are binary: the single nearest cell to each center is positive.
Inference reads faces off as 3x3 local maxima above a threshold, with no
box suppression of any kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imgio

DEFAULT_STRIDE = 8
DEFAULT_THRESHOLD = 0.3


class OutOfFrameCenterError(ValueError):
    pass


@dataclass
class Heatmap:
    grid: np.ndarray  # (h/r, w/r) floats in [0, 1]
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError("heatmap grid must be 2-d")
        if self.stride <= 0:
            raise ValueError("stride must be positive")

    @property
    def image_size(self) -> tuple[int, int]:
        """(w, h) of the image this grid covers."""
        return self.grid.shape[1] * self.stride, self.grid.shape[0] * self.stride


def _center_cell(c: float, stride: int, n_cells: int) -> int:
    # nearest cell center (k + 0.5) * r to the continuous coordinate c;
    # exact midpoints round down, which is what fixes cell 31 for c = 256, r = 8
    k = int(np.ceil(c / stride - 1.0))
    return min(max(k, 0), n_cells - 1)


def build_gt_heatmap(centers, image_size: tuple[int, int], stride: int = DEFAULT_STRIDE) -> Heatmap:
    """Binary ground-truth grid: 1.0 at the nearest cell to each center.

    Centers landing in the same cell collapse to a single positive.
    """
    w, h = image_size
    if w % stride or h % stride:
        raise ValueError(f"image size {image_size} not divisible by stride {stride}")
    grid = np.zeros((h // stride, w // stride))
    for cx, cy in centers:
        if not (0.0 <= cx <= w and 0.0 <= cy <= h):
            raise OutOfFrameCenterError(f"center ({cx}, {cy}) outside {w}x{h} frame")
        col = _center_cell(cx, stride, grid.shape[1])
        row = _center_cell(cy, stride, grid.shape[0])
        grid[row, col] = 1.0
    return Heatmap(grid=grid, stride=stride)


def extract_peaks(
    hm: Heatmap,
    threshold: float = DEFAULT_THRESHOLD,
    max_faces: int = 32,
) -> list[tuple[tuple[int, int], float]]:
    """Cells that win their 3x3 neighborhood, scored, sorted, truncated.

    A cell loses to a strictly larger neighbor, or to an equal neighbor with
    a smaller row-major index; that makes every plateau produce exactly one
    peak.  Results are sorted by score descending (row-major index breaks
    score ties) and cut to max_faces.  There is deliberately no box-overlap
    suppression.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    g = hm.grid
    h, w = g.shape
    keep = g >= threshold
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = np.full_like(g, -np.inf)
            si = slice(max(0, di), min(h, h + di))
            sj = slice(max(0, dj), min(w, w + dj))
            ti = slice(max(0, -di), min(h, h - di))
            tj = slice(max(0, -dj), min(w, w - dj))
            nb[ti, tj] = g[si, sj]
            earlier = di < 0 or (di == 0 and dj < 0)
            # lose to a strictly larger neighbor always; lose an exact tie
            # only to a neighbor with a smaller row-major index
            keep &= (nb < g) if earlier else (nb <= g)
    rows, cols = np.nonzero(keep)
    scores = g[rows, cols]
    order = np.lexsort((rows * w + cols, -scores))
    out = [((int(rows[k]), int(cols[k])), float(scores[k])) for k in order[:max_faces]]
    return out


def peaks_to_face_centers(peaks, stride: int = DEFAULT_STRIDE) -> list[tuple[float, float]]:
    """Grid cells to pixel-space (c_x, c_y) at the cell centers."""
    return [((col + 0.5) * stride, (row + 0.5) * stride) for (row, col), _ in peaks]


def save_heatmap(path, hm: Heatmap) -> None:
    """16-bit PGM, sample = round(score * 65535)."""
    imgio.write_pgm(path, hm.grid, bits=16)


def load_heatmap(path, stride: int = DEFAULT_STRIDE) -> Heatmap:
    grid, maxval = imgio.read_pgm(path)
    if maxval != 65535:
        raise ValueError(f"{path}: expected a 16-bit heatmap PGM, maxval was {maxval}")
    return Heatmap(grid=grid, stride=stride)
