"""Unsupervised region estimation with efficient graph-based segmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .io import read_pgm16, write_pgm16

DEFAULT_SCALE = 250.0
DEFAULT_SIGMA = 0.8
DEFAULT_MIN_SIZE = 64

# (drow, dcol) for the four forward neighbours of the 8-connected grid
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass(eq=False)
class RegionMap:
    labels: np.ndarray  # (H, W) int32, dense in [0, count)
    count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def __eq__(self, other):
        return isinstance(other, RegionMap) and self.count == other.count and np.array_equal(self.labels, other.labels)


def dense_relabel(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Rename labels to ``0..k-1`` in order of first occurrence in scanline order."""
    flat = np.asarray(labels).ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(np.shape(labels)).astype(np.int32), len(uniq)


def regions_from_labels(labels: np.ndarray) -> RegionMap:
    """Use an existing label raster (e.g. ground truth classes) as regions."""
    dense, count = dense_relabel(labels)
    return RegionMap(dense, count)


def region_sizes(regmap: RegionMap) -> dict[int, int]:
    return {i: int(n) for i, n in enumerate(regmap.sizes)}


def grid_edges(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source index, target index and Euclidean colour distance of every 8-neighbour edge."""
    H, W = img.shape[:2]
    idx = np.arange(H * W).reshape(H, W)
    src, dst, wts = [], [], []
    for dr, dc in _OFFSETS:
        r0, r1 = 0, H - dr
        c0, c1 = max(0, -dc), W - max(0, dc)
        a = idx[r0:r1, c0:c1]
        b = idx[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        diff = img[r0:r1, c0:c1] - img[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        src.append(a.ravel())
        dst.append(b.ravel())
        wts.append(np.sqrt((diff * diff).sum(axis=-1)).ravel())
    return np.concatenate(src), np.concatenate(dst), np.concatenate(wts)


def smooth(img: np.ndarray, sigma: float, mode: str = "blur", preprocess: Callable | None = None) -> np.ndarray:
    """Pre-smoothing before edge weights are computed.

    ``blur``: Gaussian blur with standard deviation ``sigma`` pixels.
    ``raw``: ``sigma`` is handed untouched to ``preprocess(img, sigma)``; with no
    preprocessor the image is used as is.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if mode == "blur":
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest", truncate=4.0)
        return img
    if mode == "raw":
        return np.asarray(preprocess(img, sigma), dtype=np.float64) if preprocess is not None else img
    raise ValueError(f"unknown sigma mode {mode!r} (expected 'blur' or 'raw')")


def _find(parent: list, x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def segment_graph(
    rgb: np.ndarray,
    scale: float = DEFAULT_SCALE,
    sigma: float = DEFAULT_SIGMA,
    min_size: int = DEFAULT_MIN_SIZE,
    *,
    mode: str = "blur",
    preprocess: Callable | None = None,
) -> RegionMap:
    """Felzenszwalb-Huttenlocher segmentation on the 8-connected pixel grid.

    Edges are processed by increasing colour distance (ties by source then
    target index). Two components merge when the edge weight does not exceed
    either component's internal difference plus ``scale / size``. Components
    smaller than ``min_size`` are then merged along the lightest remaining edges.
    """
    rgb = np.asarray(rgb)
    if rgb.size == 0:
        raise ValueError("empty image")
    if scale <= 0 or sigma < 0 or min_size < 1:
        raise ValueError(f"invalid parameters scale={scale}, sigma={sigma}, min_size={min_size}")
    img = smooth(rgb, sigma, mode, preprocess)
    H, W = img.shape[:2]
    n = H * W
    src, dst, wts = grid_edges(img)
    order = np.lexsort((dst, src, wts))
    src_l, dst_l, w_l = src[order].tolist(), dst[order].tolist(), wts[order].tolist()

    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    thresh = [float(scale)] * n
    for a, b, w in zip(src_l, dst_l, w_l):
        ra, rb = _find(parent, a), _find(parent, b)
        if ra == rb or w > thresh[ra] or w > thresh[rb]:
            continue
        if rank[ra] < rank[rb]:
            ra, rb = rb, ra
        parent[rb] = ra
        size[ra] += size[rb]
        if rank[ra] == rank[rb]:
            rank[ra] += 1
        thresh[ra] = w + scale / size[ra]

    if min_size > 1:
        for a, b in zip(src_l, dst_l):
            ra, rb = _find(parent, a), _find(parent, b)
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                if rank[ra] < rank[rb]:
                    ra, rb = rb, ra
                parent[rb] = ra
                size[ra] += size[rb]
                if rank[ra] == rank[rb]:
                    rank[ra] += 1

    roots = np.fromiter((_find(parent, i) for i in range(n)), dtype=np.int64, count=n)
    labels, count = dense_relabel(roots.reshape(H, W))
    return RegionMap(labels, count)


def save_region_map(regmap: RegionMap, path) -> None:
    """16-bit PGM raster plus a ``.json`` size table next to it."""
    if regmap.count > 65535:
        raise ValueError(f"{regmap.count} regions do not fit a 16-bit raster")
    path = Path(path)
    write_pgm16(path, regmap.labels.astype(np.uint16))
    path.with_suffix(".json").write_text(json.dumps({"count": regmap.count, "sizes": regmap.sizes.tolist()}))


def load_region_map(path) -> RegionMap:
    path = Path(path)
    labels = read_pgm16(path).astype(np.int32)
    meta = json.loads(path.with_suffix(".json").read_text())
    regmap = RegionMap(labels, int(meta["count"]))
    if regmap.sizes.tolist() != meta["sizes"]:
        raise ValueError(f"{path}: size table does not match raster")
    return regmap
