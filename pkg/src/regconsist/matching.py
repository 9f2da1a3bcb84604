"""Cross-view region matching.

Region IoUs between a warped region map of view 1 and the region map of view 2
are computed in a single pass: each pixel's label pair ``(u, v)`` is encoded
with the Cantor pairing function and histogrammed, so only label pairs that
actually overlap are ever visited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DEFAULT_EPSILON_REL, compute_correspondences

HOLE = -1
DEFAULT_TAU = 0.5

_INT64_MAX = int(np.iinfo(np.int64).max)
# largest k1 + k2 = s with s(s+1)/2 + s <= int64 max
_MAX_SUM = (math.isqrt(8 * _INT64_MAX + 9) - 3) // 2
_BINCOUNT_LIMIT = 1 << 22
# s(s+1) fits in int64 below this
_SMALL_SUM = 3_037_000_499


def cantor_pair(k1, k2):
    """``(k1 + k2)(k1 + k2 + 1) / 2 + k2`` on non-negative integers (scalars or arrays)."""
    a = np.asarray(k1, dtype=np.int64)
    b = np.asarray(k2, dtype=np.int64)
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("cantor_pair needs non-negative integers")
    # compare before adding: a + b itself may wrap around
    too_big = a > _MAX_SUM - b
    if np.any(too_big):
        bad = np.argmax(np.ravel(too_big))
        raise OverflowError(
            f"cantor_pair({np.ravel(a)[bad]}, {np.ravel(b)[bad]}) exceeds the int64 range"
        )
    s = a + b
    out = _triangle(s) + b
    return int(out) if out.ndim == 0 else out


def _triangle(s):
    """``s(s+1)/2`` without the intermediate product overflowing int64."""
    if np.size(s) == 0 or np.max(s) < _SMALL_SUM:
        return (s * (s + 1)) >> 1
    return np.where(s % 2 == 0, (s // 2) * (s + 1), s * ((s + 1) // 2))


def cantor_unpair(n):
    """Inverse of :func:`cantor_pair`."""
    z = np.asarray(n, dtype=np.int64)
    if np.any(z < 0):
        raise ValueError("cantor_unpair needs non-negative integers")
    w = np.floor((np.sqrt(8.0 * z.astype(np.float64) + 1.0) - 1.0) / 2.0).astype(np.int64)
    # float sqrt can be off by one once 8n + 1 is no longer exact in a double
    if np.size(z) and np.max(z) >= 1 << 40:
        w = np.where(_triangle(w) > z, w - 1, w)
        w = np.where(_triangle(w + 1) <= z, w + 1, w)
    t = _triangle(w)
    k2 = z - t
    k1 = w - k2
    if k1.ndim == 0:
        return int(k1), int(k2)
    return k1, k2


def warp_region_map(regmap1, frame1, frame2, cam, epsilon_rel: float = DEFAULT_EPSILON_REL) -> np.ndarray:
    """Transport region labels of view 1 onto the pixel grid of view 2.

    Each occlusion-filtered correspondence ``p -> q`` writes ``label1[p]`` at
    ``q``; when several pixels land on the same ``q`` the one nearest to camera 2
    wins. Pixels receiving nothing hold :data:`HOLE`.
    """
    labels1 = regmap1.labels if hasattr(regmap1, "labels") else np.asarray(regmap1)
    if labels1.shape != frame1.depth.shape:
        raise ValueError(f"region map {labels1.shape} does not match frame {frame1.depth.shape}")
    corr = compute_correspondences(frame1, frame2, cam, epsilon_rel)
    H, W = frame2.depth.shape
    out = np.full((H, W), HOLE, dtype=np.int64)
    if len(corr) == 0:
        return out
    qflat = corr.q[:, 0] * W + corr.q[:, 1]
    # lexsort is stable: ties in depth keep scanline order of p
    order = np.lexsort((corr.depth2, qflat))
    qs = qflat[order]
    first = np.ones(len(qs), dtype=bool)
    first[1:] = qs[1:] != qs[:-1]
    winners = order[first]
    out.ravel()[qflat[winners]] = labels1[corr.p[winners, 0], corr.p[winners, 1]]
    return out


@dataclass(eq=False)
class RegionIoUTable:
    """Sparse region overlap table; one row per overlapping ``(u, v)`` label pair."""

    u: np.ndarray
    v: np.ndarray
    intersection: np.ndarray
    size_u: np.ndarray
    size_v: np.ndarray
    ops: int = 0

    @property
    def union(self) -> np.ndarray:
        return self.size_u + self.size_v - self.intersection

    @property
    def iou(self) -> np.ndarray:
        return self.intersection / np.maximum(self.union, 1)

    def __len__(self) -> int:
        return len(self.u)

    def rows(self) -> list[dict]:
        return [
            {"u": int(u), "v": int(v), "intersection": int(i), "iou": float(j)}
            for u, v, i, j in zip(self.u, self.v, self.intersection, self.iou)
        ]

    def as_dict(self) -> dict[tuple[int, int], tuple[int, int]]:
        """``(u, v) -> (intersection, union)``, exact integers."""
        return {
            (int(u), int(v)): (int(i), int(n))
            for u, v, i, n in zip(self.u, self.v, self.intersection, self.union)
        }


def region_iou_table(warped_u: np.ndarray, regmap_v) -> RegionIoUTable:
    """Overlap counts and IoU of every overlapping region pair.

    ``|u|`` counts the non-hole support of ``warped_u``; ``|v|`` the full
    region in ``regmap_v``. ``ops`` records the work done: one step per
    non-hole pixel plus one per distinct overlapping pair.
    """
    U = np.asarray(warped_u, dtype=np.int64)
    V = regmap_v.labels if hasattr(regmap_v, "labels") else np.asarray(regmap_v)
    V = np.asarray(V, dtype=np.int64)
    if U.shape != V.shape:
        raise ValueError(f"dimension mismatch: warped map {U.shape} vs region map {V.shape}")
    size_v = np.bincount(V.ravel()) if V.size else np.zeros(0, np.int64)
    keep = U != HOLE
    u, v = U[keep], V[keep]
    empty = np.zeros(0, dtype=np.int64)
    if u.size == 0:
        return RegionIoUTable(empty, empty, empty, empty, empty, ops=0)
    codes = cantor_pair(u, v)
    top = int(codes.max())
    if top < _BINCOUNT_LIMIT:
        hist = np.bincount(codes, minlength=top + 1)
        keys = np.flatnonzero(hist)
        counts = hist[keys]
    else:
        keys, counts = np.unique(codes, return_counts=True)
    ku, kv = cantor_unpair(keys)
    size_u = np.bincount(u)
    order = np.lexsort((kv, ku))
    ku, kv, counts = ku[order], kv[order], counts[order]
    return RegionIoUTable(ku, kv, counts.astype(np.int64), size_u[ku], size_v[kv], ops=int(u.size + len(keys)))


def brute_force_iou_table(warped_u: np.ndarray, regmap_v) -> dict[tuple[int, int], tuple[int, int]]:
    """Reference ``O(|R1| * |R2|)`` mask-intersection method, as ``(u, v) -> (inter, union)``."""
    U = np.asarray(warped_u, dtype=np.int64)
    V = np.asarray(regmap_v.labels if hasattr(regmap_v, "labels") else regmap_v, dtype=np.int64)
    valid = U != HOLE
    out = {}
    for a in np.unique(U[valid]):
        mu = U == a
        for b in np.unique(V):
            mv = V == b
            inter = int(np.sum(mu & mv))
            if inter:
                out[(int(a), int(b))] = (inter, int(mu.sum() + mv.sum()) - inter)
    return out


@dataclass(eq=False)
class RegionMatchSet:
    u: np.ndarray
    v: np.ndarray
    iou: np.ndarray

    def __len__(self) -> int:
        return len(self.u)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.u.tolist(), self.v.tolist()))


def match_regions(table: RegionIoUTable, tau_region: float = DEFAULT_TAU) -> RegionMatchSet:
    """Mutual-best region pairs with IoU at least ``tau_region``.

    ``(u, v)`` survives when ``v`` is the best partner of ``u`` and ``u`` the
    best partner of ``v``; equal IoUs prefer the smaller label.
    """
    if not 0 < tau_region <= 1:
        raise ValueError(f"tau_region must lie in (0, 1], got {tau_region}")
    if len(table) == 0:
        z = np.zeros(0, dtype=np.int64)
        return RegionMatchSet(z, z.copy(), np.zeros(0))
    inter, union = table.intersection, table.union
    iou = table.iou
    best_v = _best_partner(table.u, table.v, inter, union)
    best_u = _best_partner(table.v, table.u, inter, union)
    mutual = best_v & best_u
    mutual &= inter >= tau_region * union
    return RegionMatchSet(table.u[mutual], table.v[mutual], iou[mutual])


def _best_partner(key, other, inter, union) -> np.ndarray:
    """Mask of rows holding, for each ``key``, the max-IoU row (smallest ``other`` on ties)."""
    n = len(key)
    best = {}
    for i in range(n):
        k = int(key[i])
        j = best.get(k)
        if j is None:
            best[k] = i
            continue
        # compare inter_i/union_i with inter_j/union_j exactly
        lhs = int(inter[i]) * int(union[j])
        rhs = int(inter[j]) * int(union[i])
        if lhs > rhs or (lhs == rhs and other[i] < other[j]):
            best[k] = i
    mask = np.zeros(n, dtype=bool)
    mask[list(best.values())] = True
    return mask
