"""Pinhole projection between registered views, occlusion-filtered pixel
correspondences, view overlap and view-pair selection.

Conventions used throughout the package:

* pixels are addressed as ``(row, col)``; the pixel with index ``(r, c)`` has
  its centre at continuous image coordinate ``u = c, v = r``;
* camera frame is x right, y down, z forward;
* poses are camera-to-world: ``X_world = R @ X_cam + t``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPSILON_REL = 0.01


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downsampled(self, factor: int) -> "CameraModel":
        """Camera seeing the image subsampled at every ``factor``-th pixel."""
        if factor == 1:
            return self
        return CameraModel(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            -(-self.width // factor),
            -(-self.height // factor),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def validate(self, tol: float = 1e-6) -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=tol):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValueError(f"rotation determinant is {np.linalg.det(self.R):.9f}, expected +1")

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=np.float64), np.array(d["t"], dtype=np.float64))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))


class Projection(NamedTuple):
    row: float
    col: float
    depth: float


def valid_depth(depth: np.ndarray) -> np.ndarray:
    """Mask of usable depth samples; zero, negative and non-finite values are holes."""
    return np.isfinite(depth) & (depth > 0)


def backproject(cam: CameraModel, rows, cols, depth) -> np.ndarray:
    """Camera-frame 3D points, shape ``(N, 3)``."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (cols - cam.cx) / cam.fx * depth
    y = (rows - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth], axis=-1)


def project_points(cam: CameraModel, pose1: Pose, pose2: Pose, rows, cols, depth):
    """Move pixels of view 1 with known depth into view 2.

    Returns continuous ``(rows2, cols2, depth2)``. Points with ``depth2 <= 0``
    lie behind camera 2; their image coordinates are meaningless.
    """
    X1 = backproject(cam, rows, cols, depth)
    rel = pose2.inverse().compose(pose1)
    X2 = X1 @ rel.R.T + rel.t
    z2 = X2[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        cols2 = cam.fx * X2[..., 0] / z2 + cam.cx
        rows2 = cam.fy * X2[..., 1] / z2 + cam.cy
    return rows2, cols2, z2


def project_pixel(cam: CameraModel, pose1: Pose, pose2: Pose, pixel, depth: float) -> Projection | None:
    """Continuous position and depth in view 2 of ``pixel`` seen at ``depth`` in view 1.

    Returns ``None`` when the point lies behind camera 2.
    """
    row, col = pixel
    if not (np.isfinite(depth) and depth > 0):
        raise ValueError(f"depth must be positive and finite, got {depth}")
    if not (0 <= row < cam.height and 0 <= col < cam.width):
        raise ValueError(f"pixel {pixel} outside {cam.height}x{cam.width} image")
    r2, c2, z2 = project_points(cam, pose1, pose2, [row], [col], [depth])
    if not z2[0] > 0:
        return None
    return Projection(float(r2[0]), float(c2[0]), float(z2[0]))


@dataclass(frozen=True)
class Correspondence:
    p: tuple[int, int]
    q: tuple[int, int]
    depth_at_p: float


@dataclass(eq=False)
class Correspondences:
    """Exact correspondence set between two views, stored column-wise.

    ``p`` and ``q`` are ``(N, 2)`` integer ``(row, col)`` arrays, ``depth`` the
    depth of ``p`` in view 1 and ``depth2`` the projected depth in view 2.
    """

    p: np.ndarray
    q: np.ndarray
    depth: np.ndarray
    depth2: np.ndarray

    def __len__(self) -> int:
        return len(self.p)

    def __iter__(self) -> Iterator[Correspondence]:
        for p, q, d in zip(self.p, self.q, self.depth):
            yield Correspondence((int(p[0]), int(p[1])), (int(q[0]), int(q[1])), float(d))

    @classmethod
    def empty(cls) -> "Correspondences":
        z = np.zeros((0, 2), dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros(0))


def _correspond(cam, depth1, pose1, depth2, pose2, epsilon_rel) -> Correspondences:
    H, W = depth1.shape
    rows, cols = np.nonzero(valid_depth(depth1))
    if rows.size == 0:
        return Correspondences.empty()
    d1 = depth1[rows, cols].astype(np.float64)
    r2, c2, z2 = project_points(cam, pose1, pose2, rows, cols, d1)
    # round half up (np.rint would round half to even): floor(x + 0.5) in [0, n) iff x in [-0.5, n - 0.5)
    with np.errstate(invalid="ignore"):
        ok = (z2 > 0) & (r2 >= -0.5) & (r2 < H - 0.5) & (c2 >= -0.5) & (c2 < W - 0.5)
    qr = np.full(rows.shape, -1, dtype=np.int64)
    qc = np.full(rows.shape, -1, dtype=np.int64)
    qr[ok] = np.floor(r2[ok] + 0.5).astype(np.int64)
    qc[ok] = np.floor(c2[ok] + 0.5).astype(np.int64)
    observed = np.full(rows.shape, np.nan)
    observed[ok] = depth2[qr[ok], qc[ok]]
    ok &= valid_depth(observed)
    ok[ok] = np.abs(z2[ok] - observed[ok]) <= epsilon_rel * observed[ok]
    return Correspondences(
        np.stack([rows[ok], cols[ok]], axis=1).astype(np.int64),
        np.stack([qr[ok], qc[ok]], axis=1),
        d1[ok],
        z2[ok],
    )


def compute_correspondences(frame1, frame2, cam: CameraModel, epsilon_rel: float = DEFAULT_EPSILON_REL) -> Correspondences:
    """All unoccluded exact pixel pairs from ``frame1`` into ``frame2``.

    A valid-depth pixel ``p`` of view 1 is kept when its projection rounds to an
    in-bounds pixel ``q`` of view 2 with valid depth and the z-buffer test
    ``|z_projected - z_observed(q)| <= epsilon_rel * z_observed(q)`` passes.
    """
    return _correspond(cam, frame1.depth, frame1.pose, frame2.depth, frame2.pose, epsilon_rel)


def view_overlap_iou(frame1, frame2, cam: CameraModel, epsilon_rel: float = DEFAULT_EPSILON_REL, downsample: int = 1) -> float:
    """Symmetric covered fraction ``(|C12| + |C21|) / (|valid1| + |valid2|)``."""
    d1, d2 = frame1.depth, frame2.depth
    if downsample > 1:
        d1, d2 = d1[::downsample, ::downsample], d2[::downsample, ::downsample]
        cam = cam.downsampled(downsample)
    n_valid = int(valid_depth(d1).sum()) + int(valid_depth(d2).sum())
    if n_valid == 0:
        raise ValueError(f"degenerate frames: {frame1.id!r} and {frame2.id!r} have no valid depth")
    c12 = len(_correspond(cam, d1, frame1.pose, d2, frame2.pose, epsilon_rel))
    c21 = len(_correspond(cam, d2, frame2.pose, d1, frame1.pose, epsilon_rel))
    return (c12 + c21) / n_valid


@dataclass(frozen=True)
class ViewPair:
    id1: str
    id2: str
    iou: float

    def to_dict(self) -> dict:
        return {"id1": self.id1, "id2": self.id2, "iou": self.iou}


def _pair_iou(args):
    f1, f2, cam, eps, downsample = args
    return view_overlap_iou(f1, f2, cam, eps, downsample)


def manifest_hash(manifest) -> str:
    return hashlib.sha256(json.dumps(manifest.to_dict(), sort_keys=True).encode()).hexdigest()


def select_view_pairs(
    manifest,
    iou_l: float = 0.3,
    iou_h: float = 0.9,
    cam: CameraModel | None = None,
    epsilon_rel: float = DEFAULT_EPSILON_REL,
    *,
    cache_dir: str | os.PathLike | None = None,
    downsample: int = 1,
    jobs: int = 1,
    frame_ids: Sequence[str] | None = None,
) -> list[ViewPair]:
    """Unordered frame pairs whose view overlap IoU lies in ``[iou_l, iou_h]``.

    With ``cache_dir`` set, results are stored as JSONL keyed by the manifest
    hash, the band, ``epsilon_rel`` and the downsampling factor.
    """
    if not (0.0 <= iou_l < iou_h <= 1.0):
        raise ValueError(f"need 0 <= iou_l < iou_h <= 1, got [{iou_l}, {iou_h}]")
    ids = list(frame_ids) if frame_ids is not None else [f.id for f in manifest.frames]
    if len(ids) < 2:
        raise ValueError(f"view-pair selection needs at least 2 frames, got {len(ids)}")

    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha256(
            json.dumps([manifest_hash(manifest), ids, iou_l, iou_h, epsilon_rel, downsample]).encode()
        ).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"viewpairs-{key}.jsonl"
        if cache_path.exists():
            log.info("view pairs loaded from cache %s", cache_path)
            return read_view_pairs(cache_path)

    ious = all_pair_ious(manifest, ids, cam, epsilon_rel, downsample=downsample, jobs=jobs)
    pairs = [ViewPair(a, b, iou) for (a, b), iou in ious.items() if iou_l <= iou <= iou_h]

    if cache_path is not None:
        write_view_pairs(pairs, cache_path)
    return pairs


def all_pair_ious(manifest, ids, cam=None, epsilon_rel=DEFAULT_EPSILON_REL, *, downsample=1, jobs=1) -> dict:
    """IoU for every unordered pair of ``ids`` in lexicographic index order."""
    frames = {i: manifest.load_frame(i) for i in ids}
    cams = {i: cam if cam is not None else manifest.cameras[frames[i].camera_id] for i in ids}
    todo = list(combinations(ids, 2))
    args = [(frames[a], frames[b], cams[a], epsilon_rel, downsample) for a, b in todo]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            values = list(ex.map(_pair_iou, args, chunksize=16))
    else:
        values = [_pair_iou(a) for a in args]
    return dict(zip(todo, values))


def write_view_pairs(pairs: Sequence[ViewPair], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for vp in pairs:
            fh.write(json.dumps(vp.to_dict()) + "\n")


def read_view_pairs(path) -> list[ViewPair]:
    with open(path) as fh:
        return [ViewPair(**json.loads(line)) for line in fh if line.strip()]
