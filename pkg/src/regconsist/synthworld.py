"""Procedural box-world rooms rendered by analytic ray casting.

The world frame is metric with z pointing up; the room shell is the box
``[0, X] x [0, Y] x [0, Z]``. Every frame carries exact depth, so geometry
tests can use the renderer as ground truth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import IGNORE_LABEL
from .geometry import CameraModel, Pose
from .io import DatasetManifest, Frame, save_frame, save_manifest

log = logging.getLogger(__name__)

WALL, FLOOR, CEILING = 0, 1, 2
SHELL_CLASSES = ("wall", "floor", "ceiling")
OBJECT_CLASSES = ("cabinet", "table", "sofa", "bed", "plant", "picture", "lamp", "box")
MIN_EXTENT = 0.05

# base albedo per class id
PALETTE = np.array(
    [
        [0.80, 0.77, 0.70],  # wall
        [0.55, 0.40, 0.28],  # floor
        [0.92, 0.92, 0.94],  # ceiling
        [0.62, 0.30, 0.20],
        [0.30, 0.45, 0.70],
        [0.35, 0.65, 0.35],
        [0.75, 0.65, 0.25],
        [0.55, 0.30, 0.60],
        [0.25, 0.60, 0.62],
        [0.85, 0.45, 0.55],
        [0.45, 0.45, 0.45],
    ]
)


def default_camera() -> CameraModel:
    return CameraModel(64.0, 64.0, 64.0, 64.0, 128, 128)


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int
    albedo: tuple[float, float, float]
    checker: float = 0.2

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)


@dataclass
class Scene:
    extent: tuple[float, float, float]
    boxes: list[Box]
    light: tuple[float, float, float] = (0.35, 0.55, 0.76)
    seed: int = 0
    shell_checker: float = 0.5
    num_classes: int = len(SHELL_CLASSES) + len(OBJECT_CLASSES)

    @property
    def class_names(self) -> list[str]:
        return list(SHELL_CLASSES + OBJECT_CLASSES)[: self.num_classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        d = dict(d)
        d["boxes"] = [Box(**{k: tuple(v) if isinstance(v, list) else v for k, v in b.items()}) for b in d["boxes"]]
        d["extent"] = tuple(d["extent"])
        d["light"] = tuple(d["light"])
        return cls(**d)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.extent) - margin))


def generate_scene(
    seed: int,
    n_objects: int = 8,
    room_extent=(6.0, 4.0, 2.5),
    *,
    n_object_classes: int = 6,
    wall_fraction: float = 0.3,
    max_tries: int = 200,
) -> Scene:
    """Random furnished room, deterministic in ``seed``.

    Floor objects stand on the floor without overlapping; a ``wall_fraction``
    of objects are thin panels hung on the walls.
    """
    if n_objects < 1:
        raise ValueError(f"n_objects must be >= 1, got {n_objects}")
    if not 1 <= n_object_classes <= len(OBJECT_CLASSES):
        raise ValueError(f"n_object_classes must be in [1, {len(OBJECT_CLASSES)}]")
    X, Y, Z = map(float, room_extent)
    if min(X, Y) < 1.0 or Z < 1.0:
        raise ValueError(f"room extent {room_extent} too small to place objects (need >= 1 m per axis)")
    rng = np.random.default_rng(seed)
    boxes: list[Box] = []
    labels = len(SHELL_CLASSES) + np.arange(n_object_classes)
    # each class appears at least once when n_objects allows
    order = list(rng.permutation(labels))
    while len(order) < n_objects:
        order.append(int(rng.choice(labels)))
    for i in range(n_objects):
        label = int(order[i])
        on_wall = rng.random() < wall_fraction
        for _ in range(max_tries):
            if on_wall:
                box = _wall_panel(rng, X, Y, Z)
            else:
                w, d = rng.uniform(0.3, min(1.2, X / 3)), rng.uniform(0.3, min(1.2, Y / 3))
                h = rng.uniform(0.3, min(1.6, 0.8 * Z))
                x0, y0 = rng.uniform(0.05, X - w - 0.05), rng.uniform(0.05, Y - d - 0.05)
                box = ((x0, y0, 0.0), (x0 + w, y0 + d, h))
            if not any(_overlap(box, (b.lo, b.hi)) for b in boxes):
                break
        else:
            raise ValueError(f"room {room_extent} too small to place {n_objects} objects")
        jitter = rng.uniform(0.85, 1.15, size=3)
        albedo = np.clip(PALETTE[label] * jitter, 0.05, 1.0)
        boxes.append(
            Box(
                tuple(float(v) for v in box[0]),
                tuple(float(v) for v in box[1]),
                label,
                tuple(float(v) for v in albedo),
                float(rng.uniform(0.1, 0.3)),
            )
        )
    light = rng.normal(size=3) * 0.2 + np.array([0.35, 0.55, 0.76])
    light /= np.linalg.norm(light)
    return Scene(
        (X, Y, Z),
        boxes,
        tuple(float(v) for v in light),
        int(seed),
        num_classes=len(SHELL_CLASSES) + n_object_classes,
    )


def _wall_panel(rng, X, Y, Z):
    thick = 0.06
    side = rng.integers(4)
    span = X if side < 2 else Y
    w = rng.uniform(0.4, min(1.2, span - 0.3))
    h = rng.uniform(0.4, min(1.0, Z - 0.6))
    z0 = rng.uniform(0.3, Z - h - 0.2)
    if side < 2:
        x0 = rng.uniform(0.1, X - w - 0.1)
        y0 = 0.0 if side == 0 else Y - thick
        return (x0, y0, z0), (x0 + w, y0 + thick, z0 + h)
    y0 = rng.uniform(0.1, Y - w - 0.1)
    x0 = 0.0 if side == 2 else X - thick
    return (x0, y0, z0), (x0 + thick, y0 + w, z0 + h)


def _overlap(a, b, gap=0.05) -> bool:
    (alo, ahi), (blo, bhi) = a, b
    return all(alo[k] < bhi[k] + gap and blo[k] < ahi[k] + gap for k in range(3))


def look_pose(position, yaw_deg: float, pitch_deg: float = 0.0) -> Pose:
    """Camera at ``position`` looking along ``yaw`` (from +x towards +y), tilted down by ``pitch``."""
    yaw, pitch = np.deg2rad(yaw_deg), np.deg2rad(pitch_deg)
    forward = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), np.asarray(position, dtype=float))


def _slabs(origin, dirs, lo, hi):
    """Entry/exit ray parameters against boxes; shapes ``(P, N)`` and entry/exit axes."""
    o = origin[None, None, :]
    d = dirs[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - o) / d
        t2 = (hi[None] - o) / d
    parallel = d == 0
    inside = (o >= lo[None]) & (o <= hi[None])
    tn = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tf = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return tn.max(axis=2), tf.min(axis=2), tn.argmax(axis=2), tf.argmin(axis=2)


def cast_rays(scene: Scene, cam: CameraModel, pose: Pose, rows, cols):
    """First surface hit for rays through continuous pixel positions.

    Returns ``(depth, label, hit_world, normal, which)``; depth is the camera-frame
    z of the hit.
    """
    rows = np.asarray(rows, dtype=np.float64).ravel()
    cols = np.asarray(cols, dtype=np.float64).ravel()
    dcam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(rows)], axis=1)
    dirs = dcam @ pose.R.T
    origin = pose.t
    P = len(rows)

    shell_lo, shell_hi = np.zeros(3), np.asarray(scene.extent, dtype=float)
    _, t_exit, _, exit_axis = _slabs(origin, dirs, shell_lo[None], shell_hi[None])
    depth = t_exit[:, 0]
    axis = exit_axis[:, 0]
    along = dirs[np.arange(P), axis]
    label = np.where(axis == 2, np.where(along < 0, FLOOR, CEILING), WALL)
    which = np.full(P, -1)

    if scene.boxes:
        lo = np.array([b.lo for b in scene.boxes])
        hi = np.array([b.hi for b in scene.boxes])
        t_in, t_out, in_axis, _ = _slabs(origin, dirs, lo, hi)
        hit = (t_in <= t_out) & (t_in > 0)
        t_in = np.where(hit, t_in, np.inf)
        nearest = np.argmin(t_in, axis=1)
        tn = t_in[np.arange(P), nearest]
        closer = tn < depth
        depth = np.where(closer, tn, depth)
        which = np.where(closer, nearest, -1)
        box_labels = np.array([b.label for b in scene.boxes])
        label = np.where(closer, box_labels[nearest], label)
        axis = np.where(closer, in_axis[np.arange(P), nearest], axis)
        along = dirs[np.arange(P), axis]

    normal = np.zeros((P, 3))
    normal[np.arange(P), axis] = -np.sign(along)
    hit_world = origin[None] + depth[:, None] * dirs
    return depth, label, hit_world, normal, which


def _shade(scene: Scene, label, hit_world, normal, which):
    albedo = PALETTE[label].copy()
    cell = np.full(len(label), scene.shell_checker)
    if scene.boxes:
        box_alb = np.array([b.albedo for b in scene.boxes])
        box_cell = np.array([b.checker for b in scene.boxes])
        obj = which >= 0
        albedo[obj] = box_alb[which[obj]]
        cell[obj] = box_cell[which[obj]]
    # parity over the two in-plane axes only; the coordinate along the normal sits on a face boundary
    idx = np.floor(hit_world / cell[:, None]).astype(np.int64)
    in_plane = normal == 0
    parity = (idx * in_plane).sum(axis=1) % 2
    checker = np.where(parity == 0, 1.0, 0.8)
    lam = np.clip(normal @ np.asarray(scene.light), 0.0, None)
    color = albedo * (0.45 + 0.55 * lam)[:, None] * checker[:, None]
    return np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)


def render_view(scene: Scene, cam: CameraModel, pose: Pose, frame_id: str = "view", camera_id: str = "cam0") -> Frame:
    """Ray-cast RGB, exact depth and class labels for one pose."""
    if not scene.contains(pose.t):
        raise ValueError(f"pose position {pose.t.tolist()} is outside the room shell {scene.extent}")
    rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
    depth, label, hit, normal, which = cast_rays(scene, cam, pose, rows, cols)
    rgb = _shade(scene, label, hit, normal, which).reshape(cam.height, cam.width, 3)
    return Frame(
        frame_id,
        rgb,
        depth.reshape(cam.shape).astype(np.float32),
        pose,
        camera_id,
        label.reshape(cam.shape).astype(np.uint16),
    )


def visible_from(scene: Scene, cam: CameraModel, pose: Pose, points, rel_tol: float = 1e-6) -> np.ndarray:
    """Ground-truth visibility of world surface points from a camera.

    A point is visible when it projects inside the image (nearest pixel in
    bounds) and the ray towards it hits no surface before it.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Xc = (points - pose.t) @ pose.R
    z = Xc[:, 2]
    vis = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = cam.fx * Xc[:, 0] / z + cam.cx
        rows = cam.fy * Xc[:, 1] / z + cam.cy
    vis &= (np.floor(rows + 0.5) >= 0) & (np.floor(rows + 0.5) < cam.height)
    vis &= (np.floor(cols + 0.5) >= 0) & (np.floor(cols + 0.5) < cam.width)
    if vis.any():
        d, *_ = cast_rays(scene, cam, pose, rows[vis], cols[vis])
        vis[vis] = np.abs(d - z[vis]) <= rel_tol * z[vis]
    return vis


def surface_points(frame: Frame, cam: CameraModel) -> np.ndarray:
    """World points of every pixel of a rendered frame, shape ``(H, W, 3)``."""
    rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
    d = frame.depth.astype(np.float64)
    Xc = np.stack([(cols - cam.cx) / cam.fx * d, (rows - cam.cy) / cam.fy * d, d], axis=-1)
    return Xc @ frame.pose.R.T + frame.pose.t


def sample_grid_views(
    scene: Scene,
    height: float = 1.2,
    grid_step: float = 1.0,
    yaw_step: float = 45.0,
    cam: CameraModel | None = None,
    *,
    clearance: float = 0.25,
    pitch: float = 0.0,
) -> list[Pose]:
    """Poses on the interior points of a horizontal grid, ``360 / yaw_step`` per point.

    Grid points inside (or within ``clearance`` of) an object are skipped.
    """
    if grid_step <= 0:
        raise ValueError(f"grid_step must be positive, got {grid_step}")
    n_yaw = 360.0 / yaw_step
    if yaw_step <= 0 or abs(n_yaw - round(n_yaw)) > 1e-9:
        raise ValueError(f"yaw_step must divide 360, got {yaw_step}")
    X, Y, Z = scene.extent
    if not 0 < height < Z:
        raise ValueError(f"height {height} outside the room (0, {Z})")
    xs = [k * grid_step for k in range(1, int(np.ceil(X / grid_step)) + 1) if k * grid_step < X]
    ys = [k * grid_step for k in range(1, int(np.ceil(Y / grid_step)) + 1) if k * grid_step < Y]
    poses = []
    for x in xs:
        for y in ys:
            p = np.array([x, y, height])
            blocked = any(
                np.all(p > np.subtract(b.lo, clearance)) and np.all(p < np.add(b.hi, clearance)) for b in scene.boxes
            )
            if blocked:
                continue
            for k in range(int(round(n_yaw))):
                poses.append(look_pose(p, k * yaw_step, pitch))
    if not poses:
        raise ValueError("no free grid point inside the room shell")
    return poses


@dataclass
class LabelRemap:
    """Many-to-one label mapping; dropped and unmapped labels become the ignore value."""

    mapping: dict[int, int] = field(default_factory=dict)
    dropped: set[int] = field(default_factory=set)

    def __post_init__(self):
        both = set(self.mapping) & set(self.dropped)
        if both:
            raise ValueError(f"labels both mapped and dropped: {sorted(both)}")
        for k, v in self.mapping.items():
            if not (0 <= k <= 65535 and 0 <= v <= 65535):
                raise ValueError(f"label mapping {k}->{v} outside uint16")


def remap_labels(labelmap: np.ndarray, remap: LabelRemap, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    lut = np.full(65536, ignore_label, dtype=np.uint16)
    for src, dst in remap.mapping.items():
        lut[src] = dst
    return lut[np.asarray(labelmap).astype(np.uint16)]


def build_world(
    out_dir,
    seed: int = 0,
    n_objects: int = 8,
    room_extent=(6.0, 4.0, 2.5),
    cam: CameraModel | None = None,
    *,
    n_object_classes: int = 6,
    height: float = 1.2,
    grid_step: float = 1.0,
    yaw_step: float = 45.0,
    pitch: float = 0.0,
) -> DatasetManifest:
    """Generate a scene, render its grid views and write a dataset manifest."""
    cam = cam or default_camera()
    out = Path(out_dir)
    scene = generate_scene(seed, n_objects, room_extent, n_object_classes=n_object_classes)
    poses = sample_grid_views(scene, height, grid_step, yaw_step, cam, pitch=pitch)
    records = []
    for i, pose in enumerate(poses):
        frame = render_view(scene, cam, pose, frame_id=f"v{i:04d}")
        records.append(save_frame(frame, out / "frames"))
        records[-1].rgb_path = "frames/" + records[-1].rgb_path
        records[-1].depth_path = "frames/" + records[-1].depth_path
        records[-1].label_path = "frames/" + records[-1].label_path
    manifest = DatasetManifest(
        {"cam0": cam},
        records,
        root=out,
        num_classes=scene.num_classes,
        class_names=scene.class_names,
    )
    save_manifest(manifest, out / "manifest.json")
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1))
    log.info("rendered %d views of scene seed=%d into %s", len(records), seed, out)
    return manifest
