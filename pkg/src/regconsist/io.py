"""On-disk formats: frames, dataset manifests, pair batches, checkpoints.

Rasters
    RGB      binary PPM (P6, maxval 255)
    labels   binary PGM (P5, maxval 65535); samples are little-endian uint16
    depth    16-byte header ``b"RCDP" | u32 width | u32 height | u32 version``
             followed by little-endian float32 metres, row-major

Manifest
    JSON with ``cameras`` (id -> fx, fy, cx, cy, width, height), ``frames``
    (id, rgb, depth, optional labels, camera_id, pose {R, t}), the pose
    convention, units and the ignore label. Paths are relative to the
    manifest file.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import IGNORE_LABEL
from .geometry import CameraModel, Pose, valid_depth

MANIFEST_VERSION = 1
POSE_CONVENTION = "camera_to_world"

DEPTH_MAGIC = b"RCDP"
DEPTH_VERSION = 1
PAIR_MAGIC = b"RCPB"
PAIR_VERSION = 1
CKPT_MAGIC = b"RCCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Base class for malformed or inconsistent files."""


class MissingFileError(FormatError, FileNotFoundError):
    pass


class HeaderError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class VersionError(FormatError):
    pass


class RecordError(FormatError):
    pass


@dataclass(eq=False)
class Frame:
    """One registered RGB-D view, optionally labelled."""

    id: str
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, holes are <= 0 or non-finite
    pose: Pose
    camera_id: str = "cam0"
    labels: np.ndarray | None = None  # (H, W) uint16

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return valid_depth(self.depth)


@dataclass
class FrameRecord:
    id: str
    rgb_path: str
    depth_path: str
    pose: Pose
    camera_id: str
    label_path: str | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "rgb": self.rgb_path,
            "depth": self.depth_path,
            "camera_id": self.camera_id,
            "pose": self.pose.to_dict(),
        }
        if self.label_path is not None:
            d["labels"] = self.label_path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(
            id=str(d["id"]),
            rgb_path=d["rgb"],
            depth_path=d["depth"],
            pose=Pose.from_dict(d["pose"]),
            camera_id=d["camera_id"],
            label_path=d.get("labels"),
        )


@dataclass
class DatasetManifest:
    cameras: dict[str, CameraModel]
    frames: list[FrameRecord]
    root: Path = field(default_factory=Path.cwd)
    units: str = "meters"
    ignore_label: int = IGNORE_LABEL
    num_classes: int | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        seen = set()
        for fr in self.frames:
            if fr.id in seen:
                raise ValueError(f"duplicate frame id {fr.id!r}")
            seen.add(fr.id)
            if fr.camera_id not in self.cameras:
                raise ValueError(f"frame {fr.id!r} references unknown camera {fr.camera_id!r}")
        self._index = {fr.id: fr for fr in self.frames}

    @property
    def ids(self) -> list[str]:
        return [fr.id for fr in self.frames]

    def record(self, frame_id: str) -> FrameRecord:
        try:
            return self._index[frame_id]
        except KeyError:
            raise KeyError(f"no frame {frame_id!r} in manifest") from None

    def load_frame(self, frame_id: str) -> Frame:
        return load_frame(self, frame_id)

    def to_dict(self) -> dict:
        d = {
            "version": MANIFEST_VERSION,
            "pose_convention": POSE_CONVENTION,
            "units": self.units,
            "ignore_label": self.ignore_label,
            "cameras": {k: c.to_dict() for k, c in self.cameras.items()},
            "frames": [fr.to_dict() for fr in self.frames],
        }
        if self.num_classes is not None:
            d["num_classes"] = self.num_classes
        if self.class_names is not None:
            d["class_names"] = list(self.class_names)
        return d


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    d = json.loads(path.read_text())
    if d.get("version") != MANIFEST_VERSION:
        raise VersionError(f"{path}: manifest version {d.get('version')!r}, expected {MANIFEST_VERSION}")
    if d.get("pose_convention", POSE_CONVENTION) != POSE_CONVENTION:
        raise HeaderError(f"{path}: unsupported pose convention {d['pose_convention']!r}")
    return DatasetManifest(
        cameras={k: CameraModel.from_dict(c) for k, c in d["cameras"].items()},
        frames=[FrameRecord.from_dict(f) for f in d["frames"]],
        root=path.parent,
        units=d.get("units", "meters"),
        ignore_label=int(d.get("ignore_label", IGNORE_LABEL)),
        num_classes=d.get("num_classes"),
        class_names=d.get("class_names"),
    )


def load_frame(manifest: DatasetManifest, frame_id: str) -> Frame:
    rec = manifest.record(frame_id)
    cam = manifest.cameras[rec.camera_id]
    root = Path(manifest.root)
    rgb = read_ppm(root / rec.rgb_path)
    depth = read_depth(root / rec.depth_path)
    if depth.shape != rgb.shape[:2]:
        raise DimensionError(
            f"{root / rec.depth_path}: depth is {depth.shape[1]}x{depth.shape[0]}, "
            f"RGB {root / rec.rgb_path} is {rgb.shape[1]}x{rgb.shape[0]}"
        )
    if depth.shape != cam.shape:
        raise DimensionError(f"{root / rec.depth_path}: raster {depth.shape} does not match camera {cam.shape}")
    labels = None
    if rec.label_path is not None:
        labels = read_pgm16(root / rec.label_path)
        if labels.shape != depth.shape:
            raise DimensionError(f"{root / rec.label_path}: labels {labels.shape} vs depth {depth.shape}")
    return Frame(frame_id, rgb, depth, rec.pose, rec.camera_id, labels)


def save_frame(frame: Frame, root, prefix: str | None = None) -> FrameRecord:
    """Write the rasters of ``frame`` under ``root`` and return its manifest record."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stem = prefix or frame.id
    rgb_name, depth_name = f"{stem}.ppm", f"{stem}.depth"
    write_ppm(root / rgb_name, frame.rgb)
    write_depth(root / depth_name, frame.depth)
    label_name = None
    if frame.labels is not None:
        label_name = f"{stem}.labels.pgm"
        write_pgm16(root / label_name, frame.labels)
    return FrameRecord(frame.id, rgb_name, depth_name, frame.pose, frame.camera_id, label_name)


# --- Netpbm ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"missing file: {path}") from None


def _parse_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise HeaderError(f"{path}: expected {magic.decode()} magic, found {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise HeaderError(f"{path}: malformed header near byte {pos}")
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates header and raster
    pos += 1
    width, height, maxval = fields
    return width, height, maxval, pos


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    data = _read_bytes(path)
    w, h, maxval, off = _parse_pnm_header(data, b"P6", path)
    if maxval != 255:
        raise HeaderError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    n = w * h * 3
    if len(data) - off != n:
        raise DimensionError(f"{path}: header says {w}x{h} RGB ({n} bytes), raster has {len(data) - off}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(h, w, 3).copy()


def write_pgm16(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D raster, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("label values must fit in uint16")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(labels.astype("<u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = _read_bytes(path)
    w, h, maxval, off = _parse_pnm_header(data, b"P5", path)
    if maxval != 65535:
        raise HeaderError(f"{path}: expected 16-bit PGM (maxval 65535), got maxval={maxval}")
    n = w * h * 2
    if len(data) - off != n:
        raise DimensionError(f"{path}: header says {w}x{h} uint16 ({n} bytes), raster has {len(data) - off}")
    return np.frombuffer(data, dtype="<u2", count=w * h, offset=off).reshape(h, w).astype(np.uint16)


# --- depth -------------------------------------------------------------------


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<III", w, h, DEPTH_VERSION))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 16 or data[:4] != DEPTH_MAGIC:
        raise HeaderError(f"{path}: not a depth raster (magic {data[:4]!r})")
    w, h, version = struct.unpack_from("<III", data, 4)
    if version != DEPTH_VERSION:
        raise VersionError(f"{path}: depth version {version}, expected {DEPTH_VERSION}")
    n = w * h * 4
    if len(data) - 16 != n:
        raise DimensionError(f"{path}: header says {w}x{h} float32 ({n} bytes), raster has {len(data) - 16}")
    return np.frombuffer(data, dtype="<f4", count=w * h, offset=16).reshape(h, w).astype(np.float32)


# --- pair batches ------------------------------------------------------------

_PAIR_HEADER = struct.Struct("<4sIQI")  # magic, version, n_records, metadata length
_PAIR_RECORD = struct.Struct("<iiii")


def save_pair_batch(batch, path) -> None:
    """Header, JSON metadata, then one ``<iiii`` record ``(p_row, p_col, q_row, q_col)`` per pair."""
    meta = json.dumps(batch.metadata_dict(), sort_keys=True).encode()
    records = np.concatenate([batch.p, batch.q], axis=1).astype("<i4") if len(batch) else np.zeros((0, 4), "<i4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PAIR_HEADER.pack(PAIR_MAGIC, PAIR_VERSION, len(batch), len(meta)))
        fh.write(meta)
        fh.write(records.tobytes())


def load_pair_batch(path):
    from .sampling import PairBatch

    data = _read_bytes(path)
    if len(data) < _PAIR_HEADER.size:
        raise HeaderError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, n, meta_len = _PAIR_HEADER.unpack_from(data, 0)
    if magic != PAIR_MAGIC:
        raise HeaderError(f"{path}: not a pair batch (magic {magic!r})")
    if version != PAIR_VERSION:
        raise VersionError(f"{path}: pair batch version {version}, expected {PAIR_VERSION}")
    off = _PAIR_HEADER.size
    if len(data) < off + meta_len:
        raise RecordError(f"{path}: metadata truncated at byte offset {len(data)}")
    meta = json.loads(data[off : off + meta_len])
    off += meta_len
    body = len(data) - off
    if body != n * _PAIR_RECORD.size:
        bad = off + (min(body, n * _PAIR_RECORD.size) // _PAIR_RECORD.size) * _PAIR_RECORD.size
        raise RecordError(
            f"{path}: expected {n} records of {_PAIR_RECORD.size} bytes after byte {off}, "
            f"found {body} bytes; first bad record at byte offset {bad}"
        )
    rec = np.frombuffer(data, dtype="<i4", count=4 * n, offset=off).reshape(n, 4).astype(np.int64)
    return PairBatch.from_metadata(meta, rec[:, :2].copy(), rec[:, 2:].copy())


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned container of named little-endian float32 tensors plus JSON metadata."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<III", CKPT_VERSION, len(tensors), len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode()
            fh.write(struct.pack("<HB", len(nb), arr.ndim) + nb)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = _read_bytes(path)
    if data[:4] != CKPT_MAGIC:
        raise HeaderError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    version, count, meta_len = struct.unpack_from("<III", data, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 16
    meta = json.loads(data[off : off + meta_len])
    off += meta_len
    tensors = {}
    try:
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off : off + name_len].decode()
            off += name_len
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(data):
                raise RecordError(f"{path}: tensor {name!r} truncated at byte offset {off}")
            tensors[name] = np.frombuffer(data, "<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise RecordError(f"{path}: truncated tensor header at byte offset {off}") from exc
    if off != len(data):
        raise RecordError(f"{path}: {len(data) - off} trailing bytes at byte offset {off}")
    return tensors, meta


# --- small JSON helpers ------------------------------------------------------


def write_jsonl(path, rows: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
