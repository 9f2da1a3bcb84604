import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regconsist import IGNORE_LABEL
from regconsist.geometry import CameraModel, Pose
from regconsist.io import (
    DatasetManifest,
    DimensionError,
    Frame,
    FrameRecord,
    HeaderError,
    MissingFileError,
    RecordError,
    VersionError,
    load_checkpoint,
    load_frame,
    load_manifest,
    load_pair_batch,
    read_depth,
    read_pgm16,
    read_ppm,
    save_checkpoint,
    save_frame,
    save_manifest,
    save_pair_batch,
    write_depth,
    write_pgm16,
    write_ppm,
)
from regconsist.sampling import PairBatch


def _manifest_with(tmp_path, frame, cam=None):
    cam = cam or CameraModel(4, 4, 2, 2, frame.rgb.shape[1], frame.rgb.shape[0])
    rec = save_frame(frame, tmp_path)
    m = DatasetManifest({"cam0": cam}, [rec], root=tmp_path)
    save_manifest(m, tmp_path / "manifest.json")
    return load_manifest(tmp_path)


def _frame(h=4, w=4, depth=2.0, labels=True):
    rgb = np.arange(h * w * 3, dtype=np.uint8).reshape(h, w, 3)
    d = np.full((h, w), depth, dtype=np.float32)
    lab = np.arange(h * w, dtype=np.uint16).reshape(h, w) if labels else None
    return Frame("f0", rgb, d, Pose.identity(), "cam0", lab)


def test_one_frame_manifest_all_valid(tmp_path):
    m = _manifest_with(tmp_path, _frame())
    fr = load_frame(m, "f0")
    assert fr.rgb.dtype == np.uint8 and fr.rgb.shape == (4, 4, 3)
    assert fr.depth.dtype == np.float32
    assert int(fr.valid.sum()) == 16
    assert fr.labels.dtype == np.uint16


def test_zero_depth_is_hole(tmp_path):
    f = _frame()
    f.depth[0, 0] = 0.0
    fr = load_frame(_manifest_with(tmp_path, f), "f0")
    assert not fr.valid[0, 0]
    assert int(fr.valid.sum()) == 15


def test_missing_labels_load(tmp_path):
    fr = load_frame(_manifest_with(tmp_path, _frame(labels=False)), "f0")
    assert fr.labels is None


def test_frame_round_trip(tmp_path):
    f = _frame(5, 3)
    f.depth[1, 2] = np.nan
    m = _manifest_with(tmp_path, f)
    g = m.load_frame("f0")
    assert np.array_equal(g.rgb, f.rgb)
    assert np.array_equal(g.depth, f.depth, equal_nan=True)
    assert np.array_equal(g.labels, f.labels)
    assert g.pose == f.pose


def test_manifest_header_declares_convention(tmp_path):
    _manifest_with(tmp_path, _frame())
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["pose_convention"] == "camera_to_world"
    assert d["ignore_label"] == IGNORE_LABEL
    assert set(d["cameras"]["cam0"]) == {"fx", "fy", "cx", "cy", "width", "height"}


def test_distinct_errors_name_the_path(tmp_path):
    m = _manifest_with(tmp_path, _frame())
    rec = m.record("f0")
    # missing file
    (tmp_path / rec.rgb_path).rename(tmp_path / "moved.ppm")
    with pytest.raises(MissingFileError, match=rec.rgb_path):
        load_frame(m, "f0")
    (tmp_path / "moved.ppm").rename(tmp_path / rec.rgb_path)
    # header mismatch
    good = (tmp_path / rec.depth_path).read_bytes()
    (tmp_path / rec.depth_path).write_bytes(b"XXXX" + good[4:])
    with pytest.raises(HeaderError, match=rec.depth_path):
        load_frame(m, "f0")
    # dimension mismatch between rasters
    write_depth(tmp_path / rec.depth_path, np.ones((3, 4), np.float32))
    with pytest.raises(DimensionError, match=rec.depth_path):
        load_frame(m, "f0")


def test_truncated_raster_is_dimension_error(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), np.uint8))
    data = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "a.ppm").write_bytes(data[:-1])
    with pytest.raises(DimensionError):
        read_ppm(tmp_path / "a.ppm")


def test_manifest_rejects_duplicates_and_unknown_camera():
    rec = FrameRecord("a", "a.ppm", "a.depth", Pose.identity(), "cam0")
    cam = CameraModel(1, 1, 0, 0, 1, 1)
    with pytest.raises(ValueError, match="duplicate"):
        DatasetManifest({"cam0": cam}, [rec, rec])
    with pytest.raises(ValueError, match="unknown camera"):
        DatasetManifest({"other": cam}, [rec])


def test_manifest_version_checked(tmp_path):
    _manifest_with(tmp_path, _frame())
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(VersionError):
        load_manifest(tmp_path)


def test_golden_bytes_little_endian(tmp_path):
    write_pgm16(tmp_path / "l.pgm", np.array([[1, 258]], dtype=np.uint16))
    assert (tmp_path / "l.pgm").read_bytes() == b"P5\n2 1\n65535\n\x01\x00\x02\x01"
    write_depth(tmp_path / "d.bin", np.array([[1.0]], dtype=np.float32))
    assert (tmp_path / "d.bin").read_bytes() == b"RCDP" + bytes([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]) + b"\x00\x00\x80\x3f"
    b = PairBatch(("a", "b"), [[1, 2]], [[3, 258]], "random-exact")
    save_pair_batch(b, tmp_path / "p.rcpb")
    raw = (tmp_path / "p.rcpb").read_bytes()
    assert raw[:4] == b"RCPB"
    assert raw[-16:] == bytes([1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 2, 1, 0, 0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm16_round_trip(tmp_path_factory, labels):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm16(p, labels)
    assert np.array_equal(read_pgm16(p), labels)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_depth_round_trip(tmp_path_factory, depth):
    p = tmp_path_factory.mktemp("depth") / "x.depth"
    write_depth(p, depth)
    assert np.array_equal(read_depth(p), depth, equal_nan=True)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, rgb):
    p = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(p, rgb)
    assert np.array_equal(read_ppm(p), rgb)


def test_empty_pair_batch_round_trip(tmp_path):
    b = PairBatch(("a", "b"), np.zeros((0, 2)), np.zeros((0, 2)), "balanced-region", requested=5, dropped=5, seed=1)
    save_pair_batch(b, tmp_path / "e.rcpb")
    c = load_pair_batch(tmp_path / "e.rcpb")
    assert c == b and len(c) == 0


def test_large_pair_batch_round_trips_byte_identically(tmp_path):
    rng = np.random.default_rng(0)
    n = 81920
    b = PairBatch(("v1", "v2"), rng.integers(0, 224, (n, 2)), rng.integers(0, 224, (n, 2)), "balanced-region", n, 0, 7)
    save_pair_batch(b, tmp_path / "a.rcpb")
    c = load_pair_batch(tmp_path / "a.rcpb")
    assert c == b
    save_pair_batch(c, tmp_path / "b.rcpb")
    assert (tmp_path / "a.rcpb").read_bytes() == (tmp_path / "b.rcpb").read_bytes()


def test_corrupted_pair_batch_names_offset(tmp_path):
    b = PairBatch(("a", "b"), [[0, 0], [1, 1]], [[2, 2], [3, 3]], "random-exact")
    save_pair_batch(b, tmp_path / "a.rcpb")
    raw = (tmp_path / "a.rcpb").read_bytes()
    (tmp_path / "a.rcpb").write_bytes(raw[:-5])
    with pytest.raises(RecordError, match="byte offset"):
        load_pair_batch(tmp_path / "a.rcpb")


def test_pair_batch_version_mismatch(tmp_path):
    b = PairBatch(("a", "b"), [[0, 0]], [[0, 0]], "random-exact")
    save_pair_batch(b, tmp_path / "a.rcpb")
    raw = bytearray((tmp_path / "a.rcpb").read_bytes())
    raw[4] = 9
    (tmp_path / "a.rcpb").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_pair_batch(tmp_path / "a.rcpb")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(4, np.float32), "s": np.float32(2.0) * np.ones(())}
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"kind": "test"})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"kind": "test"}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_truncation_detected(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {"w": np.ones((8, 8), np.float32)})
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:-4])
    with pytest.raises(RecordError):
        load_checkpoint(tmp_path / "c.ckpt")
