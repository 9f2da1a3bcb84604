import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regconsist import IGNORE_LABEL
from regconsist.ssl.encoder import EncoderConfig
from regconsist.supervise import (
    ClassifierHead,
    FinetuneConfig,
    SegmentationModel,
    confusion_matrix,
    evaluate_miou,
    finetune,
    focal_loss,
    labeled_set,
    poly_lr,
    report_from_predictions,
    split_labeled,
    upsample_index,
)

SMALL = EncoderConfig((8, 8, 8), 8)


def central_difference(f, x, h=1e-3):
    """Fourth-order central difference of a scalar function at ``x``."""
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def _with(a, idx, v):
    b = a.copy()
    b[idx] = v
    return b


def _cross_entropy(z, t):
    z = z - z.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(t)), t]))


def test_focal_single_value():
    loss, _ = focal_loss(np.array([[0.0, 0.0]]), np.array([0]), gamma=2)
    assert loss == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert loss == pytest.approx(0.173287, abs=1e-6)


def test_focal_gamma0_is_cross_entropy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(0, 3, (50, 6))
        t = rng.integers(0, 6, 50)
        assert abs(focal_loss(z, t, gamma=0)[0] - _cross_entropy(z, t)) <= 1e-12


def test_focal_perfect_prediction_zero():
    z = np.array([[800.0, 0.0], [0.0, 800.0]])
    loss, g = focal_loss(z, np.array([0, 1]))
    assert loss == 0.0 and np.all(g == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(2, 8), st.floats(0.0, 4.0), st.integers(0, 2**32 - 1))
def test_focal_gradient_finite_differences(n, C, gamma, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, (n, C))
    t = rng.integers(0, C, n)
    t[rng.random(n) < 0.2] = IGNORE_LABEL
    if np.all(t == IGNORE_LABEL):
        t[0] = 0
    _, g = focal_loss(z, t, gamma)
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        num[idx] = central_difference(lambda v: focal_loss(_with(z, idx, v), t, gamma)[0], z[idx])
    err = np.abs(num - g) / np.maximum(np.maximum(np.abs(num), np.abs(g)), 1e-6)
    assert err.max() < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_focal_non_increasing_in_gamma(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, (20, 4))
    t = rng.integers(0, 4, 20)
    losses = [focal_loss(z, t, g)[0] for g in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))


def test_focal_errors():
    with pytest.raises(ValueError, match="ignore"):
        focal_loss(np.zeros((2, 3)), np.array([IGNORE_LABEL] * 2))
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 3)), np.array([0, 1]), gamma=-1)


def test_miou_examples():
    gt = np.array([[0, 0, 1, 1]])
    rep = report_from_predictions([np.zeros_like(gt)], [gt], 2)
    assert rep.per_class_iou == [0.5, 0.0]
    assert rep.miou == 0.25
    assert report_from_predictions([gt], [gt], 2).miou == 1.0
    with pytest.raises(ValueError):
        report_from_predictions([gt], [np.full_like(gt, IGNORE_LABEL)], 2)


def test_miou_absent_classes_excluded():
    gt = np.array([0, 0, 1, 1])
    rep = report_from_predictions([gt], [gt], 5)
    assert rep.miou == 1.0
    assert rep.per_class_iou[2:] == [None, None, None]
    assert rep.miou_all == pytest.approx(2 / 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7))
def test_miou_permutation_equivariant(seed, C):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, C, 200)
    gt[rng.random(200) < 0.1] = IGNORE_LABEL
    gt[0] = 0
    pred = rng.integers(0, C, 200)
    perm = rng.permutation(C)
    lut = np.append(perm, 0)
    gt_p = np.where(gt == IGNORE_LABEL, IGNORE_LABEL, perm[np.minimum(gt, C - 1)])
    a = report_from_predictions([pred], [gt], C).miou
    b = report_from_predictions([perm[pred]], [gt_p], C).miou
    assert a == pytest.approx(b, abs=1e-12)
    cm, ignored = confusion_matrix(pred, gt, C)
    assert cm.sum() == int((gt != IGNORE_LABEL).sum()) and ignored == int((gt == IGNORE_LABEL).sum())
    del lut


def test_split_counts_and_determinism():
    ids = [f"f{i:03d}" for i in range(320)]
    train, test = split_labeled(ids, 0.05, seed=1)
    assert len(train) == 16 and len(test) == 304
    assert not set(train) & set(test) and set(train) | set(test) == set(ids)
    assert split_labeled(ids, 0.05, seed=1) == (train, test)
    assert len(split_labeled(ids[:10], 0.01)[0]) == 1
    big, _ = split_labeled(ids, 0.3, seed=1)
    assert set(train) <= set(big)
    with pytest.raises(ValueError):
        split_labeled(ids[:1], 0.5)
    with pytest.raises(ValueError):
        split_labeled(ids, 1.0)


def test_split_from_manifest(small_world):
    train, test = split_labeled(small_world, 0.1, 0)
    assert len(train) == 5 and len(test) == 43


def test_poly_lr():
    cfg = FinetuneConfig(iters=100, base_lr=0.01)
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(99, cfg) == pytest.approx(0.01 * (1 / 100) ** 0.9)


def test_upsample_index():
    assert upsample_index(8, 2).tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert upsample_index(5, 5).tolist() == list(range(5))


def test_overfit_single_frame(small_frames):
    f = next(iter(small_frames.values()))
    data = labeled_set([f], size=32)
    cfg = FinetuneConfig(iters=300, base_lr=0.05, input_size=32, seed=0)
    # full-resolution features so cell boundaries do not cap the accuracy
    res = finetune(None, data, 9, cfg, encoder_config=EncoderConfig((16, 32, 32), 32, (1, 1, 1)))
    pred = res.model.predict(data.images, out_size=(32, 32))
    assert np.mean(pred == data.labels) > 0.95


def test_finetune_deterministic_and_linear_mode(small_frames):
    frames = list(small_frames.values())[:4]
    data = labeled_set(frames, size=32)
    cfg = FinetuneConfig(iters=15, input_size=32, batch_size=2, seed=3)
    a = finetune(None, data, 9, cfg, encoder_config=SMALL)
    b = finetune(None, data, 9, cfg, encoder_config=SMALL)
    assert a.losses == b.losses
    ra = evaluate_miou(a.model, frames, 9)
    assert ra.miou == evaluate_miou(b.model, frames, 9).miou
    lin = finetune(a.model.encoder, data, 9, FinetuneConfig(mode="linear", iters=5, input_size=32), encoder_config=SMALL)
    assert all(np.array_equal(lin.model.encoder.params[k], a.model.encoder.params[k]) for k in a.model.encoder.params)
    with pytest.raises(ValueError):
        finetune(None, data, 3, cfg, encoder_config=SMALL)


def test_model_save_load(tmp_path, small_frames):
    f = next(iter(small_frames.values()))
    res = finetune(None, labeled_set([f], 32), 9, FinetuneConfig(iters=2, input_size=32), encoder_config=SMALL)
    res.model.save(tmp_path / "m.ckpt")
    back = SegmentationModel.load(tmp_path / "m.ckpt")
    assert np.array_equal(back.predict_frame(f), res.model.predict_frame(f))
    assert back.predict_frame(f).shape == f.labels.shape


def test_head_rejects_non_finite():
    with pytest.raises(ValueError):
        ClassifierHead(np.full((2, 3), np.nan), np.zeros(3))
