import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regconsist.io import load_pair_batch, save_pair_batch
from regconsist.sampling import (
    STRATEGIES,
    AugmentedView,
    SamplingConfig,
    augment,
    balanced_quotas,
    pair_supply_size,
    prepare_view_pair,
    random_resized_crop,
    resize_view,
    sample_pair_batch,
)
from regconsist.regions import regions_from_labels


@pytest.fixture(scope="module")
def pair_data(small_frames, small_cam):
    ids = sorted(small_frames)
    for a in ids:
        for b in ids:
            if a == b:
                continue
            fa, fb = small_frames[a], small_frames[b]
            d = prepare_view_pair(fa, fb, small_cam, regions_from_labels(fa.labels), regions_from_labels(fb.labels))
            if len(d.matches) >= 2:
                return d, fa, fb
    raise AssertionError("no usable view pair in the test world")


def _admissible(data, batch, matcher, aug1=None, aug2=None):
    """Re-verify every pair from first principles in original coordinates."""
    p, q = batch.p, batch.q
    if aug1 is not None:
        r, c = aug1.inverse(p[:, 0], p[:, 1])
        p = np.stack([r, c], 1)
    if aug2 is not None:
        r, c = aug2.inverse(q[:, 0], q[:, 1])
        q = np.stack([r, c], 1)
    if matcher == "exact":
        if aug1 is not None or aug2 is not None:
            return True  # exact pairs are checked without crops below
        corr = {(tuple(a), tuple(b)) for a, b in zip(data.correspondences.p.tolist(), data.correspondences.q.tolist())}
        return all((tuple(a), tuple(b)) in corr for a, b in zip(p.tolist(), q.tolist()))
    pi = np.floor(p + 0.5).astype(int) if aug1 is not None else p
    qi = np.floor(q + 0.5).astype(int) if aug2 is not None else q
    u = data.regions1.labels[pi[:, 0], pi[:, 1]]
    v = data.regions2.labels[qi[:, 0], qi[:, 1]]
    partner = dict(data.matches.pairs())
    return all(partner.get(int(a)) == int(b) for a, b in zip(u, v))


def test_strategy_names():
    assert set(STRATEGIES) == {"random-exact", "balanced-exact", "random-region", "balanced-region"}
    assert SamplingConfig.from_strategy("random-exact").strategy == "random-exact"
    with pytest.raises(ValueError):
        SamplingConfig.from_strategy("balanced")
    with pytest.raises(ValueError):
        SamplingConfig(sampler="greedy")
    with pytest.raises(ValueError):
        SamplingConfig(pairs_per_batch=0)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_pairs_admissible(pair_data, strategy):
    data, *_ = pair_data
    cfg = SamplingConfig.from_strategy(strategy, pairs_per_batch=500)
    b = sample_pair_batch(data, cfg, rng=3)
    assert len(b) == 500 and b.dropped == 0
    assert _admissible(data, b, cfg.matcher)


def test_balanced_counts_within_one(pair_data):
    data, *_ = pair_data
    lab1 = data.regions1.labels
    for matcher in ("exact", "region"):
        cfg = SamplingConfig("balanced", matcher, pairs_per_batch=97)
        keys = sorted(data.pool(matcher).groups)
        for s in range(200):
            b = sample_pair_batch(data, cfg, rng=s)
            counts = np.bincount(lab1[b.p[:, 0], b.p[:, 1]], minlength=lab1.max() + 1)[keys]
            assert counts.max() - counts.min() <= 1 and counts.sum() == 97


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_balanced_quotas(n, k, seed):
    q = balanced_quotas(n, k, np.random.default_rng(seed))
    assert q.sum() == n and q.max() - q.min() <= 1


def test_fixed_seed_reproducible(pair_data, tmp_path):
    data, fa, fb = pair_data
    cfg = SamplingConfig.from_strategy("balanced-region", pairs_per_batch=300, seed=5)
    a, b = sample_pair_batch(data, cfg), sample_pair_batch(data, cfg)
    assert a == b
    save_pair_batch(a, tmp_path / "a.rcpb")
    save_pair_batch(b, tmp_path / "b.rcpb")
    assert (tmp_path / "a.rcpb").read_bytes() == (tmp_path / "b.rcpb").read_bytes()
    assert load_pair_batch(tmp_path / "a.rcpb") == a
    assert sample_pair_batch(data, SamplingConfig.from_strategy("balanced-region", pairs_per_batch=300, seed=6)) != a


def test_empty_pool_errors(pair_data, small_cam):
    data, fa, fb = pair_data
    one = regions_from_labels(np.zeros(fa.labels.shape, int))
    far = prepare_view_pair(fa, fb, small_cam, one, one, tau_region=1.0)
    if len(far.matches) == 0:
        with pytest.raises(ValueError, match="no matched regions"):
            sample_pair_batch(far, SamplingConfig.from_strategy("balanced-region"))


def test_supply_size(pair_data):
    data, *_ = pair_data
    assert pair_supply_size(data, "exact") == len(data.correspondences)
    s1, s2 = data.regions1.sizes, data.regions2.sizes
    assert pair_supply_size(data, "region") == sum(int(s1[u]) * int(s2[v]) for u, v in data.matches.pairs())
    with pytest.raises(ValueError):
        pair_supply_size(data, "nearest")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 200), st.integers(8, 200))
def test_random_resized_crop_inside(seed, H, W):
    top, left, h, w = random_resized_crop(np.random.default_rng(seed), H, W, (0.08, 1.0), (0.75, 1.333))
    assert 0 <= top and top + h <= H and 0 <= left and left + w <= W and h > 0 and w > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_affine_round_trip(seed):
    rng = np.random.default_rng(seed)
    crop = tuple(float(x) for x in random_resized_crop(rng, 64, 64, (0.08, 1.0), (0.75, 1.333)))
    v = AugmentedView(None, crop, 32)
    r, c = rng.uniform(0, 64, 20), rng.uniform(0, 64, 20)
    r2, c2 = v.inverse(*v.forward(r, c))
    assert np.allclose(r2, r) and np.allclose(c2, c)


def test_identity_augment_keeps_coordinates(pair_data):
    data, fa, fb = pair_data
    v = AugmentedView.identity(fa)
    r, c, ok = v.to_pixels(np.arange(64), np.arange(64))
    assert ok.all() and np.array_equal(r, np.arange(64)) and np.array_equal(c, np.arange(64))


def test_augmented_pairs_land_on_matched_regions(pair_data):
    data, fa, fb = pair_data
    cfg = SamplingConfig.from_strategy("balanced-region", pairs_per_batch=400)
    rng = np.random.default_rng(0)
    for _ in range(10):
        a1 = augment(fa, "strong", rng, size=32)
        a2 = augment(fb, "weak", rng, size=32)
        b = sample_pair_batch(data, cfg, rng=rng, aug1=a1, aug2=a2)
        assert len(b) + b.dropped == 400
        assert np.all((b.p >= 0) & (b.p < 32)) and np.all((b.q >= 0) & (b.q < 32))


def test_augmented_exact_pairs_map_to_correspondences(pair_data):
    data, fa, fb = pair_data
    cfg = SamplingConfig.from_strategy("random-exact", pairs_per_batch=300)
    # crops at native scale keep the coordinate map a pure shift
    a1 = augment(fa, "weak", 0, size=48, scale=(48 * 48 / 4096,) * 2, ratio=(1.0, 1.0))
    a2 = augment(fb, "weak", 1, size=48, scale=(48 * 48 / 4096,) * 2, ratio=(1.0, 1.0))
    b = sample_pair_batch(data, cfg, rng=2, aug1=a1, aug2=a2)
    p = np.stack(a1.inverse(b.p[:, 0], b.p[:, 1]), 1).round().astype(int)
    q = np.stack(a2.inverse(b.q[:, 0], b.q[:, 1]), 1).round().astype(int)
    corr = {(tuple(x), tuple(y)) for x, y in zip(data.correspondences.p.tolist(), data.correspondences.q.tolist())}
    assert len(b) > 0
    assert all((tuple(x), tuple(y)) in corr for x, y in zip(p.tolist(), q.tolist()))


def test_augment_deterministic(pair_data):
    _, fa, _ = pair_data
    a, b = augment(fa, "strong", 9, size=32), augment(fa, "strong", 9, size=32)
    assert np.array_equal(a.rgb, b.rgb) and a.crop == b.crop
    assert a.rgb.shape == (32, 32, 3) and a.valid.shape == (32, 32)


def test_resize_view_full_frame(pair_data):
    _, fa, _ = pair_data
    rgb, lab = resize_view(fa, 64)
    assert np.array_equal(rgb, fa.rgb) and np.array_equal(lab, fa.labels)
    rgb, lab = resize_view(fa, 32)
    assert rgb.shape == (32, 32, 3) and set(np.unique(lab)) <= set(np.unique(fa.labels))
