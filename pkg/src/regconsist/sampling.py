"""Positive pixel-pair sampling for one pair of registered views.

First pixels ``p`` are drawn in view 1 either uniformly (``random``) or with an
equal quota per region (``balanced``); each is then matched to ``q`` in view 2
either by its exact geometric correspondence (``exact``) or by a uniform draw
from the region of view 2 matched to the region of ``p`` (``region``).
Coordinates are finally pushed through the augmentation crops of both views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import DEFAULT_EPSILON_REL, Correspondences, compute_correspondences
from .matching import DEFAULT_TAU, RegionMatchSet, match_regions, region_iou_table, warp_region_map
from .regions import RegionMap

SAMPLERS = ("random", "balanced")
MATCHERS = ("exact", "region")
STRATEGIES = tuple(f"{s}-{m}" for s in SAMPLERS for m in MATCHERS)


@dataclass
class SamplingConfig:
    sampler: str = "balanced"
    matcher: str = "region"
    pairs_per_batch: int = 2048
    seed: int = 0
    max_retries: int = 10

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be >= 1")

    @property
    def strategy(self) -> str:
        return f"{self.sampler}-{self.matcher}"

    @classmethod
    def from_strategy(cls, strategy: str, **kw) -> "SamplingConfig":
        try:
            sampler, matcher = strategy.split("-")
        except ValueError:
            raise ValueError(f"strategy must look like 'balanced-region', got {strategy!r}") from None
        return cls(sampler=sampler, matcher=matcher, **kw)


@dataclass(eq=False)
class PairBatch:
    """Matched pixel pairs of one view pair in (augmented) image coordinates."""

    view_pair: tuple[str, str]
    p: np.ndarray  # (N, 2) int (row, col) in view 1
    q: np.ndarray  # (N, 2) int (row, col) in view 2
    strategy: str
    requested: int = 0
    dropped: int = 0
    seed: int | None = None

    def __post_init__(self):
        self.view_pair = tuple(self.view_pair)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=np.int64).reshape(-1, 2)
        if self.p.shape != self.q.shape:
            raise ValueError(f"p and q disagree: {self.p.shape} vs {self.q.shape}")

    def __len__(self) -> int:
        return len(self.p)

    def __eq__(self, other):
        if not isinstance(other, PairBatch):
            return NotImplemented
        return (
            self.metadata_dict() == other.metadata_dict()
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.q, other.q)
        )

    def metadata_dict(self) -> dict:
        return {
            "view_pair": list(self.view_pair),
            "strategy": self.strategy,
            "requested": self.requested,
            "dropped": self.dropped,
            "seed": self.seed,
        }

    @classmethod
    def from_metadata(cls, meta: dict, p, q) -> "PairBatch":
        return cls(tuple(meta["view_pair"]), p, q, meta["strategy"], meta["requested"], meta["dropped"], meta["seed"])


# --- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentProfile:
    scale: tuple[float, float]
    ratio: tuple[float, float] = (0.75, 1.25)
    jitter: tuple[float, float, float, float] | None = None
    jitter_p: float = 0.0
    gray_p: float = 0.0
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)


PROFILES = {
    "strong": AugmentProfile((0.08, 1.0), jitter=(0.3, 0.3, 0.3, 0.15), jitter_p=0.8, gray_p=0.2, blur_p=0.5),
    "weak": AugmentProfile((0.9, 1.0)),
}
AVD_STRONG_SCALE = (0.5, 1.0)


@dataclass(eq=False)
class AugmentedView:
    """Augmented image plus the affine map from original to augmented pixel coordinates.

    The crop ``(top, left, height, width)`` in original pixels is resized to
    ``size x size``; pixel centres map as ``r' = (r + 0.5 - top) * size / height - 0.5``.
    """

    rgb: np.ndarray
    crop: tuple[float, float, float, float]
    size: int
    valid: np.ndarray = field(default=None)

    @property
    def scale(self) -> tuple[float, float]:
        return self.size / self.crop[2], self.size / self.crop[3]

    def forward(self, rows, cols):
        top, left, h, w = self.crop
        sr, sc = self.scale
        return (np.asarray(rows) + 0.5 - top) * sr - 0.5, (np.asarray(cols) + 0.5 - left) * sc - 0.5

    def inverse(self, rows, cols):
        top, left, h, w = self.crop
        sr, sc = self.scale
        return (np.asarray(rows) + 0.5) / sr + top - 0.5, (np.asarray(cols) + 0.5) / sc + left - 0.5

    def to_pixels(self, rows, cols):
        """Nearest augmented pixel of original pixels, plus an in-bounds mask."""
        r, c = self.forward(rows, cols)
        r = np.floor(r + 0.5).astype(np.int64)
        c = np.floor(c + 0.5).astype(np.int64)
        ok = (r >= 0) & (r < self.size) & (c >= 0) & (c < self.size)
        return r, c, ok

    @classmethod
    def identity(cls, frame) -> "AugmentedView":
        H, W = frame.rgb.shape[:2]
        if H != W:
            raise ValueError("identity augmentation needs a square image")
        return cls(frame.rgb, (0.0, 0.0, float(H), float(W)), H, frame.valid)


def random_resized_crop(rng, H, W, scale, ratio, attempts: int = 10):
    """Crop box ``(top, left, h, w)`` with random area fraction and aspect ratio."""
    area = H * W
    log_ratio = np.log(ratio)
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    # fallback: central crop at the clamped aspect ratio
    in_ratio = W / H
    if in_ratio < min(ratio):
        w, h = W, int(round(W / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = H, int(round(H * max(ratio)))
    else:
        w, h = W, H
    return (H - h) // 2, (W - w) // 2, h, w


def _axis_weights(start, extent, size, n):
    """Source indices and weights of linear interpolation along one axis, edges clamped."""
    x = np.clip((np.arange(size) + 0.5) * extent / size + start - 0.5, 0, n - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, x - i0


def _resample(img, crop, size, order):
    """Sample ``crop`` on a ``size x size`` grid; ``order`` 0 is nearest, 1 is bilinear."""
    top, left, h, w = crop
    H, W = img.shape[:2]
    if order == 0:
        i = np.clip(np.floor((np.arange(size) + 0.5) * h / size + top), 0, H - 1).astype(np.int64)
        j = np.clip(np.floor((np.arange(size) + 0.5) * w / size + left), 0, W - 1).astype(np.int64)
        return img[i][:, j]
    r0, r1, wr = _axis_weights(top, h, size, H)
    c0, c1, wc = _axis_weights(left, w, size, W)
    wr = wr.reshape((-1, 1) + (1,) * (img.ndim - 2))
    wc = wc.reshape((1, -1) + (1,) * (img.ndim - 2))
    rows = img[r0] * (1 - wr) + img[r1] * wr
    return rows[:, c0] * (1 - wc) + rows[:, c1] * wc


def resize_view(frame, size: int, crop=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Bilinear RGB and nearest-neighbour labels of ``crop`` (default: whole frame) at ``size x size``."""
    H, W = frame.rgb.shape[:2]
    crop = crop or (0.0, 0.0, float(H), float(W))
    rgb = _resample(frame.rgb.astype(np.float64), crop, size, 1)
    labels = None
    if frame.labels is not None:
        labels = _resample(frame.labels.astype(np.int64), crop, size, 0).astype(frame.labels.dtype)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8), labels


def _color_jitter(img, rng, brightness, contrast, saturation, hue):
    img = img * rng.uniform(1 - brightness, 1 + brightness)
    gray = img @ np.array([0.299, 0.587, 0.114])
    img = (img - gray.mean()) * rng.uniform(1 - contrast, 1 + contrast) + gray.mean()
    img = np.clip(img, 0, 1)
    gray = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
    img = np.clip(gray + (img - gray) * rng.uniform(1 - saturation, 1 + saturation), 0, 1)
    return np.clip(img @ _hue_rotation(2 * np.pi * rng.uniform(-hue, hue)).T, 0, 1)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _hue_rotation(angle: float) -> np.ndarray:
    """RGB matrix rotating chroma by ``angle`` in YIQ space (luma preserved)."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    return _YIQ2RGB @ rot @ _RGB2YIQ


def augment(frame, profile: str = "strong", rng=None, *, size: int = 64, scale=None, ratio=None, avd: bool = False) -> AugmentedView:
    """Random resized crop plus, for the strong profile, photometric noise.

    Photometric steps touch pixel values only; the crop alone defines the
    coordinate map. ``avd`` narrows the strong crop scale to (0.5, 1.0) for
    data with wide depth holes at the image borders.
    """
    rng = np.random.default_rng(rng)
    prof = PROFILES[profile]
    if scale is None:
        scale = AVD_STRONG_SCALE if (avd and profile == "strong") else prof.scale
    ratio = ratio or prof.ratio
    H, W = frame.rgb.shape[:2]
    crop = random_resized_crop(rng, H, W, scale, ratio)
    img = _resample(frame.rgb.astype(np.float64) / 255.0, crop, size, 1)
    if prof.jitter is not None and rng.random() < prof.jitter_p:
        img = _color_jitter(img, rng, *prof.jitter)
    if rng.random() < prof.gray_p:
        img = np.repeat((img @ np.array([0.299, 0.587, 0.114]))[..., None], 3, axis=-1)
    if rng.random() < prof.blur_p:
        sigma = rng.uniform(*prof.blur_sigma) * size / 224
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    rgb = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    valid = _resample(frame.valid.astype(np.uint8), crop, size, 0).astype(bool)
    return AugmentedView(rgb, tuple(float(v) for v in crop), size, valid)


# --- pair sampling -----------------------------------------------------------


@dataclass(eq=False)
class ViewPairData:
    """Everything needed to sample pairs for one view pair."""

    id1: str
    id2: str
    shape: tuple[int, int]
    regions1: RegionMap
    regions2: RegionMap
    correspondences: Correspondences
    matches: RegionMatchSet
    _pools: dict = field(default_factory=dict, repr=False)

    def pool(self, matcher: str) -> "_Pool":
        if matcher not in self._pools:
            self._pools[matcher] = _Pool(self, matcher)
        return self._pools[matcher]


def prepare_view_pair(
    frame1,
    frame2,
    cam,
    regions1: RegionMap,
    regions2: RegionMap,
    epsilon_rel: float = DEFAULT_EPSILON_REL,
    tau_region: float = DEFAULT_TAU,
) -> ViewPairData:
    corr = compute_correspondences(frame1, frame2, cam, epsilon_rel)
    warped = warp_region_map(regions1, frame1, frame2, cam, epsilon_rel)
    matches = match_regions(region_iou_table(warped, regions2), tau_region)
    return ViewPairData(frame1.id, frame2.id, frame1.depth.shape, regions1, regions2, corr, matches)


class _Pool:
    """Eligible first pixels grouped by allocation region, with a partner rule.

    Members of group ``g`` are ``order[starts[g] : starts[g] + sizes[g]]``
    (indices into ``p_flat``), so a uniform member of many groups at once is a
    single vectorised lookup.
    """

    def __init__(self, data: ViewPairData, matcher: str):
        W = data.shape[1]
        lab1 = data.regions1.labels.ravel()
        self.matcher = matcher
        self.W = W
        if matcher == "exact":
            corr = data.correspondences
            if len(corr) == 0:
                raise ValueError(f"strategy with exact matching: no correspondences for {data.id1}->{data.id2}")
            self.p_flat = corr.p[:, 0] * W + corr.p[:, 1]
            self.q_flat = corr.q[:, 0] * W + corr.q[:, 1]
            self.region = lab1[self.p_flat]
        else:
            if len(data.matches) == 0:
                raise ValueError(f"strategy with region matching: no matched regions for {data.id1}->{data.id2}")
            in_match = np.isin(lab1, data.matches.u)
            self.p_flat = np.flatnonzero(in_match)
            self.region = lab1[self.p_flat]
            lab2 = data.regions2.labels.ravel()
            self.order2 = np.argsort(lab2, kind="stable")
            bounds = np.searchsorted(lab2[self.order2], np.arange(data.regions2.count + 1))
            # partner region of each region of view 1 (-1 when unmatched), and its pixel range in order2
            partner = np.full(data.regions1.count, -1, dtype=np.int64)
            partner[data.matches.u] = data.matches.v
            self.partner = partner
            self.v_start = bounds[:-1]
            self.v_size = np.diff(bounds)
        self.order = np.argsort(self.region, kind="stable")
        self.keys, self.starts, self.sizes = np.unique(self.region[self.order], return_index=True, return_counts=True)

    @property
    def groups(self) -> dict[int, np.ndarray]:
        return {int(k): self.order[s : s + n] for k, s, n in zip(self.keys, self.starts, self.sizes)}

    def random_members(self, group, rng) -> np.ndarray:
        """One uniform member (index into ``p_flat``) of each entry of ``group``."""
        return self.order[self.starts[group] + rng.integers(0, self.sizes[group])]

    def partners(self, idx, rng) -> np.ndarray:
        if self.matcher == "exact":
            return self.q_flat[idx]
        v = self.partner[self.region[idx]]
        return self.order2[self.v_start[v] + rng.integers(0, self.v_size[v])]


def balanced_quotas(n: int, k: int, rng) -> np.ndarray:
    """``n`` draws over ``k`` regions, counts differing by at most one; extras go to random regions."""
    quotas = np.full(k, n // k, dtype=np.int64)
    quotas[rng.permutation(k)[: n % k]] += 1
    return quotas


def _draw(members: np.ndarray, count: int, rng) -> np.ndarray:
    if count <= len(members):
        return rng.choice(members, size=count, replace=False)
    return members[rng.integers(0, len(members), size=count)]


def sample_pair_batch(
    data: ViewPairData,
    config: SamplingConfig,
    *,
    n: int | None = None,
    rng=None,
    aug1: AugmentedView | None = None,
    aug2: AugmentedView | None = None,
) -> PairBatch:
    """Draw up to ``n`` (default ``config.pairs_per_batch``) positive pairs.

    Pairs whose mapped coordinate falls outside either crop are redrawn from
    the same pool (same region for the balanced sampler) up to
    ``config.max_retries`` times, then dropped; ``PairBatch.dropped`` counts them.
    """
    n = config.pairs_per_batch if n is None else n
    seed = config.seed if rng is None else (int(rng) if isinstance(rng, (int, np.integer)) else None)
    rng = np.random.default_rng(config.seed if rng is None else rng)
    pool = data.pool(config.matcher)
    W = pool.W

    if config.sampler == "random":
        idx = rng.integers(0, len(pool.p_flat), size=n)
        slot = None
    else:
        quotas = balanced_quotas(n, len(pool.keys), rng)
        groups = pool.groups
        parts = [_draw(groups[int(k)], int(c), rng) for k, c in zip(pool.keys, quotas) if c > 0]
        idx = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        slot = np.repeat(np.arange(len(pool.keys)), quotas)

    q_flat = pool.partners(idx, rng)
    pr, pc, qr, qc, ok = _map_pairs(pool.p_flat[idx], q_flat, W, aug1, aug2)
    tries = 0
    while not ok.all() and tries < config.max_retries:
        bad = np.flatnonzero(~ok)
        if slot is None:
            idx_new = rng.integers(0, len(pool.p_flat), size=len(bad))
        else:
            idx_new = pool.random_members(slot[bad], rng)
        r = _map_pairs(pool.p_flat[idx_new], pool.partners(idx_new, rng), W, aug1, aug2)
        pr[bad], pc[bad], qr[bad], qc[bad], ok[bad] = r
        tries += 1

    p = np.stack([pr[ok], pc[ok]], axis=1)
    q = np.stack([qr[ok], qc[ok]], axis=1)
    return PairBatch((data.id1, data.id2), p, q, config.strategy, requested=n, dropped=int((~ok).sum()), seed=seed)


def _map_pairs(p_flat, q_flat, W, aug1, aug2):
    pr, pc = p_flat // W, p_flat % W
    qr, qc = q_flat // W, q_flat % W
    ok = np.ones(len(p_flat), dtype=bool)
    if aug1 is not None:
        pr, pc, ok1 = aug1.to_pixels(pr, pc)
        ok &= ok1
    if aug2 is not None:
        qr, qc, ok2 = aug2.to_pixels(qr, qc)
        ok &= ok2
    return pr.copy(), pc.copy(), qr.copy(), qc.copy(), ok


def pair_supply_size(data: ViewPairData, matcher: str) -> int:
    """Number of distinct admissible pairs: ``|S_t|`` for exact, ``sum |u| * |v|`` over matches for region."""
    if matcher == "exact":
        return len(data.correspondences)
    if matcher == "region":
        s1, s2 = data.regions1.sizes, data.regions2.sizes
        return int(sum(int(s1[u]) * int(s2[v]) for u, v in zip(data.matches.u, data.matches.v)))
    raise ValueError(f"matcher must be one of {MATCHERS}, got {matcher!r}")
