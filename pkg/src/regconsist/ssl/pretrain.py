"""Self-supervised pre-training loop on sampled pixel pairs."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..geometry import DEFAULT_EPSILON_REL, CameraModel
from ..io import Frame
from ..matching import DEFAULT_TAU
from ..regions import RegionMap
from ..sampling import SamplingConfig, ViewPairData, augment, prepare_view_pair, sample_pair_batch
from .barlow import DEFAULT_LAMBDA, barlow_backward
from .encoder import Encoder, EncoderConfig, clip_by_global_norm, sgd_step, to_input

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lam: float = DEFAULT_LAMBDA
    grad_clip_norm: float = 5.0
    base_lr: float = 0.01
    schedule: str = "cosine"
    decay_factor: float = 10.0
    warmup_iters: int = 100
    total_iters: int = 2000
    feature_dim: int = 32
    channels: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 2, 2)
    input_size: int = 64
    view_pairs_per_step: int = 16
    center: bool = True
    seed: int = 0
    avd_mode: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.strides = tuple(self.strides)
        for name in ("lam", "grad_clip_norm", "base_lr", "decay_factor", "total_iters", "feature_dim", "input_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError(f"need 0 <= warmup_iters < total_iters, got {self.warmup_iters}, {self.total_iters}")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.channels, self.feature_dim, self.strides)


def learning_rate(it: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then cosine decay to ``base_lr / decay_factor`` at the last iteration."""
    if it < cfg.warmup_iters:
        return cfg.base_lr * it / cfg.warmup_iters
    final = cfg.base_lr / cfg.decay_factor
    span = max(cfg.total_iters - 1 - cfg.warmup_iters, 1)
    frac = min((it - cfg.warmup_iters) / span, 1.0)
    return final + (cfg.base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * frac))


class PairSource:
    """Lazily prepared view-pair data, both orientations, cached."""

    def __init__(
        self,
        frames: Mapping[str, Frame],
        view_pairs: Sequence,
        cam: CameraModel,
        regions: Mapping[str, RegionMap],
        epsilon_rel: float = DEFAULT_EPSILON_REL,
        tau_region: float = DEFAULT_TAU,
    ):
        if not view_pairs:
            raise ValueError("pre-training needs at least one view pair")
        self.frames = frames
        self.pairs = [(vp.id1, vp.id2) if hasattr(vp, "id1") else tuple(vp) for vp in view_pairs]
        self.cam = cam
        self.regions = regions
        self.epsilon_rel = epsilon_rel
        self.tau_region = tau_region
        self._cache: dict[tuple[str, str], ViewPairData] = {}
        self._usable: dict[tuple[str, str, str], bool] = {}

    def get(self, a: str, b: str) -> ViewPairData:
        key = (a, b)
        if key not in self._cache:
            self._cache[key] = prepare_view_pair(
                self.frames[a], self.frames[b], self.cam, self.regions[a], self.regions[b], self.epsilon_rel, self.tau_region
            )
        return self._cache[key]

    def has_pool(self, a: str, b: str, matcher: str) -> bool:
        """Whether ``a -> b`` offers any admissible pair under ``matcher``."""
        key = (a, b, matcher)
        if key not in self._usable:
            try:
                self.get(a, b).pool(matcher)
                self._usable[key] = True
            except ValueError:
                self._usable[key] = False
        return self._usable[key]


@dataclass
class PretrainResult:
    encoder: Encoder
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    pairs_used: list[int] = field(default_factory=list)
    seconds: float = 0.0

    def write_log(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "lr"])
            for i, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([i, repr(loss), repr(lr)])


def gather(features: np.ndarray, image_index: np.ndarray, coords: np.ndarray, input_size: int) -> tuple:
    """Feature rows at augmented pixel coordinates, via nearest-cell downscaling."""
    Hf, Wf = features.shape[1:3]
    r = np.minimum(coords[:, 0] * Hf // input_size, Hf - 1)
    c = np.minimum(coords[:, 1] * Wf // input_size, Wf - 1)
    return features[image_index, r, c], (image_index, r, c)


def pretrain_step(encoder: Encoder, images: np.ndarray, batches, cfg: TrainConfig):
    """One forward/backward pass. ``images`` interleaves (view1, view2) per batch."""
    feats, cache = encoder.forward(images, return_cache=True)
    if not np.all(np.isfinite(feats)):
        raise FloatingPointError("non-finite encoder features")
    idx1, idx2, c1, c2 = [], [], [], []
    for j, b in enumerate(batches):
        idx1.append(np.full(len(b), 2 * j))
        idx2.append(np.full(len(b), 2 * j + 1))
        c1.append(b.p)
        c2.append(b.q)
    idx1, idx2 = np.concatenate(idx1), np.concatenate(idx2)
    P, at1 = gather(feats, idx1, np.concatenate(c1), cfg.input_size)
    Q, at2 = gather(feats, idx2, np.concatenate(c2), cfg.input_size)
    loss, dP, dQ = barlow_backward(P.astype(np.float64), Q.astype(np.float64), cfg.lam, cfg.center)
    dfeat = np.zeros(feats.shape, dtype=np.float64)
    np.add.at(dfeat, at1, dP)
    np.add.at(dfeat, at2, dQ)
    grads = encoder.backward(cache, dfeat.astype(encoder.dtype))
    return loss, grads, len(P)


def pretrain(
    source: PairSource,
    sampling: SamplingConfig,
    cfg: TrainConfig,
    *,
    encoder: Encoder | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """Barlow Twins pre-training of the encoder on sampled pixel pairs.

    Every step draws ``view_pairs_per_step`` view pairs (random orientation),
    augments view 1 strongly and view 2 weakly, samples ``|S| / k`` pairs from
    each, and takes one SGD step with global-norm clipping.
    """
    rng = np.random.default_rng(cfg.seed)
    encoder = encoder.copy() if encoder is not None else Encoder.init(cfg.encoder_config, seed=cfg.seed)
    result = PretrainResult(encoder)
    k = cfg.view_pairs_per_step
    per_pair = max(1, sampling.pairs_per_batch // k)
    t0 = time.perf_counter()
    for it in range(cfg.total_iters):
        images, batches = [], []
        for _ in range(100 * k):
            a, b = source.pairs[rng.integers(len(source.pairs))]
            if rng.random() < 0.5:
                a, b = b, a
            if not source.has_pool(a, b, sampling.matcher):
                # e.g. no region survives matching in this orientation
                continue
            aug1 = augment(source.frames[a], "strong", rng, size=cfg.input_size, avd=cfg.avd_mode)
            aug2 = augment(source.frames[b], "weak", rng, size=cfg.input_size)
            batch = sample_pair_batch(source.get(a, b), sampling, n=per_pair, rng=rng, aug1=aug1, aug2=aug2)
            if len(batch) == 0:
                continue
            images += [aug1.rgb, aug2.rgb]
            batches.append(batch)
            if len(batches) == k:
                break
        if sum(len(b) for b in batches) < 2:
            raise RuntimeError(f"could not sample pixel pairs at iteration {it}")
        x = to_input(np.stack(images), encoder.dtype)
        lr = learning_rate(it, cfg)
        try:
            loss, grads, n_pairs = pretrain_step(encoder, x, batches, cfg)
        except FloatingPointError:
            raise NumericalError(it, "features") from None
        except ValueError as exc:
            # a constant feature column over the batch; skip the step
            log.warning("iteration %d skipped: %s", it, exc)
            continue
        if not np.isfinite(loss):
            raise NumericalError(it)
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip_norm)
        sgd_step(encoder.params, grads, lr)
        result.losses.append(float(loss))
        result.lrs.append(lr)
        result.pairs_used.append(n_pairs)
        if callback is not None:
            callback(it, loss)
    result.seconds = time.perf_counter() - t0
    return result
