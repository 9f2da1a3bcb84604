"""Focal-loss fine-tuning on a labelled subset and mIoU evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import IGNORE_LABEL
from .io import load_checkpoint, save_checkpoint, write_ppm
from .sampling import resize_view
from .ssl.encoder import Encoder, EncoderConfig, sgd_step, to_input

DEFAULT_GAMMA = 2.0
MODES = ("full", "linear")


# --- loss ---------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def focal_loss(logits: np.ndarray, targets: np.ndarray, gamma: float = DEFAULT_GAMMA, ignore_label: int = IGNORE_LABEL):
    """Mean of ``-(1 - p_t)^gamma * log(p_t)`` over non-ignored rows, and its gradient.

    ``logits`` is ``(N, C)``, ``targets`` is ``(N,)``. Returns ``(loss, dlogits)``;
    ignored rows get zero gradient.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets).astype(np.int64).ravel()
    N, C = logits.shape
    if targets.shape != (N,):
        raise ValueError(f"{N} logit rows but {targets.size} targets")
    keep = targets != ignore_label
    n = int(keep.sum())
    if n == 0:
        raise ValueError("every pixel carries the ignore label")
    t = targets[keep]
    if t.min() < 0 or t.max() >= C:
        raise ValueError(f"target label {int(t.max() if t.max() >= C else t.min())} outside [0, {C})")
    logp = _log_softmax(logits[keep])
    p = np.exp(logp)
    rows = np.arange(n)
    log_pt = logp[rows, t]
    pt = p[rows, t]
    one_minus = -np.expm1(log_pt)
    mod = one_minus**gamma
    loss = float(np.sum(-mod * log_pt) / n)
    # dL/dz_k = [gamma (1-pt)^(gamma-1) pt log pt - (1-pt)^gamma] (delta_kt - p_k)
    if gamma == 0:
        coef = -np.ones(n)
    else:
        safe = one_minus > 0
        first = np.zeros(n)
        first[safe] = gamma * one_minus[safe] ** (gamma - 1) * pt[safe] * log_pt[safe]
        coef = first - mod
    delta = -p
    delta[rows, t] += 1.0
    grad = np.zeros_like(logits)
    grad[keep] = coef[:, None] * delta / n
    return loss, grad


# --- model --------------------------------------------------------------------


def upsample_index(n_out: int, n_in: int) -> np.ndarray:
    """Nearest-neighbour source index for each output position."""
    return np.arange(n_out) * n_in // n_out


@dataclass(eq=False)
class ClassifierHead:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("classifier head has non-finite weights")

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, seed: int = 0, dtype=np.float32) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=1.0 / np.sqrt(feature_dim), size=(feature_dim, num_classes))
        return cls(w.astype(dtype), np.zeros(num_classes, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight + self.bias


@dataclass(eq=False)
class SegmentationModel:
    encoder: Encoder
    head: ClassifierHead
    input_size: int = 64

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def features(self, images: np.ndarray) -> np.ndarray:
        return self.encoder.forward(to_input(images, self.encoder.dtype))

    def logits(self, images: np.ndarray, out_size: tuple[int, int] | None = None) -> np.ndarray:
        """Per-pixel class scores, features upsampled by nearest neighbour."""
        f = self.head(self.features(images))
        H, W = out_size or images.shape[1:3]
        return f[:, upsample_index(H, f.shape[1])][:, :, upsample_index(W, f.shape[2])]

    def predict(self, images: np.ndarray, out_size: tuple[int, int] | None = None, chunk: int = 32) -> np.ndarray:
        out = [
            self.logits(images[i : i + chunk], out_size).argmax(axis=-1) for i in range(0, len(images), chunk)
        ]
        return np.concatenate(out).astype(np.int64)

    def predict_frame(self, frame) -> np.ndarray:
        """Label map at the frame's own resolution."""
        rgb, _ = resize_view(frame, self.input_size)
        return self.predict(rgb[None], frame.rgb.shape[:2])[0]

    def save(self, path, extra_meta: dict | None = None) -> None:
        tensors = {**self.encoder.tensors(), "head.weight": self.head.weight, "head.bias": self.head.bias}
        meta = {"kind": "segmentation", "encoder": self.encoder.meta(), "input_size": self.input_size, **(extra_meta or {})}
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "SegmentationModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "segmentation":
            raise ValueError(f"{path}: not a segmentation checkpoint (kind={meta.get('kind')!r})")
        enc = Encoder.from_tensors(tensors, meta["encoder"])
        return cls(enc, ClassifierHead(tensors["head.weight"], tensors["head.bias"]), meta["input_size"])


# --- data ---------------------------------------------------------------------


@dataclass(eq=False)
class LabeledSet:
    ids: list[str]
    images: np.ndarray  # (N, S, S, 3) uint8
    labels: np.ndarray  # (N, S, S) int64

    def __len__(self) -> int:
        return len(self.ids)


def labeled_set(frames: Sequence, size: int = 64) -> LabeledSet:
    """Frames resized to the network input; labels by nearest neighbour."""
    if not frames:
        raise ValueError("need at least one labelled frame")
    imgs, labs = [], []
    for fr in frames:
        if fr.labels is None:
            raise ValueError(f"frame {fr.id} has no labels")
        rgb, lab = resize_view(fr, size)
        imgs.append(rgb)
        labs.append(lab.astype(np.int64))
    return LabeledSet([fr.id for fr in frames], np.stack(imgs), np.stack(labs))


def split_labeled(manifest, fraction: float, seed: int = 0) -> tuple[list[str], list[str]]:
    """Seeded train/test split of the labelled frames; ``max(1, round(fraction * N))`` train ids.

    The split is a prefix of one seeded permutation, so for a fixed seed the
    train sets of increasing fractions are nested.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    ids = [r.id for r in manifest.frames if r.label_path is not None] if hasattr(manifest, "frames") else list(manifest)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 labelled frames to split, found {len(ids)}")
    count = min(max(1, round(fraction * len(ids))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:count])
    test = sorted(ids[i] for i in order[count:])
    return train, test


# --- fine-tuning --------------------------------------------------------------


@dataclass
class FinetuneConfig:
    mode: str = "full"
    iters: int = 1000
    base_lr: float = 0.03
    head_lr_mult: float = 10.0
    power: float = 0.9
    weight_decay: float = 5e-4
    gamma: float = DEFAULT_GAMMA
    batch_size: int = 8
    input_size: int = 64
    ignore_label: int = IGNORE_LABEL
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iters < 1 or self.batch_size < 1:
            raise ValueError("iters and batch_size must be >= 1")
        if self.base_lr <= 0 or self.gamma < 0:
            raise ValueError("base_lr must be positive and gamma non-negative")


def poly_lr(it: int, cfg: FinetuneConfig) -> float:
    return cfg.base_lr * (1.0 - it / cfg.iters) ** cfg.power


@dataclass
class FinetuneResult:
    model: SegmentationModel
    losses: list[float] = field(default_factory=list)


def _head_backward(feats, dlogits, head):
    D, C = head.weight.shape
    f = feats.reshape(-1, D)
    g = dlogits.reshape(-1, C)
    return f.T @ g, g.sum(axis=0), (g @ head.weight.T).reshape(feats.shape)


def finetune(
    encoder: Encoder | None,
    data: LabeledSet,
    num_classes: int,
    cfg: FinetuneConfig,
    *,
    encoder_config: EncoderConfig | None = None,
) -> FinetuneResult:
    """Train encoder and linear head with focal loss (``mode="linear"`` freezes the encoder).

    ``encoder=None`` starts from a random initialisation seeded by ``cfg.seed``.
    Logits are computed per feature cell and upsampled to the label grid, so
    the loss gradient of a cell is the sum over the pixels it covers.
    """
    if len(data) == 0:
        raise ValueError("need at least one labelled frame")
    valid = data.labels[data.labels != cfg.ignore_label]
    if valid.size and (valid.min() < 0 or valid.max() >= num_classes):
        raise ValueError(f"label id {int(valid.max())} exceeds num_classes={num_classes}")
    rng = np.random.default_rng(cfg.seed)
    if encoder is None:
        encoder = Encoder.init(encoder_config or EncoderConfig(), seed=cfg.seed)
    else:
        encoder = encoder.copy()
    head = ClassifierHead.init(encoder.config.feature_dim, num_classes, seed=cfg.seed + 1, dtype=encoder.dtype)
    model = SegmentationModel(encoder, head, cfg.input_size)
    x_all = to_input(data.images, encoder.dtype)
    frozen = None
    if cfg.mode == "linear":
        frozen = encoder.forward(x_all)
    S = data.labels.shape[1]
    result = FinetuneResult(model)
    for it in range(cfg.iters):
        if len(data) <= cfg.batch_size:
            idx = np.arange(len(data))
        else:
            idx = np.sort(rng.choice(len(data), cfg.batch_size, replace=False))
        labels = data.labels[idx]
        if not np.any(labels != cfg.ignore_label):
            continue
        if frozen is None:
            feats, cache = encoder.forward(x_all[idx], return_cache=True)
        else:
            feats = frozen[idx]
        Hf, Wf = feats.shape[1:3]
        ri, ci = upsample_index(S, Hf), upsample_index(S, Wf)
        cell_logits = head(feats)
        logits = cell_logits[:, ri][:, :, ci]
        loss, g = focal_loss(logits.reshape(-1, num_classes), labels.ravel(), cfg.gamma, cfg.ignore_label)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite fine-tuning loss at iteration {it}")
        g = g.reshape(logits.shape)
        # fold the upsampled gradient back onto the cells
        g_cell = np.zeros(cell_logits.shape, dtype=np.float64)
        np.add.at(g_cell, (slice(None), ri[:, None], ci[None, :]), g)
        dw, db, dfeat = _head_backward(feats, g_cell.astype(feats.dtype), head)
        lr = poly_lr(it, cfg)
        head_params = {"w": head.weight, "b": head.bias}
        sgd_step(head_params, {"w": dw, "b": db}, lr * cfg.head_lr_mult, cfg.weight_decay)
        if frozen is None:
            grads = encoder.backward(cache, dfeat)
            sgd_step(encoder.params, grads, lr, cfg.weight_decay)
        result.losses.append(loss)
    return result


# --- evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows ground truth, columns prediction
    ignored: int
    class_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def per_class_iou(self) -> list[float | None]:
        """``TP / (TP + FP + FN)``; ``None`` for classes absent from both prediction and ground truth."""
        cm = self.confusion
        tp = np.diag(cm)
        denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
        return [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]

    @property
    def miou(self) -> float:
        """Mean over classes present in ground truth or prediction."""
        vals = [v for v in self.per_class_iou if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def miou_all(self) -> float:
        """Mean over every class, undefined classes counting as 0."""
        return float(np.mean([v or 0.0 for v in self.per_class_iou]))

    @property
    def pixel_counts(self) -> list[int]:
        return self.confusion.sum(axis=1).tolist()

    @property
    def pixel_accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.confusion.sum(), 1))

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_all_classes": self.miou_all,
            "miou_averaging": "classes present in ground truth or prediction",
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": self.per_class_iou,
            "pixel_counts": self.pixel_counts,
            "ignored_pixels": self.ignored,
            "confusion": self.confusion.tolist(),
            "class_names": self.class_names,
        }

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL):
    """``(num_classes, num_classes)`` counts and the number of ignored pixels."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != ignore_label
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"ground-truth label {int(g.max())} exceeds num_classes={num_classes}")
    cm = np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return cm, int((~keep).sum())


def report_from_predictions(preds, gts, num_classes: int, ignore_label: int = IGNORE_LABEL, class_names=None) -> EvalReport:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    ignored = 0
    for p, g in zip(preds, gts):
        c, i = confusion_matrix(p, g, num_classes, ignore_label)
        cm += c
        ignored += i
    if cm.sum() == 0:
        raise ValueError("no labelled pixels to evaluate")
    return EvalReport(cm, ignored, class_names)


def evaluate_miou(model: SegmentationModel, frames: Sequence, num_classes: int, ignore_label: int = IGNORE_LABEL, class_names=None) -> EvalReport:
    """Evaluate at each frame's native resolution."""
    for fr in frames:
        if fr.labels is None:
            raise ValueError(f"frame {fr.id} has no labels")
    preds = (model.predict_frame(fr) for fr in frames)
    return report_from_predictions(preds, (fr.labels for fr in frames), num_classes, ignore_label, class_names)


# --- overlays -----------------------------------------------------------------


def label_colors(n: int) -> np.ndarray:
    """Distinct colours by bit interleaving of the class index."""
    cmap = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i + 1, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        cmap[i] = (r, g, b)
    return cmap


def overlay(rgb: np.ndarray, labels: np.ndarray, num_classes: int, alpha: float = 0.5, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    colors = label_colors(num_classes)
    lab = np.asarray(labels).astype(np.int64)
    mask = (lab >= 0) & (lab < num_classes) & (lab != ignore_label)
    out = rgb.astype(np.float64)
    out[mask] = (1 - alpha) * out[mask] + alpha * colors[lab[mask]]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def write_overlay(path, rgb: np.ndarray, labels: np.ndarray, num_classes: int, alpha: float = 0.5) -> None:
    write_ppm(path, overlay(rgb, labels, num_classes, alpha))


def config_dict(cfg: FinetuneConfig) -> dict:
    return asdict(cfg)
