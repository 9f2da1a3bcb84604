"""Small strided convolutional encoder with a hand-written backward pass.

Layout is NHWC throughout. Each conv layer is 3x3, stride 2, padding 1,
followed by ReLU; a 1x1 projector maps the last hidden layer to the feature
dimension ``D``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..io import load_checkpoint, save_checkpoint

INPUT_MEAN = 0.5
INPUT_STD = 0.25


def to_input(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 RGB (..., H, W, 3) to normalised network input."""
    return ((np.asarray(rgb, dtype=dtype) / 255.0 - INPUT_MEAN) / INPUT_STD).astype(dtype)


def conv_out(n: int, stride: int = 2) -> int:
    return (n - 1) // stride + 1


def im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, Ho, Wo, 9 * C)`` patches of a 3x3 window, zero padded by 1."""
    N, H, W, C = x.shape
    Ho, Wo = conv_out(H, stride), conv_out(W, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [
        xp[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :]
        for i in range(3)
        for j in range(3)
    ]
    return np.concatenate(cols, axis=-1)


def col2im(dcols: np.ndarray, shape, stride: int) -> np.ndarray:
    N, H, W, C = shape
    Ho, Wo = dcols.shape[1:3]
    dxp = np.zeros((N, H + 2, W + 2, C), dtype=dcols.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :] += dcols[
                ..., k * C : (k + 1) * C
            ]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 32)
    feature_dim: int = 32
    strides: tuple[int, ...] = (2, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def feature_size(self, n: int) -> int:
        for s in self.strides:
            n = conv_out(n, s)
        return n


@dataclass(eq=False)
class Encoder:
    config: EncoderConfig = field(default_factory=EncoderConfig)
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig | None = None, seed: int = 0, dtype=np.float32) -> "Encoder":
        """He-normal conv weights, zero biases."""
        config = config or EncoderConfig()
        rng = np.random.default_rng(seed)
        params = {}
        cin = config.in_channels
        for k, cout in enumerate(config.channels):
            fan_in = 9 * cin
            params[f"conv{k}.w"] = (rng.normal(size=(fan_in, cout)) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"conv{k}.b"] = np.zeros(cout, dtype=dtype)
            cin = cout
        params["proj.w"] = (rng.normal(size=(cin, config.feature_dim)) * np.sqrt(1.0 / cin)).astype(dtype)
        params["proj.b"] = np.zeros(config.feature_dim, dtype=dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["proj.w"].dtype

    def copy(self) -> "Encoder":
        return Encoder(EncoderConfig(**vars(self.config)), {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Encoder":
        return Encoder(EncoderConfig(**vars(self.config)), {k: v.astype(dtype) for k, v in self.params.items()})

    def forward(self, x: np.ndarray, return_cache: bool = False):
        """``(N, H, W, C_in)`` -> ``(N, Hf, Wf, D)`` features."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected (N, H, W, {self.config.in_channels}) input, got {x.shape}")
        cache = []
        h = x
        for k, stride in enumerate(self.config.strides):
            cols = im2col(h, stride)
            z = cols @ self.params[f"conv{k}.w"] + self.params[f"conv{k}.b"]
            cache.append((h.shape, cols, z))
            h = np.maximum(z, 0)
        out = h @ self.params["proj.w"] + self.params["proj.b"]
        if return_cache:
            return out, (cache, h)
        return out

    def backward(self, cache, dout: np.ndarray, need_input_grad: bool = False) -> dict:
        """Parameter gradients given ``dL/dfeatures``; ``grads['input']`` on request."""
        layers, h = cache
        D = dout.shape[-1]
        grads = {
            "proj.w": h.reshape(-1, h.shape[-1]).T @ dout.reshape(-1, D),
            "proj.b": dout.reshape(-1, D).sum(axis=0),
        }
        dh = dout @ self.params["proj.w"].T
        for k in reversed(range(len(layers))):
            shape, cols, z = layers[k]
            dz = dh * (z > 0)
            cout = dz.shape[-1]
            grads[f"conv{k}.w"] = cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, cout)
            grads[f"conv{k}.b"] = dz.reshape(-1, cout).sum(axis=0)
            if k > 0 or need_input_grad:
                dcols = dz @ self.params[f"conv{k}.w"].T
                dh = col2im(dcols, shape, self.config.strides[k])
        if need_input_grad:
            grads["input"] = dh
        return grads

    def tensors(self, prefix: str = "encoder.") -> dict:
        return {prefix + k: v for k, v in self.params.items()}

    def meta(self) -> dict:
        return {
            "channels": list(self.config.channels),
            "feature_dim": self.config.feature_dim,
            "strides": list(self.config.strides),
            "in_channels": self.config.in_channels,
        }

    @classmethod
    def from_tensors(cls, tensors: dict, meta: dict, prefix: str = "encoder.") -> "Encoder":
        config = EncoderConfig(
            tuple(meta["channels"]), meta["feature_dim"], tuple(meta["strides"]), meta.get("in_channels", 3)
        )
        params = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
        return cls(config, params)

    def save(self, path, extra_meta: dict | None = None) -> None:
        save_checkpoint(path, self.tensors(), {"kind": "encoder", "encoder": self.meta(), **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> "Encoder":
        tensors, meta = load_checkpoint(path)
        return cls.from_tensors(tensors, meta["encoder"])


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0) -> None:
    for k, g in grads.items():
        if k not in params:
            continue
        p = params[k]
        if weight_decay:
            g = g + weight_decay * p
        p -= np.asarray(lr, dtype=p.dtype) * g.astype(p.dtype, copy=False)
