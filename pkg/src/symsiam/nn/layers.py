"""Layers and the small convolutional encoder used as the image backbone."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericError
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_side: int = 32
    channels_per_stage: tuple[int, ...] = (8, 16)
    embedding_dim: int = 16
    seed: int = 0
    center_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not self.channels_per_stage or min(self.channels_per_stage) < 1:
            raise ConfigError("channels_per_stage must be a non-empty list of positive ints")
        stride = 2 ** len(self.channels_per_stage)
        if self.input_side % stride:
            raise ConfigError(
                f"input_side {self.input_side} not divisible by 2^{len(self.channels_per_stage)}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_stage"] = list(self.channels_per_stage)
        return d


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ParamGroup:
    """A named set of tensors sharing optimizer treatment."""

    name: str
    tensors: list[Tensor]
    lars_excluded: bool = False


class Module:
    """Minimal container: subclasses list their parameters in declaration order."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_groups(self, prefix: str = "") -> list[ParamGroup]:
        """Weights go in one LARS-adapted group, biases in an excluded one."""
        weights, biases = [], []
        for name, p in self.named_parameters():
            (biases if name.endswith("bias") else weights).append(p)
        return [
            ParamGroup(prefix + "weights", weights, lars_excluded=False),
            ParamGroup(prefix + "biases", biases, lars_excluded=True),
        ]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ConfigError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if tuple(a.shape) != p.shape:
                raise ConfigError(f"shape mismatch for {p.name}: {a.shape} vs {p.shape}")
            p.data = np.array(a, dtype=p.data.dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3,
                 name: str = "conv", dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                             requires_grad=True, name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias", dtype=dtype)
        self.name = name

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 name: str = "linear", dtype=np.float32):
        self.weight = Tensor(he_uniform(rng, (out_features, in_features), in_features),
                             requires_grad=True, name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias", dtype=dtype)
        self.name = name

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def _check_finite(x: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite activation after layer {layer!r}")
    return x


def center_patches(x: np.ndarray) -> np.ndarray:
    """Subtract each patch's foreground mean; background (0) pixels stay 0."""
    fg = x > 0
    count = np.maximum(fg.sum(axis=(1, 2), keepdims=True), 1)
    mean = np.where(fg, x, 0).sum(axis=(1, 2), keepdims=True) / count
    return np.where(fg, x - mean, 0).astype(x.dtype, copy=False)


class Encoder(Module):
    """Conv3x3 -> ReLU -> 2x2 mean-pool per stage, then a final conv3x3 -> ReLU
    projecting to ``embedding_dim`` channels and a global average pool.

    With ``center_input`` each patch is first shifted to zero foreground mean,
    so features respond to local structure rather than to where the tile sits
    on the tissue's brightness gradient.
    """

    def __init__(self, config: EncoderConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.stages: list[Conv2d] = []
        in_ch = 1
        for i, ch in enumerate(config.channels_per_stage):
            self.stages.append(Conv2d(in_ch, ch, rng, name=f"stage{i}", dtype=dtype))
            in_ch = ch
        self.project = Conv2d(in_ch, config.embedding_dim, rng, name="project", dtype=dtype)

    def named_parameters(self):
        out = []
        for layer in [*self.stages, self.project]:
            out.extend(layer.named_parameters())
        return out

    @property
    def dtype(self):
        return self.project.weight.dtype

    def __call__(self, patches) -> Tensor:
        """Embed a batch of patches of shape (N, side, side) or (N, 1, side, side)."""
        x = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
        side = self.config.input_side
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        if x.ndim != 3 or x.shape[1:] != (side, side):
            raise ConfigError(f"encoder expects patches of shape (N, {side}, {side}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        if self.config.center_input:
            x = center_patches(x)
        h = Tensor(x[None])
        for conv in self.stages:
            h = _check_finite(T.relu(conv(h)), conv.name)
            h = T.mean_pool2d(h)
        h = _check_finite(T.relu(self.project(h)), self.project.name)
        return T.global_avg_pool(h)
