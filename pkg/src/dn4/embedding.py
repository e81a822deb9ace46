"""Convolutional embedding that turns an image into local descriptors.

Four blocks of [3x3 conv, batch normalization, leaky ReLU]; blocks 1 and 2
are followed by 2x2 max pooling, blocks 3 and 4 are not. An input of
(C, H, W) therefore maps to a (filters, H/4, W/4) feature map, read as
H*W/16 local descriptors of dimension `filters`. With 84x84 inputs and 64
filters that is 441 descriptors of dimension 64.

An optional fully connected head (two hidden layers plus a linear
classifier) sits on the flattened map for the global-feature baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .rng import substream
from .serialization import load_checkpoint_file, save_checkpoint_file
from .tensor import Tensor

__all__ = [
    "EmbeddingConfig", "ConvBlockParams", "EmbeddingParams", "HeadParams",
    "DescriptorSet", "init_embedding", "init_head", "forward_blocks",
    "embed", "descriptors", "embed_global", "descriptor_count",
    "save_model", "load_model",
]

_POOLED_BLOCKS = (0, 1)  # max pooling only after the first two blocks


@dataclass(frozen=True)
class EmbeddingConfig:
    filters: int = 64
    in_channels: int = 3
    height: int = 84
    width: int = 84
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    head_hidden: tuple[int, int] = (512, 256)

    def __post_init__(self):
        if self.filters < 1:
            raise ConfigurationError("filters must be positive")
        if self.height % 4 or self.width % 4:
            raise ConfigurationError(
                f"input size must be divisible by 4, got {self.height}x{self.width}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError("leaky_slope must be in (0,1)")


def descriptor_count(cfg: EmbeddingConfig) -> tuple[int, int, int, int]:
    """(h, w, m, d) of the descriptor grid produced by this config."""
    h, w = cfg.height // 4, cfg.width // 4
    return h, w, h * w, cfg.filters


@dataclass
class DescriptorSet:
    """Local descriptors of one image: column j sits at spatial index j."""
    descriptors: Tensor  # (d, m)
    spatial: tuple[int, int]


@dataclass
class ConvBlockParams:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class EmbeddingParams:
    config: EmbeddingConfig
    blocks: list[ConvBlockParams] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, b in enumerate(self.blocks, start=1):
            out.append((f"block{i}.conv.weight", b.weight.data))
            out.append((f"block{i}.conv.bias", b.bias.data))
            out.append((f"block{i}.bn.gamma", b.gamma.data))
            out.append((f"block{i}.bn.beta", b.beta.data))
            out.append((f"block{i}.bn.running_mean", b.running_mean))
            out.append((f"block{i}.bn.running_var", b.running_var))
        return out


@dataclass
class HeadParams:
    """Three fully connected layers for the classifier baseline."""
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(self.layers, start=1):
            out.append((f"fc{i}.weight", w.data))
            out.append((f"fc{i}.bias", b.data))
        return out


def _he_normal(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (gen.standard_normal(shape) * std).astype(np.float32)


def init_embedding(cfg: EmbeddingConfig, seed: int) -> EmbeddingParams:
    gen = substream(seed, "init", "embedding")
    blocks = []
    cin = cfg.in_channels
    for _ in range(4):
        f = cfg.filters
        blocks.append(ConvBlockParams(
            weight=Tensor(_he_normal(gen, (f, cin, 3, 3), cin * 9), requires_grad=True),
            bias=Tensor(np.zeros(f, dtype=np.float32), requires_grad=True),
            gamma=Tensor(np.ones(f, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(f, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(f, dtype=np.float32),
            running_var=np.ones(f, dtype=np.float32),
        ))
        cin = f
    return EmbeddingParams(config=cfg, blocks=blocks)


def init_head(cfg: EmbeddingConfig, num_classes: int, seed: int) -> HeadParams:
    gen = substream(seed, "init", "head")
    _, _, m, d = descriptor_count(cfg)
    sizes = [d * m, cfg.head_hidden[0], cfg.head_hidden[1], num_classes]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        layers.append((
            Tensor(_he_normal(gen, (fan_in, fan_out), fan_in), requires_grad=True),
            Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True),
        ))
    return HeadParams(layers=layers)


def forward_blocks(
    params: EmbeddingParams,
    x: Tensor,
    mode: str = "batch",
    update_running: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Run the four conv blocks; returns the (N, filters, H/4, W/4) map.

    `mode` selects the batch-normalization statistics. With
    `update_running=True` (training a plain classifier) the running buffers
    take an exponential step toward each batch's statistics.
    """
    cfg = params.config
    if x.data.ndim != 4:
        raise DimensionError("forward_blocks expects a (N,C,H,W) batch")
    if x.data.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise DimensionError(
            f"input shaped {x.data.shape[1:]} but config expects "
            f"({cfg.in_channels}, {cfg.height}, {cfg.width})")
    h = x
    for i, blk in enumerate(params.blocks):
        h = T.conv2d(h, blk.weight, blk.bias)
        if update_running and mode == "batch":
            mu = h.data.mean(axis=(0, 2, 3))
            var = h.data.var(axis=(0, 2, 3))
            blk.running_mean[...] = (1 - momentum) * blk.running_mean + momentum * mu
            blk.running_var[...] = (1 - momentum) * blk.running_var + momentum * var
        h = T.batchnorm2d(h, blk.gamma, blk.beta, eps=cfg.bn_eps, mode=mode,
                          running_mean=blk.running_mean, running_var=blk.running_var)
        h = T.leaky_relu(h, cfg.leaky_slope)
        if i in _POOLED_BLOCKS:
            h = T.maxpool2d(h)
    return h


def descriptors(feature_map: Tensor, i: int) -> DescriptorSet:
    """Descriptor set of image `i` of a (N,d,h,w) feature map."""
    one = T.select0(feature_map, i)
    d, h, w = one.data.shape
    return DescriptorSet(T.reshape(one, (d, h * w)), (h, w))


def embed(params: EmbeddingParams, x: Tensor, mode: str = "batch") -> list[DescriptorSet]:
    fmap = forward_blocks(params, x, mode=mode)
    return [descriptors(fmap, i) for i in range(x.data.shape[0])]


def embed_global(
    params: EmbeddingParams,
    head: HeadParams,
    x: Tensor,
    mode: str = "batch",
    update_running: bool = False,
) -> tuple[Tensor, Tensor]:
    """Global features and class logits for the fully connected baseline.

    The feature is the activation after the second hidden layer; the logits
    come from the final linear layer.
    """
    cfg = params.config
    fmap = forward_blocks(params, x, mode=mode, update_running=update_running)
    n = fmap.data.shape[0]
    _, _, m, d = descriptor_count(cfg)
    flat = T.reshape(fmap, (n, d * m))
    h1 = T.leaky_relu(T.fully_connected(flat, *head.layers[0]), cfg.leaky_slope)
    feature = T.leaky_relu(T.fully_connected(h1, *head.layers[1]), cfg.leaky_slope)
    logits = T.fully_connected(feature, *head.layers[2])
    return feature, logits


def save_model(path, params: EmbeddingParams, head: HeadParams | None = None) -> None:
    named = params.named_arrays()
    if head is not None:
        named += head.named_arrays()
    save_checkpoint_file(path, named)


def load_model(path, cfg: EmbeddingConfig, with_head: bool = False,
               num_classes: int | None = None):
    """Rebuild parameters from a checkpoint; shapes must match `cfg`."""
    entries = load_checkpoint_file(path)
    params = init_embedding(cfg, seed=0)
    for i, blk in enumerate(params.blocks, start=1):
        for attr, key in (("weight", "conv.weight"), ("bias", "conv.bias"),
                          ("gamma", "bn.gamma"), ("beta", "bn.beta")):
            name = f"block{i}.{key}"
            if name not in entries:
                raise DimensionError(f"checkpoint is missing {name}")
            arr = entries[name]
            tgt = getattr(blk, attr)
            if arr.shape != tgt.data.shape:
                raise DimensionError(
                    f"{name} shaped {arr.shape}, expected {tgt.data.shape}")
            tgt.data = arr
        blk.running_mean = entries.get(f"block{i}.bn.running_mean",
                                       blk.running_mean).astype(np.float32)
        blk.running_var = entries.get(f"block{i}.bn.running_var",
                                      blk.running_var).astype(np.float32)
    if not with_head:
        return params
    if num_classes is None:
        if "fc3.bias" not in entries:
            raise DimensionError("checkpoint has no classifier head")
        num_classes = entries["fc3.bias"].shape[0]
    head = init_head(cfg, num_classes, seed=0)
    for i, (w, b) in enumerate(head.layers, start=1):
        for tgt, key in ((w, "weight"), (b, "bias")):
            name = f"fc{i}.{key}"
            if name not in entries:
                raise DimensionError(f"checkpoint is missing {name}")
            arr = entries[name]
            if arr.shape != tgt.data.shape:
                raise DimensionError(
                    f"{name} shaped {arr.shape}, expected {tgt.data.shape}")
            tgt.data = arr
    return params, head
