"""Neural building blocks: conv backbone, pre-LN transformer, encodings, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError


class Module:
    """Container that discovers Parameters and sub-Modules from its attributes.

    A Module (or Parameter) reachable under several attribute paths is
    reported once, under the first path, so shared storage is never
    double counted.
    """

    training = False

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        seen = set()
        yield from self._named_parameters(prefix, seen)

    def _named_parameters(self, prefix, seen):
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif id(value) not in seen:
                seen.add(id(value))
                yield from value._named_parameters(name + ".", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def _name_parameters(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, std=None):
        std = 1.0 / math.sqrt(in_dim) if std is None else std
        self.weight = Parameter(_normal(rng, (in_dim, out_dim), std, dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, pad, rng, dtype=np.float32, gain=1.0):
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(_normal(rng, (out_ch, in_ch, kernel, kernel), gain * math.sqrt(2.0 / fan_in), dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.stride = tuple(stride)
        self.pad = (kernel // 2, kernel // 2)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


# -- backbone -------------------------------------------------------------------------

@dataclass
class BackboneConfig:
    stem_channels: int = 64
    block_counts: tuple = (1, 2, 5, 3)
    channels: tuple = (64, 128, 256, 512)
    strides: tuple = ((2, 2), (2, 2), (2, 1), (1, 1))
    output_dim: int = 512
    stem_stride: tuple = (1, 1)

    def __post_init__(self):
        self.block_counts = tuple(int(b) for b in self.block_counts)
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(tuple(int(v) for v in s) for s in self.strides)
        self.stem_stride = tuple(int(v) for v in self.stem_stride)
        if not (len(self.block_counts) == len(self.channels) == len(self.strides)):
            raise ConfigError("backbone: block_counts, channels and strides must have equal length")

    @property
    def total_stride(self):
        sh, sw = self.stem_stride
        for h, w in self.strides:
            sh, sw = sh * h, sw * w
        return sh, sw

    def output_size(self, height, width):
        sh, sw = self.total_stride
        return height // sh, width // sw


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity or 1x1 projection shortcut."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng, dtype)
        # damped second conv keeps activations bounded without normalisation layers
        self.conv2 = Conv2d(out_ch, out_ch, 3, (1, 1), 1, rng, dtype, gain=0.5)
        self.shortcut = None
        if tuple(stride) != (1, 1) or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, rng, dtype)

    def __call__(self, x):
        y = self.conv2(ad.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ad.relu(y + skip)


class Backbone(Module):
    """ResNet-style local feature extractor mapping B x 3 x H x W to B x d x h x w."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.stem_channels, 3, cfg.stem_stride, 1, rng, dtype)
        blocks = []
        in_ch = cfg.stem_channels
        for count, ch, stride in zip(cfg.block_counts, cfg.channels, cfg.strides):
            for i in range(count):
                blocks.append(BasicBlock(in_ch, ch, stride if i == 0 else (1, 1), rng, dtype))
                in_ch = ch
        self.blocks = blocks
        self.proj = None
        if in_ch != cfg.output_dim:
            self.proj = Conv2d(in_ch, cfg.output_dim, 1, (1, 1), 0, rng, dtype)

    def __call__(self, images):
        images = ad.as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"backbone expects B x 3 x H x W images, got {images.shape}")
        sh, sw = self.cfg.total_stride
        _, _, h, w = images.shape
        if h % sh or w % sw:
            raise DimensionError(
                f"backbone: image size {h}x{w} is not a multiple of the stride schedule {sh}x{sw}; "
                f"expected e.g. {max(1, h // sh) * sh}x{max(1, w // sw) * sw}")
        x = ad.relu(self.stem(images))
        for block in self.blocks:
            x = block(x)
        if self.proj is not None:
            x = self.proj(x)
        return x


# -- transformer ---------------------------------------------------------------

@dataclass
class TransformerBlockConfig:
    d_model: int = 512
    num_heads: int = 8
    ffn_dim: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model


class MultiHeadSelfAttention(Module):
    def __init__(self, cfg: TransformerBlockConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.num_heads = cfg.num_heads
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)

    def __call__(self, x):
        """Return ``(output, attention)``; attention is B x heads x L x L."""
        x = ad.as_tensor(x)
        b, length, d = x.shape
        if d != self.wq.weight.shape[0]:
            raise DimensionError(f"attention: model dim {self.wq.weight.shape[0]} but input {x.shape}")
        h = self.num_heads
        dk = d // h

        def heads(t):
            return ad.transpose(ad.reshape(t, (b, length, h, dk)), (0, 2, 1, 3))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, length, d))
        return self.wo(ctx), attn


class TransformerBlock(Module):
    """Pre-LN block: ``x + MHSA(LN(x))`` then ``+ FFN(LN(.))`` with a relu FFN."""

    def __init__(self, cfg: TransformerBlockConfig, rng, dtype=np.float32):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.mhsa = MultiHeadSelfAttention(cfg, rng, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn1 = Linear(cfg.d_model, cfg.ffn_dim, rng, dtype)
        self.ffn2 = Linear(cfg.ffn_dim, cfg.d_model, rng, dtype)
        self.dropout = cfg.dropout
        self.rng = rng

    def __call__(self, x):
        """Return ``(output, attention)``."""
        x = ad.as_tensor(x)
        a, attn = self.mhsa(self.ln1(x))
        x = x + ad.dropout(a, self.dropout, self.rng, self.training)
        f = self.ffn2(ad.relu(self.ffn1(self.ln2(x))))
        x = x + ad.dropout(f, self.dropout, self.rng, self.training)
        return x, attn


def run_blocks(blocks, x):
    """Apply blocks in sequence; return output and the per-block attention list."""
    attns = []
    for block in blocks:
        x, attn = block(x)
        attns.append(attn)
    return x, attns


def fixed_positional_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal table: sin on even channels, cos on odd, frequency 10000^(-2i/d)."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((length, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


class ClassifierHead(Linear):
    """Per-position linear probe from features to character logits (no activation)."""
