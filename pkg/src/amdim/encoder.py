"""Padding-free residual encoder emitting 7x7, 5x5 and 1x1 feature maps plus embeddings.

Layer tables (kernel, stride, output extent) per input size; every block's first
layer is ``mean_pool(w, s)`` plus a ``conv(w, s) -> relu -> conv 1x1`` residual,
followed by ``depth - 1`` residual 1x1 layers. Channels grow ndf, 2ndf, 4ndf, 8ndf.

    input 32:  3x3/1 -> 30,  4x4/2 -> 14,  2x2/2 -> 7 (f7),  3x3/1 -> 5 (f5),  5x5/1 -> 1 (f1)
    input 64:  3x3/1 -> 62,  4x4/2 -> 30,  4x4/2 -> 14,  2x2/2 -> 7 (f7),  3x3/1 -> 5 (f5),  5x5/1 -> 1 (f1)
    input 128: 6x6/2 -> 62,  4x4/2 -> 30,  4x4/2 -> 14,  2x2/2 -> 7 (f7),  3x3/1 -> 5 (f5),  5x5/1 -> 1 (f1)

The stem block always has depth 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .augment import ImageBatch
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Conv2d, Linear, Module
from .tensor import Tensor

# (kernel, stride, channel multiplier of ndf) per block
ARCHITECTURES = {
    32: [(3, 1, 1), (4, 2, 2), (2, 2, 4), (3, 1, 8), (5, 1, 8)],
    64: [(3, 1, 1), (4, 2, 2), (4, 2, 4), (2, 2, 4), (3, 1, 8), (5, 1, 8)],
    128: [(6, 2, 1), (4, 2, 2), (4, 2, 4), (2, 2, 4), (3, 1, 8), (5, 1, 8)],
}

INPUT_MEAN, INPUT_STD = 0.5, 0.25


@dataclass
class EncoderConfig:
    ndf: int = 64
    nrkhs: int = 512
    ndepth: int = 4
    input_size: int = 32
    use_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.ndf < 8:
            raise ConfigError("ndf must be at least 8")
        if self.nrkhs < self.ndf:
            raise ConfigError("nrkhs must be at least ndf")
        if self.ndepth < 1:
            raise ConfigError("ndepth must be at least 1")
        if self.input_size not in ARCHITECTURES:
            raise ConfigError(f"unsupported input size {self.input_size}; choose one of {sorted(ARCHITECTURES)}")


@dataclass
class FeatureSet:
    f7: Tensor
    f5: Tensor
    f1: Tensor
    phi7: Tensor
    phi5: Tensor
    phi1: Tensor

    def scale(self, d: int) -> tuple[Tensor, Tensor]:
        """(features, embeddings) at spatial scale ``d``."""
        try:
            return {7: (self.f7, self.phi7), 5: (self.f5, self.phi5), 1: (self.f1, self.phi1)}[d]
        except KeyError:
            raise ConfigError(f"no features at scale {d}") from None


@dataclass
class ReceptiveField:
    d: int
    position: tuple
    rect: tuple  # (top, left, bottom, right), inclusive pixel coordinates

    @property
    def height(self):
        return self.rect[2] - self.rect[0] + 1

    @property
    def width(self):
        return self.rect[3] - self.rect[1] + 1


class ResidualLayer(Module):
    """x + conv1x1(relu(bn(conv1x1(relu(x)))))"""

    def __init__(self, channels, use_bn, rng):
        self.conv_a = Conv2d(channels, channels, 1, rng=rng)
        self.bn_a = BatchNorm(channels) if use_bn else None
        self.conv_b = Conv2d(channels, channels, 1, rng=rng, gain=1.0)
        self.bn_b = BatchNorm(channels) if use_bn else None

    def __call__(self, x):
        h = self.conv_a(T.relu(x))
        if self.bn_a is not None:
            h = self.bn_a(h)
        h = self.conv_b(T.relu(h))
        if self.bn_b is not None:
            h = self.bn_b(h)
        return T.add(x, h)


class ResBlock(Module):
    def __init__(self, cin, cout, kernel, stride, depth, use_bn, rng):
        self.kernel, self.stride = kernel, stride
        self.proj = Conv2d(cin, cout, 1, rng=rng, gain=1.0) if cin != cout else None
        self.conv_a = Conv2d(cin, cout, kernel, stride, rng=rng)
        self.bn_a = BatchNorm(cout) if use_bn else None
        self.conv_b = Conv2d(cout, cout, 1, rng=rng, gain=1.0)
        self.bn_b = BatchNorm(cout) if use_bn else None
        self.layers = [ResidualLayer(cout, use_bn, rng) for _ in range(depth - 1)]

    def __call__(self, x):
        base = T.mean_pool(x, self.kernel, self.stride)
        if self.proj is not None:
            base = self.proj(base)
        h = self.conv_a(x)
        if self.bn_a is not None:
            h = self.bn_a(h)
        h = self.conv_b(T.relu(h))
        if self.bn_b is not None:
            h = self.bn_b(h)
        y = T.add(base, h)
        for layer in self.layers:
            y = layer(y)
        return T.relu(y)


class ConvEmbedding(Module):
    """1x1-conv MLP with a linear shortcut, mapping [B,C,d,d] -> [B,nrkhs,d,d].

    Output layers start with gain 1/nrkhs so initial dot-product scores are O(1)
    instead of sitting in the saturated part of the soft clip.
    """

    def __init__(self, cin, nrkhs, rng):
        gain = 1.0 / nrkhs
        self.hidden = Conv2d(cin, nrkhs, 1, rng=rng, bias=True)
        self.out = Conv2d(nrkhs, nrkhs, 1, rng=rng, bias=True, gain=gain)
        self.shortcut = Conv2d(cin, nrkhs, 1, rng=rng, gain=gain)

    def __call__(self, f):
        return T.add(self.shortcut(f), self.out(T.relu(self.hidden(f))))


class DenseEmbedding(Module):
    """Fully-connected twin of :class:`ConvEmbedding`, mapping [B,C] -> [B,nrkhs]."""

    def __init__(self, cin, nrkhs, rng):
        gain = 1.0 / nrkhs
        self.hidden = Linear(cin, nrkhs, rng=rng)
        self.out = Linear(nrkhs, nrkhs, rng=rng, gain=gain)
        self.shortcut = Linear(cin, nrkhs, rng=rng, bias=False, gain=gain)

    def __call__(self, f):
        return T.add(self.shortcut(f), self.out(T.relu(self.hidden(f))))


class Encoder(Module):
    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        arch = ARCHITECTURES[config.input_size]
        self.blocks = []
        cin, extent = 3, config.input_size
        self.geometry = []  # (kernel, stride, out extent, channels) per block
        for n, (k, s, mult) in enumerate(arch):
            cout = mult * config.ndf
            depth = 1 if n == 0 else config.ndepth
            self.blocks.append(ResBlock(cin, cout, k, s, depth, config.use_bn, rng))
            extent = (extent - k) // s + 1
            self.geometry.append((k, s, extent, cout))
            cin = cout
        self.taps = {}
        for n, (_, _, extent, _) in enumerate(self.geometry):
            if extent in (7, 5, 1):
                self.taps[extent] = n
        if set(self.taps) != {7, 5, 1}:
            raise ConfigError(f"architecture for {config.input_size} does not emit 7/5/1 maps")
        c7, c5, c1 = (self.geometry[self.taps[d]][3] for d in (7, 5, 1))
        self.channels = {7: c7, 5: c5, 1: c1}
        self.phi7 = ConvEmbedding(c7, config.nrkhs, rng)
        self.phi5 = ConvEmbedding(c5, config.nrkhs, rng)
        self.phi1 = DenseEmbedding(c1, config.nrkhs, rng)

    def _as_input(self, batch) -> Tensor:
        data = batch.data if isinstance(batch, (ImageBatch, Tensor)) else np.asarray(batch)
        size = self.config.input_size
        if data.ndim != 4 or data.shape[1:] != (3, size, size):
            raise ShapeError(f"encoder expects [B,3,{size},{size}] input, got {data.shape}")
        dtype = self.blocks[0].conv_a.weight.dtype
        return Tensor((data - INPUT_MEAN) / INPUT_STD, dtype=dtype)

    def trunk(self, batch) -> dict[int, Tensor]:
        h = self._as_input(batch)
        taps = {}
        for n, block in enumerate(self.blocks):
            h = block(h)
            for d, idx in self.taps.items():
                if idx == n:
                    taps[d] = h
        return taps

    def __call__(self, batch) -> FeatureSet:
        return self.encode(batch)

    def encode(self, batch) -> FeatureSet:
        taps = self.trunk(batch)
        f1_flat = T.reshape(taps[1], (taps[1].shape[0], -1))
        return FeatureSet(f7=taps[7], f5=taps[5], f1=taps[1],
                          phi7=self.phi7(taps[7]), phi5=self.phi5(taps[5]), phi1=self.phi1(f1_flat))

    # -- receptive-field accounting ---------------------------------------
    def receptive_field(self, d: int, i: int, j: int) -> ReceptiveField:
        if d not in self.taps:
            raise ShapeError(f"no feature map with spatial size {d}")
        if not (0 <= i < d and 0 <= j < d):
            raise ShapeError(f"position ({i}, {j}) outside a {d}x{d} map")
        size, jump = 1, 1
        for k, s, _, _ in self.geometry[: self.taps[d] + 1]:
            size += (k - 1) * jump
            jump *= s
        top, left = i * jump, j * jump
        return ReceptiveField(d, (i, j), (top, left, top + size - 1, left + size - 1))

    def input_gradient(self, batch, d: int, i: int, j: int, rng=None) -> np.ndarray:
        """d<random projection of f_d[:, :, i, j]>/d input, shape [B,3,H,W]."""
        self.receptive_field(d, i, j)
        h = self._as_input(batch)
        h.requires_grad = True
        leaf, out = h, None
        for n, block in enumerate(self.blocks):
            h = block(h)
            if n == self.taps[d]:
                out = h
                break
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = np.zeros(out.shape)
        mask[:, :, i, j] = rng.standard_normal(out.shape[:2])
        T.sum(T.mul(out, Tensor(mask, dtype=out.dtype))).backward()
        return leaf.grad

    def rf_overlap(self, d: int, pos_a, pos_b) -> float:
        a = self.receptive_field(d, *pos_a).rect
        b = self.receptive_field(d, *pos_b).rect
        ih = max(0, min(a[2], b[2]) - max(a[0], b[0]) + 1)
        iw = max(0, min(a[3], b[3]) - max(a[1], b[1]) + 1)
        inter = ih * iw
        area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)  # noqa: E731
        return inter / (area(a) + area(b) - inter)

    def layer_table(self) -> list[dict]:
        rows, size, jump, extent = [], 1, 1, self.config.input_size
        for n, (k, s, out, c) in enumerate(self.geometry):
            size += (k - 1) * jump
            jump *= s
            tap = next((d for d, idx in self.taps.items() if idx == n), None)
            rows.append(dict(block=n, kernel=k, stride=s, in_extent=extent, out_extent=out, channels=c,
                             rf_size=size, rf_jump=jump, tap=tap))
            extent = out
        return rows


def build_encoder(config: EncoderConfig) -> Encoder:
    return Encoder(config)


def encoder_config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
