"""Desk-scale backbones: a 4-layer residual net and a 5-block inception net.

Both map an (n, 1, s, s) grayscale batch to an (n, feature_dim) vector via a
global average pool. Attention blocks are optional and shape-preserving, so
insertion never changes any downstream extent: the residual net takes one
block at the end of each of its 4 layers (never inside a residual block),
the inception net one block after each of its 5 block types.

Downsampling always goes through 2x2 max pooling: odd kernels with exact
output arithmetic cannot realize stride-2 convolutions on even extents.
"""

from dataclasses import dataclass, field

from . import tensor as T
from .attention import (
    AttentionConfig,
    EfficientChannelAttention,
    SelectiveKernel,
    SpatialGroupEnhance,
    SqueezeExcite,
    build_attention,
)
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Module, avg_pool3x3, global_avg_pool, max_pool2x2

BACKBONE_FAMILIES = ("resnet_tiny", "inception_tiny")

_ATTENTION_TYPES = (SqueezeExcite, SelectiveKernel, EfficientChannelAttention, SpatialGroupEnhance)


@dataclass
class BackboneSpec:
    family: str = "resnet_tiny"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    widths: tuple = (8, 16, 32, 64)
    in_channels: int = 1
    image_size: int = 32


def build_backbone(spec, dtype=None):
    family = spec.family.lower()
    if family == "resnet_tiny":
        return build_resnet_tiny(spec, dtype=dtype)
    if family == "inception_tiny":
        return build_inception_tiny(spec, dtype=dtype)
    raise ConfigError(f"unknown backbone family {spec.family!r}; choose from {BACKBONE_FAMILIES}")


def build_resnet_tiny(spec, dtype=None):
    if len(spec.widths) != 4:
        raise ConfigError(f"resnet_tiny needs 4 channel widths, got {spec.widths}")
    return ResNetTiny(spec, dtype=dtype)


def build_inception_tiny(spec, dtype=None):
    return InceptionTiny(spec, dtype=dtype)


def attention_count(model):
    """Number of attention blocks anywhere in the model (structural check)."""
    return sum(isinstance(m, _ATTENTION_TYPES) for m in model.modules())


class ResidualBlock(Module):
    """conv-bn-relu-conv-bn plus identity (or 1x1 projection) skip.

    When downsample is set, a 2x2 max pool halves the input before both
    paths, so the skip structure stays intact.
    """

    def __init__(self, in_channels, out_channels, downsample=False, dtype=None):
        super().__init__()
        self.downsample = downsample
        self.conv1 = Conv2d(in_channels, out_channels, 3, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.projection = None
        if in_channels != out_channels:
            self.projection = Conv2d(in_channels, out_channels, 1, bias=False, dtype=dtype)

    def forward(self, x):
        if self.downsample:
            x = max_pool2x2(x)
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.projection(x) if self.projection is not None else x
        return T.relu(T.add(h, skip))


class ResNetTiny(Module):
    """Stem conv, then 4 layers of 2 residual blocks; layers 2-4 halve space.

    With attention enabled there are exactly 4 attention blocks, one after
    each layer and never inside a block.
    """

    def __init__(self, spec, dtype=None):
        super().__init__()
        w = tuple(spec.widths)
        self.image_size = spec.image_size
        self.in_channels = spec.in_channels
        self.feature_dim = w[3]
        self.stem = ConvBnRelu(spec.in_channels, w[0], 3, 1, dtype=dtype)
        self.layers = []
        self.attentions = []
        previous = w[0]
        for i, channels in enumerate(w):
            blocks = [
                ResidualBlock(previous, channels, downsample=(i > 0), dtype=dtype),
                ResidualBlock(channels, channels, dtype=dtype),
            ]
            self.layers.extend(blocks)
            gate = build_attention(spec.attention, channels, dtype=dtype)
            if gate is not None:
                self.attentions.append(gate)
            previous = channels

    def forward(self, x):
        _check_input(x, self.in_channels, self.image_size)
        h = self.stem(x)
        for i in range(4):
            h = self.layers[2 * i](h)
            h = self.layers[2 * i + 1](h)
            if self.attentions:
                h = self.attentions[i](h)
        return global_avg_pool(h)


class InceptionBranchA(Module):
    """Parallel 1x1 / 3x3 / double-3x3 / pool-1x1 branches, concatenated."""

    def __init__(self, in_channels, branch_channels, dtype=None):
        super().__init__()
        b = branch_channels
        self.one = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.three_reduce = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.three = ConvBnRelu(b, b, 3, 1, dtype=dtype)
        self.double_reduce = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.double_a = ConvBnRelu(b, b, 3, 1, dtype=dtype)
        self.double_b = ConvBnRelu(b, b, 3, 1, dtype=dtype)
        self.pool_proj = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.out_channels = 4 * b

    def forward(self, x):
        return T.concat(
            [
                self.one(x),
                self.three(self.three_reduce(x)),
                self.double_b(self.double_a(self.double_reduce(x))),
                self.pool_proj(avg_pool3x3(x)),
            ],
            axis=1,
        )


class InceptionReduction(Module):
    """3x3 conv path and a bare pool path, both halved, concatenated."""

    def __init__(self, in_channels, conv_channels, dtype=None):
        super().__init__()
        self.reduce = ConvBnRelu(in_channels, conv_channels, 1, 0, dtype=dtype)
        self.conv = ConvBnRelu(conv_channels, conv_channels, 3, 1, dtype=dtype)
        self.out_channels = in_channels + conv_channels

    def forward(self, x):
        conv_path = max_pool2x2(self.conv(self.reduce(x)))
        pool_path = max_pool2x2(x)
        return T.concat([conv_path, pool_path], axis=1)


class InceptionBranchB(Module):
    """1x1 branch plus a factorized 1x3 then 3x1 branch, concatenated."""

    def __init__(self, in_channels, branch_channels, dtype=None):
        super().__init__()
        b = branch_channels
        self.one = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.factor_reduce = ConvBnRelu(in_channels, b, 1, 0, dtype=dtype)
        self.factor_row = ConvBnRelu(b, b, (1, 3), (0, 1), dtype=dtype)
        self.factor_col = ConvBnRelu(b, b, (3, 1), (1, 0), dtype=dtype)
        self.out_channels = 2 * b

    def forward(self, x):
        return T.concat(
            [self.one(x), self.factor_col(self.factor_row(self.factor_reduce(x)))],
            axis=1,
        )


class InceptionStem(Module):
    """Two conv-bn-relu stages lifting grayscale input to the working width."""

    def __init__(self, in_channels, out_channels, dtype=None):
        super().__init__()
        mid = max(out_channels // 2, 1)
        self.conv1 = ConvBnRelu(in_channels, mid, 3, 1, dtype=dtype)
        self.conv2 = ConvBnRelu(mid, out_channels, 3, 1, dtype=dtype)
        self.out_channels = out_channels

    def forward(self, x):
        return self.conv2(self.conv1(x))


class InceptionTiny(Module):
    """Five block types in sequence, one block of each type.

    stem -> branch-A -> reduction-A -> branch-B -> reduction-B, with one
    attention block after each type when attention is enabled (5 total).
    """

    def __init__(self, spec, dtype=None):
        super().__init__()
        self.image_size = spec.image_size
        self.in_channels = spec.in_channels
        self.blocks = []
        self.attentions = []
        stem = InceptionStem(spec.in_channels, 16, dtype=dtype)
        branch_a = InceptionBranchA(stem.out_channels, 8, dtype=dtype)
        reduction_a = InceptionReduction(branch_a.out_channels, 16, dtype=dtype)
        branch_b = InceptionBranchB(reduction_a.out_channels, 16, dtype=dtype)
        reduction_b = InceptionReduction(branch_b.out_channels, 32, dtype=dtype)
        self.blocks = [stem, branch_a, reduction_a, branch_b, reduction_b]
        for block in self.blocks:
            gate = build_attention(spec.attention, block.out_channels, dtype=dtype)
            if gate is not None:
                self.attentions.append(gate)
        self.feature_dim = reduction_b.out_channels

    def forward(self, x):
        _check_input(x, self.in_channels, self.image_size)
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if self.attentions:
                h = self.attentions[i](h)
        return global_avg_pool(h)


def _check_input(x, in_channels, image_size):
    if x.data.ndim != 4 or x.shape[1] != in_channels or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ShapeError(
            f"backbone expects (n, {in_channels}, {image_size}, {image_size}) input, got {x.shape}"
        )
