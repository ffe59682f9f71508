"""Plug-in attention blocks: SE, SK, ECA and SGE.

Each block maps an (n, c, h, w) feature map to a same-shape re-weighted map,
so any of them can be inserted at any point of a backbone without changing
downstream shapes. Gating coefficients always pass through a sigmoid (or a
two-way softmax for SK), keeping them in (0, 1).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import Conv2d, Dense, Module, Parameter, dense, global_avg_pool
from .tensor import Tensor

ATTENTION_KINDS = ("none", "se", "sk", "eca", "sge")


@dataclass
class AttentionConfig:
    """Hyperparameters for the four block families."""

    kind: str = "none"
    se_reduction: int = 4
    eca_gamma: float = 2.0
    eca_b: float = 1.0
    sk_reduction: int = 4
    sge_groups: int = 4
    sge_eps: float = 1e-5


def build_attention(config, channels, dtype=None):
    """Instantiate the configured block for a given channel count.

    Returns None for kind "none" so call sites can skip insertion entirely.
    """
    kind = config.kind.lower()
    if kind == "none":
        return None
    if kind == "se":
        return SqueezeExcite(channels, config.se_reduction, dtype=dtype)
    if kind == "sk":
        return SelectiveKernel(channels, config.sk_reduction, dtype=dtype)
    if kind == "eca":
        return EfficientChannelAttention(channels, config.eca_gamma, config.eca_b, dtype=dtype)
    if kind == "sge":
        return SpatialGroupEnhance(channels, config.sge_groups, config.sge_eps, dtype=dtype)
    raise ConfigError(f"unknown attention kind {config.kind!r}; choose from {ATTENTION_KINDS}")


class SqueezeExcite(Module):
    """Per-channel gating from a squeezed global descriptor.

    gate = sigmoid(W2 @ relu(W1 @ gap(x))), applied channel-wise to x.
    """

    def __init__(self, channels, reduction=4, dtype=None):
        super().__init__()
        if channels < reduction:
            raise ConfigError(f"SE needs channels >= reduction, got {channels} < {reduction}")
        hidden = channels // reduction
        self.reduce = Dense(channels, hidden, dtype=dtype)
        self.expand = Dense(hidden, channels, dtype=dtype)

    def forward(self, x):
        squeezed = global_avg_pool(x)  # (n, c)
        gate = T.sigmoid(self.expand(T.relu(self.reduce(squeezed))))
        return T.mul(x, gate)


class EfficientChannelAttention(Module):
    """Per-channel gating via a short 1-d convolution over the channel axis."""

    def __init__(self, channels, gamma=2.0, b=1.0, dtype=None):
        super().__init__()
        self.kernel_size = eca_kernel_size(channels, gamma, b)
        fan_in = self.kernel_size
        self.weight = Parameter((self.kernel_size,), ("he", fan_in), dtype=dtype)

    def forward(self, x):
        squeezed = global_avg_pool(x)  # (n, c)
        gate = T.sigmoid(conv1d_channels(squeezed, self.weight))
        return T.mul(x, gate)


def eca_kernel_size(channels, gamma=2.0, b=1.0):
    """Odd kernel length derived from the channel count, at least 1."""
    value = abs(np.log2(channels) / gamma + b / gamma)
    trunc = int(value)
    k = trunc if trunc % 2 == 1 else trunc + 1
    return max(1, k)


def conv1d_channels(x, weight):
    """Correlate each row of x (n, c) with a kernel (k,), zero-padded symmetrically."""
    n, c = x.shape
    k = weight.shape[0]
    pad = (k - 1) // 2
    x_pad = np.pad(x.data, ((0, 0), (pad, pad)))
    # (n, c, k) windows over the channel axis
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, k, axis=1)
    out = Tensor(windows @ weight.data)
    if T.tracing((x, weight)):

        def backward(g):
            d_weight = np.einsum("nc,nck->k", g, windows)
            d_pad = np.zeros_like(x_pad)
            for j in range(k):
                d_pad[:, j : j + c] += g * weight.data[j]
            return d_pad[:, pad : pad + c], d_weight

        T.record(out, (x, weight), backward)
    return out


class SelectiveKernel(Module):
    """Two-branch kernel selection: 3x3 and 5x5 paths fused by per-channel softmax.

    The two branch logits pass through a softmax pair, so the mixing weights
    sum to 1 per channel and the output is a convex blend of the branches.
    """

    def __init__(self, channels, reduction=4, dtype=None):
        super().__init__()
        if channels < reduction:
            raise ConfigError(f"SK needs channels >= reduction, got {channels} < {reduction}")
        hidden = max(channels // reduction, 4)
        self.branch3 = Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.branch5 = Conv2d(channels, channels, 5, padding=2, dtype=dtype)
        self.fuse = Dense(channels, hidden, dtype=dtype)
        self.select3 = Dense(hidden, channels, dtype=dtype)
        self.select5 = Dense(hidden, channels, dtype=dtype)

    def forward(self, x):
        u3 = self.branch3(x)
        u5 = self.branch5(x)
        summary = self.fuse(global_avg_pool(T.add(u3, u5)))  # (n, hidden)
        logit3 = self.select3(summary)
        logit5 = self.select5(summary)
        # softmax over exactly two branches, written as a sigmoid of the gap
        a3 = T.sigmoid(T.sub(logit3, logit5))
        a5 = 1.0 - a3
        return T.add(T.mul(u3, a3), T.mul(u5, a5))


class SpatialGroupEnhance(Module):
    """Per-group spatial gating from similarity with the group's mean feature.

    Each channel group's positions are scored by the dot product with the
    group's pooled descriptor; scores are normalized over space, scaled and
    shifted per group (init 1 and 0), squashed, and multiply the group.
    """

    def __init__(self, channels, groups=4, eps=1e-5, dtype=None):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"SGE needs channels divisible by groups, got {channels} % {groups}")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter((groups,), ("ones",), dtype=dtype)
        self.bias = Parameter((groups,), ("zeros",), dtype=dtype)

    def forward(self, x):
        n, c, h, w = x.shape
        g = self.groups
        grouped = T.reshape(x, (n * g, c // g, h, w))
        descriptor = global_avg_pool(grouped)  # (n*g, c/g)
        similarity = T.tsum(T.mul(grouped, descriptor), axis=1)  # (n*g, h, w)
        flat = T.reshape(similarity, (n * g, h * w))
        mean = T.scale(T.tsum(flat, axis=1), 1.0 / (h * w))
        centered = T.sub(flat, T.reshape(mean, (n * g, 1)))
        variance = T.scale(T.tsum(T.mul(centered, centered), axis=1), 1.0 / (h * w))
        std = T.sqrt(variance)
        normalized = T.div(centered, T.reshape(std + self.eps, (n * g, 1)))
        scores = T.reshape(normalized, (n, g, h, w))
        gate = T.sigmoid(T.add(T.mul(scores, self.weight), self.bias))
        gated = T.mul(grouped, T.reshape(gate, (n * g, 1, h, w)))
        return T.reshape(gated, (n, c, h, w))
