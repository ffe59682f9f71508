"""Trainable neural layers: convolution, batch norm, pooling, dense.

Functional forms carry their own analytic backward rules and register on the
active tape; the Module classes wrap them with parameters and mode handling.
Convolution is vectorized through im2col so CPU training stays usable; the
semantics are plain cross-correlation, pinned by loop oracles in the tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor plus the recipe init_parameters uses to fill it.

    init_spec is ("he", fan_in), ("zeros",) or ("ones",); the shape is fixed
    at construction.
    """

    __slots__ = ("init_spec",)

    def __init__(self, shape, init_spec, dtype=None):
        shape = tuple(int(s) for s in shape)
        kind = np.dtype(dtype or T.default_dtype()).type
        if init_spec[0] == "ones":
            data = np.ones(shape, dtype=kind)
        else:
            data = np.zeros(shape, dtype=kind)
        super().__init__(data, requires_grad=True)
        self.init_spec = init_spec


class Module:
    """Base class giving parameter/buffer traversal and train/eval modes.

    Attribute order is insertion order, so traversal (and therefore
    initialization and checkpoints) is deterministic.
    """

    def __init__(self):
        self.training = True
        self._buffers = {}

    def register_buffer(self, name, array):
        self._buffers[name] = array

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _components(self):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(f"{full}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, array in self._buffers.items():
            yield f"{prefix}{name}", array
        for name, value in self._components():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._components():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def init_parameters(model, seed):
    """Fill every parameter of model from its init_spec, driven by one seed.

    Conv/dense weights are drawn normal with std sqrt(2 / fan_in); constant
    specs are re-applied, so calling twice with the same seed is idempotent
    and bitwise-reproducible. Batch-norm running stats reset to (0, 1).
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    for _, p in model.named_parameters():
        if p.init_spec[0] == "he":
            std = np.sqrt(2.0 / p.init_spec[1])
            p.data[...] = (rng.standard_normal(p.shape) * std).astype(p.dtype)
        elif p.init_spec[0] == "ones":
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.grad = None
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0
    return model


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate x (n, c_in, h, w) with weight (c_out, c_in, kh, kw).

    Output extents must divide exactly: (h + 2*pad - kh) / stride + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if c_in != wc_in:
        raise ShapeError(f"input has {c_in} channels, weight expects {wc_in}")
    ph, pw = _pair(padding)
    stride = int(stride)
    if (h + 2 * ph - kh) % stride or (w + 2 * pw - kw) % stride:
        raise ShapeError(
            f"non-integral conv output for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding ({ph}, {pw})"
        )
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w + 2 * pw - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv output extent below 1: {h_out}x{w_out}")

    if (kh, kw) == (1, 1) and stride == 1 and not (ph or pw):
        return _conv1x1(x, weight, bias)

    x_pad = x.data
    if ph or pw:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(x_pad, kh, kw, stride)  # (n*h_out*w_out, c_in*kh*kw)
    w_flat = weight.data.reshape(c_out, -1)
    y = cols @ w_flat.T
    if bias is not None:
        y += bias.data.reshape(1, c_out)
    y = y.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(y))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    if T.tracing(inputs):
        pad_shape = x_pad.shape

        def backward(g):
            g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, c_out)
            d_weight = (g_flat.T @ cols).reshape(weight.shape)
            if stride == 1:
                # correlate the padded upstream gradient with flipped kernels;
                # one gemm instead of a k^2 scatter loop
                g_full = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                g_cols = _im2col(g_full, kh, kw, 1)
                w_turn = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
                dx_pad = (g_cols @ w_turn.T).reshape(n, *pad_shape[2:], c_in).transpose(0, 3, 1, 2)
            else:
                d_cols = (g_flat @ w_flat).reshape(n, h_out, w_out, c_in, kh, kw)
                d_cols = d_cols.transpose(0, 3, 4, 5, 1, 2)  # (n, c, kh, kw, h_out, w_out)
                dx_pad = np.zeros(pad_shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dx_pad[
                            :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
                        ] += d_cols[:, :, i, j]
            dx = dx_pad[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dx_pad
            if bias is None:
                return dx, d_weight
            return dx, d_weight, g.sum(axis=(0, 2, 3))

        T.record(out, inputs, backward)
    return out


def _im2col(x_pad, kh, kw, stride):
    view = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, h_out, w_out = view.shape[:4]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)


def _conv1x1(x, weight, bias):
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    w2 = weight.data.reshape(c_out, c_in)
    flat = x.data.reshape(n, c_in, h * w)
    y = np.matmul(w2, flat)  # (n, c_out, h*w)
    if bias is not None:
        y += bias.data.reshape(1, c_out, 1)
    out = Tensor(y.reshape(n, c_out, h, w))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if T.tracing(inputs):

        def backward(g):
            g2 = g.reshape(n, c_out, h * w)
            dx = np.matmul(w2.T, g2).reshape(n, c_in, h, w)
            d_weight = np.einsum("nop,ncp->oc", g2, flat).reshape(weight.shape)
            if bias is None:
                return dx, d_weight
            return dx, d_weight, g.sum(axis=(0, 2, 3))

        T.record(out, inputs, backward)
    return out


def max_pool2x2(x):
    """2x2 max pooling with stride 2; gradient goes to the first max per window."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2 needs a rank-4 tensor, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    # window elements ordered row-major: (0,0), (0,1), (1,0), (1,1)
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    if T.tracing((x,)):

        def backward(g):
            d_windows = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(d_windows, idx[..., None], g[..., None], axis=-1)
            return (
                np.ascontiguousarray(
                    d_windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
                ),
            )

        T.record(out, (x,), backward)
    return out


def avg_pool3x3(x):
    """3x3 average pooling, stride 1, zero padding 1; preserves spatial shape.

    Zero padding counts toward the divisor of 9, matching the usual
    count-include-pad convention.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool3x3 needs a rank-4 tensor, got {x.shape}")
    n, c, h, w = x.shape
    x_pad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    view = sliding_window_view(x_pad, (3, 3), axis=(2, 3))
    out = Tensor(np.ascontiguousarray(view.mean(axis=(4, 5))))
    if T.tracing((x,)):

        def backward(g):
            ninth = g / 9.0
            dx_pad = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    dx_pad[:, :, i : i + h, j : j + w] += ninth
            return (np.ascontiguousarray(dx_pad[:, :, 1 : 1 + h, 1 : 1 + w]),)

        T.record(out, (x,), backward)
    return out


def global_avg_pool(x):
    """Spatial mean of an (n, c, h, w) map -> (n, c)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs a rank-4 tensor, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if T.tracing((x,)):
        area = h * w

        def backward(g):
            return (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),)

        T.record(out, (x,), backward)
    return out


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization of an (n, c, h, w) map.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running arrays in place (unbiased variance, like the prevailing
    convention); eval mode reads the running arrays and never writes them.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d needs a rank-4 tensor, got {x.shape}")
    n, c, h, w = x.shape
    if training:
        if n < 2:
            raise ContractError("batch_norm2d in train mode needs batch size >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        count = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None])

    if T.tracing((x, gamma, beta)):
        g_data = gamma.data

        if training:
            count = n * h * w

            def backward(g):
                d_beta = g.sum(axis=(0, 2, 3))
                d_gamma = (g * x_hat).sum(axis=(0, 2, 3))
                # batch statistics depend on x, hence the two correction terms
                dx_hat = g * g_data[None, :, None, None]
                dx = (
                    dx_hat
                    - dx_hat.mean(axis=(0, 2, 3), keepdims=True)
                    - x_hat * (dx_hat * x_hat).mean(axis=(0, 2, 3), keepdims=True)
                ) * inv_std[None, :, None, None]
                return np.ascontiguousarray(dx), d_gamma, d_beta

        else:

            def backward(g):
                d_beta = g.sum(axis=(0, 2, 3))
                d_gamma = (g * x_hat).sum(axis=(0, 2, 3))
                dx = g * (g_data * inv_std)[None, :, None, None]
                return np.ascontiguousarray(dx), d_gamma, d_beta

        T.record(out, (x, gamma, beta), backward)
    return out


def dense(x, weight, bias=None):
    """Affine map of (n, f_in) rows by weight (f_out, f_in) and bias (f_out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense needs rank-2 input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} != weight fan-in {weight.shape[1]}")
    y = T.matmul(x, T.transpose2d(weight))
    if bias is not None:
        y = T.add(y, bias)
    return y


def flatten(x):
    """Collapse all but the leading batch axis."""
    n = x.shape[0]
    return T.reshape(x, (n, x.size // n))


# ---------------------------------------------------------------------------
# layer modules
# ---------------------------------------------------------------------------

_ALLOWED_KERNELS = (1, 3, 5)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, padding=0, bias=True, dtype=None):
        super().__init__()
        kh, kw = _pair(kernel_size)
        if kh not in _ALLOWED_KERNELS or kw not in _ALLOWED_KERNELS:
            raise ShapeError(f"conv kernel extents must be odd (1, 3 or 5), got {kh}x{kw}")
        self.padding = _pair(padding)
        fan_in = in_channels * kh * kw
        self.weight = Parameter((out_channels, in_channels, kh, kw), ("he", fan_in), dtype=dtype)
        self.bias = Parameter((out_channels,), ("zeros",), dtype=dtype) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=None):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter((channels,), ("ones",), dtype=dtype)
        self.beta = Parameter((channels,), ("zeros",), dtype=dtype)
        kind = np.float64 if np.dtype(dtype or T.default_dtype()).type is np.float64 else np.float32
        self.running_mean = np.zeros(channels, dtype=kind)
        self.running_var = np.ones(channels, dtype=kind)
        self.register_buffer("running_mean", self.running_mean)
        self.register_buffer("running_var", self.running_var)

    def forward(self, x):
        return batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
        )


class Dense(Module):
    def __init__(self, in_features, out_features, dtype=None):
        super().__init__()
        self.weight = Parameter((out_features, in_features), ("he", in_features), dtype=dtype)
        self.bias = Parameter((out_features,), ("zeros",), dtype=dtype)

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Module):
    def forward(self, x):
        return max_pool2x2(x)


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)


class ConvBnRelu(Module):
    """conv -> batch norm -> relu, the stock block both backbones are made of."""

    def __init__(self, in_channels, out_channels, kernel_size, padding, dtype=None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, padding, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))
