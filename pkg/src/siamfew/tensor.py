"""Dense n-dimensional tensors with a dynamic reverse-mode differentiation tape.

Every value flowing through the networks in this package is a :class:`Tensor`
wrapping a contiguous numpy array (float32 by default, float64 for gradient
verification). Differentiable operations record themselves on the currently
active :class:`Tape`; the tape is rebuilt on every forward pass and replayed
once, in reverse, by :meth:`Tape.backward`.

Only the broadcasting patterns the networks actually need are supported:
per-channel vectors against feature maps and bias vectors against matrices.
"""

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.float32

# Single active tape; nesting is a usage bug, not a feature.
_active_tape = None


def set_default_dtype(dtype):
    """Set the dtype used for tensors created without an explicit dtype."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


class Tensor:
    """A contiguous real-valued array of rank >= 1 with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        # Float ndarrays keep their precision (verification mode builds float64
        # graphs); python lists and scalars take the package default.
        if dtype is not None:
            arr = np.asarray(data).astype(np.dtype(dtype).type, copy=False)
        elif isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype.type

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def to_numpy(self):
        """Copy of the underlying array, detached from any tape."""
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value), dtype=like.dtype)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Records are appended in execution order, so every record's inputs were
    created before it; the backward pass walks the list exactly once in
    reverse, accumulating gradients with += where a tensor fans out.
    """

    def __init__(self):
        self.records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def backward(self, root):
        """Populate .grad on every requires_grad tensor reachable from root."""
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        pending = {id(root): np.ones_like(root.data)}
        for out, inputs, backward_fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for tensor, tensor_grad in zip(inputs, backward_fn(g)):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + tensor_grad
                else:
                    pending[key] = tensor_grad
        # Whatever is left in pending belongs to leaves (never produced by a record).
        by_id = {id(root): root}
        for out, inputs, _ in self.records:
            for t in inputs:
                by_id[id(t)] = t
            by_id[id(out)] = out
        for key, g in pending.items():
            leaf = by_id.get(key)
            if leaf is not None and leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape():
    return _active_tape


def tracing(inputs):
    """True when a tape is active and any input participates in gradients."""
    return _active_tape is not None and any(t.requires_grad for t in inputs)


def record(out, inputs, backward_fn):
    """Append one operation record to the active tape.

    backward_fn maps the output gradient to a tuple of per-input gradients
    (None for inputs that do not need one). Call only when tracing(inputs)
    is true; the output is marked requires_grad so downstream ops keep
    recording.
    """
    out.requires_grad = True
    _active_tape.records.append((out, tuple(inputs), backward_fn))
    return out


def _check_same_dtype(a, b):
    if a.dtype != b.dtype:
        raise ContractError(f"mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


def _align_operand(b, a_shape):
    """Validate the supported broadcast of b against a and describe it.

    Returns (broadcast view of b.data, axes the backward pass must sum over).
    Supported: identical shapes; per-channel (C,) or per-sample-per-channel
    (N, C) vectors against an (N, C, H, W) map; a bias (F,) against (N, F).
    """
    b_shape = b.data.shape
    if b_shape == a_shape:
        return b.data, None
    if len(a_shape) == 4:
        n, c, h, w = a_shape
        if b_shape == (c,):
            return b.data.reshape(1, c, 1, 1), (0, 2, 3)
        if b_shape == (n, c):
            return b.data.reshape(n, c, 1, 1), (2, 3)
        if b_shape == (n, 1, h, w):
            return b.data, (1,)
    if len(a_shape) == 2:
        if b_shape == (a_shape[1],):
            return b.data.reshape(1, -1), (0,)
        if b_shape == (a_shape[0], 1):
            return b.data, (1,)
    raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}")


def _reduce_to(g, reduce_axes, b_shape):
    if reduce_axes is None:
        return g
    return g.sum(axis=reduce_axes).reshape(b_shape)


def add(a, b):
    _check_same_dtype(a, b)
    b_view, reduce_axes = _align_operand(b, a.shape)
    out = Tensor(a.data + b_view)
    if tracing((a, b)):
        record(out, (a, b), lambda g: (g, _reduce_to(g, reduce_axes, b.shape)))
    return out


def sub(a, b):
    _check_same_dtype(a, b)
    b_view, reduce_axes = _align_operand(b, a.shape)
    out = Tensor(a.data - b_view)
    if tracing((a, b)):
        record(out, (a, b), lambda g: (g, -_reduce_to(g, reduce_axes, b.shape)))
    return out


def mul(a, b):
    _check_same_dtype(a, b)
    b_view, reduce_axes = _align_operand(b, a.shape)
    out = Tensor(a.data * b_view)
    if tracing((a, b)):
        a_data = a.data

        def backward(g):
            return g * b_view, _reduce_to(g * a_data, reduce_axes, b.shape)

        record(out, (a, b), backward)
    return out


def div(a, b):
    _check_same_dtype(a, b)
    b_view, reduce_axes = _align_operand(b, a.shape)
    out = Tensor(a.data / b_view)
    if tracing((a, b)):
        a_data = a.data

        def backward(g):
            return g / b_view, _reduce_to(-g * a_data / (b_view * b_view), reduce_axes, b.shape)

        record(out, (a, b), backward)
    return out


def scale(a, k):
    k = a.dtype(k)
    out = Tensor(a.data * k)
    if tracing((a,)):
        record(out, (a,), lambda g: (g * k,))
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    if tracing((a,)):
        mask = a.data > 0
        record(out, (a,), lambda g: (g * mask,))
    return out


def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    if tracing((a,)):
        record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def log(a):
    out = Tensor(np.log(a.data))
    if tracing((a,)):
        record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a):
    root = np.sqrt(a.data)
    out = Tensor(root)
    if tracing((a,)):
        record(out, (a,), lambda g: (g * 0.5 / root,))
    return out


def clip_min(a, floor):
    out = Tensor(np.maximum(a.data, floor))
    if tracing((a,)):
        mask = a.data > floor
        record(out, (a,), lambda g: (g * mask,))
    return out


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if tracing((a, b)):
        a_data, b_data = a.data, b.data
        record(out, (a, b), lambda g: (g @ b_data.T, a_data.T @ g))
    return out


def transpose2d(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a rank-2 tensor, got {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T))
    if tracing((a,)):
        record(out, (a,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def softmax(a, axis):
    x = a.data
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    axis = axis % x.ndim
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if tracing((a,)):

        def backward(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            return ((g - inner) * y,)

        record(out, (a,), backward)
    return out


def tsum(a, axis=None):
    if axis is None:
        out = Tensor(a.data.sum().reshape(1))
        if tracing((a,)):
            shape, dtype = a.shape, a.data.dtype
            record(out, (a,), lambda g: (np.full(shape, g[0], dtype=dtype),))
        return out
    axis = axis % a.data.ndim
    out = Tensor(a.data.sum(axis=axis))
    if tracing((a,)):
        reps = a.shape[axis]

        def backward(g):
            return (np.repeat(np.expand_dims(g, axis), reps, axis=axis),)

        record(out, (a,), backward)
    return out


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape))
    if tracing((a,)):
        old = a.shape
        record(out, (a,), lambda g: (g.reshape(old),))
    return out


def narrow(a, start, stop):
    """Contiguous row slice [start, stop) along axis 0."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"narrow range [{start}, {stop}) invalid for axis-0 extent {a.shape[0]}")
    out = Tensor(a.data[start:stop])
    if tracing((a,)):
        full_shape, dtype = a.shape, a.data.dtype

        def backward(g):
            dx = np.zeros(full_shape, dtype=dtype)
            dx[start:stop] = g
            return (dx,)

        record(out, (a,), backward)
    return out


def concat(parts, axis):
    if not parts:
        raise ContractError("concat needs at least one tensor")
    axis = axis % parts[0].data.ndim
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if tracing(parts):
        extents = [p.shape[axis] for p in parts]
        splits = np.cumsum(extents)[:-1]
        record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def grad_check(f, x, h=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f must map the tensor x to a scalar tensor. x must be float64; finite
    differences are not trustworthy in float32.
    """
    if x.dtype is not np.float64:
        raise ContractError("grad_check requires a float64 tensor")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat_x = x.data.reshape(-1)
    flat_num = numeric.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + h
        f_plus = f(x).item()
        flat_x[i] = original - h
        f_minus = f(x).item()
        flat_x[i] = original
        flat_num[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
