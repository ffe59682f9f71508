"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic   5 bytes  b"SIAM1"
    version u32      currently 1
    config  u32 byte length, then UTF-8 key=value lines
    count   u32      number of named tensors
    entry   u16 name length, name UTF-8,
            u8 rank, rank * u32 extents,
            float32 data, C order

Entries hold every model parameter and batch-norm running statistic (cast to
float32) plus, for the contrastive mode, the logistic back-end coefficients.
save -> load -> save reproduces the original bytes exactly.
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"SIAM1"
VERSION = 1


def write_checkpoint(config_lines, tensors):
    """Serialize config text plus an ordered {name: array} mapping."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_lines.encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, count, what):
        end = self.offset + count
        if end > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {count} bytes for {what} at offset {self.offset}, "
                f"file has {len(self.blob)}"
            )
        piece = self.blob[self.offset : end]
        self.offset = end
        return piece

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(blob):
    """Parse checkpoint bytes into (config text, ordered {name: float32 array})."""
    reader = _Reader(blob)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (config_len,) = reader.unpack("<I", "config length")
    config_lines = reader.take(config_len, "config").decode("utf-8")
    (count,) = reader.unpack("<I", "tensor count")
    tensors = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"name length of tensor {index}")
        name = reader.take(name_len, f"name of tensor {index}").decode("utf-8")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{rank}I", f"extents of {name}")
        size = int(np.prod(shape)) if rank else 1
        raw = reader.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if reader.offset != len(blob):
        raise CheckpointError(
            f"{len(blob) - reader.offset} trailing bytes after offset {reader.offset}"
        )
    return config_lines, tensors


def model_state(model):
    """Named parameters and buffers of a model, as float32 arrays in order."""
    state = {}
    for name, p in model.named_parameters():
        state[name] = p.data.astype(np.float32, copy=True)
    for name, buf in model.named_buffers():
        state[name] = buf.astype(np.float32, copy=True)
    return state


def load_model_state(model, tensors):
    """Fill a freshly built model from checkpoint entries, validating shapes."""
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(
                f"parameter {name} has shape {tensors[name].shape}, model expects {p.shape}"
            )
        p.data[...] = tensors[name].astype(p.dtype)
        p.grad = None
    for name, buf in model.named_buffers():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing buffer {name}")
        if tensors[name].shape != buf.shape:
            raise CheckpointError(
                f"buffer {name} has shape {tensors[name].shape}, model expects {buf.shape}"
            )
        buf[...] = tensors[name].astype(buf.dtype)
    return model
