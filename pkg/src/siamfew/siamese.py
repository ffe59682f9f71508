"""Shared-weight twin model, contrastive loss, and the training step.

The twin forward runs one parameter set twice: both images of a pair pass
through the same backbone and embedding head, their 512-d embeddings meet in
a Euclidean distance, and the contrastive objective pulls same-class pairs
together while pushing different-class pairs beyond a margin of 2. The same
backbone also carries a 4-way classification head used only by the plain
cross-entropy baseline mode.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbones import build_backbone
from .errors import ContractError, NumericError, ShapeError
from .layers import Dense, Module
from .tensor import Tensor

EMBED_DIM = 512
DEFAULT_MARGIN = 2.0


@dataclass(frozen=True)
class DistanceRecord:
    """One pair's embedding distance and its label (0 same class, 1 different)."""

    distance: float
    label: int

    def __post_init__(self):
        if self.distance < 0:
            raise ContractError(f"distance must be nonnegative, got {self.distance}")
        if self.label not in (0, 1):
            raise ContractError(f"pair label must be 0 or 1, got {self.label}")


class SiameseModel(Module):
    """Backbone shared by both twins, a 512-d embedding head, a 4-way head."""

    def __init__(self, spec, num_classes=4, margin=DEFAULT_MARGIN, dtype=None):
        super().__init__()
        self.margin = margin
        self.num_classes = num_classes
        self.backbone = build_backbone(spec, dtype=dtype)
        self.embed_head = Dense(self.backbone.feature_dim, EMBED_DIM, dtype=dtype)
        self.class_head = Dense(self.backbone.feature_dim, num_classes, dtype=dtype)

    def embed(self, x):
        """Map an (n, 1, s, s) batch to (n, 512) embeddings."""
        return self.embed_head(self.backbone(x))

    def class_logits(self, x):
        return self.class_head(self.backbone(x))

    def class_probs(self, x):
        return T.softmax(self.class_head(self.backbone(x)), axis=1)

    def forward(self, x):
        return self.embed(x)


def euclidean_distance(u, v):
    """sqrt(sum((u - v)^2)) of two equal-length rank-1 tensors, as a scalar tensor."""
    if u.shape != v.shape or u.data.ndim != 1:
        raise ShapeError(f"euclidean_distance needs equal rank-1 shapes, got {u.shape}, {v.shape}")
    n = u.shape[0]
    d = pair_distances(T.reshape(u, (1, n)), T.reshape(v, (1, n)))
    return d


def pair_distances(a, b):
    """Row-wise Euclidean distances of two (n, d) embedding batches -> (n,)."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"pair_distances needs matching (n, d) shapes, got {a.shape}, {b.shape}")
    diff = T.sub(a, b)
    squared = T.tsum(T.mul(diff, diff), axis=1)
    return _sqrt_at_zero_safe(squared)


def _sqrt_at_zero_safe(s):
    # sqrt with subgradient 0 at s == 0, where the distance cone has no slope
    root = np.sqrt(s.data)
    out = Tensor(root)
    if T.tracing((s,)):
        positive = root > 0
        denom = np.where(positive, root, 1.0)
        T.record(out, (s,), lambda g: (g * 0.5 / denom * positive,))
    return out


def contrastive_loss(records, margin=DEFAULT_MARGIN):
    """Mean contrastive loss of a list of DistanceRecords, as a float.

    L = 1/(2N) * sum((1 - y) * d^2 + y * max(margin - d, 0)^2)
    """
    if not records:
        raise ContractError("contrastive_loss needs at least one record")
    d = np.array([r.distance for r in records], dtype=np.float64)
    y = np.array([r.label for r in records], dtype=np.float64)
    hinge = np.maximum(margin - d, 0.0)
    return float(((1.0 - y) * d * d + y * hinge * hinge).sum() / (2.0 * len(records)))


def contrastive_loss_tensor(distances, labels, margin=DEFAULT_MARGIN):
    """Differentiable contrastive loss over a rank-1 distance tensor."""
    if distances.data.ndim != 1:
        raise ShapeError(f"distances must be rank-1, got {distances.shape}")
    n = distances.shape[0]
    if n == 0 or len(labels) != n:
        raise ContractError(f"labels length {len(labels)} must match distances length {n}")
    if margin <= 0:
        raise ContractError(f"margin must be positive, got {margin}")
    y = Tensor(np.asarray(labels, dtype=distances.dtype))
    same = T.mul(T.mul(distances, distances), 1.0 - y)
    hinge = T.relu(margin - distances)
    different = T.mul(T.mul(hinge, hinge), y)
    return T.scale(T.tsum(T.add(same, different)), 1.0 / (2.0 * n))


def cross_entropy_loss(probs, labels):
    """Mean negative log-probability of the true class.

    probs rows must already be normalized (softmax output); probabilities are
    clamped at 1e-12 before the log.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"probs must be (n, classes), got {probs.shape}")
    n, c = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} must be ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    if np.abs(probs.data.sum(axis=1) - 1.0).max() > 1e-3:
        raise ContractError("probability rows must sum to 1")
    one_hot = np.zeros((n, c), dtype=probs.dtype)
    one_hot[np.arange(n), labels] = 1.0
    log_p = T.log(T.clip_min(probs, 1e-12))
    return T.scale(T.tsum(T.mul(log_p, Tensor(one_hot))), -1.0 / n)


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def siamese_train_step(model, batch, optimizer):
    """One contrastive update on a collated pair batch (a, b, labels).

    Both images travel through the one shared parameter set; gradients from
    the two twin forwards accumulate on the same tensors. Returns the batch
    loss and the DistanceRecords feeding the logistic back-end.
    """
    images_a, images_b, labels = batch
    n = len(labels)
    if n < 2:
        raise ContractError("train step needs batch size >= 2 (batch norm)")
    model.train()
    with T.Tape() as tape:
        # one stacked forward: both twins share parameters anyway, and batch
        # norm then sees the pair batch jointly
        emb = model.embed(Tensor(np.concatenate([images_a, images_b])))
        emb_a = T.narrow(emb, 0, n)
        emb_b = T.narrow(emb, n, 2 * n)
        distances = pair_distances(emb_a, emb_b)
        loss = contrastive_loss_tensor(distances, labels, model.margin)
        tape.backward(loss)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise NumericError(f"contrastive loss became non-finite: {loss_value}")
    optimizer.step()
    optimizer.zero_grad()
    records = [
        DistanceRecord(float(d), int(y)) for d, y in zip(distances.data, labels)
    ]
    return loss_value, records
