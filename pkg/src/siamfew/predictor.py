"""Logistic distance back-end and the iterative base-probability classifier.

A logistic model learned on (distance, pair label) records maps an embedding
distance to the probability that the two images share a class. Classification
of an unknown image then runs rounds of evidence updates: every still-active
class contributes predict - 0.5 to its running base value (initialized at
0.5), classes whose base drops below 0 are abandoned, and the first class
whose base exceeds 1 wins. A hard iteration cap with an argmax fallback makes
the procedure total.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_BASE_INIT = 0.5
DEFAULT_MAX_ITERATIONS = 50


@dataclass(frozen=True)
class LogisticModel:
    """P(different | d) = sigmoid(w * d + b); same-class probability is its complement."""

    w: float
    b: float

    def prob_different(self, distance):
        return _sigmoid(self.w * distance + self.b)

    def predict_same(self, distance):
        return 1.0 - _sigmoid(self.w * distance + self.b)


def _sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def fit_logistic(records, lr=0.1, iterations=500):
    """Fit (w, b) by full-batch gradient descent on the binomial likelihood.

    Deterministic: zero initialization, fixed step count. Needs at least one
    record of each label, otherwise the fit is degenerate.
    """
    if not records:
        raise ContractError("fit_logistic needs at least one record")
    d = np.array([r.distance for r in records], dtype=np.float64)
    y = np.array([r.label for r in records], dtype=np.float64)
    if y.min() == y.max():
        raise ContractError(f"fit_logistic needs both labels, got only {int(y[0])}")
    w = 0.0
    b = 0.0
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(w * d + b)))
        error = p - y
        w -= lr * float(error @ d) / len(d)
        b -= lr * float(error.sum()) / len(d)
    return LogisticModel(w, b)


@dataclass
class PredictorState:
    """Per-class running evidence for one classification."""

    base: np.ndarray
    active: np.ndarray
    iterations: int = 0
    max_iterations: int = DEFAULT_MAX_ITERATIONS

    @classmethod
    def fresh(cls, n_classes=4, base_init=DEFAULT_BASE_INIT, max_iterations=DEFAULT_MAX_ITERATIONS):
        return cls(
            base=np.full(n_classes, float(base_init)),
            active=np.ones(n_classes, dtype=bool),
            iterations=0,
            max_iterations=max_iterations,
        )


@dataclass(frozen=True)
class TraceRow:
    """One evidence update: who was probed, what it cost, where base landed."""

    iteration: int
    class_id: int
    distance: float
    predict: float
    base: float


TRACE_HEADER = "iteration,class,distance,predict,base"


def trace_to_csv(rows):
    lines = [TRACE_HEADER]
    for r in rows:
        lines.append(f"{r.iteration},{r.class_id},{r.distance!r},{r.predict!r},{r.base!r}")
    return "\n".join(lines) + "\n"


def classify_embedding(unknown, gallery, logistic, state=None, rng=None):
    """Iteratively classify an embedding against per-class reference embeddings.

    unknown: (dim,) vector; gallery: list over classes of (n_i, dim) arrays.
    Each round draws one random reference per active class, updates that
    class's base by predict - 0.5, abandons classes below 0, and stops at the
    first class above 1 (lowest id on simultaneous crossings). Hitting the
    iteration cap, or abandoning every class, falls back to the argmax base.

    Returns (class_id, state, trace).
    """
    n_classes = len(gallery)
    for class_id, members in enumerate(gallery):
        if len(members) == 0:
            raise ConfigError(f"gallery class {class_id} has no reference embeddings")
    if state is None:
        state = PredictorState.fresh(n_classes)
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(int(rng)))

    trace = []
    while state.iterations < state.max_iterations and state.active.any():
        state.iterations += 1
        for class_id in range(n_classes):
            if not state.active[class_id]:
                continue
            members = gallery[class_id]
            reference = members[rng.integers(len(members))]
            distance = float(np.sqrt(((unknown - reference) ** 2).sum()))
            predict = float(logistic.predict_same(distance))
            state.base[class_id] += predict - 0.5
            trace.append(
                TraceRow(state.iterations, class_id, distance, predict, float(state.base[class_id]))
            )
        # round finished: abandon sunk classes, then look for a winner
        state.active &= ~(state.base < 0.0)
        crossed = np.flatnonzero(state.active & (state.base > 1.0))
        if crossed.size:
            return int(crossed[0]), state, trace
    return int(np.argmax(state.base)), state, trace


def iterative_classify(model, logistic, unknown, gallery_images, n_classes=None, state=None, rng=None):
    """Classify a LabeledImage against labeled reference images.

    The Siamese front-end embeds every image with batch size 1 in eval mode;
    embeddings are computed once and reused across iterations, which is
    equivalent because eval-mode forwards are deterministic.
    """
    from .tensor import Tensor

    model.eval()
    n_classes = n_classes or model.num_classes
    by_class = [[] for _ in range(n_classes)]
    for image in gallery_images:
        if not 0 <= image.class_id < n_classes:
            raise ConfigError(f"gallery class id {image.class_id} outside [0, {n_classes})")
        by_class[image.class_id].append(image)
    for class_id, members in enumerate(by_class):
        if not members:
            raise ConfigError(f"gallery class {class_id} has no reference images")

    def embed_one(img):
        return model.embed(Tensor(img.pixels[None, None, :, :])).data[0]

    unknown_vec = embed_one(unknown)
    gallery_vecs = [np.stack([embed_one(img) for img in members]) for members in by_class]
    return classify_embedding(unknown_vec, gallery_vecs, logistic, state=state, rng=rng)
