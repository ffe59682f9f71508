"""Experiment orchestration: configuration, training, evaluation, artifacts.

A training run is fully determined by its TrainConfig: the same config and
seed reproduce the metrics CSV and checkpoints bit for bit. Each epoch of the
contrastive mode builds a fresh balanced pair epoch, steps the twin model,
refits the logistic back-end on that epoch's distance records, and logs train
and test kappa measured by the iterative classifier. The baseline mode trains
the same backbone with the 4-way cross-entropy head instead.

The best-test-kappa checkpoint and the final checkpoint are both written,
plus a metrics CSV with one row per epoch.
"""

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .attention import ATTENTION_KINDS, AttentionConfig
from .backbones import BACKBONE_FAMILIES, BackboneSpec
from .checkpoint import load_model_state, model_state, read_checkpoint, write_checkpoint
from .data import (
    PairEpochPlan,
    SyntheticSpec,
    build_pair_epoch,
    gen_synthetic,
    labels_of,
    load_dataset,
    stack_images,
    stack_pairs,
)
from .errors import ConfigError, DataError, NumericError
from .layers import init_parameters
from .metrics import ConfusionMatrix, kappa
from .predictor import LogisticModel, PredictorState, classify_embedding, fit_logistic
from .siamese import Adam, SiameseModel, cross_entropy_loss, siamese_train_step
from .tensor import Tensor

METRICS_HEADER = "epoch,loss,train_kappa,test_kappa"

MODES = ("siamese", "baseline")

# purpose tags for deterministic per-task random streams
_TRAIN_DATA, _TEST_DATA, _EPOCH, _EVAL, _SHUFFLE = 1, 2, 3, 4, 5


@dataclass
class TrainConfig:
    """One experiment; defaults follow the 10-images-per-class recipe."""

    mode: str = "siamese"
    backbone: str = "resnet_tiny"
    attention: str = "none"
    length: int = 500
    batch_size: int = 32
    base_init: float = 0.5
    lr: float = 0.001
    epochs: int = 30
    seed: int = 0
    image_size: int = 32
    widths: tuple = (8, 16, 32, 64)
    margin: float = 2.0
    max_iterations: int = 50
    classes: int = 4
    data: str = "synthetic"
    per_class: int = 10
    test_per_class: int = 40
    noise_sigma: float = 0.05

    def validate(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backbone not in BACKBONE_FAMILIES:
            problems.append(f"backbone must be one of {BACKBONE_FAMILIES}, got {self.backbone!r}")
        if self.attention not in ATTENTION_KINDS:
            problems.append(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.length <= 0 or self.length % 2:
            problems.append(f"length must be even and positive, got {self.length}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.margin <= 0:
            problems.append(f"margin must be positive, got {self.margin}")
        if self.max_iterations < 1:
            problems.append(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.image_size < 8 or self.image_size % 8:
            problems.append(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if len(self.widths) != 4 or any(w < 4 for w in self.widths):
            problems.append(f"widths must be 4 values >= 4, got {self.widths}")
        if self.per_class < 2:
            problems.append(f"per_class must be >= 2, got {self.per_class}")
        if self.test_per_class < 1:
            problems.append(f"test_per_class must be >= 1, got {self.test_per_class}")
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
        return self

    def to_lines(self):
        pairs = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "widths":
                value = ",".join(str(int(w)) for w in value)
            pairs.append(f"{f.name}={value}")
        return "\n".join(pairs) + "\n"

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def from_lines(cls, text):
        return cls.from_mapping(parse_config_lines(text))

    def backbone_spec(self):
        return BackboneSpec(
            family=self.backbone,
            attention=AttentionConfig(self.attention),
            widths=tuple(self.widths),
            image_size=self.image_size,
        )


def _coerce(key, raw, annotation):
    if isinstance(raw, (int, float, tuple)):
        return raw
    raw = raw.strip()
    try:
        if key == "widths":
            return tuple(int(part) for part in raw.split(","))
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} has malformed value {raw!r}") from None
    return raw


def parse_config_lines(text):
    """Parse flat key=value lines; '#' starts a comment, blank lines skipped."""
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not key=value: {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_lines(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def _rng(config_seed, *parts):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(config_seed), *parts])))


def _sub_seed(config_seed, *parts):
    return int(np.random.SeedSequence([int(config_seed), *parts]).generate_state(1)[0])


def resolve_data(config):
    """Produce (train_images, test_images, class_names) for a config.

    "synthetic" draws disjoint train and test sets from the generator; a
    directory must hold train/ and test/ subtrees in the class-per-directory
    layout.
    """
    if config.data == "synthetic":
        train = gen_synthetic(
            SyntheticSpec(
                per_class=config.per_class,
                image_size=config.image_size,
                noise_sigma=config.noise_sigma,
                seed=_sub_seed(config.seed, _TRAIN_DATA),
            )
        )
        test = gen_synthetic(
            SyntheticSpec(
                per_class=config.test_per_class,
                image_size=config.image_size,
                noise_sigma=config.noise_sigma,
                seed=_sub_seed(config.seed, _TEST_DATA),
            )
        )
        names = ["disk", "ring", "cross", "stripes"]
    else:
        train_dir = os.path.join(config.data, "train")
        test_dir = os.path.join(config.data, "test")
        train, names = load_dataset(train_dir, config.image_size)
        test, test_names = load_dataset(test_dir, config.image_size)
        if names != test_names:
            raise DataError(f"train classes {names} and test classes {test_names} disagree")
    if len(names) != config.classes:
        raise ConfigError(f"config expects {config.classes} classes, data has {len(names)}")
    return train, test, names


def build_model(config, dtype=None):
    return SiameseModel(
        config.backbone_spec(), num_classes=config.classes, margin=config.margin, dtype=dtype
    )


def embed_images(model, images, batch_size=64):
    """Eval-mode embeddings of LabeledImages as one (n, 512) float array."""
    model.eval()
    batch = stack_images(images)
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(model.embed(Tensor(batch[start : start + batch_size])).data)
    return np.concatenate(chunks, axis=0)


def _gallery_by_class(embeddings, class_ids, n_classes):
    gallery = [[] for _ in range(n_classes)]
    for vector, class_id in zip(embeddings, class_ids):
        gallery[class_id].append(vector)
    return [np.stack(members) if members else np.zeros((0, embeddings.shape[1])) for members in gallery]


def siamese_kappa(model, logistic, gallery_images, probe_images, config, *, rng_parts,
                  gallery_embeddings=None, probe_embeddings=None):
    """Confusion matrix of the iterative classifier over probe images."""
    if gallery_embeddings is None:
        gallery_embeddings = embed_images(model, gallery_images)
    if probe_embeddings is None:
        probe_embeddings = embed_images(model, probe_images)
    gallery = _gallery_by_class(gallery_embeddings, labels_of(gallery_images), config.classes)
    cm = ConfusionMatrix(config.classes)
    for index, image in enumerate(probe_images):
        state = PredictorState.fresh(
            n_classes=config.classes,
            base_init=config.base_init,
            max_iterations=config.max_iterations,
        )
        winner, _, _ = classify_embedding(
            probe_embeddings[index],
            gallery,
            logistic,
            state=state,
            rng=_rng(config.seed, _EVAL, *rng_parts, index),
        )
        cm.add(image.class_id, winner)
    return cm


def baseline_kappa(model, probe_images, config):
    """Confusion matrix of the argmax class head over probe images."""
    model.eval()
    batch = stack_images(probe_images)
    cm = ConfusionMatrix(config.classes)
    for start in range(0, len(probe_images), 64):
        probs = model.class_probs(Tensor(batch[start : start + 64])).data
        for row, image in zip(probs, probe_images[start : start + 64]):
            cm.add(image.class_id, int(np.argmax(row)))
    return cm


def _batch_ranges(total, batch_size):
    ranges = [(s, min(s + batch_size, total)) for s in range(0, total, batch_size)]
    if len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] < 2:
        ranges[-2] = (ranges[-2][0], ranges[-1][1])
        ranges.pop()
    return ranges


@dataclass
class EpochRow:
    epoch: int
    loss: float
    train_kappa: float
    test_kappa: float

    def csv(self):
        return f"{self.epoch},{self.loss!r},{self.train_kappa!r},{self.test_kappa!r}"


@dataclass
class TrainResult:
    config: TrainConfig
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    best_test_kappa: float = float("-inf")
    best_checkpoint: bytes = b""
    final_checkpoint: bytes = b""
    model: object = None
    logistic: object = None

    def metrics_csv(self):
        return "\n".join([METRICS_HEADER] + [row.csv() for row in self.rows]) + "\n"


def train(config, out_dir=None, progress=None):
    """Run one experiment; optionally write metrics and checkpoints to out_dir."""
    config.validate()
    train_images, test_images, _ = resolve_data(config)
    model = build_model(config)
    init_parameters(model, seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr)
    result = TrainResult(config=config)

    for epoch in range(1, config.epochs + 1):
        if config.mode == "siamese":
            loss, logistic = _siamese_epoch(model, optimizer, train_images, config, epoch)
            gallery_emb = embed_images(model, train_images)
            test_emb = embed_images(model, test_images)
            train_cm = siamese_kappa(
                model, logistic, train_images, train_images, config,
                rng_parts=(epoch, 0),
                gallery_embeddings=gallery_emb, probe_embeddings=gallery_emb,
            )
            test_cm = siamese_kappa(
                model, logistic, train_images, test_images, config,
                rng_parts=(epoch, 1),
                gallery_embeddings=gallery_emb, probe_embeddings=test_emb,
            )
        else:
            loss, logistic = _baseline_epoch(model, optimizer, train_images, config, epoch)
            train_cm = baseline_kappa(model, train_images, config)
            test_cm = baseline_kappa(model, test_images, config)

        row = EpochRow(epoch, loss, kappa(train_cm), kappa(test_cm))
        result.rows.append(row)
        if progress:
            progress(row)
        if row.test_kappa > result.best_test_kappa:
            result.best_test_kappa = row.test_kappa
            result.best_epoch = epoch
            result.best_checkpoint = _checkpoint_bytes(config, model, logistic)

    result.final_checkpoint = _checkpoint_bytes(config, model, logistic)
    result.model = model
    result.logistic = logistic
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(result.metrics_csv())
        with open(os.path.join(out_dir, "best.ckpt"), "wb") as fh:
            fh.write(result.best_checkpoint)
        with open(os.path.join(out_dir, "final.ckpt"), "wb") as fh:
            fh.write(result.final_checkpoint)
    return result


def _siamese_epoch(model, optimizer, train_images, config, epoch):
    plan = PairEpochPlan(length=config.length, seed=_sub_seed(config.seed, _EPOCH, epoch))
    pairs = build_pair_epoch(train_images, plan)
    a, b, y = stack_pairs(pairs)
    total = 0.0
    records = []
    for start, stop in _batch_ranges(len(pairs), config.batch_size):
        loss, batch_records = siamese_train_step(
            model, (a[start:stop], b[start:stop], y[start:stop]), optimizer
        )
        total += loss * (stop - start)
        records.extend(batch_records)
    return total / len(pairs), fit_logistic(records)


def _baseline_epoch(model, optimizer, train_images, config, epoch):
    order = _rng(config.seed, _SHUFFLE, epoch).permutation(len(train_images))
    batch = stack_images(train_images)[order]
    targets = labels_of(train_images)[order]
    model.train()
    total = 0.0
    for start, stop in _batch_ranges(len(train_images), config.batch_size):
        with T.Tape() as tape:
            probs = model.class_probs(Tensor(batch[start:stop]))
            loss = cross_entropy_loss(probs, targets[start:stop])
            tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"cross-entropy loss became non-finite: {value}")
        optimizer.step()
        optimizer.zero_grad()
        total += value * (stop - start)
    return total / len(train_images), None


def _checkpoint_bytes(config, model, logistic):
    state = model_state(model)
    if logistic is not None:
        state["logistic.w"] = np.array([logistic.w], dtype=np.float32)
        state["logistic.b"] = np.array([logistic.b], dtype=np.float32)
    return write_checkpoint(config.to_lines(), state)


def load_trained(blob_or_path):
    """Rebuild (config, model, logistic-or-None) from checkpoint bytes or a path."""
    if isinstance(blob_or_path, (str, os.PathLike)):
        try:
            with open(blob_or_path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {blob_or_path}: {exc}") from exc
    else:
        blob = blob_or_path
    config_text, tensors = read_checkpoint(blob)
    config = TrainConfig.from_lines(config_text).validate()
    model = build_model(config)
    load_model_state(model, tensors)
    logistic = None
    if "logistic.w" in tensors:
        logistic = LogisticModel(float(tensors["logistic.w"][0]), float(tensors["logistic.b"][0]))
    return config, model, logistic


def evaluate(blob_or_path, data=None, seed=None):
    """Score a checkpoint on its test split: (ConfusionMatrix, kappa).

    Single images pass through the model one at a time (batch size 1 in eval
    mode); the gallery is the train split. data and seed override the values
    stored in the checkpoint.
    """
    config, model, logistic = load_trained(blob_or_path)
    if data is not None:
        config = replace(config, data=data)
    if seed is not None:
        config = replace(config, seed=int(seed))
    train_images, test_images, _ = resolve_data(config)
    if not test_images:
        raise DataError("test set is empty")
    if config.mode == "siamese":
        if logistic is None:
            raise ConfigError("checkpoint has no logistic back-end; was it trained in baseline mode?")
        gallery_emb = embed_images(model, train_images, batch_size=1)
        probe_emb = embed_images(model, test_images, batch_size=1)
        cm = siamese_kappa(
            model, logistic, train_images, test_images, config,
            rng_parts=(0, 2),
            gallery_embeddings=gallery_emb, probe_embeddings=probe_emb,
        )
    else:
        model.eval()
        cm = ConfusionMatrix(config.classes)
        batch = stack_images(test_images)
        for index, image in enumerate(test_images):
            probs = model.class_probs(Tensor(batch[index : index + 1])).data[0]
            cm.add(image.class_id, int(np.argmax(probs)))
    return cm, kappa(cm)
