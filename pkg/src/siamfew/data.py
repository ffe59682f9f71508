"""Dataset ingestion, a synthetic 4-class generator, and balanced pair epochs.

On-disk datasets are directories with one subdirectory per class holding
binary PGM (P5) or PPM (P6) images, maxval 255. Color images are averaged to
grayscale, bilinear-resized (corner-aligned) to the working resolution, and
scaled to [0, 1].

The synthetic generator draws four parametric grayscale shape families
(disk, ring, cross, stripes) with jittered position and scale plus Gaussian
pixel noise; it stands in for real data in desk-scale experiments.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

SYNTHETIC_CLASS_NAMES = ("disk", "ring", "cross", "stripes")


@dataclass
class LabeledImage:
    """A single-channel image in [0, 1] with its class id and origin."""

    pixels: np.ndarray  # (h, w) float32
    class_id: int
    source: str = ""


@dataclass(frozen=True)
class PairSample:
    """Two labeled images and their pair label (0 same class, 1 different)."""

    image_a: LabeledImage
    image_b: LabeledImage
    pair_label: int

    def __post_init__(self):
        same = self.image_a.class_id == self.image_b.class_id
        if self.pair_label != (0 if same else 1):
            raise ConfigError(
                f"pair label {self.pair_label} contradicts classes "
                f"{self.image_a.class_id} and {self.image_b.class_id}"
            )


@dataclass(frozen=True)
class PairEpochPlan:
    """Balanced epoch recipe: length/2 positives, length/2 negatives."""

    length: int
    seed: int

    def __post_init__(self):
        if self.length <= 0 or self.length % 2:
            raise ConfigError(f"epoch length must be even and positive, got {self.length}")


def max_pairs(n_images):
    """Number of unordered pairs over n images: n(n-1)/2."""
    if n_images < 0:
        raise ConfigError(f"image count must be nonnegative, got {n_images}")
    return n_images * (n_images - 1) // 2


# ---------------------------------------------------------------------------
# PGM / PPM io
# ---------------------------------------------------------------------------


def _read_netpbm(path):
    """Read a binary PGM (P5) or PPM (P6) file as (h, w[, 3]) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(blob):
            raise DataError(f"{path}: truncated header")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(blob) and not blob[i : i + 1].isspace() and blob[i : i + 1] != b"#":
                i += 1
            tokens.append(blob[start:i])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported format {magic!r}, need binary PGM (P5) or PPM (P6)")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed header tokens {tokens[1:]}") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    i += 1  # single whitespace byte after maxval
    expected = width * height * channels
    raster = blob[i : i + expected]
    if len(raster) != expected:
        raise DataError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width)
    return pixels.reshape(height, width, 3)


def write_pgm(path, pixels):
    """Write a [0, 1] float image as binary 8-bit PGM."""
    quantized = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def bilinear_resize(image, target_size):
    """Corner-aligned bilinear resize of an (h, w) image to (t, t)."""
    h, w = image.shape
    t = int(target_size)
    if (h, w) == (t, t):
        return image.astype(np.float32, copy=True)

    def grid(src, dst):
        if dst == 1:
            return np.zeros(1)
        return np.arange(dst) * (src - 1) / (dst - 1)

    ys, xs = grid(h, t), grid(w, t)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def load_image(path, image_size):
    """Read one PGM/PPM file as a resized [0, 1] grayscale array."""
    raw = _read_netpbm(path)
    gray = raw.mean(axis=2) if raw.ndim == 3 else raw.astype(np.float64)
    return bilinear_resize(gray / 255.0, image_size)


def load_dataset(root_dir, image_size):
    """Load root/<class>/<image>.pgm|.ppm into LabeledImages plus class names.

    Class ids follow sorted subdirectory names; files are read in sorted
    order so the dataset is deterministic.
    """
    if not os.path.isdir(root_dir):
        raise DataError(f"dataset root is not a directory: {root_dir}")
    class_names = sorted(
        d for d in os.listdir(root_dir) if os.path.isdir(os.path.join(root_dir, d))
    )
    if not class_names:
        raise DataError(f"no class subdirectories under {root_dir}")
    images = []
    for class_id, name in enumerate(class_names):
        class_dir = os.path.join(root_dir, name)
        files = sorted(
            f for f in os.listdir(class_dir) if f.lower().endswith((".pgm", ".ppm"))
        )
        if not files:
            raise DataError(f"class directory has no PGM/PPM images: {class_dir}")
        for filename in files:
            path = os.path.join(class_dir, filename)
            try:
                raw = _read_netpbm(path)
            except OSError as exc:
                raise DataError(f"{path}: unreadable ({exc})") from exc
            gray = raw.mean(axis=2) if raw.ndim == 3 else raw.astype(np.float64)
            pixels = bilinear_resize(gray / 255.0, image_size)
            images.append(LabeledImage(pixels, class_id, source=path))
    return images, class_names


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    per_class: int = 10
    image_size: int = 32
    noise_sigma: float = 0.05
    seed: int = 0
    classes: int = 4


def gen_synthetic(spec):
    """Deterministically draw per_class images of each of the four families."""
    if spec.per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {spec.per_class}")
    if spec.classes != 4:
        raise ConfigError(f"the synthetic generator draws exactly 4 classes, got {spec.classes}")
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / (s - 1)  # [0, 1] coordinates
    images = []
    for class_id in range(4):
        for index in range(spec.per_class):
            # nuisance jitter is deliberately wide: a handful of samples never
            # covers it, which is what makes the task few-shot-hard
            cx = 0.5 + rng.uniform(-0.06, 0.06)
            cy = 0.5 + rng.uniform(-0.06, 0.06)
            scale = rng.uniform(0.75, 1.25)
            mask = _render_shape(class_id, yy, xx, cx, cy, scale, rng)
            mask = np.maximum(mask, _render_clutter(yy, xx, rng))
            pixels = 0.1 + 0.75 * mask
            if spec.noise_sigma > 0:
                pixels = pixels + rng.normal(0.0, spec.noise_sigma, size=(s, s))
            pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
            name = f"synthetic:{SYNTHETIC_CLASS_NAMES[class_id]}:{index}"
            images.append(LabeledImage(pixels, class_id, source=name))
    return images


def _render_clutter(yy, xx, rng):
    """Class-independent distractors at the same intensity as the shape.

    Only geometry separates the classes then; a few labeled examples cannot
    pin down which structures matter, while comparisons across many pairs
    can.
    """
    mask = np.zeros_like(yy)
    for _ in range(int(rng.integers(3, 7))):
        px = rng.uniform(0.05, 0.95)
        py = rng.uniform(0.05, 0.95)
        radius = rng.uniform(0.03, 0.07)
        blob = (yy - py) ** 2 + (xx - px) ** 2 <= radius * radius
        mask = np.maximum(mask, blob.astype(np.float64))
    return mask


def _render_shape(class_id, yy, xx, cx, cy, scale, rng):
    dy = yy - cy
    dx = xx - cx
    r = np.sqrt(dy * dy + dx * dx)
    if class_id == 0:  # disk
        return (r <= 0.26 * scale).astype(np.float64)
    if class_id == 1:  # ring: hole size varies, so disk vs ring is fine-grained
        outer = 0.30 * scale
        inner = outer * rng.uniform(0.40, 0.70)
        return ((r <= outer) & (r >= inner)).astype(np.float64)
    # crosses rotate gently (keeps their class mean X-shaped); stripes rotate hard
    theta = rng.uniform(-0.25, 0.25) if class_id == 2 else rng.uniform(-0.7, 0.7)
    u = np.cos(theta) * dx - np.sin(theta) * dy
    v = np.sin(theta) * dx + np.cos(theta) * dy
    if class_id == 2:  # cross: two orthogonal bars
        half = 0.06 * scale
        arm = 0.32 * scale
        bar_a = (np.abs(v) <= half) & (np.abs(u) <= arm)
        bar_b = (np.abs(u) <= half) & (np.abs(v) <= arm)
        return (bar_a | bar_b).astype(np.float64)
    # stripes: parallel bands, rotated, with jittered period and phase
    period = rng.uniform(0.16, 0.30) * scale
    phase = rng.uniform(0.0, period)
    return (np.mod(v + phase, period) <= period / 2).astype(np.float64)


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------


def build_pair_epoch(images, plan):
    """Sample a balanced epoch: length/2 positive and length/2 negative pairs.

    Pairs are drawn with replacement from the pair universe (a positive picks
    a class, then two distinct images of it; a negative picks two distinct
    classes, then one image of each); the emitted order is shuffled. The same
    plan always produces the same epoch.
    """
    by_class = {}
    for index, image in enumerate(images):
        by_class.setdefault(image.class_id, []).append(index)
    class_ids = sorted(by_class)
    if len(class_ids) < 2:
        raise ConfigError(f"negative pairs need >= 2 classes, got {len(class_ids)}")
    thin = [c for c in class_ids if len(by_class[c]) < 2]
    if thin:
        raise ConfigError(f"positive pairs need >= 2 images per class; classes {thin} are too small")

    rng = np.random.Generator(np.random.PCG64(int(plan.seed)))
    half = plan.length // 2
    pairs = []
    for _ in range(half):
        cls = class_ids[rng.integers(len(class_ids))]
        first, second = rng.choice(len(by_class[cls]), size=2, replace=False)
        pairs.append(PairSample(images[by_class[cls][first]], images[by_class[cls][second]], 0))
    for _ in range(half):
        ca, cb = rng.choice(len(class_ids), size=2, replace=False)
        a = by_class[class_ids[ca]][rng.integers(len(by_class[class_ids[ca]]))]
        b = by_class[class_ids[cb]][rng.integers(len(by_class[class_ids[cb]]))]
        pairs.append(PairSample(images[a], images[b], 1))
    order = rng.permutation(plan.length)
    return [pairs[i] for i in order]


def stack_images(images):
    """Collate LabeledImages into an (n, 1, h, w) float32 batch."""
    return np.stack([img.pixels[None, :, :] for img in images]).astype(np.float32)


def labels_of(images):
    return np.array([img.class_id for img in images], dtype=np.int64)


def stack_pairs(pairs):
    """Collate PairSamples into (a, b, labels) ready for the train step."""
    a = np.stack([p.image_a.pixels[None, :, :] for p in pairs]).astype(np.float32)
    b = np.stack([p.image_b.pixels[None, :, :] for p in pairs]).astype(np.float32)
    y = np.array([p.pair_label for p in pairs], dtype=np.int64)
    return a, b, y
