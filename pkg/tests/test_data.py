"""Dataset, synthetic generator, and pair-construction tests."""

import os

import numpy as np
import pytest

from siamfew.data import (
    LabeledImage,
    PairEpochPlan,
    PairSample,
    SyntheticSpec,
    bilinear_resize,
    build_pair_epoch,
    gen_synthetic,
    labels_of,
    load_dataset,
    max_pairs,
    stack_images,
    stack_pairs,
    write_pgm,
)
from siamfew.errors import ConfigError, DataError


def write_ppm(path, rgb):
    quantized = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = quantized.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def make_dataset_dir(tmp_path, per_class=2, classes=("a", "b", "c", "d"), size=16):
    rng = np.random.default_rng(70)
    for name in classes:
        class_dir = tmp_path / name
        class_dir.mkdir()
        for i in range(per_class):
            write_pgm(str(class_dir / f"img{i}.pgm"), rng.uniform(size=(size, size)))
    return str(tmp_path)


class TestMaxPairs:
    def test_forty_images_is_780(self):
        assert max_pairs(40) == 780

    def test_eighty_images_is_3160(self):
        assert max_pairs(80) == 3160

    def test_single_image_is_zero(self):
        assert max_pairs(1) == 0
        assert max_pairs(0) == 0


class TestNetpbm:
    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(71)
        original = rng.uniform(size=(8, 8))
        path = str(tmp_path / "c" / "x.pgm")
        os.makedirs(str(tmp_path / "c"))
        write_pgm(path, original)
        images, names = load_dataset(str(tmp_path), image_size=8)
        assert names == ["c"]
        quantized = np.rint(original * 255.0) / 255.0
        assert np.abs(images[0].pixels - quantized).max() < 1e-6

    def test_ppm_color_averaged_to_gray(self, tmp_path):
        rgb = np.zeros((4, 4, 3))
        rgb[:, :, 0] = 0.9  # only the red channel carries signal
        os.makedirs(str(tmp_path / "c"))
        write_ppm(str(tmp_path / "c" / "x.ppm"), rgb)
        images, _ = load_dataset(str(tmp_path), image_size=4)
        expected = np.rint(0.9 * 255.0) / 255.0 / 3.0
        assert np.abs(images[0].pixels - expected).max() < 1e-6

    def test_bad_maxval_rejected(self, tmp_path):
        os.makedirs(str(tmp_path / "c"))
        path = str(tmp_path / "c" / "x.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(DataError, match="maxval"):
            load_dataset(str(tmp_path), image_size=2)

    def test_truncated_raster_rejected(self, tmp_path):
        os.makedirs(str(tmp_path / "c"))
        path = str(tmp_path / "c" / "x.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(DataError, match="raster"):
            load_dataset(str(tmp_path), image_size=4)

    def test_header_comments_allowed(self, tmp_path):
        os.makedirs(str(tmp_path / "c"))
        path = str(tmp_path / "c" / "x.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        images, _ = load_dataset(str(tmp_path), image_size=2)
        assert np.allclose(images[0].pixels, np.array([[0, 64], [128, 255]]) / 255.0)


class TestLoadDataset:
    def test_four_classes_two_images_each(self, tmp_path):
        root = make_dataset_dir(tmp_path)
        images, names = load_dataset(root, image_size=16)
        assert len(images) == 8
        assert names == ["a", "b", "c", "d"]
        assert sorted(img.class_id for img in images) == [0, 0, 1, 1, 2, 2, 3, 3]
        for img in images:
            assert img.pixels.shape == (16, 16)
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_resize_preserves_corners(self, tmp_path):
        rng = np.random.default_rng(72)
        source = rng.uniform(size=(16, 16))
        os.makedirs(str(tmp_path / "c"))
        write_pgm(str(tmp_path / "c" / "x.pgm"), source)
        images, _ = load_dataset(str(tmp_path), image_size=32)
        quantized = np.rint(source * 255.0) / 255.0
        resized = images[0].pixels
        assert resized.shape == (32, 32)
        for (ri, rj), (si, sj) in [((0, 0), (0, 0)), ((0, 31), (0, 15)), ((31, 0), (15, 0)), ((31, 31), (15, 15))]:
            assert abs(resized[ri, rj] - quantized[si, sj]) < 1e-6

    def test_missing_root_names_path(self):
        with pytest.raises(DataError, match="/no/such/dir"):
            load_dataset("/no/such/dir", image_size=16)

    def test_empty_class_directory_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError, match="empty"):
            load_dataset(str(tmp_path), image_size=16)


class TestSynthetic:
    def test_counts_per_class(self):
        images = gen_synthetic(SyntheticSpec(per_class=10, seed=1))
        assert len(images) == 40
        assert np.bincount(labels_of(images)).tolist() == [10, 10, 10, 10]

    def test_same_seed_identical(self):
        spec = SyntheticSpec(per_class=3, noise_sigma=0.0, seed=9)
        first = gen_synthetic(spec)
        second = gen_synthetic(spec)
        for a, b in zip(first, second):
            assert np.array_equal(a.pixels, b.pixels)

    def test_noise_changes_pixels_but_not_layout(self):
        clean = gen_synthetic(SyntheticSpec(per_class=2, noise_sigma=0.0, seed=3))
        noisy = gen_synthetic(SyntheticSpec(per_class=2, noise_sigma=0.05, seed=3))
        assert not np.array_equal(clean[0].pixels, noisy[0].pixels)
        assert clean[0].class_id == noisy[0].class_id

    def test_pixel_range(self):
        for img in gen_synthetic(SyntheticSpec(per_class=5, noise_sigma=0.2, seed=4)):
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
            assert img.pixels.dtype == np.float32

    def test_template_match_oracle_separates_classes(self):
        # class-mean templates from a clean reference set classify noisy draws
        reference = gen_synthetic(SyntheticSpec(per_class=50, noise_sigma=0.0, seed=123))
        templates = np.stack(
            [
                np.mean([img.pixels for img in reference if img.class_id == c], axis=0)
                for c in range(4)
            ]
        )
        probe = gen_synthetic(SyntheticSpec(per_class=40, noise_sigma=0.05, seed=321))
        hits = 0
        for img in probe:
            distances = ((templates - img.pixels[None]) ** 2).sum(axis=(1, 2))
            hits += int(np.argmin(distances) == img.class_id)
        assert hits / len(probe) >= 0.95


class TestPairEpoch:
    def gallery(self, per_class=10, seed=5):
        return gen_synthetic(SyntheticSpec(per_class=per_class, noise_sigma=0.05, seed=seed))

    def test_length_eight_is_four_and_four(self):
        pairs = build_pair_epoch(self.gallery(), PairEpochPlan(length=8, seed=1))
        labels = [p.pair_label for p in pairs]
        assert len(pairs) == 8
        assert labels.count(0) == 4
        assert labels.count(1) == 4

    def test_length_500_from_universe_780(self):
        images = self.gallery(per_class=10)
        assert max_pairs(len(images)) == 780
        pairs = build_pair_epoch(images, PairEpochPlan(length=500, seed=2))
        assert len(pairs) == 500

    def test_every_pair_satisfies_label_invariant(self):
        pairs = build_pair_epoch(self.gallery(), PairEpochPlan(length=100, seed=3))
        for p in pairs:
            assert p.pair_label == (0 if p.image_a.class_id == p.image_b.class_id else 1)

    def test_no_positive_self_pairs(self):
        pairs = build_pair_epoch(self.gallery(), PairEpochPlan(length=200, seed=4))
        for p in pairs:
            if p.pair_label == 0:
                assert p.image_a.source != p.image_b.source

    def test_same_seed_same_epoch(self):
        images = self.gallery()
        first = build_pair_epoch(images, PairEpochPlan(length=60, seed=7))
        second = build_pair_epoch(images, PairEpochPlan(length=60, seed=7))
        assert [(p.image_a.source, p.image_b.source, p.pair_label) for p in first] == [
            (p.image_a.source, p.image_b.source, p.pair_label) for p in second
        ]

    def test_odd_length_rejected(self):
        with pytest.raises(ConfigError):
            PairEpochPlan(length=7, seed=0)

    def test_small_class_rejected(self):
        images = self.gallery(per_class=2)
        images = [img for img in images if not (img.class_id == 2 and img.source.endswith(":1"))]
        with pytest.raises(ConfigError, match="2"):
            build_pair_epoch(images, PairEpochPlan(length=8, seed=0))

    def test_single_class_rejected(self):
        images = [img for img in self.gallery() if img.class_id == 0]
        with pytest.raises(ConfigError):
            build_pair_epoch(images, PairEpochPlan(length=8, seed=0))

    def test_mislabeled_pair_rejected(self):
        images = self.gallery(per_class=2)
        with pytest.raises(ConfigError):
            PairSample(images[0], images[-1], 0)


class TestCollate:
    def test_stack_shapes_and_dtype(self):
        images = gen_synthetic(SyntheticSpec(per_class=3, seed=6))
        batch = stack_images(images)
        assert batch.shape == (12, 1, 32, 32)
        assert batch.dtype == np.float32
        pairs = build_pair_epoch(images, PairEpochPlan(length=10, seed=8))
        a, b, y = stack_pairs(pairs)
        assert a.shape == b.shape == (10, 1, 32, 32)
        assert set(y.tolist()) == {0, 1}
