"""Backbone structure tests: attention counts, shapes, eval determinism."""

import numpy as np
import pytest

from siamfew import tensor as T
from siamfew.attention import AttentionConfig
from siamfew.backbones import (
    BackboneSpec,
    attention_count,
    build_backbone,
    build_inception_tiny,
    build_resnet_tiny,
)
from siamfew.errors import ConfigError, ShapeError
from siamfew.layers import init_parameters
from siamfew.tensor import Tensor, grad_check


def spec_for(family, kind, image_size=32, widths=(8, 16, 32, 64)):
    return BackboneSpec(family=family, attention=AttentionConfig(kind), widths=widths, image_size=image_size)


class TestStructure:
    def test_resnet_without_attention_has_zero_blocks(self):
        model = build_resnet_tiny(spec_for("resnet_tiny", "none"))
        assert attention_count(model) == 0

    @pytest.mark.parametrize("kind", ["se", "sk", "eca", "sge"])
    def test_resnet_with_attention_has_four_blocks(self, kind):
        model = build_resnet_tiny(spec_for("resnet_tiny", kind))
        assert attention_count(model) == 4

    def test_inception_without_attention_has_zero_blocks(self):
        model = build_inception_tiny(spec_for("inception_tiny", "none"))
        assert attention_count(model) == 0

    @pytest.mark.parametrize("kind", ["se", "sk", "eca", "sge"])
    def test_inception_with_attention_has_five_blocks(self, kind):
        model = build_inception_tiny(spec_for("inception_tiny", kind))
        assert attention_count(model) == 5

    def test_resnet_has_four_layers_of_two_blocks(self):
        model = build_resnet_tiny(spec_for("resnet_tiny", "none"))
        assert len(model.layers) == 8

    def test_inception_has_five_block_types(self):
        model = build_inception_tiny(spec_for("inception_tiny", "none"))
        names = [type(b).__name__ for b in model.blocks]
        assert names == [
            "InceptionStem",
            "InceptionBranchA",
            "InceptionReduction",
            "InceptionBranchB",
            "InceptionReduction",
        ]

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            build_backbone(BackboneSpec(family="vgg"))

    def test_bad_widths_rejected(self):
        with pytest.raises(ConfigError):
            build_resnet_tiny(BackboneSpec(widths=(8, 16)))


class TestShapes:
    def test_resnet_default_output_shape(self):
        model = build_resnet_tiny(spec_for("resnet_tiny", "none")).eval()
        init_parameters(model, seed=0)
        out = model(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))
        assert out.shape == (1, 64)

    def test_inception_default_output_shape(self):
        model = build_inception_tiny(spec_for("inception_tiny", "none")).eval()
        init_parameters(model, seed=0)
        out = model(Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))
        assert out.data.ndim == 2
        assert out.shape == (1, 64)

    @pytest.mark.parametrize("family", ["resnet_tiny", "inception_tiny"])
    def test_attention_insertion_preserves_all_shapes(self, family):
        rng = np.random.default_rng(60)
        x = Tensor(rng.normal(size=(2, 1, 16, 16)).astype(np.float32))
        plain = build_backbone(spec_for(family, "none", image_size=16)).eval()
        init_parameters(plain, seed=1)
        base_shape = plain(x).shape
        for kind in ("se", "sk", "eca", "sge"):
            model = build_backbone(spec_for(family, kind, image_size=16)).eval()
            init_parameters(model, seed=1)
            assert model(x).shape == base_shape, kind

    def test_wrong_input_shape_rejected(self):
        model = build_resnet_tiny(spec_for("resnet_tiny", "none"))
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32)))
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


class TestForward:
    @pytest.mark.parametrize("family", ["resnet_tiny", "inception_tiny"])
    def test_single_image_eval_after_training_steps(self, family):
        rng = np.random.default_rng(61)
        model = build_backbone(spec_for(family, "se", image_size=16))
        init_parameters(model, seed=2)
        # a couple of train-mode forwards to move the running statistics
        model.train()
        for _ in range(2):
            with T.Tape() as tape:
                out = model(Tensor(rng.normal(size=(3, 1, 16, 16)).astype(np.float32)))
                tape.backward(T.tsum(out))
        model.eval()
        single = model(Tensor(rng.normal(size=(1, 1, 16, 16)).astype(np.float32)))
        assert np.isfinite(single.data).all()

    @pytest.mark.parametrize("family", ["resnet_tiny", "inception_tiny"])
    def test_duplicate_images_give_identical_rows(self, family):
        rng = np.random.default_rng(62)
        model = build_backbone(spec_for(family, "eca", image_size=16)).eval()
        init_parameters(model, seed=3)
        image = rng.normal(size=(1, 16, 16)).astype(np.float32)
        batch = np.stack([image, image, image])
        out = model(Tensor(batch)).data
        assert np.array_equal(out[0], out[1])
        assert np.array_equal(out[0], out[2])

    @pytest.mark.parametrize("family", ["resnet_tiny", "inception_tiny"])
    def test_batch_rows_match_single_image_forward(self, family):
        rng = np.random.default_rng(63)
        model = build_backbone(spec_for(family, "sge", image_size=16)).eval()
        init_parameters(model, seed=4)
        batch = rng.normal(size=(4, 1, 16, 16)).astype(np.float32)
        rows = model(Tensor(batch)).data
        for i in range(4):
            single = model(Tensor(batch[i : i + 1])).data[0]
            assert np.abs(rows[i] - single).max() < 1e-5

    @pytest.mark.parametrize(
        "family,kind,model_seed,data_seed",
        [("resnet_tiny", "se", 2, 102), ("inception_tiny", "sge", 7, 107)],
    )
    def test_full_forward_grad_check_at_8x8(self, family, kind, model_seed, data_seed):
        # Central differences are only a valid oracle where the network is
        # locally smooth; relu/max-pool kinks inside the [x-h, x+h] window
        # corrupt them. h=1e-5 keeps the window inside one linear region.
        rng = np.random.default_rng(data_seed)
        model = build_backbone(
            spec_for(family, kind, image_size=8, widths=(4, 4, 8, 8)), dtype=np.float64
        )
        init_parameters(model, seed=model_seed)
        model.train()
        x = Tensor(rng.normal(size=(2, 1, 8, 8)))

        def f(t):
            out = model(t)
            return T.tsum(T.mul(out, out))

        assert grad_check(f, x, h=1e-5) < 1e-4

    def test_resnet_full_forward_grad_check_default_step(self):
        # fixed point chosen away from every relu/pool kink so the h=1e-3
        # window stays inside one linear region (margin is ~30x)
        rng = np.random.default_rng(102)
        model = build_backbone(
            spec_for("resnet_tiny", "se", image_size=8, widths=(4, 4, 8, 8)), dtype=np.float64
        )
        init_parameters(model, seed=2)
        model.train()
        x = Tensor(rng.normal(size=(2, 1, 8, 8)))

        def f(t):
            out = model(t)
            return T.tsum(T.mul(out, out))

        assert grad_check(f, x, h=1e-3) < 1e-4
