"""Siamese core tests: distances, loss formulas, train-step behavior."""

import numpy as np
import pytest

from siamfew import tensor as T
from siamfew.attention import AttentionConfig
from siamfew.backbones import BackboneSpec
from siamfew.errors import ContractError
from siamfew.layers import init_parameters
from siamfew.siamese import (
    Adam,
    DistanceRecord,
    SiameseModel,
    contrastive_loss,
    contrastive_loss_tensor,
    cross_entropy_loss,
    euclidean_distance,
    pair_distances,
    siamese_train_step,
)
from siamfew.tensor import Tape, Tensor, grad_check


def tiny_spec(image_size=8):
    return BackboneSpec(family="resnet_tiny", attention=AttentionConfig("none"), widths=(4, 4, 8, 8), image_size=image_size)


class TestEmbedding:
    def test_embedding_length_is_512(self):
        model = SiameseModel(tiny_spec()).eval()
        init_parameters(model, seed=0)
        out = model.embed(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)))
        assert out.shape == (1, 512)

    def test_embed_twice_identical_in_eval(self):
        model = SiameseModel(tiny_spec()).eval()
        init_parameters(model, seed=1)
        x = Tensor(np.random.default_rng(50).normal(size=(1, 1, 8, 8)).astype(np.float32))
        assert np.array_equal(model.embed(x).data, model.embed(x).data)

    def test_self_distance_is_zero(self):
        model = SiameseModel(tiny_spec()).eval()
        init_parameters(model, seed=2)
        x = Tensor(np.random.default_rng(51).normal(size=(1, 1, 8, 8)).astype(np.float32))
        u = model.embed(x)
        d = pair_distances(u, model.embed(x))
        assert d.item() == 0.0

    def test_twins_share_one_parameter_set(self):
        # structural: there is exactly one underlying parameter copy
        model = SiameseModel(tiny_spec())
        first = [p for _, p in model.named_parameters()]
        second = [p for _, p in model.named_parameters()]
        assert all(a is b for a, b in zip(first, second))


class TestEuclideanDistance:
    def test_equal_vectors(self):
        u = Tensor(np.ones(512, dtype=np.float64))
        assert euclidean_distance(u, u).item() == 0.0

    def test_three_four_five(self):
        u = np.zeros(512)
        v = np.zeros(512)
        v[0], v[1] = 3.0, 4.0
        assert euclidean_distance(Tensor(u), Tensor(v)).item() == 5.0

    def test_symmetry(self):
        rng = np.random.default_rng(52)
        for _ in range(10):
            u = Tensor(rng.normal(size=16))
            v = Tensor(rng.normal(size=16))
            assert euclidean_distance(u, v).item() == euclidean_distance(v, u).item()


class TestContrastiveLoss:
    def test_same_class_hand_value(self):
        # (1/2) * 1.5^2 = 1.125
        loss = contrastive_loss([DistanceRecord(1.5, 0)])
        assert abs(loss - 1.125) < 1e-9

    def test_beyond_margin_is_zero(self):
        assert contrastive_loss([DistanceRecord(2.5, 1)]) == 0.0
        assert contrastive_loss([DistanceRecord(2.0, 1)]) == 0.0

    def test_mixed_pair_hand_value(self):
        # (0 + max(2-1, 0)^2) / 4 = 0.25
        loss = contrastive_loss([DistanceRecord(0.0, 0), DistanceRecord(1.0, 1)])
        assert abs(loss - 0.25) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            contrastive_loss([])

    def test_tensor_path_matches_record_path(self):
        rng = np.random.default_rng(53)
        d = rng.uniform(0, 3, size=12)
        y = rng.integers(0, 2, size=12)
        records = [DistanceRecord(float(a), int(b)) for a, b in zip(d, y)]
        tensor_loss = contrastive_loss_tensor(Tensor(d), y).item()
        assert abs(tensor_loss - contrastive_loss(records)) < 1e-12

    def test_monotonicity_in_distance(self):
        # strictly increasing for same-class pairs, non-increasing for different
        grid = np.linspace(0.0, 3.0, 13)
        same = [contrastive_loss([DistanceRecord(d, 0)]) for d in grid]
        different = [contrastive_loss([DistanceRecord(d, 1)]) for d in grid]
        assert all(b > a for a, b in zip(same, same[1:]))
        assert all(b <= a for a, b in zip(different, different[1:]))
        assert all(v >= 0 for v in same + different)

    def test_distance_gradient_signs_and_values(self):
        # dL/dd = d/N for y=0; -(margin-d)/N for y=1 below the margin
        for d0, y, expected in ((1.2, 0, 1.2 / 2), (0.7, 1, -(2.0 - 0.7) / 2), (2.4, 1, 0.0)):
            dist = Tensor(np.array([d0, 0.5]), requires_grad=True)
            with Tape() as tape:
                tape.backward(contrastive_loss_tensor(dist, np.array([y, 0])))
            assert abs(dist.grad[0] - expected) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(54)
        y = np.array([0, 1, 1, 0, 1])
        d = Tensor(rng.uniform(0.1, 3.0, size=5))
        assert grad_check(lambda t: contrastive_loss_tensor(t, y), d) < 1e-6

    def test_embedding_gradient_passes_grad_check(self):
        rng = np.random.default_rng(55)
        v = Tensor(rng.normal(size=(4, 6)))
        y = np.array([0, 1, 0, 1])

        def f(u):
            return contrastive_loss_tensor(pair_distances(u, v), y)

        u = Tensor(rng.normal(size=(4, 6)))
        assert grad_check(f, u) < 1e-4


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        probs = Tensor(np.array([[0.0, 1.0, 0.0, 0.0]]))
        assert abs(cross_entropy_loss(probs, [1]).item()) < 1e-6

    def test_uniform_is_log_four(self):
        probs = Tensor(np.full((3, 4), 0.25))
        for labels in ([0, 1, 2], [3, 3, 3]):
            assert abs(cross_entropy_loss(probs, labels).item() - np.log(4.0)) < 1e-6

    def test_mean_of_per_sample_losses(self):
        rng = np.random.default_rng(56)
        raw = rng.uniform(0.1, 1.0, size=(2, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = [2, 0]
        expected = -(np.log(probs[0, 2]) + np.log(probs[1, 0])) / 2.0
        got = cross_entropy_loss(Tensor(probs), labels).item()
        assert abs(got - expected) < 1e-12

    def test_nonnegative_with_equality_only_at_one(self):
        rng = np.random.default_rng(57)
        raw = rng.uniform(0.05, 1.0, size=(6, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 4, size=6)
        assert cross_entropy_loss(Tensor(probs), labels).item() > 0.0

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy_loss(Tensor(np.ones((2, 4))), [0, 1])

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(58)
        labels = np.array([0, 2, 3])
        logits = Tensor(rng.normal(size=(3, 4)))
        f = lambda t: cross_entropy_loss(T.softmax(t, axis=1), labels)  # noqa: E731
        assert grad_check(f, logits) < 1e-5


def make_fixed_pair_batch(rng, n_pairs=4, size=8):
    # two synthetic "classes": bright blobs vs dark blobs
    def image(cls):
        base = 0.8 if cls == 0 else 0.2
        return (base + 0.05 * rng.normal(size=(1, size, size))).astype(np.float32)

    a, b, y = [], [], []
    for i in range(n_pairs):
        ca = i % 2
        cb = ca if i < n_pairs // 2 else 1 - ca
        a.append(image(ca))
        b.append(image(cb))
        y.append(0 if ca == cb else 1)
    return np.stack(a), np.stack(b), np.array(y)


class TestTrainStep:
    def run_steps(self, seed, steps=20):
        model = SiameseModel(tiny_spec())
        init_parameters(model, seed=seed)
        optimizer = Adam(model.parameters(), lr=0.001)
        batch = make_fixed_pair_batch(np.random.default_rng(59))
        losses = []
        for _ in range(steps):
            loss, records = siamese_train_step(model, batch, optimizer)
            losses.append(loss)
        return losses, records

    def test_loss_decreases_on_fixed_batch(self):
        losses, _ = self.run_steps(seed=123)
        assert losses[-1] < losses[0]

    def test_identical_seeds_identical_trajectories(self):
        first, _ = self.run_steps(seed=7)
        second, _ = self.run_steps(seed=7)
        assert first == second

    def test_records_match_batch(self):
        _, records = self.run_steps(seed=11, steps=1)
        assert len(records) == 4
        assert [r.label for r in records] == [0, 0, 1, 1]
        assert all(r.distance >= 0 for r in records)

    def test_batch_of_one_rejected(self):
        model = SiameseModel(tiny_spec())
        init_parameters(model, seed=1)
        optimizer = Adam(model.parameters())
        a = np.zeros((1, 1, 8, 8), dtype=np.float32)
        with pytest.raises(ContractError):
            siamese_train_step(model, (a, a, np.array([0])), optimizer)

    def test_invalid_record_rejected(self):
        with pytest.raises(ContractError):
            DistanceRecord(-0.5, 0)
        with pytest.raises(ContractError):
            DistanceRecord(1.0, 2)
