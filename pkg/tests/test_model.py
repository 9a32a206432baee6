"""Tests for services/model.py — data, classifiers, margin loss, training, checkpoints."""

import numpy as np
import pytest

from services.imaging import Image, from_unit, to_unit
from services.model import (
    ACCURACY_FLOOR,
    MAX_CLASSES,
    CheckpointError,
    ConvNet,
    LabeledImage,
    LinearClassifier,
    ModelError,
    SyntheticDatasetSpec,
    cross_entropy,
    decode_checkpoint,
    encode_checkpoint,
    exponential_quantiles,
    generate_dataset,
    make_rng,
    margin_loss,
    margin_loss_grad,
    predict,
    predict_batch,
    predict_unit,
    softmax,
    train_adversarial,
    train_standard,
)
from tests.conftest import make_constant_model, make_grey_image, make_linear_model

_SMALL = SyntheticDatasetSpec(num_classes=2, image_size=8, samples_per_class=20, seed=5)


def _convnet(seed, shape=(4, 4, 3), classes=3):
    return ConvNet.initialise(shape, classes, make_rng(seed))


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(make_rng(1, 2).random(5), make_rng(1, 2).random(5))

    def test_seed_tuples_are_distinct_streams(self):
        assert not np.array_equal(make_rng(1, 2).random(5), make_rng(1, 3).random(5))


class TestGenerateDataset:
    def test_deterministic(self):
        a = generate_dataset(_SMALL)
        b = generate_dataset(_SMALL)
        assert [s.image for s in a] == [s.image for s in b]
        assert [s.label for s in a] == [s.label for s in b]

    def test_balanced_and_shaped(self):
        samples = generate_dataset(_SMALL)
        assert len(samples) == 40
        assert sum(s.label == 0 for s in samples) == 20
        assert all(s.image.shape == (8, 8, 3) for s in samples)

    def test_ids_are_unique(self):
        ids = [s.image_id for s in generate_dataset(_SMALL)]
        assert len(set(ids)) == len(ids)

    def test_seed_changes_images(self):
        other = SyntheticDatasetSpec(num_classes=2, image_size=8, samples_per_class=20, seed=6)
        assert generate_dataset(_SMALL)[0].image != generate_dataset(other)[0].image

    def test_single_class_raises(self):
        with pytest.raises(ModelError, match="at least 2 classes"):
            generate_dataset(SyntheticDatasetSpec(num_classes=1))

    def test_odd_size_raises(self):
        with pytest.raises(ModelError, match="image_size"):
            generate_dataset(SyntheticDatasetSpec(image_size=9))

    def test_too_many_classes_raises(self):
        with pytest.raises(ModelError, match="at most"):
            generate_dataset(SyntheticDatasetSpec(num_classes=MAX_CLASSES + 1))

    def test_bad_decoy_rate_raises(self):
        with pytest.raises(ModelError, match="decoy_rate"):
            generate_dataset(SyntheticDatasetSpec(decoy_rate=1.0))

    def test_class_mean_colour_carries_the_tint(self):
        """Without blobs or noise an image is grey plus its class tint, scaled by amplitude."""
        spec = SyntheticDatasetSpec(
            num_classes=2, image_size=8, samples_per_class=50, seed=2,
            noise_sigma=0.0, blob_contrast=0.0, decoy_rate=0.0,
        )
        for s in generate_dataset(spec):
            mean = s.image.pixels.reshape(-1, 3).astype(np.float64).mean(axis=0)
            # class 0 tints towards green-minus-blue, class 1 the other way
            sign = 1.0 if s.label == 0 else -1.0
            assert sign * (mean[1] - mean[2]) >= 0.0

    def test_amplitudes_follow_exponential_quantiles(self):
        q = exponential_quantiles(1000)
        assert np.all(np.diff(q) > 0)
        assert q.mean() == pytest.approx(1.0, abs=0.01)
        assert np.median(q) == pytest.approx(np.log(2.0), abs=0.01)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        logits = make_rng(0).normal(0, 30, size=(50, 7))
        assert np.all(np.abs(softmax(logits).sum(axis=1) - 1.0) <= 1e-9)

    def test_cross_entropy_gradient(self):
        rng = make_rng(1)
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])
        _, grad = cross_entropy(logits, labels)
        h = 1e-6
        for i, j in [(0, 0), (1, 2), (3, 1)]:
            up, down = logits.copy(), logits.copy()
            up[i, j] += h
            down[i, j] -= h
            fd = (cross_entropy(up, labels)[0] - cross_entropy(down, labels)[0]) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestPredict:
    def test_batch_matches_single(self):
        m = _convnet(2, shape=(8, 8, 3))
        images = [s.image for s in generate_dataset(_SMALL)[:10]]
        assert predict_batch(m, images) == [predict(m, img) for img in images]

    def test_ties_go_to_lowest_index(self):
        m = LinearClassifier(np.zeros((3, 48)), np.zeros(3), (4, 4, 3))
        assert predict(m, Image(np.zeros((4, 4, 3), dtype=np.uint8))) == 0

    def test_wrong_shape_raises(self):
        m = _convnet(0)
        with pytest.raises(ValueError, match="expects"):
            predict_unit(m, np.zeros((6, 6, 3)))


class TestMarginLoss:
    def test_sign_matches_prediction(self):
        m = make_linear_model(offset=10.0)
        img = make_grey_image(seed=1)
        assert predict(m, img) == 0
        assert margin_loss(m, to_unit(img), 0) > 0
        assert margin_loss(m, to_unit(img), 1) < 0

    def test_tie_is_not_adversarial(self):
        m = make_constant_model(label=0)
        flat = LinearClassifier(np.zeros_like(m.weight), np.zeros(2), m.input_shape)
        x = np.zeros((8, 8, 3))
        assert margin_loss(flat, x, 1) == 0.0
        assert predict_unit(flat, x) == 0

    def test_bad_label_raises(self):
        with pytest.raises(ModelError, match="label"):
            margin_loss(_convnet(0), np.zeros((4, 4, 3)), 5)

    def test_linear_gradient_is_weight_difference(self):
        m = make_linear_model()
        x = to_unit(make_grey_image(seed=2))
        grad = margin_loss_grad(m, x, 0)
        assert np.allclose(grad.ravel(), m.weight[0] - m.weight[1], atol=1e-15)

    def test_convnet_gradient_matches_finite_differences(self):
        """
        Full gradient against central differences in every coordinate, on
        cases where no ReLU and no runner-up class switches anywhere in the
        ±h stencil (the net is piecewise linear, so inside one piece the two
        agree to rounding).
        """
        h = 1e-4
        checked = 0
        for case in range(300):
            rng = make_rng(11, case)
            m = _convnet(case)
            x = rng.uniform(0.05, 0.95, size=(4, 4, 3))
            y = int(rng.integers(0, 3))

            steps = h * np.eye(x.size).reshape((x.size,) + x.shape)
            stencil = np.concatenate([x[None], x + steps, x - steps])
            logits, cache = m.forward(stencil)
            same_pattern = np.all((cache.a1 > 0) == (cache.a1[:1] > 0)) and np.all(
                (cache.a2 > 0) == (cache.a2[:1] > 0)
            )
            others = np.where(np.arange(3) == y, -np.inf, logits)
            if not same_pattern or np.unique(np.argmax(others, axis=1)).size > 1:
                continue

            margins = logits[:, y] - others.max(axis=1)
            fd = (margins[1:x.size + 1] - margins[x.size + 1:]) / (2 * h)
            analytic = margin_loss_grad(m, x, y).ravel()
            scale = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-6)
            assert np.linalg.norm(analytic - fd) / scale < 1e-4, f"case {case}"
            checked += 1
            if checked == 100:
                break
        assert checked == 100


class TestTraining:
    def test_standard_training_is_deterministic(self):
        a = train_standard(_SMALL, epochs=2, seed=3)
        b = train_standard(_SMALL, epochs=2, seed=3)
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_zero_eps_adversarial_equals_standard(self):
        a = train_standard(_SMALL, epochs=2, seed=3)
        b = train_adversarial(_SMALL, epochs=2, seed=3, pgd_steps=3, eps=0.0)
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_adversarial_training_changes_the_model(self):
        a = train_standard(_SMALL, epochs=2, seed=3)
        b = train_adversarial(_SMALL, epochs=2, seed=3, pgd_steps=2, eps=4.0)
        assert not np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_adversarial_training_is_deterministic(self):
        a = train_adversarial(_SMALL, epochs=3, seed=3, pgd_steps=2, eps=4.0)
        b = train_adversarial(_SMALL, epochs=3, seed=3, pgd_steps=2, eps=4.0)
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_negative_eps_raises(self):
        with pytest.raises(ModelError, match="eps"):
            train_adversarial(_SMALL, epochs=1, seed=0, pgd_steps=1, eps=-1.0)

    def test_accepts_explicit_samples(self):
        samples = generate_dataset(_SMALL)
        m = train_standard(samples, epochs=1, seed=0)
        assert m.input_shape == (8, 8, 3)
        assert m.num_classes == 2

    def test_empty_training_set_raises(self):
        with pytest.raises(ModelError, match="empty"):
            train_standard([], epochs=1, seed=0)

    @pytest.mark.slow
    def test_standard_training_generalises(self):
        """Default-sized data: a held-out set from another seed is classified at or above the floor."""
        spec = SyntheticDatasetSpec()
        m = train_standard(spec, epochs=30, seed=spec.seed)
        held_out = generate_dataset(SyntheticDatasetSpec(samples_per_class=250, seed=spec.seed + 1_000_003))
        correct = np.mean(np.array(predict_batch(m, [s.image for s in held_out])) == [s.label for s in held_out])
        assert correct >= ACCURACY_FLOOR


class TestCheckpoint:
    def test_convnet_round_trip(self):
        m = _convnet(4, shape=(8, 8, 3), classes=2)
        restored = decode_checkpoint(encode_checkpoint(m))
        assert isinstance(restored, ConvNet)
        assert np.array_equal(restored.parameter_vector(), m.parameter_vector())
        x = make_rng(0).uniform(size=(3, 8, 8, 3))
        assert np.array_equal(restored.logits(x), m.logits(x))

    def test_linear_round_trip(self):
        m = make_linear_model()
        restored = decode_checkpoint(encode_checkpoint(m))
        assert isinstance(restored, LinearClassifier)
        assert np.array_equal(restored.weight, m.weight)
        assert np.array_equal(restored.bias, m.bias)

    def test_header_layout(self):
        data = encode_checkpoint(_convnet(0, shape=(8, 8, 3), classes=2))
        assert data[:4] == b"HDBC"
        assert int.from_bytes(data[4:8], "little") == 1
        assert int.from_bytes(data[8:12], "little") == 1

    def test_bad_magic(self):
        data = bytearray(encode_checkpoint(make_linear_model()))
        data[:4] = b"XXXX"
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_checkpoint(make_linear_model()))
        data[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(data))

    def test_truncated(self):
        data = encode_checkpoint(make_linear_model())
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-8])
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:10])


class TestLabeledImage:
    def test_prediction_of_quantized_unit_image(self):
        m = make_linear_model()
        img = make_grey_image(seed=4)
        sample = LabeledImage(from_unit(to_unit(img)), 0, "x")
        assert predict(m, sample.image) == predict(m, img)
