"""Shared test fixtures for the half-distortion bench tests."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path so imports work
sys.path.insert(0, str(Path(__file__).parent.parent))

from services.imaging import Image, to_unit  # noqa: E402
from services.model import Classifier, LabeledImage, LinearClassifier, make_rng  # noqa: E402


@pytest.fixture(autouse=True)
def tmp_data_dir(tmp_path, monkeypatch):
    """Redirect local_store._DATA_DIR to a temp directory for every test."""
    import services.local_store as ls

    monkeypatch.setattr(ls, "_DATA_DIR", tmp_path)
    return tmp_path


def make_grey_image(shape=(8, 8, 3), seed=0, sigma=10.0) -> Image:
    """Mid-grey plus seeded Gaussian noise, far from the [0, 255] clip."""
    rng = make_rng(seed)
    pixels = np.clip(np.floor(128.0 + rng.normal(0.0, sigma, size=shape) + 0.5), 0, 255)
    return Image(pixels.astype(np.uint8))


def make_linear_model(shape=(8, 8, 3), seed=0, offset=10.0) -> LinearClassifier:
    """
    Two classes split by a hyperplane with a random unit normal (unit
    scale).  Flat mid-grey lies `offset` pixel-RMSE inside class 0.
    """
    rng = make_rng(seed, 7)
    n = int(np.prod(shape))
    w = rng.normal(size=n)
    w /= np.linalg.norm(w)
    grey = np.full(n, 128.0 / 255.0)
    c = float(w @ grey) - offset / 255.0 * np.sqrt(n)
    weight = np.stack([w / 2.0, -w / 2.0])
    bias = np.array([-c / 2.0, c / 2.0])
    return LinearClassifier(weight, bias, shape)


def linear_boundary_distance(m: LinearClassifier, img: Image) -> float:
    """Exact pixel-RMSE distance from img to the class-0/class-1 hyperplane."""
    normal = m.weight[0] - m.weight[1]
    margin = float(normal @ to_unit(img).ravel() + m.bias[0] - m.bias[1])
    return 255.0 * abs(margin) / float(np.linalg.norm(normal)) / np.sqrt(img.n)


def make_constant_model(shape=(8, 8, 3), label=0, classes=2) -> LinearClassifier:
    """Predicts `label` for every input; its gradient is zero everywhere."""
    bias = np.zeros(classes)
    bias[label] = 1.0
    return LinearClassifier(np.zeros((classes, int(np.prod(shape)))), bias, shape)


class SphereClassifier(Classifier):
    """
    Class 0 inside a ball of the given pixel-RMSE radius around `centre`,
    class 1 outside.  The minimal adversarial distortion from a point p
    inside is radius − rmse(p, centre).
    """

    def __init__(self, centre: Image, radius: float):
        self.centre = to_unit(centre)
        self.radius = radius
        self.input_shape = centre.shape
        self.num_classes = 2

    def logits_and_vjp(self, x):
        x = self._check_batch(x)
        n = self.centre.size
        diff = (x - self.centre) * 255.0
        rmse2 = (diff ** 2).reshape(len(x), -1).sum(axis=1) / n
        logits = np.stack([self.radius ** 2 - rmse2, np.zeros(len(x))], axis=1)

        def vjp(dlogits):
            return dlogits[:, 0, None, None, None] * (-2.0 * 255.0 * diff / n)

        return logits, vjp


def sample_of(img: Image, label: int = 0, image_id: str = "img-0") -> LabeledImage:
    return LabeledImage(img, label, image_id)
