"""
model.py — small deterministic image classifiers with manual backprop.

Two classifiers share one interface:

  ConvNet           conv(3x3, 8) → ReLU → 2x2 avg pool → conv(3x3, 16) → ReLU
                    → global avg pool → dense → logits
  LinearClassifier  logits = W·x + b   (closed-form boundaries, used as an
                    analytic oracle for the attacks)

Both take batches of unit-scale tensors shaped (N, height, width, 3) and
expose logits_and_vjp(), which returns the logits together with a function
mapping d(loss)/d(logits) back to d(loss)/d(input).  Everything the attacks
need (predict, margin loss, its gradient) is built on that single call.

Randomness
----------
All randomness comes from numpy's PCG64 bit generator seeded explicitly
(make_rng).  The platform default generator is never used.

Checkpoint layout (little-endian)
---------------------------------
  4s   magic  b"HDBC"
  u32  version (1)
  u32  kind    (1 = ConvNet, 2 = LinearClassifier)
  u32  height, width, channels, num_classes, conv1_filters, conv2_filters
  u64  parameter count
  f8[] parameters, in parameter_names() order, each array C-ordered
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from services.imaging import CHANNELS, ContinuousImage, Image, ShapeMismatchError, to_unit

logger = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Vjp = Callable[[Array], Array]

CHECKPOINT_MAGIC = b"HDBC"
CHECKPOINT_VERSION = 1
_KIND_CONVNET = 1
_KIND_LINEAR = 2
_HEADER = struct.Struct("<4sIIIIIIIIQ")

ACCURACY_FLOOR = 0.9


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def make_rng(*seed: int) -> np.random.Generator:
    """PCG64 generator from an explicit seed (or seed tuple)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledImage:
    image: Image
    label: int
    image_id: str = ""


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """
    Every image carries two class cues on a grey background plus pixel noise:

      blob   a wide Gaussian colour blob, class-specific hue and position,
             peak `blob_contrast` levels.  Large: moving it costs a big RMSE.
      tint   a uniform class-specific colour shift of `tint` levels.  Faint,
             but the noise barely touches an image-wide mean.

    Both scale with one per-image amplitude.  Amplitudes are exponential
    quantiles (stratified per class, mean `amplitude_scale`), so the
    distance to a decision boundary decays exponentially across the set.
    A `decoy_rate` fraction of images carry another class's blob; only the
    tint names their class.  Weak amplitudes drown in the noise, so
    accuracy plateaus below 100%.
    """
    num_classes: int = 2
    image_size: int = 16
    samples_per_class: int = 200
    seed: int = 1
    noise_sigma: float = 8.0
    amplitude_scale: float = 0.25
    blob_contrast: float = 135.0
    tint: float = 20.0
    decoy_rate: float = 0.06


MAX_CLASSES = 8

# orthonormal basis of the chroma plane (orthogonal to grey)
_CHROMA = np.array([
    [2.0, -1.0, -1.0],
    [0.0, 1.0, -1.0],
]) / np.array([[np.sqrt(6.0)], [np.sqrt(2.0)]])


def _hue(angle: float) -> Array:
    return np.cos(angle) * _CHROMA[0] + np.sin(angle) * _CHROMA[1]


def _class_centre(k: int, num_classes: int, size: int) -> tuple[float, float]:
    angle = 2.0 * np.pi * k / num_classes
    radius = size / 5.0
    return size / 2.0 + radius * np.sin(angle), size / 2.0 + radius * np.cos(angle)


def exponential_quantiles(n: int) -> Array:
    """Unit-mean exponential law evaluated at the n bin centres."""
    return -np.log1p(-(np.arange(n) + 0.5) / n)


def generate_dataset(spec: SyntheticDatasetSpec) -> list[LabeledImage]:
    """Same settings, same images in the same order."""
    if spec.num_classes < 2:
        raise ModelError(f"need at least 2 classes, got {spec.num_classes}")
    if spec.num_classes > MAX_CLASSES:
        raise ModelError(f"at most {MAX_CLASSES} classes supported, got {spec.num_classes}")
    if spec.image_size < 4 or spec.image_size % 2:
        raise ModelError(f"image_size must be even and >= 4, got {spec.image_size}")
    if spec.samples_per_class < 1:
        raise ModelError("samples_per_class must be positive")
    if not 0.0 <= spec.decoy_rate < 1.0:
        raise ModelError(f"decoy_rate must lie in [0, 1), got {spec.decoy_rate}")

    rng = make_rng(spec.seed)
    size, classes = spec.image_size, spec.num_classes
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    blob_sigma = size / 2.5
    step = 2.0 * np.pi / classes

    labels = np.repeat(np.arange(classes), spec.samples_per_class)
    quantiles = exponential_quantiles(spec.samples_per_class)
    amplitudes = np.concatenate([rng.permutation(quantiles) for _ in range(classes)])
    order = rng.permutation(labels.size)

    samples: list[LabeledImage] = []
    for i, j in enumerate(order):
        k = int(labels[j])
        a = spec.amplitude_scale * amplitudes[j]
        shown = k
        if rng.random() < spec.decoy_rate:
            shown = (k + int(rng.integers(1, classes))) % classes
        cy, cx = _class_centre(shown, classes, size)
        cy += rng.uniform(-size / 16.0, size / 16.0)
        cx += rng.uniform(-size / 16.0, size / 16.0)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * blob_sigma ** 2))
        colour = spec.blob_contrast * _hue(shown * step)
        tint = spec.tint * _hue(k * step + step / 2.0)
        img = 128.0 + a * (blob[:, :, None] * colour + tint)
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
        pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        samples.append(LabeledImage(Image(pixels), k, f"syn-{spec.seed}-{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Array, labels: npt.NDArray[np.int64]) -> tuple[float, Array]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[idx, labels], 1e-300))))
    dlogits = p.copy()
    dlogits[idx, labels] -= 1.0
    return loss, dlogits / n


def _conv3x3(x: Array, w: Array, b: Array) -> Array:
    """'Same' 3x3 convolution; x (N,H,W,Cin), w (3,3,Cin,Cout)."""
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[3]))
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + h, j:j + wd, :] @ w[i, j]
    return out + b


def _conv3x3_backward(x: Array, w: Array, dout: Array) -> tuple[Array, Array, Array]:
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    flat_dout = dout.reshape(-1, dout.shape[3])
    for i in range(3):
        for j in range(3):
            window = xp[:, i:i + h, j:j + wd, :]
            dw[i, j] = window.reshape(-1, cin).T @ flat_dout
            dxp[:, i:i + h, j:j + wd, :] += dout @ w[i, j].T
    db = flat_dout.sum(axis=0)
    return dw, db, dxp[:, 1:-1, 1:-1, :]


def _avgpool2(x: Array) -> Array:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_backward(dout: Array) -> Array:
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) / 4.0


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------

class Classifier:
    """Interface shared by every model the attacks can target."""

    num_classes: int
    input_shape: tuple[int, int, int]

    def logits(self, x: Array) -> Array:
        return self.logits_and_vjp(x)[0]

    def logits_and_vjp(self, x: Array) -> tuple[Array, Vjp]:
        raise NotImplementedError

    def _check_batch(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatchError(
                f"model expects batches of {self.input_shape}, got {x.shape}"
            )
        return x


@dataclass
class ForwardCache:
    x: Array
    a1: Array
    p1: Array
    a2: Array
    g: Array


class ConvNet(Classifier):
    def __init__(self, params: dict[str, Array], input_shape: tuple[int, int, int], num_classes: int):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    @classmethod
    def initialise(
        cls,
        input_shape: tuple[int, int, int],
        num_classes: int,
        rng: np.random.Generator,
        conv1_filters: int = 8,
        conv2_filters: int = 16,
    ) -> ConvNet:
        if num_classes < 2:
            raise ModelError(f"need at least 2 classes, got {num_classes}")
        h, w, c = input_shape
        if c != CHANNELS or h % 2 or w % 2:
            raise ModelError(f"input shape must be (even, even, 3), got {input_shape}")
        params = {
            "conv1_w": rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(3, 3, c, conv1_filters)),
            "conv1_b": np.zeros(conv1_filters),
            "conv2_w": rng.normal(0.0, np.sqrt(2.0 / (9 * conv1_filters)), size=(3, 3, conv1_filters, conv2_filters)),
            "conv2_b": np.zeros(conv2_filters),
            "dense_w": rng.normal(0.0, np.sqrt(1.0 / conv2_filters), size=(conv2_filters, num_classes)),
            "dense_b": np.zeros(num_classes),
        }
        return cls(params, input_shape, num_classes)

    @staticmethod
    def parameter_names() -> tuple[str, ...]:
        return ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")

    @property
    def conv1_filters(self) -> int:
        return self.params["conv1_w"].shape[3]

    @property
    def conv2_filters(self) -> int:
        return self.params["conv2_w"].shape[3]

    def forward(self, x: Array) -> tuple[Array, ForwardCache]:
        x = self._check_batch(x)
        p = self.params
        a1 = _conv3x3(x - 0.5, p["conv1_w"], p["conv1_b"])
        p1 = _avgpool2(np.maximum(a1, 0.0))
        a2 = _conv3x3(p1, p["conv2_w"], p["conv2_b"])
        g = np.maximum(a2, 0.0).mean(axis=(1, 2))
        logits = g @ p["dense_w"] + p["dense_b"]
        return logits, ForwardCache(x, a1, p1, a2, g)

    def backward(self, cache: ForwardCache, dlogits: Array) -> tuple[dict[str, Array], Array]:
        """Parameter gradients and input gradient for upstream dlogits."""
        p = self.params
        grads: dict[str, Array] = {
            "dense_w": cache.g.T @ dlogits,
            "dense_b": dlogits.sum(axis=0),
        }
        dg = dlogits @ p["dense_w"].T
        _, h2, w2, _ = cache.a2.shape
        da2 = np.broadcast_to(dg[:, None, None, :] / (h2 * w2), cache.a2.shape) * (cache.a2 > 0)
        grads["conv2_w"], grads["conv2_b"], dp1 = _conv3x3_backward(cache.p1, p["conv2_w"], da2)
        da1 = _avgpool2_backward(dp1) * (cache.a1 > 0)
        grads["conv1_w"], grads["conv1_b"], dx = _conv3x3_backward(cache.x - 0.5, p["conv1_w"], da1)
        return grads, dx

    def logits_and_vjp(self, x: Array) -> tuple[Array, Vjp]:
        logits, cache = self.forward(x)

        def vjp(dlogits: Array) -> Array:
            return self.backward(cache, np.asarray(dlogits, dtype=np.float64))[1]

        return logits, vjp

    def parameter_vector(self) -> Array:
        return np.concatenate([self.params[k].ravel() for k in self.parameter_names()])


class LinearClassifier(Classifier):
    """logits = W · flatten(x) + b, with W shaped (num_classes, n)."""

    def __init__(self, weight: Array, bias: Array, input_shape: tuple[int, int, int]):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        self.num_classes = self.weight.shape[0]
        if self.weight.shape[1] != int(np.prod(self.input_shape)):
            raise ModelError(f"weight has {self.weight.shape[1]} columns for input {self.input_shape}")
        if self.bias.shape != (self.num_classes,):
            raise ModelError(f"bias must have shape ({self.num_classes},)")

    @staticmethod
    def parameter_names() -> tuple[str, ...]:
        return ("weight", "bias")

    def logits_and_vjp(self, x: Array) -> tuple[Array, Vjp]:
        x = self._check_batch(x)
        n = x.shape[0]
        logits = x.reshape(n, -1) @ self.weight.T + self.bias

        def vjp(dlogits: Array) -> Array:
            return (np.asarray(dlogits, dtype=np.float64) @ self.weight).reshape(x.shape)

        return logits, vjp

    def parameter_vector(self) -> Array:
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])


# ---------------------------------------------------------------------------
# Inference and attack losses
# ---------------------------------------------------------------------------

def _single(m: Classifier, x: ContinuousImage) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(m.input_shape):
        raise ShapeMismatchError(f"model expects {m.input_shape}, got {x.shape}")
    return x[None]


def predict_unit(m: Classifier, x: ContinuousImage) -> int:
    """argmax of logits; np.argmax breaks ties towards the lowest index."""
    return int(np.argmax(m.logits(_single(m, x))[0]))


def predict(m: Classifier, img: Image) -> int:
    return predict_unit(m, to_unit(img))


def predict_batch(m: Classifier, images: Sequence[Image], batch_size: int = 256) -> list[int]:
    out: list[int] = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack([to_unit(img) for img in images[start:start + batch_size]])
        out.extend(int(c) for c in np.argmax(m.logits(chunk), axis=1))
    return out


def _runner_up(logits: Array, y: int) -> int:
    masked = logits.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def _check_label(m: Classifier, y: int) -> None:
    if not 0 <= y < m.num_classes:
        raise ModelError(f"label {y} outside [0, {m.num_classes})")


def margin_loss(m: Classifier, x: ContinuousImage, y: int) -> float:
    """logit_y − max_{j≠y} logit_j; negative exactly when x is adversarial."""
    _check_label(m, y)
    logits = m.logits(_single(m, x))[0]
    return float(logits[y] - logits[_runner_up(logits, y)])


def margin_loss_and_grad(m: Classifier, x: ContinuousImage, y: int) -> tuple[float, ContinuousImage]:
    """
    One forward and one backward pass.  At ties in the max over j≠y the
    lowest-index maximiser is used, which yields a valid subgradient.
    """
    _check_label(m, y)
    logits, vjp = m.logits_and_vjp(_single(m, x))
    logits = logits[0]
    j = _runner_up(logits, y)
    dlogits = np.zeros((1, m.num_classes))
    dlogits[0, y] = 1.0
    dlogits[0, j] -= 1.0
    return float(logits[y] - logits[j]), vjp(dlogits)[0]


def margin_loss_grad(m: Classifier, x: ContinuousImage, y: int) -> ContinuousImage:
    return margin_loss_and_grad(m, x, y)[1]


def accuracy(m: Classifier, samples: Sequence[LabeledImage]) -> float:
    if not samples:
        raise ModelError("cannot measure accuracy on an empty set")
    preds = predict_batch(m, [s.image for s in samples])
    return float(np.mean([p == s.label for p, s in zip(preds, samples)]))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _resolve_data(data: SyntheticDatasetSpec | Sequence[LabeledImage]) -> tuple[list[LabeledImage], int]:
    if isinstance(data, SyntheticDatasetSpec):
        return generate_dataset(data), data.num_classes
    samples = list(data)
    if not samples:
        raise ModelError("training set is empty")
    num_classes = max(s.label for s in samples) + 1
    if num_classes < 2:
        raise ModelError(f"need at least 2 classes, got {num_classes}")
    return samples, num_classes


def _pgd_ce_batch(
    m: ConvNet,
    x: Array,
    labels: npt.NDArray[np.int64],
    radius: float,
    steps: int,
) -> Array:
    """
    l2 PGD ascent on cross-entropy for a batch; per-sample ball of the given
    l2 radius on the unit scale, clipped to [0, 1].
    """
    step = 2.5 * radius / steps
    delta = np.zeros_like(x)
    for _ in range(steps):
        logits, cache = m.forward(np.clip(x + delta, 0.0, 1.0))
        _, dlogits = cross_entropy(logits, labels)
        _, grad = m.backward(cache, dlogits)
        norms = np.sqrt((grad ** 2).sum(axis=(1, 2, 3), keepdims=True))
        delta = delta + step * grad / np.maximum(norms, 1e-12)
        dnorm = np.sqrt((delta ** 2).sum(axis=(1, 2, 3), keepdims=True))
        delta = delta * np.minimum(1.0, radius / np.maximum(dnorm, 1e-12))
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return x + delta


def _train(
    data: SyntheticDatasetSpec | Sequence[LabeledImage],
    epochs: int,
    seed: int,
    *,
    pgd_steps: int = 0,
    eps: float = 0.0,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
) -> ConvNet:
    samples, num_classes = _resolve_data(data)
    if epochs < 1:
        raise ModelError(f"epochs must be positive, got {epochs}")
    rng = make_rng(seed)
    x_all = np.stack([to_unit(s.image) for s in samples])
    y_all = np.array([s.label for s in samples], dtype=np.int64)
    model = ConvNet.initialise(tuple(x_all.shape[1:]), num_classes, rng)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    # eps is a pixel-level RMSE radius; convert to an l2 radius on [0, 1]
    radius = eps / 255.0 * np.sqrt(x_all[0].size)
    adversarial = eps > 0 and pgd_steps > 0
    # the radius ramps up linearly over the first third of training
    warmup = max(1, epochs // 3)

    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        epoch_radius = radius * min(1.0, (epoch + 1) / warmup)
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if adversarial:
                xb = _pgd_ce_batch(model, xb, yb, epoch_radius, pgd_steps)
            logits, cache = model.forward(xb)
            loss, dlogits = cross_entropy(logits, yb)
            grads, _ = model.backward(cache, dlogits)
            for k in model.params:
                velocity[k] = momentum * velocity[k] - learning_rate * grads[k]
                model.params[k] = model.params[k] + velocity[k]
            total += loss * len(idx)
        logger.debug("epoch %d/%d loss %.4f", epoch + 1, epochs, total / len(samples))

    logger.debug("training accuracy %.3f", accuracy(model, samples))
    return model


def train_standard(
    data: SyntheticDatasetSpec | Sequence[LabeledImage],
    epochs: int,
    seed: int,
    **kwargs,
) -> ConvNet:
    """Seeded minibatch SGD (momentum) on cross-entropy."""
    return _train(data, epochs, seed, **kwargs)


def train_adversarial(
    data: SyntheticDatasetSpec | Sequence[LabeledImage],
    epochs: int,
    seed: int,
    pgd_steps: int,
    eps: float,
    **kwargs,
) -> ConvNet:
    """
    Like train_standard, but every minibatch is replaced by its PGD
    perturbation (pgd_steps iterations, pixel RMSE radius eps) before the
    gradient step.  eps = 0 reproduces train_standard exactly.
    """
    if eps < 0:
        raise ModelError(f"eps must be non-negative, got {eps}")
    if pgd_steps < 0:
        raise ModelError(f"pgd_steps must be non-negative, got {pgd_steps}")
    return _train(data, epochs, seed, pgd_steps=pgd_steps, eps=eps, **kwargs)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(m: Classifier) -> bytes:
    h, w, c = m.input_shape
    if isinstance(m, ConvNet):
        kind, f1, f2 = _KIND_CONVNET, m.conv1_filters, m.conv2_filters
    elif isinstance(m, LinearClassifier):
        kind, f1, f2 = _KIND_LINEAR, 0, 0
    else:
        raise CheckpointError(f"cannot serialise {type(m).__name__}")
    params = m.parameter_vector().astype("<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind, h, w, c, m.num_classes, f1, f2, params.size)
    return header + params.tobytes()


def decode_checkpoint(data: bytes) -> Classifier:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, kind, h, w, c, classes, f1, f2, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * 8:
        raise CheckpointError(f"expected {count} parameters, found {len(body) // 8}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    input_shape = (h, w, c)

    if kind == _KIND_CONVNET:
        shapes = {
            "conv1_w": (3, 3, c, f1),
            "conv1_b": (f1,),
            "conv2_w": (3, 3, f1, f2),
            "conv2_b": (f2,),
            "dense_w": (f2, classes),
            "dense_b": (classes,),
        }
        names = ConvNet.parameter_names()
    elif kind == _KIND_LINEAR:
        shapes = {"weight": (classes, h * w * c), "bias": (classes,)}
        names = LinearClassifier.parameter_names()
    else:
        raise CheckpointError(f"unknown model kind {kind}")

    expected = sum(int(np.prod(shapes[k])) for k in names)
    if expected != count:
        raise CheckpointError(f"architecture needs {expected} parameters, header says {count}")
    params: dict[str, Array] = {}
    offset = 0
    for k in names:
        size = int(np.prod(shapes[k]))
        params[k] = flat[offset:offset + size].reshape(shapes[k])
        offset += size

    if kind == _KIND_CONVNET:
        return ConvNet(params, input_shape, classes)
    return LinearClassifier(params["weight"], params["bias"], input_shape)
