"""
imaging.py — pixel-domain images, distortion arithmetic, quantization, PPM I/O.

An Image is the only object a classifier ever sees from outside: a frozen
uint8 array of shape (height, width, 3).  Attacks work on ContinuousImage
arrays (float64, same shape) and come back to the pixel domain through
quantize().

Distortion is always reported on the 0–255 scale, whatever the model's
input domain is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

CHANNELS = 3

# float64 working tensor; unit scale inside models, 0–255 scale inside
# quantize() and the black-box attack.
ContinuousImage = npt.NDArray[np.float64]


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class ShapeMismatchError(ValueError):
    pass


class PpmError(ValueError):
    pass


class PpmFormatError(PpmError):
    """Not a binary P6 file (P3, P5, PNG, ...)."""


class PpmHeaderError(PpmError):
    pass


class PpmMaxvalError(PpmError):
    pass


class PpmTruncatedError(PpmError):
    pass


# ---------------------------------------------------------------------------
# Image
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Image:
    pixels: npt.NDArray[np.uint8]

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != CHANNELS:
            raise ShapeMismatchError(f"expected (height, width, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.issubdtype(arr.dtype, np.integer) and not np.all(arr == np.round(arr)):
                raise ValueError("image components must be integers")
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("image components must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        else:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return CHANNELS

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    @property
    def n(self) -> int:
        return CHANNELS * self.width * self.height

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self) -> int:
        return hash((self.shape, self.pixels.tobytes()))


# ---------------------------------------------------------------------------
# Distortion and PSNR
# ---------------------------------------------------------------------------

def _check_same_shape(a_shape: tuple, b_shape: tuple) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeMismatchError(f"shape mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")


def distortion(a: Image, b: Image) -> float:
    """Root mean square error between two images, in pixel levels."""
    _check_same_shape(a.shape, b.shape)
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def pixel_distortion(x: ContinuousImage, origin: Image) -> float:
    """RMSE of a 0–255 scale working tensor against an image."""
    _check_same_shape(x.shape, origin.shape)
    diff = np.asarray(x, dtype=np.float64) - origin.pixels
    return float(np.sqrt(np.mean(diff * diff)))


def psnr(d: float) -> float:
    """
    PSNR in dB for a pixel-level RMSE.  d = 0 returns math.inf: identical
    images have no finite PSNR.
    """
    if d < 0:
        raise ValueError(f"distortion must be non-negative, got {d}")
    if d == 0:
        return math.inf
    return 48.13 - 20.0 * math.log10(d)


# ---------------------------------------------------------------------------
# Domain conversions
# ---------------------------------------------------------------------------

def to_unit(img: Image) -> ContinuousImage:
    return img.pixels.astype(np.float64) / 255.0


def round_half_away(x: npt.ArrayLike) -> ContinuousImage:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x: ContinuousImage) -> Image:
    """Round to nearest (ties away from zero), then clamp to [0, 255]."""
    return Image(np.clip(round_half_away(x), 0, 255).astype(np.uint8))


def from_unit(x: ContinuousImage) -> Image:
    return quantize(np.asarray(x, dtype=np.float64) * 255.0)


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ---------------------------------------------------------------------------

def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PpmHeaderError("unexpected end of header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end == -1:
                raise PpmHeaderError("unterminated comment in header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PpmHeaderError("missing whitespace after maxval")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> Image:
    magic = data[:2]
    if magic != b"P6":
        if magic[:1] == b"P" and magic[1:2].isdigit():
            raise PpmFormatError(f"unsupported PPM variant {magic.decode('ascii')}; only P6 is read")
        raise PpmFormatError("not a PPM file")

    tokens, offset = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PpmHeaderError(f"non-numeric header fields: {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise PpmHeaderError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PpmMaxvalError(f"maxval must be 255, got {maxval}")

    start = 2 + offset
    expected = width * height * CHANNELS
    payload = data[start:start + expected]
    if len(payload) < expected:
        raise PpmTruncatedError(f"expected {expected} raster bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, CHANNELS)
    return Image(pixels)


def read_ppm(path: Path | str) -> Image:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: Path | str, img: Image) -> None:
    Path(path).write_bytes(encode_ppm(img))
