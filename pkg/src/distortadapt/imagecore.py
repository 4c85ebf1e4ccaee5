"""Core image representation, metrics, cropping, byte round-trips and seeded RNG.

An image is a float64 numpy array of shape (H, W, 3) with values in [0, 1].
All quality math runs on this in-memory form; byte rasters exist only at the
file boundary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

# Peak signal value of the in-memory representation. On 8-bit rasters the
# same formula runs with peak 255; both give identical dB for matching content.
PEAK = 1.0

__all__ = [
    "PEAK",
    "RandomSource",
    "validate_image",
    "psnr",
    "random_crop",
    "to_bytes",
    "from_bytes",
    "save_png",
    "load_png",
]


def _stream_words(stream_id: str) -> list[int]:
    """Hash a stream label into four 32-bit words for SeedSequence entropy."""
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass
class RandomSource:
    """A named, reproducible stream of randomness.

    The pair (seed, stream_id) fully determines the sequence: the stream label
    is hashed into extra SeedSequence entropy, so distinct labels under the
    same seed give statistically independent streams, and the same pair always
    replays the same draws. Instances are stateful; build a fresh one (or a
    fresh child via :meth:`spawn`) to replay.
    """

    seed: int
    stream_id: str = "root"
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence([int(self.seed)] + _stream_words(self.stream_id))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def spawn(self, label: str) -> "RandomSource":
        """Child source for a sub-consumer; stream ids nest as ``parent/label``."""
        return RandomSource(self.seed, f"{self.stream_id}/{label}")

    def torch_seed(self) -> int:
        """A 63-bit seed for torch derived from (seed, stream_id)."""
        digest = hashlib.sha256(f"{self.seed}|{self.stream_id}|torch".encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check shape/dtype/range conventions; returns the array unchanged."""
    if not isinstance(img, np.ndarray):
        raise ValueError(f"image must be a numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.dtype != np.float64:
        raise ValueError(f"image dtype must be float64, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"image values outside [0, 1]: min={lo}, max={hi}")
    return img


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical.

    Defined as 10·log10(peak² / MSE) with the mean taken over all pixels and
    channels. Symmetric in its arguments.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10((PEAK * PEAK) / mse)


def random_crop(img: np.ndarray, size: int, rng: RandomSource) -> np.ndarray:
    """Uniform random square crop of side ``size``; row offset drawn before column."""
    h, w = img.shape[:2]
    if size <= 0:
        raise ValueError(f"crop size must be positive, got {size}")
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image extent {h}x{w}")
    top = int(rng.gen.integers(0, h - size + 1))
    left = int(rng.gen.integers(0, w - size + 1))
    return img[top : top + size, left : left + size].copy()


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8 with round-half-up."""
    scaled = np.clip(img, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def from_bytes(raster: np.ndarray) -> np.ndarray:
    """uint8 raster back to the float64 in-memory form (divide by 255)."""
    if raster.dtype != np.uint8:
        raise ValueError(f"expected uint8 raster, got {raster.dtype}")
    return raster.astype(np.float64) / 255.0


def save_png(img: np.ndarray, path) -> None:
    validate_image(img)
    PILImage.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        raster = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_bytes(raster)
