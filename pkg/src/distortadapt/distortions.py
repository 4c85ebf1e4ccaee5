"""Five parametric image distortions and a uniform dispatch interface.

Every operation maps a [0, 1] float image to another image of the same shape:

* ``blur``          Gaussian blur, level = standard deviation in pixels.
* ``awgn``          additive white Gaussian noise, level = sigma on the 0-255 scale.
* ``block_dct``     fixed 8x8 block-DCT codec, level = compression level in (0, 100].
* ``wavelet_psnr``  3-level integer-lifting wavelet codec whose quantization step
                    is bisected so the output lands on a requested PSNR, level =
                    target PSNR in dB.
* ``varblock_qp``   variable-block-size DCT codec (32 down to 8 via a variance
                    split rule), level = quantizer parameter in [0, 51].

Codecs process each channel independently on the 0-255 scale with a -128 level
shift before the transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.ndimage

from .imagecore import RandomSource, psnr, to_bytes, validate_image

__all__ = [
    "KINDS",
    "LEVEL_RANGES",
    "TOY_GRIDS",
    "ConvergenceError",
    "DistortionSpec",
    "apply",
    "awgn",
    "block_dct_codec",
    "gaussian_blur",
    "scaled_quant_table",
    "severity",
    "varblock_codec",
    "wavelet_codec_at_psnr",
]


class ConvergenceError(RuntimeError):
    """Raised when the wavelet codec cannot reach the requested PSNR window."""


# Closed level ranges accepted by each kind (block_dct excludes 0: the scale
# factor 5000/cl is undefined there).
LEVEL_RANGES = {
    "blur": (0.0, 16.0),
    "awgn": (0.0, 255.0),
    "block_dct": (0.0, 100.0),
    "wavelet_psnr": (0.0, 55.0),
    "varblock_qp": (0.0, 51.0),
}
KINDS = tuple(LEVEL_RANGES)

# Desk-scale level grids, mild to severe.
TOY_GRIDS = {
    "blur": [1.0, 2.0, 3.0, 5.0],
    "awgn": [10.0, 25.0, 50.0],
    "block_dct": [90.0, 50.0, 30.0, 10.0],
    "wavelet_psnr": [40.0, 34.0, 28.0],
    "varblock_qp": [22.0, 34.0, 46.0],
}


@dataclass(frozen=True)
class DistortionSpec:
    """A distortion kind plus level; ``seed`` pins the noise draw for awgn."""

    kind: str
    level: float
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in LEVEL_RANGES:
            raise ValueError(f"unknown distortion kind {self.kind!r}; known: {sorted(LEVEL_RANGES)}")
        lo, hi = LEVEL_RANGES[self.kind]
        if not (lo <= float(self.level) <= hi):
            raise ValueError(f"{self.kind} level {self.level} outside [{lo}, {hi}]")
        if self.kind == "block_dct" and float(self.level) == 0.0:
            raise ValueError("block_dct level 0 is undefined (quantizer scale 5000/level)")

    def key(self) -> str:
        lvl = f"{float(self.level):g}"
        return f"{self.kind}:{lvl}" + (f":seed{self.seed}" if self.seed is not None else "")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "level": float(self.level)}
        if self.seed is not None:
            d["seed"] = int(self.seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        return cls(kind=d["kind"], level=float(d["level"]), seed=d.get("seed"))


def severity(spec: DistortionSpec) -> float:
    """Scalar that sorts a kind's levels from mild to severe when ascending."""
    if spec.kind in ("block_dct", "wavelet_psnr"):
        return -float(spec.level)
    return float(spec.level)


# ---------------------------------------------------------------------------
# blur


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflective borders.

    The border mode mirrors without duplicating the edge sample, so constant
    images are exactly invariant.
    """
    validate_image(img)
    if sigma < 0:
        raise ValueError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    radius = int(math.ceil(3.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(taps**2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = scipy.ndimage.correlate1d(img, kernel, axis=0, mode="mirror")
    out = scipy.ndimage.correlate1d(out, kernel, axis=1, mode="mirror")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# awgn


def awgn(img: np.ndarray, sigma: float, rng: RandomSource) -> np.ndarray:
    """Additive white Gaussian noise with standard deviation ``sigma`` on the
    0-255 scale, applied in [0, 1] units and clipped back to range."""
    validate_image(img)
    if sigma < 0:
        raise ValueError(f"awgn sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = rng.gen.standard_normal(img.shape) * (sigma / 255.0)
    return np.clip(img + noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# block_dct

# Standard 8x8 luminance quantization table.
_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def scaled_quant_table(compression_level: float) -> np.ndarray:
    """Luminance table scaled by the compression level.

    scale = 5000/cl for cl < 50 else 200 - 2*cl; each entry becomes
    clamp(floor((base*scale + 50)/100), 1, 255). cl=50 reproduces the base
    table; cl=100 collapses every entry to 1.
    """
    cl = float(compression_level)
    if not (0.0 < cl <= 100.0):
        raise ValueError(f"compression level must be in (0, 100], got {cl}")
    scale = 5000.0 / cl if cl < 50.0 else 200.0 - 2.0 * cl
    table = np.floor((_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _pad_to_multiple(arr: np.ndarray, mult: int) -> tuple[np.ndarray, int, int]:
    h, w = arr.shape[:2]
    ph = (-h) % mult
    pw = (-w) % mult
    if ph or pw:
        pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pad, mode="edge")
    return arr, h, w


def block_dct_codec(img: np.ndarray, compression_level: float) -> np.ndarray:
    """Fixed 8x8 block-DCT codec with the scaled luminance table, per channel."""
    validate_image(img)
    q = scaled_quant_table(compression_level)
    x = img * 255.0 - 128.0
    x, h, w = _pad_to_multiple(x, 8)
    hp, wp = x.shape[:2]
    blocks = x.reshape(hp // 8, 8, wp // 8, 8, 3)
    coeffs = scipy.fft.dctn(blocks, axes=(1, 3), norm="ortho")
    qb = q[None, :, None, :, None]
    coeffs = np.round(coeffs / qb) * qb
    rec = scipy.fft.idctn(coeffs, axes=(1, 3), norm="ortho")
    rec = rec.reshape(hp, wp, 3)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# wavelet_psnr

_WAVELET_LEVELS = 3


def _lift_forward_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """One level of the integer-lifting Haar transform along ``axis``.

    Works on float64 arrays holding integral values exactly: d = odd - even,
    s = even + floor(d/2). Output packs [s | d] along the axis.
    """
    a = np.moveaxis(a, axis, 0)
    a0, a1 = a[0::2], a[1::2]
    d = a1 - a0
    s = a0 + np.floor(d / 2.0)
    return np.moveaxis(np.concatenate([s, d], axis=0), 0, axis)


def _lift_inverse_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0] // 2
    s, d = a[:n], a[n:]
    a0 = s - np.floor(d / 2.0)
    a1 = d + a0
    out = np.empty_like(a)
    out[0::2] = a0
    out[1::2] = a1
    return np.moveaxis(out, 0, axis)


def _wavelet_forward(raster: np.ndarray) -> np.ndarray:
    """3-level 2D lifting transform of an integral-valued (H, W, C) array.

    H and W must be multiples of 8. Subbands pack in place: the level-3
    approximation ends in the top-left (H/8, W/8) corner."""
    c = raster.astype(np.float64).copy()
    h, w = c.shape[:2]
    for _ in range(_WAVELET_LEVELS):
        sub = c[:h, :w]
        sub = _lift_forward_axis(sub, 1)
        sub = _lift_forward_axis(sub, 0)
        c[:h, :w] = sub
        h //= 2
        w //= 2
    return c


def _wavelet_inverse(coeffs: np.ndarray) -> np.ndarray:
    c = coeffs.copy()
    hf, wf = c.shape[:2]
    for lvl in range(_WAVELET_LEVELS - 1, -1, -1):
        h = hf >> lvl
        w = wf >> lvl
        sub = c[:h, :w]
        sub = _lift_inverse_axis(sub, 0)
        sub = _lift_inverse_axis(sub, 1)
        c[:h, :w] = sub
    return c


def _deadzone(coeffs: np.ndarray, detail_mask: np.ndarray, step: float) -> np.ndarray:
    """Dead-zone quantize/dequantize the detail coefficients.

    k = trunc(c/step); zero bin reconstructs to 0, others to sign(k)*(|k|+0.5)*step.
    """
    c = coeffs.copy()
    d = c[detail_mask]
    k = np.trunc(d / step)
    c[detail_mask] = np.sign(k) * (np.abs(k) + 0.5) * step
    return c


def wavelet_codec_at_psnr(img: np.ndarray, target_psnr: float, max_evals: int = 60) -> np.ndarray:
    """Wavelet codec whose quantization step is chosen so that
    psnr(img, output) lands within 0.5 dB of ``target_psnr``.

    The step is found by bracketing plus bisection. Images the codec cannot
    push to the target (constant images quantize to themselves at any step)
    raise :class:`ConvergenceError`.
    """
    validate_image(img)
    if not (0.0 < target_psnr <= LEVEL_RANGES["wavelet_psnr"][1]):
        raise ValueError(f"target PSNR must be in (0, {LEVEL_RANGES['wavelet_psnr'][1]}], got {target_psnr}")
    raster = to_bytes(img).astype(np.float64)
    raster, h, w = _pad_to_multiple(raster, 8)
    coeffs = _wavelet_forward(raster)
    hp, wp = coeffs.shape[:2]
    detail_mask = np.ones(coeffs.shape, dtype=bool)
    detail_mask[: hp // 8, : wp // 8] = False

    def reconstruct(step: float | None) -> tuple[np.ndarray, float]:
        q = coeffs if step is None else _deadzone(coeffs, detail_mask, step)
        rec = _wavelet_inverse(q)[:h, :w]
        out = np.clip(rec / 255.0, 0.0, 1.0)
        return out, psnr(img, out)

    evals = 0
    out, achieved = reconstruct(None)
    evals += 1
    if achieved < target_psnr:
        # Lossless path already sits below the target: nothing to tune.
        raise ConvergenceError(
            f"lossless reconstruction is {achieved:.2f} dB, below target {target_psnr} dB"
        )
    hi = 8.0
    while True:
        out_hi, p_hi = reconstruct(hi)
        evals += 1
        if p_hi < target_psnr:
            break
        if evals >= max_evals or hi > 2**22:
            raise ConvergenceError(
                f"could not push PSNR below {target_psnr} dB (reached {p_hi:.2f} dB at step {hi})"
            )
        hi *= 2.0
    lo = 0.0
    window = 0.5
    best_out, best_dev = out_hi, abs(p_hi - target_psnr)
    while evals < max_evals:
        mid = 0.5 * (lo + hi)
        out, achieved = reconstruct(mid)
        evals += 1
        if abs(achieved - target_psnr) < best_dev:
            best_out, best_dev = out, abs(achieved - target_psnr)
        if abs(achieved - target_psnr) <= window:
            return out
        if achieved > target_psnr:
            lo = mid
        else:
            hi = mid
    # PSNR is piecewise constant in the step, so bisection can exhaust its
    # budget between plateaus; the closest one seen still satisfies the
    # documented tolerance whenever one exists.
    if best_dev <= window:
        return best_out
    raise ConvergenceError(
        f"no quantization step within {window} dB of {target_psnr} dB "
        f"(closest {best_dev:.2f} dB away after {max_evals} evaluations)"
    )


# ---------------------------------------------------------------------------
# varblock_qp

_VARBLOCK_MAX = 32
_VARBLOCK_MIN = 8
_SPLIT_VARIANCE = 10.0


def _code_varblock(block: np.ndarray, step: float) -> np.ndarray:
    """Recursively code one square block of one channel (level-shifted values)."""
    n = block.shape[0]
    if n > _VARBLOCK_MIN and float(block.var()) > _SPLIT_VARIANCE:
        h = n // 2
        out = np.empty_like(block)
        for i in (0, 1):
            for j in (0, 1):
                sl = (slice(i * h, (i + 1) * h), slice(j * h, (j + 1) * h))
                out[sl] = _code_varblock(block[sl], step)
        return out
    coeffs = scipy.fft.dctn(block, norm="ortho")
    coeffs = np.round(coeffs / step) * step
    return scipy.fft.idctn(coeffs, norm="ortho")


def varblock_codec(img: np.ndarray, qp: float) -> np.ndarray:
    """Variable-block-size DCT codec: 32x32 blocks split down to 8x8 while the
    block variance exceeds 10; uniform quantizer step 2**((qp - 4)/6)."""
    validate_image(img)
    lo, hi = LEVEL_RANGES["varblock_qp"]
    if not (lo <= qp <= hi):
        raise ValueError(f"qp must be in [{lo}, {hi}], got {qp}")
    step = 2.0 ** ((float(qp) - 4.0) / 6.0)
    x = img * 255.0 - 128.0
    x, h, w = _pad_to_multiple(x, _VARBLOCK_MAX)
    out = np.empty_like(x)
    hp, wp = x.shape[:2]
    for ch in range(3):
        for top in range(0, hp, _VARBLOCK_MAX):
            for left in range(0, wp, _VARBLOCK_MAX):
                tile = x[top : top + _VARBLOCK_MAX, left : left + _VARBLOCK_MAX, ch]
                out[top : top + _VARBLOCK_MAX, left : left + _VARBLOCK_MAX, ch] = _code_varblock(
                    tile, step
                )
    rec = out[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dispatch


def apply(spec: DistortionSpec, img: np.ndarray, rng: RandomSource | None = None) -> np.ndarray:
    """Apply ``spec`` to ``img``. awgn needs randomness: either ``spec.seed``
    (which pins the draw regardless of the caller) or ``rng``."""
    if spec.kind == "blur":
        return gaussian_blur(img, float(spec.level))
    if spec.kind == "awgn":
        if spec.seed is not None:
            rng = RandomSource(spec.seed, "awgn")
        if rng is None:
            raise ValueError("awgn requires an rng or a spec seed")
        return awgn(img, float(spec.level), rng)
    if spec.kind == "block_dct":
        return block_dct_codec(img, float(spec.level))
    if spec.kind == "wavelet_psnr":
        return wavelet_codec_at_psnr(img, float(spec.level))
    if spec.kind == "varblock_qp":
        return varblock_codec(img, float(spec.level))
    raise ValueError(f"unknown distortion kind {spec.kind!r}")
