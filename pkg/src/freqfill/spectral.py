"""2D discrete Fourier analysis, circular high-pass detail extraction, and
vertical seam detection for two-panel images.

The transform has two routes: a direct summation path (the reference, valid
for any size) and an iterative radix-2 path used per axis whenever that axis
is a power of two. The detail filter keeps the kernel symmetric under index
negation so filtering a real image stays real, which also makes the linear
part of the filter its own adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, _record, _wrap

Array = np.ndarray

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def luma(image: Array) -> Array:
    """Collapse an H×W×3 image to a single luminance plane; H×W passes through."""
    img = np.asarray(image)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA_WEIGHTS.astype(img.dtype)
    raise ContractViolation(f"expected H×W or H×W×3 image, got shape {img.shape}")


# ---------------------------------------------------------------------------
# Transforms


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _fft_pow2(a: Array, axis: int) -> Array:
    """Iterative radix-2 transform along ``axis`` (length must be a power of two)."""
    a = np.moveaxis(np.asarray(a, dtype=np.complex128), axis, -1).copy()
    n = a.shape[-1]
    if n > 1:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            rev |= ((idx >> b) & 1) << (bits - 1 - b)
        a = a[..., rev]
        size = 2
        while size <= n:
            half = size // 2
            tw = np.exp(-2j * np.pi * np.arange(half) / size)
            b2 = a.reshape(a.shape[:-1] + (n // size, size))
            even = b2[..., :half]
            odd = b2[..., half:] * tw
            a = np.concatenate([even + odd, even - odd], axis=-1).reshape(a.shape)
            size *= 2
    return np.moveaxis(a, -1, axis)


def _dft_direct(a: Array, axis: int) -> Array:
    """Direct summation transform along ``axis``; the reference route."""
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[axis]
    k = np.arange(n)
    m = np.exp(-2j * np.pi * np.outer(k, k) / n)
    moved = np.moveaxis(a, axis, -1)
    return np.moveaxis(np.tensordot(moved, m, axes=([-1], [1])), -1, axis)


def _dft1(a: Array, axis: int, force_direct: bool = False) -> Array:
    if not force_direct and _is_pow2(a.shape[axis]):
        return _fft_pow2(a, axis)
    return _dft_direct(a, axis)


def _dft2_raw(a: Array, force_direct: bool = False) -> Array:
    return _dft1(_dft1(a, -1, force_direct), -2, force_direct)


def _idft2_raw(f: Array, force_direct: bool = False) -> Array:
    h, w = f.shape[-2:]
    return np.conj(_dft2_raw(np.conj(f), force_direct)) / (h * w)


@dataclass
class SpectrumGrid:
    """Complex frequency grid in the unnormalized forward-transform convention."""

    values: Array  # complex128, shape (H, W)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def re(self) -> Array:
        return self.values.real

    @property
    def im(self) -> Array:
        return self.values.imag


def dft2(image: Array, force_direct: bool = False) -> SpectrumGrid:
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractViolation(f"dft2 needs a non-empty H×W plane, got shape {img.shape}")
    return SpectrumGrid(_dft2_raw(img, force_direct))


def idft2(spec: SpectrumGrid, force_direct: bool = False) -> Array:
    return _idft2_raw(spec.values, force_direct)


def _shift2(a: Array, sign: int) -> Array:
    h, w = a.shape[-2:]
    return np.roll(a, (sign * (h // 2), sign * (w // 2)), axis=(-2, -1))


def fftshift(spec: SpectrumGrid) -> SpectrumGrid:
    return SpectrumGrid(_shift2(spec.values, +1))


def ifftshift(spec: SpectrumGrid) -> SpectrumGrid:
    return SpectrumGrid(_shift2(spec.values, -1))


# ---------------------------------------------------------------------------
# High-pass detail extraction


@dataclass(frozen=True)
class HighPassConfig:
    """Circular high-pass settings; the radius is a fraction of min(H,W)/2."""

    radius_fraction: float = 0.1
    normalize: str = "none"  # "none" | "minmax"

    def __post_init__(self):
        if not 0.0 <= self.radius_fraction < 1.0:
            raise ContractViolation("radius_fraction must lie in [0, 1)")
        if self.normalize not in ("none", "minmax"):
            raise ContractViolation(f"unknown normalize mode {self.normalize!r}")

    def radius(self, h: int, w: int) -> int:
        return int(np.floor(self.radius_fraction * min(h, w) / 2.0 + 0.5))


_MASK_CACHE: dict[tuple[int, int, int], Array] = {}


def _hp_mask(h: int, w: int, r: int) -> Array:
    key = (h, w, r)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        # distances measured from the centered zero-frequency bin; strict
        # inequality so r == 0 removes nothing
        cy, cx = h // 2, w // 2
        yy = (np.arange(h) - cy)[:, None].astype(np.float64)
        xx = (np.arange(w) - cx)[None, :].astype(np.float64)
        mask = (yy * yy + xx * xx >= r * r).astype(np.float64)
        _MASK_CACHE[key] = mask
    return mask


def _hp_linear(img: Array, r: int) -> Array:
    """The filter before magnitude: transform, zero a centered disc, invert.

    The disc is symmetric under index negation, so conjugate symmetry of the
    spectrum survives masking and the output is real up to rounding; the
    imaginary residue is discarded.
    """
    h, w = img.shape[-2:]
    f = _dft2_raw(np.asarray(img, dtype=np.float64))
    fh = _shift2(f, +1) * _hp_mask(h, w, r)
    return _idft2_raw(_shift2(fh, -1)).real


def _minmax01(x: Array) -> Array:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-8:  # constant output maps to all-zeros
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def extract_hf(image: Array, cfg: HighPassConfig) -> Array:
    """High-frequency detail map: magnitude of the inverse transform after the
    centered disc of the spectrum is zeroed.

    Input must be a single grayscale plane (convert color via :func:`luma`
    first). In minmax mode values must already sit in [0, 1] and the output is
    rescaled to [0, 1]; in raw mode any finite values are accepted so the map
    can sit inside a differentiable loss.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractViolation(f"extract_hf needs a grayscale H×W plane, got {img.shape}")
    if cfg.normalize == "minmax" and (img.min() < -1e-6 or img.max() > 1 + 1e-6):
        raise ContractViolation("extract_hf (minmax) expects values in [0, 1]")
    r = cfg.radius(*img.shape)
    out = np.abs(img).astype(np.float64) if r == 0 else np.abs(_hp_linear(img, r))
    if cfg.normalize == "minmax":
        out = _minmax01(out)
    return out.astype(img.dtype if img.dtype in (np.float32, np.float64) else np.float64)


def extract_hf_adjoint(upstream: Array, image: Array, cfg: HighPassConfig) -> Array:
    """Gradient of ``extract_hf`` at ``image`` applied to ``upstream``.

    Only the raw (unnormalized) mode is differentiable by policy. The linear
    stage is self-adjoint, so the pullback is the same filter applied to the
    upstream signal gated by the sign of the pre-magnitude response (with
    subgradient 0 at 0).
    """
    if cfg.normalize != "none":
        raise ContractViolation("extract_hf_adjoint requires normalize='none'")
    up = np.asarray(upstream, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if up.shape != img.shape:
        raise ContractViolation("upstream and image shapes must match")
    r = cfg.radius(img.shape[-2], img.shape[-1])
    if r == 0:
        return (up * np.sign(img)).astype(np.asarray(image).dtype)
    sign = np.sign(_hp_linear(img, r))
    return _hp_linear(up * sign, r).astype(np.asarray(image).dtype)


def extract_hf_op(t: Tensor, cfg: HighPassConfig) -> Tensor:
    """Tape-recorded detail extraction over (..., H, W); raw mode only."""
    if cfg.normalize != "none":
        raise ContractViolation("tape-side extract_hf requires normalize='none'")
    if t.ndim < 2:
        raise ContractViolation("extract_hf_op needs at least an H×W plane")
    r = cfg.radius(t.shape[-2], t.shape[-1])
    if r == 0:
        pre = t.data.astype(np.float64)
    else:
        pre = _hp_linear(t.data.astype(np.float64), r)
    out = _wrap(np.abs(pre).astype(t.dtype))
    sign = np.sign(pre)

    def bw(g):
        gated = g.astype(np.float64) * sign
        pulled = gated if r == 0 else _hp_linear(gated, r)
        return (pulled.astype(t.dtype),)

    return _record(out, (t,), bw)


# ---------------------------------------------------------------------------
# Sobel tooling


def _sobel_responses(img: Array) -> tuple[Array, Array]:
    i = np.asarray(img, dtype=np.float64)
    gx = (
        (i[:-2, 2:] + 2.0 * i[1:-1, 2:] + i[2:, 2:])
        - (i[:-2, :-2] + 2.0 * i[1:-1, :-2] + i[2:, :-2])
    )
    gy = (
        (i[2:, :-2] + 2.0 * i[2:, 1:-1] + i[2:, 2:])
        - (i[:-2, :-2] + 2.0 * i[:-2, 1:-1] + i[:-2, 2:])
    )
    return gx, gy


def sobel_magnitude(image: Array) -> Array:
    """Gradient magnitude map with a zero border (the edge-detector baseline)."""
    img = luma(image)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ContractViolation("sobel needs at least a 3×3 image")
    gx, gy = _sobel_responses(img)
    out = np.zeros(img.shape, dtype=np.float64)
    out[1:-1, 1:-1] = np.hypot(gx, gy)
    return out


def sobel_seam(diptych: Array, band: tuple[float, float] = (0.4, 0.6)) -> int:
    """Column of the strongest vertical edge inside the central band.

    Ties break toward the leftmost column, so a featureless image returns the
    band's first column.
    """
    img = luma(diptych)
    h, w = img.shape
    if w < 8:
        raise ContractViolation(f"seam detection needs width >= 8, got {w}")
    if h < 3:
        raise ContractViolation("seam detection needs height >= 3")
    lo_f, hi_f = band
    if not (0.0 < lo_f < hi_f < 1.0):
        raise ContractViolation(f"band {band} must satisfy 0 < lo < hi < 1")
    lo = int(round(w * lo_f))
    hi = int(round(w * hi_f))
    if hi <= lo:
        raise ContractViolation(f"band {band} is empty after rounding on width {w}")
    gx, _ = _sobel_responses(img)
    score = np.zeros(w, dtype=np.float64)
    score[1:-1] = np.abs(gx).sum(axis=0)
    return lo + int(np.argmax(score[lo:hi]))
