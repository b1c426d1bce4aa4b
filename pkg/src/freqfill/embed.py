"""Pluggable image-embedding interface with a deterministic toy embedder."""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .spectral import _sobel_responses, luma

Array = np.ndarray


class Embedder(Protocol):
    def embed(self, image: Array) -> Array: ...


class HistogramEmbedder:
    """64-dim color+gradient histogram: 48 chroma-weighted hue bins plus 16
    gradient-orientation bins weighted by edge magnitude.

    Hue bins are weighted by chroma so flat backgrounds contribute little; a
    tight object crop and the same object on a plain field then embed close
    together, while palettes from opposite halves of the wheel anti-correlate
    once the blocks are centered.
    """

    def embed(self, image: Array) -> Array:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        hi = img.max(axis=2)
        lo = img.min(axis=2)
        chroma = hi - lo
        # hue in [0, 1): standard hexagonal projection
        r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
        hue = np.zeros_like(hi)
        nz = chroma > 1e-12
        rmax = nz & (hi == r)
        gmax = nz & (hi == g) & ~rmax
        bmax = nz & ~rmax & ~gmax
        hue[rmax] = (((g - b)[rmax] / chroma[rmax]) % 6.0) / 6.0
        hue[gmax] = (((b - r)[gmax] / chroma[gmax]) + 2.0) / 6.0
        hue[bmax] = (((r - g)[bmax] / chroma[bmax]) + 4.0) / 6.0

        hbin = np.clip((hue * 48).astype(int), 0, 47).reshape(-1)
        color = np.bincount(hbin, weights=chroma.reshape(-1), minlength=48)[:48]
        total = color.sum()
        if total > 0:
            color /= total

        grad = np.zeros(16)
        if img.shape[0] >= 3 and img.shape[1] >= 3:
            gx, gy = _sobel_responses(luma(img))
            mag = np.hypot(gx, gy).reshape(-1)
            ang = np.arctan2(gy, gx).reshape(-1)
            bins = np.clip(((ang + np.pi) / (2 * np.pi) * 16).astype(int), 0, 15)
            grad = np.bincount(bins, weights=mag, minlength=16)[:16]
            gtotal = grad.sum()
            if gtotal > 0:
                grad = grad / gtotal
        # center each block so cosine acts as a correlation: unrelated color
        # distributions can score negative instead of piling up near zero;
        # the gradient block is down-weighted so hue carries the decision
        if color.any():
            color -= color.mean()
            n = np.linalg.norm(color)
            if n > 0:
                color /= n
        if grad.any():
            grad -= grad.mean()
            n = np.linalg.norm(grad)
            if n > 0:
                grad = grad * (0.35 / n)
        return np.concatenate([color, grad])


def cosine01(a: Array, b: Array) -> tuple[float, bool]:
    """Cosine similarity mapped from [-1, 1] to [0, 1]; zero vectors score 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    cos = float(np.dot(a, b) / (na * nb))
    return (np.clip(cos, -1.0, 1.0) + 1.0) / 2.0, False
