"""Structural similarity metrics and the masked-region evaluation protocol.

SSIM follows the standard windowed form (11x11 Gaussian, sigma 1.5,
K1=0.01, K2=0.03, dynamic range 1). The detail variant applies the circular
high-pass filter to both inputs first, so a shared global offset cannot
affect it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .embed import Embedder, cosine01
from .errors import ContractViolation
from .spectral import HighPassConfig, extract_hf, luma

Array = np.ndarray

_WINDOW = 11
_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
_L = 1.0
_C1 = (_K1 * _L) ** 2
_C2 = (_K2 * _L) ** 2


def _gauss1d() -> Array:
    x = np.arange(_WINDOW) - (_WINDOW - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * _SIGMA**2))
    return g / g.sum()


_G = _gauss1d()


def _filter_valid(img: Array) -> Array:
    """Separable Gaussian, valid region only."""
    h, w = img.shape
    tmp = np.zeros((h - _WINDOW + 1, w))
    for k in range(_WINDOW):
        tmp += _G[k] * img[k : h - _WINDOW + 1 + k, :]
    out = np.zeros((h - _WINDOW + 1, w - _WINDOW + 1))
    for k in range(_WINDOW):
        out += _G[k] * tmp[:, k : w - _WINDOW + 1 + k]
    return out


@dataclass
class SsimResult:
    value: float
    global_fallback: bool  # image smaller than the window: single global window


def ssim_full(a: Array, b: Array) -> SsimResult:
    x = luma(np.asarray(a, dtype=np.float64))
    y = luma(np.asarray(b, dtype=np.float64))
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) == 0:
        raise ContractViolation("empty image")
    if x.min() < -1e-6 or x.max() > 1 + 1e-6 or y.min() < -1e-6 or y.max() > 1 + 1e-6:
        raise ContractViolation("ssim expects values in [0, 1]")

    if min(x.shape) < _WINDOW:
        mu1, mu2 = x.mean(), y.mean()
        s1 = ((x - mu1) ** 2).mean()
        s2 = ((y - mu2) ** 2).mean()
        s12 = ((x - mu1) * (y - mu2)).mean()
        val = ((2 * mu1 * mu2 + _C1) * (2 * s12 + _C2)) / (
            (mu1**2 + mu2**2 + _C1) * (s1 + s2 + _C2)
        )
        return SsimResult(value=float(val), global_fallback=True)

    mu1 = _filter_valid(x)
    mu2 = _filter_valid(y)
    s1 = _filter_valid(x * x) - mu1 * mu1
    s2 = _filter_valid(y * y) - mu2 * mu2
    s12 = _filter_valid(x * y) - mu1 * mu2
    ssim_map = ((2 * mu1 * mu2 + _C1) * (2 * s12 + _C2)) / (
        (mu1**2 + mu2**2 + _C1) * (s1 + s2 + _C2)
    )
    return SsimResult(value=float(ssim_map.mean()), global_fallback=False)


def ssim(a: Array, b: Array) -> float:
    return ssim_full(a, b).value


def ssim_hf(a: Array, b: Array, cfg: HighPassConfig | None = None) -> float:
    """SSIM after high-pass filtering both images with the same settings."""
    cfg = cfg or HighPassConfig(radius_fraction=0.1, normalize="minmax")
    fa = extract_hf(luma(np.asarray(a, dtype=np.float64)), cfg)
    fb = extract_hf(luma(np.asarray(b, dtype=np.float64)), cfg)
    if cfg.normalize == "none":
        # raw maps may exceed [0,1]; fold them into range for the metric
        peak = max(fa.max(), fb.max(), 1e-12)
        fa, fb = fa / peak, fb / peak
    return ssim(fa, fb)


def embed_sim(a: Array, b: Array, embedder: Embedder) -> float:
    score, _ = cosine01(embedder.embed(a), embedder.embed(b))
    return score


def crop_to_mask(image: Array, mask: Array) -> Array:
    """Tight bounding-box crop of the masked region."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ContractViolation("crop_to_mask needs a non-empty mask")
    rows = np.where(m.any(axis=1))[0]
    cols = np.where(m.any(axis=0))[0]
    return np.asarray(image)[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


@dataclass
class EvalRow:
    sample_id: str
    ssim: float
    ssim_hf: float
    embed_sim: float | None = None
    ssim_global_fallback: bool = False


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    mean_ssim: float = 0.0
    mean_ssim_hf: float = 0.0
    mean_embed_sim: float | None = None

    def finalize(self) -> "EvalReport":
        if self.rows:
            self.mean_ssim = float(np.mean([r.ssim for r in self.rows]))
            self.mean_ssim_hf = float(np.mean([r.ssim_hf for r in self.rows]))
            sims = [r.embed_sim for r in self.rows if r.embed_sim is not None]
            self.mean_embed_sim = float(np.mean(sims)) if sims else None
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate_pairs(
    pairs: list[tuple],
    hp_cfg: HighPassConfig | None = None,
    embedder: Embedder | None = None,
) -> EvalReport:
    """Masked-region protocol: crop each prediction and its ground truth to the
    mask box, then score the crops. ``pairs`` holds (record, predicted_image).
    """
    report = EvalReport()
    for rec, pred in pairs:
        crop_pred = crop_to_mask(pred, rec.mask)
        crop_gt = crop_to_mask(rec.gt, rec.mask)
        res = ssim_full(crop_pred, crop_gt)
        row = EvalRow(
            sample_id=rec.sample_id,
            ssim=res.value,
            ssim_hf=ssim_hf(crop_pred, crop_gt, hp_cfg),
            ssim_global_fallback=res.global_fallback,
        )
        if embedder is not None:
            row.embed_sim = embed_sim(crop_pred, rec.product, embedder)
        report.rows.append(row)
    return report.finalize()
