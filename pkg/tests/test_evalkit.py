import numpy as np
import pytest

from freqfill.datagen import _hsv_to_rgb, build_samples
from freqfill.embed import HistogramEmbedder
from freqfill.errors import ContractViolation
from freqfill.evalkit import (
    crop_to_mask,
    embed_sim,
    evaluate_pairs,
    ssim,
    ssim_full,
    ssim_hf,
)
from freqfill.spectral import HighPassConfig

_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2


def test_crop_full_mask_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((12, 15, 3))
    out = crop_to_mask(img, np.ones((12, 15), dtype=bool))
    assert np.array_equal(out, img)


def test_crop_single_pixel():
    img = np.arange(25.0).reshape(5, 5)
    m = np.zeros((5, 5), dtype=bool)
    m[3, 2] = True
    out = crop_to_mask(img, m)
    assert out.shape == (1, 1)
    assert out[0, 0] == img[3, 2]


def test_crop_box_offset_and_shape():
    img = np.random.default_rng(1).random((40, 40))
    m = np.zeros((40, 40), dtype=bool)
    m[3:13, 5:25] = True  # 10x20 box at (3, 5)
    out = crop_to_mask(img, m)
    assert out.shape == (10, 20)
    assert np.array_equal(out, img[3:13, 5:25])


def test_crop_requires_nonempty_mask():
    with pytest.raises(ContractViolation):
        crop_to_mask(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))


def test_ssim_self_is_one():
    img = np.random.default_rng(2).random((24, 24))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry():
    rng = np.random.default_rng(3)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_constant_pair_closed_form():
    a = np.full((20, 20), 0.2)
    b = np.full((20, 20), 0.8)
    # hand evaluation with zero variances
    expected = ((2 * 0.2 * 0.8 + _C1) * _C2) / ((0.2**2 + 0.8**2 + _C1) * _C2)
    assert abs(ssim(a, b) - expected) < 1e-9


def test_ssim_small_image_falls_back_to_global_window():
    rng = np.random.default_rng(4)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    res = ssim_full(a, b)
    assert res.global_fallback
    assert -1.0 <= res.value <= 1.0
    big = ssim_full(rng.random((16, 16)), rng.random((16, 16)))
    assert not big.global_fallback


def test_ssim_bounds_and_validation():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b = rng.random((14, 14)), rng.random((14, 14))
        assert -1.0 <= ssim(a, b) <= 1.0
    with pytest.raises(ContractViolation):
        ssim(np.zeros((4, 4)), np.zeros((5, 4)))
    with pytest.raises(ContractViolation):
        ssim(np.full((8, 8), 1.5), np.zeros((8, 8)))


def test_ssim_hf_equal_pair_is_one():
    img = np.random.default_rng(6).random((24, 24))
    assert ssim_hf(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_hf_invariant_to_global_offset():
    rng = np.random.default_rng(7)
    a = 0.25 + 0.4 * rng.random((24, 24))  # leaves headroom for the offset
    b = np.clip(a + 0.3, 0.0, 1.0)
    cfg = HighPassConfig(radius_fraction=0.1, normalize="minmax")
    assert abs(ssim_hf(a, b, cfg) - 1.0) < 1e-6
    assert ssim(a, b) < 1.0


def test_embed_sim_trivials():
    e = HistogramEmbedder()
    img = np.random.default_rng(8).random((16, 16, 3))
    assert embed_sim(img, img, e) == pytest.approx(1.0)

    class ZeroEmbedder:
        def embed(self, image):
            return np.zeros(4)

    assert embed_sim(img, img, ZeroEmbedder()) == 0.0


def test_embed_sim_disjoint_hue_palettes_score_low():
    e = HistogramEmbedder()

    def palette(h0, h1, axis):
        img = np.zeros((16, 16, 3))
        for y in range(16):
            for x in range(16):
                tpos = (y if axis == 0 else x) / 15
                img[y, x] = _hsv_to_rgb((h0 + (h1 - h0) * tpos) % 1.0, 0.9, 0.8)
        return img

    warm = palette(0.0, 0.49, 1)
    cool = palette(0.5, 0.99, 0)
    assert embed_sim(warm, cool, e) < 0.3


def test_embedder_swap_changes_score_not_schema():
    recs = build_samples(2, 41)
    pairs = [(r, r.gt) for r in recs]

    class MeanEmbedder:
        def embed(self, image):
            img = np.asarray(image)
            return np.array([img.mean(), img.std() + 1e-3])

    r1 = evaluate_pairs(pairs, embedder=HistogramEmbedder())
    r2 = evaluate_pairs(pairs, embedder=MeanEmbedder())
    assert {row.sample_id for row in r1.rows} == {row.sample_id for row in r2.rows}
    assert all(row.embed_sim is not None for row in r1.rows + r2.rows)


def test_evaluate_pairs_aggregates_are_row_means():
    recs = build_samples(3, 42)
    rng = np.random.default_rng(9)
    pairs = []
    for rec in recs:
        noisy = np.clip(rec.gt + 0.05 * rng.standard_normal(rec.gt.shape), 0, 1)
        noisy = noisy.astype(np.float32)
        pairs.append((rec, noisy))
    report = evaluate_pairs(pairs, embedder=HistogramEmbedder())
    assert report.mean_ssim == pytest.approx(np.mean([r.ssim for r in report.rows]))
    assert report.mean_ssim_hf == pytest.approx(np.mean([r.ssim_hf for r in report.rows]))
    for row in report.rows:
        assert -1.0 <= row.ssim <= 1.0
        assert -1.0 <= row.ssim_hf <= 1.0
    # protocol consistency: cropping first gives the same numbers
    pre_cropped = []
    for (rec, pred), row in zip(pairs, report.rows):
        a = crop_to_mask(pred, rec.mask)
        b = crop_to_mask(rec.gt, rec.mask)
        assert ssim(a, b) == pytest.approx(row.ssim, abs=1e-12)


def test_perfect_prediction_scores_one():
    recs = build_samples(2, 43)
    report = evaluate_pairs([(r, r.gt) for r in recs])
    assert report.mean_ssim == pytest.approx(1.0, abs=1e-9)
    assert report.mean_ssim_hf == pytest.approx(1.0, abs=1e-9)


def test_report_json_schema():
    recs = build_samples(1, 44)
    report = evaluate_pairs([(recs[0], recs[0].gt)])
    import json

    doc = json.loads(report.to_json())
    assert set(doc) == {"rows", "mean_ssim", "mean_ssim_hf", "mean_embed_sim"}
    assert doc["rows"][0]["sample_id"] == recs[0].sample_id
