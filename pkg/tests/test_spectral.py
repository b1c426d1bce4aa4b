import numpy as np
import pytest
from oracles import oracle_dft2, oracle_highpass

from freqfill import tensor as T
from freqfill.errors import ContractViolation
from freqfill.spectral import (
    HighPassConfig,
    SpectrumGrid,
    dft2,
    extract_hf,
    extract_hf_adjoint,
    extract_hf_op,
    fftshift,
    idft2,
    ifftshift,
    luma,
    sobel_magnitude,
    sobel_seam,
)
from freqfill.tensor import Tensor, grad_check


def test_dft_constant_image():
    f = dft2(np.full((4, 4), 0.7)).values
    assert abs(f[0, 0] - 16 * 0.7) < 1e-9
    rest = f.reshape(-1)[1:]
    assert np.abs(rest).max() < 1e-9


def test_dft_cosine_spikes():
    w = 8
    img = np.cos(2 * np.pi * np.arange(w) / w)[None, :].repeat(8, axis=0)
    f = dft2(img).values
    mag = np.abs(f)
    assert abs(mag[0, 1] - 32.0) < 1e-9
    assert abs(mag[0, 7] - 32.0) < 1e-9
    mask = np.ones_like(mag, dtype=bool)
    mask[0, 1] = mask[0, 7] = False
    assert mag[mask].max() < 1e-8
    # agrees with the quadruple-loop oracle
    ref = oracle_dft2(img)
    assert np.abs(f - ref).max() / np.abs(ref).max() < 1e-10


def test_roundtrip_random():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16))
    rec = idft2(dft2(img)).real
    assert np.abs(rec - img).max() < 1e-6


@pytest.mark.parametrize("shape", [(8, 8), (16, 16), (8, 16), (8, 12), (7, 16), (6, 10)])
def test_fast_path_matches_direct(shape):
    rng = np.random.default_rng(shape[0] * 31 + shape[1])
    img = rng.random(shape)
    fast = dft2(img).values
    direct = dft2(img, force_direct=True).values
    assert np.abs(fast - direct).max() / np.abs(direct).max() < 1e-5


def test_dft_rejects_empty():
    with pytest.raises(ContractViolation):
        dft2(np.zeros((0, 4)))


def test_fftshift_moves_dc():
    f = dft2(np.full((4, 4), 1.0))
    shifted = fftshift(f)
    hot = np.argwhere(np.abs(shifted.values) > 1)
    assert hot.tolist() == [[2, 2]]


@pytest.mark.parametrize("shape", [(4, 4), (5, 5), (1, 1), (5, 8), (3, 6)])
def test_shift_roundtrip(shape):
    rng = np.random.default_rng(1)
    spec = SpectrumGrid(rng.random(shape) + 1j * rng.random(shape))
    back = ifftshift(fftshift(spec))
    assert np.array_equal(back.values, spec.values)


def test_fftshift_one_by_one_is_identity():
    spec = SpectrumGrid(np.array([[3.0 + 1j]]))
    assert np.array_equal(fftshift(spec).values, spec.values)


def test_conjugate_symmetry():
    rng = np.random.default_rng(2)
    img = rng.random((12, 10))
    f = dft2(img).values
    h, w = f.shape
    worst = 0.0
    for u in range(h):
        for v in range(w):
            worst = max(worst, abs(f[u, v] - np.conj(f[(h - u) % h, (w - v) % w])))
    assert worst / np.abs(f).max() < 1e-5


def test_parseval():
    rng = np.random.default_rng(3)
    img = rng.random((16, 16))
    f = dft2(img).values
    lhs = (img**2).sum()
    rhs = (np.abs(f) ** 2).sum() / img.size
    assert abs(lhs - rhs) / lhs < 1e-5


def test_hf_constant_image_vanishes():
    cfg = HighPassConfig(radius_fraction=0.5, normalize="none")
    out = extract_hf(np.full((8, 8), 0.5), cfg)
    assert cfg.radius(8, 8) >= 1
    assert out.max() < 1e-6


def test_hf_zero_radius_is_identity():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8))
    out = extract_hf(img, HighPassConfig(radius_fraction=0.0, normalize="none"))
    assert np.array_equal(out, img)


def test_hf_impulse_matches_oracle():
    img = np.zeros((8, 8))
    img[4, 4] = 1.0
    cfg = HighPassConfig(radius_fraction=0.5, normalize="none")
    got = extract_hf(img, cfg)
    ref = oracle_highpass(img, cfg.radius(8, 8))
    assert np.abs(got - ref).max() < 1e-6


def test_hf_prenorm_output_is_real():
    # the centered disc commutes with conjugate symmetry
    from freqfill.spectral import _dft2_raw, _hp_mask, _idft2_raw, _shift2

    rng = np.random.default_rng(5)
    for shape in [(8, 8), (9, 7), (6, 9)]:
        img = rng.random(shape)
        f = _dft2_raw(img)
        fh = _shift2(f, +1) * _hp_mask(shape[0], shape[1], 2)
        pre = _idft2_raw(_shift2(fh, -1))
        assert np.abs(pre.imag).max() < 1e-6


def test_hf_energy_monotone_in_radius():
    rng = np.random.default_rng(6)
    for _ in range(5):
        img = rng.random((16, 16))
        energies = []
        for rf in [0.0, 0.1, 0.2, 0.35, 0.5, 0.8]:
            out = extract_hf(img, HighPassConfig(radius_fraction=rf, normalize="none"))
            energies.append((out**2).sum())
        for lo, hi in zip(energies[1:], energies[:-1]):
            assert lo <= hi + 1e-9


def test_hf_highlights_glyphs_better_than_sobel():
    # fine glyph texture over a smooth, band-limited gradient field: the
    # spectral filter removes the field while the edge detector responds to
    # its slope everywhere
    rng = np.random.default_rng(7)
    yy, xx = np.mgrid[0:32, 0:32]
    img = 0.45 + 0.25 * np.sin(2 * np.pi * yy / 32) * np.cos(2 * np.pi * xx / 32)
    glyph = np.zeros((32, 32), dtype=bool)
    glyph[8:24, 8:24] = rng.random((16, 16)) > 0.5
    img[glyph] = 1.0
    region = np.zeros((32, 32), dtype=bool)
    region[8:24, 8:24] = True

    def ratio(m):
        return (m[region] ** 2).sum() / max((m[~region] ** 2).sum(), 1e-12)

    for rf in (0.1, 0.2, 0.3):
        hf = extract_hf(img, HighPassConfig(radius_fraction=rf, normalize="none"))
        assert ratio(hf) > ratio(sobel_magnitude(img))


def test_hf_minmax_mode():
    rng = np.random.default_rng(8)
    img = rng.random((8, 8))
    out = extract_hf(img, HighPassConfig(radius_fraction=0.3, normalize="minmax"))
    assert out.min() == 0.0 and abs(out.max() - 1.0) < 1e-12
    # constant output maps to all-zeros
    flat = extract_hf(np.full((8, 8), 0.25), HighPassConfig(radius_fraction=0.5, normalize="minmax"))
    assert np.array_equal(flat, np.zeros((8, 8)))


def test_hf_rejects_color_input():
    with pytest.raises(ContractViolation):
        extract_hf(np.zeros((4, 4, 3)), HighPassConfig(0.1, "none"))


def test_adjoint_grad_check():
    rng = np.random.default_rng(9)
    img = Tensor(rng.random((8, 8)), dtype=np.float64)
    cfg = HighPassConfig(radius_fraction=0.5, normalize="none")
    err = grad_check(lambda x: T.sum_(extract_hf_op(x, cfg)), [img])
    assert err < 1e-4


def test_adjoint_zero_upstream():
    rng = np.random.default_rng(10)
    img = rng.random((8, 8))
    cfg = HighPassConfig(radius_fraction=0.5, normalize="none")
    out = extract_hf_adjoint(np.zeros((8, 8)), img, cfg)
    assert np.abs(out).max() < 1e-12


def test_adjoint_zero_radius_positive_image():
    rng = np.random.default_rng(11)
    up = rng.random((6, 6))
    img = rng.random((6, 6)) + 0.1  # strictly positive
    out = extract_hf_adjoint(up, img, HighPassConfig(radius_fraction=0.0, normalize="none"))
    assert np.array_equal(out, up)


def test_adjoint_requires_raw_mode():
    with pytest.raises(ContractViolation):
        extract_hf_adjoint(np.zeros((4, 4)), np.zeros((4, 4)), HighPassConfig(0.1, "minmax"))


def test_seam_two_constant_halves():
    img = np.full((20, 1024), 0.2)
    img[:, 512:] = 0.8
    seam = sobel_seam(img)
    assert abs(seam - 512) <= 1


def test_seam_tie_returns_leftmost_band_column():
    img = np.full((16, 64), 0.5)
    assert sobel_seam(img) == round(64 * 0.4)


def test_seam_band_limitation_documented():
    # a true seam outside the band cannot be found; the result stays in band
    img = np.full((20, 1024), 0.2)
    img[:, 300:] = 0.8
    seam = sobel_seam(img, band=(0.4, 0.6))
    assert round(1024 * 0.4) <= seam < round(1024 * 0.6)
    assert seam != 300


def test_seam_contract_violations():
    with pytest.raises(ContractViolation):
        sobel_seam(np.zeros((10, 4)))
    with pytest.raises(ContractViolation):
        sobel_seam(np.zeros((10, 64)), band=(0.5, 0.5))


def test_luma_weights():
    img = np.zeros((2, 2, 3))
    img[:, :, 0] = 1.0
    assert np.allclose(luma(img), 0.299)
