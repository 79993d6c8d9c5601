import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.signal import convolve2d

from oad.augment import (AugmentConfig, bilinear_resize, derive_rng, fit_length, gaussian_blur,
                         gaussian_kernel, make_view_pair, pitch_shift, random_crop_resize,
                         reverb_impulse, room_reverb, view_to_input)
from oad.features import MelParams, MelSpectrogram, SpectrogramImage
from oracles import naive_stft_magnitude

SR = 44100
images = st.integers(0, 2**31 - 1).map(
    lambda s: np.random.default_rng(s).integers(0, 256, (16, 12, 3), dtype=np.uint8))


def peak_bin(x):
    return int(naive_stft_magnitude(x[:8192], 2048, 2048)[:, 1:3].mean(axis=1).argmax())


# -- image ops -------------------------------------------------------------------

def test_full_crop_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (64, 44, 3), dtype=np.uint8)
    out = random_crop_resize(img, (1.0, 1.0), derive_rng(1), ratio_range=(44 / 64, 44 / 64))
    assert out.tobytes() == img.tobytes()


def test_bilinear_identity_and_constant():
    img = np.random.default_rng(1).random((7, 5, 3))
    np.testing.assert_allclose(bilinear_resize(img, 7, 5), img)
    np.testing.assert_allclose(bilinear_resize(np.full((3, 4, 3), 9.0), 10, 11), 9.0)


def test_bilinear_half_pixel_upsample():
    row = np.array([[0.0, 4.0]])[..., None]
    out = bilinear_resize(row, 1, 4)[0, :, 0]
    # output centres map to source x = -0.25, 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])


@given(st.integers(0, 255), st.integers(0, 2**31 - 1))
def test_crop_of_constant_is_constant(c, seed):
    img = np.full((20, 30, 3), c, np.uint8)
    assert (random_crop_resize(img, (0.3, 0.9), derive_rng(seed)) == c).all()


@given(images, st.integers(0, 2**31 - 1))
def test_crop_preserves_shape_and_is_seeded(img, seed):
    a = random_crop_resize(img, (0.5, 0.9), derive_rng(seed))
    b = random_crop_resize(img, (0.5, 0.9), derive_rng(seed))
    assert a.shape == img.shape and a.dtype == np.uint8
    assert a.tobytes() == b.tobytes()


def test_kernel_radius_and_sum():
    k = gaussian_kernel(1.0)
    assert len(k) == 7 and k.sum() == pytest.approx(1.0)


def test_blur_single_pixel_matches_2d_convolution():
    img = np.zeros((15, 15, 3))
    img[7, 7] = 255.0
    k = gaussian_kernel(1.0)
    k2 = np.outer(k, k)
    oracle = convolve2d(img[..., 0], k2, mode="same")
    out = gaussian_blur(img.astype(np.uint8), 1.0)
    assert abs(int(out[7, 7, 0]) - round(255 * k2[3, 3])) <= 1
    assert np.abs(out[..., 0].astype(float) - oracle).max() <= 0.5 + 1e-9


def test_blur_preserves_constant_and_mean():
    const = np.full((10, 10, 3), 77, np.uint8)
    assert (gaussian_blur(const, 1.3) == 77).all()
    img = np.random.default_rng(4).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    delta = np.abs(gaussian_blur(img, 1.0).mean(axis=(0, 1)) - img.mean(axis=(0, 1)))
    assert (delta <= 1.0).all()


@given(images, st.floats(0.3, 3.0))
def test_blur_never_raises_channel_max(img, sigma):
    out = gaussian_blur(img, sigma)
    assert out.shape == img.shape
    assert (out.max(axis=(0, 1)) <= img.max(axis=(0, 1))).all()


# -- audio ops -------------------------------------------------------------------

def test_fit_length():
    np.testing.assert_array_equal(fit_length(np.arange(10.0), 4), [3, 4, 5, 6])
    np.testing.assert_array_equal(fit_length(np.ones(3), 5), [1, 1, 1, 0, 0])


def test_pitch_zero_is_identity():
    x = np.random.default_rng(0).standard_normal(1000)
    np.testing.assert_array_equal(pitch_shift(x, 0.0), x)


def test_octave_up_doubles_frequency():
    x = np.sin(2 * np.pi * 440 * np.arange(22050) / SR)
    y = pitch_shift(x, 12.0)
    assert len(y) == 22050
    b440, b880 = round(440 * 2048 / SR), round(880 * 2048 / SR)
    assert abs(peak_bin(x) - b440) <= 1
    assert abs(peak_bin(y) - b880) <= 1


@given(st.floats(-4.0, 4.0), st.floats(300.0, 3000.0))
def test_pitch_roundtrip_restores_peak(semitones, f):
    x = np.sin(2 * np.pi * f * np.arange(22050) / SR)
    back = pitch_shift(pitch_shift(x, semitones), -semitones)
    assert abs(peak_bin(back) - peak_bin(x)) <= 1


def test_dry_reverb_is_identity():
    x = np.random.default_rng(0).standard_normal(500)
    np.testing.assert_array_equal(room_reverb(x, 0.3, 0.0, derive_rng(0)), x)


def test_impulse_through_wet_reverb_is_the_response():
    x = np.zeros(4000)
    x[0] = 1.0
    y = room_reverb(x, 0.05, 1.0, derive_rng(9))
    h = fit_length(reverb_impulse(0.05, SR, derive_rng(9)), 4000)
    np.testing.assert_allclose(y, h / np.abs(h).max(), atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5), st.floats(0.0, 1.0))
def test_reverb_keeps_peak_and_length(seed, rt60, wet):
    x = np.random.default_rng(seed).uniform(-0.7, 0.7, 3000)
    y = room_reverb(x, rt60, wet, derive_rng(seed))
    assert len(y) == len(x)
    assert abs(np.abs(y).max() - np.abs(x).max()) < 1e-6


# -- view pairs ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["ia", "aa"])
def test_view_pair_deterministic_and_distinct(mode):
    x = np.random.default_rng(2).standard_normal(22050) * 0.3
    cfg = AugmentConfig(mode=mode)
    a = make_view_pair(x, cfg, (7, 0, 3))
    b = make_view_pair(x, cfg, (7, 0, 3))
    va = view_to_input(a.view_a)
    assert va.tobytes() == view_to_input(b.view_a).tobytes()
    assert view_to_input(a.view_b).tobytes() == view_to_input(b.view_b).tobytes()
    assert not np.array_equal(va, view_to_input(a.view_b))
    assert va.shape == ((3, 64, 44) if mode == "ia" else (1, 64, 44))


def test_silent_window_aa_views_are_floor():
    pair = make_view_pair(np.zeros(22050), AugmentConfig(mode="aa"), 0)
    for v in (pair.view_a, pair.view_b):
        assert isinstance(v, MelSpectrogram) and (v.values == -80).all()


def test_one_of_compose_keeps_image_shape():
    img = np.random.default_rng(0).integers(0, 256, (64, 44, 3), dtype=np.uint8)
    cfg = AugmentConfig(mode="ia", ia_compose="one-of")
    x = np.zeros(22050)
    x[:100] = 1
    pair = make_view_pair(x, cfg, 3)
    assert isinstance(pair.view_a, SpectrogramImage)
    assert pair.view_a.pixels.shape == img.shape


def test_view_to_input_scaling():
    spec = MelSpectrogram(np.array([[-80.0, -40.0, 0.0]]), MelParams())
    np.testing.assert_allclose(view_to_input(spec), [[[-1.0, 0.0, 1.0]]])
    img = np.full((2, 2, 3), 255, np.uint8)
    np.testing.assert_allclose(view_to_input(img), 1.0)
