"""View-pair augmentation in two orders.

``IA`` renders the spectrogram image once and perturbs the image
(random resized crop, Gaussian blur). ``AA`` perturbs the waveform
(pitch shift, synthetic room reverb) and featurizes each view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .features import MelParams, MelSpectrogram, log_mel, render_image, SpectrogramImage

MODES = ("ia", "aa")


@dataclass
class AugmentConfig:
    mode: str = "aa"
    crop_scale_range: tuple[float, float] = (0.6, 0.9)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    pitch_semitone_range: tuple[float, float] = (-2.0, 2.0)
    rt60_range: tuple[float, float] = (0.1, 0.4)
    wet_mix: float = 0.5
    ia_compose: str = "both"  # or "one-of"


@dataclass
class ViewPair:
    view_a: MelSpectrogram | SpectrogramImage
    view_b: MelSpectrogram | SpectrogramImage
    origin: object = None


def derive_rng(*key) -> np.random.Generator:
    """Generator keyed by (global_seed, epoch, sample_index, view_index, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- image ops ---------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an H x W x C array (float output)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    fy = fy[:, None, None] if img.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if img.ndim == 3 else fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _to_bytes(arr):
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def crop_box(h, w, scale_range, ratio_range, rng, attempts=10):
    area = h * w
    log_r = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*scale_range)
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def random_crop_resize(image, scale_range=(0.6, 0.9), rng=None,
                       ratio_range=(3 / 4, 4 / 3)) -> np.ndarray:
    pixels = image.pixels if isinstance(image, SpectrogramImage) else np.asarray(image)
    rng = rng if rng is not None else np.random.default_rng()
    h, w = pixels.shape[:2]
    top, left, ch, cw = crop_box(h, w, scale_range, ratio_range, rng)
    crop = pixels[top : top + ch, left : left + cw]
    return _to_bytes(bilinear_resize(crop, h, w))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable blur with edge clamping; rounds back to bytes."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pixels = image.pixels if isinstance(image, SpectrogramImage) else np.asarray(image)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    img = np.asarray(pixels, dtype=np.float64)
    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="edge")
    img = sum(k[i] * padded[i : i + img.shape[0]] for i in range(len(k)))
    padded = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="edge")
    img = sum(k[i] * padded[:, i : i + img.shape[1]] for i in range(len(k)))
    return _to_bytes(img)


# -- audio ops ---------------------------------------------------------------

def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Centre-truncate or zero-pad at the end to exactly ``n`` samples."""
    if len(x) >= n:
        off = (len(x) - n) // 2
        return x[off : off + n].copy()
    out = np.zeros(n)
    out[: len(x)] = x
    return out


def pitch_shift(samples, semitones: float) -> np.ndarray:
    """Shift all frequencies by 2**(semitones/12) by linear-interp resampling."""
    if abs(semitones) > 12:
        raise ValueError("pitch shift limited to +/-12 semitones")
    x = np.asarray(samples, dtype=np.float64)
    if semitones == 0:
        return x.copy()
    step = 2.0 ** (semitones / 12.0)
    n_out = max(1, int(round(len(x) / step)))
    pos = np.arange(n_out) * step
    pos = pos[pos <= len(x) - 1]
    y = np.interp(pos, np.arange(len(x)), x)
    return fit_length(y, len(x))


def reverb_impulse(rt60: float, sample_rate: int, rng) -> np.ndarray:
    if rt60 <= 0:
        raise ValueError("rt60 must be positive")
    n = max(1, int(round(rt60 * sample_rate)))
    h = rng.standard_normal(n) * np.exp(-6.908 * np.arange(n) / (rt60 * sample_rate))
    h[0] = 1.0
    return h


def room_reverb(samples, rt60: float, wet_mix: float, rng, sample_rate: int = 44100) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if wet_mix == 0:
        return x.copy()
    h = reverb_impulse(rt60, sample_rate, rng)
    wet = fftconvolve(x, h)[: len(x)]
    out = (1 - wet_mix) * x + wet_mix * wet
    peak_in, peak_out = np.abs(x).max(), np.abs(out).max()
    if peak_out > 0:
        out *= peak_in / peak_out
    return out


# -- view pairs ----------------------------------------------------------------

def augment_image(image, config: AugmentConfig, rng) -> np.ndarray:
    pixels = image.pixels if isinstance(image, SpectrogramImage) else image
    ops = ["crop", "blur"]
    if config.ia_compose == "one-of":
        ops = [ops[int(rng.integers(0, 2))]]
    out = pixels
    if "crop" in ops:
        out = random_crop_resize(out, config.crop_scale_range, rng, config.crop_ratio_range)
    if "blur" in ops:
        out = gaussian_blur(out, rng.uniform(*config.blur_sigma_range))
    return out


def augment_audio(samples, config: AugmentConfig, rng, sample_rate: int) -> np.ndarray:
    y = pitch_shift(samples, rng.uniform(*config.pitch_semitone_range))
    return room_reverb(y, rng.uniform(*config.rt60_range), config.wet_mix, rng, sample_rate)


def augment_view(samples, config: AugmentConfig, rng, mel: MelParams, image=None):
    """One stochastic view; ``image`` may carry a pre-rendered IA image."""
    if config.mode == "ia":
        if image is None:
            image = render_image(log_mel(samples, mel))
        return SpectrogramImage(augment_image(image, config, rng))
    return log_mel(augment_audio(samples, config, rng, mel.sample_rate), mel)


def make_view_pair(window, config: AugmentConfig, seed, mel: MelParams | None = None) -> ViewPair:
    """Two independent views of one window.

    ``seed`` is an int or a tuple such as ``(global_seed, epoch, index)``; the
    view index is appended to derive each view's generator.
    """
    mel = mel or MelParams()
    samples = window.samples if hasattr(window, "samples") else window
    key = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    image = render_image(log_mel(samples, mel)) if config.mode == "ia" else None
    views = [augment_view(samples, config, derive_rng(*key, v), mel, image) for v in (0, 1)]
    return ViewPair(views[0], views[1], window)


def view_to_input(view) -> np.ndarray:
    """Network input (C x H x W, float) for a spectrogram or image view."""
    if isinstance(view, MelSpectrogram):
        return (view.values / 40.0 + 1.0)[None]
    pixels = view.pixels if isinstance(view, SpectrogramImage) else np.asarray(view)
    return np.transpose(pixels, (2, 0, 1)).astype(np.float64) / 255.0
