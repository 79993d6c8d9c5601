"""Log-Mel spectrograms, RGB rendering and mean-RGB filtering."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError

DB_FLOOR = -80.0


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None  # None means Nyquist

    @property
    def top(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def to_dict(self):
        return asdict(self)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # n_mels x n_frames, dB in [-80, 0]
    params: MelParams


@dataclass
class SpectrogramImage:
    pixels: np.ndarray  # H x W x 3, uint8
    colormap_id: str = "viridis"


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_magnitude(samples, n_fft: int = 2048, hop: int = 512) -> np.ndarray:
    """Centred STFT magnitude, shape (n_fft // 2 + 1, 1 + len // hop)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 1:
        raise DataError("STFT needs at least one sample")
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    padded = np.pad(x, n_fft // 2, mode="reflect") if x.size > 1 else np.pad(x, n_fft // 2)
    n_frames = 1 + x.size // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(params: MelParams) -> np.ndarray:
    """Filter edge/centre frequencies, n_mels + 2 points equally spaced in Mel."""
    mels = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.top), params.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=16)
def _filterbank(params: MelParams) -> np.ndarray:
    if not 0 <= params.fmin < params.top <= params.sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got {params.fmin}, {params.top}")
    freqs = np.arange(params.n_fft // 2 + 1) * params.sample_rate / params.n_fft
    pts = mel_centers(params)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"n_mels={params.n_mels} too large for n_fft={params.n_fft}: "
                         f"filters {empty.tolist()} cover no FFT bin")
    fb.setflags(write=False)
    return fb


def mel_filterbank(params: MelParams | None = None) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    return _filterbank(params or MelParams())


def power_to_db(mel_power: np.ndarray) -> np.ndarray:
    peak = mel_power.max() if mel_power.size else 0.0
    if peak <= 0:
        return np.full(mel_power.shape, DB_FLOOR)
    db = 10.0 * np.log10(np.maximum(mel_power, peak * 1e-10) / peak)
    return np.clip(db, DB_FLOOR, 0.0)


def log_mel(samples, params: MelParams | None = None) -> MelSpectrogram:
    p = params or MelParams()
    mag = stft_magnitude(samples, p.n_fft, p.hop)
    return MelSpectrogram(power_to_db(mel_filterbank(p) @ (mag * mag)), p)


@lru_cache(maxsize=4)
def load_colormap(name: str = "viridis") -> np.ndarray:
    text = resources.files("oad").joinpath(f"data/colormap_{name}.txt").read_text()
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array(rows, dtype=np.uint8)
    table.setflags(write=False)
    return table


def db_to_index(values) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), DB_FLOOR, 0.0)
    return np.floor((v - DB_FLOOR) / -DB_FLOOR * 255 + 0.5).astype(np.intp)


def render_image(spec: MelSpectrogram, table: np.ndarray | None = None,
                 colormap_id: str = "viridis") -> SpectrogramImage:
    """Map dB to colormap rows; the lowest Mel band ends up in the bottom row."""
    if table is None:
        table = load_colormap(colormap_id)
    table = np.asarray(table, dtype=np.uint8)
    if table.shape != (256, 3):
        raise ValueError(f"colormap table must be 256x3, got {table.shape}")
    idx = db_to_index(spec.values)
    return SpectrogramImage(np.ascontiguousarray(table[idx][::-1]), colormap_id)


def mean_rgb(image) -> float:
    pixels = image.pixels if isinstance(image, SpectrogramImage) else np.asarray(image)
    if pixels.size == 0:
        raise ValueError("mean_rgb of an empty image")
    return float(pixels.mean(dtype=np.float64))


def filter_low_info(images, threshold: float = 70.0):
    """Split images into (kept, dropped); keep when mean RGB >= threshold."""
    kept, dropped = [], []
    for img in images:
        (kept if mean_rgb(img) >= threshold else dropped).append(img)
    return kept, dropped


# -- file formats ----------------------------------------------------------

def write_ppm(path, image):
    pixels = image.pixels if isinstance(image, SpectrogramImage) else np.asarray(image)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: not a binary 8-bit PPM")
    w, h = int(tokens[1]), int(tokens[2])
    raw = data[pos + 1 : pos + 1 + w * h * 3]
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated PPM")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_mels(path, spec):
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    n_mels, n_frames = values.shape
    with open(path, "wb") as fh:
        fh.write(b"MELS" + struct.pack("<II", n_mels, n_frames))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_mels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"MELS" or len(data) < 12:
        raise DataError(f"{path}: bad MELS header")
    n_mels, n_frames = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * n_mels * n_frames:
        raise DataError(f"{path}: truncated MELS body")
    return np.frombuffer(body, dtype="<f4").reshape(n_mels, n_frames).astype(np.float64)
