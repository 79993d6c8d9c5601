"""Synthetic stand-ins for the cough/breath recordings and for embeddings.

Each class is band-limited noise around its own centre frequency, shaped by
a burst envelope (coughs) or a slow breathing modulation (``cb``). The
classes are meant to be easy to separate; realism is not a goal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .evalrun import ManifestRow, write_manifest
from .nncore import l2_normalize
from .segment import write_audio


@dataclass
class SynthClass:
    name: str
    center_hz: float
    bandwidth_hz: float
    n_users: int = 10
    recordings_per_user: int = 2
    events_per_recording: tuple[int, int] = (2, 3)
    attack: float = 0.02
    decay: float = 0.1
    tone_level: float = 0.0
    tone_ratio: float = 1.0
    snr_db: float = 35.0
    continuous: bool = False
    duration: float = 2.5  # continuous classes only
    breath_period: float = 1.25


def default_classes() -> list[SynthClass]:
    return [
        SynthClass("healthy", 1200.0, 400.0, decay=0.08),
        SynthClass("flu", 2000.0, 600.0, attack=0.03, decay=0.16, tone_level=0.6),
        SynthClass("cc", 3000.0, 1200.0, decay=0.12, tone_level=0.3, tone_ratio=0.5),
        SynthClass("cb", 500.0, 300.0, recordings_per_user=1, continuous=True),
    ]


@dataclass
class SynthSpec:
    classes: list[SynthClass] = field(default_factory=default_classes)
    sample_rate: int = 44100
    seed: int = 0
    gain_range: tuple[float, float] = (0.3, 0.9)
    pitch_jitter: float = 1.0  # semitones, per user
    gap_range: tuple[float, float] = (0.4, 1.0)
    lead: float = 0.3

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synth keys: {sorted(unknown)}")
        if "classes" in data:
            base = {c.name: c for c in default_classes()}
            out = []
            for c in data["classes"]:
                c = _tuples(dict(c))
                name = c.get("name")
                out.append(replace(base[name], **c) if name in base else SynthClass(**c))
            data["classes"] = out
        spec = cls(**_tuples(data))
        spec.validate()
        return spec

    def validate(self):
        centers = [c.center_hz for c in self.classes]
        if len(set(centers)) != len(centers):
            raise DataError("class centre frequencies must be distinct")
        for c in self.classes:
            if min(c.attack, c.decay, c.duration, c.bandwidth_hz) <= 0:
                raise DataError(f"class {c.name}: durations and bandwidth must be positive")
            if not 0 < c.center_hz < self.sample_rate / 2:
                raise DataError(f"class {c.name}: centre frequency outside (0, Nyquist)")

    def to_dict(self):
        return asdict(self)


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) and k != "classes" else v for k, v in d.items()}


def band_noise(n: int, center: float, bandwidth: float, sr: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec *= np.exp(-0.5 * ((f - center) / (bandwidth / 2)) ** 4)
    x = np.fft.irfft(spec, n)
    return x / (np.abs(x).max() + 1e-12)


def cough_burst(c: SynthClass, center: float, sr: int, rng) -> np.ndarray:
    dur = c.attack + 3 * c.decay
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    env = np.where(t < c.attack, t / c.attack, np.exp(-(t - c.attack) / c.decay))
    x = band_noise(n, center, c.bandwidth_hz, sr, rng)
    if c.tone_level:
        x = x + c.tone_level * np.sin(2 * np.pi * center * c.tone_ratio * t + rng.uniform(0, 2 * np.pi))
    return env * x


def breath(c: SynthClass, center: float, sr: int, rng) -> np.ndarray:
    n = int(round(c.duration * sr))
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * t / c.breath_period + phase)
    return env * band_noise(n, center, c.bandwidth_hz, sr, rng)


def synth_recording(c: SynthClass, spec: SynthSpec, center: float, gain: float, rng) -> np.ndarray:
    sr = spec.sample_rate
    if c.continuous:
        x = breath(c, center, sr, rng)
    else:
        parts = [np.zeros(int(spec.lead * sr))]
        for e in range(int(rng.integers(c.events_per_recording[0], c.events_per_recording[1] + 1))):
            if e:
                parts.append(np.zeros(int(rng.uniform(*spec.gap_range) * sr)))
            parts.append(cough_burst(c, center, sr, rng))
        parts.append(np.zeros(int(spec.lead * sr)))
        x = np.concatenate(parts)
    sig_rms = np.sqrt(np.mean(x[np.abs(x) > 0] ** 2))
    x = x + sig_rms * 10 ** (-c.snr_db / 20) * rng.standard_normal(len(x))
    return gain * x / np.abs(x).max()


def synth_dataset(spec: SynthSpec | None = None, out_dir=".") -> list[ManifestRow]:
    """Write WAV recordings plus ``manifest.csv`` into ``out_dir``."""
    spec = spec or SynthSpec()
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    rows = []
    for ci, c in enumerate(spec.classes):
        for u in range(c.n_users):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, ci, u]))
            gain = rng.uniform(*spec.gain_range)
            center = c.center_hz * 2 ** (rng.uniform(-1, 1) * spec.pitch_jitter / 12)
            user = f"{c.name}_u{u:02d}"
            for k in range(c.recordings_per_user):
                x = synth_recording(c, spec, center, gain, rng)
                path = out / "audio" / f"{user}_r{k}.wav"
                write_audio(path, x, spec.sample_rate, pcm16=True)
                rows.append(ManifestRow(str(path), c.name, user))
    write_manifest(out / "manifest.csv", rows)
    return rows


def synth_embeddings(n_per_class: int = 400, sigma: float = 0.15, seed: int = 0, dim: int = 16,
                     means=None):
    """Noisy unit vectors around class means; returns ``(X, y)`` with y in 0..3."""
    means = np.eye(dim)[:4] if means is None else np.asarray(means, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(means, axis=1) - 1) > 1e-9):
        raise ValueError("class means must be unit vectors")
    cos = means @ means.T
    np.fill_diagonal(cos, -1)
    if cos.max() > 0.5 + 1e-12:
        raise ValueError("class means must be at least 60 degrees apart")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    k, d = means.shape
    x = np.repeat(means, n_per_class, axis=0) + sigma * rng.standard_normal((k * n_per_class, d))
    return l2_normalize(x), np.repeat(np.arange(k), n_per_class)
