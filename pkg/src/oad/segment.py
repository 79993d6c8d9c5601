"""Cough event segmentation.

Audio is framed into short RMS frames, frames above a fraction of the
loudest frame are marked active, and active runs become events. Events
closer than ``max_gap`` seconds are grouped into episodes, and every event
is cut or padded into a fixed 0.5 s window.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import DataError

WINDOW_SECONDS = 0.5

KNOWN_CLASSES = ("healthy", "flu")
UNKNOWN_CLASSES = ("cc", "cb")
DISCOVERY_CLASSES = KNOWN_CLASSES + UNKNOWN_CLASSES


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("AudioClip samples must be one-dimensional")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"clip {self.clip_id!r} contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class EventBoundary:
    start_sample: int
    end_sample: int  # exclusive

    def __post_init__(self):
        if not 0 <= self.start_sample < self.end_sample:
            raise ValueError(f"invalid event [{self.start_sample}, {self.end_sample})")

    @property
    def length(self) -> int:
        return self.end_sample - self.start_sample


@dataclass
class Episode:
    events: list[EventBoundary]


@dataclass
class Window:
    samples: np.ndarray
    source_ref: tuple[str, int] = ("", 0)
    class_label: str | None = None
    user_id: str | None = None


@dataclass
class SegmentParams:
    frame_len: float = 0.020
    hop: float = 0.010
    rel_threshold: float = 0.1
    min_event_dur: float = 0.05
    intra_merge_gap: float = 0.2
    max_episode_gap: float = 2.0
    window: float = WINDOW_SECONDS
    min_remainder: float = 0.25
    sliding_classes: list[str] = field(default_factory=lambda: ["cb"])


def window_length(sample_rate: int, seconds: float = WINDOW_SECONDS) -> int:
    return int(np.floor(seconds * sample_rate + 0.5))


def load_audio(path) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float) as a mono clip."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (ValueError, OSError, EOFError, struct.error) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from None

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise DataError(f"{path}: zero-length audio stream")
    return AudioClip(samples, rate, clip_id=str(path))


def write_audio(path, samples, sample_rate: int, pcm16: bool = False):
    samples = np.asarray(samples, dtype=np.float64)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(Path(path), int(sample_rate), data)


def _frame_sizes(sample_rate, frame_len, hop):
    fl = max(1, int(round(frame_len * sample_rate)))
    hp = max(1, int(round(hop * sample_rate)))
    return fl, hp


def frame_energy(clip: AudioClip, frame_len: float = 0.020, hop: float = 0.010) -> np.ndarray:
    """RMS per frame; the trailing partial frame is dropped."""
    fl, hp = _frame_sizes(clip.sample_rate, frame_len, hop)
    n = len(clip.samples)
    if n < fl:
        raise DataError(f"clip has {n} samples, shorter than one {fl}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, fl)[::hp]
    return np.sqrt(np.mean(frames * frames, axis=1))


def _active_runs(active):
    edges = np.diff(np.concatenate([[0], active.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def extract_events(clip: AudioClip, params: SegmentParams | None = None) -> list[EventBoundary]:
    p = params or SegmentParams()
    if len(clip.samples) == 0:
        raise DataError("cannot extract events from an empty clip")
    fl, hp = _frame_sizes(clip.sample_rate, p.frame_len, p.hop)
    if len(clip.samples) < fl:
        return []
    rms = frame_energy(clip, p.frame_len, p.hop)
    peak = rms.max()
    if peak <= 0:
        return []
    active = rms > p.rel_threshold * peak

    n = len(clip.samples)
    spans = [[s * hp, min(e * hp + fl, n)] for s, e in _active_runs(active)]
    merge_gap = p.intra_merge_gap * clip.sample_rate
    merged = []
    for span in spans:
        if merged and span[0] - merged[-1][1] < merge_gap:
            merged[-1][1] = max(merged[-1][1], span[1])
        else:
            merged.append(span)
    min_len = p.min_event_dur * clip.sample_rate
    return [EventBoundary(s, e) for s, e in merged if e - s >= min_len]


def group_episodes(events, sample_rate: int, max_gap: float = 2.0) -> list[Episode]:
    """Group sorted events whose silent gap is at most ``max_gap`` seconds."""
    episodes: list[Episode] = []
    prev = None
    for ev in events:
        if prev is not None:
            if ev.start_sample < prev.end_sample:
                raise DataError("events must be sorted and non-overlapping")
            if (ev.start_sample - prev.end_sample) / sample_rate <= max_gap:
                episodes[-1].events.append(ev)
                prev = ev
                continue
        episodes.append(Episode([ev]))
        prev = ev
    return episodes


def standardize_window(samples, sample_rate: int, target: float = WINDOW_SECONDS) -> np.ndarray:
    """Pad short events with trailing zeros, centre-crop long ones."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise DataError("cannot standardize an empty event")
    n = window_length(sample_rate, target)
    if len(samples) < n:
        out = np.zeros(n)
        out[: len(samples)] = samples
        return out
    off = (len(samples) - n) // 2
    return samples[off : off + n].copy()


def event_windows(clip: AudioClip, params: SegmentParams | None = None, class_label=None,
                  user_id=None) -> list[Window]:
    p = params or SegmentParams()
    out = []
    for ev in extract_events(clip, p):
        seg = clip.samples[ev.start_sample : ev.end_sample]
        out.append(Window(standardize_window(seg, clip.sample_rate, p.window),
                          (clip.clip_id, ev.start_sample), class_label, user_id))
    return out


def slide_windows(clip: AudioClip, window: float = WINDOW_SECONDS, min_remainder: float = 0.25,
                  class_label=None, user_id=None) -> list[Window]:
    """Non-overlapping windows; a tail shorter than ``min_remainder`` s is dropped."""
    if len(clip.samples) == 0:
        raise DataError("cannot window an empty clip")
    n = window_length(clip.sample_rate, window)
    out = []
    for start in range(0, len(clip.samples), n):
        seg = clip.samples[start : start + n]
        if len(seg) < n and len(seg) < min_remainder * clip.sample_rate:
            break
        out.append(Window(standardize_window(seg, clip.sample_rate, window),
                          (clip.clip_id, start), class_label, user_id))
    return out
