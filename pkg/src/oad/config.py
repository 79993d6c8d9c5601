"""Run configuration: one JSON file mirroring every stage's settings."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .evalrun import EvalConfig
from .features import MelParams
from .opencon import OpenConConfig
from .segment import SegmentParams
from .simclr import SimCLRConfig


@dataclass
class FeatureConfig:
    sample_rate: int = 44100
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    rgb_threshold: float = 70.0
    colormap: str = "viridis"

    def mel(self) -> MelParams:
        return MelParams(self.sample_rate, self.n_fft, self.hop, self.n_mels, self.fmin, self.fmax)


@dataclass
class RunConfig:
    segment: SegmentParams = field(default_factory=SegmentParams)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    simclr: SimCLRConfig = field(default_factory=SimCLRConfig)
    opencon: OpenConConfig = field(default_factory=OpenConConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _pos(v):
    return v > 0


def _unit(v):
    return 0 < v < 1


def _range(lo=-math.inf, hi=math.inf):
    def ok(v):
        return len(v) == 2 and lo <= v[0] <= v[1] <= hi
    return ok


CHECKS = {
    "segment.frame_len": (_pos, "must be > 0"),
    "segment.hop": (_pos, "must be > 0"),
    "segment.rel_threshold": (_unit, "must lie in (0, 1)"),
    "segment.min_event_dur": (lambda v: v >= 0, "must be >= 0"),
    "segment.intra_merge_gap": (lambda v: v >= 0, "must be >= 0"),
    "segment.max_episode_gap": (lambda v: v >= 0, "must be >= 0"),
    "segment.window": (_pos, "must be > 0"),
    "segment.min_remainder": (lambda v: v >= 0, "must be >= 0"),
    "features.sample_rate": (_pos, "must be > 0"),
    "features.n_fft": (lambda v: v >= 2 and not v & (v - 1), "must be a power of two"),
    "features.hop": (_pos, "must be > 0"),
    "features.n_mels": (_pos, "must be > 0"),
    "features.fmin": (lambda v: v >= 0, "must be >= 0"),
    "features.rgb_threshold": (lambda v: 0 <= v <= 255, "must lie in [0, 255]"),
    "augment.mode": (lambda v: v in ("ia", "aa"), "must be 'ia' or 'aa'"),
    "augment.crop_scale_range": (_range(1e-9, 1), "must be an ordered pair within (0, 1]"),
    "augment.crop_ratio_range": (_range(1e-9), "must be an ordered positive pair"),
    "augment.blur_sigma_range": (_range(1e-9), "must be an ordered positive pair"),
    "augment.pitch_semitone_range": (_range(-12, 12), "must be an ordered pair within [-12, 12]"),
    "augment.rt60_range": (_range(1e-9), "must be an ordered positive pair"),
    "augment.wet_mix": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "augment.ia_compose": (lambda v: v in ("both", "one-of"), "must be 'both' or 'one-of'"),
    "simclr.temperature": (_pos, "must be > 0"),
    "simclr.batch_size": (lambda v: v >= 2, "must be >= 2"),
    "simclr.epochs": (lambda v: v >= 0, "must be >= 0"),
    "simclr.lr": (_pos, "must be > 0"),
    "simclr.optimizer": (lambda v: v in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
    "opencon.n_known": (lambda v: v >= 1, "must be >= 1"),
    "opencon.n_unknown": (lambda v: v >= 0, "must be >= 0"),
    "opencon.label_fraction": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "opencon.temp_con": (_pos, "must be > 0"),
    "opencon.temp_proto": (_pos, "must be > 0"),
    "opencon.proto_momentum": (_unit, "must lie in (0, 1)"),
    "opencon.lambda_percentile": (lambda v: 0 <= v <= 100, "must lie in [0, 100]"),
    "opencon.epochs": (lambda v: v >= 0, "must be >= 0"),
    "opencon.batch_size": (lambda v: v >= 2, "must be >= 2"),
    "opencon.lr": (_pos, "must be > 0"),
    "opencon.optimizer": (lambda v: v in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
    "opencon.encoder_mode": (lambda v: v in ("finetune", "frozen"), "must be 'finetune' or 'frozen'"),
    "opencon.novel_init": (lambda v: v in ("kmeanspp", "random"), "must be 'kmeanspp' or 'random'"),
    "opencon.novel_pseudo_label": (lambda v: v in ("novel", "all"), "must be 'novel' or 'all'"),
    "eval.n_models": (lambda v: v >= 1, "must be >= 1"),
    "eval.n_subsets": (lambda v: v >= 1, "must be >= 1"),
    "eval.test_fraction": (_unit, "must lie in (0, 1)"),
    "eval.subset_mode": (lambda v: v in ("partition", "resample"), "must be 'partition' or 'resample'"),
}


def _coerce(value, default, path, problems):
    """Match the JSON value to the type of the default; record a problem on mismatch."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, (tuple, list)):
        if isinstance(value, list) and all(isinstance(x, (int, float, str)) and not isinstance(x, bool)
                                           for x in value):
            return type(default)(value)
    problems.append((path, f"expected {type(default).__name__}, got {json.dumps(value)}"))
    return default


def from_dict(data) -> RunConfig:
    """Build a RunConfig from nested dicts; all problems are reported together."""
    problems = []
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([("", "top level must be an object")])
    cfg = RunConfig()
    for key, value in data.items():
        if key not in SECTIONS:
            problems.append((key, "unknown section"))
            continue
        if not isinstance(value, dict):
            problems.append((key, "section must be an object"))
            continue
        section = getattr(cfg, key)
        names = {f.name for f in fields(section)}
        for k, v in value.items():
            path = f"{key}.{k}"
            if k not in names:
                problems.append((path, "unknown key"))
                continue
            setattr(section, k, _coerce(v, getattr(section, k), path, problems))
    problems += check(cfg, skip={p for p, _ in problems})
    if problems:
        raise ConfigError(problems)
    return cfg


def check(cfg: RunConfig, skip=()):
    problems = []
    for path, (ok, msg) in CHECKS.items():
        if path in skip:
            continue
        sec, key = path.split(".")
        try:
            good = ok(getattr(getattr(cfg, sec), key))
        except TypeError:
            good = False
        if not good:
            problems.append((path, msg))
    f = cfg.features
    top = f.sample_rate / 2 if f.fmax is None else f.fmax
    if "features.fmax" not in skip and not (f.fmin < top <= f.sample_rate / 2):
        problems.append(("features.fmax", "must satisfy fmin < fmax <= sample_rate / 2"))
    return problems


def validate_config(path) -> RunConfig:
    """Load and validate a JSON config file; an empty file yields all defaults."""
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError([("", f"cannot read {path}: {exc}")]) from None
    if not text.strip():
        return RunConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from None
    return from_dict(data)


def defaults_dict() -> dict:
    return RunConfig().to_dict()
