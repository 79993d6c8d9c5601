"""File-level stages used by the command line: each reads and writes directories."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import RunConfig
from .errors import DataError
from .evalrun import (ManifestRow, TrialReport, class_index, emit_report, mask_labels,
                      read_manifest, run_trials)
from .features import filter_low_info, log_mel, render_image, write_mels, write_ppm
from .nncore import Checkpoint, load_checkpoint, save_checkpoint
from .opencon import EncoderBackbone, LabelState, assign, discover
from .segment import event_windows, load_audio, slide_windows, write_audio
from .simclr import checkpoint_settings, model_from_checkpoint, pretrain

log = logging.getLogger(__name__)

INDEX_COLUMNS = ["window_path", "source_path", "class", "user_id", "start_sample"]


def _pmap(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _rel(path, base):
    """Path relative to ``base`` so an index stays valid when its directory tree moves."""
    if not path:
        return path
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def _write_index(path, rows, base):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_COLUMNS)
        for r in rows:
            w.writerow([_rel(r.path, base), _rel(r.source_path, base), r.cls, r.user_id, r.start_sample])


def segment_manifest(manifest, out_dir, cfg: RunConfig | None = None, threads: int = 1):
    """Cut every recording into 0.5 s windows; writes WAVs and ``index.csv``."""
    cfg = cfg or RunConfig()
    p = cfg.segment
    rows = read_manifest(manifest)
    out = Path(out_dir)
    (out / "windows").mkdir(parents=True, exist_ok=True)

    def one(row):
        clip = load_audio(row.path)
        if clip.sample_rate != cfg.features.sample_rate:
            raise DataError(f"{row.path}: sample rate {clip.sample_rate} != configured "
                            f"{cfg.features.sample_rate} (resampling is not supported)")
        if row.cls in p.sliding_classes:
            return slide_windows(clip, p.window, p.min_remainder, row.cls, row.user_id)
        return event_windows(clip, p, row.cls, row.user_id)

    results = _pmap(one, rows, threads)
    index = []
    for row, wins in zip(rows, results):
        stem = Path(row.path).stem
        for w in wins:
            path = out / "windows" / f"{stem}_{w.source_ref[1]:09d}.wav"
            write_audio(path, w.samples, cfg.features.sample_rate)
            index.append(ManifestRow(str(path), row.cls, row.user_id, start_sample=w.source_ref[1],
                                     source_path=row.path))
    _write_index(out / "index.csv", index, out)
    return index


def load_windows(rows, sample_rate=None):
    out = []
    for r in rows:
        clip = load_audio(r.path)
        if sample_rate is not None and clip.sample_rate != sample_rate:
            raise DataError(f"{r.path}: sample rate {clip.sample_rate} != {sample_rate}")
        out.append(clip.samples)
    lengths = {len(w) for w in out}
    if len(lengths) > 1:
        raise DataError(f"windows differ in length: {sorted(lengths)}")
    return out


def featurize_dir(in_dir, out_dir, cfg: RunConfig | None = None, threads: int = 1):
    """Render spectrogram images, drop low-information windows, write ``index.csv`` of kept ones."""
    cfg = cfg or RunConfig()
    in_dir, out = Path(in_dir), Path(out_dir)
    rows = read_manifest(in_dir / "index.csv")
    mel = cfg.features.mel()
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    windows = load_windows(rows, mel.sample_rate)

    def one(w):
        spec = log_mel(w, mel)
        return spec, render_image(spec, colormap_id=cfg.features.colormap)

    feats = _pmap(one, windows, threads)
    kept_ids = {id(img) for img in filter_low_info([f[1] for f in feats], cfg.features.rgb_threshold)[0]}
    kept, dropped = [], []
    for row, (spec, img) in zip(rows, feats):
        stem = Path(row.path).stem
        write_ppm(out / "images" / f"{stem}.ppm", img)
        write_mels(out / "mels" / f"{stem}.mels", spec)
        (kept if id(img) in kept_ids else dropped).append(row)
    _write_index(out / "index.csv", kept, out)
    _write_index(out / "dropped.csv", dropped, out)
    return kept, dropped


def pretrain_stage(manifest, out_path, cfg: RunConfig | None = None, threads: int = 1):
    cfg = cfg or RunConfig()
    rows = read_manifest(manifest)
    windows = load_windows(rows, cfg.features.sample_rate)
    ckpt, losses = pretrain(windows, cfg.simclr, cfg.augment, cfg.features.mel(), threads=threads)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_path, ckpt)
    with open(out_path.with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for e, s, l in losses:
            w.writerow([e, s, repr(l)])
    return ckpt, losses


def make_backbone(ckpt: Checkpoint, cfg: RunConfig):
    mel, aug = checkpoint_settings(ckpt)
    oc = cfg.opencon
    return EncoderBackbone(model_from_checkpoint(ckpt), mel, aug,
                           finetune=oc.encoder_mode == "finetune", optimizer=oc.optimizer, lr=oc.lr)


def train_discovery(ckpt: Checkpoint, rows, labels: LabelState, cfg: RunConfig, seed: int, threads=1):
    """Run discovery on ``rows``; returns ``(backbone, result, windows)``."""
    mel, _ = checkpoint_settings(ckpt)
    windows = load_windows(rows, mel.sample_rate)
    if ckpt.config.get("window_length") not in (None, len(windows[0])):
        raise DataError(f"windows have {len(windows[0])} samples; checkpoint expects "
                        f"{ckpt.config['window_length']}")
    backbone = make_backbone(ckpt, cfg)
    oc = cfg.opencon
    oc_run = type(oc)(**{**oc.__dict__, "seed": seed})
    result = discover(backbone, windows, labels, oc_run, threads)
    return backbone, result, windows


def discover_stage(pretrained, manifest, out_dir, cfg: RunConfig | None = None, seed: int = 0,
                   threads: int = 1):
    cfg = cfg or RunConfig()
    ckpt = load_checkpoint(pretrained)
    rows = read_manifest(manifest)
    labels = mask_labels(rows, cfg.opencon.label_fraction, seed)
    backbone, result, _ = train_discovery(ckpt, rows, labels, cfg, seed, threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, opt_state = backbone.state()
    save_checkpoint(out / "model.clpd",
                    Checkpoint({**ckpt.config, "kind": "opencon", "lambda": result.lam,
                                "opencon": {**cfg.opencon.__dict__, "seed": seed}}, params, opt_state))
    save_checkpoint(out / "prototypes.clpd",
                    Checkpoint({"kind": "prototypes", "n_known": result.prototypes.n_known,
                                "lambda": result.lam},
                               {"prototypes": result.prototypes.vectors}))
    with open(out / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "predicted_class", "split_decision", "true_class_for_eval"])
        for i, (row, p, k) in enumerate(zip(rows, result.assignments, result.split)):
            w.writerow([Path(row.path).stem, int(p), "known" if k else "novel", row.cls])
    return result


def evaluate_stage(pretrained, manifest, out_dir, cfg: RunConfig | None = None, seed: int = 0,
                   threads: int = 1) -> TrialReport:
    cfg = cfg or RunConfig()
    ckpt = load_checkpoint(pretrained)
    rows = read_manifest(manifest)
    for r in rows:
        class_index(r.cls)

    def train_fn(train_rows, labels, model_seed):
        backbone, result, _ = train_discovery(ckpt, train_rows, labels, cfg, model_seed, threads)
        mel, _ = checkpoint_settings(ckpt)

        def predict(test_rows):
            z = backbone.embed(load_windows(test_rows, mel.sample_rate))
            return assign(z, result.prototypes, result.lam)[0]
        return predict

    report = run_trials(train_fn, rows, cfg.eval, seed)
    emit_report(report, out_dir)
    return report


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

