"""Contrastive pre-training with the NT-Xent loss."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .augment import AugmentConfig, augment_view, derive_rng, view_to_input
from .errors import DataError, NumericError
from .features import MelParams, log_mel, render_image
from .nncore import (Checkpoint, EncoderConfig, Sequential, build_encoder, build_head, l2_normalize,
                     l2_normalize_backward, make_optimizer, restore_rng, rng_state)

log = logging.getLogger(__name__)


@dataclass
class SimCLRConfig:
    temperature: float = 0.5
    batch_size: int = 64
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"
    keep_last_batch: bool = False
    seed: int = 0


def partner_index(n_rows: int) -> np.ndarray:
    return np.arange(n_rows) ^ 1


def check_unit_rows(z, tol=1e-5):
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1) > tol):
        raise ValueError(f"embedding rows must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


def nt_xent_loss(z, temperature: float = 0.5):
    """NT-Xent over rows paired (2k, 2k+1); returns ``(loss, dloss/dz)``."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2 or n % 2:
        raise ValueError("need an even number (>= 2) of rows")
    check_unit_rows(z)
    logits = z @ z.T / temperature
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    pos = partner_index(n)
    rows = np.arange(n)
    loss = -np.mean(np.log(prob[rows, pos]))
    g = prob
    g[rows, pos] -= 1.0
    g /= n
    return float(loss), (g + g.T) @ z / temperature


class ContrastiveModel:
    """Encoder plus projection head; ``embed`` returns representations and unit embeddings."""

    def __init__(self, encoder: Sequential, head: Sequential | None):
        self.encoder, self.head = encoder, head
        self._u = None

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, seed: int, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        enc = build_encoder(enc_cfg, rng, dtype)
        return cls(enc, build_head(enc_cfg.d_h, enc_cfg.d_z, rng, dtype))

    def embed(self, x):
        h = self.encoder.forward(x)
        u = self.head.forward(h) if self.head is not None else np.asarray(h, dtype=np.float64)
        self._u = u
        return h, l2_normalize(u)

    def backward(self, dz):
        if self._u is None:
            raise RuntimeError("backward called before embed")
        du = l2_normalize_backward(self._u, dz)
        dh = self.head.backward(du) if self.head is not None else du
        self.encoder.backward(dh, need_dx=False)

    def parameters(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def gradients(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.gradients().items()}
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.gradients().items()})
        return out

    def set_parameters(self, values):
        self.encoder.set_parameters({k[8:]: v for k, v in values.items() if k.startswith("encoder.")})
        if self.head is not None:
            self.head.set_parameters({k[5:]: v for k, v in values.items() if k.startswith("head.")})


def clean_input(samples, mode: str, mel: MelParams) -> np.ndarray:
    spec = log_mel(samples, mel)
    return view_to_input(render_image(spec) if mode == "ia" else spec)


def view_batch(windows, indices, aug: AugmentConfig, mel: MelParams, key, threads=1):
    """Stack two augmented views per index as rows (2k, 2k+1).

    Each view's generator is derived from ``key + (index, view)`` so the
    result does not depend on thread scheduling.
    """
    images = {}
    if aug.mode == "ia":
        for i in indices:
            images[i] = render_image(log_mel(windows[i], mel))

    def one(job):
        i, v = job
        return view_to_input(augment_view(windows[i], aug, derive_rng(*key, i, v), mel, images.get(i)))

    jobs = [(i, v) for i in indices for v in (0, 1)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            views = list(ex.map(one, jobs))
    else:
        views = [one(j) for j in jobs]
    return np.stack(views)


def batches(n, batch_size, rng, keep_last=False):
    order = rng.permutation(n)
    stop = n if keep_last else n - n % batch_size
    return [order[s : s + batch_size] for s in range(0, stop, batch_size)]


def pretrain(windows, config: SimCLRConfig | None = None, aug: AugmentConfig | None = None,
             mel: MelParams | None = None, enc_cfg: EncoderConfig | None = None, threads: int = 1):
    """Train encoder + head on view pairs; returns ``(Checkpoint, loss_rows)``.

    ``loss_rows`` holds ``(epoch, step, loss)`` tuples, one per optimizer step.
    """
    cfg = config or SimCLRConfig()
    aug = aug or AugmentConfig()
    mel = mel or MelParams()
    windows = [np.asarray(w.samples if hasattr(w, "samples") else w, dtype=np.float64) for w in windows]
    if not windows:
        raise DataError("pretraining needs a non-empty dataset")
    enc_cfg = enc_cfg or EncoderConfig(in_channels=3 if aug.mode == "ia" else 1)
    n_frames = mel.n_frames(len(windows[0]))
    enc_cfg.check_input(mel.n_mels, n_frames)
    if cfg.temperature <= 0 or cfg.batch_size < 2:
        raise ValueError("need temperature > 0 and batch_size >= 2")

    model = ContrastiveModel.create(enc_cfg, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rows, step = [], 0
    batch_size = min(cfg.batch_size, len(windows))
    for epoch in range(cfg.epochs):
        for idx in batches(len(windows), batch_size, rng, cfg.keep_last_batch):
            if len(idx) < 2:
                continue
            x = view_batch(windows, idx, aug, mel, (cfg.seed, epoch), threads)
            _, z = model.embed(x)
            loss, dz = nt_xent_loss(z, cfg.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            model.backward(dz)
            model.set_parameters(opt.step(model.parameters(), model.gradients()))
            rows.append((epoch, step, loss))
            step += 1
        if rows:
            log.info("epoch %d loss %.4f", epoch, rows[-1][2])

    ckpt = Checkpoint(
        config={"kind": "simclr", "encoder": asdict(enc_cfg), "mel": mel.to_dict(),
                "augment": asdict(aug), "simclr": asdict(cfg),
                "window_length": len(windows[0])},
        params=model.parameters(), optimizer=opt.state(), rng=rng_state(rng))
    return ckpt, rows


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> ContrastiveModel:
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    model = ContrastiveModel.create(enc_cfg, 0, dtype)
    model.set_parameters(ckpt.params)
    return model


def checkpoint_settings(ckpt: Checkpoint):
    """(MelParams, AugmentConfig) stored in a pre-training checkpoint."""
    aug = dict(ckpt.config["augment"])
    for k, v in aug.items():
        if isinstance(v, list):
            aug[k] = tuple(v)
    return MelParams(**ckpt.config["mel"]), AugmentConfig(**aug)


def encode_dataset(ckpt: Checkpoint, windows, batch_size: int = 128) -> np.ndarray:
    """Encoder representations h of un-augmented windows (projection head unused)."""
    mel, aug = checkpoint_settings(ckpt)
    model = model_from_checkpoint(ckpt)
    expected = ckpt.config.get("window_length")
    out = []
    for s in range(0, len(windows), batch_size):
        chunk = windows[s : s + batch_size]
        for w in chunk:
            n = len(w.samples if hasattr(w, "samples") else w)
            if expected is not None and n != expected:
                raise DataError(f"window has {n} samples; checkpoint expects {expected}")
        x = np.stack([clean_input(w.samples if hasattr(w, "samples") else w, aug.mode, mel) for w in chunk])
        out.append(np.asarray(model.encoder.forward(x), dtype=np.float64))
    return np.concatenate(out) if out else np.zeros((0, EncoderConfig(**ckpt.config["encoder"]).d_h))


def restore_training_rng(ckpt: Checkpoint) -> np.random.Generator:
    return restore_rng(ckpt.rng)
