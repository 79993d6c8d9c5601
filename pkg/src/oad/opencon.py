"""Open-world discovery with class prototypes.

Known-class prototypes start at the mean of labeled embeddings; novel-class
prototypes are placed by k-means on the first epoch's novel candidates. Each epoch the unlabeled pool is
split into known and novel candidates by thresholding the best cosine
similarity to a known prototype; candidates are pseudo-labeled from their
augmented views, batches are trained with a supervised-contrastive plus
prototype cross-entropy objective, and prototypes follow an EMA of the
embeddings assigned to them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .nncore import l2_normalize, make_optimizer
from .simclr import clean_input, view_batch

log = logging.getLogger(__name__)

UNLABELED = -1
KNOWN_CANDIDATE = "known"
NOVEL_CANDIDATE = "novel"


@dataclass
class OpenConConfig:
    n_known: int = 2
    n_unknown: int = 2
    label_fraction: float = 0.9
    temp_con: float = 0.5
    temp_proto: float = 0.1
    proto_momentum: float = 0.9
    lambda_percentile: float = 10.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    encoder_mode: str = "finetune"  # or "frozen"
    novel_init: str = "kmeanspp"  # or "random"
    novel_pseudo_label: str = "novel"  # restriction for novel candidates while training
    reseed_dead: bool = True
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_unknown


@dataclass
class PrototypeSet:
    vectors: np.ndarray  # n_classes x d, unit rows
    n_known: int
    warnings: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.vectors)

    def is_known(self, c: int) -> bool:
        return c < self.n_known

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.vectors.copy(), self.n_known, self.warnings)


class LabelState:
    """Training-visible labels: a class index for labeled rows, ``-1`` otherwise.

    Ground truth for unlabeled rows is never stored here.
    """

    def __init__(self, labels):
        self._labels = np.asarray(labels, dtype=np.int64).copy()
        self._labels.setflags(write=False)

    def __len__(self):
        return len(self._labels)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def labeled_mask(self) -> np.ndarray:
        return self._labels != UNLABELED

    def label(self, i: int) -> int | None:
        v = int(self._labels[i])
        return None if v == UNLABELED else v


# -- building blocks -------------------------------------------------------------

def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _cos_matrix(z, protos):
    return l2_normalize(np.atleast_2d(z)) @ protos.T


def init_prototypes(z_labeled, labels, n_known: int, n_unknown: int, rng) -> PrototypeSet:
    z_labeled = np.asarray(z_labeled, dtype=np.float64)
    labels = np.asarray(labels)
    d = z_labeled.shape[1]
    vecs = np.zeros((n_known + n_unknown, d))
    for c in range(n_known):
        members = z_labeled[labels == c]
        if len(members) == 0:
            raise DataError(f"known class {c} has no labeled instances")
        mean = members.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            raise DataError(f"labeled embeddings of class {c} average to zero")
        vecs[c] = mean / norm
    if n_unknown:
        vecs[n_known:] = l2_normalize(rng.standard_normal((n_unknown, d)))
    return PrototypeSet(vecs, n_known)


def calibrate_lambda(z_labeled, labels, prototypes: PrototypeSet, percentile: float = 10.0) -> float:
    """Percentile of the labeled instances' cosine similarity to their own prototype."""
    labels = np.asarray(labels)
    if len(labels) < 10:
        raise DataError(f"need at least 10 labeled instances to calibrate, got {len(labels)}")
    sims = np.sum(l2_normalize(z_labeled) * prototypes.vectors[labels], axis=1)
    return float(np.percentile(sims, percentile))


def known_similarity(z, prototypes: PrototypeSet) -> np.ndarray:
    return _cos_matrix(z, prototypes.vectors[: prototypes.n_known]).max(axis=1)


def ood_split(z, prototypes: PrototypeSet, lam: float):
    """KNOWN_CANDIDATE when the best known-prototype similarity reaches ``lam``."""
    if prototypes.n_known == 0:
        return NOVEL_CANDIDATE
    return KNOWN_CANDIDATE if known_similarity(z, prototypes)[0] >= lam else NOVEL_CANDIDATE


def split_batch(z, prototypes: PrototypeSet, lam: float) -> np.ndarray:
    """Vectorised ``ood_split``: True marks known candidates."""
    if prototypes.n_known == 0:
        return np.zeros(len(z), dtype=bool)
    return known_similarity(z, prototypes) >= lam


ALL_CLASSES, KNOWN_ONLY, NOVEL_ONLY = "all", "known", "novel"


def _restrict(sims, n_known, restriction):
    if restriction == KNOWN_ONLY:
        sims[..., n_known:] = -np.inf
    elif restriction == NOVEL_ONLY and sims.shape[-1] > n_known:
        sims[..., :n_known] = -np.inf
    return sims


def pseudo_label(z, prototypes: PrototypeSet, restriction: str = ALL_CLASSES) -> int:
    """Index of the most cosine-similar permitted prototype (lowest index on ties)."""
    sims = _restrict(_cos_matrix(z, prototypes.vectors)[0], prototypes.n_known, restriction)
    return int(np.argmax(sims))


def pseudo_label_batch(z, prototypes: PrototypeSet, known_mask, novel_restriction=NOVEL_ONLY):
    """Known candidates over known prototypes, the rest per ``novel_restriction``."""
    known_mask = np.asarray(known_mask, dtype=bool)
    sims = _cos_matrix(z, prototypes.vectors)
    sims[known_mask] = _restrict(sims[known_mask], prototypes.n_known, KNOWN_ONLY)
    sims[~known_mask] = _restrict(sims[~known_mask], prototypes.n_known, novel_restriction)
    return sims.argmax(axis=1)


def build_positive_sets(labels, anchor: int) -> set[int]:
    labels = np.asarray(labels)
    return {int(p) for p in np.flatnonzero(labels == labels[anchor]) if p != anchor}


def supcon_loss(z, labels, temperature: float):
    """Supervised contrastive loss over rows of ``z``; returns ``(loss, grad)``."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(z)
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        return 0.0, np.zeros_like(z)
    logits = z @ z.T / temperature
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    log_prob = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    prob = np.exp(log_prob)
    np.fill_diagonal(log_prob, 0.0)
    v = valid.sum()
    per_anchor = -(pos * log_prob).sum(axis=1) / np.maximum(n_pos, 1)
    loss = per_anchor[valid].sum() / v
    g = (prob - pos / np.maximum(n_pos, 1)[:, None]) / v
    g[~valid] = 0.0
    np.fill_diagonal(g, 0.0)
    return float(loss), (g + g.T) @ z / temperature


def proto_loss(z, labels, protos, temperature: float):
    """Cross-entropy of prototype-similarity logits; returns ``(loss, dz, dmu)``."""
    z = np.asarray(z, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    n = len(z)
    logits = z @ protos.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    log_prob = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_prob[rows, labels].mean()
    d = np.exp(log_prob)
    d[rows, labels] -= 1.0
    d /= n
    return float(loss), d @ protos / temperature, d.T @ z / temperature


def opencon_loss(z, labels, prototypes, config: OpenConConfig):
    """Total loss and gradients: returns ``(loss, dz, dmu, parts)``."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) == 0:
        raise ValueError("empty batch")
    vecs = prototypes.vectors if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    for arr, what in ((z, "embeddings"), (vecs, "prototypes")):
        if np.any(np.abs(np.linalg.norm(arr, axis=1) - 1) > 1e-5):
            raise ValueError(f"{what} must be unit-normalized")
    labels = np.asarray(labels)
    l_con, dz_con = supcon_loss(z, labels, config.temp_con)
    l_pro, dz_pro, dmu = proto_loss(z, labels, vecs, config.temp_proto)
    return l_con + l_pro, dz_con + dz_pro, dmu, {"supcon": l_con, "proto": l_pro}


def update_prototypes(prototypes: PrototypeSet, z, labels, momentum: float) -> PrototypeSet:
    """EMA toward the mean embedding assigned to each class in the batch."""
    if not 0 < momentum <= 1:
        raise ValueError("momentum must lie in (0, 1]")
    out = prototypes.copy()
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    for c in np.unique(labels):
        mixed = momentum * out.vectors[c] + (1 - momentum) * z[labels == c].mean(axis=0)
        norm = np.linalg.norm(mixed)
        if norm < 1e-12:
            out.warnings += 1
            continue
        out.vectors[c] = mixed / norm
    return out


# -- backbones -------------------------------------------------------------------

class IdentityBackbone:
    """Embeddings are the (normalized) inputs; views add isotropic jitter.

    Nothing is trainable, so discovery reduces to prototype estimation.
    """

    trainable = False

    def __init__(self, view_noise: float = 0.05):
        self.view_noise = view_noise

    def embed(self, items, training=False):
        return l2_normalize(np.asarray(items, dtype=np.float64))

    def embed_views(self, items, key, threads=1):
        x = np.asarray(items, dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
        views = np.repeat(x, 2, axis=0)
        views = views + self.view_noise * rng.standard_normal(views.shape)
        return l2_normalize(views)

    def backward(self, dz):
        pass

    def state(self):
        return {}, {}


class EncoderBackbone:
    """Pre-trained encoder + projection head over audio windows."""

    trainable = True

    def __init__(self, model, mel, aug, finetune=True, optimizer="adam", lr=1e-3):
        self.model, self.mel, self.aug = model, mel, aug
        self.trainable = finetune
        self.opt = make_optimizer(optimizer, lr) if finetune else None

    def embed(self, items, training=False, batch_size=128):
        out = []
        for s in range(0, len(items), batch_size):
            x = np.stack([clean_input(w, self.aug.mode, self.mel) for w in items[s : s + batch_size]])
            out.append(self.model.embed(x)[1])
        return np.concatenate(out)

    def embed_views(self, items, key, threads=1):
        x = view_batch(items, range(len(items)), self.aug, self.mel, key, threads)
        return self.model.embed(x)[1]

    def backward(self, dz):
        if not self.trainable:
            return
        self.model.backward(dz)
        self.model.set_parameters(self.opt.step(self.model.parameters(), self.model.gradients()))

    def state(self):
        return self.model.parameters(), (self.opt.state() if self.opt else {})


# -- training loop -----------------------------------------------------------------

@dataclass
class DiscoveryResult:
    prototypes: PrototypeSet
    lam: float
    assignments: np.ndarray
    split: np.ndarray  # True = known candidate (labeled rows count as known)
    history: list = field(default_factory=list)


def assign(z, prototypes: PrototypeSet, lam: float):
    """Final class index per row plus the known/novel split decision.

    Novel candidates may still land on a known class, which repairs split errors.
    """
    known = split_batch(z, prototypes, lam)
    return pseudo_label_batch(z, prototypes, known, ALL_CLASSES), known


def seed_novel_prototypes(protos: PrototypeSet, z_novel, rng, iters: int = 10) -> PrototypeSet:
    """Place novel prototypes by spherical k-means over the novel candidates.

    Centres start from k-means++ picks (squared cosine distance to the picks so
    far); known prototypes play no part, so a novel cluster lying close to a
    known class still gets its own centre.
    """
    n_novel = protos.n_classes - protos.n_known
    if len(z_novel) < n_novel or n_novel == 0:
        return protos
    z_novel = l2_normalize(z_novel)
    centres = [z_novel[int(rng.integers(len(z_novel)))]]
    while len(centres) < n_novel:
        w = np.clip(1.0 - (z_novel @ np.array(centres).T).max(axis=1), 0, None) ** 2
        p = w / w.sum() if w.sum() > 0 else None
        centres.append(z_novel[int(rng.choice(len(z_novel), p=p))])
    centres = np.array(centres)
    for _ in range(iters):
        near = np.argmax(z_novel @ centres.T, axis=1)
        for c in range(n_novel):
            s = z_novel[near == c].sum(axis=0)
            if np.linalg.norm(s) > 0:
                centres[c] = s / np.linalg.norm(s)
    out = protos.copy()
    out.vectors[out.n_known :] = centres
    return out


def _reseed_dead(protos: PrototypeSet, counts, z_novel):
    """Move novel prototypes that attracted nothing onto the least-covered novel candidate."""
    if len(z_novel) == 0:
        return protos
    out = protos.copy()
    for c in range(protos.n_known, protos.n_classes):
        if counts[c] == 0:
            best = _cos_matrix(z_novel, out.vectors).max(axis=1)
            out.vectors[c] = z_novel[int(np.argmin(best))]
    return out


def discover(backbone, items, label_state: LabelState, config: OpenConConfig | None = None,
             threads: int = 1) -> DiscoveryResult:
    """Train on ``items`` with only the labels exposed by ``label_state``."""
    cfg = config or OpenConConfig()
    if len(items) != len(label_state):
        raise DataError("items and label state differ in length")
    if not 0 < cfg.proto_momentum < 1:
        raise ValueError("proto_momentum must lie in (0, 1)")
    labels = label_state.labels
    lab_idx = np.flatnonzero(labels != UNLABELED)
    unl_idx = np.flatnonzero(labels == UNLABELED)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    z_all = backbone.embed(items)
    protos = init_prototypes(z_all[lab_idx], labels[lab_idx], cfg.n_known, cfg.n_unknown, rng)
    history = []
    batch_size = min(cfg.batch_size, len(items))
    for epoch in range(cfg.epochs):
        if epoch:
            z_all = backbone.embed(items)
        lam = calibrate_lambda(z_all[lab_idx], labels[lab_idx], protos, cfg.lambda_percentile)
        known_cand = np.ones(len(items), dtype=bool)
        known_cand[unl_idx] = split_batch(z_all[unl_idx], protos, lam)
        if epoch == 0 and cfg.novel_init == "kmeanspp":
            protos = seed_novel_prototypes(protos, z_all[unl_idx[~known_cand[unl_idx]]], rng)
        counts = np.zeros(protos.n_classes, dtype=np.int64)
        losses = []
        order = rng.permutation(len(items))
        for s in range(0, len(order) - len(order) % batch_size, batch_size):
            idx = order[s : s + batch_size]
            z = backbone.embed_views([items[i] for i in idx], (cfg.seed, epoch, s), threads)
            mean_view = l2_normalize(z[0::2] + z[1::2] + 1e-12)
            lab = labels[idx]
            pseudo = pseudo_label_batch(mean_view, protos, known_cand[idx], cfg.novel_pseudo_label)
            inst = np.where(lab != UNLABELED, lab, pseudo)
            row_labels = np.repeat(inst, 2)
            loss, dz, _, parts = opencon_loss(z, row_labels, protos, cfg)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite discovery loss at epoch {epoch}")
            backbone.backward(dz)
            protos = update_prototypes(protos, z, row_labels, cfg.proto_momentum)
            counts += np.bincount(inst, minlength=protos.n_classes)
            losses.append(loss)
        if cfg.reseed_dead and cfg.n_unknown:
            novel = unl_idx[~known_cand[unl_idx]]
            protos = _reseed_dead(protos, counts, z_all[novel])
        history.append((epoch, float(np.mean(losses)) if losses else float("nan"), lam))
        log.info("discover epoch %d loss %.4f lambda %.3f", epoch, history[-1][1], lam)

    z_all = backbone.embed(items)
    lam = calibrate_lambda(z_all[lab_idx], labels[lab_idx], protos, cfg.lambda_percentile)
    pred, known = assign(z_all, protos, lam)
    known[lab_idx] = True
    return DiscoveryResult(protos, lam, pred, known, history)
