"""Experiment protocol: user-exclusive splits, label masking, trial matrix, reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, NumericError
from .opencon import UNLABELED, LabelState
from .segment import DISCOVERY_CLASSES, KNOWN_CLASSES


@dataclass
class ManifestRow:
    path: str
    cls: str
    user_id: str
    split: str = ""
    start_sample: int = 0
    source_path: str = ""


def read_manifest(path) -> list[ManifestRow]:
    """Read a manifest or window-index CSV; relative paths resolve against its folder."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            fields = reader.fieldnames or []
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    key = "path" if "path" in fields else "window_path" if "window_path" in fields else None
    missing = [c for c in ("class", "user_id") if c not in fields]
    if key is None or missing:
        raise DataError(f"{path}: manifest needs path/window_path, class and user_id columns")
    out, seen = [], set()
    for i, r in enumerate(rows):
        p = r[key]
        if not p or not r["user_id"]:
            raise DataError(f"{path}: row {i + 2} lacks a path or user_id")
        full = str(p if Path(p).is_absolute() else path.parent / p)
        if full in seen:
            raise DataError(f"{path}: duplicate path {p}")
        seen.add(full)
        src = r.get("source_path", "") or ""
        if src and not Path(src).is_absolute():
            src = str(path.parent / src)
        try:
            start = int(r.get("start_sample") or 0)
        except ValueError:
            raise DataError(f"{path}: row {i + 2} has a non-integer start_sample") from None
        out.append(ManifestRow(full, (r["class"] or "").strip().lower(), r["user_id"],
                               r.get("split", "") or "", start, src))
    return out


def write_manifest(path, rows, relative_to=None):
    base = Path(relative_to) if relative_to else Path(path).parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "class", "user_id", "split"])
        for r in rows:
            p = Path(r.path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix(), r.cls, r.user_id, r.split])


def _users_by_class(rows):
    per_user: dict[str, dict[str, int]] = {}
    for r in rows:
        per_user.setdefault(r.user_id, {}).setdefault(r.cls, 0)
        per_user[r.user_id][r.cls] += 1
    primary = {u: max(sorted(c), key=lambda k: c[k]) for u, c in per_user.items()}
    groups: dict[str, list[str]] = {}
    for u in sorted(primary):
        groups.setdefault(primary[u], []).append(u)
    return groups, per_user


def user_split(rows, test_fraction: float = 0.2, seed: int = 0, attempts: int = 64):
    """Partition users (not rows) into train/test, stratified by each user's main class.

    For each class several random user subsets of the target size are drawn and
    the one whose test-instance share is closest to ``test_fraction`` is kept.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    groups, per_user = _users_by_class(rows)
    class_users: dict[str, set] = {}
    for r in rows:
        class_users.setdefault(r.cls, set()).add(r.user_id)
    for c, users in sorted(class_users.items()):
        if len(users) < 2:
            raise DataError(f"class {c!r}: all instances belong to one user; cannot split by user")

    test_users = set()
    for c in sorted(groups):
        users = groups[c]
        if len(users) < 2:
            continue
        k = min(len(users) - 1, max(1, int(math.floor(test_fraction * len(users) + 0.5))))
        sizes = np.array([per_user[u].get(c, 0) for u in users], dtype=float)
        best, best_err = None, np.inf
        for _ in range(attempts):
            pick = rng.choice(len(users), size=k, replace=False)
            err = abs(sizes[pick].sum() / sizes.sum() - test_fraction)
            if err < best_err - 1e-12:
                best, best_err = pick, err
        test_users.update(users[i] for i in sorted(best))
    train = [r for r in rows if r.user_id not in test_users]
    test = [r for r in rows if r.user_id in test_users]
    return train, test


def class_index(name: str, classes=DISCOVERY_CLASSES) -> int:
    try:
        return list(classes).index(name)
    except ValueError:
        raise DataError(f"unknown class {name!r}; expected one of {list(classes)}") from None


def mask_labels(rows, label_fraction: float = 0.9, seed: int = 0, classes=DISCOVERY_CLASSES,
                known=KNOWN_CLASSES) -> LabelState:
    """Label round(fraction * n_c) rows of each known class; everything else is unlabeled."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    labels = np.full(len(rows), UNLABELED, dtype=np.int64)
    cls = np.array([r.cls for r in rows])
    for c in known:
        idx = np.flatnonzero(cls == c)
        if idx.size == 0:
            continue
        n_lab = int(math.floor(label_fraction * idx.size + 0.5))
        chosen = rng.permutation(idx)[:n_lab]
        labels[chosen] = class_index(c, classes)
    return LabelState(labels)


def hungarian_match(counts):
    """Cluster -> class mapping maximizing matched counts; returns ``(mapping, total)``."""
    counts = np.asarray(counts)
    if counts.size == 0:
        raise ValueError("empty confusion matrix")
    if np.any(counts < 0):
        raise ValueError("confusion counts must be non-negative")
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return mapping, int(counts[rows, cols].sum())


@dataclass
class ClassScore:
    accuracy: float | None
    n: int
    correct: int


def per_class_accuracy(pred, truth, n_known: int, n_classes: int, labeled_mask=None):
    """Accuracy per true class index.

    Known classes compare predictions directly. Novel clusters are first mapped
    to novel classes by Hungarian matching. Classes without instances get
    ``accuracy=None``. With ``labeled_mask`` the known classes are also broken
    down into ``(c, "labeled")`` / ``(c, "unlabeled")`` entries.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    scores = {}
    correct = pred == truth
    if n_classes > n_known:
        n_novel = n_classes - n_known
        conf = np.zeros((n_novel, n_novel), dtype=np.int64)
        for p, t in zip(pred, truth):
            if p >= n_known and t >= n_known:
                conf[p - n_known, t - n_known] += 1
        mapping, _ = hungarian_match(conf)
        mapped = np.array([n_known + mapping[p - n_known] if p - n_known in mapping else -1
                           for p in pred], dtype=np.int64)
        novel = truth >= n_known
        correct = np.where(novel, mapped == truth, correct)
    for c in range(n_classes):
        m = truth == c
        n = int(m.sum())
        k = int(correct[m].sum())
        scores[c] = ClassScore(k / n if n else None, n, k)
        if labeled_mask is not None and c < n_known:
            lm = np.asarray(labeled_mask, dtype=bool)
            for tag, sel in (("labeled", m & lm), ("unlabeled", m & ~lm)):
                ns = int(sel.sum())
                ks = int(correct[sel].sum())
                scores[(c, tag)] = ClassScore(ks / ns if ns else None, ns, ks)
    return scores


# -- trial matrix -------------------------------------------------------------------

@dataclass
class TrialRow:
    model_seed: int
    test_subset: int
    cls: str
    accuracy: float  # NaN when the class is absent from the subset
    n_instances: int


@dataclass
class EvalConfig:
    n_models: int = 5
    n_subsets: int = 10
    test_fraction: float = 0.2
    subset_mode: str = "partition"  # or "resample"


@dataclass
class TrialReport:
    rows: list[TrialRow] = field(default_factory=list)

    def summary(self):
        """Per class: mean, std, q1, median, q3 over trial accuracies (absent rows skipped)."""
        out = {}
        for c in dict.fromkeys(r.cls for r in self.rows):
            acc = np.array([r.accuracy for r in self.rows if r.cls == c and not math.isnan(r.accuracy)])
            if acc.size == 0:
                out[c] = dict(mean=math.nan, std=math.nan, q1=math.nan, median=math.nan, q3=math.nan)
                continue
            q1, med, q3 = np.percentile(acc, [25, 50, 75])
            out[c] = dict(mean=float(acc.mean()), std=float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                          q1=float(q1), median=float(med), q3=float(q3))
        return out


def derive_seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint32)[0])


def test_subsets(rows, n_subsets: int, seed: int, mode: str = "partition"):
    """Index lists of user-respecting random subsets of ``rows``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    users = sorted({r.user_id for r in rows})
    by_user = {u: [i for i, r in enumerate(rows) if r.user_id == u] for u in users}
    if mode == "resample":
        k = max(1, len(users) // 2)
        return [sorted(i for u in rng.choice(users, k, replace=False) for i in by_user[u])
                for _ in range(n_subsets)]
    if mode != "partition":
        raise ValueError(f"unknown subset mode {mode!r}")
    bins: list[list[int]] = [[] for _ in range(n_subsets)]
    for u in rng.permutation(users):
        smallest = min(range(n_subsets), key=lambda b: len(bins[b]))
        bins[smallest].extend(by_user[u])
    return [sorted(b) for b in bins]


def score_subsets(pred, truth, subsets, model_seed, n_known, classes):
    out = []
    for si, idx in enumerate(subsets):
        idx = np.asarray(idx, dtype=np.intp)
        scores = per_class_accuracy(pred[idx], truth[idx], n_known, len(classes)) if idx.size else {}
        for c, name in enumerate(classes):
            sc = scores.get(c)
            acc = sc.accuracy if sc is not None and sc.accuracy is not None else math.nan
            out.append(TrialRow(model_seed, si, name, acc, sc.n if sc else 0))
    return out


def run_trials(train_fn, rows, config: EvalConfig | None = None, master_seed: int = 0,
               classes=DISCOVERY_CLASSES, known=KNOWN_CLASSES) -> TrialReport:
    """Train ``n_models`` discovery models and score each on ``n_subsets`` test subsets.

    ``train_fn(train_rows, label_state, seed)`` returns a predictor mapping test
    rows to class indices. Each model's seed is derived from ``(master_seed, i)``.
    """
    cfg = config or EvalConfig()
    train, test = user_split(rows, cfg.test_fraction, master_seed)
    truth = np.array([class_index(r.cls, classes) for r in test])
    report = TrialReport()
    for m in range(cfg.n_models):
        seed = derive_seed(master_seed, m)
        labels = mask_labels(train, seed=seed, classes=classes, known=known)
        try:
            predict = train_fn(train, labels, seed)
            pred = np.asarray(predict(test))
        except (DataError, NumericError) as exc:
            raise type(exc)(f"trial model {m} (seed {seed}): {exc}") from exc
        subsets = test_subsets(test, cfg.n_subsets, seed, cfg.subset_mode)
        report.rows += score_subsets(pred, truth, subsets, seed, len(known), classes)
    return report


# -- report files -------------------------------------------------------------------

def _fmt(x):
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def emit_report(report: TrialReport, out_dir):
    if not report.rows:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_seed", "test_subset", "class", "accuracy", "n_instances"])
        for r in report.rows:
            w.writerow([r.model_seed, r.test_subset, r.cls, _fmt(r.accuracy), r.n_instances])
    summary = report.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "mean", "std", "q1", "median", "q3"])
        for c, s in summary.items():
            w.writerow([c] + [_fmt(s[k]) for k in ("mean", "std", "q1", "median", "q3")])
    (out / "boxplot.svg").write_text(boxplot_svg(report))
    return [out / "trials.csv", out / "summary.csv", out / "boxplot.svg"]


def read_trials(path) -> TrialReport:
    with open(path, newline="") as fh:
        rows = [TrialRow(int(r["model_seed"]), int(r["test_subset"]), r["class"],
                         float(r["accuracy"]) if r["accuracy"] else math.nan, int(r["n_instances"]))
                for r in csv.DictReader(fh)]
    return TrialReport(rows)


def boxplot_svg(report: TrialReport, width=480, height=300) -> str:
    """Static per-class box plot (whiskers at min/max) as SVG text."""
    classes = list(dict.fromkeys(r.cls for r in report.rows))
    pad_l, pad_b, pad_t = 50, 40, 20
    plot_h = height - pad_b - pad_t
    step = (width - pad_l - 20) / max(1, len(classes))

    def y(v):
        return pad_t + (1 - v) * plot_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for t in (0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<line x1="{pad_l}" x2="{width - 20}" y1="{y(t):.1f}" y2="{y(t):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{pad_l - 6}" y="{y(t) + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    for i, c in enumerate(classes):
        acc = np.array([r.accuracy for r in report.rows if r.cls == c and not math.isnan(r.accuracy)])
        cx = pad_l + step * (i + 0.5)
        parts.append(f'<text x="{cx:.1f}" y="{height - pad_b + 16}" text-anchor="middle">{c}</text>')
        if acc.size == 0:
            continue
        lo, q1, med, q3, hi = np.percentile(acc, [0, 25, 50, 75, 100])
        bw = step * 0.4
        parts.append(f'<line x1="{cx:.1f}" x2="{cx:.1f}" y1="{y(hi):.1f}" y2="{y(lo):.1f}" stroke="black"/>')
        parts.append(f'<rect x="{cx - bw / 2:.1f}" y="{y(q3):.1f}" width="{bw:.1f}" '
                     f'height="{max(0.5, y(q1) - y(q3)):.1f}" fill="#9ecae1" stroke="black"/>')
        parts.append(f'<line x1="{cx - bw / 2:.1f}" x2="{cx + bw / 2:.1f}" y1="{y(med):.1f}" '
                     f'y2="{y(med):.1f}" stroke="black" stroke-width="2"/>')
    parts.append(f'<text x="{pad_l}" y="12">per-class accuracy</text></svg>')
    return "\n".join(parts) + "\n"
