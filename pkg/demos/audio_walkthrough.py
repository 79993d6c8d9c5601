"""The full audio chain on a small synthetic dataset.

Synthesizes recordings, cuts them into half-second windows, renders
spectrograms, pre-trains the encoder with SimCLR for a few epochs and then
runs discovery. Expect two to three minutes on one core. With fewer
users or epochs the encoder is under-trained and one novel class tends to
get absorbed by its neighbours.

    python demos/audio_walkthrough.py [workdir]
"""
import sys
import tempfile
from collections import Counter
from pathlib import Path

from oad.config import RunConfig
from oad.evalrun import mask_labels, per_class_accuracy, read_manifest, class_index
from oad.nncore import load_checkpoint
from oad.pipeline import featurize_dir, pretrain_stage, segment_manifest, train_discovery
from oad.synthgen import SynthSpec, synth_dataset

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="oad-demo-"))
cfg = RunConfig()
cfg.augment.mode = "aa"
cfg.simclr.epochs = 20

rows = synth_dataset(SynthSpec(seed=0), work / "synth")
print(f"synthesized {len(rows)} recordings in {work / 'synth'}")

windows = segment_manifest(work / "synth" / "manifest.csv", work / "seg", cfg)
print("windows per class:", dict(Counter(w.cls for w in windows)))

kept, dropped = featurize_dir(work / "seg", work / "feat", cfg)
print(f"kept {len(kept)} windows, dropped {len(dropped)} dark spectrograms")

ckpt, losses = pretrain_stage(work / "feat" / "index.csv", work / "model.clpd", cfg)
print(f"contrastive loss {losses[0][2]:.3f} -> {losses[-1][2]:.3f}")

rows = read_manifest(work / "feat" / "index.csv")
labels = mask_labels(rows, cfg.opencon.label_fraction, seed=0)
_, result, _ = train_discovery(load_checkpoint(work / "model.clpd"), rows, labels, cfg, seed=0)
truth = [class_index(r.cls) for r in rows]
scores = per_class_accuracy(result.assignments, truth, 2, 4)
for c, name in enumerate(("healthy", "flu", "cc", "cb")):
    print(f"{name:8s} accuracy {scores[c].accuracy:.3f}")
