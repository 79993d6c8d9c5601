"""Novel-class discovery on synthetic embeddings, no audio involved.

Four well-separated Gaussian clusters on the unit sphere stand in for encoder
outputs. Two classes are 90% labeled and two are hidden; discovery has to
place prototypes for the hidden ones and route points between the groups.

    python demos/embedding_benchmark.py
"""
import numpy as np

from oad.evalrun import per_class_accuracy
from oad.opencon import IdentityBackbone, LabelState, OpenConConfig, discover
from oad.synthgen import synth_embeddings

NAMES = ("healthy", "flu", "cc", "cb")

x, y = synth_embeddings(n_per_class=400, sigma=0.15, seed=0)
rng = np.random.default_rng(0)
labels = np.full(len(y), -1)
for c in (0, 1):
    idx = rng.permutation(np.flatnonzero(y == c))
    labels[idx[:360]] = c
print(f"{len(y)} embeddings, {(labels >= 0).sum()} labeled")

result = discover(IdentityBackbone(), x, LabelState(labels), OpenConConfig(encoder_mode="frozen"))
print(f"OOD threshold lambda = {result.lam:.3f}")
for epoch, loss, lam in result.history[::10]:
    print(f"  epoch {epoch:2d}  loss {loss:.3f}")

scores = per_class_accuracy(result.assignments, y, 2, 4)
for c, name in enumerate(NAMES):
    print(f"{name:8s} accuracy {scores[c].accuracy:.3f}  ({scores[c].correct}/{scores[c].n})")
