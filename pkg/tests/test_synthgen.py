import numpy as np
import pytest

from oad.errors import DataError
from oad.evalrun import read_manifest
from oad.features import log_mel
from oad.segment import extract_events, load_audio
from oad.synthgen import SynthSpec, default_classes, synth_dataset, synth_embeddings


def small_spec(seed=0, users=2):
    spec = SynthSpec(seed=seed)
    for c in spec.classes:
        c.n_users = users
    return spec


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return out, synth_dataset(SynthSpec(), out)


def test_default_counts(dataset):
    out, rows = dataset
    per_class = {c.name: c.n_users * c.recordings_per_user for c in default_classes()}
    assert len(rows) == sum(per_class.values())
    back = read_manifest(out / "manifest.csv")
    assert len(back) == len(rows)
    for name, n in per_class.items():
        assert sum(r.cls == name for r in back) == n
        assert len({r.user_id for r in back if r.cls == name}) == 10


def test_recordings_meet_segmenter_preconditions(dataset):
    _, rows = dataset
    for r in rows[::5]:
        clip = load_audio(r.path)
        assert clip.sample_rate == 44100
        assert np.abs(clip.samples).max() <= 1.0
        if r.cls != "cb":
            assert len(extract_events(clip)) >= 2


def test_fixed_seed_is_byte_identical(tmp_path):
    a = synth_dataset(small_spec(4, 1), tmp_path / "a")
    b = synth_dataset(small_spec(4, 1), tmp_path / "b")
    for ra, rb in zip(a, b):
        assert open(ra.path, "rb").read() == open(rb.path, "rb").read()
    c = synth_dataset(small_spec(5, 1), tmp_path / "c")
    assert open(a[0].path, "rb").read() != open(c[0].path, "rb").read()


def test_classes_have_distinct_spectral_peaks(dataset):
    _, rows = dataset
    peak = {}
    for cls in ("healthy", "cb"):
        r = next(r for r in rows if r.cls == cls)
        clip = load_audio(r.path)
        mel = log_mel(clip.samples).values
        peak[cls] = int(mel.mean(axis=1).argmax())
    assert peak["healthy"] != peak["cb"]


def test_spec_validation():
    with pytest.raises(DataError, match="unknown"):
        SynthSpec.from_dict({"bogus": 1})
    spec = SynthSpec.from_dict({"classes": [{"name": "flu", "center_hz": 1500.0}]})
    assert spec.classes[0].center_hz == 1500.0 and spec.classes[0].tone_level == 0.6
    with pytest.raises(DataError, match="distinct"):
        SynthSpec.from_dict({"classes": [{"name": "flu", "center_hz": 1200.0}, {"name": "healthy"}]})
    with pytest.raises(DataError, match="Nyquist"):
        SynthSpec.from_dict({"classes": [{"name": "x", "center_hz": 30000.0, "bandwidth_hz": 10.0}]})


def test_embeddings_zero_noise_are_means():
    x, y = synth_embeddings(5, 0.0, 1, dim=6)
    np.testing.assert_allclose(x, np.eye(6)[y])


def test_embeddings_separable_and_unit():
    x, y = synth_embeddings(250, 0.1, 2)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0)
    assert ((x @ np.eye(16)[:4].T).argmax(axis=1) == y).mean() == 1.0
    x2, _ = synth_embeddings(250, 0.1, 2)
    assert x.tobytes() == x2.tobytes()


def test_embedding_means_checked():
    with pytest.raises(ValueError, match="unit"):
        synth_embeddings(2, means=[[2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="60 degrees"):
        synth_embeddings(2, means=[[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])
