import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gendds.errors import CompatibilityError, ContractError, DataError
from gendds.evaluate import (ATTRIBUTES, CHANCE, Probe, accuracy, consistency, eval_consistency, eval_probe,
                             ProbeClassifier, read_clip_dir, train_probe, wrap_pad,
                             write_index)
from gendds.media import write_clip
from gendds.scenes import build_corpus
from gendds.tensor import Tensor
from gendds.text import TagVocabulary


class TestConsistency:
    def test_identical_frames(self):
        frames = np.random.default_rng(0).integers(0, 256, (4, 6, 6, 3), dtype=np.uint8)
        frames[:] = frames[0]
        assert consistency(frames) == 0.0

    def test_uniform_offset(self):
        a = np.full((6, 6, 3), 100, np.uint8)
        assert consistency(np.stack([a, a + 2])) == pytest.approx(2 / 255)

    def test_float_frames_on_unit_scale(self):
        a = np.zeros((1, 3, 4, 4))
        assert consistency(np.concatenate([a - 1.0, a + 1.0])) == 1.0

    def test_single_frame(self):
        with pytest.raises(ContractError):
            consistency(np.zeros((1, 4, 4, 3), np.uint8))

    @settings(max_examples=30)
    @given(st.integers(0, 10_000))
    def test_reversal_invariant_and_bounded(self, seed):
        f = np.random.default_rng(seed).integers(0, 256, (5, 4, 4, 3), dtype=np.uint8)
        c = consistency(f)
        assert c == pytest.approx(consistency(f[::-1]))
        assert 0.0 <= c <= 1.0


def test_wrap_pad_layout():
    x = np.arange(2 * 3, dtype=np.float32).reshape(1, 1, 2, 3)
    out = wrap_pad(Tensor(x)).data[0, 0]
    assert out.shape == (4, 5)
    np.testing.assert_array_equal(out[1:3], [[2, 0, 1, 2, 0], [5, 3, 4, 5, 3]])
    assert not out[0].any() and not out[3].any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 3))
def test_probe_features_invariant_to_wrapped_shift(seed, k):
    # two stride-2 stages: a horizontal roll by a multiple of 4 only permutes pooled columns
    rng = np.random.default_rng(seed)
    model = ProbeClassifier(rng, width=4, rows=4, dtype=np.float64)
    x = rng.uniform(-1, 1, (2, 3, 16, 16))
    a = model.features(Tensor(x)).data
    b = model.features(Tensor(np.roll(x, 4 * k, axis=3))).data
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_chance_levels():
    assert CHANCE["weather"] == pytest.approx(0.20)
    assert CHANCE["traffic"] == pytest.approx(0.25)


def test_accuracy_counts():
    pred = {k: np.array([0, 1, 1, 0]) for k in ATTRIBUTES}
    labels = {k: np.array([0, 1, 0, 0]) for k in ATTRIBUTES}
    report = accuracy(pred, labels)
    assert report["weather"] == {"accuracy": 0.75, "n": 4}


def _clips(root, frames, prompts):
    entries = []
    for i, (clip, prompt) in enumerate(zip(frames, prompts)):
        write_clip(root / f"clip_{i:03d}", clip)
        entries.append({"dir": f"clip_{i:03d}", "prompt": prompt})
    write_index(root, entries)


PROMPT = "outdoors, road, sunny, light traffic, city"


class TestClipFolders:
    def test_read_back(self, tmp_path):
        clip = np.random.default_rng(0).uniform(-1, 1, (1, 3, 3, 8, 8))
        _clips(tmp_path, clip, [PROMPT])
        [(entry, frames)] = read_clip_dir(tmp_path)
        assert entry["prompt"] == PROMPT and frames.shape == (3, 8, 8, 3) and frames.dtype == np.uint8

    def test_missing_index(self, tmp_path):
        with pytest.raises(DataError):
            read_clip_dir(tmp_path)

    def test_paired_report(self, tmp_path):
        rng = np.random.default_rng(0)
        still = np.repeat(rng.uniform(-1, 1, (2, 1, 3, 8, 8)), 3, axis=1)
        noisy = rng.uniform(-1, 1, (2, 3, 3, 8, 8))
        _clips(tmp_path / "a", still, [PROMPT] * 2)
        _clips(tmp_path / "b", noisy, [PROMPT] * 2)
        report = eval_consistency(tmp_path / "a", tmp_path / "b")
        assert report["mean"] == 0.0 and report["paired"] == 2 and report["fraction_lower"] == 1.0
        assert set(report["per_clip"]) == {"clip_000", "clip_001"}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("probe")
    return build_corpus(10, root / "data", 0.8, master_seed=1, frames=2, resolution=16)


class TestProbe:
    def test_train_save_load(self, corpus, tmp_path):
        probe = train_probe(corpus, epochs=1, batch_size=8, width=4)
        assert set(probe.val_accuracy) == set(ATTRIBUTES)
        assert probe.val_accuracy["weather"]["n"] == 4
        probe.to_checkpoint().save(tmp_path / "probe.gdds")
        loaded = Probe.load(tmp_path / "probe.gdds")
        x = np.random.default_rng(0).uniform(-1, 1, (3, 3, 16, 16)).astype(np.float32)
        for k, v in probe.model.predict(x).items():
            np.testing.assert_array_equal(v, loaded.model.predict(x)[k])

    def test_eval_generated(self, corpus, tmp_path):
        probe = train_probe(corpus, epochs=1, batch_size=8, width=4)
        vocab = TagVocabulary.load(corpus.parent / "vocab.txt")
        _clips(tmp_path, np.zeros((2, 2, 3, 16, 16)), [PROMPT] * 2)
        report = eval_probe(tmp_path, probe, vocab)
        assert report["traffic"]["n"] == 4

    def test_vocab_mismatch(self, corpus, tmp_path):
        probe = train_probe(corpus, epochs=0, width=4)
        with pytest.raises(CompatibilityError):
            eval_probe(tmp_path, probe, TagVocabulary(["sunny"]))

    def test_prompt_without_label(self, corpus, tmp_path):
        probe = train_probe(corpus, epochs=0, width=4)
        _clips(tmp_path, np.zeros((1, 2, 3, 16, 16)), ["road, sunny"])
        with pytest.raises(DataError):
            eval_probe(tmp_path, probe, TagVocabulary.load(corpus.parent / "vocab.txt"))
