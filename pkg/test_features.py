import json
import os

import numpy as np
import pytest

from errors import ConfigError, CorpusFormatError, InvalidInputError
from feature_service import (
    EPSILON_D,
    CorpusConfig,
    compute_std_vector,
    hann_window,
    load_corpus,
    mel_filterbank,
    mel_warp,
    save_corpus,
    stft_magnitude,
    synth_corpus,
)
from conftest import make_utterance


# -------------------------------------------------------------------------
# STFT
# -------------------------------------------------------------------------
def test_stft_zero_signal_shape():
    spec = stft_magnitude(np.zeros(512), window_len=256, hop=128)
    assert spec.shape == (3, 129)
    assert np.all(spec == 0.0)


def test_stft_sine_peaks_at_its_bin():
    """A sine at a bin-centre frequency peaks in that bin in every frame"""
    window, k = 256, 10
    n = np.arange(1024)
    samples = np.sin(2 * np.pi * k * n / window)
    spec = stft_magnitude(samples, window_len=window, hop=128)
    assert spec.shape == (7, 129)
    assert np.all(np.argmax(spec, axis=1) == k)

    # direct DFT of the first windowed frame
    frame = samples[:window] * hann_window(window)
    direct = np.array([abs(np.sum(frame * np.exp(-2j * np.pi * b * np.arange(window) / window)))
                       for b in range(window // 2 + 1)])
    np.testing.assert_allclose(spec[0], direct, atol=1e-9)


def test_stft_constant_signal_is_dc():
    spec = stft_magnitude(np.ones(600), window_len=128, hop=64)
    assert np.all(np.argmax(spec, axis=1) == 0)


def test_stft_rejects_short_signal_and_bad_hop():
    with pytest.raises(InvalidInputError):
        stft_magnitude(np.zeros(100), window_len=256, hop=128)
    with pytest.raises(ConfigError):
        stft_magnitude(np.zeros(1000), window_len=64, hop=128)


# -------------------------------------------------------------------------
# MEL FILTERBANK
# -------------------------------------------------------------------------
@pytest.mark.parametrize("channels,bins", [(1, 1), (2, 8), (4, 6), (16, 33), (40, 129), (129, 129)])
def test_mel_filterbank_invariants(channels, bins):
    m = mel_filterbank(channels, bins)
    assert m.shape == (channels, bins)
    assert np.all(m >= 0.0)
    assert np.all(m.max(axis=1) > 0.0)
    assert np.all(m.sum(axis=0) <= 1.0 + 1e-9)


def test_mel_filterbank_rows_unimodal_with_separate_peaks():
    m = mel_filterbank(2, 8)
    for row in m:
        peak = int(np.argmax(row))
        assert np.all(np.diff(row[:peak + 1]) >= -1e-15)
        assert np.all(np.diff(row[peak:]) <= 1e-15)
    assert np.argmax(m[0]) < np.argmax(m[1])


def test_mel_filterbank_identity_and_errors(rng):
    eye = mel_filterbank(5, 5, identity=True)
    s = rng.uniform(size=(3, 5))
    np.testing.assert_array_equal(mel_warp(eye, s), s)
    with pytest.raises(ConfigError):
        mel_filterbank(6, 5)
    with pytest.raises(ConfigError):
        mel_filterbank(4, 5, identity=True)


def test_mel_warp_matches_loop(rng):
    m = rng.uniform(size=(2, 4))
    s = rng.uniform(size=(3, 4))
    expected = np.zeros((3, 2))
    for i in range(3):
        for c in range(2):
            for n in range(4):
                expected[i, c] += m[c, n] * s[i, n]
    np.testing.assert_allclose(mel_warp(m, s), expected, rtol=1e-12)
    assert np.all(mel_warp(m, np.zeros((3, 4))) == 0.0)
    with pytest.raises(InvalidInputError):
        mel_warp(m, rng.uniform(size=(3, 5)))


# -------------------------------------------------------------------------
# STD VECTOR
# -------------------------------------------------------------------------
def test_std_vector_floor_and_two_point(rng):
    flat = make_utterance(rng, 4, 3, 2, [0])
    flat.clean = np.ones((4, 3))
    np.testing.assert_array_equal(compute_std_vector([flat]), np.full(3, EPSILON_D))

    two = make_utterance(rng, 2, 3, 2, [0])
    two.clean = np.array([[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])
    np.testing.assert_allclose(compute_std_vector([two]), np.ones(3))


def test_std_vector_matches_two_pass(rng):
    corpus = [make_utterance(rng, t, 5, 2, [0], utt_id=f"u{t}") for t in (3, 6, 9)]
    frames = np.concatenate([u.clean for u in corpus])
    mean = frames.sum(axis=0) / len(frames)
    var = ((frames - mean) ** 2).sum(axis=0) / len(frames)
    np.testing.assert_allclose(compute_std_vector(corpus), np.sqrt(var), rtol=0, atol=1e-10)
    with pytest.raises(InvalidInputError):
        compute_std_vector([])


# -------------------------------------------------------------------------
# SYNTHETIC CORPUS
# -------------------------------------------------------------------------
def test_synth_corpus_deterministic(small_corpus_config):
    a = synth_corpus(small_corpus_config, seed=5)
    b = synth_corpus(small_corpus_config, seed=5)
    c = synth_corpus(small_corpus_config, seed=6)
    for x, y in zip(a, b):
        assert x.id == y.id and x.labels == y.labels
        assert x.mixture.tobytes() == y.mixture.tobytes()
        assert x.visual.tobytes() == y.visual.tobytes()
    assert any(x.mixture.shape != z.mixture.shape or not np.array_equal(x.mixture, z.mixture)
               for x, z in zip(a, c))


def test_synth_corpus_invariants(small_corpus_config):
    for utt in synth_corpus(small_corpus_config, seed=11):
        utt.validate()
        assert utt.mixture.shape[1] == small_corpus_config.num_bins
        assert utt.visual.shape == (utt.num_frames, small_corpus_config.visual_dim)
        np.testing.assert_allclose(utt.mixture - utt.clean, utt.interferer_clean, atol=1e-12)
        assert all(a != b for a, b in zip(utt.labels, utt.labels[1:]))
        assert small_corpus_config.min_phones <= len(utt.labels) <= small_corpus_config.max_phones


def test_synth_corpus_zero_interferer(small_corpus_config):
    cfg = small_corpus_config.model_copy(update={"interferer_gain": 0.0})
    for utt in synth_corpus(cfg, seed=2):
        np.testing.assert_array_equal(utt.mixture, utt.clean)


def test_synth_corpus_infeasible_config():
    cfg = CorpusConfig(num_utterances=1, min_frames=6, max_frames=8, max_phones=4, min_phones=2,
                       min_frames_per_phone=2)
    with pytest.raises(ConfigError):
        synth_corpus(cfg, seed=0)


# -------------------------------------------------------------------------
# CORPUS FILES
# -------------------------------------------------------------------------
def test_corpus_round_trip(tmp_path, small_corpus_config):
    corpus = synth_corpus(small_corpus_config, seed=3)
    manifest = save_corpus(corpus, str(tmp_path / "c"))
    assert os.path.basename(manifest) == "manifest.json"
    loaded = load_corpus(str(tmp_path / "c"))
    assert [u.id for u in loaded] == [u.id for u in corpus]
    for x, y in zip(corpus, loaded):
        assert x.labels == y.labels
        for name in ("mixture", "clean", "visual", "interferer_clean"):
            assert getattr(x, name).tobytes() == getattr(y, name).tobytes()


def test_corpus_without_interferer_round_trip(tmp_path, rng):
    corpus = [make_utterance(rng, 6, 4, 2, [0, 1], utt_id="a", with_interferer=False)]
    save_corpus(corpus, str(tmp_path), phones=["aa", "iy"])
    loaded = load_corpus(str(tmp_path))
    assert loaded[0].interferer_clean is None
    np.testing.assert_array_equal(loaded[0].clean, corpus[0].clean)


def test_truncated_payload_names_utterance(tmp_path, small_corpus_config):
    corpus = synth_corpus(small_corpus_config, seed=3)
    save_corpus(corpus, str(tmp_path))
    path = tmp_path / f"{corpus[1].id}.bin"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CorpusFormatError, match=corpus[1].id):
        load_corpus(str(tmp_path))


def test_header_dims_disagree(tmp_path, small_corpus_config):
    corpus = synth_corpus(small_corpus_config, seed=3)
    save_corpus(corpus, str(tmp_path))
    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["utterances"][0]["N"] += 1
    manifest["dims"]["N"] += 1
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CorpusFormatError, match=corpus[0].id):
        load_corpus(str(tmp_path))


def test_unknown_phone_and_missing_manifest(tmp_path, small_corpus_config):
    corpus = synth_corpus(small_corpus_config, seed=3)
    save_corpus(corpus, str(tmp_path / "c"))
    (tmp_path / "c" / f"{corpus[0].id}.phn").write_text("zz\n")
    with pytest.raises(CorpusFormatError, match="zz"):
        load_corpus(str(tmp_path / "c"))
    with pytest.raises(CorpusFormatError):
        load_corpus(str(tmp_path / "missing"))


def test_utterance_validate_rejects_long_labels(rng):
    utt = make_utterance(rng, 3, 4, 2, [0, 1, 0])
    with pytest.raises(InvalidInputError):
        utt.validate()
