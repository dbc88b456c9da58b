import os
import sys

import numpy as np
import pytest

# Add the current directory to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from feature_service import CorpusConfig, Utterance, mel_filterbank  # noqa: E402
from network_service import ModelConfig  # noqa: E402


def make_utterance(rng: np.random.Generator, num_frames: int, num_bins: int, visual_dim: int, labels,
                   utt_id: str = "utt0000", with_interferer: bool = True) -> Utterance:
    clean = rng.uniform(0.0, 1.0, size=(num_frames, num_bins))
    interferer = rng.uniform(0.0, 1.0, size=(num_frames, num_bins))
    return Utterance(
        id=utt_id,
        mixture=clean + interferer,
        clean=clean,
        visual=rng.standard_normal((num_frames, visual_dim)),
        labels=list(labels),
        interferer_clean=interferer if with_interferer else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus_config():
    return CorpusConfig(num_utterances=4, min_frames=10, max_frames=14, num_bins=12, visual_dim=3,
                        num_phones=4, min_phones=2, max_phones=4, min_frames_per_phone=2)


@pytest.fixture
def tiny_config():
    return ModelConfig(hidden=3, enh_layers=2, asr_layers=2, num_bins=6, visual_dim=3, mel_channels=4,
                       num_classes=4)


@pytest.fixture
def tiny_filterbank(tiny_config):
    return mel_filterbank(tiny_config.mel_channels, tiny_config.num_bins)
