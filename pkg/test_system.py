"""
End-to-end trend checks on seeded synthetic corpora at desk scale.

These train real models for minutes each and are deselected by default;
run them with `pytest -m slow`.
"""

import json
import os

import pytest

from experiment_config import parse_experiment_config
from experiment_service import ExperimentService, evaluate_checkpoint
from scoring_service import switch_divergence

HERE = os.path.dirname(os.path.abspath(__file__))

pytestmark = pytest.mark.slow


def desk_config(name, **updates):
    with open(os.path.join(HERE, "configs", name)) as f:
        data = json.load(f)
    for dotted, value in updates.items():
        node = data
        *path, leaf = dotted.split(".")
        for key in path:
            node = node.setdefault(key, {})
        node[leaf] = value
    return data


def train_and_score(data, tmp_path, seed=None):
    """Train, then score the checkpoint on the training split written to disk."""
    config = parse_experiment_config(data, seed=seed, output_dir=str(tmp_path / "run"))
    service = ExperimentService(config)
    service.gen_corpus(str(tmp_path / "data"))
    result = service.train()
    reports = evaluate_checkpoint(result.checkpoint, str(tmp_path / "data" / "train"))
    return result, reports["raw"].per


@pytest.mark.parametrize("freeze", [False, True])
def test_enhancement_loss_after_phase_switch(freeze, tmp_path):
    data = desk_config("desk_two_phases.json", **{"corpus.synth.num_utterances": 50,
                                                   "schedule.strategy.freeze": freeze})
    config = parse_experiment_config(data, output_dir=str(tmp_path))
    result = ExperimentService(config).train()

    switch = switch_divergence(result.history)
    assert switch is not None
    _, ratio = switch
    if freeze:
        assert abs(ratio - 1.0) < 0.01
    else:
        assert ratio >= 1.5


def test_joint_model_beats_mixed_audio_baseline(tmp_path):
    wins = 0
    for seed in range(5):
        _, joint_per = train_and_score(desk_config("desk_alternated.json"), tmp_path / f"joint{seed}", seed)
        _, asr_per = train_and_score(desk_config("desk_asr_mixture.json"), tmp_path / f"asr{seed}", seed)
        wins += joint_per < asr_per
    assert wins >= 4


def test_joint_model_overfits_small_corpus(tmp_path):
    data = desk_config("desk_alternated.json", **{"corpus.synth.num_utterances": 20,
                                                   "schedule.total_epochs": 500})
    result, per = train_and_score(data, tmp_path)
    assert len(result.history) == 500
    assert per <= 10.0
