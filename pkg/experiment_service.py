import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, InvalidInputError
from experiment_config import ExperimentConfig, resolve_mapping_path
from feature_service import (
    Utterance,
    compute_std_vector,
    load_corpus,
    mel_filterbank,
    phone_inventory,
    read_manifest,
    save_corpus,
    synth_corpus,
)
from network_service import (
    GradCheckReport,
    ModelConfig,
    ParameterStore,
    grad_check,
    init_parameters,
    load_checkpoint,
    load_std_vector,
    model_forward,
    save_checkpoint,
)
from scoring_service import (
    PhoneMapping,
    ScoreReport,
    ctc_greedy_decode,
    emit_curves,
    emit_steps,
    load_mapping,
    loss_gap,
    score,
    switch_divergence,
)
from training_service import JointTrainer, TrainingHistory, loss_objectives

# Configure logging
logger = logging.getLogger(__name__)


def build_filterbank(config: ModelConfig) -> np.ndarray:
    return mel_filterbank(config.mel_channels, config.num_bins, config.sample_rate, identity=config.mel_identity)


def check_corpus_dims(config: ModelConfig, corpus: List[Utterance], num_classes: Optional[int] = None) -> None:
    """Raise ConfigError when a corpus cannot feed a model built from `config`."""
    if not corpus:
        raise ConfigError("corpus is empty")
    first = corpus[0]
    if first.mixture.shape[1] != config.num_bins or first.visual.shape[1] != config.visual_dim:
        raise ConfigError(
            f"corpus has N={first.mixture.shape[1]}, M={first.visual.shape[1]}; "
            f"model expects N={config.num_bins}, M={config.visual_dim}"
        )
    if num_classes is not None and num_classes != config.num_classes:
        raise ConfigError(f"corpus has P={num_classes} classes, model expects {config.num_classes}")
    if config.enh_streams > 1 and any(utt.interferer_clean is None for utt in corpus):
        raise ConfigError("multi-stream enhancement needs corpora that carry interferer targets")


def file_sha256(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


@dataclass
class TrainResult:
    output_dir: str
    history: TrainingHistory
    checkpoint: str
    phase_checkpoints: List[str]
    curves: str
    updates: int


class ExperimentService:
    """Runs the experiment commands for one validated ExperimentConfig."""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[str] = None):
        self.config = config
        self.output_dir = config.resolved_output_dir(output_dir)
        logger.info(f"Experiment service initialized (output_dir={self.output_dir}, seed={config.seed})")

    # ---------------------------------------------------------------------
    # corpora
    # ---------------------------------------------------------------------
    def synthesize(self) -> Tuple[List[Utterance], List[Utterance], List[str]]:
        """Train and valid splits of the configured synthetic corpus, plus its phone symbols."""
        source = self.config.corpus
        if source.synth is None:
            raise ConfigError("this experiment reads corpora from disk; it has no synthetic corpus section")
        total = source.synth.num_utterances + source.valid_utterances
        corpus = synth_corpus(source.synth.model_copy(update={"num_utterances": total}), self.config.seed)
        phones = phone_inventory(source.synth.num_phones)
        return corpus[:source.synth.num_utterances], corpus[source.synth.num_utterances:], phones

    def load_corpora(self) -> Tuple[List[Utterance], List[Utterance], List[str]]:
        source = self.config.corpus
        if source.synth is not None:
            train, valid, phones = self.synthesize()
        else:
            train_manifest = read_manifest(source.train_path)
            valid_manifest = read_manifest(source.valid_path)
            if train_manifest["phones"] != valid_manifest["phones"]:
                raise ConfigError("train and valid corpora use different phone inventories")
            train, valid = load_corpus(source.train_path), load_corpus(source.valid_path)
            phones = list(train_manifest["phones"])
        check_corpus_dims(self.config.model, train, len(phones) + 1)
        check_corpus_dims(self.config.model, valid, len(phones) + 1)
        return train, valid, phones

    def gen_corpus(self, out_dir: Optional[str] = None) -> Dict[str, Any]:
        """Write the synthetic train/valid corpora to `<out>/train` and `<out>/valid`."""
        out_dir = out_dir or self.output_dir
        train, valid, phones = self.synthesize()
        summary = {"output_dir": out_dir, "phones": len(phones), "splits": {}}
        for split, corpus in (("train", train), ("valid", valid)):
            manifest_path = save_corpus(corpus, os.path.join(out_dir, split), phones=phones)
            summary["splits"][split] = {
                "manifest": manifest_path,
                "utterances": len(corpus),
                "frames": int(sum(utt.num_frames for utt in corpus)),
                "sha256": file_sha256(manifest_path),
            }
        logger.info(f"Generated corpus under {out_dir}: {len(train)} train / {len(valid)} valid utterances")
        return summary

    # ---------------------------------------------------------------------
    # training
    # ---------------------------------------------------------------------
    def train(self) -> TrainResult:
        config = self.config
        out_dir = self.output_dir
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)

        train, valid, _ = self.load_corpora()
        filterbank = build_filterbank(config.model)
        d = compute_std_vector(train)
        store = init_parameters(config.model, config.seed)
        trainer = JointTrainer(config.model, config.optimizer, filterbank, d, seed=config.seed)

        phase_checkpoints = []

        def on_phase_end(phase_index: int, phase: str, phase_store: ParameterStore, epoch: int) -> None:
            path = os.path.join(out_dir, "checkpoints", f"phase{phase_index:02d}_{phase}")
            save_checkpoint(phase_store, config.model, path, std_vector=d)
            phase_checkpoints.append(path)
            logger.info(f"Phase {phase_index} ({phase}) ended at epoch {epoch}")

        history = trainer.run_strategy(config.schedule, store, train, valid, on_phase_end=on_phase_end)
        curves = emit_curves(history, os.path.join(out_dir, "history.csv"))
        emit_steps(history, os.path.join(out_dir, "steps.csv"))
        checkpoint = save_checkpoint(store, config.model, os.path.join(out_dir, "checkpoint"), std_vector=d)

        summary = {
            "epochs": len(history),
            "updates": trainer.state.t,
            "final": vars(history.records[-1]),
            "loss_gap": loss_gap(history),
            "switch_divergence": switch_divergence(history),
            "checkpoint_sha256": store.checksum(),
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        logger.info(f"Training finished: {len(history)} epochs, {trainer.state.t} updates, outputs in {out_dir}")
        return TrainResult(output_dir=out_dir, history=history, checkpoint=checkpoint,
                           phase_checkpoints=phase_checkpoints, curves=curves, updates=trainer.state.t)

    # ---------------------------------------------------------------------
    # gradient check
    # ---------------------------------------------------------------------
    def grad_check(self) -> GradCheckReport:
        """Finite-difference check of both losses on the first training utterance(s)."""
        config = self.config
        train, _, _ = self.load_corpora()
        filterbank = build_filterbank(config.model)
        d = compute_std_vector(train)
        store = init_parameters(config.model, config.seed)
        check = config.grad_check

        errors: Dict[str, float] = {}
        for utt in train[:check.utterances]:
            model_fn, value_fn = loss_objectives(config.model, utt, filterbank, d)
            report = grad_check(model_fn, store, tolerance=check.tolerance, eps=check.eps,
                                floor=check.floor, value_fn=value_fn)
            for name, err in report.errors.items():
                errors[name] = max(err, errors.get(name, 0.0))
        return GradCheckReport(errors=errors, tolerance=check.tolerance)


# -------------------------------------------------------------------------
# EVALUATION
# -------------------------------------------------------------------------
def evaluate_checkpoint(checkpoint: str, corpus_path: str, mapping: Optional[str] = None,
                        out_dir: Optional[str] = None) -> Dict[str, Optional[ScoreReport]]:
    """
    Decode `corpus_path` with a saved model and score it on the raw phone
    inventory and, when `mapping` is given, after mapping both sides.
    Writes score.json into `out_dir` when one is given.
    """
    phone_map: Optional[PhoneMapping] = load_mapping(resolve_mapping_path(mapping)) if mapping else None
    store, config = load_checkpoint(checkpoint)
    manifest = read_manifest(corpus_path)
    phones = list(manifest["phones"])
    corpus = load_corpus(corpus_path)
    check_corpus_dims(config, corpus, len(phones) + 1)

    d = load_std_vector(checkpoint)
    if d is None:
        logger.warning(f"Checkpoint {checkpoint} carries no std vector; using the evaluation corpus statistics")
        d = compute_std_vector(corpus)
    filterbank = build_filterbank(config)

    refs, hyps = [], []
    for utt in corpus:
        out = model_forward(config, store, utt, filterbank, d)
        hyp = ctc_greedy_decode(out.logits, blank=config.blank)
        refs.append([phones[i] for i in utt.labels])
        hyps.append([phones[i] for i in hyp])
    ids = [utt.id for utt in corpus]

    reports = {"raw": score(refs, hyps, ids=ids), "mapped": None}
    if phone_map is not None:
        try:
            reports["mapped"] = score(refs, hyps, mapping=phone_map, ids=ids)
        except InvalidInputError as e:
            raise ConfigError(f"mapping '{phone_map.name}' does not cover the corpus inventory: {e}")
    logger.info(f"Evaluated {len(corpus)} utterances: PER={reports['raw'].per:.2f}"
                + (f", mapped PER={reports['mapped'].per:.2f}" if reports["mapped"] else ""))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        payload = {name: report.model_dump() if report else None for name, report in reports.items()}
        with open(os.path.join(out_dir, "score.json"), "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    return reports
