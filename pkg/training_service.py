import logging
import math
from dataclasses import dataclass, field
from typing import Annotated, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigError, InfeasibleAlignmentError, InvalidInputError, NumericError
from feature_service import Utterance
from loss_service import JointLossConfig, LossValue, ctc_loss, joint_loss, loss_pair_summary, mse_loss, pit_mse
from network_service import ModelConfig, ModelOutput, ParameterStore, backward, model_forward
from scoring_service import ctc_greedy_decode, score

# Configure logging
logger = logging.getLogger(__name__)

MASKS = ("all", "asr_only", "enh_only")
ENH, ASR, JOINT = "ENH", "ASR", "JOINT"
VALID_MASKS = {ENH: ("enh_only",), ASR: ("all", "asr_only"), JOINT: ("all",)}


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(5.0, gt=0.0)


class PlateauConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patience: int = Field(10, ge=1)
    min_delta: float = Field(0.005, ge=0.0)


class JointLossStrategy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["joint"] = "joint"
    loss: JointLossConfig = JointLossConfig()


class AlternatedStrategy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["alternated"] = "alternated"
    epochs_per_phase: int = Field(10, ge=1)
    freeze: bool = False


class TwoFullPhasesStrategy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["two_full_phases"] = "two_full_phases"
    freeze: bool = False
    plateau: PlateauConfig = PlateauConfig()
    max_enh_epochs: Optional[int] = Field(None, ge=1)


class AsrOnlyStrategy(BaseModel):
    """Baseline: optimize L_asr on an ASR-only model."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["asr_only"] = "asr_only"


Strategy = Annotated[
    Union[JointLossStrategy, AlternatedStrategy, TwoFullPhasesStrategy, AsrOnlyStrategy],
    Field(discriminator="kind"),
]


class TrainingSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: Strategy = JointLossStrategy()
    total_epochs: int = Field(50, ge=1)
    seed: int = 0


# -------------------------------------------------------------------------
# ADAM
# -------------------------------------------------------------------------
@dataclass
class OptimizerState:
    """Adam moments per array. `t` counts updates; `steps` counts them per array for bias correction."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def create(cls, store: ParameterStore, cfg: Optional[OptimizerConfig] = None) -> "OptimizerState":
        cfg = cfg or OptimizerConfig()
        state = cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        for key, array in store.items():
            state.m[key] = np.zeros_like(array)
            state.v[key] = np.zeros_like(array)
            state.steps[key] = 0
        return state


def mask_allows(key: str, mask: str) -> bool:
    if mask not in MASKS:
        raise InvalidInputError(f"update mask must be one of {MASKS}, got '{mask}'")
    if mask == "all":
        return True
    return key.startswith("asr/") if mask == "asr_only" else key.startswith("enh/")


def adam_step(store: ParameterStore, grads: ParameterStore, state: OptimizerState,
              update_mask: str = "all") -> Tuple[ParameterStore, OptimizerState]:
    """
    One bias-corrected Adam update, in place. Arrays excluded by the mask
    keep their values, their moment accumulators and their step count, so
    an array first updated after a frozen phase gets a fully corrected step.
    """
    keys = [key for key in store.keys() if mask_allows(key, update_mask)]
    for key in keys:
        if not np.all(np.isfinite(grads[key])):
            raise NumericError(f"non-finite gradient in {key}")

    state.t += 1
    for key in keys:
        step = state.steps.get(key, 0) + 1
        state.steps[key] = step
        bc1 = 1.0 - state.beta1 ** step
        bc2 = 1.0 - state.beta2 ** step
        g = grads[key]
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param = store[key]
        param -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return store, state


def clip_global_norm(grads: ParameterStore, max_norm: Optional[float], update_mask: str = "all") -> float:
    """Rescale the masked-in gradients so their joint L2 norm is at most max_norm; returns the pre-clip norm."""
    keys = [key for key in grads.keys() if mask_allows(key, update_mask)]
    norm = math.sqrt(math.fsum(float(np.sum(grads[key] * grads[key])) for key in keys))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for key in keys:
            grads[key] *= factor
        logger.debug(f"Clipped gradient norm {norm:.4g} -> {max_norm:g}")
    return norm


def plateau_detect(values: Sequence[float], cfg: PlateauConfig) -> bool:
    """
    True once the best value has gone `patience` consecutive epochs without
    a relative improvement of at least min_delta.
    """
    if not values:
        raise InvalidInputError("plateau detection needs at least one epoch")
    best = values[0]
    stale = 0
    for value in values[1:]:
        if value < best - cfg.min_delta * abs(best):
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= cfg.patience


# -------------------------------------------------------------------------
# HISTORY
# -------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lam: Optional[float]
    train_enh: float
    train_asr: float
    valid_enh: float
    valid_asr: float
    valid_per: float


@dataclass
class StepRecord:
    utt_id: str
    l_enh: float
    l_asr: float
    lam: Optional[float] = None
    epoch: int = 0


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if record.epoch != len(self.records):
            raise InvalidInputError(f"epoch {record.epoch} recorded out of order (expected {len(self.records)})")
        self.records.append(record)

    def phases(self) -> List[str]:
        return [rec.phase for rec in self.records]

    def column(self, name: str) -> List[float]:
        return [getattr(rec, name) for rec in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class EpochResult:
    train_enh: float
    train_asr: float
    steps: List[StepRecord]
    skipped: int

    @property
    def updates(self) -> int:
        return len(self.steps)

    @property
    def lam(self) -> Optional[float]:
        lams = [s.lam for s in self.steps if s.lam is not None]
        return math.fsum(lams) / len(lams) if lams else None


@dataclass
class Evaluation:
    valid_enh: float
    valid_asr: float
    per: float
    hypotheses: List[List[int]]


# -------------------------------------------------------------------------
# TRAINER
# -------------------------------------------------------------------------
def enhancement_loss(config: ModelConfig, out: ModelOutput, utt: Utterance) -> LossValue:
    """L_enh of one forward pass: MSE, PIT-MSE for multi-stream models, or the input's MSE for ASR-only models."""
    if config.architecture != "joint":
        # Reference line for ASR-only models: the unenhanced input against the clean target.
        audio = utt.clean if config.audio_source == "clean" else utt.mixture
        return mse_loss(audio, utt.clean)
    if config.enh_streams > 1:
        loss, _ = pit_mse(out.y_hat, [utt.clean, utt.interferer_clean])
        return loss
    return mse_loss(out.y_hat, utt.clean)


def loss_objectives(config: ModelConfig, utt: Utterance, filterbank: np.ndarray,
                    d: np.ndarray) -> Tuple[Callable, Callable]:
    """
    (model_fn, value_fn) for grad_check: both return one entry per
    optimizable loss, "asr" always and "enh" for the joint model.
    """
    def value_fn(store: ParameterStore) -> Dict[str, float]:
        out = model_forward(config, store, utt, filterbank, d)
        values = {"asr": ctc_loss(out.logits, utt.labels, blank=config.blank).value}
        if config.architecture == "joint":
            values["enh"] = enhancement_loss(config, out, utt).value
        return values

    def model_fn(store: ParameterStore) -> Dict[str, Tuple[float, ParameterStore]]:
        out = model_forward(config, store, utt, filterbank, d)
        l_asr = ctc_loss(out.logits, utt.labels, blank=config.blank)
        result = {"asr": (l_asr.value, backward(store, out.cache, d_logits=l_asr.grad))}
        if config.architecture == "joint":
            l_enh = enhancement_loss(config, out, utt)
            result["enh"] = (l_enh.value, backward(store, out.cache, d_y_hat=l_enh.grad))
        return result

    return model_fn, value_fn


class JointTrainer:
    """
    Epoch driver for the joint (or ASR-only baseline) model: measures both
    losses on every utterance, routes the gradient of the phase objective
    and applies masked Adam updates.
    """

    def __init__(self, config: ModelConfig, optimizer: OptimizerConfig, filterbank: np.ndarray,
                 d: np.ndarray, seed: int = 0):
        self.config = config
        self.optimizer = optimizer
        self.filterbank = filterbank
        self.d = d
        self.seed = seed
        self.state: Optional[OptimizerState] = None
        logger.info(f"Trainer ready: {config.architecture} model, hidden={config.hidden}, "
                    f"lr={optimizer.lr:g}, clip={optimizer.clip_norm}, seed={seed}")

    def measure(self, store: ParameterStore, utt: Utterance) -> Tuple[ModelOutput, LossValue, Optional[LossValue]]:
        out = model_forward(self.config, store, utt, self.filterbank, self.d)
        l_enh = enhancement_loss(self.config, out, utt)
        try:
            l_asr = ctc_loss(out.logits, utt.labels, blank=self.config.blank)
        except InfeasibleAlignmentError as e:
            logger.warning(f"Skipping {utt.id}: {e}")
            l_asr = None
        return out, l_enh, l_asr

    def _check_objective(self, objective: str, mask: str) -> None:
        if objective not in VALID_MASKS:
            raise ConfigError(f"unknown objective '{objective}'")
        if mask not in VALID_MASKS[objective]:
            raise ConfigError(f"objective {objective} cannot run with update mask '{mask}'")
        if self.config.architecture != "joint" and objective != ASR:
            raise ConfigError(f"an ASR-only model has no enhancement branch for objective {objective}")

    def run_epoch(self, store: ParameterStore, corpus: Sequence[Utterance], objective: str, mask: str,
                  state: OptimizerState, epoch: int = 0, loss_cfg: Optional[JointLossConfig] = None) -> EpochResult:
        """One pass over `corpus` in seeded shuffled order, one update per utterance."""
        self._check_objective(objective, mask)
        if objective == JOINT and loss_cfg is None:
            loss_cfg = JointLossConfig()

        order = np.random.default_rng([self.seed, epoch]).permutation(len(corpus))
        steps = []
        skipped = 0
        for index in order:
            utt = corpus[int(index)]
            out, l_enh, l_asr = self.measure(store, utt)
            if l_asr is None:
                skipped += 1
                continue

            lam = None
            if objective == ENH:
                grads = backward(store, out.cache, d_y_hat=l_enh.grad)
            elif objective == ASR:
                grads = backward(store, out.cache, d_logits=l_asr.grad)
            else:
                combined = joint_loss(l_enh, l_asr, loss_cfg)
                lam = combined.lam
                grads = backward(store, out.cache, d_y_hat=combined.enh_grad, d_logits=combined.asr_grad)

            clip_global_norm(grads, self.optimizer.clip_norm, mask)
            adam_step(store, grads, state, mask)
            steps.append(StepRecord(utt_id=utt.id, l_enh=l_enh.value, l_asr=l_asr.value, lam=lam,
                                    epoch=epoch))
            logger.debug(f"{utt.id}: L_enh={l_enh.value:.6g} L_asr={l_asr.value:.6g} lambda={lam}")

        if skipped:
            logger.warning(f"Epoch {epoch}: skipped {skipped} utterance(s) with infeasible CTC alignment")
        train_enh, train_asr = loss_pair_summary([(s.l_enh, s.l_asr) for s in steps])
        return EpochResult(train_enh=train_enh, train_asr=train_asr, steps=steps, skipped=skipped)

    def evaluate(self, store: ParameterStore, corpus: Sequence[Utterance]) -> Evaluation:
        """Mean L_enh, mean L_asr (feasible utterances) and greedy-decoding PER on `corpus`."""
        if not corpus:
            raise InvalidInputError("cannot evaluate on an empty corpus")
        enh_values, asr_values, hyps = [], [], []
        for utt in corpus:
            out, l_enh, l_asr = self.measure(store, utt)
            enh_values.append(l_enh.value)
            if l_asr is not None:
                asr_values.append(l_asr.value)
            hyps.append(ctc_greedy_decode(out.logits, blank=self.config.blank))
        report = score([utt.labels for utt in corpus], hyps, ids=[utt.id for utt in corpus])
        valid_asr = math.fsum(asr_values) / len(asr_values) if asr_values else float("nan")
        return Evaluation(valid_enh=math.fsum(enh_values) / len(enh_values), valid_asr=valid_asr,
                          per=report.per, hypotheses=hyps)

    def run_strategy(self, schedule: TrainingSchedule, store: ParameterStore, train: Sequence[Utterance],
                     valid: Sequence[Utterance],
                     on_phase_end: Optional[Callable[[int, str, ParameterStore, int], None]] = None) -> TrainingHistory:
        """
        Run `schedule.total_epochs` epochs of the configured strategy.

        `on_phase_end(phase_index, phase_tag, store, last_epoch)` is called
        whenever a phase block ends, including after the final epoch.
        """
        strategy = schedule.strategy
        if self.config.architecture != "joint" and strategy.kind != "asr_only":
            raise ConfigError(f"strategy '{strategy.kind}' needs the joint architecture")
        if self.config.architecture == "joint" and strategy.kind == "asr_only":
            raise ConfigError("the asr_only strategy trains ASR-only baseline models")

        self.seed = schedule.seed
        self.state = OptimizerState.create(store, self.optimizer)
        history = TrainingHistory()
        switched = False
        phase_index = 0
        logger.info(f"Running strategy '{strategy.kind}' for {schedule.total_epochs} epochs")

        for epoch in range(schedule.total_epochs):
            if strategy.kind == "joint":
                phase, mask = JOINT, "all"
            elif strategy.kind == "asr_only":
                phase, mask = ASR, "all"
            elif strategy.kind == "alternated":
                phase = ENH if (epoch // strategy.epochs_per_phase) % 2 == 0 else ASR
                mask = "enh_only" if phase == ENH else ("asr_only" if strategy.freeze else "all")
            else:
                phase = ASR if switched else ENH
                mask = "enh_only" if phase == ENH else ("asr_only" if strategy.freeze else "all")

            loss_cfg = strategy.loss if strategy.kind == "joint" else None
            result = self.run_epoch(store, train, phase, mask, self.state, epoch, loss_cfg)
            evaluation = self.evaluate(store, valid)
            record = EpochRecord(
                epoch=epoch, phase=phase, lam=result.lam,
                train_enh=result.train_enh, train_asr=result.train_asr,
                valid_enh=evaluation.valid_enh, valid_asr=evaluation.valid_asr, valid_per=evaluation.per,
            )
            history.append(record)
            history.steps.extend(result.steps)
            logger.info(f"Epoch {epoch} [{phase}] train L_enh={record.train_enh:.6g} L_asr={record.train_asr:.6g} "
                        f"| valid L_enh={record.valid_enh:.6g} L_asr={record.valid_asr:.6g} PER={record.valid_per:.2f}")

            if strategy.kind == "two_full_phases" and not switched:
                enh_curve = [rec.valid_enh for rec in history.records]
                capped = strategy.max_enh_epochs is not None and len(enh_curve) >= strategy.max_enh_epochs
                if plateau_detect(enh_curve, strategy.plateau) or capped:
                    switched = True
                    logger.info(f"Enhancement phase ends after epoch {epoch} "
                                f"({'plateau' if not capped else 'epoch cap'}); switching to ASR")

            next_phase = self._peek_phase(strategy, epoch + 1, switched)
            if on_phase_end is not None and (epoch == schedule.total_epochs - 1 or next_phase != phase):
                on_phase_end(phase_index, phase, store, epoch)
            if next_phase != phase:
                phase_index += 1

        logger.info(f"Strategy '{strategy.kind}' finished after {self.state.t} updates")
        return history

    @staticmethod
    def _peek_phase(strategy, epoch: int, switched: bool) -> str:
        if strategy.kind == "joint":
            return JOINT
        if strategy.kind == "asr_only":
            return ASR
        if strategy.kind == "alternated":
            return ENH if (epoch // strategy.epochs_per_phase) % 2 == 0 else ASR
        return ASR if switched else ENH
