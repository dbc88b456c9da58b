import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConsistencyError, CorpusFormatError, InvalidInputError, NumericError
from feature_service import Utterance, mel_warp
from loss_service import pit_mse

# Configure logging
logger = logging.getLogger(__name__)

PARTITIONS = ("enh", "asr")
DIRECTIONS = ("fwd", "bwd")
FORGET_BIAS = 1.0
CHECKPOINT_FORMAT = "avse-checkpoint"
_SIGMOID_FLOOR = np.finfo(np.float64).eps

PRESETS = {
    "desk": {"hidden": 32, "enh_layers": 2, "asr_layers": 2},
    "paper": {"hidden": 250, "enh_layers": 2, "asr_layers": 2},
}


class ModelConfig(BaseModel):
    """Dimensions and variant of the enhancement / recognition networks."""

    model_config = ConfigDict(extra="forbid")

    architecture: Literal["joint", "asr"] = "joint"
    enh_layers: int = Field(2, ge=1)
    asr_layers: int = Field(2, ge=1)
    hidden: int = Field(32, ge=1)
    num_bins: int = Field(129, ge=1)
    visual_dim: int = Field(8, ge=1)
    mel_channels: int = Field(40, ge=1)
    num_classes: int = Field(9, ge=2)
    k: float = Field(3.0, gt=0.0)
    asr_input_mode: Literal["audio", "audio_visual", "visual"] = "audio"
    audio_source: Literal["mixture", "clean"] = "mixture"
    enh_visual: bool = True
    enh_streams: int = Field(1, ge=1, le=2)
    mel_identity: bool = False
    sample_rate: float = Field(16000.0, gt=0.0)

    @model_validator(mode="after")
    def _check_variant(self):
        if self.architecture == "joint" and self.asr_input_mode != "audio":
            raise ValueError("the joint model feeds only enhanced audio to the ASR branch (asr_input_mode='audio')")
        if self.mel_channels > self.num_bins:
            raise ValueError(f"mel_channels ({self.mel_channels}) cannot exceed num_bins ({self.num_bins})")
        if self.enh_streams > 1 and self.enh_visual:
            raise ValueError("multi-stream (PIT) enhancement is audio-only; set enh_visual=false")
        return self

    @property
    def blank(self) -> int:
        return self.num_classes - 1


def apply_preset(config: ModelConfig, preset: str) -> ModelConfig:
    if preset not in PRESETS:
        raise InvalidInputError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")
    return config.model_copy(update=PRESETS[preset])


def enh_input_width(config: ModelConfig) -> int:
    return config.num_bins + (config.visual_dim if config.enh_visual else 0)


def asr_input_width(config: ModelConfig) -> int:
    widths = {
        "audio": config.mel_channels,
        "audio_visual": config.mel_channels + config.visual_dim,
        "visual": config.visual_dim,
    }
    return widths[config.asr_input_mode]


# -------------------------------------------------------------------------
# PARAMETER STORE
# -------------------------------------------------------------------------
@dataclass
class ParameterStore:
    enh: Dict[str, np.ndarray] = field(default_factory=dict)
    asr: Dict[str, np.ndarray] = field(default_factory=dict)

    def partition(self, name: str) -> Dict[str, np.ndarray]:
        if name not in PARTITIONS:
            raise InvalidInputError(f"unknown partition '{name}'")
        return getattr(self, name)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Yield ('enh/blstm0.fwd.W', array) pairs in a fixed order."""
        for part in PARTITIONS:
            for name, array in self.partition(part).items():
                yield f"{part}/{name}", array

    def __getitem__(self, key: str) -> np.ndarray:
        part, name = key.split("/", 1)
        return self.partition(part)[name]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        part, name = key.split("/", 1)
        self.partition(part)[name] = value

    def keys(self) -> List[str]:
        return [key for key, _ in self.items()]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {key: array.shape for key, array in self.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            enh={k: v.copy() for k, v in self.enh.items()},
            asr={k: v.copy() for k, v in self.asr.items()},
        )

    def zeros_like(self) -> "ParameterStore":
        return ParameterStore(
            enh={k: np.zeros_like(v) for k, v in self.enh.items()},
            asr={k: np.zeros_like(v) for k, v in self.asr.items()},
        )

    def num_params(self) -> int:
        return sum(array.size for _, array in self.items())

    def checksum(self, partition: Optional[str] = None) -> str:
        digest = hashlib.sha256()
        for key, array in self.items():
            if partition is not None and not key.startswith(partition + "/"):
                continue
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return digest.hexdigest()

    def check_finite(self) -> None:
        for key, array in self.items():
            if not np.all(np.isfinite(array)):
                raise NumericError(f"parameter array {key} contains non-finite values")


def _lstm_shapes(prefix: str, input_width: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    return {
        f"{prefix}.W": (input_width, 4 * hidden),
        f"{prefix}.U": (hidden, 4 * hidden),
        f"{prefix}.b": (4 * hidden,),
    }


def _stack_shapes(num_layers: int, input_width: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    width = input_width
    for z in range(num_layers):
        for direction in DIRECTIONS:
            shapes.update(_lstm_shapes(f"blstm{z}.{direction}", width, hidden))
        width = 2 * hidden
    return shapes


def expected_shapes(config: ModelConfig) -> Dict[str, Dict[str, Tuple[int, ...]]]:
    """Partition -> array name -> shape for a model built from `config`."""
    shapes = {"enh": {}, "asr": {}}
    if config.architecture == "joint":
        shapes["enh"] = _stack_shapes(config.enh_layers, enh_input_width(config), config.hidden)
        shapes["enh"]["head.W"] = (2 * config.hidden, config.enh_streams * config.num_bins)
        shapes["enh"]["head.b"] = (config.enh_streams * config.num_bins,)
    shapes["asr"] = _stack_shapes(config.asr_layers, asr_input_width(config), config.hidden)
    shapes["asr"]["out.W"] = (2 * config.hidden, config.num_classes)
    shapes["asr"]["out.b"] = (config.num_classes,)
    return shapes


def init_parameters(config: ModelConfig, seed: int) -> ParameterStore:
    """
    Uniform(-a, a) weights with a = 1/sqrt(fan_in), zero biases except the
    LSTM forget gate, which starts at FORGET_BIAS.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for part, shapes in expected_shapes(config).items():
        for name, shape in shapes.items():
            if len(shape) == 2:
                bound = 1.0 / np.sqrt(shape[0])
                array = rng.uniform(-bound, bound, size=shape)
            else:
                array = np.zeros(shape)
                if name.startswith("blstm"):
                    hidden = shape[0] // 4
                    array[hidden:2 * hidden] = FORGET_BIAS
            store.partition(part)[name] = array
    logger.info(f"Initialized {config.architecture} model with {store.num_params()} parameters (seed={seed})")
    return store


def _sub(params: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix) + 1:]: array for name, array in params.items() if name.startswith(prefix + ".")}


# -------------------------------------------------------------------------
# LSTM / BLSTM
# -------------------------------------------------------------------------
def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmCache:
    direction: str
    x: np.ndarray
    gates: np.ndarray
    cells: np.ndarray
    tanh_cells: np.ndarray
    hidden: np.ndarray


def _check_finite_rows(x: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
    if bad.size:
        raise NumericError(f"non-finite {what} at step t={int(bad[0])}")


def lstm_forward(params: Dict[str, np.ndarray], x: np.ndarray, direction: str = "fwd") -> Tuple[np.ndarray, LstmCache]:
    """
    Single-direction LSTM over a T×F sequence (gate order: input, forget,
    output, candidate). The backward direction runs over the reversed
    sequence and its outputs are returned in input order.
    """
    if direction not in DIRECTIONS:
        raise InvalidInputError(f"direction must be one of {DIRECTIONS}, got '{direction}'")
    W, U, b = params["W"], params["U"], params["b"]
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise InvalidInputError(f"LSTM input width {x.shape[-1]} does not match weights {W.shape}")
    _check_finite_rows(x, "LSTM input")

    hidden = U.shape[0]
    steps = x.shape[0]
    xs = x if direction == "fwd" else x[::-1]
    zx = xs @ W + b

    gates = np.empty((steps, 4 * hidden))
    cells = np.zeros((steps + 1, hidden))
    tanh_cells = np.empty((steps, hidden))
    hs = np.zeros((steps + 1, hidden))
    for t in range(steps):
        z = zx[t] + hs[t] @ U
        gates[t, :3 * hidden] = sigmoid(z[:3 * hidden])
        gates[t, 3 * hidden:] = np.tanh(z[3 * hidden:])
        i, f, o, g = np.split(gates[t], 4)
        cells[t + 1] = f * cells[t] + i * g
        tanh_cells[t] = np.tanh(cells[t + 1])
        hs[t + 1] = o * tanh_cells[t]

    out = hs[1:] if direction == "fwd" else hs[:0:-1]
    cache = LstmCache(direction=direction, x=xs, gates=gates, cells=cells, tanh_cells=tanh_cells, hidden=hs)
    return out.copy(), cache


def lstm_backward(params: Dict[str, np.ndarray], cache: LstmCache, dh: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """BPTT through one direction; returns ({'W','U','b'} grads, d input)."""
    W, U = params["W"], params["U"]
    hidden = U.shape[0]
    steps = cache.gates.shape[0]
    if dh.shape != (steps, hidden):
        raise ConsistencyError(f"upstream gradient shape {dh.shape} does not match cache ({steps}, {hidden})")
    dhs = dh if cache.direction == "fwd" else dh[::-1]

    dz = np.empty((steps, 4 * hidden))
    dh_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    for t in range(steps - 1, -1, -1):
        i, f, o, g = np.split(cache.gates[t], 4)
        tc = cache.tanh_cells[t]
        dh_t = dhs[t] + dh_next
        dc = dh_t * o * (1.0 - tc * tc) + dc_next
        dz[t, :hidden] = dc * g * i * (1.0 - i)
        dz[t, hidden:2 * hidden] = dc * cache.cells[t] * f * (1.0 - f)
        dz[t, 2 * hidden:3 * hidden] = dh_t * tc * o * (1.0 - o)
        dz[t, 3 * hidden:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        dh_next = dz[t] @ U.T

    grads = {
        "W": cache.x.T @ dz,
        "U": cache.hidden[:-1].T @ dz,
        "b": dz.sum(axis=0),
    }
    dxs = dz @ W.T
    return grads, (dxs if cache.direction == "fwd" else dxs[::-1])


def blstm_forward(pair: Dict[str, Dict[str, np.ndarray]], x: np.ndarray) -> Tuple[np.ndarray, Dict[str, LstmCache]]:
    """Columns [0, H) hold the forward pass, [H, 2H) the backward pass in input order."""
    h_fwd, c_fwd = lstm_forward(pair["fwd"], x, "fwd")
    h_bwd, c_bwd = lstm_forward(pair["bwd"], x, "bwd")
    return np.concatenate([h_fwd, h_bwd], axis=1), {"fwd": c_fwd, "bwd": c_bwd}


def blstm_backward(pair, cache: Dict[str, LstmCache], dh: np.ndarray):
    hidden = pair["fwd"]["U"].shape[0]
    g_fwd, dx_fwd = lstm_backward(pair["fwd"], cache["fwd"], dh[:, :hidden])
    g_bwd, dx_bwd = lstm_backward(pair["bwd"], cache["bwd"], dh[:, hidden:])
    return {"fwd": g_fwd, "bwd": g_bwd}, dx_fwd + dx_bwd


def _layer_pair(params: Dict[str, np.ndarray], z: int) -> Dict[str, Dict[str, np.ndarray]]:
    return {direction: _sub(params, f"blstm{z}.{direction}") for direction in DIRECTIONS}


def _stack_forward(params: Dict[str, np.ndarray], num_layers: int, x: np.ndarray):
    caches = []
    h = x
    for z in range(num_layers):
        h, cache = blstm_forward(_layer_pair(params, z), h)
        caches.append(cache)
    return h, caches


def _stack_backward(params, num_layers: int, caches, dh: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
    for z in range(num_layers - 1, -1, -1):
        layer_grads, dh = blstm_backward(_layer_pair(params, z), caches[z], dh)
        for direction, g in layer_grads.items():
            for name, value in g.items():
                grads[f"blstm{z}.{direction}.{name}"] += value
    return dh


# -------------------------------------------------------------------------
# ASR / ENHANCEMENT / JOINT
# -------------------------------------------------------------------------
@dataclass
class AsrCache:
    layers: list
    top: np.ndarray


@dataclass
class EnhCache:
    layers: list
    top: np.ndarray
    gate: np.ndarray
    scale: np.ndarray
    streams: int


@dataclass
class ForwardCache:
    kind: str
    config: ModelConfig
    param_shapes: Dict[str, Tuple[int, ...]]
    enh: Optional[EnhCache] = None
    asr: Optional[AsrCache] = None
    filterbank: Optional[np.ndarray] = None
    stream_index: int = 0
    y_shape: Optional[Tuple[int, ...]] = None


@dataclass
class ModelOutput:
    y_hat: Optional[np.ndarray]
    logits: np.ndarray
    cache: ForwardCache
    stream_index: int = 0

    @property
    def enhanced(self) -> Optional[np.ndarray]:
        """The (target) enhanced stream that fed the ASR branch."""
        if self.y_hat is None or self.y_hat.ndim == 2:
            return self.y_hat
        return self.y_hat[self.stream_index]


def asr_forward(config: ModelConfig, params: Dict[str, np.ndarray], inputs: np.ndarray) -> Tuple[np.ndarray, AsrCache]:
    """T×F features -> T×P unnormalized logits."""
    expected = asr_input_width(config)
    if inputs.ndim != 2 or inputs.shape[1] != expected:
        raise InvalidInputError(
            f"ASR mode '{config.asr_input_mode}' expects input width {expected}, got {inputs.shape}"
        )
    top, layers = _stack_forward(params, config.asr_layers, inputs)
    logits = top @ params["out.W"] + params["out.b"]
    return logits, AsrCache(layers=layers, top=top)


def asr_backward(config: ModelConfig, params, cache: AsrCache, d_logits: np.ndarray):
    grads = {name: np.zeros_like(array) for name, array in params.items()}
    grads["out.W"] += cache.top.T @ d_logits
    grads["out.b"] += d_logits.sum(axis=0)
    d_input = _stack_backward(params, config.asr_layers, cache.layers, d_logits @ params["out.W"].T, grads)
    return grads, d_input


def enh_forward(config: ModelConfig, params: Dict[str, np.ndarray], x: np.ndarray, d: np.ndarray) -> Tuple[np.ndarray, EnhCache]:
    """
    σ(F_enh(x)) ⊙ (k·d). Returns T×N for a single stream, S×T×N otherwise;
    every entry lies strictly inside (0, k·d[n]).
    """
    expected = enh_input_width(config)
    if x.ndim != 2 or x.shape[1] != expected:
        raise InvalidInputError(f"enhancement input must be T×{expected}, got {x.shape}")
    if d.shape != (config.num_bins,):
        raise InvalidInputError(f"std vector must have length {config.num_bins}, got {d.shape}")

    top, layers = _stack_forward(params, config.enh_layers, x)
    pre = top @ params["head.W"] + params["head.b"]
    gate = np.clip(sigmoid(pre), _SIGMOID_FLOOR, 1.0 - _SIGMOID_FLOOR)
    scale = np.tile(config.k * d, config.enh_streams)
    y = gate * scale
    if config.enh_streams > 1:
        y = y.reshape(x.shape[0], config.enh_streams, config.num_bins).transpose(1, 0, 2)
    return y, EnhCache(layers=layers, top=top, gate=gate, scale=scale, streams=config.enh_streams)


def enh_backward(config: ModelConfig, params, cache: EnhCache, d_y: np.ndarray):
    if cache.streams > 1:
        d_y = d_y.transpose(1, 0, 2).reshape(cache.gate.shape)
    if d_y.shape != cache.gate.shape:
        raise ConsistencyError(f"enhancement gradient shape {d_y.shape} does not match cache {cache.gate.shape}")
    grads = {name: np.zeros_like(array) for name, array in params.items()}
    d_pre = d_y * cache.scale * cache.gate * (1.0 - cache.gate)
    grads["head.W"] += cache.top.T @ d_pre
    grads["head.b"] += d_pre.sum(axis=0)
    d_input = _stack_backward(params, config.enh_layers, cache.layers, d_pre @ params["head.W"].T, grads)
    return grads, d_input


def enh_inputs(config: ModelConfig, utt: Utterance) -> np.ndarray:
    if config.enh_visual:
        return np.concatenate([utt.mixture, utt.visual], axis=1)
    return utt.mixture


def asr_inputs(config: ModelConfig, utt: Utterance, filterbank: np.ndarray) -> np.ndarray:
    """Features for an ASR-only model in the configured input mode."""
    audio = utt.clean if config.audio_source == "clean" else utt.mixture
    if config.asr_input_mode == "visual":
        return utt.visual
    mel = mel_warp(filterbank, audio)
    if config.asr_input_mode == "audio_visual":
        return np.concatenate([mel, utt.visual], axis=1)
    return mel


def target_stream(y_hats: np.ndarray, utt: Utterance) -> int:
    """Index of the enhanced stream that PIT assigns to the target speaker."""
    if utt.interferer_clean is None:
        raise InvalidInputError(f"{utt.id}: multi-stream enhancement needs the interferer's clean target")
    _, perm = pit_mse(y_hats, [utt.clean, utt.interferer_clean])
    return perm.index(0)


def joint_forward(config: ModelConfig, store: ParameterStore, utt: Utterance, filterbank: np.ndarray,
                  d: np.ndarray, stream_index: Optional[int] = None) -> ModelOutput:
    """Enhancement, then the ASR branch on m · ŷ of the target stream."""
    if config.architecture != "joint" or config.asr_input_mode != "audio":
        raise InvalidInputError("joint_forward needs architecture='joint' with asr_input_mode='audio'")
    y_hat, enh_cache = enh_forward(config, store.enh, enh_inputs(config, utt), d)
    if config.enh_streams > 1:
        if stream_index is None:
            stream_index = target_stream(y_hat, utt)
        selected = y_hat[stream_index]
    else:
        stream_index = 0
        selected = y_hat
    logits, asr_cache = asr_forward(config, store.asr, mel_warp(filterbank, selected))
    cache = ForwardCache(
        kind="joint", config=config, param_shapes=store.shapes(), enh=enh_cache, asr=asr_cache,
        filterbank=filterbank, stream_index=stream_index, y_shape=y_hat.shape,
    )
    return ModelOutput(y_hat=y_hat, logits=logits, cache=cache, stream_index=stream_index)


def model_forward(config: ModelConfig, store: ParameterStore, utt: Utterance, filterbank: np.ndarray,
                  d: np.ndarray) -> ModelOutput:
    """Forward pass of whichever architecture `config` describes."""
    if config.architecture == "joint":
        return joint_forward(config, store, utt, filterbank, d)
    logits, asr_cache = asr_forward(config, store.asr, asr_inputs(config, utt, filterbank))
    cache = ForwardCache(kind="asr", config=config, param_shapes=store.shapes(), asr=asr_cache)
    return ModelOutput(y_hat=None, logits=logits, cache=cache)


def backward(store: ParameterStore, cache: ForwardCache, d_y_hat: Optional[np.ndarray] = None,
             d_logits: Optional[np.ndarray] = None) -> ParameterStore:
    """
    Gradients of the upstream signals w.r.t. every parameter, returned in a
    store mirroring `store`. Missing upstream gradients count as zero.
    """
    if cache.param_shapes != store.shapes():
        raise ConsistencyError("forward cache was produced with a different parameter layout")
    config = cache.config
    grads = store.zeros_like()

    d_selected = None
    if d_logits is not None and cache.asr is not None:
        asr_grads, d_input = asr_backward(config, store.asr, cache.asr, d_logits)
        grads.asr.update(asr_grads)
        if cache.kind == "joint":
            d_selected = d_input @ cache.filterbank

    if cache.kind != "joint" or (d_y_hat is None and d_selected is None):
        return grads

    d_y = np.zeros(cache.y_shape) if d_y_hat is None else np.array(d_y_hat, dtype=np.float64)
    if d_y.shape != cache.y_shape:
        raise ConsistencyError(f"enhancement gradient shape {d_y.shape} does not match output {cache.y_shape}")
    if d_selected is not None:
        if len(cache.y_shape) == 3:
            d_y[cache.stream_index] += d_selected
        else:
            d_y += d_selected
    enh_grads, _ = enh_backward(config, store.enh, cache.enh, d_y)
    grads.enh.update(enh_grads)
    return grads


# -------------------------------------------------------------------------
# GRADIENT CHECK
# -------------------------------------------------------------------------
@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.errors.values())

    @property
    def failing(self) -> List[str]:
        return [name for name, err in self.errors.items() if err > self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def grad_check(model_fn: Callable, store: ParameterStore, tolerance: float = 1e-4, eps: float = 1e-5,
               floor: float = 1e-4, value_fn: Optional[Callable] = None) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences.

    `model_fn(store)` returns (value, grads) or a dict of named
    (value, grads) pairs; `value_fn(store)` may return just the value(s)
    for the perturbed evaluations. Each entry is perturbed by
    eps·max(1, |θ|); the relative error of an array is the largest
    |analytic − numeric| / max(|analytic|, |numeric|, floor) over its entries.
    Report keys are array names, prefixed with the loss name when
    several losses are checked.
    """
    def as_dict(result):
        return result if isinstance(result, dict) else {"": result}

    analytic = as_dict(model_fn(store))
    if value_fn is None:
        def value_fn(s):
            return {name: pair[0] for name, pair in as_dict(model_fn(s)).items()}

    def values(s):
        result = value_fn(s)
        return result if isinstance(result, dict) else {"": result}

    perturbed = store.copy()
    errors = {}
    for key, array in perturbed.items():
        numeric = {name: np.zeros_like(array) for name in analytic}
        for index in np.ndindex(array.shape):
            original = array[index]
            step = eps * max(1.0, abs(original))
            array[index] = original + step
            plus = values(perturbed)
            array[index] = original - step
            minus = values(perturbed)
            array[index] = original
            for name in analytic:
                numeric[name][index] = (plus[name] - minus[name]) / (2.0 * step)
        for name, (_, grads) in analytic.items():
            a = grads[key]
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric[name])), floor)
            err = float(np.max(np.abs(a - numeric[name]) / denom)) if a.size else 0.0
            errors[f"{name}:{key}" if name else key] = err

    report = GradCheckReport(errors=errors, tolerance=tolerance)
    if report.passed:
        logger.info(f"Gradient check passed: max relative error {report.max_error:.3e} over {len(errors)} arrays")
    else:
        logger.warning(f"Gradient check failed for {report.failing} (tolerance {tolerance:g})")
    return report


# -------------------------------------------------------------------------
# CHECKPOINTS
# -------------------------------------------------------------------------
def save_checkpoint(store: ParameterStore, config: ModelConfig, path: str,
                    std_vector: Optional[np.ndarray] = None) -> str:
    """Write manifest.json (names, shapes, partitions, config echo, std vector) and params.bin."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as f:
        for key, array in store.items():
            part, name = key.split("/", 1)
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
            entries.append({"name": name, "partition": part, "shape": list(array.shape),
                            "offset": offset, "count": int(array.size)})
            offset += int(array.size)
    manifest = {"format": CHECKPOINT_FORMAT, "config": config.model_dump(), "arrays": entries}
    if std_vector is not None:
        manifest["std_vector"] = [float(v) for v in std_vector]
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Checkpoint written to {path} ({offset} parameters)")
    return path


def load_checkpoint(path: str, config: Optional[ModelConfig] = None) -> Tuple[ParameterStore, ModelConfig]:
    """Read a checkpoint and validate its shapes against `config` (or its own config echo)."""
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        with open(os.path.join(path, "params.bin"), "rb") as f:
            raw = f.read()
    except (OSError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"unreadable checkpoint {path}: {e}")
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorpusFormatError(f"{path} is not a {CHECKPOINT_FORMAT}")
    if config is None:
        try:
            config = ModelConfig(**manifest["config"])
        except (KeyError, TypeError, ValidationError) as e:
            raise CorpusFormatError(f"checkpoint {path} carries an invalid model config: {e}")

    if len(raw) % 8:
        raise CorpusFormatError(f"checkpoint {path}: params.bin holds {len(raw)} bytes, not a whole number of float64")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = expected_shapes(config)
    store = ParameterStore()
    used = 0
    label = "<manifest>"
    try:
        for entry in manifest["arrays"]:
            label = f"{entry.get('partition')}/{entry.get('name')}"
            part, name = entry["partition"], entry["name"]
            shape = tuple(entry["shape"])
            if expected.get(part, {}).get(name) != shape:
                raise CorpusFormatError(f"checkpoint array {label} has shape {shape}, "
                                        f"config expects {expected.get(part, {}).get(name)}")
            start, count = int(entry["offset"]), int(entry["count"])
            if count != int(np.prod(shape)):
                raise CorpusFormatError(f"checkpoint array {label} declares {count} values for shape {shape}")
            if start < 0 or start + count > flat.size:
                raise CorpusFormatError(f"checkpoint payload truncated at array {label}")
            store.partition(part)[name] = flat[start:start + count].reshape(shape).copy()
            used += count
    except CorpusFormatError:
        raise
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"checkpoint {path}: malformed manifest entry {label}: {e!r}")
    missing = {f"{p}/{n}" for p, names in expected.items() for n in names} - set(store.keys())
    if missing:
        raise CorpusFormatError(f"checkpoint lacks arrays {sorted(missing)}")
    if used != flat.size:
        raise CorpusFormatError(f"checkpoint {path}: params.bin holds {flat.size} values, manifest accounts for {used}")
    logger.info(f"Checkpoint loaded from {path}")
    return store, config


def load_std_vector(path: str) -> Optional[np.ndarray]:
    """The std vector a checkpoint was trained with, or None if it was saved without one."""
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"unreadable checkpoint {path}: {e}")
    values = manifest.get("std_vector")
    return None if values is None else np.asarray(values, dtype=np.float64)
