import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ConfigError, CorpusFormatError, InvalidInputError

# Configure logging
logger = logging.getLogger(__name__)

EPSILON_D = 1e-6
DEFAULT_WINDOW_LEN = 256
DEFAULT_HOP = 128
DEFAULT_SAMPLE_RATE = 16000

MANIFEST_NAME = "manifest.json"
CORPUS_FORMAT = "avse-corpus"
CORPUS_FORMAT_VERSION = 1

# Standard TIMIT inventory; synthetic corpora draw their symbols from its head.
TIMIT_PHONES = (
    "iy", "ih", "eh", "ey", "ae", "aa", "aw", "ay", "ah", "ao", "oy", "ow",
    "uh", "uw", "ux", "er", "ax", "ix", "axr", "ax-h", "jh", "ch", "b", "d",
    "g", "p", "t", "k", "dx", "s", "sh", "z", "zh", "f", "th", "v", "dh", "m",
    "n", "ng", "em", "nx", "en", "eng", "l", "r", "w", "y", "hh", "hv", "el",
    "bcl", "dcl", "gcl", "pcl", "tcl", "kcl", "q", "pau", "epi", "h#",
)


@dataclass
class Utterance:
    id: str
    mixture: np.ndarray
    clean: np.ndarray
    visual: np.ndarray
    labels: List[int]
    interferer_clean: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return int(self.mixture.shape[0])

    def validate(self) -> None:
        """Check the per-utterance invariants; raise InvalidInputError on the first violation."""
        if self.mixture.ndim != 2 or self.mixture.shape[0] < 1 or self.mixture.shape[1] < 1:
            raise InvalidInputError(f"{self.id}: mixture must be a nonempty T×N matrix")
        if self.clean.shape != self.mixture.shape:
            raise InvalidInputError(
                f"{self.id}: clean shape {self.clean.shape} != mixture shape {self.mixture.shape}"
            )
        if self.visual.ndim != 2 or self.visual.shape[0] != self.num_frames or self.visual.shape[1] < 1:
            raise InvalidInputError(f"{self.id}: visual must be T×M with T={self.num_frames}")
        if self.interferer_clean is not None and self.interferer_clean.shape != self.mixture.shape:
            raise InvalidInputError(f"{self.id}: interferer shape does not match mixture")
        if np.any(self.mixture < 0) or np.any(self.clean < 0):
            raise InvalidInputError(f"{self.id}: spectrogram entries must be nonnegative")
        if not 1 <= len(self.labels) < self.num_frames:
            raise InvalidInputError(
                f"{self.id}: label length {len(self.labels)} must be in [1, T={self.num_frames})"
            )
        if ctc_required_frames(self.labels) > self.num_frames:
            raise InvalidInputError(f"{self.id}: labels cannot be aligned to {self.num_frames} frames")


class CorpusConfig(BaseModel):
    """Shape of a synthetic two-speaker corpus."""

    model_config = ConfigDict(extra="forbid")

    num_utterances: int = Field(20, ge=1)
    min_frames: int = Field(24, ge=2)
    max_frames: int = Field(32, ge=2)
    num_bins: int = Field(129, ge=1)
    visual_dim: int = Field(8, ge=1)
    num_phones: int = Field(8, ge=1, le=len(TIMIT_PHONES))
    min_phones: int = Field(3, ge=1)
    max_phones: int = Field(6, ge=1)
    min_frames_per_phone: int = Field(2, ge=1)
    interferer_gain: float = Field(1.0, ge=0.0)
    visual_noise: float = Field(0.1, ge=0.0)
    visual_smoothing: int = Field(3, ge=1)


def ctc_required_frames(labels: Sequence[int]) -> int:
    """Minimum frame count CTC needs: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def phone_inventory(num_phones: int) -> List[str]:
    if not 1 <= num_phones <= len(TIMIT_PHONES):
        raise ConfigError(f"phone inventory size must be in [1, {len(TIMIT_PHONES)}], got {num_phones}")
    return list(TIMIT_PHONES[:num_phones])


# -------------------------------------------------------------------------
# SPECTRAL FEATURES
# -------------------------------------------------------------------------
def hann_window(window_len: int) -> np.ndarray:
    n = np.arange(window_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_len)


def stft_magnitude(samples, window_len: int = DEFAULT_WINDOW_LEN, hop: int = DEFAULT_HOP) -> np.ndarray:
    """
    Magnitude STFT of a real signal with a periodic Hann window.

    Returns a T×N matrix with T = 1 + (len - window_len) // hop and
    N = window_len // 2 + 1.
    """
    if not window_len >= hop >= 1:
        raise ConfigError(f"need window_len >= hop >= 1, got window_len={window_len}, hop={hop}")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"samples must be one-dimensional, got shape {x.shape}")
    if len(x) < window_len:
        raise InvalidInputError(f"signal of {len(x)} samples is shorter than the window ({window_len})")

    num_frames = 1 + (len(x) - window_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop][:num_frames]
    spectrum = np.fft.rfft(frames * hann_window(window_len), axis=1)
    return np.abs(spectrum)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_cdf(x: np.ndarray, left: np.ndarray, center: np.ndarray, right: np.ndarray) -> np.ndarray:
    # Integral of a unit-peak triangle from -inf to x, broadcast over filters.
    rise = np.clip(x - left, 0.0, center - left)
    fall = np.clip(right - x, 0.0, right - center)
    up = rise ** 2 / (2.0 * (center - left))
    down = (right - center) / 2.0 - fall ** 2 / (2.0 * (right - center))
    return np.where(x <= center, up, (center - left) / 2.0 + down)


def mel_filterbank(num_channels: int, num_bins: int, sample_rate: float = DEFAULT_SAMPLE_RATE,
                   identity: bool = False) -> np.ndarray:
    """
    C×N matrix that warps a linear-frequency spectrogram onto C mel channels.

    Filter centres are equally spaced on the mel scale between 0 and
    sample_rate / 2. Each unit-peak triangle is integrated over every bin's
    unit interval, so no row is empty and columns sum to at most 1.
    """
    if identity:
        if num_channels != num_bins:
            raise ConfigError(f"identity filterbank needs C == N, got C={num_channels}, N={num_bins}")
        return np.eye(num_bins)
    if not 1 <= num_channels <= num_bins:
        raise ConfigError(f"mel channels must satisfy 1 <= C <= N, got C={num_channels}, N={num_bins}")
    if sample_rate <= 0:
        raise ConfigError(f"sample_rate must be positive, got {sample_rate}")

    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, hz_to_mel(nyquist), num_channels + 2)
    # Positions in fractional-bin units; bin n sits at n * nyquist / (N - 1).
    bin_points = mel_to_hz(mel_points) / nyquist * max(num_bins - 1, 1)
    left = bin_points[:-2, None]
    center = bin_points[1:-1, None]
    right = bin_points[2:, None]

    edges = np.arange(num_bins + 1, dtype=np.float64) - 0.5
    cdf = _triangle_cdf(edges[None, :], left, center, right)
    weights = np.diff(cdf, axis=1)
    weights[weights < 0] = 0.0
    return weights


def mel_warp(filterbank: np.ndarray, spectrogram: np.ndarray) -> np.ndarray:
    """Row i of the result is filterbank · spectrogram[i]."""
    if filterbank.ndim != 2 or spectrogram.ndim != 2 or filterbank.shape[1] != spectrogram.shape[1]:
        raise InvalidInputError(
            f"mel warp dimension mismatch: filterbank {filterbank.shape}, spectrogram {spectrogram.shape}"
        )
    return spectrogram @ filterbank.T


def compute_std_vector(corpus: Sequence[Utterance], epsilon: float = EPSILON_D) -> np.ndarray:
    """Per-bin population standard deviation of all clean frames, floored at epsilon."""
    if not corpus:
        raise InvalidInputError("cannot compute the std vector of an empty corpus")
    num_bins = corpus[0].clean.shape[1]
    for utt in corpus:
        if utt.clean.shape[1] != num_bins:
            raise InvalidInputError(f"{utt.id}: clean target has {utt.clean.shape[1]} bins, expected {num_bins}")
    frames = np.concatenate([utt.clean for utt in corpus], axis=0)
    return np.maximum(frames.std(axis=0), epsilon)


# -------------------------------------------------------------------------
# SYNTHETIC CORPUS
# -------------------------------------------------------------------------
def _check_corpus_feasible(cfg: CorpusConfig) -> None:
    if cfg.min_frames > cfg.max_frames:
        raise ConfigError(f"min_frames ({cfg.min_frames}) exceeds max_frames ({cfg.max_frames})")
    if cfg.min_phones > cfg.max_phones:
        raise ConfigError(f"min_phones ({cfg.min_phones}) exceeds max_phones ({cfg.max_phones})")
    if cfg.max_phones * cfg.min_frames_per_phone > cfg.min_frames or cfg.max_phones >= cfg.min_frames:
        raise ConfigError(
            f"infeasible corpus: {cfg.max_phones} phones × {cfg.min_frames_per_phone} frames "
            f"do not fit in {cfg.min_frames} frames with a shorter label sequence"
        )
    if cfg.num_phones < 2 and cfg.max_phones > 1:
        raise ConfigError("sequences longer than one phone need at least two phone symbols")


def _phone_templates(rng: np.random.Generator, num_phones: int, num_bins: int) -> np.ndarray:
    bins = np.arange(num_bins, dtype=np.float64)
    templates = np.zeros((num_phones, num_bins))
    for p in range(num_phones):
        f0 = rng.uniform(1.5, max(2.0, num_bins / 8.0))
        formants = rng.uniform(0.0, num_bins - 1.0, size=2)
        widths = rng.uniform(0.1, 0.3, size=2) * num_bins + 1.0
        envelope = 0.2 + sum(np.exp(-0.5 * ((bins - f) / w) ** 2) for f, w in zip(formants, widths))
        harmonic = 1
        while harmonic * f0 < num_bins:
            templates[p] += np.exp(-0.5 * ((bins - harmonic * f0) / 0.8) ** 2)
            harmonic += 1
        templates[p] *= envelope
        templates[p] /= templates[p].max()
    return templates


def _phone_sequence(rng: np.random.Generator, cfg: CorpusConfig) -> List[int]:
    length = int(rng.integers(cfg.min_phones, cfg.max_phones + 1))
    seq = [int(rng.integers(cfg.num_phones))]
    while len(seq) < length:
        nxt = int(rng.integers(cfg.num_phones - 1))
        seq.append(nxt if nxt < seq[-1] else nxt + 1)
    return seq


def _frame_phones(rng: np.random.Generator, labels: List[int], num_frames: int, min_per_phone: int) -> np.ndarray:
    extra = num_frames - len(labels) * min_per_phone
    durations = min_per_phone + rng.multinomial(extra, np.full(len(labels), 1.0 / len(labels)))
    return np.repeat(np.asarray(labels), durations)


def _smooth(frames: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return frames
    kernel = np.ones(width)
    counts = np.convolve(np.ones(frames.shape[0]), kernel, mode="same")
    smoothed = np.stack([np.convolve(col, kernel, mode="same") for col in frames.T], axis=1)
    return smoothed / counts[:, None]


def synth_corpus(cfg: CorpusConfig, seed: int) -> List[Utterance]:
    """
    Deterministic synthetic two-speaker corpus.

    Every phone has a harmonic spectral template; a source spectrogram is its
    phone templates laid out over time with per-utterance gain and per-frame
    jitter. The mixture is the element-wise sum of the target and interferer
    spectrograms, and the visual stream is a smoothed phone embedding of the
    target plus noise, so it identifies which source is the target.
    """
    _check_corpus_feasible(cfg)
    rng = np.random.default_rng(seed)
    templates = _phone_templates(rng, cfg.num_phones, cfg.num_bins)
    embeddings = rng.standard_normal((cfg.num_phones, cfg.visual_dim))

    def source(labels: List[int], num_frames: int, gain: float):
        phones = _frame_phones(rng, labels, num_frames, cfg.min_frames_per_phone)
        jitter = rng.uniform(0.9, 1.1, size=num_frames)
        return templates[phones] * (gain * jitter)[:, None], phones

    corpus = []
    for index in range(cfg.num_utterances):
        num_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        labels = _phone_sequence(rng, cfg)
        clean, target_phones = source(labels, num_frames, rng.uniform(0.8, 1.2))
        interferer, _ = source(_phone_sequence(rng, cfg), num_frames,
                               cfg.interferer_gain * rng.uniform(0.8, 1.2))
        visual = _smooth(embeddings[target_phones], cfg.visual_smoothing)
        visual = visual + cfg.visual_noise * rng.standard_normal(visual.shape)

        utt = Utterance(
            id=f"utt{index:04d}",
            mixture=clean + interferer,
            clean=clean,
            visual=visual,
            labels=labels,
            interferer_clean=interferer,
        )
        utt.validate()
        corpus.append(utt)

    logger.info(f"Synthesized {len(corpus)} utterances (N={cfg.num_bins}, M={cfg.visual_dim}, "
                f"phones={cfg.num_phones}, seed={seed})")
    return corpus


# -------------------------------------------------------------------------
# CORPUS FILES
# -------------------------------------------------------------------------
def _corpus_dims(corpus: Sequence[Utterance]) -> Dict[str, int]:
    first = corpus[0]
    dims = {"N": int(first.mixture.shape[1]), "M": int(first.visual.shape[1])}
    for utt in corpus:
        if utt.mixture.shape[1] != dims["N"] or utt.visual.shape[1] != dims["M"]:
            raise InvalidInputError(f"{utt.id}: dimensions differ from the rest of the corpus")
    return dims


def save_corpus(corpus: Sequence[Utterance], path: str, phones: Optional[Sequence[str]] = None) -> str:
    """
    Write a corpus directory: manifest.json, one <id>.bin payload and one
    <id>.phn transcription per utterance. Returns the manifest path.
    """
    if not corpus:
        raise InvalidInputError("refusing to save an empty corpus")
    if phones is None:
        phones = phone_inventory(max(max(utt.labels) for utt in corpus) + 1)
    dims = _corpus_dims(corpus)
    dims["P"] = len(phones) + 1

    os.makedirs(path, exist_ok=True)
    entries = []
    for utt in corpus:
        utt.validate()
        if max(utt.labels) >= len(phones):
            raise InvalidInputError(f"{utt.id}: label id {max(utt.labels)} outside a {len(phones)}-phone inventory")
        arrays = [utt.mixture, utt.clean, utt.visual]
        arrays.append(utt.interferer_clean if utt.interferer_clean is not None else np.zeros((0,)))
        table = np.array([a.size for a in arrays], dtype="<u8")
        with open(os.path.join(path, f"{utt.id}.bin"), "wb") as f:
            f.write(table.tobytes())
            for a in arrays:
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        with open(os.path.join(path, f"{utt.id}.phn"), "w") as f:
            f.write(" ".join(phones[i] for i in utt.labels) + "\n")
        entries.append({
            "id": utt.id,
            "T": utt.num_frames,
            "N": dims["N"],
            "M": dims["M"],
            "num_labels": len(utt.labels),
            "has_interferer": utt.interferer_clean is not None,
        })

    manifest = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_FORMAT_VERSION,
        "dims": dims,
        "phones": list(phones),
        "utterances": entries,
    }
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved {len(entries)} utterances to {path}")
    return manifest_path


def read_manifest(path: str) -> dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CorpusFormatError(f"no {MANIFEST_NAME} in {path}")
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"malformed manifest {manifest_path}: {e}")

    if not isinstance(manifest, dict) or manifest.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(f"{manifest_path} is not an {CORPUS_FORMAT} manifest")
    for key in ("dims", "phones", "utterances"):
        if key not in manifest:
            raise CorpusFormatError(f"manifest {manifest_path} lacks '{key}'")
    dims = manifest["dims"]
    if not all(isinstance(dims.get(k), int) for k in ("N", "M", "P")):
        raise CorpusFormatError(f"manifest {manifest_path} has malformed dims {dims}")
    if dims["P"] != len(manifest["phones"]) + 1:
        raise CorpusFormatError(f"manifest P={dims['P']} disagrees with {len(manifest['phones'])} phones")
    return manifest


def _load_utterance(path: str, entry: dict, dims: dict, phone_ids: Dict[str, int]) -> Utterance:
    utt_id = entry.get("id")
    try:
        num_frames, n, m = int(entry["T"]), int(entry["N"]), int(entry["M"])
        has_interferer = bool(entry["has_interferer"])
    except (KeyError, TypeError, ValueError):
        raise CorpusFormatError(f"{utt_id}: malformed utterance header {entry}")
    if n != dims["N"] or m != dims["M"]:
        raise CorpusFormatError(f"{utt_id}: header dims N={n}, M={m} disagree with corpus dims {dims}")

    try:
        with open(os.path.join(path, f"{utt_id}.bin"), "rb") as f:
            raw = f.read()
        with open(os.path.join(path, f"{utt_id}.phn")) as f:
            symbols = f.read().split()
    except OSError as e:
        raise CorpusFormatError(f"{utt_id}: {e}")

    if len(raw) < 32:
        raise CorpusFormatError(f"{utt_id}: truncated payload (no length table)")
    counts = [int(c) for c in np.frombuffer(raw[:32], dtype="<u8")]
    expected = [num_frames * n, num_frames * n, num_frames * m, num_frames * n if has_interferer else 0]
    if counts != expected:
        raise CorpusFormatError(f"{utt_id}: length table {counts} disagrees with header (expected {expected})")
    if len(raw) != 32 + 8 * sum(counts):
        raise CorpusFormatError(f"{utt_id}: truncated payload ({len(raw) - 32} of {8 * sum(counts)} bytes)")

    flat = np.frombuffer(raw[32:], dtype="<f8").astype(np.float64)
    offsets = np.cumsum([0] + counts)
    pieces = [flat[offsets[i]:offsets[i + 1]] for i in range(4)]
    try:
        labels = [phone_ids[s] for s in symbols]
    except KeyError as e:
        raise CorpusFormatError(f"{utt_id}: unknown phone symbol {e}")
    if len(labels) != entry.get("num_labels", len(labels)):
        raise CorpusFormatError(f"{utt_id}: header lists {entry['num_labels']} labels, transcription has {len(labels)}")

    return Utterance(
        id=utt_id,
        mixture=pieces[0].reshape(num_frames, n),
        clean=pieces[1].reshape(num_frames, n),
        visual=pieces[2].reshape(num_frames, m),
        labels=labels,
        interferer_clean=pieces[3].reshape(num_frames, n) if has_interferer else None,
    )


def load_corpus(path: str) -> List[Utterance]:
    """Read a corpus directory; any malformed utterance aborts the whole load."""
    manifest = read_manifest(path)
    dims = manifest["dims"]
    phone_ids = {s: i for i, s in enumerate(manifest["phones"])}
    corpus = [_load_utterance(path, entry, dims, phone_ids) for entry in manifest["utterances"]]
    for utt in corpus:
        try:
            utt.validate()
        except InvalidInputError as e:
            raise CorpusFormatError(str(e))
    logger.info(f"Loaded {len(corpus)} utterances from {path}")
    return corpus
