import csv
import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from errors import ConfigError, InvalidInputError

# Configure logging
logger = logging.getLogger(__name__)

DELETED = "-"
CURVE_COLUMNS = ["epoch", "phase", "lambda", "train_enh", "train_asr", "valid_enh", "valid_asr", "valid_per"]
_FLOAT_COLUMNS = ["train_enh", "train_asr", "valid_enh", "valid_asr", "valid_per"]
STEP_COLUMNS = ["epoch", "utt_id", "l_enh", "l_asr", "lambda"]


# -------------------------------------------------------------------------
# DECODING
# -------------------------------------------------------------------------
def ctc_greedy_decode(logits: np.ndarray, blank: Optional[int] = None) -> List[int]:
    """Best path: per-frame argmax (ties -> lowest id), collapse repeats, drop blanks."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InvalidInputError(f"logits must be T×P with P >= 2, got shape {logits.shape}")
    blank = logits.shape[1] - 1 if blank is None else blank
    path = np.argmax(logits, axis=1)
    decoded = []
    previous = None
    for symbol in path:
        symbol = int(symbol)
        if symbol != previous and symbol != blank:
            decoded.append(symbol)
        previous = symbol
    return decoded


# -------------------------------------------------------------------------
# PHONE MAPPING
# -------------------------------------------------------------------------
class PhoneMapping:
    """Total map from source phone symbols to target symbols (None deletes)."""

    def __init__(self, table: Dict[str, Optional[str]], name: str = "custom"):
        self.table = dict(table)
        self.name = name
        for src, dst in self.table.items():
            if dst is not None and self.table.get(dst, None) != dst:
                raise ConfigError(f"mapping '{name}' is not idempotent: {src} -> {dst}, "
                                  f"but {dst} -> {self.table.get(dst, '<unmapped>')}")

    @classmethod
    def identity(cls, symbols: Iterable[str], name: str = "identity") -> "PhoneMapping":
        return cls({s: s for s in symbols}, name=name)

    @property
    def targets(self) -> List[str]:
        return sorted({dst for dst in self.table.values() if dst is not None})

    def __len__(self) -> int:
        return len(self.table)


def load_mapping(path: str) -> PhoneMapping:
    """Read a `src dst` per line asset; `-` as dst deletes the symbol, `#` starts a comment line."""
    if not os.path.isfile(path):
        raise ConfigError(f"phone mapping file not found: {path}")
    table = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'src dst', got '{line}'")
            src, dst = parts
            if src in table:
                raise ConfigError(f"{path}:{lineno}: symbol '{src}' mapped twice")
            table[src] = None if dst == DELETED else dst
    mapping = PhoneMapping(table, name=os.path.splitext(os.path.basename(path))[0])
    logger.info(f"Loaded phone mapping '{mapping.name}': {len(mapping)} -> {len(mapping.targets)} symbols")
    return mapping


def apply_mapping(seq: Sequence[str], mapping: PhoneMapping) -> List[str]:
    out = []
    for symbol in seq:
        if symbol not in mapping.table:
            raise InvalidInputError(f"symbol '{symbol}' is not covered by mapping '{mapping.name}'")
        image = mapping.table[symbol]
        if image is not None:
            out.append(image)
    return out


# -------------------------------------------------------------------------
# ALIGNMENT AND PER
# -------------------------------------------------------------------------
def edit_distance(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int]:
    """
    Unit-cost Levenshtein alignment of hyp against ref, returned as
    (substitutions, insertions, deletions). Among minimal alignments the
    backtrace prefers substitution, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=int)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                cost[i, j - 1] + 1,
                cost[i - 1, j] + 1,
            )

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, ins, dels


class UtteranceScore(BaseModel):
    id: str
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


class ScoreReport(BaseModel):
    utterances: List[UtteranceScore]
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int
    per: float
    mapping: Optional[str] = None


def score(refs: Sequence[Sequence], hyps: Sequence[Sequence], mapping: Optional[PhoneMapping] = None,
          ids: Optional[Sequence[str]] = None) -> ScoreReport:
    """PER = 100·(S+I+D)/Σ ref lengths; a mapping, when given, is applied to both sides."""
    if len(refs) != len(hyps):
        raise InvalidInputError(f"{len(refs)} references but {len(hyps)} hypotheses")
    ids = list(ids) if ids is not None else [f"utt{i:04d}" for i in range(len(refs))]
    if len(ids) != len(refs):
        raise InvalidInputError(f"{len(ids)} ids for {len(refs)} utterances")

    rows = []
    for utt_id, ref, hyp in zip(ids, refs, hyps):
        if mapping is not None:
            ref, hyp = apply_mapping(ref, mapping), apply_mapping(hyp, mapping)
        s, i, d = edit_distance(ref, hyp)
        rows.append(UtteranceScore(id=utt_id, substitutions=s, insertions=i, deletions=d, ref_length=len(ref)))

    total_ref = sum(r.ref_length for r in rows)
    total_err = sum(r.errors for r in rows)
    if total_ref == 0:
        raise InvalidInputError("cannot compute PER over an empty reference set")
    return ScoreReport(
        utterances=rows,
        substitutions=sum(r.substitutions for r in rows),
        insertions=sum(r.insertions for r in rows),
        deletions=sum(r.deletions for r in rows),
        ref_length=total_ref,
        per=100.0 * total_err / total_ref,
        mapping=mapping.name if mapping is not None else None,
    )


# -------------------------------------------------------------------------
# LOSS CURVES
# -------------------------------------------------------------------------
def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.9g}"


def emit_curves(history, path: str) -> str:
    """
    Write one CSV row per epoch record (columns CURVE_COLUMNS, floats at 9
    significant digits). Any non-finite loss or PER aborts before writing.
    """
    records = list(history.records)
    if not records:
        raise InvalidInputError("refusing to emit curves for an empty history")
    for rec in records:
        for column in _FLOAT_COLUMNS:
            if not math.isfinite(getattr(rec, column)):
                raise InvalidInputError(f"epoch {rec.epoch}: non-finite {column} ({getattr(rec, column)})")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for rec in records:
            writer.writerow([rec.epoch, rec.phase, _fmt(rec.lam)] + [_fmt(getattr(rec, c)) for c in _FLOAT_COLUMNS])
    logger.info(f"Wrote {len(records)} epochs of loss curves to {path}")
    return path


def read_curves(path: str) -> List[Dict[str, object]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CURVE_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected curve header {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {"epoch": int(row["epoch"]), "phase": row["phase"],
                      "lambda": float(row["lambda"]) if row["lambda"] else None}
            parsed.update({c: float(row[c]) for c in _FLOAT_COLUMNS})
            rows.append(parsed)
    return rows


def emit_steps(history, path: str) -> str:
    """One CSV row per update (columns STEP_COLUMNS), floats written exactly."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STEP_COLUMNS)
        for step in history.steps:
            lam = "" if step.lam is None else f"{step.lam:.17g}"
            writer.writerow([step.epoch, step.utt_id, f"{step.l_enh:.17g}", f"{step.l_asr:.17g}", lam])
    logger.info(f"Wrote {len(history.steps)} per-update loss rows to {path}")
    return path


def read_steps(path: str) -> List[Dict[str, object]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != STEP_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected step header {reader.fieldnames}")
        return [{"epoch": int(row["epoch"]), "utt_id": row["utt_id"],
                 "l_enh": float(row["l_enh"]), "l_asr": float(row["l_asr"]),
                 "lambda": float(row["lambda"]) if row["lambda"] else None}
                for row in reader]


def loss_gap(history) -> List[float]:
    """Per-epoch validation L_asr / L_enh ratio."""
    return [rec.valid_asr / rec.valid_enh if rec.valid_enh > 0 else math.inf for rec in history.records]


def switch_divergence(history) -> Optional[Tuple[int, float]]:
    """
    For a history with an ENH phase followed by an ASR phase, return the
    first ASR epoch and final validation L_enh divided by its value at the
    end of the ENH phase (inf when that value is zero); None when no such
    switch exists.
    """
    records = list(history.records)
    for prev, rec in zip(records, records[1:]):
        if prev.phase == "ENH" and rec.phase == "ASR":
            if prev.valid_enh <= 0:
                return rec.epoch, math.inf
            return rec.epoch, records[-1].valid_enh / prev.valid_enh
    return None
