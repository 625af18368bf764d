"""Chunk-level distributions built from stored per-position logits.

A logits dump stores, per position, the next-token distribution and the token
that was actually realized at that position; the realized-id sequence is the
token sequence that span alignment runs on. Merging a multi-token chunk keeps
the first position's distribution and replaces the realized first token's
probability with the chain-rule product of the realized span, then
renormalizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .align import AlignmentChunk
from .errors import DegenerateDistributionError, ValidationError
from .vocab import Vocabulary, vocabulary_hash

SIDES = ("student", "teacher")


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PositionLogits:
    """Per-position logits over one side's vocabulary plus realized token ids."""

    seq_id: str
    side: str
    logits: np.ndarray
    realized_ids: np.ndarray
    vocab_hash: str | None = None

    def __post_init__(self) -> None:
        if self.side not in SIDES:
            raise ValidationError(f"side must be one of {SIDES}, got {self.side!r}")
        self.logits = np.asarray(self.logits, dtype=float)
        self.realized_ids = np.asarray(self.realized_ids, dtype=np.intp)
        if self.logits.ndim != 2:
            raise ValidationError("logits must be a positions-by-vocab matrix")
        if self.realized_ids.shape != (self.logits.shape[0],):
            raise ValidationError("need one realized id per position")
        if self.positions and (self.realized_ids.min() < 0
                               or self.realized_ids.max() >= self.vocab_size):
            raise ValidationError("realized id outside the vocabulary")

    @property
    def positions(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]


@dataclass
class ChunkDistribution:
    """A probability vector over one side's vocabulary, tied to aligned chunk k."""

    side: str
    probs: np.ndarray
    k: int = 0

    def __post_init__(self) -> None:
        if self.side not in SIDES:
            raise ValidationError(f"side must be one of {SIDES}, got {self.side!r}")
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 1:
            raise ValidationError("chunk distribution must be a vector")
        if self.probs.min(initial=0.0) < 0:
            raise ValidationError("chunk distribution has negative entries")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"chunk distribution sums to {self.probs.sum()}, not 1")


def chain_rule_merge(pl: PositionLogits, chunk: AlignmentChunk,
                     temperature: float = 1.0, chunk_index: int = 0) -> ChunkDistribution:
    """Collapse one side's span of an aligned chunk into a single distribution."""
    if not chunk.in_loss:
        raise ValidationError(f"chunk kind {chunk.kind.value!r} is excluded from the loss")
    lo, hi = chunk.span(pl.side)
    if not 0 <= lo < hi <= pl.positions:
        raise ValidationError(
            f"span [{lo}, {hi}) outside the {pl.positions}-position {pl.side} dump"
        )
    probs = softmax(pl.logits[lo:hi], temperature)
    if hi - lo == 1:
        return ChunkDistribution(pl.side, probs[0], chunk_index)
    realized = pl.realized_ids[lo:hi]
    merged = probs[0].copy()
    merged[realized[0]] = np.prod(probs[np.arange(hi - lo), realized])
    merged /= merged.sum()
    return ChunkDistribution(pl.side, merged, chunk_index)


def topk_support(probs, k: int) -> np.ndarray:
    """Indices of the k largest entries; boundary ties go to the smaller id."""
    p = np.asarray(probs, dtype=float)
    if k < 1:
        raise ValidationError("k must be at least 1")
    if k >= p.size:
        return np.arange(p.size, dtype=np.intp)
    order = np.lexsort((np.arange(p.size), -p))
    return np.sort(order[:k].astype(np.intp))


def topk_truncate(teacher: ChunkDistribution, student: ChunkDistribution,
                  k: int) -> tuple[ChunkDistribution, ChunkDistribution]:
    """Restrict both distributions to the teacher's top-k support and renormalize.

    The returned vectors keep the full vocabulary length, zeroed off support.
    """
    if teacher.probs.shape != student.probs.shape:
        raise ValidationError("distributions must share one vocabulary")
    if k >= teacher.probs.size:
        return teacher, student
    support = topk_support(teacher.probs, k)

    t_new = np.zeros_like(teacher.probs)
    t_mass = teacher.probs[support].sum()
    if t_mass < 1e-12:
        raise DegenerateDistributionError("teacher mass on its own top-k support vanished")
    t_new[support] = teacher.probs[support] / t_mass

    s_mass = student.probs[support].sum()
    if s_mass < 1e-12:
        raise DegenerateDistributionError(
            "student places no mass on the teacher's top-k support"
        )
    s_new = np.zeros_like(student.probs)
    s_new[support] = student.probs[support] / s_mass
    return (ChunkDistribution(teacher.side, t_new, teacher.k),
            ChunkDistribution(student.side, s_new, student.k))


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_position_logits(pl: PositionLogits, path) -> None:
    """Write the little-endian float32 matrix and its JSON sidecar."""
    pl.logits.astype("<f4").tofile(path)
    sidecar = {
        "seq_id": pl.seq_id,
        "side": pl.side,
        "vocab_hash": pl.vocab_hash,
        "realized_ids": [int(i) for i in pl.realized_ids],
        "positions": pl.positions,
        "vocab_size": pl.vocab_size,
    }
    with open(_sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_position_logits(path, expected_vocab: Vocabulary | None = None) -> PositionLogits:
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    flat = np.fromfile(path, dtype="<f4")
    positions, vocab_size = meta["positions"], meta["vocab_size"]
    if flat.size != positions * vocab_size:
        raise ValidationError(
            f"{path}: expected {positions}x{vocab_size} float32 values, found {flat.size}"
        )
    pl = PositionLogits(
        seq_id=meta["seq_id"],
        side=meta["side"],
        logits=flat.reshape(positions, vocab_size).astype(float),
        realized_ids=np.asarray(meta["realized_ids"], dtype=np.intp),
        vocab_hash=meta.get("vocab_hash"),
    )
    if expected_vocab is not None:
        expected = vocabulary_hash(expected_vocab)
        if pl.vocab_hash != expected:
            raise ValidationError(
                f"{path}: dump was produced for a different vocabulary "
                f"(hash {pl.vocab_hash} != {expected})"
            )
        if pl.vocab_size != len(expected_vocab):
            raise ValidationError(f"{path}: dump width {pl.vocab_size} != |V|={len(expected_vocab)}")
    return pl


def save_float_matrix(values: np.ndarray, path) -> None:
    """Gradient tensors reuse the dump encoding: little-endian float32 + shape sidecar."""
    arr = np.asarray(values, dtype=float)
    arr.astype("<f4").tofile(path)
    with open(_sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"shape": list(arr.shape)}, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_float_matrix(path) -> np.ndarray:
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        shape = json.load(fh)["shape"]
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(float)
