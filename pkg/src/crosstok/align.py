"""Span alignment of two token sequences from different tokenizers.

``dp_align`` runs a soft-scored dynamic program whose transitions are 1-to-1
diagonals (matching or mismatching), 1-to-k / k-to-1 combinations gated on
canonical text equality, and one-sided gaps. ``brute_force_align`` enumerates
every legal transition sequence and is the test oracle for small inputs.
``trl_substring_align`` is the incremental-decode buffer baseline, kept for
comparison because a single byte of divergence makes it bundle everything
after the divergence point into one super-group.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import ValidationError
from .vocab import Tokenizer, vocabulary_hash


@dataclass(frozen=True)
class AlignScoring:
    """Scoring constants for the alignment DP."""

    alpha_exact: float = 3.0
    alpha_comb: float = 1.5
    alpha_gap: float = -1.5
    max_span: int = 4

    def __post_init__(self) -> None:
        if self.alpha_exact <= 0:
            raise ValidationError("alpha_exact must be positive")
        if self.alpha_comb <= 0:
            raise ValidationError("alpha_comb must be positive")
        if self.alpha_gap >= 0:
            raise ValidationError("alpha_gap must be negative")
        if self.max_span < 2:
            raise ValidationError("max_span must be at least 2")


class ChunkKind(str, Enum):
    MATCH = "match"
    COMBINATION = "combination"
    MISMATCH = "mismatch"
    GAP_STUDENT_SIDE = "gap_student_side"  # teacher token with no student counterpart
    GAP_TEACHER_SIDE = "gap_teacher_side"  # student token with no teacher counterpart
    SUPER_GROUP = "super_group"  # baseline force-flush residue, never loss-bearing


_LOSS_BEARING = frozenset({ChunkKind.MATCH, ChunkKind.COMBINATION})


@dataclass(frozen=True)
class AlignmentChunk:
    """A pair of half-open index spans, one per side."""

    student_span: tuple[int, int]
    teacher_span: tuple[int, int]
    kind: ChunkKind

    @property
    def in_loss(self) -> bool:
        return self.kind in _LOSS_BEARING

    def span(self, side: str) -> tuple[int, int]:
        if side == "student":
            return self.student_span
        if side == "teacher":
            return self.teacher_span
        raise ValidationError(f"unknown side {side!r}")


@dataclass(frozen=True)
class Alignment:
    chunks: tuple[AlignmentChunk, ...]
    score: float

    def loss_chunks(self) -> tuple[AlignmentChunk, ...]:
        return tuple(c for c in self.chunks if c.in_loss)


class _CanonTable:
    """Precomputed canonical forms and the match predicates used by the DP."""

    def __init__(self, student: Sequence[int], teacher: Sequence[int],
                 tok_s: Tokenizer, tok_t: Tokenizer) -> None:
        vs, vt = tok_s.vocabulary, tok_t.vocabulary
        self.s_special = [vs.is_special(i) for i in student]
        self.t_special = [vt.is_special(j) for j in teacher]
        self.s_canon = [vs.canonical(i) for i in student]
        self.t_canon = [vt.canonical(j) for j in teacher]
        self.s_roles = [vs.roles_of(i) for i in student]
        self.t_roles = [vt.roles_of(j) for j in teacher]

    def diag_matches(self, i: int, j: int) -> bool:
        """1-to-1 equality of the i-th student and j-th teacher token."""
        if self.s_special[i] or self.t_special[j]:
            # specials pair only through shared roles, never through text
            return bool(self.s_roles[i] & self.t_roles[j])
        return self.s_canon[i] == self.t_canon[j]

    def one_to_many(self, i: int, j_lo: int, j_hi: int) -> bool:
        """Student token i decodes to the concatenation of teacher span [j_lo, j_hi)."""
        if self.s_special[i] or any(self.t_special[j] for j in range(j_lo, j_hi)):
            return False
        return self.s_canon[i] == b"".join(self.t_canon[j_lo:j_hi])

    def many_to_one(self, i_lo: int, i_hi: int, j: int) -> bool:
        if self.t_special[j] or any(self.s_special[i] for i in range(i_lo, i_hi)):
            return False
        return self.t_canon[j] == b"".join(self.s_canon[i_lo:i_hi])


def dp_align(student: Sequence[int], teacher: Sequence[int], scoring: AlignScoring,
             tok_s: Tokenizer, tok_t: Tokenizer) -> Alignment:
    """Optimal-score chunking of the two sequences.

    Ties are broken toward finer, identity-aligned chunks: diagonal first,
    then 1-to-k combinations (smaller k first), then k-to-1 combinations,
    then a gap on the teacher side, then a gap on the student side.
    """
    n, m = len(student), len(teacher)
    table = _CanonTable(student, teacher, tok_s, tok_t)
    a_ex, a_cb, a_gap, span = scoring.alpha_exact, scoring.alpha_comb, scoring.alpha_gap, scoring.max_span

    score = [[0.0] * (m + 1) for _ in range(n + 1)]
    parent: list[list[tuple[str, int] | None]] = [[None] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        score[i][0] = i * a_gap
        parent[i][0] = ("gap_t", 1)
    for j in range(1, m + 1):
        score[0][j] = j * a_gap
        parent[0][j] = ("gap_s", 1)

    for i in range(1, n + 1):
        for j in range(1, m + 1):
            # candidates in tie-break preference order; first strict max wins
            best = score[i - 1][j - 1] + (a_ex if table.diag_matches(i - 1, j - 1) else -a_ex)
            best_move = ("diag", 1)
            for k in range(2, min(span, j) + 1):
                if table.one_to_many(i - 1, j - k, j):
                    cand = score[i - 1][j - k] + a_cb * k
                    if cand > best:
                        best, best_move = cand, ("comb_1k", k)
            for k in range(2, min(span, i) + 1):
                if table.many_to_one(i - k, i, j - 1):
                    cand = score[i - k][j - 1] + a_cb * k
                    if cand > best:
                        best, best_move = cand, ("comb_k1", k)
            cand = score[i - 1][j] + a_gap
            if cand > best:
                best, best_move = cand, ("gap_t", 1)
            cand = score[i][j - 1] + a_gap
            if cand > best:
                best, best_move = cand, ("gap_s", 1)
            score[i][j] = best
            parent[i][j] = best_move

    chunks: list[AlignmentChunk] = []
    i, j = n, m
    while i > 0 or j > 0:
        move, k = parent[i][j]  # type: ignore[misc]
        if move == "diag":
            kind = ChunkKind.MATCH if table.diag_matches(i - 1, j - 1) else ChunkKind.MISMATCH
            chunks.append(AlignmentChunk((i - 1, i), (j - 1, j), kind))
            i, j = i - 1, j - 1
        elif move == "comb_1k":
            chunks.append(AlignmentChunk((i - 1, i), (j - k, j), ChunkKind.COMBINATION))
            i, j = i - 1, j - k
        elif move == "comb_k1":
            chunks.append(AlignmentChunk((i - k, i), (j - 1, j), ChunkKind.COMBINATION))
            i, j = i - k, j - 1
        elif move == "gap_t":
            chunks.append(AlignmentChunk((i - 1, i), (j, j), ChunkKind.GAP_TEACHER_SIDE))
            i -= 1
        else:
            chunks.append(AlignmentChunk((i, i), (j - 1, j), ChunkKind.GAP_STUDENT_SIDE))
            j -= 1
    chunks.reverse()
    return Alignment(tuple(chunks), score[n][m])


_BRUTE_FORCE_LIMIT = 12


def brute_force_align(student: Sequence[int], teacher: Sequence[int], scoring: AlignScoring,
                      tok_s: Tokenizer, tok_t: Tokenizer) -> Alignment:
    """Exhaustive enumeration of every legal transition sequence (test oracle).

    Refuses inputs with more than 12 tokens in total.
    """
    n, m = len(student), len(teacher)
    if n + m > _BRUTE_FORCE_LIMIT:
        raise ValidationError(
            f"brute-force alignment limited to n+m <= {_BRUTE_FORCE_LIMIT}, got {n + m}"
        )
    table = _CanonTable(student, teacher, tok_s, tok_t)
    a_ex, a_cb, a_gap, span = scoring.alpha_exact, scoring.alpha_comb, scoring.alpha_gap, scoring.max_span

    best_score = -math.inf
    best_chunks: list[AlignmentChunk] = []
    path: list[AlignmentChunk] = []

    def explore(i: int, j: int, acc: float) -> None:
        nonlocal best_score, best_chunks
        if i == n and j == m:
            if acc > best_score:
                best_score = acc
                best_chunks = list(path)
            return
        if i < n and j < m:
            matched = table.diag_matches(i, j)
            kind = ChunkKind.MATCH if matched else ChunkKind.MISMATCH
            path.append(AlignmentChunk((i, i + 1), (j, j + 1), kind))
            explore(i + 1, j + 1, acc + (a_ex if matched else -a_ex))
            path.pop()
            for k in range(2, min(span, m - j) + 1):
                if table.one_to_many(i, j, j + k):
                    path.append(AlignmentChunk((i, i + 1), (j, j + k), ChunkKind.COMBINATION))
                    explore(i + 1, j + k, acc + a_cb * k)
                    path.pop()
            for k in range(2, min(span, n - i) + 1):
                if table.many_to_one(i, i + k, j):
                    path.append(AlignmentChunk((i, i + k), (j, j + 1), ChunkKind.COMBINATION))
                    explore(i + k, j + 1, acc + a_cb * k)
                    path.pop()
        if i < n:
            path.append(AlignmentChunk((i, i + 1), (j, j), ChunkKind.GAP_TEACHER_SIDE))
            explore(i + 1, j, acc + a_gap)
            path.pop()
        if j < m:
            path.append(AlignmentChunk((i, i), (j, j + 1), ChunkKind.GAP_STUDENT_SIDE))
            explore(i, j + 1, acc + a_gap)
            path.pop()

    explore(0, 0, 0.0)
    return Alignment(tuple(best_chunks), best_score)


def trl_substring_align(student: Sequence[int], teacher: Sequence[int],
                        tok_s: Tokenizer, tok_t: Tokenizer) -> Alignment:
    """Incremental-decode buffer baseline.

    Extends the shorter raw-text buffer one token at a time and flushes a
    group whenever the buffers compare equal. Whatever remains unflushed at
    end of sequence is emitted as one group: a combination if the leftover
    texts agree, otherwise a super-group excluded from the loss. Baseline
    alignments carry no DP score (score is 0).
    """
    s_text = [tok_s.decode_token(t) for t in student]
    t_text = [tok_t.decode_token(t) for t in teacher]
    n, m = len(student), len(teacher)

    chunks: list[AlignmentChunk] = []
    si = ti = 0
    s_start = t_start = 0
    sbuf = tbuf = ""

    def flush(kind: ChunkKind | None = None) -> None:
        nonlocal s_start, t_start, sbuf, tbuf
        if kind is None:
            one_to_one = si - s_start == 1 and ti - t_start == 1
            kind = ChunkKind.MATCH if one_to_one else ChunkKind.COMBINATION
        chunks.append(AlignmentChunk((s_start, si), (t_start, ti), kind))
        s_start, t_start = si, ti
        sbuf = tbuf = ""

    while si < n or ti < m:
        if sbuf and sbuf == tbuf:
            flush()
            continue
        if ti >= m or (si < n and len(sbuf) <= len(tbuf)):
            sbuf += s_text[si]
            si += 1
        else:
            tbuf += t_text[ti]
            ti += 1

    if sbuf or tbuf:
        flush(None if sbuf == tbuf else ChunkKind.SUPER_GROUP)
    return Alignment(tuple(chunks), 0.0)


class AlignmentCache:
    """Explicit alignment store keyed by (vocab pair, id sequences, scoring).

    Reads are lock-free; inserts take a lock so concurrent computations of
    the same key settle on a single stored value.
    """

    def __init__(self) -> None:
        self._store: dict = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    @staticmethod
    def _key(student, teacher, scoring, tok_s, tok_t):
        return (
            vocabulary_hash(tok_s.vocabulary),
            vocabulary_hash(tok_t.vocabulary),
            tuple(student),
            tuple(teacher),
            scoring,
        )

    def get(self, student, teacher, scoring, tok_s, tok_t) -> Alignment | None:
        return self._store.get(self._key(student, teacher, scoring, tok_s, tok_t))

    def get_or_compute(self, student, teacher, scoring: AlignScoring,
                       tok_s: Tokenizer, tok_t: Tokenizer) -> Alignment:
        key = self._key(student, teacher, scoring, tok_s, tok_t)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        computed = dp_align(student, teacher, scoring, tok_s, tok_t)
        with self._lock:
            return self._store.setdefault(key, computed)


def chunk_records(seq_id, alignment: Alignment) -> list[dict]:
    """One JSON-ready record per chunk."""
    return [
        {
            "seq_id": seq_id,
            "k": k,
            "s_lo": c.student_span[0],
            "s_hi": c.student_span[1],
            "t_lo": c.teacher_span[0],
            "t_hi": c.teacher_span[1],
            "kind": c.kind.value,
            "in_loss": c.in_loss,
        }
        for k, c in enumerate(alignment.chunks)
    ]


def write_alignment_dump(path, items: Iterable[tuple[object, Alignment]]) -> None:
    """Write alignments as JSON Lines, one record per chunk."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq_id, alignment in items:
            for rec in chunk_records(seq_id, alignment):
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
                fh.write("\n")


def read_alignment_dump(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
