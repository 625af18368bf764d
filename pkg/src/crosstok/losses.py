"""Chunk-level distillation losses across mismatched vocabularies.

Five modes: ``kl`` (plain KL over one shared vocabulary), ``uld`` (rank-sorted
L1 over uncommon tokens), ``gold`` (KL over a bijective common set plus ULD on
the remainder), ``pkl`` (project the whole student distribution into teacher
space, then KL), and ``hkl`` (the hybrid loss over a common set relaxed with
each student token's top-ranked projection partner).

Logs are floored at a configurable ``eps`` (log(max(x, eps))), which prevents
NaNs on truncated supports without touching any returned distribution; pass
``eps=None`` to make a zero probability on a live pair an error instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateDistributionError, ValidationError
from .projection import SparseProjection, Provenance, project
from .vocab import Vocabulary

LOG_EPS = 1e-12
MODES = ("pkl", "hkl", "gold", "uld", "kl")


def _vec(dist) -> np.ndarray:
    """Accept either a ChunkDistribution or a bare probability vector."""
    return np.asarray(getattr(dist, "probs", dist), dtype=float)


def _log_floor(x: np.ndarray, eps: float | None) -> np.ndarray:
    if eps is None:
        return np.log(x)
    return np.log(np.maximum(x, eps))


@dataclass(frozen=True)
class CommonSet:
    """Student/teacher token pairs treated as equivalent."""

    pairs: tuple[tuple[int, int], ...]
    bijective: bool = True

    def __post_init__(self) -> None:
        student_ids = [s for s, _ in self.pairs]
        if len(set(student_ids)) != len(student_ids):
            raise ValidationError("a student id appears in more than one pair")
        if self.bijective:
            teacher_ids = [t for _, t in self.pairs]
            if len(set(teacher_ids)) != len(teacher_ids):
                raise ValidationError("bijective common set reuses a teacher id")

    @cached_property
    def student_ids(self) -> np.ndarray:
        return np.asarray([s for s, _ in self.pairs], dtype=np.intp)

    @cached_property
    def teacher_ids(self) -> np.ndarray:
        return np.asarray([t for _, t in self.pairs], dtype=np.intp)

    def uncommon_student(self, n_student: int) -> np.ndarray:
        mask = np.ones(n_student, dtype=bool)
        mask[self.student_ids] = False
        return np.flatnonzero(mask)

    def uncommon_teacher(self, n_teacher: int) -> np.ndarray:
        mask = np.ones(n_teacher, dtype=bool)
        mask[self.teacher_ids] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class HybridWeights:
    lambda_kl: float = 1.0
    lambda_uld: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_kl < 0 or self.lambda_uld < 0:
            raise ValidationError("hybrid loss weights must be non-negative")


def build_common_set_exact(vs: Vocabulary, vt: Vocabulary) -> CommonSet:
    """Canonical-string-equality pairs, bijective by construction.

    Canonical collisions keep the smallest-id pair; specials pair through
    shared roles only.
    """
    canon_index: dict[bytes, int] = {}
    for t in range(len(vt)):
        if not vt.is_special(t):
            canon_index.setdefault(vt.canonical(t), t)

    candidates: list[tuple[int, int]] = []
    for s in range(len(vs)):
        if vs.is_special(s):
            partners = sorted(
                vt.special_roles[r] for r in vs.roles_of(s) if r in vt.special_roles
            )
            if partners:
                candidates.append((s, partners[0]))
        else:
            t = canon_index.get(vs.canonical(s))
            if t is not None:
                candidates.append((s, t))

    pairs: list[tuple[int, int]] = []
    used_t: set[int] = set()
    for s, t in sorted(candidates):
        if t not in used_t:
            used_t.add(t)
            pairs.append((s, t))
    return CommonSet(tuple(pairs))


def build_common_set_relaxed(w: SparseProjection) -> CommonSet:
    """Extend the common set with each student token's top-ranked partner.

    Conflicts on a teacher token are resolved in favor of exact provenance,
    then the higher weight, then the smaller student id; losing student
    tokens stay uncommon, keeping the result bijective.
    """
    by_teacher: dict[int, tuple[int, float, int]] = {}
    for s, row in enumerate(w.rows):
        if not row:
            continue
        t, weight = row[0]
        rank = (0 if w.provenance[s] is Provenance.EXACT else 1, -weight, s)
        if t not in by_teacher or rank < by_teacher[t]:
            by_teacher[t] = rank
    pairs = sorted((rank[2], t) for t, rank in by_teacher.items())
    return CommonSet(tuple(pairs))


def common_kl(p_t, p_s, c: CommonSet, eps: float | None = LOG_EPS) -> float:
    """Partial KL over the common pairs of full-vocabulary distributions.

    No renormalization happens on either side, so the value may be negative.
    """
    pt = _vec(p_t)
    ps = _vec(p_s)
    if len(c.pairs) == 0:
        return 0.0
    pt_c = pt[c.teacher_ids]
    ps_c = ps[c.student_ids]
    live = pt_c > 0
    if eps is None and np.any(ps_c[live] == 0):
        raise ValidationError(
            "student probability is zero on a live common pair (log of zero); "
            "configure a log floor"
        )
    return float(np.sum(pt_c[live] * (_log_floor(pt_c[live], eps) - _log_floor(ps_c[live], eps))))


def common_kl_grad(z_s, p_t, c: CommonSet) -> np.ndarray:
    """Analytic gradient of ``common_kl`` in the student chunk logits.

    Every uncommon logit j receives p_s[j] times the teacher mass on the
    common set, which is non-negative; common logits get the same term minus
    their partner's teacher probability. The realized token is not an input.
    """
    z = np.asarray(z_s, dtype=float)
    pt = _vec(p_t)
    e = np.exp(z - z.max())
    ps = e / e.sum()
    common_mass = float(pt[c.teacher_ids].sum()) if len(c.pairs) else 0.0
    grad = ps * common_mass
    if len(c.pairs):
        grad[c.student_ids] -= pt[c.teacher_ids]
    return grad


def uld(p_s, p_t, c: CommonSet) -> float:
    """Rank-sorted L1 distance between the uncommon restrictions.

    Restrictions are not renormalized; the shorter sorted vector is
    zero-padded.
    """
    ps = _vec(p_s)
    pt = _vec(p_t)
    s_rest = np.sort(ps[c.uncommon_student(ps.size)])[::-1]
    t_rest = np.sort(pt[c.uncommon_teacher(pt.size)])[::-1]
    width = max(s_rest.size, t_rest.size)
    if width == 0:
        return 0.0
    a = np.zeros(width)
    b = np.zeros(width)
    a[: s_rest.size] = s_rest
    b[: t_rest.size] = t_rest
    return float(np.abs(a - b).sum())


def uld_grad(z_s, p_t, c: CommonSet) -> np.ndarray:
    """Subgradient of ``uld`` in the student chunk logits.

    The rank pairing is locally a fixed permutation, so each uncommon student
    entry contributes the sign of its difference with its rank partner;
    sorting ties make this a subgradient rather than a gradient.
    """
    z = np.asarray(z_s, dtype=float)
    pt = _vec(p_t)
    e = np.exp(z - z.max())
    ps = e / e.sum()
    u_s = c.uncommon_student(ps.size)
    if u_s.size == 0:
        return np.zeros(ps.size)
    u_t = c.uncommon_teacher(pt.size)
    order = np.argsort(-ps[u_s], kind="stable")
    partners = np.zeros(u_s.size)
    t_sorted = np.sort(pt[u_t])[::-1]
    width = min(u_s.size, t_sorted.size)
    partners[:width] = t_sorted[:width]
    grad_p = np.zeros(ps.size)
    grad_p[u_s[order]] = np.sign(ps[u_s[order]] - partners)
    return ps * (grad_p - float(ps @ grad_p))


def gold(p_t, p_s, c: CommonSet, hw: HybridWeights = HybridWeights(),
         eps: float | None = LOG_EPS) -> float:
    """Hybrid loss: weighted common-KL plus weighted ULD."""
    return hw.lambda_kl * common_kl(p_t, p_s, c, eps) + hw.lambda_uld * uld(p_s, p_t, c)


def gold_grad(z_s, p_t, c: CommonSet, hw: HybridWeights = HybridWeights()) -> np.ndarray:
    """Subgradient of ``gold`` in the student chunk logits."""
    return hw.lambda_kl * common_kl_grad(z_s, p_t, c) + hw.lambda_uld * uld_grad(z_s, p_t, c)


def pkl(p_t, p_s, w: SparseProjection, support=None,
        eps: float | None = LOG_EPS) -> float:
    """KL from the teacher to the projected student distribution.

    ``support`` restricts the comparison to pre-truncated teacher indices;
    the projected vector is renormalized over that support. The caller is
    responsible for having truncated ``p_t`` to the same support.
    """
    pt = _vec(p_t)
    q = project(w, _vec(p_s))
    if support is not None:
        support = np.asarray(support, dtype=np.intp)
        mass = q[support].sum()
        if mass < 1e-12:
            raise DegenerateDistributionError("projected student mass vanished on the support")
        q = q[support] / mass
        pt = pt[support]
    live = pt > 0
    if eps is None and np.any(q[live] == 0):
        raise ValidationError(
            "projected distribution is zero where the teacher has mass; configure a log floor"
        )
    return float(np.sum(pt[live] * (_log_floor(pt[live], eps) - _log_floor(q[live], eps))))


def pkl_grads(z_s, p_t, w: SparseProjection, support=None,
              eps: float | None = LOG_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of ``pkl`` in the student chunk logits and W entries.

    Differentiates through softmax, the sparse product, and the support
    renormalization. Entries where the log floor is active are treated as
    flat (zero local slope).
    """
    z = np.asarray(z_s, dtype=float)
    pt_full = _vec(p_t)
    e = np.exp(z - z.max())
    ps = e / e.sum()

    q_raw = np.zeros(w.n_teacher, dtype=float)
    np.add.at(q_raw, w._flat_t, w._flat_w * ps[w._flat_s])
    if support is None:
        support = np.arange(w.n_teacher, dtype=np.intp)
    else:
        support = np.asarray(support, dtype=np.intp)
    mass = q_raw[support].sum()
    if mass < 1e-12:
        raise DegenerateDistributionError("projected student mass vanished on the support")

    pt = pt_full[support]
    q_sup = q_raw[support]
    floor = 0.0 if eps is None else eps * mass
    active = (pt > 0) & (q_sup > floor)

    # dL/dq_raw on the support: -p_t/q_raw where unfloored, plus the
    # renormalization term shared by the whole support
    d_q = np.zeros(w.n_teacher, dtype=float)
    ratio = np.zeros(support.size)
    np.divide(pt, q_sup, out=ratio, where=active)
    d_q[support] = pt[active].sum() / mass - ratio

    grad_w = ps[w._flat_s] * d_q[w._flat_t]
    grad_p = np.zeros(w.n_student, dtype=float)
    np.add.at(grad_p, w._flat_s, w._flat_w * d_q[w._flat_t])
    grad_z = ps * (grad_p - float(ps @ grad_p))
    return grad_z, grad_w


def hkl(p_t, p_s, w: SparseProjection, hw: HybridWeights = HybridWeights(),
        relaxed: CommonSet | None = None, eps: float | None = LOG_EPS) -> float:
    """Hybrid loss over the relaxed common set induced by the projection."""
    c = build_common_set_relaxed(w) if relaxed is None else relaxed
    return gold(p_t, p_s, c, hw, eps)


def chunk_kl(p_t, p_s, support=None, eps: float | None = LOG_EPS) -> float:
    """Plain KL between two distributions over one shared vocabulary.

    ``support`` restricts both sides to the given indices and renormalizes
    them there (the pre-truncated caller path passes vectors already zeroed
    off support, for which this is a no-op).
    """
    pt = _vec(p_t)
    ps = _vec(p_s)
    if support is not None:
        support = np.asarray(support, dtype=np.intp)
        s_mass = ps[support].sum()
        t_mass = pt[support].sum()
        if s_mass < 1e-12 or t_mass < 1e-12:
            raise DegenerateDistributionError("no probability mass on the support")
        ps = ps[support] / s_mass
        pt = pt[support] / t_mass
    live = pt > 0
    if eps is None and np.any(ps[live] == 0):
        raise ValidationError(
            "student probability is zero where the teacher has mass; configure a log floor"
        )
    return float(np.sum(pt[live] * (_log_floor(pt[live], eps) - _log_floor(ps[live], eps))))


def chunk_kl_grad(z_s, p_t, support=None, eps: float | None = LOG_EPS) -> np.ndarray:
    """Gradient of ``chunk_kl`` in the student chunk logits.

    Differentiates through the student-side support restriction and
    renormalization; floored entries are treated as flat.
    """
    z = np.asarray(z_s, dtype=float)
    pt_full = _vec(p_t)
    e = np.exp(z - z.max())
    ps = e / e.sum()
    if support is None:
        support = np.arange(ps.size, dtype=np.intp)
    else:
        support = np.asarray(support, dtype=np.intp)
    s_mass = ps[support].sum()
    if s_mass < 1e-12:
        raise DegenerateDistributionError("student mass vanished on the support")
    pt = pt_full[support]
    t_mass = pt.sum()
    if t_mass < 1e-12:
        raise DegenerateDistributionError("teacher mass vanished on the support")
    pt = pt / t_mass

    ps_sup = ps[support]
    floor = 0.0 if eps is None else eps * s_mass
    active = (pt > 0) & (ps_sup > floor)
    ratio = np.zeros(support.size)
    np.divide(pt, ps_sup, out=ratio, where=active)
    grad_p = np.zeros(ps.size)
    grad_p[support] = -ratio + pt[active].sum() / s_mass
    return ps * (grad_p - float(ps @ grad_p))


def kd_aggregate(per_chunk, temperature: float) -> float:
    """Temperature-squared mean of the per-chunk losses."""
    values = np.asarray(list(per_chunk), dtype=float)
    if values.size == 0:
        raise ValidationError("no loss-bearing chunks to aggregate")
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return float(temperature ** 2 * values.mean())


@dataclass
class LossReport:
    """Per-chunk and aggregate loss values for one teacher."""

    mode: str
    temperature: float
    per_chunk: tuple[float, ...]
    aggregate: float
    grad_chunk_logits: tuple[np.ndarray, ...] | None = None
    grad_projection: np.ndarray | None = None
    kd_multiplier: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        expected = kd_aggregate(self.per_chunk, self.temperature)
        if abs(self.aggregate - expected) > 1e-12:
            raise ValidationError(
                f"aggregate {self.aggregate} != temperature^2 * mean = {expected}"
            )

    @classmethod
    def from_chunks(cls, mode: str, per_chunk, temperature: float, **kwargs) -> "LossReport":
        per_chunk = tuple(float(v) for v in per_chunk)
        return cls(mode, temperature, per_chunk,
                   kd_aggregate(per_chunk, temperature), **kwargs)
