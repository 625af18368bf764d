"""Simulated distillation step over stored logits dumps.

``run_step`` executes the full per-step pipeline: align the realized student
and teacher token sequences (cached), merge chunk distributions, evaluate each
teacher's configured loss mode, aggregate with the temperature-squared mean,
weight teachers statically or by confidence, and combine with the student's
next-token cross-entropy under a fixed or dynamic scaling policy. No
parameters are updated; gradients, when requested, are assembled for an
external consumer with the dynamic ratio treated as a constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .align import AlignmentCache, AlignScoring, ChunkKind
from .chunks import (
    ChunkDistribution,
    PositionLogits,
    chain_rule_merge,
    softmax,
    topk_support,
)
from .errors import ValidationError
from .losses import (
    LOG_EPS,
    MODES,
    CommonSet,
    HybridWeights,
    LossReport,
    build_common_set_exact,
    build_common_set_relaxed,
    chunk_kl,
    chunk_kl_grad,
    common_kl,
    common_kl_grad,
    gold,
    gold_grad,
    pkl,
    pkl_grads,
    uld,
    uld_grad,
)
from .numdiff import central_difference, max_relative_error
from .projection import ProjectionConfig, Provenance, SparseProjection
from .vocab import Tokenizer, Vocabulary, vocabulary_hash

_KD_FLOOR = 1e-12
SCHEDULE_KINDS = ("static", "adaptive_ce", "adaptive_entropy", "adaptive_maxprob")


@dataclass(frozen=True)
class ScalingPolicy:
    """How the aggregated KD loss combines with cross-entropy."""

    kind: str = "dynamic"
    lambda_kd: float = 1.0
    lambda_ce: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ("dynamic", "fixed"):
            raise ValidationError(f"policy kind must be 'dynamic' or 'fixed', got {self.kind!r}")
        if self.lambda_kd < 0 or self.lambda_ce < 0:
            raise ValidationError("fixed policy weights must be non-negative")


def combine_kd_ce(l_kd: float, l_ce: float, policy: ScalingPolicy) -> tuple[float, float]:
    """Total loss and the multiplier applied to the KD term.

    The dynamic multiplier is the stop-gradient ratio l_ce / l_kd: downstream
    gradient assembly must treat it as data, so the assembled gradient is
    grad(l_ce) + multiplier * grad(l_kd).
    """
    if policy.kind == "fixed":
        return policy.lambda_kd * l_kd + policy.lambda_ce * l_ce, policy.lambda_kd
    if l_kd <= _KD_FLOOR:
        raise ValidationError(
            f"dynamic scaling undefined for KD loss {l_kd} (ratio would diverge)"
        )
    multiplier = l_ce / l_kd
    return multiplier * l_kd + l_ce, multiplier


@dataclass(frozen=True)
class WeightSchedule:
    """Static or confidence-adaptive weighting across teachers."""

    kind: str = "static"
    static: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"schedule kind must be one of {SCHEDULE_KINDS}")
        if self.kind == "static":
            if self.static is None:
                raise ValidationError("static schedule needs explicit weights")
            if any(w < 0 for w in self.static):
                raise ValidationError("static weights must be non-negative")
            if abs(sum(self.static) - 1.0) > 1e-9:
                raise ValidationError(f"static weights sum to {sum(self.static)}, not 1")


@dataclass
class TeacherStats:
    """Per-position confidence inputs for one teacher on a (B, N) grid."""

    probs: np.ndarray     # (B, N, V) next-token distributions
    realized: np.ndarray  # (B, N) ground-truth next tokens under this teacher

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        self.realized = np.asarray(self.realized, dtype=np.intp)
        if self.probs.ndim != 3:
            raise ValidationError("stats need a (batch, positions, vocab) tensor")
        if self.realized.shape != self.probs.shape[:2]:
            raise ValidationError("realized grid does not match the probs grid")


def adaptive_weights(kind: str, teacher_stats: Sequence[TeacherStats]) -> np.ndarray:
    """Softmax over per-teacher mean confidence scores.

    Scores per token: ``adaptive_ce`` uses log p[y] (negated cross-entropy),
    ``adaptive_entropy`` uses the negated entropy, ``adaptive_maxprob`` the
    maximum probability; higher always means more confident. Teachers must
    share the batch dimension; position counts may differ because each
    teacher tokenizes the same text its own way.
    """
    if kind not in SCHEDULE_KINDS or kind == "static":
        raise ValidationError(f"unknown adaptive kind {kind!r}")
    if not teacher_stats:
        raise ValidationError("need stats for at least one teacher")
    batches = {s.probs.shape[0] for s in teacher_stats}
    if len(batches) != 1:
        raise ValidationError(f"mismatched stat grids: batch sizes {sorted(batches)}")

    means = []
    for stats in teacher_stats:
        p = stats.probs
        if kind == "adaptive_ce":
            b_idx, n_idx = np.indices(stats.realized.shape)
            scores = np.log(np.maximum(p[b_idx, n_idx, stats.realized], LOG_EPS))
        elif kind == "adaptive_entropy":
            scores = np.sum(np.where(p > 0, p * np.log(np.maximum(p, LOG_EPS)), 0.0), axis=-1)
        else:
            scores = p.max(axis=-1)
        means.append(float(scores.mean()))

    shifted = np.asarray(means) - max(means)
    e = np.exp(shifted)
    return e / e.sum()


def resolve_weights(schedule: WeightSchedule, n_teachers: int,
                    stats: Sequence[TeacherStats] | None = None) -> np.ndarray:
    if schedule.kind == "static":
        if len(schedule.static) != n_teachers:
            raise ValidationError(
                f"schedule has {len(schedule.static)} weights for {n_teachers} teachers"
            )
        return np.asarray(schedule.static, dtype=float)
    if stats is None:
        raise ValidationError("adaptive schedules need per-teacher stats")
    if len(stats) != n_teachers:
        raise ValidationError("need stats for every teacher")
    return adaptive_weights(schedule.kind, stats)


def multi_teacher_kd(per_teacher_chunk_losses: Sequence[Sequence[float]],
                     schedule: WeightSchedule,
                     stats: Sequence[TeacherStats] | None = None,
                     names: Sequence[str] | None = None) -> float:
    """Weighted sum of per-teacher chunk means."""
    if not per_teacher_chunk_losses:
        raise ValidationError("need at least one teacher")
    names = list(names) if names is not None else [f"teacher{i}" for i in
                                                   range(len(per_teacher_chunk_losses))]
    means = []
    for name, chunk_losses in zip(names, per_teacher_chunk_losses):
        values = list(chunk_losses)
        if not values:
            raise ValidationError(f"teacher {name!r} has no loss-bearing chunks")
        means.append(float(np.mean(values)))
    alphas = resolve_weights(schedule, len(means), stats)
    return float(alphas @ np.asarray(means))


@dataclass
class TeacherConfig:
    """One teacher's loaded inputs and loss routing for a simulated step."""

    name: str
    mode: str
    vocab: Vocabulary
    logits: PositionLogits
    projection: SparseProjection | None = None
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"teacher {self.name!r}: mode must be one of {MODES}")
        if self.weight < 0:
            raise ValidationError(f"teacher {self.name!r}: weight must be non-negative")


@dataclass
class TeacherBreakdown:
    name: str
    mode: str
    alpha: float
    report: LossReport
    chunk_stats: dict


@dataclass
class StepReport:
    """Everything a consumer needs from one simulated step."""

    temperature: float
    ce: float
    kd: float
    total: float
    kd_multiplier: float
    alphas: tuple[float, ...]
    teachers: list[TeacherBreakdown]
    ce_grad: np.ndarray | None = None
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Deterministic JSON (gradient tensors are written separately)."""
        payload = {
            "temperature": self.temperature,
            "ce": self.ce,
            "kd": self.kd,
            "total": self.total,
            "kd_multiplier": self.kd_multiplier,
            "alphas": list(self.alphas),
            "teachers": [
                {
                    "name": t.name,
                    "mode": t.mode,
                    "alpha": t.alpha,
                    "per_chunk": list(t.report.per_chunk),
                    "aggregate": t.report.aggregate,
                    "chunk_stats": t.chunk_stats,
                }
                for t in self.teachers
            ],
            "config_echo": self.config_echo,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def _chunk_stats(alignment) -> dict:
    counts = {kind.value: 0 for kind in ChunkKind}
    for c in alignment.chunks:
        counts[c.kind.value] += 1
    return {
        "chunks": len(alignment.chunks),
        "loss_chunks": len(alignment.loss_chunks()),
        "matches": counts["match"],
        "combinations": counts["combination"],
        "mismatches": counts["mismatch"],
        "gaps": counts["gap_student_side"] + counts["gap_teacher_side"],
        "score": alignment.score,
    }


def cross_entropy(pl: PositionLogits) -> float:
    """Mean negative log-likelihood of the realized token at every position."""
    z = pl.logits
    log_z = np.log(np.sum(np.exp(z - z.max(axis=1, keepdims=True)), axis=1))
    picked = z[np.arange(pl.positions), pl.realized_ids] - z.max(axis=1)
    return float(np.mean(log_z - picked))


def cross_entropy_grad(pl: PositionLogits) -> np.ndarray:
    """Gradient of ``cross_entropy`` in the position logits, (P, V)."""
    probs = softmax(pl.logits)
    probs[np.arange(pl.positions), pl.realized_ids] -= 1.0
    return probs / pl.positions


def _chunk_logits(dist: ChunkDistribution) -> np.ndarray:
    # any logits vector representing the chunk distribution yields the same
    # gradient, so the log of the merged probabilities serves as chunk logits
    return np.log(np.maximum(dist.probs, 1e-300))


def _teacher_loss_and_grad(teacher: TeacherConfig, p_t: ChunkDistribution,
                           p_s: ChunkDistribution, top_k: int,
                           exact_set: CommonSet | None, relaxed_set: CommonSet | None,
                           hybrid: HybridWeights, eps: float | None,
                           compute_grads: bool):
    """One chunk's loss under the teacher's mode, plus optional gradients."""
    mode = teacher.mode
    grad_z = grad_w = None
    if mode == "kl":
        support = topk_support(p_t.probs, top_k) if top_k < p_t.probs.size else None
        value = chunk_kl(p_t, p_s, support=support, eps=eps)
        if compute_grads:
            grad_z = chunk_kl_grad(_chunk_logits(p_s), p_t, support=support, eps=eps)
    elif mode == "pkl":
        support = topk_support(p_t.probs, top_k) if top_k < p_t.probs.size else None
        if support is not None:
            pt = np.zeros_like(p_t.probs)
            pt[support] = p_t.probs[support] / p_t.probs[support].sum()
        else:
            pt = p_t.probs
        value = pkl(pt, p_s, teacher.projection, support=support, eps=eps)
        if compute_grads:
            grad_z, grad_w = pkl_grads(_chunk_logits(p_s), pt, teacher.projection,
                                       support=support, eps=eps)
    elif mode == "hkl":
        value = gold(p_t, p_s, relaxed_set, hybrid, eps)
        if compute_grads:
            grad_z = gold_grad(_chunk_logits(p_s), p_t, relaxed_set, hybrid)
    elif mode == "gold":
        value = gold(p_t, p_s, exact_set, hybrid, eps)
        if compute_grads:
            grad_z = gold_grad(_chunk_logits(p_s), p_t, exact_set, hybrid)
    else:  # uld
        empty = CommonSet(())
        value = uld(p_s, p_t, empty)
        if compute_grads:
            grad_z = uld_grad(_chunk_logits(p_s), p_t, empty)
    return value, grad_z, grad_w


def _validate_teacher(student_vocab: Vocabulary, teacher: TeacherConfig) -> None:
    if teacher.logits.side != "teacher":
        raise ValidationError(f"teacher {teacher.name!r}: dump side is {teacher.logits.side!r}")
    if teacher.logits.vocab_size != len(teacher.vocab):
        raise ValidationError(f"teacher {teacher.name!r}: dump width != vocabulary size")
    if teacher.logits.vocab_hash is not None:
        if teacher.logits.vocab_hash != vocabulary_hash(teacher.vocab):
            raise ValidationError(f"teacher {teacher.name!r}: vocab hash mismatch")
    if teacher.mode == "kl" and teacher.vocab != student_vocab:
        raise ValidationError(
            f"teacher {teacher.name!r}: KL mode requires the student's vocabulary"
        )
    if teacher.mode in ("pkl", "hkl"):
        if teacher.projection is None:
            raise ValidationError(
                f"teacher {teacher.name!r}: mode {teacher.mode} needs a projection"
            )
        if (teacher.projection.n_student != len(student_vocab)
                or teacher.projection.n_teacher != len(teacher.vocab)):
            raise ValidationError(
                f"teacher {teacher.name!r}: projection shape does not match the vocabularies"
            )


def run_step(student_vocab: Vocabulary, student_logits: PositionLogits,
             teachers: Sequence[TeacherConfig],
             policy: ScalingPolicy = ScalingPolicy(),
             schedule: WeightSchedule | None = None,
             temperature: float = 1.0,
             scoring: AlignScoring = AlignScoring(),
             top_k: int = 8192,
             hybrid: HybridWeights = HybridWeights(),
             cache: AlignmentCache | None = None,
             compute_grads: bool = False,
             eps: float | None = LOG_EPS,
             config_echo: dict | None = None) -> StepReport:
    """One simulated training step over stored logits. Deterministic."""
    if not teachers:
        raise ValidationError("need at least one teacher")
    if student_logits.side != "student":
        raise ValidationError(f"student dump side is {student_logits.side!r}")
    if student_logits.vocab_size != len(student_vocab):
        raise ValidationError("student dump width != vocabulary size")
    if (student_logits.vocab_hash is not None
            and student_logits.vocab_hash != vocabulary_hash(student_vocab)):
        raise ValidationError("student vocab hash mismatch")
    for teacher in teachers:
        _validate_teacher(student_vocab, teacher)

    if schedule is None:
        schedule = WeightSchedule("static", tuple(t.weight for t in teachers))
    stats = None
    if schedule.kind != "static":
        stats = [
            TeacherStats(softmax(t.logits.logits)[None], t.logits.realized_ids[None])
            for t in teachers
        ]
    alphas = resolve_weights(schedule, len(teachers), stats)

    tok_s = Tokenizer(student_vocab)
    cache = cache if cache is not None else AlignmentCache()
    s_seq = student_logits.realized_ids.tolist()

    breakdowns: list[TeacherBreakdown] = []
    for teacher in teachers:
        tok_t = Tokenizer(teacher.vocab)
        t_seq = teacher.logits.realized_ids.tolist()
        alignment = cache.get_or_compute(s_seq, t_seq, scoring, tok_s, tok_t)

        exact_set = relaxed_set = None
        if teacher.mode == "gold":
            exact_set = build_common_set_exact(student_vocab, teacher.vocab)
        elif teacher.mode == "hkl":
            relaxed_set = build_common_set_relaxed(teacher.projection)

        per_chunk: list[float] = []
        grads_z: list[np.ndarray] = []
        grad_w_total = (np.zeros(teacher.projection.entry_count)
                        if compute_grads and teacher.mode == "pkl" else None)
        for k, chunk in enumerate(alignment.chunks):
            if not chunk.in_loss:
                continue
            p_s = chain_rule_merge(student_logits, chunk, temperature, k)
            p_t = chain_rule_merge(teacher.logits, chunk, temperature, k)
            value, g_z, g_w = _teacher_loss_and_grad(
                teacher, p_t, p_s, top_k, exact_set, relaxed_set, hybrid, eps,
                compute_grads)
            per_chunk.append(value)
            if compute_grads:
                grads_z.append(g_z)
                if g_w is not None:
                    grad_w_total += g_w
        if not per_chunk:
            raise ValidationError(f"teacher {teacher.name!r} has no loss-bearing chunks")

        report = LossReport.from_chunks(teacher.mode, per_chunk, temperature,
                                        grad_chunk_logits=tuple(grads_z) or None,
                                        grad_projection=grad_w_total)
        breakdowns.append(TeacherBreakdown(teacher.name, teacher.mode, 0.0, report,
                                           _chunk_stats(alignment)))

    l_kd = float(sum(a * b.report.aggregate for a, b in zip(alphas, breakdowns)))
    l_ce = cross_entropy(student_logits)
    if policy.kind == "dynamic" and l_kd <= _KD_FLOOR:
        # nothing to rescale when the distillation term vanishes
        total, multiplier = l_ce, 0.0
    else:
        total, multiplier = combine_kd_ce(l_kd, l_ce, policy)
    ce_coeff = 1.0 if policy.kind == "dynamic" else policy.lambda_ce

    ce_grad = None
    if compute_grads:
        ce_grad = ce_coeff * cross_entropy_grad(student_logits)
        # scale the stored per-chunk and projection gradients into
        # total-loss gradients, holding the dynamic multiplier constant
        for alpha, breakdown in zip(alphas, breakdowns):
            report = breakdown.report
            K = len(report.per_chunk)
            scale = multiplier * float(alpha) * temperature ** 2 / K
            report.grad_chunk_logits = tuple(scale * g for g in report.grad_chunk_logits)
            if report.grad_projection is not None:
                report.grad_projection = scale * report.grad_projection

    for alpha, breakdown in zip(alphas, breakdowns):
        breakdown.alpha = float(alpha)

    return StepReport(
        temperature=temperature,
        ce=l_ce,
        kd=l_kd,
        total=total,
        kd_multiplier=multiplier,
        alphas=tuple(float(a) for a in alphas),
        teachers=breakdowns,
        ce_grad=ce_grad,
        config_echo=config_echo or {},
    )


def gradient_check(seed: int, instances: int = 20, h: float = 1e-6) -> dict[str, float]:
    """Finite-difference verification of every analytic gradient path.

    Returns the max relative error per gradient family over random toy
    instances; used by the CLI and mirrored by the test suite.
    """
    rng = np.random.default_rng(seed)
    worst = {"pkl_logits": 0.0, "pkl_entries": 0.0, "common_kl": 0.0,
             "uld": 0.0, "chunk_kl": 0.0}
    for _ in range(instances):
        n_s = int(rng.integers(3, 8))
        n_t = int(rng.integers(3, 8))
        rows, covered = [], set()
        for s in range(n_s):
            k = int(rng.integers(1, min(4, n_t) + 1))
            ids = rng.choice(n_t, size=k, replace=False)
            weights = rng.dirichlet(np.ones(k)) * 0.9
            rows.append(sorted(zip(ids.tolist(), weights.tolist()),
                               key=lambda tw: (-tw[1], tw[0])))
            covered.update(ids.tolist())
        if covered != set(range(n_t)):
            continue
        w = SparseProjection(n_s, n_t, rows, [Provenance.MULTI_TOKEN] * n_s,
                             ProjectionConfig())
        z = rng.normal(size=n_s)
        pt = rng.dirichlet(np.ones(n_t))

        g_z, g_w = pkl_grads(z, pt, w)
        num_z = central_difference(lambda zz: pkl(pt, softmax(zz), w), z, h)
        worst["pkl_logits"] = max(worst["pkl_logits"], max_relative_error(g_z, num_z))
        base = np.array([wt for _, _, wt in w.entries()])
        ps = softmax(z)
        num_w = central_difference(lambda flat: pkl(pt, ps, w.with_weights(flat)), base, h)
        worst["pkl_entries"] = max(worst["pkl_entries"], max_relative_error(g_w, num_w))

        width = int(rng.integers(0, min(n_s, n_t) + 1))
        pairs = tuple(sorted(zip(
            rng.choice(n_s, size=width, replace=False).tolist(),
            rng.choice(n_t, size=width, replace=False).tolist())))
        c = CommonSet(pairs)
        g_c = common_kl_grad(z, pt, c)
        num_c = central_difference(lambda zz: common_kl(pt, softmax(zz), c), z, h)
        worst["common_kl"] = max(worst["common_kl"], max_relative_error(g_c, num_c))

        g_u = uld_grad(z, pt, c)
        num_u = central_difference(lambda zz: uld(softmax(zz), pt, c), z, h)
        worst["uld"] = max(worst["uld"], max_relative_error(g_u, num_u))

        if n_s == n_t:
            support = topk_support(pt, max(1, n_t - 2))
            g_k = chunk_kl_grad(z, pt, support=support)
            num_k = central_difference(
                lambda zz: chunk_kl(pt, softmax(zz), support=support), z, h)
            worst["chunk_kl"] = max(worst["chunk_kl"], max_relative_error(g_k, num_k))
    return worst
