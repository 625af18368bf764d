"""Command-line surface: build projections, align, audit, and evaluate losses.

Exit codes: 0 success, 1 validation error, 2 I/O error. Every command is
deterministic given its inputs and seed; re-running writes byte-identical
files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .align import AlignScoring, ChunkKind, dp_align, trl_substring_align, write_alignment_dump
from .audit import DEFAULT_CRITICAL, audit_coverage, coverage_json, coverage_table, recommend_mode
from .chunks import load_position_logits, save_float_matrix
from .errors import ValidationError
from .losses import HybridWeights, build_common_set_exact
from .projection import ProjectionConfig, build_projection, load_projection, save_projection
from .training import (
    ScalingPolicy,
    TeacherConfig,
    WeightSchedule,
    gradient_check,
    run_step,
)
from .vocab import Tokenizer, load_vocabulary

GRADCHECK_TOLERANCE = 1e-6


def _pick(args, config: dict, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(name, default)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return data


def _emit(args, payload: dict, text: str) -> None:
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    else:
        print(text)


def cmd_build_w(args, config: dict) -> int:
    vs = load_vocabulary(args.student_vocab)
    vt = load_vocabulary(args.teacher_vocab)
    cfg = ProjectionConfig(
        beta=_pick(args, config, "beta", 0.9),
        gamma=_pick(args, config, "gamma", 0.1),
        max_span=_pick(args, config, "max_span", 4),
        top_k=_pick(args, config, "top_k", 4),
    )
    w = build_projection(vs, vt, Tokenizer(vt), cfg)
    save_projection(w, args.out)
    summary = {"out": str(args.out), **w.summary()}
    text = "\n".join(
        [f"projection written to {args.out}"]
        + [f"  {k} rows: {v}" for k, v in summary["provenance"].items()]
        + [f"  dropped mass: mean {summary['dropped_mass_mean']:.3e}, "
           f"max {summary['dropped_mass_max']:.3e}"]
    )
    _emit(args, summary, text)
    return 0


def cmd_align(args, config: dict) -> int:
    tok_s = Tokenizer(load_vocabulary(args.student_vocab))
    tok_t = Tokenizer(load_vocabulary(args.teacher_vocab))
    scoring = AlignScoring(
        alpha_exact=_pick(args, config, "alpha_exact", 3.0),
        alpha_comb=_pick(args, config, "alpha_comb", 1.5),
        alpha_gap=_pick(args, config, "alpha_gap", -1.5),
        max_span=_pick(args, config, "max_span", 4),
    )
    bos_id = None
    if args.student_add_bos:
        bos_id = tok_s.vocabulary.special_roles.get("bos")
        if bos_id is None:
            raise ValidationError(
                "--student-add-bos needs a 'bos' role in the student vocabulary"
            )
    with open(args.texts, "r", encoding="utf-8") as fh:
        texts = fh.read().splitlines()

    items = []
    counts = {kind.value: 0 for kind in ChunkKind}
    for i, text in enumerate(texts):
        s_ids = tok_s.encode(text)
        if bos_id is not None:
            s_ids = [bos_id] + s_ids
        t_ids = tok_t.encode(text)
        if args.baseline:
            alignment = trl_substring_align(s_ids, t_ids, tok_s, tok_t)
        else:
            alignment = dp_align(s_ids, t_ids, scoring, tok_s, tok_t)
        for chunk in alignment.chunks:
            counts[chunk.kind.value] += 1
        items.append((i, alignment))
    write_alignment_dump(args.out, items)

    summary = {
        "out": str(args.out),
        "sequences": len(items),
        "engine": "baseline" if args.baseline else "dp",
        **counts,
    }
    text = "\n".join(
        [f"aligned {len(items)} sequence(s) -> {args.out}"]
        + [f"  {kind}: {n}" for kind, n in counts.items() if n]
    )
    _emit(args, summary, text)
    return 0


def cmd_audit(args, config: dict) -> int:
    vs = load_vocabulary(args.student_vocab)
    vt = load_vocabulary(args.teacher_vocab)
    c = build_common_set_exact(vs, vt)
    rows = audit_coverage(vs, c)
    critical = tuple(args.critical.split(",")) if args.critical else DEFAULT_CRITICAL
    threshold = _pick(args, config, "threshold", 1.0)
    mode = recommend_mode(rows, critical=critical, threshold=threshold)
    if args.format == "json":
        sys.stdout.write(coverage_json(rows, recommendation=mode))
    else:
        print(coverage_table(rows))
        print(f"recommended loss mode: {mode}")
    return 0


def _load_step_inputs(config: dict):
    try:
        student_cfg = config["student"]
        teacher_cfgs = config["teachers"]
    except KeyError as missing:
        raise ValidationError(f"step config is missing the {missing} section") from None

    student_vocab = load_vocabulary(student_cfg["vocab"])
    student_logits = load_position_logits(student_cfg["logits"],
                                          expected_vocab=student_vocab)
    teachers = []
    for tc in teacher_cfgs:
        vocab = load_vocabulary(tc["vocab"])
        logits = load_position_logits(tc["logits"], expected_vocab=vocab)
        projection = load_projection(tc["projection"]) if tc.get("projection") else None
        teachers.append(TeacherConfig(
            name=tc.get("name", tc["logits"]),
            mode=tc["mode"],
            vocab=vocab,
            logits=logits,
            projection=projection,
            weight=tc.get("weight", 1.0),
        ))
    return student_vocab, student_logits, teachers


def cmd_loss(args, config: dict) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.gradcheck:
        worst = gradient_check(seed=seed, instances=args.instances)
        ok = all(err < GRADCHECK_TOLERANCE for err in worst.values())
        payload = {"max_relative_error": worst, "tolerance": GRADCHECK_TOLERANCE,
                   "pass": ok}
        text = "\n".join(
            [f"finite-difference check (seed {seed}, {args.instances} instances)"]
            + [f"  {name}: {err:.3e}" for name, err in sorted(worst.items())]
            + [f"  -> {'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:.0e}"]
        )
        _emit(args, payload, text)
        return 0 if ok else 1

    if not config:
        raise ValidationError("loss needs --config pointing at a step config file")
    student_vocab, student_logits, teachers = _load_step_inputs(config)

    policy_cfg = config.get("policy", {})
    policy = ScalingPolicy(
        kind=policy_cfg.get("kind", "dynamic"),
        lambda_kd=policy_cfg.get("lambda_kd", 1.0),
        lambda_ce=policy_cfg.get("lambda_ce", 0.1),
    )
    schedule_cfg = config.get("schedule")
    schedule = None
    if schedule_cfg is not None:
        static = schedule_cfg.get("weights")
        schedule = WeightSchedule(schedule_cfg.get("kind", "static"),
                                  tuple(static) if static is not None else None)
    scoring_cfg = config.get("scoring", {})
    scoring = AlignScoring(
        alpha_exact=scoring_cfg.get("alpha_exact", 3.0),
        alpha_comb=scoring_cfg.get("alpha_comb", 1.5),
        alpha_gap=scoring_cfg.get("alpha_gap", -1.5),
        max_span=scoring_cfg.get("max_span", 4),
    )
    hybrid_cfg = config.get("hybrid", {})
    hybrid = HybridWeights(hybrid_cfg.get("lambda_kl", 1.0),
                           hybrid_cfg.get("lambda_uld", 1.0))

    report = run_step(
        student_vocab, student_logits, teachers,
        policy=policy,
        schedule=schedule,
        temperature=config.get("temperature", 1.0),
        scoring=scoring,
        top_k=config.get("top_k", 8192),
        hybrid=hybrid,
        compute_grads=args.grad,
        eps=config.get("eps", 1e-12),
        config_echo=config,
    )

    payload = json.loads(report.to_json())
    if args.grad:
        if args.out is None:
            raise ValidationError("--grad needs --out to anchor the gradient files")
        stem = Path(args.out)
        grad_files: dict[str, str] = {}
        ce_path = stem.with_suffix(".ce_grad.bin")
        save_float_matrix(report.ce_grad, ce_path)
        grad_files["ce"] = ce_path.name
        for breakdown in report.teachers:
            for k, grad in enumerate(breakdown.report.grad_chunk_logits):
                path = stem.with_suffix(f".{breakdown.name}.chunk{k:04d}.bin")
                save_float_matrix(grad, path)
                grad_files[f"{breakdown.name}/chunk{k}"] = path.name
            if breakdown.report.grad_projection is not None:
                path = stem.with_suffix(f".{breakdown.name}.w_entries.bin")
                save_float_matrix(breakdown.report.grad_projection, path)
                grad_files[f"{breakdown.name}/w_entries"] = path.name
        payload["gradient_files"] = grad_files

    rendered = json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(rendered)
    else:
        sys.stdout.write(rendered)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosstok",
        description="Cross-tokenizer distillation toolkit: alignment, projection, "
                    "coverage audit, and loss evaluation over stored logits.",
    )
    parser.add_argument("--config", help="JSON config file (step config for 'loss', "
                                         "default overrides elsewhere)")
    parser.add_argument("--seed", type=int, help="seed for randomized checks")
    parser.add_argument("--format", choices=("json", "text"), default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-w", help="build and save a sparse projection matrix")
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--max-span", type=int)
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_build_w)

    p = sub.add_parser("align", help="align a file of texts under both tokenizers")
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--texts", required=True, help="one input text per line")
    p.add_argument("--out", required=True, help="chunk dump (JSON Lines)")
    p.add_argument("--baseline", action="store_true",
                   help="use the incremental-decode buffer baseline instead of the DP")
    p.add_argument("--student-add-bos", action="store_true",
                   help="prepend the student vocabulary's 'bos' role token to every "
                        "encoded student sequence")
    p.add_argument("--alpha-exact", type=float)
    p.add_argument("--alpha-comb", type=float)
    p.add_argument("--alpha-gap", type=float)
    p.add_argument("--max-span", type=int)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("audit", help="coverage audit and loss-mode recommendation")
    p.add_argument("--student-vocab", required=True)
    p.add_argument("--teacher-vocab", required=True)
    p.add_argument("--critical", help="comma-separated critical categories")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("loss", help="evaluate a simulated step from a step config")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--grad", action="store_true",
                   help="also write gradient tensors next to the report")
    p.add_argument("--gradcheck", action="store_true",
                   help="run the finite-difference suite instead of a step")
    p.add_argument("--instances", type=int, default=20,
                   help="instance count for --gradcheck")
    p.set_defaults(func=cmd_loss)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # includes ValidationError and malformed JSON/number parsing
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
