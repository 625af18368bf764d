"""Coverage audit of the common set by token category, and loss-mode selection.

Predicates run on canonical token text. The default categories are mutually
exclusive, so the table reads as disjoint counts: digit strings by length,
ASCII punctuation, alphabetic (with an optional leading space), and anything
containing a non-ASCII byte.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from typing import Callable, Sequence

from .errors import ValidationError
from .losses import CommonSet
from .vocab import Vocabulary

PKL_MODE = "pkl"
HKL_MODE = "hkl"

DEFAULT_CRITICAL = ("2-digit", "3-digit")


@dataclass(frozen=True)
class CategoryRule:
    name: str
    predicate: Callable[[str], bool]


def _decode(canon: bytes) -> str:
    # latin-1 is total on bytes, so predicates always see a string
    return canon.decode("latin-1")


_PUNCT = frozenset(string.punctuation)
_ALPHA = re.compile(r" ?[A-Za-z]+\Z")


def default_rules() -> tuple[CategoryRule, ...]:
    return (
        CategoryRule("1-digit", lambda s: len(s) == 1 and s.isdigit() and s.isascii()),
        CategoryRule("2-digit", lambda s: len(s) == 2 and s.isdigit() and s.isascii()),
        CategoryRule("3-digit", lambda s: len(s) == 3 and s.isdigit() and s.isascii()),
        CategoryRule("ascii-punct", lambda s: bool(s) and all(c in _PUNCT for c in s)),
        CategoryRule("alphabetic", lambda s: bool(_ALPHA.match(s))),
        CategoryRule("non-ascii", lambda s: not s.isascii()),
    )


@dataclass(frozen=True)
class CoverageRow:
    category: str
    matched: int
    size: int

    def __post_init__(self) -> None:
        if not 0 <= self.matched <= self.size:
            raise ValidationError(
                f"category {self.category!r}: matched {self.matched} of {self.size}"
            )

    @property
    def fraction(self) -> float | None:
        """matched / size, or None for an empty category."""
        if self.size == 0:
            return None
        return self.matched / self.size


def audit_coverage(vs: Vocabulary, c: CommonSet,
                   rules: Sequence[CategoryRule] = ()) -> list[CoverageRow]:
    """Count, per category, the student tokens that survive into the common set."""
    rules = tuple(rules) or default_rules()
    if not rules:
        raise ValidationError("need at least one category rule")
    common_students = set(int(s) for s in c.student_ids)
    rows = []
    for rule in rules:
        size = matched = 0
        for sid in range(len(vs)):
            if not rule.predicate(_decode(vs.canonical(sid))):
                continue
            size += 1
            if sid in common_students:
                matched += 1
        rows.append(CoverageRow(rule.name, matched, size))
    return rows


def recommend_mode(coverage: Sequence[CoverageRow],
                   critical: Sequence[str] = DEFAULT_CRITICAL,
                   threshold: float = 1.0) -> str:
    """Pick the projection loss when any critical category falls below the
    threshold, the relaxed hybrid loss otherwise. Empty critical categories
    are skipped."""
    by_name = {row.category: row for row in coverage}
    for name in critical:
        if name not in by_name:
            raise ValidationError(f"unknown critical category {name!r}")
        row = by_name[name]
        if row.size > 0 and row.fraction < threshold:
            return PKL_MODE
    return HKL_MODE


def coverage_table(coverage: Sequence[CoverageRow]) -> str:
    """Aligned text table."""
    name_w = max([len(r.category) for r in coverage] + [8])
    lines = [f"{'category':<{name_w}}  {'common':>12}  {'fraction':>8}"]
    for row in coverage:
        frac = "n/a" if row.fraction is None else f"{100 * row.fraction:.1f}%"
        lines.append(f"{row.category:<{name_w}}  {row.matched:>5}/{row.size:<6}  {frac:>8}")
    return "\n".join(lines)


def coverage_json(coverage: Sequence[CoverageRow], recommendation: str | None = None) -> str:
    payload = {
        "rows": [
            {"category": r.category, "matched": r.matched, "size": r.size,
             "fraction": r.fraction}
            for r in coverage
        ],
    }
    if recommendation is not None:
        payload["recommendation"] = recommendation
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
