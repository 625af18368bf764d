import pytest

from crosstok.audit import (
    CategoryRule,
    CoverageRow,
    audit_coverage,
    coverage_json,
    coverage_table,
    default_rules,
    recommend_mode,
)
from crosstok.errors import ValidationError
from crosstok.losses import CommonSet, build_common_set_exact
from crosstok.vocab import Vocabulary, make_toy_tokenizer


@pytest.fixture(scope="module")
def packed_student():
    return make_toy_tokenizer("numeral_preserving").vocabulary


def coverage_for(student, teacher_kind):
    teacher = make_toy_tokenizer(teacher_kind).vocabulary
    c = build_common_set_exact(student, teacher)
    return audit_coverage(student, c)


def by_name(rows):
    return {r.category: r for r in rows}


class TestAuditCoverage:
    def test_digit_splitting_teacher_drops_multi_digit(self, packed_student):
        rows = by_name(coverage_for(packed_student, "digit_splitting"))
        assert rows["2-digit"].size == 100 and rows["2-digit"].matched == 0
        assert rows["3-digit"].size == 1000 and rows["3-digit"].matched == 0
        assert rows["1-digit"].fraction == 1.0
        assert rows["ascii-punct"].fraction == 1.0
        assert rows["alphabetic"].fraction == 1.0

    def test_same_scheme_teacher_keeps_everything(self, packed_student):
        rows = by_name(coverage_for(packed_student, "numeral_preserving"))
        assert rows["2-digit"].matched == rows["2-digit"].size == 100
        assert rows["3-digit"].matched == rows["3-digit"].size == 1000

    def test_empty_category_fraction_is_not_applicable(self, packed_student):
        rows = by_name(coverage_for(packed_student, "digit_splitting"))
        assert rows["non-ascii"].size == 0
        assert rows["non-ascii"].fraction is None

    def test_counts_match_naive_double_loop(self):
        student = Vocabulary(["a", "7", "77", ",", " the", "x7"])
        teacher = Vocabulary(["a", "7", ","])
        c = build_common_set_exact(student, teacher)
        rows = audit_coverage(student, c)
        common = {s for s, _ in c.pairs}
        for rule, row in zip(default_rules(), rows):
            members = [
                sid for sid in range(len(student))
                if rule.predicate(student.canonical(sid).decode("latin-1"))
            ]
            assert row.size == len(members)
            assert row.matched == sum(1 for sid in members if sid in common)

    def test_default_rules_mutually_exclusive(self, packed_student):
        rules = default_rules()
        for sid in range(len(packed_student)):
            text = packed_student.canonical(sid).decode("latin-1")
            assert sum(rule.predicate(text) for rule in rules) <= 1

    def test_custom_rule(self):
        student = Vocabulary(["aa", "ab", "ba"])
        c = CommonSet(((0, 0),))
        rows = audit_coverage(student, c, [CategoryRule("starts-a", lambda s: s.startswith("a"))])
        assert rows[0].size == 2 and rows[0].matched == 1

    def test_row_validation(self):
        with pytest.raises(ValidationError):
            CoverageRow("bad", matched=3, size=2)


class TestRecommendMode:
    def test_split_digit_regime_selects_projection_loss(self, packed_student):
        rows = coverage_for(packed_student, "digit_splitting")
        assert recommend_mode(rows) == "pkl"

    def test_preserved_digit_regime_selects_relaxed_hybrid(self, packed_student):
        rows = coverage_for(packed_student, "numeral_preserving")
        assert recommend_mode(rows) == "hkl"

    def test_zero_threshold_always_hybrid(self, packed_student):
        rows = coverage_for(packed_student, "digit_splitting")
        assert recommend_mode(rows, threshold=0.0) == "hkl"

    def test_unknown_category_rejected(self, packed_student):
        rows = coverage_for(packed_student, "digit_splitting")
        with pytest.raises(ValidationError, match="unknown"):
            recommend_mode(rows, critical=("4-digit",))

    def test_monotone_in_fractions(self):
        high = [CoverageRow("2-digit", 90, 100), CoverageRow("3-digit", 1000, 1000)]
        low = [CoverageRow("2-digit", 10, 100), CoverageRow("3-digit", 1000, 1000)]
        for threshold in (0.05, 0.5, 0.95, 1.0):
            if recommend_mode(high, threshold=threshold) == "pkl":
                assert recommend_mode(low, threshold=threshold) == "pkl"

    def test_empty_critical_category_skipped(self):
        rows = [CoverageRow("2-digit", 0, 0), CoverageRow("3-digit", 5, 5)]
        assert recommend_mode(rows) == "hkl"


class TestReports:
    def test_table_contains_percentages(self, packed_student):
        rows = coverage_for(packed_student, "digit_splitting")
        table = coverage_table(rows)
        assert "2-digit" in table and "0.0%" in table and "n/a" in table

    def test_json_round_trips(self, packed_student):
        import json

        rows = coverage_for(packed_student, "digit_splitting")
        payload = json.loads(coverage_json(rows, recommendation="pkl"))
        assert payload["recommendation"] == "pkl"
        assert any(r["category"] == "2-digit" and r["fraction"] == 0.0
                   for r in payload["rows"])
