import pytest

from helpers import CORRIDOR_GENERAL, CORRIDOR_SPECIFIC
from hpomdp.kbmodel import (KBError, KBSyntaxError, parse_general, parse_kb, serialize_general,
                            serialize_specific, validate)


def test_corridor_is_valid(corridor_kb):
    report = validate(corridor_kb)
    assert report.ok, str(report)
    assert [a for a, _ in corridor_kb.actions] == ["left", "right"]
    assert corridor_kb.variable("loc").values == ("a1", "a2", "a3", "a4")


def test_rest_takes_the_leftover_mass(corridor_kb):
    assert corridor_kb.observation_row("left", "a1") == pytest.approx({"z1": 0.9, "z2": 0.1})
    assert corridor_kb.observation_row("left", "a2") == pytest.approx({"z1": 0.1, "z2": 0.8, "z3": 0.1})


def test_transition_rows_follow_relations(corridor_kb):
    assert corridor_kb.transition_row("right", "a2") == pytest.approx({"a2": 0.2, "a3": 0.8})


def test_exec_forbid_uses_first_members(corridor_kb):
    assert corridor_kb.forbidden_values("left") == {"a1"}
    assert corridor_kb.forbidden_values("right") == {"a4"}


def test_literal_exec_forbid_values():
    text = CORRIDOR_GENERAL.replace("exec-forbid left when wall_left", "exec-forbid left when a1 a2")
    kb = parse_kb(text, CORRIDOR_SPECIFIC)
    assert kb.forbidden_values("left") == {"a1", "a2"}


def test_row_sum_error_is_located():
    text = CORRIDOR_GENERAL.replace("trans right rel to_right 0.8", "trans right rel to_right 0.7")
    report = validate(parse_kb(text, CORRIDOR_SPECIFIC))
    assert not report.ok
    assert any(v.location == "(right, a2)" and "transition" in v.message for v in report.violations)


def test_syntax_error_reports_line():
    text = CORRIDOR_GENERAL.replace("action right modifies loc", "action right changes loc")
    with pytest.raises(KBSyntaxError) as exc:
        parse_general(text)
    assert exc.value.line == 5


@pytest.mark.parametrize("bad", [
    "trans jump rel here 1.0",
    "trans left rel seen 1.0",
    "rel odd xx over loc",
    "obs left rel here rest",
])
def test_general_declaration_errors(bad):
    with pytest.raises(KBSyntaxError):
        parse_general(CORRIDOR_GENERAL + bad + "\n")


@pytest.mark.parametrize("extra, message", [
    ("hpair a1 B\n", "two parents"),
    ("hpair a1 a2\n", "two parents"),
    ("abstract C\n", "no parent"),
])
def test_hierarchy_errors(extra, message):
    with pytest.raises(KBError, match=message):
        parse_kb(CORRIDOR_GENERAL, CORRIDOR_SPECIFIC + extra)


def test_concrete_values_must_be_leaves():
    specific = CORRIDOR_SPECIFIC.replace("abstract A B", "abstract A B C") + "hpair C a1\n"
    with pytest.raises(KBError, match="leaves"):
        parse_kb(CORRIDOR_GENERAL, specific)


def test_unknown_pair_value():
    with pytest.raises(KBError, match="unknown value"):
        parse_kb(CORRIDOR_GENERAL, CORRIDOR_SPECIFIC + "pair here a9 a9\n")


def test_serialization_round_trip(corridor_kb):
    general, specific = serialize_general(corridor_kb), serialize_specific(corridor_kb)
    again = parse_kb(general, specific)
    assert again == corridor_kb
    assert serialize_general(again) == general
    assert serialize_specific(again) == specific


def test_state_constraints_parse():
    kb = parse_kb(CORRIDOR_GENERAL, CORRIDOR_SPECIFIC + "forbid loc=a3\n")
    assert kb.constraints.forbidden_tuples == ((("loc", "a3"),),)
