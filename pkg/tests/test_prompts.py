import json

import pytest
from hypothesis import given, strategies as st

from scaffoldkit.cohort import FOR2107_LABELS, OASIS3_LABELS, PatientRecord
from scaffoldkit.prompts import (
    CONDITIONS,
    AssemblyError,
    PhraseProbeSpec,
    PromptError,
    UnknownConditionError,
    build_prompt,
    changed_segments,
    default_templates,
    get_condition,
    phrase_inventory,
    substitute_preamble,
)

REC = PatientRecord("S1", {"Alter": 40}, FOR2107_LABELS.with_value("positive"), volume_ref="mri/S1.png")
SER = "Patient clinical information:\nAge: 40 years"
PARCEL = "Insular Cortex: 8.0 mm³"


def bundle(tag, labels=FOR2107_LABELS, **kw):
    cond = get_condition(tag)
    parcel = PARCEL if cond.includes_parcel_text else None
    image = kw.pop("image_ref", "swap/dog.png" if cond.image_kind == "swap" else None)
    return build_prompt(REC, SER, parcel, cond, labels, image_ref=image, **kw)


def test_c1_text():
    text = bundle("C1").text
    assert text.startswith("You are given patient clinical information\n\n")
    assert "MRI" not in text
    assert "- Major Depressive Disorder" in text and "- Control (no disorder detected)" in text
    assert text.endswith(SER)


def test_c2_adds_only_the_clause():
    c1, c2 = bundle("C1").text, bundle("C2").text
    clause = " and their MRI data (brain parcellation volume, visualization of brain regions)"
    assert c2.startswith("You are given patient clinical information" + clause)
    assert c2.replace(clause, "", 1) == c1


def test_oasis_options():
    text = bundle("C1", labels=OASIS3_LABELS).text
    assert "- Cognitive Normal" in text and "- Cognitive Decline" in text


@pytest.mark.parametrize(
    "tag,preamble,parcel,image,kind",
    [
        ("C1", False, False, False, "none"),
        ("C2", True, False, False, "none"),
        ("C3", True, False, True, "mri_plot"),
        ("C4", True, True, True, "mri_plot"),
        ("C5", True, True, True, "swap"),
    ],
)
def test_condition_flags(tag, preamble, parcel, image, kind):
    b = bundle(tag)
    assert (b.segment("preamble") is not None) == preamble
    assert (b.segment("parcel") is not None) == parcel
    assert (b.image_ref is not None) == image
    assert b.image_kind == kind
    assert b.out_of_domain == (tag == "C5")


def test_c3_defaults_to_record_volume_ref():
    assert bundle("C3").image_ref == "mri/S1.png"


def test_ablation_clauses():
    assert "fMRI data" in bundle("C2_fmri").text
    assert "weather" in bundle("C2_weather").text
    assert bundle("C2_weather").image_ref is None


def test_assembly_errors_name_component():
    with pytest.raises(AssemblyError) as exc:
        build_prompt(REC, SER, None, get_condition("C4"), FOR2107_LABELS)
    assert exc.value.component == "parcel_text"
    with pytest.raises(AssemblyError) as exc:
        build_prompt(REC, SER, "x: 1.0 mm³", get_condition("C5"), FOR2107_LABELS)
    assert exc.value.component == "image"
    with pytest.raises(AssemblyError) as exc:
        build_prompt(REC, "", None, get_condition("C1"), FOR2107_LABELS)
    assert exc.value.component == "record"


def test_unknown_condition():
    with pytest.raises(UnknownConditionError):
        get_condition("C9")


def test_messages_put_image_first():
    msgs = bundle("C4").to_messages()
    assert msgs[0]["role"] == "user"
    assert [p["type"] for p in msgs[0]["content"]] == ["image", "text"]


def test_determinism():
    assert bundle("C5").dump() == bundle("C5").dump()


@pytest.mark.parametrize("phrase", phrase_inventory(), ids=lambda p: p.phrase_id)
def test_substitution_changes_one_segment(phrase):
    base = bundle("C1")
    sub = substitute_preamble(base, phrase)
    assert changed_segments(base, sub) == ["preamble"]
    assert phrase.text in sub.text
    assert sub.text.replace("\n" + phrase.text, "", 1) == base.text
    assert sub.condition.tag == f"probe:{phrase.phrase_id}"


def test_substitution_examples():
    phrases = {p.phrase_id: p for p in phrase_inventory()}
    assert phrases["1"].text == "Brain MRI findings are available."
    assert phrases["19"].text == "You are a helpful assistant."


def test_probes_never_stack():
    p = phrase_inventory()[0]
    with pytest.raises(PromptError):
        substitute_preamble(bundle("C2"), p)
    with pytest.raises(PromptError):
        substitute_preamble(substitute_preamble(bundle("C1"), p), p)


def test_inventory(tmp_path):
    inv = phrase_inventory()
    assert len(inv) == 19
    assert {p.category for p in inv} <= {"mri_neuroimaging", "general_clinical", "structural_format", "neutral", "authoritative", "negation"}
    empty = tmp_path / "e.json"
    empty.write_text("")
    assert phrase_inventory(empty) == []
    dup = tmp_path / "d.json"
    dup.write_text(json.dumps([{"id": 1, "category": "neutral", "text": "a"}, {"id": 1, "category": "neutral", "text": "b"}]))
    with pytest.raises(PromptError):
        phrase_inventory(dup)
    bad = tmp_path / "b.json"
    bad.write_text(json.dumps([{"id": 1, "category": "poetry", "text": "a"}]))
    with pytest.raises(PromptError):
        phrase_inventory(bad)


@given(st.text(min_size=1).filter(lambda s: s.strip()))
def test_any_phrase_is_a_single_insertion(text):
    base = bundle("C1")
    sub = substitute_preamble(base, PhraseProbeSpec("x", "neutral", text))
    assert changed_segments(base, sub) == ["preamble"]


def test_templates_cover_all_preambles():
    t = default_templates()
    for cond in CONDITIONS.values():
        if cond.preamble:
            assert cond.preamble in t.preambles
