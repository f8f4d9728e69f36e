from __future__ import annotations

import pytest

from ocuphen.ontology import (
    AttributeCategory,
    OntologyError,
    RawLabel,
    default_ontology,
    parse_ontology,
)

LAT = AttributeCategory.LATERALITY
TMP = AttributeCategory.TEMPORALITY
SEV = AttributeCategory.SEVERITY_TYPE
VAL = AttributeCategory.SPAN_VALIDITY

EXPECTED_CONCEPT_GROUPS = {
    "A1": "RetinaConditions",
    "A2": "RetinaConditions",
    "A3": "RetinaConditions",
    "A4": "RetinaConditions",
    "B1": "RetinaConditions",
    "C1": "RetinaComplications",
    "C2": "RetinaComplications",
    "C3": "RetinaComplications",
    "D1": "TreatmentProcedure",
    "D2": "TreatmentProcedure",
    "D3": "TreatmentProcedure",
    "D4": "TreatmentProcedure",
    "E1": "TreatmentSurgery",
    "E2": "TreatmentSurgery",
    "F1": "Comorbidities",
    "G1": "DMComplications",
    "G2": "DMComplications",
    "G3": "DMComplications",
    "G4": "DMComplications",
}

# task id -> (group shown in reports, class count, classes in canonical order)
EXPECTED_TASKS = {
    "Temporality-Retina": ("Temporality", 2, ("Present", "Not Present")),
    "Temporality-DMComplications": ("Temporality", 2, ("Present", "Not Present")),
    "Temporality-Treatment": (
        "Temporality",
        3,
        ("History of", "Performed Today", "Discussed"),
    ),
    "Laterality-All": ("Laterality", 3, ("OS", "OD", "OU")),
    "Type-ME": ("Type", 2, ("DME", "Other")),
    "Type-RD": ("Type", 4, ("RRD", "TRD", "Combined RRD/TRD", "Serous")),
    "Type-NV": (
        "Type",
        5,
        ("NVD and/or NVE", "Iris + NVD and/or NVE", "Iris", "AMD", "Other"),
    ),
    "Type-DM": ("Type", 3, ("Type I", "Type II", "Other")),
    "Type-NVGSurgery": ("Type", 3, ("Tube", "Trab", "MIGS")),
    "Type-RetinaSurgery": ("Type", 2, ("Indication VH", "Indication RD")),
    "Severity-NPDR": ("Severity", 3, ("Mild", "Moderate", "Severe")),
    "Severity-PDR": ("Severity", 2, ("HR-PDR", "NHR-PDR")),
    "SpanValidity-ME": ("Span Validity", 2, ("Valid", "Invalid")),
    "SpanValidity-RetinaSurgery": ("Span Validity", 2, ("Valid", "Invalid")),
}


def test_concept_inventory():
    onto = default_ontology()
    assert len(onto.concepts) == 19
    assert {c.id: c.group for c in onto.concepts.values()} == EXPECTED_CONCEPT_GROUPS
    assert onto.concepts["F1"].name == "DM"
    assert onto.concepts["G3"].name == "Heart Attack"
    assert onto.concepts["A1"].name == "DR (General)"


def test_task_inventory():
    onto = default_ontology()
    assert len(onto.tasks) == 14
    assert list(onto.tasks) == list(EXPECTED_TASKS)
    for tid, (group, n, classes) in EXPECTED_TASKS.items():
        task = onto.tasks[tid]
        assert task.group == group, tid
        assert task.n_classes == n, tid
        assert task.classes == classes, tid


def test_task_concept_coverage():
    onto = default_ontology()
    assert onto.tasks["Temporality-Retina"].concepts == (
        "A1", "A2", "A3", "A4", "B1", "C1", "C2", "C3",
    )
    assert onto.tasks["Temporality-DMComplications"].concepts == ("G1", "G2", "G3", "G4")
    assert onto.tasks["Laterality-All"].concepts == (
        "A1", "A2", "A3", "A4", "B1", "C1", "C2", "C3",
        "D1", "D2", "D3", "D4", "E1", "E2",
    )
    assert onto.tasks["Type-NV"].concepts == ("A4",)
    assert [t.id for t in onto.tasks_for_concept("B1")] == [
        "Temporality-Retina", "Laterality-All", "Type-ME", "SpanValidity-ME",
    ]
    assert [t.id for t in onto.tasks_for_concept("F1")] == ["Type-DM"]


def test_valid_attributes():
    onto = default_ontology()
    a2 = onto.valid_attributes("A2")
    assert a2[LAT] == ("OS", "OD", "OU")
    assert a2[SEV] == ("Mild", "Mild-Moderate", "Moderate", "Moderate-Severe", "Severe")
    f1 = onto.valid_attributes("F1")
    assert LAT not in f1
    assert f1[TMP] == ("Active", "Resolved")
    assert f1[SEV] == ("Type I", "Type II", "Gestational", "Other")
    c3 = onto.valid_attributes("C3")
    assert c3[TMP] == ("Present", "Not Present")
    assert SEV not in c3
    # span validity is universal
    for cid in onto.concepts:
        assert onto.valid_attributes(cid)[VAL] == ("Valid", "Invalid")


@pytest.mark.parametrize(
    "raw,expected",
    [
        (RawLabel("A1", TMP, "Active"), ("Temporality-Retina", "Present")),
        (RawLabel("A1", TMP, "History of"), ("Temporality-Retina", "Not Present")),
        (RawLabel("C1", TMP, "Resolving"), ("Temporality-Retina", "Present")),
        (RawLabel("C1", TMP, "Resolved", negated=True), ("Temporality-Retina", "Present")),
        (RawLabel("C1", TMP, "Active", negated=True), ("Temporality-Retina", "Not Present")),
        (RawLabel("A1", TMP, "History of", negated=True), ("Temporality-Retina", "Not Present")),
        (RawLabel("C3", TMP, "Present"), ("Temporality-Retina", "Present")),
        (RawLabel("C3", TMP, "Not Present"), ("Temporality-Retina", "Not Present")),
        (RawLabel("G1", TMP, "Present"), ("Temporality-DMComplications", "Present")),
        (RawLabel("G3", TMP, "History of"), ("Temporality-DMComplications", "Present")),
        (RawLabel("G3", TMP, "No History of"), ("Temporality-DMComplications", "Not Present")),
        (RawLabel("G4", TMP, "History of", negated=True), ("Temporality-DMComplications", "Not Present")),
        (RawLabel("D1", TMP, "History of"), ("Temporality-Treatment", "History of")),
        (RawLabel("D2", TMP, "Performed Today"), ("Temporality-Treatment", "Performed Today")),
        (RawLabel("D3", TMP, "Recommended"), ("Temporality-Treatment", "Discussed")),
        (RawLabel("E2", TMP, "Considering"), ("Temporality-Treatment", "Discussed")),
        (RawLabel("E1", TMP, "Performed Today", negated=True), ("Temporality-Treatment", "Discussed")),
        (RawLabel("D4", TMP, "History of", negated=True), ("Temporality-Treatment", "Discussed")),
        (RawLabel("B1", LAT, "OU"), ("Laterality-All", "OU")),
        (RawLabel("E2", LAT, "OS"), ("Laterality-All", "OS")),
        (RawLabel("B1", SEV, "CI-DME"), ("Type-ME", "DME")),
        (RawLabel("B1", SEV, "Non-CS-DME"), ("Type-ME", "DME")),
        (RawLabel("B1", SEV, "CME"), ("Type-ME", "Other")),
        (RawLabel("B1", SEV, "AMD"), ("Type-ME", "Other")),
        (RawLabel("C2", SEV, "Combined RRD/TRD"), ("Type-RD", "Combined RRD/TRD")),
        (RawLabel("A4", SEV, "NVD"), ("Type-NV", "NVD and/or NVE")),
        (RawLabel("A4", SEV, "NVD/NVE"), ("Type-NV", "NVD and/or NVE")),
        (RawLabel("A4", SEV, "Iris"), ("Type-NV", "Iris")),
        (RawLabel("F1", SEV, "Gestational"), ("Type-DM", "Other")),
        (RawLabel("F1", SEV, "Type II"), ("Type-DM", "Type II")),
        (RawLabel("E2", SEV, "Trab"), ("Type-NVGSurgery", "Trab")),
        (RawLabel("E1", SEV, "Indication VH"), ("Type-RetinaSurgery", "Indication VH")),
        (RawLabel("A2", SEV, "Mild-Moderate"), ("Severity-NPDR", "Moderate")),
        (RawLabel("A2", SEV, "Moderate-Severe"), ("Severity-NPDR", "Severe")),
        (RawLabel("A2", SEV, "Mild"), ("Severity-NPDR", "Mild")),
        (RawLabel("A3", SEV, "HR-PDR"), ("Severity-PDR", "HR-PDR")),
        (RawLabel("B1", VAL, "Invalid"), ("SpanValidity-ME", "Invalid")),
        (RawLabel("E1", VAL, "Valid"), ("SpanValidity-RetinaSurgery", "Valid")),
    ],
)
def test_consolidation_rules(raw, expected):
    assert default_ontology().consolidate(raw) == expected


@pytest.mark.parametrize(
    "raw",
    [
        RawLabel("F1", TMP, "Active"),       # temporality deliberately unmodeled
        RawLabel("F1", TMP, "Resolved"),
        RawLabel("A1", VAL, "Valid"),        # validity modeled only for B1/E1
        RawLabel("G3", VAL, "Invalid"),
    ],
)
def test_deliberate_exclusions(raw):
    assert default_ontology().consolidate(raw) is None


@pytest.mark.parametrize(
    "raw",
    [
        RawLabel("Z9", TMP, "Active"),                    # unknown concept
        RawLabel("A1", TMP, "Resolved"),                  # not in A1's vocabulary
        RawLabel("A1", SEV, "Mild"),                      # A1 has no severity
        RawLabel("F1", LAT, "OU"),                        # F1 has no laterality
        RawLabel("B1", LAT, "OU", negated=True),          # negated non-temporality
        RawLabel("A2", SEV, "Severe", negated=True),
        RawLabel("C1", TMP, "Resolving", negated=True),   # no negation rule
        RawLabel("C3", TMP, "Present", negated=True),
        RawLabel("C3", TMP, "Not Present", negated=True),
        RawLabel("G3", TMP, "No History of", negated=True),
        RawLabel("B1", VAL, "Maybe"),                     # not a validity class
        RawLabel("A1", AttributeCategory.NEGATION, "yes"),
    ],
)
def test_illegal_labels_raise(raw):
    with pytest.raises(OntologyError):
        default_ontology().consolidate(raw)


def test_totality_over_legal_unnegated_labels():
    # every legal (concept, category, class) either consolidates or is a
    # documented exclusion; none may raise
    onto = default_ontology()
    n_mapped = n_excluded = 0
    for cid in onto.concepts:
        for category, classes in onto.valid_attributes(cid).items():
            for cls in classes:
                result = onto.consolidate(RawLabel(cid, category, cls))
                if result is None:
                    n_excluded += 1
                else:
                    n_mapped += 1
    assert n_mapped > 100
    # exclusions: F1 temporality (2 classes) + span validity for the 17
    # concepts that are not B1/E1 (2 classes each)
    assert n_excluded == 2 + 17 * 2


def test_every_task_class_reachable():
    onto = default_ontology()
    reached: dict[str, set[str]] = {tid: set() for tid in onto.tasks}
    for cid in onto.concepts:
        for category, classes in onto.valid_attributes(cid).items():
            for cls in classes:
                for negated in (False, True):
                    try:
                        result = onto.consolidate(RawLabel(cid, category, cls, negated))
                    except OntologyError:
                        continue
                    if result is not None:
                        reached[result[0]].add(result[1])
    for tid, task in onto.tasks.items():
        assert reached[tid] == set(task.classes), tid


def test_parse_rejects_duplicate_task_claim():
    text = """
[concepts]
X1 | G | X one | X one
[attributes]
X1 | Temporality | Active
[tasks]
Temporality-A | Temporality | A | X1 | Present
Temporality-B | Temporality | B | X1 | Present
[consolidation]
Temporality-A | Active | Present
Temporality-B | Active | Present
"""
    with pytest.raises(OntologyError, match="claimed by both"):
        parse_ontology(text)


def test_parse_rejects_missing_rule():
    text = """
[concepts]
X1 | G | X one | X one
[attributes]
X1 | Temporality | Active, Resolved
[tasks]
Temporality-A | Temporality | A | X1 | Present
[consolidation]
Temporality-A | Active | Present
"""
    with pytest.raises(OntologyError, match="no consolidation rule"):
        parse_ontology(text)


def test_parse_rejects_unreachable_class():
    text = """
[concepts]
X1 | G | X one | X one
[attributes]
X1 | Temporality | Active
[tasks]
Temporality-A | Temporality | A | X1 | Present, Gone
[consolidation]
Temporality-A | Active | Present
Temporality-A | ~Active | Present
"""
    with pytest.raises(OntologyError, match="unreachable"):
        parse_ontology(text)


def test_parse_error_carries_line_number():
    text = "[concepts]\nX1 | G | X one | X one\nX1 | G | X two | X two\n"
    with pytest.raises(OntologyError, match="line 3"):
        parse_ontology(text)
