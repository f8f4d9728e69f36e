"""Tests for annotation workbooks: emission layout, cell semantics (blank =
missing, "--" = non-applicable, Incorrect = invalid span), parse validation
with row numbers, round-trip identity, and two-annotator merging."""

import random
from dataclasses import replace
from pathlib import Path

import pytest

from ocuphen.corpus import load_corpus, render_note
from ocuphen.extraction import default_patterns, extract_encounter
from ocuphen.ontology import AttributeCategory, RawLabel, default_ontology
from ocuphen.synth import SynthConfig, generate_corpus
from ocuphen.workbook import (
    ANNOTATION_FIELDS,
    Disagreement,
    WorkbookError,
    WorkbookRow,
    blank_rows,
    context_excerpt,
    emit_workbook,
    merge_annotations,
    parse_workbook,
    row_labels,
)

FIXTURE_CORPUS = Path(__file__).parent / "data" / "fixture_patient.jsonl"


@pytest.fixture(scope="module")
def onto():
    return default_ontology()


@pytest.fixture(scope="module")
def fixture_doc():
    return load_corpus(str(FIXTURE_CORPUS))[0].encounters[0]


@pytest.fixture(scope="module")
def fixture_rows(fixture_doc, onto):
    spans = extract_encounter(fixture_doc, default_patterns())
    return blank_rows(fixture_doc, spans, onto)


@pytest.fixture(scope="module")
def fixture_text(fixture_doc, fixture_rows, onto):
    return emit_workbook(fixture_doc, fixture_rows, onto)


def csv_cells(workbook_text):
    """Data rows of the CSV block as lists of cells."""
    import csv
    import io

    lines = workbook_text.split("\n")
    start = lines.index("# --- annotations ---") + 1
    stop = len(lines) - 1 - lines[::-1].index("# --- options ---")
    return list(csv.reader(io.StringIO("\n".join(lines[start:stop]))))[1:]


class TestContextExcerpt:
    def test_marks_span_with_brackets(self):
        text = "abcdefghij"
        assert context_excerpt(text, 3, 5, context_chars=2) == "bc<<de>>fg"

    def test_clips_at_note_bounds(self):
        text = "abcdef"
        assert context_excerpt(text, 0, 2, context_chars=40) == "<<ab>>cdef"
        assert context_excerpt(text, 4, 6, context_chars=40) == "abcd<<ef>>"

    def test_window_is_forty_characters_by_default(self):
        text = "x" * 200
        got = context_excerpt(text, 100, 103)
        assert got == "x" * 40 + "<<xxx>>" + "x" * 40

    def test_out_of_bounds_errors(self):
        with pytest.raises(WorkbookError):
            context_excerpt("abc", 1, 5)
        with pytest.raises(WorkbookError):
            context_excerpt("abc", 2, 2)


class TestEmission:
    def test_fixture_has_thirteen_sorted_rows(self, fixture_text):
        cells = csv_cells(fixture_text)
        assert len(cells) == 13
        keys = [(int(row[0]), row[2]) for row in cells]
        assert keys == sorted(keys)

    def test_pdr_row_offsets_and_context(self, fixture_text):
        (pdr,) = [row for row in csv_cells(fixture_text) if row[2] == "PDR"]
        assert pdr[0] == "267" and pdr[1] == "270"
        assert pdr[3] == "PDR"
        assert "no progression to <<PDR>>." in pdr[4]

    def test_dm_rows_mark_laterality_not_applicable(self, fixture_text):
        dm_rows = [row for row in csv_cells(fixture_text) if row[2] == "DM"]
        assert len(dm_rows) == 3
        for row in dm_rows:
            assert row[5] == "--"  # Laterality column
            assert row[6] == "" and row[7] == ""  # applicable cells blank

    def test_heart_attack_trap_span_present(self, fixture_text):
        (mi,) = [row for row in csv_cells(fixture_text) if row[2] == "Heart Attack"]
        assert mi[3] == "MI"
        assert mi[5] == "--" and mi[6] == "--"  # no laterality or severity

    def test_header_block_carries_document_identity(self, fixture_doc, fixture_text):
        lines = fixture_text.split("\n")
        assert lines[0] == "# workbook: span-annotation-workbook-v1"
        assert f"# document: {fixture_doc.doc_id}" in lines
        assert "# patient: P0007" in lines
        assert "# date: 2016-03-14" in lines

    def test_note_is_reproduced_verbatim(self, fixture_doc, fixture_text):
        lines = fixture_text.split("\n")
        note_lines = [
            line[3:]
            for line in lines[: lines.index("# --- annotations ---")]
            if line.startswith("# |")
        ]
        assert "\n".join(note_lines) == render_note(fixture_doc)

    def test_options_sidecar_lists_legal_classes_per_row(self, fixture_text):
        cells = csv_cells(fixture_text)
        pdr_number = next(
            i for i, row in enumerate(cells, start=1) if row[2] == "PDR"
        )
        assert f"#options row={pdr_number} Laterality=OS|OD|OU" in fixture_text
        assert (
            f"#options row={pdr_number} Severity/Type=NHR-PDR|HR-PDR" in fixture_text
        )
        assert f"#options row={pdr_number} Negated=yes|no" in fixture_text
        dm_number = next(i for i, row in enumerate(cells, start=1) if row[2] == "DM")
        assert f"#options row={dm_number} Laterality=" not in fixture_text

    def test_empty_span_list_gives_note_only_workbook(self, fixture_doc, onto):
        text = emit_workbook(fixture_doc, [], onto)
        workbook = parse_workbook(text, onto)
        assert workbook.rows == ()
        assert workbook.note_text == render_note(fixture_doc)

    def test_annotated_cells_are_written(self, fixture_doc, fixture_rows, onto):
        rows = [
            replace(row, laterality="OU", temporality="Active")
            if row.concept == "A3"
            else row
            for row in fixture_rows
        ]
        text = emit_workbook(fixture_doc, rows, onto)
        (pdr,) = [row for row in csv_cells(text) if row[2] == "PDR"]
        assert pdr[5] == "OU" and pdr[7] == "Active"

    def test_rows_are_sorted_even_if_input_is_not(self, fixture_doc, fixture_rows, onto):
        shuffled = list(fixture_rows)
        random.Random(0).shuffle(shuffled)
        assert emit_workbook(fixture_doc, shuffled, onto) == emit_workbook(
            fixture_doc, fixture_rows, onto
        )

    def test_out_of_range_span_errors(self, fixture_doc, onto):
        bad = WorkbookRow(100000, 100004, "A3", "PDR", "")
        with pytest.raises(WorkbookError, match="outside note"):
            emit_workbook(fixture_doc, [bad], onto)

    def test_text_mismatch_errors(self, fixture_doc, onto):
        bad = WorkbookRow(267, 270, "A3", "NOPE", "")
        with pytest.raises(WorkbookError, match="note has"):
            emit_workbook(fixture_doc, [bad], onto)

    def test_value_in_non_applicable_column_errors(self, fixture_doc, onto):
        bad = WorkbookRow(40, 48, "F1", "Diabetic", "", laterality="OU")
        with pytest.raises(WorkbookError, match="does not apply"):
            emit_workbook(fixture_doc, [bad], onto)

    def test_illegal_class_errors(self, fixture_doc, onto):
        bad = WorkbookRow(267, 270, "A3", "PDR", "", laterality="Left")
        with pytest.raises(WorkbookError, match="not a legal Laterality"):
            emit_workbook(fixture_doc, [bad], onto)

    def test_duplicate_rows_error(self, fixture_doc, fixture_rows, onto):
        with pytest.raises(WorkbookError, match="duplicate span"):
            emit_workbook(fixture_doc, list(fixture_rows) + [fixture_rows[0]], onto)


class TestParsing:
    def test_round_trip_identity_on_blank_fixture(
        self, fixture_rows, fixture_text, onto
    ):
        workbook = parse_workbook(fixture_text, onto)
        assert workbook.rows == tuple(fixture_rows)

    def test_round_trip_identity_with_annotations(
        self, fixture_doc, fixture_rows, onto
    ):
        annotated = []
        for row in fixture_rows:
            if row.concept == "A3":
                row = replace(
                    row,
                    laterality="OU",
                    severity_type="HR-PDR",
                    temporality="Active",
                    negated=True,
                )
            elif row.concept == "G3":
                row = replace(row, incorrect=True)
            elif row.concept == "F1":
                row = replace(row, severity_type="Type II", negated=False)
            annotated.append(row)
        annotated = sorted(annotated, key=lambda r: (r.start, r.concept, r.end))
        text = emit_workbook(fixture_doc, annotated, onto)
        parsed = parse_workbook(text, onto)
        assert sorted(parsed.rows, key=lambda r: (r.start, r.concept, r.end)) == annotated

    def test_blank_cells_parse_as_missing(self, fixture_text, onto):
        workbook = parse_workbook(fixture_text, onto)
        pdr = next(row for row in workbook.rows if row.concept == "A3")
        assert pdr.laterality is None
        assert pdr.severity_type is None
        assert pdr.temporality is None
        assert pdr.negated is None
        assert pdr.incorrect is None

    def test_non_applicable_cells_parse_as_missing(self, fixture_text, onto):
        workbook = parse_workbook(fixture_text, onto)
        dm = next(row for row in workbook.rows if row.concept == "F1")
        assert dm.laterality is None

    def test_document_identity_round_trips(self, fixture_doc, fixture_text, onto):
        workbook = parse_workbook(fixture_text, onto)
        assert workbook.doc_id == fixture_doc.doc_id
        assert workbook.patient_id == "P0007"
        assert workbook.encounter_id == "E01"
        assert workbook.date == "2016-03-14"
        assert workbook.note_text == render_note(fixture_doc)

    def test_yes_no_flags_parse(self, fixture_doc, fixture_rows, onto):
        rows = [
            replace(row, incorrect=True) if row.concept == "G3" else row
            for row in fixture_rows
        ]
        workbook = parse_workbook(emit_workbook(fixture_doc, rows, onto), onto)
        mi = next(row for row in workbook.rows if row.concept == "G3")
        assert mi.incorrect is True

    def test_illegal_class_reports_row_number(self, fixture_text, onto):
        cells = csv_cells(fixture_text)
        pdr_number = next(
            i for i, row in enumerate(cells, start=1) if row[2] == "PDR"
        )
        bad = fixture_text.replace(
            "<<PDR>>.\n\n[ASSESSMENT & PLAN]\nRight eye has fov\",,,,",
            "<<PDR>>.\n\n[ASSESSMENT & PLAN]\nRight eye has fov\",Left,,,",
        )
        assert bad != fixture_text
        with pytest.raises(WorkbookError, match=f"row {pdr_number}.*Left"):
            parse_workbook(bad, onto)

    def test_misplaced_dashes_error(self, fixture_text, onto):
        bad = fixture_text.replace(
            "<<PDR>>.\n\n[ASSESSMENT & PLAN]\nRight eye has fov\",,,,",
            "<<PDR>>.\n\n[ASSESSMENT & PLAN]\nRight eye has fov\",--,,,",
        )
        assert bad != fixture_text
        with pytest.raises(WorkbookError, match="leave blank or pick"):
            parse_workbook(bad, onto)

    def test_value_in_non_applicable_column_errors(self, fixture_text, onto):
        bad = fixture_text.replace(
            "vacation to <<MI>>.\n\",--,--,,,",
            "vacation to <<MI>>.\n\",OU,--,,,",
        )
        assert bad != fixture_text
        with pytest.raises(WorkbookError, match="does not apply"):
            parse_workbook(bad, onto)

    def test_bad_flag_token_errors(self, fixture_text, onto):
        bad = fixture_text.replace(
            "vacation to <<MI>>.\n\",--,--,,,",
            "vacation to <<MI>>.\n\",--,--,,maybe,",
        )
        assert bad != fixture_text
        with pytest.raises(WorkbookError, match="'yes', or 'no'"):
            parse_workbook(bad, onto)

    def test_unknown_concept_errors(self, fixture_text, onto):
        bad = fixture_text.replace("267,270,PDR,PDR,", "267,270,XYZ,PDR,")
        with pytest.raises(WorkbookError, match="unknown concept 'XYZ'"):
            parse_workbook(bad, onto)

    def test_non_integer_offsets_error(self, fixture_text, onto):
        bad = fixture_text.replace("267,270,PDR,PDR,", "abc,270,PDR,PDR,")
        with pytest.raises(WorkbookError, match="offsets must be integers"):
            parse_workbook(bad, onto)

    def test_offset_text_mismatch_errors(self, fixture_text, onto):
        bad = fixture_text.replace("267,270,PDR,PDR,", "266,269,PDR,PDR,")
        with pytest.raises(WorkbookError, match="note has"):
            parse_workbook(bad, onto)

    def test_wrong_cell_count_errors(self, fixture_text, onto):
        bad = fixture_text.replace(
            "vacation to <<MI>>.\n\",--,--,,,",
            "vacation to <<MI>>.\n\",--,--,,",
        )
        with pytest.raises(WorkbookError, match="expected 10 cells"):
            parse_workbook(bad, onto)

    def test_missing_sentinels_error(self, fixture_text, onto):
        with pytest.raises(WorkbookError, match="annotations sentinel"):
            parse_workbook(
                fixture_text.replace("# --- annotations ---", "# oops"), onto
            )
        with pytest.raises(WorkbookError, match="options sentinel"):
            parse_workbook(fixture_text.replace("# --- options ---", "# oops"), onto)

    def test_bad_magic_errors(self, fixture_text, onto):
        bad = fixture_text.replace("span-annotation-workbook-v1", "something-else")
        with pytest.raises(WorkbookError, match="magic"):
            parse_workbook(bad, onto)

    def test_wrong_header_row_errors(self, fixture_text, onto):
        bad = fixture_text.replace(
            "Start,End,Concept,Text Span,Context,", "Begin,End,Concept,Text Span,Context,"
        )
        with pytest.raises(WorkbookError, match="header row"):
            parse_workbook(bad, onto)

    def test_context_must_mark_span_exactly_once(self, fixture_text, onto):
        bad = fixture_text.replace("<<PDR>>", "PDR")
        with pytest.raises(WorkbookError, match="exactly once"):
            parse_workbook(bad, onto)


class TestRowLabels:
    def test_incorrect_row_is_invalid_with_no_labels(self, onto):
        row = WorkbookRow(0, 2, "G3", "MI", "<<MI>>", incorrect=True, temporality="History of")
        validity, labels = row_labels(row, onto)
        assert validity is False
        assert labels == []

    def test_filled_cells_become_raw_labels(self, onto):
        row = WorkbookRow(
            0,
            3,
            "A3",
            "PDR",
            "<<PDR>>",
            laterality="OU",
            severity_type="HR-PDR",
            negated=True,
        )
        validity, labels = row_labels(row, onto)
        assert validity is True
        # Negation scopes to the temporal assertion, never to laterality or
        # severity classes, so these labels stay unnegated.
        assert labels == [
            RawLabel("A3", AttributeCategory.LATERALITY, "OU", negated=False),
            RawLabel("A3", AttributeCategory.SEVERITY_TYPE, "HR-PDR", negated=False),
        ]

    def test_negated_flag_attaches_to_temporality(self, onto):
        row = WorkbookRow(
            0, 3, "A3", "PDR", "<<PDR>>", temporality="Active", negated=True
        )
        _, labels = row_labels(row, onto)
        assert labels == [
            RawLabel("A3", AttributeCategory.TEMPORALITY, "Active", negated=True)
        ]

    def test_blank_cells_contribute_nothing(self, onto):
        row = WorkbookRow(0, 3, "A3", "PDR", "<<PDR>>", temporality="Active")
        validity, labels = row_labels(row, onto)
        assert validity is True
        assert labels == [
            RawLabel("A3", AttributeCategory.TEMPORALITY, "Active", negated=False)
        ]

    def test_unflagged_row_is_valid(self, onto):
        validity, labels = row_labels(
            WorkbookRow(0, 3, "A3", "PDR", "<<PDR>>"), onto
        )
        assert validity is True
        assert labels == []


class TestSyntheticRoundTrip:
    def test_parse_emit_identity_over_synthetic_encounters(self, onto):
        patients, truth = generate_corpus(SynthConfig(n_patients=20, seed=5))
        checked = 0
        for patient in patients:
            for doc in patient.encounters:
                rows = []
                seen = set()
                for entry in truth.spans_for(doc.doc_id):
                    key = (entry.start, entry.end, entry.concept)
                    if key in seen:
                        continue
                    seen.add(key)
                    rows.append(
                        WorkbookRow(
                            start=entry.start,
                            end=entry.end,
                            concept=entry.concept,
                            text_span=entry.surface,
                            context=context_excerpt(
                                render_note(doc), entry.start, entry.end
                            ),
                            laterality=entry.laterality,
                            severity_type=entry.severity_type,
                            temporality=entry.temporality,
                            negated=entry.negated,
                            incorrect=None if entry.valid else True,
                        )
                    )
                from ocuphen.workbook import _sorted_rows

                rows = _sorted_rows(rows, onto)
                text = emit_workbook(doc, rows, onto)
                parsed = parse_workbook(text, onto)
                assert parsed.rows == tuple(rows)
                assert parsed.note_text == render_note(doc)
                checked += 1
        assert checked >= 20


def make_row(start=0, end=3, concept="A3", **kwargs):
    return WorkbookRow(start, end, concept, "PDR", "<<PDR>>", **kwargs)


class TestMerge:
    def test_identical_inputs_pass_through(self):
        rows = [make_row(temporality="Active"), make_row(start=10, end=13)]
        resolved, disagreements = merge_annotations(rows, list(rows))
        assert disagreements == []
        assert sorted(resolved, key=lambda r: r.start) == sorted(
            rows, key=lambda r: r.start
        )

    def test_one_differing_cell_is_listed_and_blanked(self):
        a = [make_row(laterality="OU", temporality="Active")]
        b = [make_row(laterality="OD", temporality="Active")]
        resolved, disagreements = merge_annotations(a, b)
        assert disagreements == [
            Disagreement(0, 3, "A3", "laterality", "OU", "OD")
        ]
        assert resolved[0].laterality is None
        assert resolved[0].temporality == "Active"

    def test_resolution_overrides_disagreement(self):
        a = [make_row(laterality="OU")]
        b = [make_row(laterality="OD")]
        resolution = [make_row(laterality="OS", temporality="Active")]
        resolved, disagreements = merge_annotations(a, b, resolution)
        assert len(disagreements) == 1
        assert resolved[0].laterality == "OS"
        assert resolved[0].temporality == "Active"

    def test_multiple_fields_yield_multiple_disagreements(self):
        a = [make_row(laterality="OU", negated=True)]
        b = [make_row(laterality="OD", negated=False)]
        _, disagreements = merge_annotations(a, b)
        assert {d.field for d in disagreements} == {"laterality", "negated"}

    def test_differing_span_sets_error(self):
        with pytest.raises(WorkbookError, match="different spans"):
            merge_annotations([make_row()], [make_row(start=5, end=8)])

    def test_duplicate_spans_error(self):
        with pytest.raises(WorkbookError, match="duplicate spans"):
            merge_annotations([make_row(), make_row()], [make_row(), make_row()])

    def test_text_span_mismatch_errors(self):
        a = [make_row()]
        b = [WorkbookRow(0, 3, "A3", "XYZ", "<<XYZ>>")]
        with pytest.raises(WorkbookError, match="different text"):
            merge_annotations(a, b)

    def test_resolution_for_unknown_span_errors(self):
        with pytest.raises(WorkbookError, match="unknown spans"):
            merge_annotations(
                [make_row()], [make_row()], [make_row(start=99, end=102)]
            )

    def test_annotation_fields_constant_covers_row_fields(self):
        row_fields = set(WorkbookRow.__dataclass_fields__)
        assert set(ANNOTATION_FIELDS) <= row_fields
        assert set(ANNOTATION_FIELDS) == row_fields - {
            "start",
            "end",
            "concept",
            "text_span",
            "context",
        }
