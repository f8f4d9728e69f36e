"""Annotation workbooks: a diff-able delimited format for span labeling.

A workbook is one encounter's rendered note plus one CSV row per candidate
span.  Each row shows the span's offsets, concept, surface text, and a
``<<span>>``-marked context excerpt, followed by attribute columns
(Laterality, Severity/Type, Temporality), a Negated flag, and an Incorrect
flag.  Columns that do not apply to the row's concept are pre-filled ``--``;
applicable columns start blank and a blank cell round-trips as *missing*
(no training instance).  Marking a row Incorrect invalidates the span.  A
trailing sidecar lists the legal options per row so the file is
self-describing for annotators.

The format is plain UTF-8 text: a ``#``-prefixed metadata block (document id,
patient, date, and the full note), a sentinel line, an RFC-4180 CSV block,
a second sentinel, and the options sidecar.  ``parse_workbook(emit_workbook(
doc, rows, ontology), ontology)`` reproduces the rows exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .corpus import NoteDocument, render_note
from .extraction import ConceptSpan
from .ontology import AttributeCategory, Ontology, OntologyError, RawLabel

WORKBOOK_MAGIC = "span-annotation-workbook-v1"
ANNOTATIONS_SENTINEL = "# --- annotations ---"
OPTIONS_SENTINEL = "# --- options ---"
NOT_APPLICABLE = "--"

WORKBOOK_COLUMNS = (
    "Start",
    "End",
    "Concept",
    "Text Span",
    "Context",
    "Laterality",
    "Severity/Type",
    "Temporality",
    "Negated",
    "Incorrect",
)

# (column header, attribute category, WorkbookRow field) for the three
# concept-conditioned attribute columns, in column order.
_ATTRIBUTE_COLUMNS = (
    ("Laterality", AttributeCategory.LATERALITY, "laterality"),
    ("Severity/Type", AttributeCategory.SEVERITY_TYPE, "severity_type"),
    ("Temporality", AttributeCategory.TEMPORALITY, "temporality"),
)

_FLAG_COLUMNS = (("Negated", "negated"), ("Incorrect", "incorrect"))

#: Fields compared by ``merge_annotations``.
ANNOTATION_FIELDS = (
    "laterality",
    "severity_type",
    "temporality",
    "negated",
    "incorrect",
)


class WorkbookError(ValueError):
    """Malformed workbook content or annotation values."""


@dataclass(frozen=True)
class WorkbookRow:
    """One candidate span with its (possibly partial) annotation.

    ``concept`` is the concept id; the CSV shows the display name.  ``None``
    in an attribute field means the cell is blank (missing) or, for a
    category the concept does not support, non-applicable.
    """

    start: int
    end: int
    concept: str
    text_span: str
    context: str
    laterality: str | None = None
    severity_type: str | None = None
    temporality: str | None = None
    negated: bool | None = None
    incorrect: bool | None = None

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.concept)


@dataclass(frozen=True)
class Workbook:
    """A parsed workbook: document identity, note text, and span rows."""

    doc_id: str
    patient_id: str
    encounter_id: str
    date: str
    note_text: str
    rows: tuple[WorkbookRow, ...]


@dataclass(frozen=True)
class Disagreement:
    """One field on which two annotators differ for the same span."""

    start: int
    end: int
    concept: str
    field: str
    value_a: object
    value_b: object


def context_excerpt(
    text: str, start: int, end: int, context_chars: int = 40
) -> str:
    """The span in ``<<`` ``>>`` brackets with up to ``context_chars`` of
    surrounding text on each side, clipped at the note bounds."""
    if not 0 <= start < end <= len(text):
        raise WorkbookError(f"span [{start}, {end}) outside note of length {len(text)}")
    left = text[max(0, start - context_chars) : start]
    right = text[end : end + context_chars]
    return f"{left}<<{text[start:end]}>>{right}"


def blank_rows(
    doc: NoteDocument,
    spans: Iterable[ConceptSpan],
    ontology: Ontology,
    context_chars: int = 40,
) -> list[WorkbookRow]:
    """Unannotated rows for extracted spans, sorted for emission."""
    text = render_note(doc)
    rows = []
    for span in spans:
        if span.concept not in ontology.concepts:
            raise WorkbookError(f"unknown concept id {span.concept!r}")
        if not 0 <= span.start < span.end <= len(text):
            raise WorkbookError(
                f"span [{span.start}, {span.end}) outside note of length {len(text)}"
            )
        if text[span.start : span.end] != span.surface:
            raise WorkbookError(
                f"span text mismatch at [{span.start}, {span.end}): "
                f"note has {text[span.start:span.end]!r}, span says {span.surface!r}"
            )
        rows.append(
            WorkbookRow(
                start=span.start,
                end=span.end,
                concept=span.concept,
                text_span=span.surface,
                context=context_excerpt(text, span.start, span.end, context_chars),
            )
        )
    return _sorted_rows(rows, ontology)


def _sorted_rows(rows: Iterable[WorkbookRow], ontology: Ontology) -> list[WorkbookRow]:
    return sorted(
        rows, key=lambda r: (r.start, ontology.concepts[r.concept].name, r.end)
    )


def _flag_cell(value: bool | None) -> str:
    if value is None:
        return ""
    return "yes" if value else "no"


def emit_workbook(
    doc: NoteDocument,
    rows: Sequence[WorkbookRow],
    ontology: Ontology,
    context_chars: int = 40,
) -> str:
    """Serialize one encounter's annotation workbook.

    Rows are validated against the note text and the ontology's legal
    attribute classes, sorted by (start, concept name), and written with
    freshly computed context excerpts, so the emitted file is canonical
    regardless of input row order or stale context strings.
    """
    text = render_note(doc)
    rows = _sorted_rows(rows, ontology)
    seen: set[tuple[int, int, str]] = set()
    lines = [
        f"# workbook: {WORKBOOK_MAGIC}",
        f"# document: {doc.doc_id}",
        f"# patient: {doc.patient_id}",
        f"# encounter: {doc.encounter_id}",
        f"# date: {doc.date}",
        "# note:",
    ]
    lines.extend(f"# |{line}" for line in text.split("\n"))
    lines.append(ANNOTATIONS_SENTINEL)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(WORKBOOK_COLUMNS)
    option_lines: list[str] = []
    for number, row in enumerate(rows, start=1):
        if row.concept not in ontology.concepts:
            raise WorkbookError(f"row {number}: unknown concept id {row.concept!r}")
        if not 0 <= row.start < row.end <= len(text):
            raise WorkbookError(
                f"row {number}: span [{row.start}, {row.end}) outside note of "
                f"length {len(text)}"
            )
        surface = text[row.start : row.end]
        if surface != row.text_span:
            raise WorkbookError(
                f"row {number}: note has {surface!r} at [{row.start}, {row.end}), "
                f"row says {row.text_span!r}"
            )
        if "<<" in surface or ">>" in surface:
            raise WorkbookError(
                f"row {number}: span text may not contain context markers"
            )
        if row.key in seen:
            raise WorkbookError(
                f"row {number}: duplicate span [{row.start}, {row.end}) "
                f"for concept {row.concept!r}"
            )
        seen.add(row.key)
        legal = ontology.valid_attributes(row.concept)
        concept_name = ontology.concepts[row.concept].name
        cells = [
            str(row.start),
            str(row.end),
            concept_name,
            row.text_span,
            context_excerpt(text, row.start, row.end, context_chars),
        ]
        for column, category, field_name in _ATTRIBUTE_COLUMNS:
            value = getattr(row, field_name)
            classes = legal.get(category)
            if classes is None:
                if value is not None:
                    raise WorkbookError(
                        f"row {number}: {column} does not apply to "
                        f"{concept_name} but has value {value!r}"
                    )
                cells.append(NOT_APPLICABLE)
            else:
                if value is not None and value not in classes:
                    raise WorkbookError(
                        f"row {number}: {value!r} is not a legal {column} class "
                        f"for {concept_name}; options: {', '.join(classes)}"
                    )
                cells.append("" if value is None else value)
                option_lines.append(
                    f"#options row={number} {column}={'|'.join(classes)}"
                )
        for column, field_name in _FLAG_COLUMNS:
            cells.append(_flag_cell(getattr(row, field_name)))
            option_lines.append(f"#options row={number} {column}=yes|no")
        writer.writerow(cells)

    lines.append(buffer.getvalue().rstrip("\n"))
    lines.append(OPTIONS_SENTINEL)
    lines.extend(option_lines)
    return "\n".join(lines) + "\n"


def _parse_meta(lines: Sequence[str]) -> tuple[dict[str, str], str]:
    meta: dict[str, str] = {}
    note_lines: list[str] = []
    in_note = False
    for line in lines:
        if line == "# note:":
            in_note = True
        elif in_note:
            if not line.startswith("# |"):
                raise WorkbookError(f"malformed note line {line!r}")
            note_lines.append(line[3:])
        elif line.startswith("# ") and ": " in line:
            key, _, value = line[2:].partition(": ")
            meta[key] = value
        else:
            raise WorkbookError(f"malformed metadata line {line!r}")
    if meta.get("workbook") != WORKBOOK_MAGIC:
        raise WorkbookError("not an annotation workbook (bad or missing magic line)")
    for key in ("document", "patient", "encounter", "date"):
        if key not in meta:
            raise WorkbookError(f"missing metadata field {key!r}")
    if not in_note:
        raise WorkbookError("missing note block")
    return meta, "\n".join(note_lines)


def _parse_flag(cell: str, column: str, number: int) -> bool | None:
    value = cell.strip().lower()
    if value == "":
        return None
    if value == "yes":
        return True
    if value == "no":
        return False
    raise WorkbookError(
        f"row {number}: {column} must be blank, 'yes', or 'no', not {cell!r}"
    )


def parse_workbook(text: str, ontology: Ontology) -> Workbook:
    """Parse a workbook, validating every cell against the ontology.

    Blank attribute cells become ``None`` (missing data); ``--`` is legal
    only in columns that do not apply to the row's concept.  Errors carry
    the 1-based data-row number.
    """
    lines = text.split("\n")
    try:
        annotations_at = lines.index(ANNOTATIONS_SENTINEL)
    except ValueError:
        raise WorkbookError("missing annotations sentinel") from None
    options_at = len(lines) - 1 - lines[::-1].index(OPTIONS_SENTINEL) if (
        OPTIONS_SENTINEL in lines
    ) else None
    if options_at is None or options_at < annotations_at:
        raise WorkbookError("missing options sentinel")
    meta, note_text = _parse_meta(lines[:annotations_at])

    csv_block = "\n".join(lines[annotations_at + 1 : options_at])
    records = list(csv.reader(io.StringIO(csv_block)))
    if not records or tuple(records[0]) != WORKBOOK_COLUMNS:
        raise WorkbookError("missing or wrong annotation header row")

    rows: list[WorkbookRow] = []
    seen: set[tuple[int, int, str]] = set()
    for number, record in enumerate(records[1:], start=1):
        if len(record) != len(WORKBOOK_COLUMNS):
            raise WorkbookError(
                f"row {number}: expected {len(WORKBOOK_COLUMNS)} cells, "
                f"got {len(record)}"
            )
        (start_cell, end_cell, concept_name, text_span, context, *rest) = record
        try:
            start, end = int(start_cell), int(end_cell)
        except ValueError:
            raise WorkbookError(
                f"row {number}: offsets must be integers, got "
                f"{start_cell!r}, {end_cell!r}"
            ) from None
        if not 0 <= start < end <= len(note_text):
            raise WorkbookError(
                f"row {number}: span [{start}, {end}) outside note of "
                f"length {len(note_text)}"
            )
        if note_text[start:end] != text_span:
            raise WorkbookError(
                f"row {number}: note has {note_text[start:end]!r} at "
                f"[{start}, {end}), row says {text_span!r}"
            )
        try:
            concept = ontology.concept_by_name(concept_name).id
        except OntologyError:
            raise WorkbookError(
                f"row {number}: unknown concept {concept_name!r}"
            ) from None
        if context.count("<<") != 1 or context.count(">>") != 1 or (
            f"<<{text_span}>>" not in context
        ):
            raise WorkbookError(
                f"row {number}: context must mark the span exactly once "
                f"with <<...>>"
            )
        legal = ontology.valid_attributes(concept)
        values: dict[str, str | bool | None] = {}
        for (column, category, field_name), cell in zip(_ATTRIBUTE_COLUMNS, rest[:3]):
            cell = cell.strip()
            classes = legal.get(category)
            if classes is None:
                if cell != NOT_APPLICABLE:
                    raise WorkbookError(
                        f"row {number}: {column} does not apply to "
                        f"{concept_name} and must be '--', got {cell!r}"
                    )
                values[field_name] = None
            elif cell == "":
                values[field_name] = None
            elif cell == NOT_APPLICABLE:
                raise WorkbookError(
                    f"row {number}: {column} applies to {concept_name}; "
                    f"leave blank or pick one of: {', '.join(classes)}"
                )
            elif cell not in classes:
                raise WorkbookError(
                    f"row {number}: {cell!r} is not a legal {column} class "
                    f"for {concept_name}; options: {', '.join(classes)}"
                )
            else:
                values[field_name] = cell
        for (column, field_name), cell in zip(_FLAG_COLUMNS, rest[3:]):
            values[field_name] = _parse_flag(cell, column, number)
        row = WorkbookRow(
            start=start,
            end=end,
            concept=concept,
            text_span=text_span,
            context=context,
            **values,
        )
        if row.key in seen:
            raise WorkbookError(
                f"row {number}: duplicate span [{start}, {end}) for concept "
                f"{concept_name!r}"
            )
        seen.add(row.key)
        rows.append(row)

    return Workbook(
        doc_id=meta["document"],
        patient_id=meta["patient"],
        encounter_id=meta["encounter"],
        date=meta["date"],
        note_text=note_text,
        rows=tuple(rows),
    )


def row_labels(row: WorkbookRow, ontology: Ontology) -> tuple[bool, list[RawLabel]]:
    """Span validity plus the raw attribute labels one row contributes.

    A row flagged Incorrect is invalid and contributes no attribute labels;
    blank cells contribute nothing (missing data).  The Negated flag scopes
    to the temporal assertion ("no history of ...", "no progression to ..."),
    so it is attached to the Temporality label only.
    """
    if row.incorrect:
        return False, []
    labels = []
    for _column, category, field_name in _ATTRIBUTE_COLUMNS:
        value = getattr(row, field_name)
        if value is not None:
            negated = (
                bool(row.negated)
                if category is AttributeCategory.TEMPORALITY
                else False
            )
            labels.append(
                RawLabel(
                    concept=row.concept,
                    category=category,
                    value=value,
                    negated=negated,
                )
            )
    return True, labels


def merge_annotations(
    a: Sequence[WorkbookRow],
    b: Sequence[WorkbookRow],
    resolution: Sequence[WorkbookRow] | None = None,
) -> tuple[list[WorkbookRow], list[Disagreement]]:
    """Reconcile two annotators' rows over identical span sets.

    Agreements pass through.  Every differing field is listed as a
    Disagreement; a resolution row for that span (matched by start/end/
    concept) supplies the final annotation, otherwise the contested fields
    become missing.  Raises when the two span sets differ.
    """
    by_key_a = {row.key: row for row in a}
    by_key_b = {row.key: row for row in b}
    if len(by_key_a) != len(a) or len(by_key_b) != len(b):
        raise WorkbookError("duplicate spans within one annotator's rows")
    if set(by_key_a) != set(by_key_b):
        only_a = sorted(set(by_key_a) - set(by_key_b))
        only_b = sorted(set(by_key_b) - set(by_key_a))
        raise WorkbookError(
            f"annotators cover different spans (only in a: {only_a}; "
            f"only in b: {only_b})"
        )
    by_key_resolution: Mapping[tuple[int, int, str], WorkbookRow] = {}
    if resolution is not None:
        by_key_resolution = {row.key: row for row in resolution}
        unknown = sorted(set(by_key_resolution) - set(by_key_a))
        if unknown:
            raise WorkbookError(f"resolution rows for unknown spans: {unknown}")

    resolved: list[WorkbookRow] = []
    disagreements: list[Disagreement] = []
    for key in sorted(by_key_a):
        row_a, row_b = by_key_a[key], by_key_b[key]
        if row_a.text_span != row_b.text_span:
            raise WorkbookError(
                f"span [{key[0]}, {key[1]}) has different text in the two "
                f"inputs: {row_a.text_span!r} vs {row_b.text_span!r}"
            )
        differing = [
            field
            for field in ANNOTATION_FIELDS
            if getattr(row_a, field) != getattr(row_b, field)
        ]
        for field in differing:
            disagreements.append(
                Disagreement(
                    start=key[0],
                    end=key[1],
                    concept=key[2],
                    field=field,
                    value_a=getattr(row_a, field),
                    value_b=getattr(row_b, field),
                )
            )
        if key in by_key_resolution:
            final = by_key_resolution[key]
            resolved.append(
                replace(
                    row_a,
                    **{field: getattr(final, field) for field in ANNOTATION_FIELDS},
                )
            )
        elif differing:
            resolved.append(replace(row_a, **{field: None for field in differing}))
        else:
            resolved.append(row_a)
    return resolved, disagreements
