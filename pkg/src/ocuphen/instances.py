"""Pipeline glue: annotated spans -> per-task labeled instances -> classifier
examples.

A labeled instance is one (patient, document, span, task, class) record
produced by consolidating a span's raw annotation.  Every annotated span also
yields a span-validity instance when its concept has a span-validity task;
spans flagged Incorrect yield only that (Invalid) instance and contribute no
attribute instances.  Labeled instances are turned into classifier examples
by tokenizing the note, centering a token window on the span, and encoding it
with a vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .classifier import SpanExample, TaskInstance
from .corpus import NoteDocument, PatientRecord, render_note
from .encoder import Vocabulary
from .ontology import AttributeCategory, Ontology, RawLabel
from .synth import GroundTruthSpan, SynthGroundTruth
from .windowing import DEFAULT_MAX_LEN, center_window, tokenize
from .workbook import Workbook, WorkbookRow, context_excerpt, row_labels


class InstanceError(ValueError):
    """Inconsistent annotation, document, or vocabulary inputs."""


@dataclass(frozen=True)
class LabeledInstance:
    """One consolidated training label anchored to a note span."""

    patient_id: str
    doc_id: str
    start: int
    end: int
    concept: str
    task: str
    gold_class: str
    span_text: str


def instances_from_rows(
    patient_id: str,
    doc_id: str,
    rows: Iterable[WorkbookRow],
    ontology: Ontology,
) -> list[LabeledInstance]:
    """Consolidate annotated workbook rows into labeled instances.

    Raw labels whose (concept, category) pair has no covering task are
    dropped silently, mirroring the consolidation rules.
    """
    out: list[LabeledInstance] = []
    for row in rows:
        validity, labels = row_labels(row, ontology)
        validity_raw = RawLabel(
            concept=row.concept,
            category=AttributeCategory.SPAN_VALIDITY,
            value="Valid" if validity else "Invalid",
        )
        for raw in [validity_raw, *labels]:
            hit = ontology.consolidate(raw)
            if hit is None:
                continue
            task, gold_class = hit
            out.append(
                LabeledInstance(
                    patient_id=patient_id,
                    doc_id=doc_id,
                    start=row.start,
                    end=row.end,
                    concept=row.concept,
                    task=task,
                    gold_class=gold_class,
                    span_text=row.text_span,
                )
            )
    return out


def instances_from_workbook(
    workbook: Workbook, ontology: Ontology
) -> list[LabeledInstance]:
    return instances_from_rows(
        workbook.patient_id, workbook.doc_id, workbook.rows, ontology
    )


def ground_truth_rows(
    doc: NoteDocument,
    entries: Sequence[GroundTruthSpan],
    ontology: Ontology,
    context_chars: int = 40,
) -> list[WorkbookRow]:
    """Workbook rows pre-filled from a synthetic ground-truth ledger,
    deduplicated by span (a code and a phrase can share offsets only via
    distinct spans, but one span may be recorded once per source)."""
    text = render_note(doc)
    rows: dict[tuple[int, int, str], WorkbookRow] = {}
    for entry in entries:
        key = (entry.start, entry.end, entry.concept)
        if key in rows:
            continue
        rows[key] = WorkbookRow(
            start=entry.start,
            end=entry.end,
            concept=entry.concept,
            text_span=entry.surface,
            context=context_excerpt(text, entry.start, entry.end, context_chars),
            laterality=entry.laterality,
            severity_type=entry.severity_type,
            temporality=entry.temporality,
            negated=entry.negated,
            incorrect=None if entry.valid else True,
        )
    ordered = sorted(
        rows.values(), key=lambda r: (r.start, ontology.concepts[r.concept].name, r.end)
    )
    return ordered


def instances_from_ground_truth(
    patients: Sequence[PatientRecord],
    truth: SynthGroundTruth,
    ontology: Ontology,
) -> list[LabeledInstance]:
    """Labeled instances for a whole synthetic corpus, bypassing manual
    annotation: the ledger's sampled attributes stand in for annotator input."""
    out: list[LabeledInstance] = []
    for patient in patients:
        for doc in patient.encounters:
            rows = ground_truth_rows(doc, truth.spans_for(doc.doc_id), ontology)
            out.extend(
                instances_from_rows(patient.patient_id, doc.doc_id, rows, ontology)
            )
    return out


def note_texts(patients: Sequence[PatientRecord]) -> dict[str, str]:
    """Rendered note text per document id."""
    return {
        doc.doc_id: render_note(doc)
        for patient in patients
        for doc in patient.encounters
    }


def task_instances(
    labeled: Sequence[LabeledInstance],
    texts: Mapping[str, str],
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[TaskInstance]:
    """Classifier-ready examples: span-centered token windows over the notes."""
    token_cache: dict[str, list] = {}
    out: list[TaskInstance] = []
    for inst in labeled:
        if inst.doc_id not in texts:
            raise InstanceError(f"no note text for document {inst.doc_id!r}")
        tokens = token_cache.get(inst.doc_id)
        if tokens is None:
            tokens = tokenize(texts[inst.doc_id])
            token_cache[inst.doc_id] = tokens
        window = center_window(tokens, inst.start, inst.end, max_len)
        ids = tuple(vocab.id_of(tok.surface) for tok in window.tokens)
        out.append(
            TaskInstance(
                patient_id=inst.patient_id,
                task=inst.task,
                gold_class=inst.gold_class,
                span_text=inst.span_text,
                example=SpanExample(
                    token_ids=ids,
                    span_lo=window.span_lo,
                    span_hi=window.span_hi,
                    concept=inst.concept,
                ),
            )
        )
    return out
