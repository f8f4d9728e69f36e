"""Patient records, note rendering, and corpus serialization.

A document combines structured ICD-10 entries (encounter codes and problem
list) with free-text sections. ``render_note`` flattens a document into the
single text all downstream character offsets refer to:

    [[[ENCOUNTER ICD-10 CODES]]]
    [[E11.319: Diabetic retinopathy]]

    [[[PROBLEM LIST]]]
    [[H43.1: Vitreous hemorrhage]]

    [OVERVIEW]
    Narrative text ...

Both code-section headers always appear (an empty document renders to the
header-only skeleton); blocks are separated by one blank line and the text
ends with a newline. Offsets are end-exclusive. Corpus files are UTF-8
JSON-lines with a version header line.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

ENCOUNTER_CODES = "EncounterCodes"
PROBLEM_LIST = "ProblemList"

ENCOUNTER_HEADER = "[[[ENCOUNTER ICD-10 CODES]]]"
PROBLEM_HEADER = "[[[PROBLEM LIST]]]"

CORPUS_SCHEMA = "#corpus-v1"

# letter, two digits, then optionally a dot and 1-4 alphanumerics
ICD10_PATTERN = re.compile(r"^[A-Z][0-9]{2}(\.[A-Za-z0-9]{1,4})?$")

_DATE_PATTERN = re.compile(r"^\d{4}-\d{2}-\d{2}$")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class IcdEntry:
    code: str
    description: str
    location: str  # ENCOUNTER_CODES or PROBLEM_LIST

    def __post_init__(self) -> None:
        if not ICD10_PATTERN.match(self.code):
            raise CorpusError(f"not an ICD-10 code: {self.code!r}")
        if self.location not in (ENCOUNTER_CODES, PROBLEM_LIST):
            raise CorpusError(f"unknown code location: {self.location!r}")


@dataclass(frozen=True)
class NoteDocument:
    patient_id: str
    encounter_id: str
    date: str  # ISO-8601 day
    sections: tuple[tuple[str, str], ...] = ()  # (header, body)
    icd_entries: tuple[IcdEntry, ...] = ()

    def __post_init__(self) -> None:
        if not _DATE_PATTERN.match(self.date):
            raise CorpusError(f"date must be ISO-8601 (YYYY-MM-DD): {self.date!r}")

    @property
    def doc_id(self) -> str:
        payload = json.dumps(
            [
                self.patient_id,
                self.encounter_id,
                self.date,
                [list(s) for s in self.sections],
                [[e.code, e.description, e.location] for e in self.icd_entries],
            ],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def entries_at(self, location: str) -> list[IcdEntry]:
        return [e for e in self.icd_entries if e.location == location]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    encounters: tuple[NoteDocument, ...]

    def __post_init__(self) -> None:
        for doc in self.encounters:
            if doc.patient_id != self.patient_id:
                raise CorpusError(
                    f"encounter {doc.encounter_id} belongs to {doc.patient_id}, "
                    f"not {self.patient_id}"
                )
            if not doc.sections and not doc.entries_at(PROBLEM_LIST):
                raise CorpusError(
                    f"encounter {doc.encounter_id} has neither note text nor a "
                    "problem list"
                )


@dataclass
class RenderLayout:
    """Offset bookkeeping for one rendered note."""

    text: str
    # per icd entry, in document order: (entry, start, end) of the code text
    code_spans: list[tuple[IcdEntry, int, int]] = field(default_factory=list)
    # per free-text section, in document order: (header, body start, body end)
    section_bodies: list[tuple[str, int, int]] = field(default_factory=list)


def _code_line(entry: IcdEntry) -> str:
    return f"[[{entry.code}: {entry.description}]]"


def render_layout(doc: NoteDocument) -> RenderLayout:
    """Render a document and report where codes and section bodies landed."""
    code_blocks = [
        (ENCOUNTER_HEADER, doc.entries_at(ENCOUNTER_CODES)),
        (PROBLEM_HEADER, doc.entries_at(PROBLEM_LIST)),
    ]
    blocks: list[list[str]] = [
        [header] + [_code_line(e) for e in entries] for header, entries in code_blocks
    ]
    for header, body in doc.sections:
        blocks.append([f"[{header}]", body])
    text = "\n\n".join("\n".join(block) for block in blocks) + "\n"

    layout = RenderLayout(text=text)
    offset = 0
    for i, block in enumerate(blocks):
        if i < 2:
            pos = offset + len(block[0]) + 1
            for line, entry in zip(block[1:], code_blocks[i][1]):
                start = pos + 2  # skip the "[[" prefix
                layout.code_spans.append((entry, start, start + len(entry.code)))
                pos += len(line) + 1
        else:
            header, body = doc.sections[i - 2]
            body_start = offset + len(block[0]) + 1
            layout.section_bodies.append((header, body_start, body_start + len(body)))
        # this block plus the blank separator line
        offset += len("\n".join(block)) + 2
    return layout


def render_note(doc: NoteDocument) -> str:
    return render_layout(doc).text


def save_corpus(patients: list[PatientRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(CORPUS_SCHEMA + "\n")
        for patient in patients:
            for doc in patient.encounters:
                record = {
                    "patient_id": doc.patient_id,
                    "encounter_id": doc.encounter_id,
                    "date": doc.date,
                    "sections": [list(s) for s in doc.sections],
                    "icd_entries": [
                        [e.code, e.description, e.location] for e in doc.icd_entries
                    ],
                }
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(path: str) -> list[PatientRecord]:
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        return []
    if lines[0] != CORPUS_SCHEMA:
        raise CorpusError(f"line 1: expected schema header {CORPUS_SCHEMA!r}")
    by_patient: dict[str, list[NoteDocument]] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            doc = NoteDocument(
                patient_id=record["patient_id"],
                encounter_id=record["encounter_id"],
                date=record["date"],
                sections=tuple((h, b) for h, b in record["sections"]),
                icd_entries=tuple(
                    IcdEntry(code, desc, loc)
                    for code, desc, loc in record["icd_entries"]
                ),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"line {line_no}: {exc}") from exc
        by_patient.setdefault(doc.patient_id, []).append(doc)
    return [PatientRecord(pid, tuple(docs)) for pid, docs in by_patient.items()]


def all_documents(patients: list[PatientRecord]) -> list[NoteDocument]:
    return [doc for patient in patients for doc in patient.encounters]
