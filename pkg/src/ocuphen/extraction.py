"""High-recall concept span extraction over rendered notes.

Two extraction routes feed the annotation workbooks:

* free-text regular expressions run over the full rendered note (note body,
  section headers, and the bracketed code lines alike), and
* ICD-10 structured entries, where a code is mapped to concepts by code
  prefix and the span covers the code text inside its rendered line.

Overlapping spans from *different* concepts are all kept — recall is the
priority and a human pass prunes false positives downstream.  Within one
encounter an ICD-derived span is dropped when the same concept was already
found in free text anywhere in that note.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .corpus import IcdEntry, NoteDocument, PatientRecord, render_layout

SOURCE_FREE_TEXT = "FreeText"
SOURCE_ICD_ENCOUNTER = "IcdEncounterCodes"
SOURCE_ICD_PROBLEM = "IcdProblemList"

_LOCATION_SOURCE = {
    "EncounterCodes": SOURCE_ICD_ENCOUNTER,
    "ProblemList": SOURCE_ICD_PROBLEM,
}


class PatternError(ValueError):
    """Raised for malformed pattern files or unusable patterns."""


@dataclass(frozen=True, order=True)
class ConceptSpan:
    """One extracted span: ``text[start:end] == surface`` in the rendered note."""

    doc_id: str
    start: int
    end: int
    concept: str
    surface: str
    source: str


@dataclass(frozen=True)
class PatternSet:
    """Compiled free-text patterns and ICD prefixes, keyed by concept id."""

    text_patterns: dict[str, tuple[re.Pattern, ...]]
    icd_prefixes: dict[str, tuple[str, ...]]

    @property
    def concepts(self) -> tuple[str, ...]:
        return tuple(self.text_patterns)

    def map_code(self, code: str) -> tuple[str, ...]:
        """Concepts an ICD-10 code maps to (exact code or prefix match)."""
        hits = []
        for concept, prefixes in self.icd_prefixes.items():
            if any(code == p or code.startswith(p) for p in prefixes):
                hits.append(concept)
        return tuple(hits)


def parse_patterns(text: str, concepts: tuple[str, ...] | None = None) -> PatternSet:
    """Parse a pattern file; see data/patterns.txt for the grammar.

    When ``concepts`` is given, the file must cover exactly that universe and
    give every concept at least one free-text pattern.
    """
    text_patterns: dict[str, list[re.Pattern]] = {}
    icd_prefixes: dict[str, list[str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise PatternError(f"line {lineno}: empty concept header")
            if concepts is not None and current not in concepts:
                raise PatternError(f"line {lineno}: unknown concept {current!r}")
            if current in text_patterns:
                raise PatternError(f"line {lineno}: duplicate block for {current!r}")
            text_patterns[current] = []
            icd_prefixes[current] = []
            continue
        if current is None:
            raise PatternError(f"line {lineno}: entry before any [concept] header")
        key, sep, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not sep or not value:
            raise PatternError(f"line {lineno}: expected 'kind: value'")
        if key in ("text-ci", "text-cs"):
            flags = re.IGNORECASE if key == "text-ci" else 0
            try:
                compiled = re.compile(value, flags)
            except re.error as exc:
                raise PatternError(
                    f"line {lineno}: bad pattern for {current}: {value!r} ({exc})"
                ) from exc
            if compiled.match(""):
                raise PatternError(
                    f"line {lineno}: pattern for {current} can match empty text: {value!r}"
                )
            text_patterns[current].append(compiled)
        elif key == "icd":
            if not re.fullmatch(r"[A-Z][0-9]{2}(\.[A-Za-z0-9]{1,4})?", value):
                raise PatternError(
                    f"line {lineno}: bad ICD-10 prefix for {current}: {value!r}"
                )
            icd_prefixes[current].append(value)
        else:
            raise PatternError(f"line {lineno}: unknown entry kind {key!r}")
    if not text_patterns:
        raise PatternError("pattern file defines no concepts")
    if concepts is not None:
        missing = [c for c in concepts if c not in text_patterns]
        if missing:
            raise PatternError(f"concepts without a block: {', '.join(missing)}")
        bare = [c for c, pats in text_patterns.items() if not pats]
        if bare:
            raise PatternError(f"concepts without free-text patterns: {', '.join(bare)}")
        order = {c: i for i, c in enumerate(concepts)}
        text_patterns = dict(sorted(text_patterns.items(), key=lambda kv: order[kv[0]]))
        icd_prefixes = dict(sorted(icd_prefixes.items(), key=lambda kv: order[kv[0]]))
    return PatternSet(
        text_patterns={c: tuple(p) for c, p in text_patterns.items()},
        icd_prefixes={c: tuple(p) for c, p in icd_prefixes.items() if p},
    )


def load_patterns(path, concepts: tuple[str, ...] | None = None) -> PatternSet:
    with open(path, encoding="utf-8") as fh:
        return parse_patterns(fh.read(), concepts)


@lru_cache(maxsize=1)
def default_patterns() -> PatternSet:
    from .ontology import default_ontology

    concepts = tuple(default_ontology().concepts)
    text = resources.files("ocuphen.data").joinpath("patterns.txt").read_text("utf-8")
    return parse_patterns(text, concepts)


def extract_free_text(text: str, patterns: PatternSet, doc_id: str = "") -> list[ConceptSpan]:
    """All pattern matches over ``text``, deduplicated per (concept, span)."""
    spans: set[ConceptSpan] = set()
    for concept, compiled in patterns.text_patterns.items():
        for pattern in compiled:
            for m in pattern.finditer(text):
                if m.start() == m.end():
                    continue
                spans.add(
                    ConceptSpan(
                        doc_id=doc_id,
                        start=m.start(),
                        end=m.end(),
                        concept=concept,
                        surface=m.group(0),
                        source=SOURCE_FREE_TEXT,
                    )
                )
    return sorted(spans, key=lambda s: (s.start, s.concept, s.end))


def extract_icd(
    code_spans: list[tuple[IcdEntry, int, int]],
    patterns: PatternSet,
    doc_id: str = "",
) -> list[ConceptSpan]:
    """One span per (structured entry, mapped concept) at the code's offsets."""
    spans = []
    for entry, start, end in code_spans:
        for concept in patterns.map_code(entry.code):
            spans.append(
                ConceptSpan(
                    doc_id=doc_id,
                    start=start,
                    end=end,
                    concept=concept,
                    surface=entry.code,
                    source=_LOCATION_SOURCE[entry.location],
                )
            )
    return spans


def extract_encounter(doc: NoteDocument, patterns: PatternSet) -> list[ConceptSpan]:
    """Free-text plus ICD spans for one encounter, after per-concept dedup.

    An ICD-derived span survives only when its concept has no free-text span
    anywhere in the same rendered note.
    """
    layout = render_layout(doc)
    free = extract_free_text(layout.text, patterns, doc_id=doc.doc_id)
    text_concepts = {s.concept for s in free}
    icd = [
        s
        for s in extract_icd(layout.code_spans, patterns, doc_id=doc.doc_id)
        if s.concept not in text_concepts
    ]
    return sorted(free + icd, key=lambda s: (s.start, s.concept, s.end, s.source))


def extraction_stats(
    patients: list[PatientRecord], patterns: PatternSet
) -> dict[str, dict[str, int]]:
    """Note-level counts per concept: found only via ICD, via both, only in text."""
    stats = {c: {"icd_only": 0, "both": 0, "text_only": 0} for c in patterns.concepts}
    for patient in patients:
        for doc in patient.encounters:
            layout = render_layout(doc)
            in_text = {s.concept for s in extract_free_text(layout.text, patterns)}
            in_icd = {
                c for e in doc.icd_entries for c in patterns.map_code(e.code)
            }
            for concept in stats:
                if concept in in_icd and concept not in in_text:
                    stats[concept]["icd_only"] += 1
                elif concept in in_icd and concept in in_text:
                    stats[concept]["both"] += 1
                elif concept in in_text:
                    stats[concept]["text_only"] += 1
    return stats
