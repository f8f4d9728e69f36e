"""Synthetic ophthalmology-note generator with an exact ground-truth ledger.

Every generated encounter is assembled from templated sentences that plant
one concept surface each, plus structured ICD-10 entries sampled from a small
code universe.  While assembling, the generator records a ledger of every
span the extractor is expected to find:

* ``primary``    — the planted surface, with sampled attribute labels,
* ``secondary``  — pattern matches nested inside planted surfaces or ICD
                   code-line descriptions (no labels of their own),
* ``icd``        — structured entries mapped to concepts by code prefix,
                   with sampled labels,
* ``decoy``      — deliberate abbreviation false-positives (``vacation to
                   MI``); these extract but are ground-truth invalid.

Primary and decoy offsets come from template arithmetic and plain string
search, independent of the regex engine, so extraction recall against the
ledger is a meaningful check.  Templates, cue phrases, and section headers
are chosen to contain no pattern matches of their own (unit-tested), keeping
the ledger exhaustive.
"""

from __future__ import annotations

import datetime
import random
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .corpus import ENCOUNTER_CODES, PROBLEM_LIST, IcdEntry, NoteDocument, PatientRecord, render_layout
from .extraction import (
    SOURCE_FREE_TEXT,
    ConceptSpan,
    PatternSet,
    default_patterns,
    extract_free_text,
)
from .ontology import AttributeCategory, Ontology, default_ontology

KIND_PRIMARY = "primary"
KIND_SECONDARY = "secondary"
KIND_ICD = "icd"
KIND_DECOY = "decoy"

_LOCATION_SOURCE = {
    ENCOUNTER_CODES: "IcdEncounterCodes",
    PROBLEM_LIST: "IcdProblemList",
}


class SynthError(ValueError):
    """Raised for invalid generator configuration or a compromised ledger."""


# Canonical surfaces planted for each concept.  Every surface is matched by
# exactly one pattern covering the whole surface; nested sub-matches (e.g.
# the F1 hit inside "diabetic retinopathy") become secondary ledger entries.
PLANT_LEXICON: dict[str, tuple[str, ...]] = {
    "A1": ("diabetic retinopathy", "DR"),
    "A2": ("nonproliferative diabetic retinopathy", "NPDR"),
    "A3": ("proliferative diabetic retinopathy", "PDR"),
    "A4": ("neovascularization", "NVE", "NVD"),
    "B1": ("macular edema", "foveal edema", "DME"),
    "C1": ("vitreous hemorrhage", "VH"),
    "C2": ("retinal detachment", "RRD"),
    "C3": ("neovascular glaucoma", "NVG"),
    "D1": ("anti-VEGF", "eylea", "avastin"),
    "D2": ("panretinal photocoagulation", "PRP"),
    "D3": ("focal laser", "grid laser"),
    "D4": ("intravitreal injection", "kenalog"),
    "E1": ("pars plana vitrectomy", "vitrectomy", "scleral buckle"),
    "E2": ("trabeculectomy", "tube shunt", "MIGS"),
    "F1": ("diabetes mellitus", "diabetes", "T2DM"),
    "G1": ("diabetic nephropathy", "nephropathy", "CKD"),
    "G2": ("peripheral neuropathy", "neuropathy", "DPN"),
    "G3": ("myocardial infarction", "heart attack", "MI"),
    "G4": ("stroke", "CVA"),
}

# (prefix, cue_lead_in, suffix_with_cues, suffix_without_cues)
TEMPLATES: tuple[tuple[str, str, str, str], ...] = (
    ("Patient seen for ", ", ", ".", "."),
    ("Exam shows ", " (", ").", "."),
    ("Assessment: ", ", ", ".", "."),
    ("Impression is ", ", ", ".", "."),
    ("We discussed ", ", ", ".", "."),
)

SECTION_HEADERS: tuple[str, ...] = (
    "OVERVIEW",
    "EXAM",
    "HISTORY",
    "ASSESSMENT & PLAN",
    "IMPRESSION",
    "PLAN",
)

LATERALITY_CUES = {"OD": "right eye", "OS": "left eye", "OU": "both eyes"}

TEMPORALITY_CUES = {
    "Active": "currently active",
    "History of": "by history",
    "Resolving": "now resolving",
    "Resolved": "fully resolved",
    "Present": "found present",
    "Not Present": "screened negative",
    "Performed Today": "performed today",
    "Recommended": "recommended",
    "Considering": "under consideration",
    "No History of": "never before",
}

CLASS_CUES = {
    "Mild": "graded mild",
    "Mild-Moderate": "graded mild to moderate",
    "Moderate": "graded moderate",
    "Moderate-Severe": "graded moderate to severe",
    "Severe": "graded severe",
    "NHR-PDR": "without high risk features",
    "HR-PDR": "with high risk features",
    "Iris": "involving the iris",
    "Iris + NVD and/or NVE": "involving the iris and the disc",
    "NVD": "at the disc",
    "NVE": "elsewhere in the retina",
    "NVD/NVE": "at the disc and elsewhere",
    "AMD": "age related in origin",
    "Other": "of other etiology",
    "DME": "center involving",
    "CI-DME": "center involved subtype",
    "Non-CI-DME": "not center involved",
    "CS-DME": "clinically significant subtype",
    "Non-CS-DME": "not clinically significant",
    "CME": "cystoid in pattern",
    "RRD": "rhegmatogenous in mechanism",
    "TRD": "tractional in mechanism",
    "Serous": "serous in mechanism",
    "Combined RRD/TRD": "of combined mechanism",
    "Type I": "type one",
    "Type II": "type two",
    "Gestational": "gestational onset",
    "Indication VH": "for hemorrhage clearance",
    "Indication RD": "for detachment repair",
    "Tube": "via tube placement",
    "Trab": "via filtering approach",
    "MIGS": "via minimally invasive approach",
}

NEGATION_CUE_PREFIX = "not "

# (sentence, concept the abbreviation false-fires on, surface)
DECOYS: tuple[tuple[str, str, str], ...] = (
    ("She will return after vacation to MI.", "G3", "MI"),
    ("Patient spends summers in ME.", "B1", "ME"),
    ("Met with RD to review dietary goals.", "C2", "RD"),
    ("The PPV of the screening test was low.", "E1", "PPV"),
    ("No CVA tenderness on exam.", "G4", "CVA"),
)

_PRIOR_CATEGORIES = {
    "Laterality": AttributeCategory.LATERALITY,
    "Temporality": AttributeCategory.TEMPORALITY,
    "SeverityType": AttributeCategory.SEVERITY_TYPE,
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for corpus generation; all randomness flows from ``seed``."""

    n_patients: int
    encounters_per_patient: tuple[int, int] = (1, 3)
    sentences_per_encounter: tuple[int, int] = (1, 3)
    codes_per_encounter: tuple[int, int] = (0, 3)
    concept_mix: dict[str, float] | None = None
    attribute_priors: dict[str, dict[str, float]] | None = None
    decoy_rate: float = 0.1
    negation_rate: float = 0.1
    label_missing_rate: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class GroundTruthSpan:
    """One expected extraction with its sampled annotation, if any."""

    doc_id: str
    patient_id: str
    start: int
    end: int
    concept: str
    source: str
    surface: str
    kind: str
    laterality: str | None = None
    severity_type: str | None = None
    temporality: str | None = None
    negated: bool | None = None
    valid: bool = True

    @property
    def key(self) -> tuple[int, int, str, str]:
        return (self.start, self.end, self.concept, self.source)


@dataclass
class SynthGroundTruth:
    entries: list[GroundTruthSpan]
    _by_doc: dict[str, list[GroundTruthSpan]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for entry in self.entries:
            self._by_doc.setdefault(entry.doc_id, []).append(entry)

    def spans_for(self, doc_id: str) -> list[GroundTruthSpan]:
        return list(self._by_doc.get(doc_id, []))

    def expected_extraction(self, doc_id: str) -> set[tuple[int, int, str, str]]:
        """Span keys the extractor must produce for one encounter.

        Free-text entries always extract; an ICD entry extracts only when its
        concept has no free-text hit in the same note (per-concept dedup).
        """
        spans = self._by_doc.get(doc_id, [])
        free = {e.key for e in spans if e.kind != KIND_ICD}
        text_concepts = {c for (_s, _e, c, _src) in free}
        icd = {
            e.key
            for e in spans
            if e.kind == KIND_ICD and e.concept not in text_concepts
        }
        return free | icd


@lru_cache(maxsize=1)
def default_code_universe() -> tuple[tuple[str, str], ...]:
    """(code, description) pairs from the packaged ICD-10 sample file."""
    text = resources.files("ocuphen.data").joinpath("icd10_sample.tsv").read_text("utf-8")
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        code, sep, description = line.partition("\t")
        if not sep or not description.strip():
            raise SynthError(f"icd10_sample.tsv line {lineno}: expected code<TAB>description")
        out.append((code.strip(), description.strip()))
    return tuple(out)


@dataclass(frozen=True)
class _Plan:
    """One planned sentence and everything needed to resolve its ledger."""

    text: str
    kind: str
    concept: str
    surface: str
    surface_off: int
    laterality: str | None = None
    severity_type: str | None = None
    temporality: str | None = None
    negated: bool | None = None


def _validate_config(cfg: SynthConfig, ontology: Ontology) -> None:
    if cfg.n_patients < 1:
        raise SynthError("n_patients must be at least 1")
    for name in ("encounters_per_patient", "sentences_per_encounter", "codes_per_encounter"):
        lo, hi = getattr(cfg, name)
        if lo < 0 or hi < lo:
            raise SynthError(f"{name} must be a (low, high) range with 0 <= low <= high")
    if cfg.encounters_per_patient[0] < 1:
        raise SynthError("every patient needs at least one encounter")
    for name in ("decoy_rate", "negation_rate", "label_missing_rate"):
        value = getattr(cfg, name)
        if not 0.0 <= value <= 1.0:
            raise SynthError(f"{name} must lie in [0, 1]")
    if cfg.concept_mix is not None:
        unknown = set(cfg.concept_mix) - set(ontology.concepts)
        if unknown:
            raise SynthError(f"concept_mix names unknown concepts: {sorted(unknown)}")
        if any(w < 0 for w in cfg.concept_mix.values()):
            raise SynthError("concept_mix weights must be non-negative")
        if sum(cfg.concept_mix.values()) <= 0:
            raise SynthError("concept_mix weights must not all be zero")
    if cfg.attribute_priors is not None:
        for token, prior in cfg.attribute_priors.items():
            if token not in _PRIOR_CATEGORIES:
                raise SynthError(f"unknown attribute category in priors: {token!r}")
            if any(p < 0 for p in prior.values()):
                raise SynthError(f"{token} priors must be non-negative")
            total = sum(prior.values())
            if abs(total - 1.0) > 1e-9:
                raise SynthError(f"{token} priors must sum to 1, got {total}")


def _validate_lexicon(patterns: PatternSet) -> None:
    for concept, surfaces in PLANT_LEXICON.items():
        for surface in surfaces:
            whole = [
                m
                for m in extract_free_text(surface, patterns)
                if (m.start, m.end, m.concept) == (0, len(surface), concept)
            ]
            if len(whole) != 1:
                raise SynthError(
                    f"lexicon surface {surface!r} is not a clean whole-string "
                    f"match for {concept}"
                )


def _choose_class(
    rng: random.Random, legal: tuple[str, ...], prior: dict[str, float] | None
) -> str:
    if prior:
        weights = [prior.get(cls, 0.0) for cls in legal]
        if sum(weights) > 0:
            return rng.choices(legal, weights=weights, k=1)[0]
    return rng.choice(legal)


def _sample_labels(
    rng: random.Random, cfg: SynthConfig, ontology: Ontology, concept: str
) -> tuple[str | None, str | None, str | None, bool | None]:
    """Sampled (laterality, severity/type, temporality, negated) for a span."""
    cats = ontology.valid_attributes(concept)
    priors = cfg.attribute_priors or {}
    laterality = severity = temporality = None
    negated: bool | None = None
    if AttributeCategory.LATERALITY in cats and rng.random() >= cfg.label_missing_rate:
        laterality = _choose_class(
            rng, cats[AttributeCategory.LATERALITY], priors.get("Laterality")
        )
    if AttributeCategory.SEVERITY_TYPE in cats and rng.random() >= cfg.label_missing_rate:
        severity = _choose_class(
            rng, cats[AttributeCategory.SEVERITY_TYPE], priors.get("SeverityType")
        )
    if AttributeCategory.TEMPORALITY in cats and rng.random() >= cfg.label_missing_rate:
        temporality = _choose_class(
            rng, cats[AttributeCategory.TEMPORALITY], priors.get("Temporality")
        )
        negated = False
        task = ontology.task_for(concept, AttributeCategory.TEMPORALITY)
        if (
            task is not None
            and (task.id, temporality, True) in ontology.rules
            and rng.random() < cfg.negation_rate
        ):
            negated = True
    return laterality, severity, temporality, negated


def _plan_sentence(
    rng: random.Random, cfg: SynthConfig, ontology: Ontology, concepts: tuple[str, ...]
) -> _Plan:
    if rng.random() < cfg.decoy_rate:
        text, concept, surface = DECOYS[rng.randrange(len(DECOYS))]
        return _Plan(
            text=text,
            kind=KIND_DECOY,
            concept=concept,
            surface=surface,
            surface_off=text.index(surface),
        )
    if cfg.concept_mix:
        weights = [cfg.concept_mix.get(c, 0.0) for c in concepts]
        concept = rng.choices(concepts, weights=weights, k=1)[0]
    else:
        concept = rng.choice(concepts)
    surface = rng.choice(PLANT_LEXICON[concept])
    laterality, severity, temporality, negated = _sample_labels(rng, cfg, ontology, concept)
    cues = []
    if laterality is not None:
        cues.append(LATERALITY_CUES[laterality])
    if severity is not None:
        cues.append(CLASS_CUES[severity])
    if temporality is not None:
        cue = TEMPORALITY_CUES[temporality]
        cues.append(NEGATION_CUE_PREFIX + cue if negated else cue)
    prefix, lead_in, cued_suffix, bare_suffix = TEMPLATES[rng.randrange(len(TEMPLATES))]
    if cues:
        text = prefix + surface + lead_in + ", ".join(cues) + cued_suffix
    else:
        text = prefix + surface + bare_suffix
    return _Plan(
        text=text,
        kind=KIND_PRIMARY,
        concept=concept,
        surface=surface,
        surface_off=len(prefix),
        laterality=laterality,
        severity_type=severity,
        temporality=temporality,
        negated=negated,
    )


def _plan_encounter(
    rng: random.Random,
    cfg: SynthConfig,
    ontology: Ontology,
    concepts: tuple[str, ...],
    universe: tuple[tuple[str, str], ...],
) -> tuple[list[tuple[str, list[_Plan]]], list[IcdEntry]]:
    n_sentences = rng.randint(*cfg.sentences_per_encounter)
    plans = [_plan_sentence(rng, cfg, ontology, concepts) for _ in range(n_sentences)]
    sections: list[tuple[str, list[_Plan]]] = []
    if plans:
        two_sections = len(plans) > 1 and rng.random() < 0.4
        headers = rng.sample(SECTION_HEADERS, 2 if two_sections else 1)
        if two_sections:
            cut = rng.randrange(1, len(plans))
            sections = [(headers[0], plans[:cut]), (headers[1], plans[cut:])]
        else:
            sections = [(headers[0], plans)]
    n_codes = rng.randint(*cfg.codes_per_encounter)
    entries = []
    for code, description in rng.sample(list(universe), min(n_codes, len(universe))):
        location = ENCOUNTER_CODES if rng.random() < 0.6 else PROBLEM_LIST
        entries.append(IcdEntry(code=code, description=description, location=location))
    # an encounter must carry a note body or a problem list to be chartable
    if not sections and not any(e.location == PROBLEM_LIST for e in entries):
        if entries:
            moved = entries.pop()
            entries.append(IcdEntry(moved.code, moved.description, PROBLEM_LIST))
        else:
            code, description = universe[rng.randrange(len(universe))]
            entries.append(IcdEntry(code, description, PROBLEM_LIST))
    return sections, entries


def _resolve_ledger(
    doc: NoteDocument,
    section_plans: list[tuple[str, list[_Plan]]],
    patterns: PatternSet,
    rng: random.Random,
    cfg: SynthConfig,
    ontology: Ontology,
) -> list[GroundTruthSpan]:
    layout = render_layout(doc)
    entries: list[GroundTruthSpan] = []

    def free_span(span: ConceptSpan, base: int, **kw) -> GroundTruthSpan:
        return GroundTruthSpan(
            doc_id=doc.doc_id,
            patient_id=doc.patient_id,
            start=base + span.start,
            end=base + span.end,
            concept=span.concept,
            source=SOURCE_FREE_TEXT,
            surface=span.surface,
            **kw,
        )

    for (header, body_start, _body_end), (plan_header, plans) in zip(
        layout.section_bodies, section_plans
    ):
        if header != plan_header:
            raise SynthError("section order diverged from the plan")
        offset = 0
        for plan in plans:
            base = body_start + offset
            matches = extract_free_text(plan.text, patterns)
            planted = (plan.surface_off, plan.surface_off + len(plan.surface), plan.concept)
            hits = [m for m in matches if (m.start, m.end, m.concept) == planted]
            if len(hits) != 1:
                raise SynthError(
                    f"planted surface {plan.surface!r} did not extract cleanly"
                )
            if plan.kind == KIND_DECOY:
                if len(matches) != 1:
                    raise SynthError(f"decoy sentence {plan.text!r} is not a lone match")
                entries.append(free_span(hits[0], base, kind=KIND_DECOY, valid=False))
            else:
                entries.append(
                    free_span(
                        hits[0],
                        base,
                        kind=KIND_PRIMARY,
                        laterality=plan.laterality,
                        severity_type=plan.severity_type,
                        temporality=plan.temporality,
                        negated=plan.negated,
                    )
                )
                for m in matches:
                    if (m.start, m.end, m.concept) != planted:
                        entries.append(free_span(m, base, kind=KIND_SECONDARY))
            offset += len(plan.text) + 1

    for entry, code_start, code_end in layout.code_spans:
        line_text = f"[[{entry.code}: {entry.description}]]"
        line_start = code_start - 2
        for m in extract_free_text(line_text, patterns):
            entries.append(free_span(m, line_start, kind=KIND_SECONDARY))
        for concept in patterns.map_code(entry.code):
            laterality, severity, temporality, negated = _sample_labels(
                rng, cfg, ontology, concept
            )
            entries.append(
                GroundTruthSpan(
                    doc_id=doc.doc_id,
                    patient_id=doc.patient_id,
                    start=code_start,
                    end=code_end,
                    concept=concept,
                    source=_LOCATION_SOURCE[entry.location],
                    surface=entry.code,
                    kind=KIND_ICD,
                    laterality=laterality,
                    severity_type=severity,
                    temporality=temporality,
                    negated=negated,
                )
            )
    return entries


def generate_corpus(
    cfg: SynthConfig,
    ontology: Ontology | None = None,
    patterns: PatternSet | None = None,
    code_universe: tuple[tuple[str, str], ...] | None = None,
) -> tuple[list[PatientRecord], SynthGroundTruth]:
    """Generate patients with rendered-note ground truth.

    Returns the patient records and the span ledger; all sampling is driven
    by ``cfg.seed`` so identical configs reproduce identical corpora.
    """
    ontology = ontology or default_ontology()
    patterns = patterns or default_patterns()
    universe = code_universe or default_code_universe()
    _validate_config(cfg, ontology)
    _validate_lexicon(patterns)
    concepts = tuple(ontology.concepts)
    rng = random.Random(cfg.seed)
    base_date = datetime.date(2015, 1, 1)
    patients: list[PatientRecord] = []
    ledger: list[GroundTruthSpan] = []
    for p in range(cfg.n_patients):
        patient_id = f"P{p + 1:04d}"
        encounters = []
        for e in range(rng.randint(*cfg.encounters_per_patient)):
            sections, icd_entries = _plan_encounter(rng, cfg, ontology, concepts, universe)
            doc = NoteDocument(
                patient_id=patient_id,
                encounter_id=f"E{e + 1:02d}",
                date=(base_date + datetime.timedelta(days=rng.randrange(1461))).isoformat(),
                sections=tuple(
                    (header, " ".join(plan.text for plan in plans))
                    for header, plans in sections
                ),
                icd_entries=tuple(icd_entries),
            )
            ledger.extend(_resolve_ledger(doc, sections, patterns, rng, cfg, ontology))
            encounters.append(doc)
        patients.append(PatientRecord(patient_id=patient_id, encounters=tuple(encounters)))
    return patients, SynthGroundTruth(ledger)
