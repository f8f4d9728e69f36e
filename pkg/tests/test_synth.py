"""Synthetic corpus generation and its ground-truth ledger."""

import pytest

from ocuphen.corpus import (
    ENCOUNTER_HEADER,
    PROBLEM_HEADER,
    all_documents,
    render_note,
    save_corpus,
)
from ocuphen.extraction import default_patterns, extract_encounter, extract_free_text
from ocuphen.ontology import AttributeCategory, RawLabel, default_ontology
from ocuphen.synth import (
    CLASS_CUES,
    DECOYS,
    KIND_DECOY,
    KIND_ICD,
    KIND_PRIMARY,
    KIND_SECONDARY,
    LATERALITY_CUES,
    PLANT_LEXICON,
    SECTION_HEADERS,
    TEMPLATES,
    TEMPORALITY_CUES,
    GroundTruthSpan,
    SynthConfig,
    SynthError,
    default_code_universe,
    generate_corpus,
)


class TestConfigValidation:
    def test_zero_patients_rejected(self):
        with pytest.raises(SynthError, match="n_patients"):
            generate_corpus(SynthConfig(n_patients=0))

    def test_bad_range_rejected(self):
        with pytest.raises(SynthError, match="sentences_per_encounter"):
            generate_corpus(SynthConfig(n_patients=1, sentences_per_encounter=(3, 1)))

    def test_rates_clamped_to_unit_interval(self):
        with pytest.raises(SynthError, match="decoy_rate"):
            generate_corpus(SynthConfig(n_patients=1, decoy_rate=1.5))

    def test_unknown_concept_in_mix_rejected(self):
        with pytest.raises(SynthError, match="concept_mix"):
            generate_corpus(SynthConfig(n_patients=1, concept_mix={"Z9": 1.0}))

    def test_priors_must_sum_to_one(self):
        cfg = SynthConfig(n_patients=1, attribute_priors={"Laterality": {"OD": 0.5}})
        with pytest.raises(SynthError, match="sum to 1"):
            generate_corpus(cfg)

    def test_unknown_prior_category_rejected(self):
        cfg = SynthConfig(n_patients=1, attribute_priors={"Negated": {"yes": 1.0}})
        with pytest.raises(SynthError, match="unknown attribute category"):
            generate_corpus(cfg)


class TestBuildingBlocksArePatternClean:
    """No template, cue, or header may introduce an unledgered span."""

    def assert_clean(self, text):
        assert extract_free_text(text, default_patterns()) == [], text

    def test_templates(self):
        for prefix, lead_in, cued, bare in TEMPLATES:
            self.assert_clean(prefix + lead_in + cued)
            self.assert_clean(prefix + bare)

    def test_laterality_cues(self):
        for cue in LATERALITY_CUES.values():
            self.assert_clean(cue)

    def test_temporality_cues_plain_and_negated(self):
        for cue in TEMPORALITY_CUES.values():
            self.assert_clean(cue)
            self.assert_clean("not " + cue)

    def test_class_cues(self):
        for cue in CLASS_CUES.values():
            self.assert_clean(cue)

    def test_section_headers(self):
        for header in SECTION_HEADERS:
            self.assert_clean(f"[{header}]")
        self.assert_clean(ENCOUNTER_HEADER)
        self.assert_clean(PROBLEM_HEADER)

    def test_cue_tables_cover_all_ontology_classes(self):
        onto = default_ontology()
        for (concept, category), classes in onto.attributes.items():
            for cls in classes:
                if category is AttributeCategory.LATERALITY:
                    assert cls in LATERALITY_CUES, (concept, cls)
                elif category is AttributeCategory.TEMPORALITY:
                    assert cls in TEMPORALITY_CUES, (concept, cls)
                else:
                    assert cls in CLASS_CUES, (concept, cls)


class TestLexiconAndDecoys:
    def test_every_concept_has_multiple_surfaces(self):
        assert set(PLANT_LEXICON) == set(default_ontology().concepts)
        for concept, surfaces in PLANT_LEXICON.items():
            assert len(surfaces) >= 2, concept

    def test_surfaces_extract_as_single_whole_match(self):
        patterns = default_patterns()
        for concept, surfaces in PLANT_LEXICON.items():
            for surface in surfaces:
                whole = [
                    (m.start, m.end, m.concept)
                    for m in extract_free_text(surface, patterns)
                    if (m.start, m.end) == (0, len(surface))
                ]
                assert whole == [(0, len(surface), concept)], surface

    def test_decoys_fire_exactly_once(self):
        patterns = default_patterns()
        for text, concept, surface in DECOYS:
            spans = extract_free_text(text, patterns)
            assert len(spans) == 1, text
            assert spans[0].concept == concept
            assert (spans[0].start, spans[0].end) == (
                text.index(surface),
                text.index(surface) + len(surface),
            )


MEDIUM = SynthConfig(
    n_patients=40,
    codes_per_encounter=(0, 3),
    decoy_rate=0.25,
    negation_rate=0.2,
    label_missing_rate=0.15,
    seed=7,
)


@pytest.fixture(scope="module")
def medium_corpus():
    return generate_corpus(MEDIUM)


class TestGeneratedCorpus:
    def test_deterministic_for_a_seed(self, tmp_path, medium_corpus):
        patients_a, truth_a = medium_corpus
        patients_b, truth_b = generate_corpus(MEDIUM)
        path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(patients_a, path_a)
        save_corpus(patients_b, path_b)
        assert path_a.read_text() == path_b.read_text()
        assert truth_a.entries == truth_b.entries

    def test_different_seed_differs(self, medium_corpus):
        patients_a, _ = medium_corpus
        patients_b, _ = generate_corpus(
            SynthConfig(**{**MEDIUM.__dict__, "seed": 8})
        )
        assert [d.doc_id for d in all_documents(patients_a)] != [
            d.doc_id for d in all_documents(patients_b)
        ]

    def test_shapes_respect_config(self, medium_corpus):
        patients, _ = medium_corpus
        assert len(patients) == MEDIUM.n_patients
        lo, hi = MEDIUM.encounters_per_patient
        for patient in patients:
            assert lo <= len(patient.encounters) <= hi
            assert patient.patient_id.startswith("P")

    def test_ledger_spans_slice_to_surfaces(self, medium_corpus):
        patients, truth = medium_corpus
        for doc in all_documents(patients):
            text = render_note(doc)
            for entry in truth.spans_for(doc.doc_id):
                assert text[entry.start : entry.end] == entry.surface

    def test_extraction_reproduces_ledger_exactly(self, medium_corpus):
        patients, truth = medium_corpus
        for doc in all_documents(patients):
            found = {
                (s.start, s.end, s.concept, s.source)
                for s in extract_encounter(doc, default_patterns())
            }
            assert found == truth.expected_extraction(doc.doc_id), doc.doc_id

    def test_ledger_keys_unique_per_document(self, medium_corpus):
        patients, truth = medium_corpus
        for doc in all_documents(patients):
            keys = [e.key for e in truth.spans_for(doc.doc_id)]
            assert len(keys) == len(set(keys))

    def test_all_kinds_appear(self, medium_corpus):
        _, truth = medium_corpus
        kinds = {e.kind for e in truth.entries}
        assert kinds == {KIND_PRIMARY, KIND_SECONDARY, KIND_ICD, KIND_DECOY}

    def test_label_conventions_by_kind(self, medium_corpus):
        _, truth = medium_corpus
        for e in truth.entries:
            if e.kind in (KIND_SECONDARY, KIND_DECOY):
                assert e.laterality is None
                assert e.severity_type is None
                assert e.temporality is None
                assert e.negated is None
            assert e.valid is (e.kind != KIND_DECOY)
            assert (e.negated is not None) == (e.temporality is not None)

    def test_sampled_labels_are_legal_annotations(self, medium_corpus):
        onto = default_ontology()
        _, truth = medium_corpus
        for e in truth.entries:
            if e.laterality is not None:
                onto.consolidate(
                    RawLabel(e.concept, AttributeCategory.LATERALITY, e.laterality)
                )
            if e.severity_type is not None:
                onto.consolidate(
                    RawLabel(e.concept, AttributeCategory.SEVERITY_TYPE, e.severity_type)
                )
            if e.temporality is not None:
                onto.consolidate(
                    RawLabel(
                        e.concept,
                        AttributeCategory.TEMPORALITY,
                        e.temporality,
                        negated=e.negated,
                    )
                )

    def test_negation_occurs_but_only_on_temporality(self, medium_corpus):
        _, truth = medium_corpus
        negated = [e for e in truth.entries if e.negated]
        assert negated, "expected some negated labels at negation_rate=0.2"
        assert all(e.temporality is not None for e in negated)


class TestSamplingControls:
    def test_concept_mix_focuses_plants(self):
        cfg = SynthConfig(n_patients=10, concept_mix={"A3": 1.0}, decoy_rate=0.0, seed=3)
        _, truth = generate_corpus(cfg)
        primaries = [e for e in truth.entries if e.kind == KIND_PRIMARY]
        assert primaries
        assert {e.concept for e in primaries} == {"A3"}

    def test_attribute_priors_pin_classes(self):
        cfg = SynthConfig(
            n_patients=10,
            concept_mix={"A1": 1.0},
            attribute_priors={"Laterality": {"OD": 1.0}},
            decoy_rate=0.0,
            label_missing_rate=0.0,
            codes_per_encounter=(0, 0),
            seed=3,
        )
        _, truth = generate_corpus(cfg)
        primaries = [e for e in truth.entries if e.kind == KIND_PRIMARY]
        assert primaries
        assert {e.laterality for e in primaries} == {"OD"}

    def test_zero_missing_rate_labels_everything_legal(self):
        cfg = SynthConfig(
            n_patients=5,
            concept_mix={"A2": 1.0},
            decoy_rate=0.0,
            label_missing_rate=0.0,
            codes_per_encounter=(0, 0),
            seed=1,
        )
        _, truth = generate_corpus(cfg)
        for e in truth.entries:
            if e.kind == KIND_PRIMARY:
                assert e.laterality and e.severity_type and e.temporality

    def test_code_only_encounters_get_problem_list(self):
        cfg = SynthConfig(
            n_patients=8,
            sentences_per_encounter=(0, 0),
            codes_per_encounter=(0, 2),
            seed=2,
        )
        patients, _ = generate_corpus(cfg)
        for doc in all_documents(patients):
            assert not doc.sections
            assert doc.entries_at("ProblemList")

    def test_decoy_rate_one_generates_only_decoys(self):
        cfg = SynthConfig(
            n_patients=5, decoy_rate=1.0, codes_per_encounter=(0, 0), seed=4
        )
        _, truth = generate_corpus(cfg)
        assert {e.kind for e in truth.entries} == {KIND_DECOY}


class TestCodeUniverse:
    def test_universe_loads_with_descriptions(self):
        universe = default_code_universe()
        assert len(universe) >= 20
        codes = [c for c, _d in universe]
        assert len(set(codes)) == len(codes)
        assert all(desc for _c, desc in universe)

    def test_universe_includes_unmapped_codes(self):
        patterns = default_patterns()
        unmapped = [c for c, _d in default_code_universe() if not patterns.map_code(c)]
        assert unmapped, "universe should carry codes with no concept mapping"


def test_ground_truth_span_key():
    span = GroundTruthSpan(
        doc_id="d",
        patient_id="p",
        start=3,
        end=8,
        concept="A1",
        source="FreeText",
        surface="hello",
        kind=KIND_PRIMARY,
    )
    assert span.key == (3, 8, "A1", "FreeText")
