"""Concept ontology, attribute vocabularies, and task consolidation.

The label space is defined by a line-oriented data file (see
``data/ontology.txt`` for the grammar). Nineteen clinical concepts carry
per-concept attribute vocabularies; attribute annotations consolidate into
fourteen classification tasks via an explicit rule table. Negation is a
boolean flag on a raw label and is only meaningful for temporality classes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources


class OntologyError(ValueError):
    pass


class AttributeCategory(enum.Enum):
    LATERALITY = "Laterality"
    TEMPORALITY = "Temporality"
    SEVERITY_TYPE = "Severity/Type"
    SPAN_VALIDITY = "Span Validity"
    NEGATION = "Negated"


# tokens used in the ontology/workbook files for each category
_CATEGORY_TOKENS = {
    "Laterality": AttributeCategory.LATERALITY,
    "Temporality": AttributeCategory.TEMPORALITY,
    "SeverityType": AttributeCategory.SEVERITY_TYPE,
    "SpanValidity": AttributeCategory.SPAN_VALIDITY,
}

# categories that may appear in the [attributes] section
_ANNOTATED_CATEGORIES = (
    AttributeCategory.LATERALITY,
    AttributeCategory.TEMPORALITY,
    AttributeCategory.SEVERITY_TYPE,
)

SPAN_VALIDITY_CLASSES = ("Valid", "Invalid")

# report group shown for each task-id prefix
TASK_GROUP_DISPLAY = {
    "Temporality": "Temporality",
    "Laterality": "Laterality",
    "Type": "Type",
    "Severity": "Severity",
    "SpanValidity": "Span Validity",
}


@dataclass(frozen=True)
class Concept:
    id: str
    group: str
    name: str
    description: str


@dataclass(frozen=True)
class Task:
    id: str
    category: AttributeCategory
    display: str
    concepts: tuple[str, ...]
    classes: tuple[str, ...]

    @property
    def group(self) -> str:
        return TASK_GROUP_DISPLAY[self.id.split("-", 1)[0]]

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class RawLabel:
    concept: str
    category: AttributeCategory
    value: str
    negated: bool = False


@dataclass
class Ontology:
    concepts: dict[str, Concept]
    attributes: dict[tuple[str, AttributeCategory], tuple[str, ...]]
    tasks: dict[str, Task]
    rules: dict[tuple[str, str, bool], str]
    # (category, concept id) -> task id; built in __post_init__
    _task_of: dict[tuple[AttributeCategory, str], str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for task in self.tasks.values():
            for cid in task.concepts:
                self._task_of[(task.category, cid)] = task.id

    def concept_by_name(self, name: str) -> Concept:
        for concept in self.concepts.values():
            if concept.name == name:
                return concept
        raise OntologyError(f"unknown concept name: {name!r}")

    def valid_attributes(self, concept: str) -> dict[AttributeCategory, tuple[str, ...]]:
        """Legal annotation classes per category for one concept.

        Span validity is universal (any extracted span can be marked
        incorrect), so every concept reports Valid/Invalid for it.
        """
        if concept not in self.concepts:
            raise OntologyError(f"unknown concept: {concept!r}")
        out: dict[AttributeCategory, tuple[str, ...]] = {}
        for category in _ANNOTATED_CATEGORIES:
            classes = self.attributes.get((concept, category))
            if classes:
                out[category] = classes
        out[AttributeCategory.SPAN_VALIDITY] = SPAN_VALIDITY_CLASSES
        return out

    def tasks_for_concept(self, concept: str) -> list[Task]:
        if concept not in self.concepts:
            raise OntologyError(f"unknown concept: {concept!r}")
        return [t for t in self.tasks.values() if concept in t.concepts]

    def task_for(self, concept: str, category: AttributeCategory) -> Task | None:
        task_id = self._task_of.get((category, concept))
        return self.tasks[task_id] if task_id is not None else None

    def consolidate(self, raw: RawLabel) -> tuple[str, str] | None:
        """Map a raw annotation to (task id, consolidated class).

        Returns None for deliberately unmodeled combinations (no covering
        task). Raises OntologyError for illegal inputs: unknown concept,
        a class outside the concept's vocabulary, negation outside
        temporality, or a negated class with no negation rule.
        """
        if raw.concept not in self.concepts:
            raise OntologyError(f"unknown concept: {raw.concept!r}")
        if raw.category is AttributeCategory.NEGATION:
            raise OntologyError("negation is a flag on a label, not a labeled category")
        if raw.category is AttributeCategory.SPAN_VALIDITY:
            legal: tuple[str, ...] = SPAN_VALIDITY_CLASSES
        else:
            maybe = self.attributes.get((raw.concept, raw.category))
            if maybe is None:
                raise OntologyError(
                    f"{raw.category.value} is not annotated for {raw.concept}"
                )
            legal = maybe
        if raw.value not in legal:
            raise OntologyError(
                f"{raw.value!r} is not a legal {raw.category.value} class "
                f"for {raw.concept}"
            )
        if raw.negated and raw.category is not AttributeCategory.TEMPORALITY:
            raise OntologyError("only temporality classes can be negated")
        task_id = self._task_of.get((raw.category, raw.concept))
        if task_id is None:
            return None
        consolidated = self.rules.get((task_id, raw.value, raw.negated))
        if consolidated is None:
            # validation guarantees coverage of non-negated legal classes,
            # so only an uncovered negation can land here
            raise OntologyError(
                f"no negation rule for {raw.value!r} in task {task_id}"
            )
        return task_id, consolidated

    @property
    def task_list(self) -> list[Task]:
        return list(self.tasks.values())


def _parse_category(token: str, line_no: int) -> AttributeCategory:
    try:
        return _CATEGORY_TOKENS[token]
    except KeyError:
        raise OntologyError(f"line {line_no}: unknown category {token!r}") from None


def _split_fields(line: str, n: int, line_no: int) -> list[str]:
    fields = [f.strip() for f in line.split("|")]
    if len(fields) != n:
        raise OntologyError(f"line {line_no}: expected {n} fields, got {len(fields)}")
    return fields


def _split_classes(text: str, line_no: int) -> tuple[str, ...]:
    classes = tuple(c.strip() for c in text.split(",") if c.strip())
    if not classes:
        raise OntologyError(f"line {line_no}: empty class list")
    if len(set(classes)) != len(classes):
        raise OntologyError(f"line {line_no}: duplicate class in {classes}")
    return classes


def parse_ontology(text: str) -> Ontology:
    concepts: dict[str, Concept] = {}
    attributes: dict[tuple[str, AttributeCategory], tuple[str, ...]] = {}
    tasks: dict[str, Task] = {}
    rules: dict[tuple[str, str, bool], str] = {}
    section = None
    for line_no, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in ("concepts", "attributes", "tasks", "consolidation"):
                raise OntologyError(f"line {line_no}: unknown section {section!r}")
            continue
        if section == "concepts":
            cid, group, name, description = _split_fields(line, 4, line_no)
            if cid in concepts:
                raise OntologyError(f"line {line_no}: duplicate concept {cid}")
            concepts[cid] = Concept(cid, group, name, description)
        elif section == "attributes":
            cid, cat_token, class_text = _split_fields(line, 3, line_no)
            category = _parse_category(cat_token, line_no)
            if category not in _ANNOTATED_CATEGORIES:
                raise OntologyError(
                    f"line {line_no}: {cat_token} cannot appear in [attributes]"
                )
            if cid not in concepts:
                raise OntologyError(f"line {line_no}: unknown concept {cid}")
            key = (cid, category)
            if key in attributes:
                raise OntologyError(
                    f"line {line_no}: duplicate attribute row {cid}/{cat_token}"
                )
            attributes[key] = _split_classes(class_text, line_no)
        elif section == "tasks":
            tid, cat_token, display, concept_text, class_text = _split_fields(
                line, 5, line_no
            )
            category = _parse_category(cat_token, line_no)
            if tid in tasks:
                raise OntologyError(f"line {line_no}: duplicate task {tid}")
            if tid.split("-", 1)[0] not in TASK_GROUP_DISPLAY:
                raise OntologyError(f"line {line_no}: task id {tid!r} has no group")
            cids = tuple(c.strip() for c in concept_text.split(",") if c.strip())
            if not cids:
                raise OntologyError(f"line {line_no}: task {tid} lists no concepts")
            for cid in cids:
                if cid not in concepts:
                    raise OntologyError(f"line {line_no}: unknown concept {cid}")
            tasks[tid] = Task(tid, category, display, cids, _split_classes(class_text, line_no))
        elif section == "consolidation":
            tid, raw_text, consolidated = _split_fields(line, 3, line_no)
            if tid not in tasks:
                raise OntologyError(f"line {line_no}: unknown task {tid}")
            negated = raw_text.startswith("~")
            raw_class = raw_text[1:].strip() if negated else raw_text
            key = (tid, raw_class, negated)
            if key in rules:
                raise OntologyError(
                    f"line {line_no}: duplicate rule for {raw_text!r} in {tid}"
                )
            if consolidated not in tasks[tid].classes:
                raise OntologyError(
                    f"line {line_no}: {consolidated!r} is not a class of {tid}"
                )
            if negated and tasks[tid].category is not AttributeCategory.TEMPORALITY:
                raise OntologyError(
                    f"line {line_no}: negation rule outside a temporality task"
                )
            rules[key] = consolidated
        else:
            raise OntologyError(f"line {line_no}: content before any [section]")
    ontology = Ontology(concepts, attributes, tasks, rules)
    _validate(ontology)
    return ontology


def _validate(onto: Ontology) -> None:
    names = [c.name for c in onto.concepts.values()]
    if len(set(names)) != len(names):
        raise OntologyError("concept names must be unique")
    # one task per (category, concept)
    seen: dict[tuple[AttributeCategory, str], str] = {}
    for task in onto.tasks.values():
        for cid in task.concepts:
            key = (task.category, cid)
            if key in seen:
                raise OntologyError(
                    f"concept {cid} is claimed by both {seen[key]} and {task.id} "
                    f"for {task.category.value}"
                )
            seen[key] = task.id
    # every legal non-negated combination with a covering task has a rule
    for (cid, category), classes in onto.attributes.items():
        task = onto.task_for(cid, category)
        if task is None:
            continue
        for cls in classes:
            if (task.id, cls, False) not in onto.rules:
                raise OntologyError(
                    f"no consolidation rule for ({cid}, {category.value}, {cls!r})"
                )
    for task in onto.tasks.values():
        if task.category is not AttributeCategory.SPAN_VALIDITY:
            continue
        for cls in SPAN_VALIDITY_CLASSES:
            if (task.id, cls, False) not in onto.rules:
                raise OntologyError(f"no rule for span-validity class {cls!r}")
    # every task class is reachable from a raw class that is legal for at
    # least one of the task's concepts
    for task in onto.tasks.values():
        reachable = set()
        for (tid, raw_class, _negated), consolidated in onto.rules.items():
            if tid != task.id:
                continue
            if task.category is AttributeCategory.SPAN_VALIDITY:
                legal_somewhere = raw_class in SPAN_VALIDITY_CLASSES
            else:
                legal_somewhere = any(
                    raw_class in onto.attributes.get((cid, task.category), ())
                    for cid in task.concepts
                )
            if legal_somewhere:
                reachable.add(consolidated)
        missing = set(task.classes) - reachable
        if missing:
            raise OntologyError(f"unreachable classes in {task.id}: {sorted(missing)}")


def load_ontology(path: str) -> Ontology:
    with open(path, encoding="utf-8") as handle:
        return parse_ontology(handle.read())


_DEFAULT: Ontology | None = None


def default_ontology() -> Ontology:
    """The packaged ontology (19 concepts, 14 tasks), parsed once."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("ocuphen.data").joinpath("ontology.txt").read_text("utf-8")
        _DEFAULT = parse_ontology(text)
    return _DEFAULT
