"""Majority baseline conditioned jointly on concept and span text.

Prediction backs off through four cases: counts for the exact
(concept, span text) pair, then for the concept alone, then for the span
text alone (across concepts), and finally the task-global majority. Ties are
broken by the task's canonical class order (first listed wins). Span text is
normalized (case-folded, whitespace collapsed) before keying.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence


class BaselineError(ValueError):
    pass


def normalize_span_text(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass
class _TaskCounts:
    classes: tuple[str, ...]
    joint: dict[tuple[str, str], Counter] = field(default_factory=dict)
    by_concept: dict[str, Counter] = field(default_factory=dict)
    by_span: dict[str, Counter] = field(default_factory=dict)
    overall: Counter = field(default_factory=Counter)

    def add(self, concept: str, span_key: str, cls: str) -> None:
        self.joint.setdefault((concept, span_key), Counter())[cls] += 1
        self.by_concept.setdefault(concept, Counter())[cls] += 1
        self.by_span.setdefault(span_key, Counter())[cls] += 1
        self.overall[cls] += 1

    def argmax(self, counter: Counter) -> str:
        best = max(counter.values())
        for cls in self.classes:
            if counter.get(cls, 0) == best:
                return cls
        # counts can only hold known classes, checked at fit time
        raise AssertionError("unreachable: counts outside the class order")


@dataclass(frozen=True)
class MajorityModel:
    tasks: dict[str, _TaskCounts]

    def predict(self, concept: str, span_text: str, task: str) -> str:
        """Most frequent training class, backing off joint → concept →
        span text → task-global."""
        counts = self.tasks.get(task)
        if counts is None:
            raise BaselineError(f"no training instances for task {task!r}")
        span_key = normalize_span_text(span_text)
        for table in (
            counts.joint.get((concept, span_key)),
            counts.by_concept.get(concept),
            counts.by_span.get(span_key),
            counts.overall,
        ):
            if table:
                return counts.argmax(table)
        raise AssertionError("unreachable: fitted task with empty tables")


def fit_majority(
    train: Sequence[tuple[str, str, str, str]],
    task_classes: Mapping[str, Sequence[str]] | None = None,
) -> MajorityModel:
    """Count (concept, span_text, task, class) instances into a model.

    ``task_classes`` fixes each task's canonical class order for tie
    breaking; by default it comes from the packaged label ontology. Tasks
    absent from the training data raise at prediction time, not here.
    """
    if not train:
        raise BaselineError("no training instances")
    if task_classes is None:
        from .ontology import default_ontology

        task_classes = {t.id: t.classes for t in default_ontology().task_list}
    tasks: dict[str, _TaskCounts] = {}
    for concept, span_text, task, cls in train:
        if task not in task_classes:
            raise BaselineError(f"unknown task {task!r}")
        if cls not in task_classes[task]:
            raise BaselineError(f"{cls!r} is not a class of task {task!r}")
        counts = tasks.setdefault(task, _TaskCounts(tuple(task_classes[task])))
        counts.add(concept, normalize_span_text(span_text), cls)
    return MajorityModel(tasks=tasks)
