"""Patient-grouped multi-label stratified folds, capping, and fold rotation.

Folds are assigned greedily, rarest label first: at each step the label with
the fewest remaining unassigned patients is selected, folds are visited in
ascending order of how much of that label they already hold, and each fold
receives one uniformly sampled eligible patient. Capping limits any single
patient's instance count before statistics are computed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from operator import attrgetter

import numpy as np


class StratifyError(ValueError):
    pass


@dataclass(frozen=True)
class GroupLabelMatrix:
    """Binary presence of each (task, class) label per patient group."""

    groups: tuple[str, ...]
    labels: tuple[tuple[str, str], ...]
    matrix: np.ndarray  # [len(groups), len(labels)], 0/1

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.groups), len(self.labels)):
            raise StratifyError("matrix shape does not match groups × labels")


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignment: dict[str, int]  # patient id -> fold
    counts: np.ndarray  # [n_folds, n_labels]
    labels: tuple[tuple[str, str], ...]
    seed: int


@dataclass(frozen=True)
class FoldSplit:
    test_fold: int
    dev_fold: int
    train_folds: tuple[int, ...]


def build_group_labels(
    instances: list[tuple[str, str, str]],
) -> GroupLabelMatrix:
    """Presence matrix from (patient_id, task, class) triples.

    Groups and label columns are sorted; duplicate triples collapse.
    """
    if not instances:
        raise StratifyError("no instances to stratify")
    groups = tuple(sorted({patient for patient, _t, _c in instances}))
    labels = tuple(sorted({(task, cls) for _p, task, cls in instances}))
    group_index = {g: i for i, g in enumerate(groups)}
    label_index = {l: i for i, l in enumerate(labels)}
    matrix = np.zeros((len(groups), len(labels)), dtype=np.int64)
    for patient, task, cls in instances:
        matrix[group_index[patient], label_index[(task, cls)]] = 1
    return GroupLabelMatrix(groups=groups, labels=labels, matrix=matrix)


def stratify(m: GroupLabelMatrix, n_folds: int, seed: int = 0) -> FoldPlan:
    """Greedy rarest-label-first fold assignment.

    Each round picks the label with the fewest unassigned carriers (ties:
    first label column), sorts folds by (count of that label, total count,
    fold index), and hands each fold one seeded-uniform eligible patient;
    when eligible patients run out mid-round the round ends early.
    """
    if n_folds < 1:
        raise StratifyError("fold count must be at least 1")
    rng = random.Random(seed)
    n_groups, n_labels = m.matrix.shape
    unassigned = list(range(n_groups))
    assignment: dict[str, int] = {}
    counts = np.zeros((n_folds, n_labels), dtype=np.int64)
    while unassigned:
        remaining = m.matrix[unassigned].sum(axis=0)
        positive = np.flatnonzero(remaining > 0)
        target = int(positive[np.argmin(remaining[positive])])
        fold_order = sorted(
            range(n_folds), key=lambda k: (counts[k, target], counts[k].sum(), k)
        )
        for fold in fold_order:
            eligible = [g for g in unassigned if m.matrix[g, target]]
            if not eligible:
                break
            group = eligible[rng.randrange(len(eligible))]
            unassigned.remove(group)
            assignment[m.groups[group]] = fold
            counts[fold] += m.matrix[group]
    return FoldPlan(
        n_folds=n_folds,
        assignment=assignment,
        counts=counts,
        labels=m.labels,
        seed=seed,
    )


def cap_per_patient(instances: list, cap: int = 10, seed: int = 0, key=None) -> list:
    """Keep at most ``cap`` instances per patient, via a seeded uniform
    sample that preserves the original instance order."""
    if cap < 1:
        raise StratifyError("cap must be at least 1")
    key = key or attrgetter("patient_id")
    rng = random.Random(seed)
    by_patient: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        by_patient.setdefault(key(inst), []).append(i)
    keep: set[int] = set()
    for patient in sorted(by_patient):
        indices = by_patient[patient]
        if len(indices) <= cap:
            keep.update(indices)
        else:
            keep.update(rng.sample(indices, cap))
    return [inst for i, inst in enumerate(instances) if i in keep]


def make_splits(plan: FoldPlan) -> list[FoldSplit]:
    """Rotate test/dev/train across folds: test=k, dev=k+1, train=rest."""
    if plan.n_folds < 3:
        raise StratifyError("fold rotation needs at least 3 folds")
    splits = []
    for k in range(plan.n_folds):
        dev = (k + 1) % plan.n_folds
        train = tuple(f for f in range(plan.n_folds) if f not in (k, dev))
        splits.append(FoldSplit(test_fold=k, dev_fold=dev, train_folds=train))
    return splits


def patient_integrity_check(instances: list, plan: FoldPlan, key=None) -> bool:
    """True when every instance's patient has exactly one in-range fold."""
    key = key or attrgetter("patient_id")
    return all(
        key(inst) in plan.assignment
        and 0 <= plan.assignment[key(inst)] < plan.n_folds
        for inst in instances
    )
