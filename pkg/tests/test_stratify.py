"""Grouped stratification, capping, and fold rotation."""

import random
from dataclasses import dataclass

import numpy as np
import pytest

from ocuphen.stratify import (
    FoldPlan,
    StratifyError,
    build_group_labels,
    cap_per_patient,
    make_splits,
    patient_integrity_check,
    stratify,
)


@dataclass(frozen=True)
class Inst:
    patient_id: str
    payload: int = 0


class TestGroupLabels:
    def test_single_patient_two_labels(self):
        m = build_group_labels([("p1", "t", "a"), ("p1", "t", "b")])
        assert m.groups == ("p1",)
        assert m.labels == (("t", "a"), ("t", "b"))
        assert m.matrix.tolist() == [[1, 1]]

    def test_duplicates_collapse(self):
        m = build_group_labels([("p1", "t", "a")] * 5)
        assert m.matrix.tolist() == [[1]]

    def test_shared_label_column_sum(self):
        triples = [("p1", "t", "a"), ("p2", "t", "a"), ("p3", "t", "a")]
        m = build_group_labels(triples)
        assert m.matrix.sum(axis=0).tolist() == [3]

    def test_groups_and_labels_sorted(self):
        m = build_group_labels([("p2", "u", "x"), ("p1", "t", "b"), ("p1", "t", "a")])
        assert m.groups == ("p1", "p2")
        assert m.labels == (("t", "a"), ("t", "b"), ("u", "x"))

    def test_empty_rejected(self):
        with pytest.raises(StratifyError):
            build_group_labels([])


def random_matrix(rng, n_groups, n_labels):
    """Random binary presence matrix with no all-zero rows."""
    triples = []
    for g in range(n_groups):
        n = rng.randint(1, n_labels)
        for label in rng.sample(range(n_labels), n):
            triples.append((f"p{g:03d}", "t", f"c{label}"))
    return build_group_labels(triples)


def naive_split(rng, n_groups, n_folds):
    return [rng.randrange(n_folds) for _ in range(n_groups)]


def deviation(counts: np.ndarray) -> float:
    """Mean absolute distance of per-fold label counts from a perfect split."""
    target = counts.sum(axis=0, keepdims=True) / counts.shape[0]
    return float(np.abs(counts - target).mean())


class TestStratify:
    def test_single_fold_takes_everything(self):
        m = build_group_labels([(f"p{i}", "t", "a") for i in range(7)])
        plan = stratify(m, 1, seed=0)
        assert set(plan.assignment.values()) == {0}
        assert len(plan.assignment) == 7

    def test_two_disjoint_labels_split_perfectly(self):
        # 10 groups, two labels carried by 5 groups each → one per fold
        triples = [(f"p{i}", "t", "a") for i in range(5)]
        triples += [(f"q{i}", "t", "b") for i in range(5)]
        m = build_group_labels(triples)
        for seed in range(5):
            plan = stratify(m, 5, seed=seed)
            assert plan.counts.tolist() == [[1, 1]] * 5

    def test_fewer_groups_than_folds_is_allowed(self):
        m = build_group_labels([(f"p{i}", "t", "a") for i in range(4)])
        plan = stratify(m, 5, seed=1)
        assert len(plan.assignment) == 4
        assert plan.counts.sum() == 4
        assert (plan.counts.max(axis=0) - plan.counts.min(axis=0) <= 1).all()

    def test_bad_fold_count_rejected(self):
        m = build_group_labels([("p1", "t", "a")])
        with pytest.raises(StratifyError):
            stratify(m, 0)

    def test_deterministic_given_seed(self):
        rng = random.Random(13)
        m = random_matrix(rng, 40, 5)
        assert stratify(m, 5, seed=9).assignment == stratify(m, 5, seed=9).assignment

    def test_seed_changes_assignment(self):
        rng = random.Random(13)
        m = random_matrix(rng, 60, 5)
        plans = {tuple(sorted(stratify(m, 5, seed=s).assignment.items())) for s in range(6)}
        assert len(plans) > 1

    def test_totality_and_uniqueness(self):
        rng = random.Random(5)
        for _ in range(25):
            m = random_matrix(rng, rng.randint(10, 50), rng.randint(1, 6))
            plan = stratify(m, 5, seed=rng.randrange(1000))
            assert sorted(plan.assignment) == sorted(m.groups)
            assert all(0 <= f < 5 for f in plan.assignment.values())

    def test_counts_match_assignment(self):
        rng = random.Random(11)
        m = random_matrix(rng, 30, 4)
        plan = stratify(m, 5, seed=2)
        recomputed = np.zeros_like(plan.counts)
        for gi, group in enumerate(m.groups):
            recomputed[plan.assignment[group]] += m.matrix[gi]
        assert (recomputed == plan.counts).all()

    def test_rarest_label_balanced_despite_correlation(self):
        # 10 rare-label carriers that all also carry the common label,
        # plus 40 common-only groups: both labels end up balanced
        triples = []
        for i in range(10):
            triples += [(f"r{i}", "t", "rare"), (f"r{i}", "t", "common")]
        for i in range(40):
            triples.append((f"c{i}", "t", "common"))
        m = build_group_labels(triples)
        plan = stratify(m, 5, seed=3)
        by_label = dict(zip(m.labels, plan.counts.T.tolist()))
        assert by_label[("t", "rare")] == [2] * 5
        assert by_label[("t", "common")] == [10] * 5

    def test_balance_beats_naive_split_usually(self):
        rng = random.Random(99)
        wins = ties = 0
        trials = 120
        for trial in range(trials):
            m = random_matrix(rng, rng.randint(30, 80), rng.randint(2, 6))
            plan = stratify(m, 5, seed=trial)
            naive_counts = np.zeros_like(plan.counts)
            for gi, fold in enumerate(naive_split(rng, len(m.groups), 5)):
                naive_counts[fold] += m.matrix[gi]
            ours, theirs = deviation(plan.counts), deviation(naive_counts)
            wins += ours < theirs
            ties += ours == theirs
        assert (wins + ties) / trials >= 0.95

    def test_per_label_spread_is_tight_for_disjoint_label_supports(self):
        # The round-robin pass serves every fold once before revisiting any,
        # so a label whose carriers belong to no other label is dealt out
        # evenly: max-min fold counts stay within 2.  (Groups carrying
        # several labels can ride along with another label's round and
        # escape balancing, so no such bound exists for overlapping
        # supports; see test_rarest_label_balanced_despite_correlation for
        # what is guaranteed there.)
        rng = random.Random(21)
        for trial in range(50):
            n_labels = rng.randint(1, 5)
            n_groups = rng.randint(max(25, 5 * n_labels), 60)
            triples = [
                (f"p{g}", "task", f"c{rng.randrange(n_labels)}")
                for g in range(n_groups)
            ]
            plan = stratify(build_group_labels(triples), 5, seed=trial)
            spread = plan.counts.max(axis=0) - plan.counts.min(axis=0)
            assert (spread <= 2).all()


class TestCapping:
    def patients(self, sizes):
        out = []
        for pid, n in sizes.items():
            out.extend(Inst(pid, i) for i in range(n))
        return out

    def test_under_cap_untouched(self):
        instances = self.patients({"p1": 4})
        assert cap_per_patient(instances, cap=10, seed=0) == instances

    def test_over_cap_sampled_to_exactly_cap(self):
        instances = self.patients({"p1": 25})
        kept = cap_per_patient(instances, cap=10, seed=0)
        assert len(kept) == 10
        assert len({i.payload for i in kept}) == 10

    def test_same_seed_same_subset(self):
        instances = self.patients({"p1": 30, "p2": 12})
        assert cap_per_patient(instances, 10, seed=4) == cap_per_patient(
            instances, 10, seed=4
        )

    def test_order_stable(self):
        instances = self.patients({"p1": 40})
        kept = cap_per_patient(instances, 10, seed=1)
        payloads = [i.payload for i in kept]
        assert payloads == sorted(payloads)

    def test_interleaved_patients_keep_relative_order(self):
        instances = [Inst("a", 0), Inst("b", 1), Inst("a", 2), Inst("b", 3)]
        assert cap_per_patient(instances, 10, seed=0) == instances

    def test_no_patient_removed_entirely(self):
        instances = self.patients({"p1": 50, "p2": 1, "p3": 17})
        kept = cap_per_patient(instances, 10, seed=8)
        assert {i.patient_id for i in kept} == {"p1", "p2", "p3"}

    def test_cap_below_one_rejected(self):
        with pytest.raises(StratifyError):
            cap_per_patient([], cap=0)


class TestSplits:
    def plan(self, k):
        return FoldPlan(n_folds=k, assignment={}, counts=np.zeros((k, 1)), labels=(("t", "a"),), seed=0)

    def test_five_fold_rotation(self):
        splits = make_splits(self.plan(5))
        assert len(splits) == 5
        first = splits[0]
        assert (first.test_fold, first.dev_fold, first.train_folds) == (0, 1, (2, 3, 4))
        last = splits[4]
        assert (last.test_fold, last.dev_fold, last.train_folds) == (4, 0, (1, 2, 3))

    def test_parts_partition_folds(self):
        for split in make_splits(self.plan(5)):
            parts = {split.test_fold, split.dev_fold, *split.train_folds}
            assert parts == set(range(5))
            assert split.test_fold != split.dev_fold

    def test_three_folds_leaves_one_train_fold(self):
        splits = make_splits(self.plan(3))
        assert all(len(s.train_folds) == 1 for s in splits)

    def test_two_folds_rejected(self):
        with pytest.raises(StratifyError):
            make_splits(self.plan(2))


class TestIntegrity:
    def test_passes_on_honest_plan(self):
        triples = [(f"p{i}", "t", "a") for i in range(8)]
        plan = stratify(build_group_labels(triples), 4, seed=0)
        instances = [Inst(f"p{i}") for i in range(8)]
        assert patient_integrity_check(instances, plan)

    def test_fails_on_missing_patient(self):
        plan = stratify(build_group_labels([("p0", "t", "a")]), 3, seed=0)
        assert not patient_integrity_check([Inst("p-unknown")], plan)

    def test_fails_on_corrupted_fold_index(self):
        plan = stratify(build_group_labels([("p0", "t", "a")]), 3, seed=0)
        broken = FoldPlan(
            n_folds=3,
            assignment={"p0": 7},
            counts=plan.counts,
            labels=plan.labels,
            seed=0,
        )
        assert not patient_integrity_check([Inst("p0")], broken)
