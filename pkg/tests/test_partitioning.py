"""Partitioners: constraint matching, apportionment, manifests."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedukd.data import IGNORE_INDEX, SegmentationSample
from fedukd.partitioning import (
    ClientConstraint,
    PartitionMode,
    PartitionResult,
    PartitionSpec,
    apportion_counts,
    classes_present,
    partition_dataset,
    partition_label_skew,
    partition_quantity_skew,
)


def sample_with_classes(sample_id: str, classes: set[int], size: int = 8) -> SegmentationSample:
    mask = np.zeros((size, size), dtype=np.uint8)
    for offset, class_id in enumerate(sorted(classes)):
        mask[offset, :] = class_id
    image = np.zeros((3, size, size), dtype=np.float32)
    return SegmentationSample(sample_id=sample_id, image=image, mask=mask)


class TestClassesPresent:
    def test_reports_mask_classes(self):
        sample = sample_with_classes("a", {0, 2, 5})
        assert classes_present(sample) == {0, 2, 5}

    def test_ignore_sentinel_excluded(self):
        mask = np.full((4, 4), IGNORE_INDEX, dtype=np.uint8)
        mask[0, 0] = 1
        sample = SegmentationSample("a", np.zeros((3, 4, 4), dtype=np.float32), mask)
        assert classes_present(sample) == {1}


class TestLabelSkew:
    def constraints(self):
        return (
            ClientConstraint(client_id=0, required_present=frozenset({1}), required_absent=frozenset({2})),
            ClientConstraint(client_id=1, required_present=frozenset({2}), required_absent=frozenset({1})),
            ClientConstraint(client_id=2, required_absent=frozenset({1, 2})),
        )

    def test_constraint_oracle_on_large_corpus(self):
        # Re-checks every assignment against the raw constraint definition,
        # computed here without the matcher.
        rng = np.random.default_rng(0)
        samples = []
        for i in range(1000):
            classes = {0}
            if rng.random() < 0.45:
                classes.add(1)
            if rng.random() < 0.45:
                classes.add(2)
            samples.append(sample_with_classes(f"s{i:04d}", classes))
        constraints = self.constraints()
        result = partition_label_skew(samples, constraints)
        by_id = {s.sample_id: classes_present(s) for s in samples}
        spec_of = {c.client_id: c for c in constraints}
        violations = 0
        for client_id, ids in result.assignments.items():
            rule = spec_of[client_id]
            for sample_id in ids:
                present = by_id[sample_id]
                if not rule.required_present <= present:
                    violations += 1
                if rule.required_absent & present:
                    violations += 1
        assert violations == 0
        assigned = [sid for ids in result.assignments.values() for sid in ids]
        assert len(assigned) == len(set(assigned))
        assert set(assigned) | set(result.unassigned) == set(by_id)
        assert not set(assigned) & set(result.unassigned)
        # samples with both classes match nobody here
        for sample_id in result.unassigned:
            assert by_id[sample_id] >= {1, 2}

    def test_first_match_order(self):
        both_match = (
            ClientConstraint(client_id=0, required_present=frozenset({1})),
            ClientConstraint(client_id=1, required_present=frozenset({1})),
        )
        samples = [sample_with_classes("only", {0, 1})]
        result = partition_label_skew(samples, both_match)
        assert result.assignments[0] == ("only",)
        assert result.assignments[1] == ()

    def test_max_count_overflow_goes_to_next_match(self):
        constraints = (
            ClientConstraint(client_id=0, required_present=frozenset({1}), max_count=1),
            ClientConstraint(client_id=1, required_present=frozenset({1})),
        )
        samples = [sample_with_classes(f"s{i}", {0, 1}) for i in range(3)]
        result = partition_label_skew(samples, constraints)
        assert len(result.assignments[0]) == 1
        assert len(result.assignments[1]) == 2

    def test_stats_count_classes(self):
        samples = [sample_with_classes("a", {0, 1}), sample_with_classes("b", {0, 1})]
        constraints = (ClientConstraint(client_id=3, required_present=frozenset({1})),)
        result = partition_label_skew(samples, constraints)
        assert result.assignments[3] == ("a", "b")
        assert result.stats[3][1] == 2

    def test_overlapping_required_sets_rejected(self):
        with pytest.raises(ValueError):
            ClientConstraint(client_id=0, required_present=frozenset({1}), required_absent=frozenset({1}))


class TestApportionment:
    def test_paper_proportions(self):
        shares = (65 / 98, 22 / 98, 11 / 98)
        assert apportion_counts(98, shares) == (65, 22, 11)

    def test_exact_thirds(self):
        assert apportion_counts(90, (1 / 3, 1 / 3, 1 / 3)) == (30, 30, 30)

    def test_remainders_go_to_largest_fractions(self):
        assert apportion_counts(10, (0.26, 0.26, 0.48)) == (3, 2, 5)

    @given(
        st.integers(min_value=0, max_value=500),
        st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=1, max_size=9),
    )
    @settings(max_examples=80, deadline=None)
    def test_sums_and_stays_within_one_of_ideal(self, total, raw):
        shares = tuple(r / math.fsum(raw) for r in raw)
        counts = apportion_counts(total, shares)
        assert sum(counts) == total
        for count, share in zip(counts, shares):
            assert abs(count - share * total) < 1.0 + 1e-9


class TestQuantitySkew:
    def make_corpus(self, n):
        return [sample_with_classes(f"s{i:03d}", {0, 1}) for i in range(n)]

    def test_paper_split_counts(self):
        samples = self.make_corpus(98)
        result = partition_quantity_skew(samples, (65 / 98, 22 / 98, 11 / 98), seed=0)
        assert result.counts == {0: 65, 1: 22, 2: 11}
        assert result.unassigned == ()

    def test_deterministic_in_seed(self):
        samples = self.make_corpus(50)
        a = partition_quantity_skew(samples, (0.5, 0.5), seed=3)
        b = partition_quantity_skew(samples, (0.5, 0.5), seed=3)
        c = partition_quantity_skew(samples, (0.5, 0.5), seed=4)
        assert a.assignments == b.assignments
        assert a.assignments != c.assignments

    def test_disjoint_and_complete(self):
        samples = self.make_corpus(33)
        result = partition_quantity_skew(samples, (0.2, 0.3, 0.5), seed=1)
        seen = [sid for ids in result.assignments.values() for sid in ids]
        assert sorted(seen) == sorted(s.sample_id for s in samples)
        assert len(seen) == len(set(seen))

    def test_more_clients_than_samples_rejected(self):
        with pytest.raises(ValueError):
            partition_quantity_skew(self.make_corpus(2), (0.25, 0.25, 0.25, 0.25), seed=0)

    def test_custom_client_ids(self):
        samples = self.make_corpus(10)
        result = partition_quantity_skew(samples, (0.5, 0.5), seed=0, client_ids=(7, 9))
        assert set(result.assignments) == {7, 9}


class TestPartitionSpec:
    def test_quantity_requires_proportions_summing_to_one(self):
        with pytest.raises(ValueError):
            PartitionSpec(mode=PartitionMode.QUANTITY_SKEW, proportions=(0.5, 0.6))

    def test_label_mode_requires_constraints(self):
        with pytest.raises(ValueError):
            PartitionSpec(mode=PartitionMode.LABEL_SKEW, constraints=())

    def test_dispatch_by_mode(self):
        samples = [sample_with_classes(f"s{i}", {0, 1}) for i in range(6)]
        label = PartitionSpec(
            mode=PartitionMode.LABEL_SKEW,
            constraints=(ClientConstraint(client_id=0, required_present=frozenset({1})),),
        )
        quantity = PartitionSpec(mode=PartitionMode.QUANTITY_SKEW, proportions=(0.5, 0.5))
        assert partition_dataset(samples, label, seed=0).counts == {0: 6}
        assert partition_dataset(samples, quantity, seed=0).counts == {0: 3, 1: 3}


class TestPartitionResult:
    def test_manifest_round_trip(self, tmp_path):
        samples = [sample_with_classes(f"s{i}", {0, 1} if i % 2 else {0}) for i in range(8)]
        constraints = (ClientConstraint(client_id=0, required_present=frozenset({1})),)
        result = partition_label_skew(samples, constraints)
        path = tmp_path / "partition_manifest.json"
        result.save_manifest(path)
        restored = PartitionResult.load_manifest(path)
        assert restored.assignments == result.assignments
        assert restored.unassigned == result.unassigned
        assert restored.stats == result.stats

    def test_manifest_has_record_per_sample(self, tmp_path):
        samples = [sample_with_classes(f"s{i}", {0, 1}) for i in range(5)]
        result = partition_quantity_skew(samples, (0.6, 0.4), seed=0)
        path = tmp_path / "m.json"
        result.save_manifest(path)
        payload = json.loads(path.read_text())
        assert len(payload["assignments"]) == 5
        clients = {record["client"] for record in payload["assignments"]}
        assert clients == {0, 1}

    def test_save_is_deterministic(self, tmp_path):
        samples = [sample_with_classes(f"s{i}", {0, 1}) for i in range(9)]
        result = partition_quantity_skew(samples, (0.4, 0.6), seed=5)
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        result.save_manifest(first)
        partition_quantity_skew(samples, (0.4, 0.6), seed=5).save_manifest(second)
        assert first.read_bytes() == second.read_bytes()

    def test_duplicate_sample_ids_rejected(self):
        with pytest.raises(ValueError):
            PartitionResult(
                assignments={0: ("a", "b"), 1: ("b",)},
                unassigned=(),
                stats={0: {}, 1: {}},
            )
