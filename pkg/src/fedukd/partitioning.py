"""Non-IID dataset partitioning.

Two skew families: label skew routes samples by which classes their
masks contain (first matching client in listing order wins), and
quantity skew splits a shuffled sample list into unequal fractions.
Both return an explicit :class:`PartitionResult` that can be saved as a
manifest and re-loaded without recomputation.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import IGNORE_INDEX, SegmentationSample
from .seeding import partition_rng


class PartitionMode(enum.Enum):
    LABEL_SKEW = "label_skew"
    QUANTITY_SKEW = "quantity_skew"


def classes_present(sample: SegmentationSample) -> frozenset[int]:
    """Class ids occurring in the sample's mask, ignore sentinel excluded."""
    values = np.unique(sample.mask)
    return frozenset(int(v) for v in values if v != IGNORE_INDEX)


@dataclass(frozen=True)
class ClientConstraint:
    """Label-skew routing rule for one client.

    A sample matches when every ``required_present`` class occurs in
    its mask and no ``required_absent`` class does.  ``max_count``
    caps how many samples the client may take.
    """

    client_id: int
    required_present: frozenset[int] = frozenset()
    required_absent: frozenset[int] = frozenset()
    max_count: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "required_present", frozenset(int(c) for c in self.required_present))
        object.__setattr__(self, "required_absent", frozenset(int(c) for c in self.required_absent))
        if self.client_id < 0:
            raise ValueError(f"client_id must be >= 0, got {self.client_id}")
        overlap = self.required_present & self.required_absent
        if overlap:
            raise ValueError(
                f"client {self.client_id}: classes {sorted(overlap)} both required and forbidden"
            )
        if any(c < 0 for c in self.required_present | self.required_absent):
            raise ValueError(f"client {self.client_id}: negative class id in constraint")
        if self.max_count is not None and self.max_count < 1:
            raise ValueError(f"client {self.client_id}: max_count must be >= 1 or None")

    def matches(self, present: frozenset[int]) -> bool:
        return self.required_present <= present and not (self.required_absent & present)


@dataclass(frozen=True)
class PartitionSpec:
    """Config-facing description of one partitioning job."""

    mode: PartitionMode
    constraints: tuple[ClientConstraint, ...] = ()
    proportions: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.proportions is not None:
            object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if self.mode is PartitionMode.LABEL_SKEW:
            if not self.constraints:
                raise ValueError("label_skew requires at least one client constraint")
            ids = [c.client_id for c in self.constraints]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate client ids in constraints: {sorted(ids)}")
        elif self.mode is PartitionMode.QUANTITY_SKEW:
            if not self.proportions:
                raise ValueError("quantity_skew requires a proportions vector")
            _validate_proportions(self.proportions)

    @property
    def num_clients(self) -> int:
        if self.mode is PartitionMode.LABEL_SKEW:
            return len(self.constraints)
        assert self.proportions is not None
        return len(self.proportions)


def _validate_proportions(proportions: Sequence[float]) -> None:
    if any(not p > 0.0 for p in proportions):
        raise ValueError(f"proportions must all be positive, got {list(proportions)}")
    total = math.fsum(proportions)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1 (got {total!r})")


@dataclass(frozen=True)
class PartitionResult:
    """Assignment of sample ids to clients plus per-client class histograms.

    ``stats[client][class_id]`` counts the samples on that
    client whose mask contains the class.
    """

    assignments: Mapping[int, tuple[str, ...]]
    unassigned: tuple[str, ...]
    stats: Mapping[int, Mapping[int, int]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "assignments", {int(k): tuple(v) for k, v in self.assignments.items()}
        )
        object.__setattr__(self, "unassigned", tuple(self.unassigned))
        object.__setattr__(
            self,
            "stats",
            {
                int(k): {int(c): int(n) for c, n in hist.items()}
                for k, hist in self.stats.items()
            },
        )
        seen: set[str] = set()
        for ids in list(self.assignments.values()) + [self.unassigned]:
            for sample_id in ids:
                if sample_id in seen:
                    raise ValueError(f"sample {sample_id!r} assigned more than once")
                seen.add(sample_id)

    @property
    def counts(self) -> dict[int, int]:
        return {client: len(ids) for client, ids in self.assignments.items()}

    def save_manifest(self, path: str | Path) -> Path:
        """One record per sample plus the class-histogram summary block."""
        records = [
            {"sample": sample_id, "client": client}
            for client in sorted(self.assignments)
            for sample_id in self.assignments[client]
        ]
        records.extend({"sample": sample_id, "client": "unassigned"} for sample_id in self.unassigned)
        payload = {
            "assignments": records,
            "stats": {
                str(client): {str(c): n for c, n in sorted(hist.items())}
                for client, hist in sorted(self.stats.items())
            },
        }
        path = Path(path)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load_manifest(cls, path: str | Path) -> "PartitionResult":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        assignments: dict[int, list[str]] = {}
        unassigned: list[str] = []
        for record in payload["assignments"]:
            if record["client"] == "unassigned":
                unassigned.append(record["sample"])
            else:
                assignments.setdefault(int(record["client"]), []).append(record["sample"])
        histograms = {
            int(client): {int(c): int(n) for c, n in hist.items()}
            for client, hist in payload["stats"].items()
        }
        for client in histograms:
            assignments.setdefault(client, [])
        return cls(
            assignments={k: tuple(v) for k, v in assignments.items()},
            unassigned=tuple(unassigned),
            stats=histograms,
        )


def _histograms(
    assignments: Mapping[int, Sequence[str]], presence: Mapping[str, frozenset[int]]
) -> dict[int, dict[int, int]]:
    out: dict[int, dict[int, int]] = {}
    for client, ids in assignments.items():
        hist: dict[int, int] = {}
        for sample_id in ids:
            for class_id in presence[sample_id]:
                hist[class_id] = hist.get(class_id, 0) + 1
        out[client] = hist
    return out


def partition_label_skew(
    samples: Sequence[SegmentationSample], constraints: Sequence[ClientConstraint]
) -> PartitionResult:
    """Route each sample to the first constraint it satisfies.

    Constraint listing order is the priority order; samples matching no
    client (or only full clients) land in ``unassigned``.  Deterministic
    given the sample order.
    """
    if not constraints:
        raise ValueError("at least one client constraint is required")
    ids = [c.client_id for c in constraints]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {sorted(ids)}")
    assignments: dict[int, list[str]] = {c.client_id: [] for c in constraints}
    unassigned: list[str] = []
    presence: dict[str, frozenset[int]] = {}
    for sample in samples:
        present = classes_present(sample)
        presence[sample.sample_id] = present
        for constraint in constraints:
            if constraint.max_count is not None and len(assignments[constraint.client_id]) >= constraint.max_count:
                continue
            if constraint.matches(present):
                assignments[constraint.client_id].append(sample.sample_id)
                break
        else:
            unassigned.append(sample.sample_id)
    return PartitionResult(
        assignments={k: tuple(v) for k, v in assignments.items()},
        unassigned=tuple(unassigned),
        stats=_histograms(assignments, presence),
    )


def apportion_counts(total: int, proportions: Sequence[float]) -> tuple[int, ...]:
    """Integer counts for each proportion, summing exactly to ``total``.

    Largest-remainder rounding: floor everything, then hand the leftover
    units to the largest fractional parts (ties to the lower index).
    Every count stays within one unit of its exact share.
    """
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    _validate_proportions(proportions)
    raw = [p * total for p in proportions]
    base = [math.floor(r) for r in raw]
    leftover = total - sum(base)
    order = sorted(range(len(proportions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return tuple(base)


def partition_quantity_skew(
    samples: Sequence[SegmentationSample],
    proportions: Sequence[float],
    seed: int,
    *,
    client_ids: Sequence[int] | None = None,
) -> PartitionResult:
    """Split a shuffled sample list into the given fractions.

    The shuffle is a pure function of ``seed``; counts come from
    :func:`apportion_counts`, so each client receives within one sample
    of its exact share and every sample is assigned.
    """
    if client_ids is None:
        client_ids = list(range(len(proportions)))
    if len(client_ids) != len(proportions):
        raise ValueError(
            f"{len(client_ids)} client ids for {len(proportions)} proportions"
        )
    if len(set(client_ids)) != len(client_ids):
        raise ValueError(f"duplicate client ids: {sorted(client_ids)}")
    if len(proportions) > len(samples):
        raise ValueError(
            f"more clients ({len(proportions)}) than samples ({len(samples)})"
        )
    counts = apportion_counts(len(samples), proportions)
    perm = partition_rng(seed).permutation(len(samples))
    shuffled = [samples[int(i)].sample_id for i in perm]
    presence = {s.sample_id: classes_present(s) for s in samples}
    assignments: dict[int, tuple[str, ...]] = {}
    cursor = 0
    for client, count in zip(client_ids, counts):
        assignments[int(client)] = tuple(shuffled[cursor : cursor + count])
        cursor += count
    return PartitionResult(
        assignments=assignments,
        unassigned=(),
        stats=_histograms(assignments, presence),
    )


def partition_dataset(
    samples: Sequence[SegmentationSample], spec: PartitionSpec, seed: int
) -> PartitionResult:
    """Dispatch on the spec's mode."""
    if spec.mode is PartitionMode.LABEL_SKEW:
        return partition_label_skew(samples, spec.constraints)
    assert spec.proportions is not None
    return partition_quantity_skew(samples, spec.proportions, seed)
