"""Splitting a backbone into ordered sub-networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .exceptions import PartitionError
from .specs import NetworkSpec


@dataclass(frozen=True)
class Partition:
    """K contiguous groups of backbone layer indices, stored as ``(start, stop)`` ranges."""

    groups: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple((int(a), int(b)) for a, b in self.groups))

    @property
    def k(self) -> int:
        return len(self.groups)

    def sizes(self) -> list[int]:
        return [b - a for a, b in self.groups]

    def live_layers(self, stage: int) -> int:
        """Number of backbone layers live when the first ``stage`` groups are in."""
        return self.groups[stage - 1][1] if stage else 0

    def indices(self, group: int) -> range:
        a, b = self.groups[group]
        return range(a, b)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Partition":
        groups, start = [], 0
        for s in sizes:
            groups.append((start, start + int(s)))
            start += int(s)
        return cls(tuple(groups))


def partition_by_filter_groups(spec: NetworkSpec) -> Partition:
    """Group consecutive trainable layers of equal width.

    A max-pooling layer also closes the current run, so two equal-width blocks
    separated by downsampling stay separate. Non-trainable layers join the
    group of the nearest preceding trainable layer; any that precede the first
    trainable layer join the first group.
    """
    if not spec.backbone:
        raise PartitionError("cannot partition an empty backbone")
    boundaries = []
    prev = None
    pooled = False
    for i, layer in enumerate(spec.backbone):
        if layer.kind == "maxpool2d":
            pooled = prev is not None
        if not layer.trainable:
            continue
        key = (layer.kind, layer.width)
        if prev is not None and (key != prev or pooled):
            boundaries.append(i)
        prev = key
        pooled = False
    if prev is None:
        raise PartitionError("backbone has no trainable layer")
    starts = [0] + boundaries
    stops = boundaries + [len(spec.backbone)]
    return Partition(tuple(zip(starts, stops)))


def validate_partition(spec: NetworkSpec, partition: Partition) -> list[str]:
    """Every violated invariant, as human-readable messages (empty when valid).

    Groups are reported 1-based.
    """
    n = len(spec.backbone)
    violations = []
    if partition.k == 0:
        return ["partition has no groups"]
    if partition.k > n:
        violations.append(f"K={partition.k} exceeds backbone layer count {n}")
    seen: dict[int, int] = {}
    for g, (a, b) in enumerate(partition.groups, start=1):
        if b <= a:
            violations.append(f"group {g} is empty")
            continue
        for i in range(a, b):
            if i >= n:
                violations.append(f"group {g} references layer {i} outside the backbone (classifier)")
            elif i in seen:
                violations.append(f"layer {i} assigned to groups {seen[i]} and {g}")
            else:
                seen[i] = g
        if not any(spec.backbone[i].trainable for i in range(a, min(b, n))):
            violations.append(f"no trainable layer in group {g}")
    prev_stop = 0
    for g, (a, b) in enumerate(partition.groups, start=1):
        if a < prev_stop:
            violations.append(f"group {g} is out of order")
        prev_stop = max(prev_stop, b)
    for i in range(n):
        if i not in seen:
            violations.append(f"layer {i} unassigned")
    return violations


def check_partition(spec: NetworkSpec, partition: Partition) -> Partition:
    problems = validate_partition(spec, partition)
    if problems:
        raise PartitionError("invalid partition: " + "; ".join(problems))
    return partition
