"""Fuzz/skip decisions per target and the resource-savings statistics."""

from __future__ import annotations

import enum
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from fuzzci.fingerprint import ChangeSet, ChangeStatus


class SelectionError(ValueError):
    pass


class Decision(str, enum.Enum):
    FUZZ = "fuzz"
    SKIP = "skip"
    ERROR = "error"


class ErrorPolicy(str, enum.Enum):
    FUZZ_ANYWAY = "fuzz_anyway"
    SKIP_AND_FLAG = "skip_and_flag"


@dataclass(frozen=True)
class SelectionPolicy:
    skip_identical: bool = True
    error_policy: ErrorPolicy = ErrorPolicy.FUZZ_ANYWAY


@dataclass(frozen=True)
class SelectionDecision:
    commit_id: str
    per_target: dict[str, Decision]
    # the ChangeStatus value that drove each decision
    reason: dict[str, str]
    library: str = "default"

    def targets(self, decision: Decision) -> list[str]:
        return sorted(t for t, d in self.per_target.items() if d is decision)

    def cores_saved(self, ensemble_size: int = 3) -> int:
        """Cores not needed because skipped targets start no ensemble."""
        return ensemble_size * len(self.targets(Decision.SKIP))


def decide(changeset: ChangeSet, policy: SelectionPolicy = SelectionPolicy(), library: str = "default") -> SelectionDecision:
    per_target: dict[str, Decision] = {}
    reason: dict[str, str] = {}
    for target, status in sorted(changeset.status.items()):
        if status is ChangeStatus.REMOVED:
            continue
        reason[target] = status.value
        if not policy.skip_identical:
            per_target[target] = Decision.FUZZ
        elif status is ChangeStatus.IDENTICAL:
            per_target[target] = Decision.SKIP
        elif status is ChangeStatus.UNBUILDABLE:
            per_target[target] = (
                Decision.FUZZ if policy.error_policy is ErrorPolicy.FUZZ_ANYWAY else Decision.ERROR
            )
        else:
            per_target[target] = Decision.FUZZ
    return SelectionDecision(changeset.commit_id, per_target, reason, library)


@dataclass(frozen=True)
class LibraryStats:
    name: str
    commits_processed: int
    harnesses: int
    identical_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.identical_fraction <= 1.0:
            raise SelectionError(f"identical fraction out of range for {self.name}")


@dataclass(frozen=True)
class SelectionStats:
    per_library: tuple[LibraryStats, ...]
    weighted_mean: float
    # library -> {per-commit identical fraction (rounded to 1e-6): commit count}
    per_commit_distribution: dict[str, dict[float, int]] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Iterable[LibraryStats], distribution: Mapping[str, dict[float, int]] | None = None) -> SelectionStats:
        rows = tuple(rows)
        if not rows:
            raise SelectionError("no libraries")
        return cls(rows, weighted_mean(rows), dict(distribution or {}))

    def library(self, name: str) -> LibraryStats:
        for row in self.per_library:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "per_library": [
                {
                    "name": r.name,
                    "commits_processed": r.commits_processed,
                    "harnesses": r.harnesses,
                    "identical_fraction": r.identical_fraction,
                }
                for r in self.per_library
            ],
            "weighted_mean": self.weighted_mean,
            "per_commit_distribution": {
                lib: [[frac, n] for frac, n in sorted(hist.items())]
                for lib, hist in sorted(self.per_commit_distribution.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> SelectionStats:
        rows = tuple(LibraryStats(**r) for r in data["per_library"])
        dist = {lib: {float(f): int(n) for f, n in pairs} for lib, pairs in data["per_commit_distribution"].items()}
        return cls(rows, float(data["weighted_mean"]), dist)


def weighted_mean(rows: Iterable[LibraryStats]) -> float:
    """Commit-weighted mean of per-library identical fractions."""
    rows = list(rows)
    total = sum(r.commits_processed for r in rows)
    if total == 0:
        raise SelectionError("no commits processed")
    return sum(r.commits_processed * r.identical_fraction for r in rows) / total


def accumulate(decisions: Iterable[SelectionDecision], grouping: Mapping[str, str] | None = None) -> SelectionStats:
    """Fold decisions into per-library statistics.

    A library's identical fraction is taken over (commit, target) pairs; the
    overall mean weights libraries by commits processed. ``grouping`` maps
    commit ids to library labels and overrides ``decision.library``.
    """
    pairs = defaultdict(lambda: [0, 0])  # library -> [identical pairs, all pairs]
    commits: Counter[str] = Counter()
    harnesses: dict[str, set[str]] = defaultdict(set)
    hist: dict[str, Counter[float]] = defaultdict(Counter)
    for d in decisions:
        lib = grouping.get(d.commit_id, d.library) if grouping else d.library
        if not d.reason:
            raise SelectionError(f"decision for {d.commit_id} covers no targets")
        identical = sum(1 for r in d.reason.values() if r == ChangeStatus.IDENTICAL.value)
        pairs[lib][0] += identical
        pairs[lib][1] += len(d.reason)
        commits[lib] += 1
        harnesses[lib].update(d.reason)
        hist[lib][round(identical / len(d.reason), 6)] += 1
    if not commits:
        raise SelectionError("empty decision stream")
    rows = tuple(
        LibraryStats(lib, commits[lib], len(harnesses[lib]), pairs[lib][0] / pairs[lib][1])
        for lib in sorted(commits)
    )
    return SelectionStats.from_rows(rows, {lib: dict(h) for lib, h in hist.items()})
