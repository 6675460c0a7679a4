"""Commit backlog, queue policies, priority durations and core budgeting."""

from __future__ import annotations

import enum
import json
import os
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from croniter import croniter

from fuzzci.campaign import DEFAULT_BACKENDS, CampaignSpec
from fuzzci.commits import CommitKind, CommitRecord
from fuzzci.fingerprint import ChangeSet, compare
from fuzzci.selection import Decision, SelectionDecision, SelectionPolicy, decide


class SchedulerError(ValueError):
    pass


class Level(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | Level) -> Level:
        if isinstance(value, Level):
            return value
        try:
            return cls[value.upper()]
        except KeyError:
            raise SchedulerError(f"unknown priority level {value!r}") from None


@dataclass(frozen=True)
class DurationLadder:
    """Campaign seconds per level: teatime, lunchtime, bedtime."""

    low: float = 900.0
    medium: float = 3600.0
    high: float = 28800.0

    def __post_init__(self):
        if not 0 < self.low < self.medium < self.high:
            raise SchedulerError("ladder durations must be positive and strictly increasing")

    def duration(self, level: Level) -> float:
        return (self.low, self.medium, self.high)[level]


@dataclass(frozen=True)
class PriorityLevel:
    level: Level
    duration: float


DEFAULT_CODE_EXTENSIONS = (
    ".c", ".h", ".cc", ".cpp", ".cxx", ".hh", ".hpp", ".hxx", ".inc",
    ".m", ".mm", ".rs", ".go", ".zig", ".s", ".S", ".asm", ".y", ".l",
)
DEFAULT_KEYWORDS = ("security", "parser", "overflow", "cve", "crash", "memory", "fuzz")


@dataclass(frozen=True)
class PriorityRules:
    base: Mapping[str, str] = field(
        default_factory=lambda: {"individual": "low", "group": "medium", "merge": "high"}
    )
    code_extensions: tuple[str, ...] = DEFAULT_CODE_EXTENSIONS
    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    size_threshold: int = 500
    ladder: DurationLadder = DurationLadder()

    def __post_init__(self):
        for kind in CommitKind:
            if kind.value not in self.base:
                raise SchedulerError(f"priority rules lack a base level for {kind.value}")
            Level.parse(self.base[kind.value])
        if self.size_threshold < 0:
            raise SchedulerError("size_threshold must be >= 0")


def _is_code(path: str, extensions: Sequence[str]) -> bool:
    return os.path.splitext(path)[1] in extensions


def assign_priority(commit: CommitRecord, rules: PriorityRules = PriorityRules()) -> PriorityLevel:
    """Level from commit kind, then one-step bumps; saturates at high.

    A commit that touches files but none of them code is capped at low no
    matter what else it carries.
    """
    level = int(Level.parse(rules.base[commit.kind.value]))
    paths = [f.path for f in commit.changed_files]
    code = [p for p in paths if _is_code(p, rules.code_extensions)]
    if code:
        level += 1
    message = commit.message.lower()
    if any(k.lower() in message for k in rules.keywords):
        level += 1
    if commit.size >= rules.size_threshold:
        level += 1
    level = min(level, Level.HIGH)
    if paths and not code:
        level = Level.LOW
    lvl = Level(level)
    return PriorityLevel(lvl, rules.ladder.duration(lvl))


# --- queue ---


class QueueMode(str, enum.Enum):
    PROCESS_ALL = "process_all"
    LATEST_ONLY = "latest_only"
    INTERRUPT = "interrupt"


@dataclass(frozen=True)
class QueuePolicy:
    mode: QueueMode = QueueMode.PROCESS_ALL
    selective: bool = True


@dataclass(frozen=True)
class QueuedCommit:
    commit: CommitRecord
    fingerprints: Mapping[str, str]  # target -> digest
    unbuildable: frozenset[str] = frozenset()
    # unbuildable target -> digest of its newest earlier good build (the binary fuzzed instead)
    fallback: Mapping[str, str] = field(default_factory=dict)

    def fuzzed_digest(self, target: str) -> str | None:
        return self.fingerprints.get(target, self.fallback.get(target))


@dataclass(frozen=True)
class Job:
    head: QueuedCommit
    coalesced: tuple[str, ...]  # every commit id this job accounts for, oldest first
    changeset: ChangeSet
    decision: SelectionDecision
    priority: PriorityLevel
    campaigns: tuple[CampaignSpec, ...]
    snapshot: bool = False

    @property
    def commit_id(self) -> str:
        return self.head.commit.id

    @property
    def core_demand(self) -> int:
        return sum(c.cores for c in self.campaigns)


class Scheduler:
    """Owns the backlog and the last-fuzzed baseline.

    Comparisons are always made against the fingerprints of the most
    recently fuzzed state per target rather than the previous commit, so
    coalescing commits under ``latest_only`` or ``interrupt`` cannot hide a
    change that was never fuzzed.
    """

    def __init__(
        self,
        targets: Sequence[str],
        policy: QueuePolicy = QueuePolicy(),
        selection: SelectionPolicy = SelectionPolicy(),
        rules: PriorityRules = PriorityRules(),
        backends: Sequence[str] = DEFAULT_BACKENDS,
        budget: int = 8,
        sanitizers_enabled: bool = True,
        library: str = "default",
        seed: int = 0,
        baseline: Mapping[str, str] | None = None,
    ):
        if not targets:
            raise SchedulerError("no targets configured")
        if budget < len(backends):
            raise SchedulerError(f"core budget {budget} cannot fit one ensemble of {len(backends)}")
        self.targets = tuple(targets)
        self.policy = policy
        self.selection = selection
        self.rules = rules
        self.backends = tuple(backends)
        self.budget = budget
        self.sanitizers_enabled = sanitizers_enabled
        self.library = library
        self.seed = seed
        self.queue: deque[QueuedCommit] = deque()
        self.baseline: dict[str, str] = dict(baseline or {})
        self.last_built: dict[str, str] = {}
        self._last_ts: int | None = None
        self._seen: set[str] = set()
        self._jobs = 0

    @property
    def ensemble_size(self) -> int:
        return len(self.backends)

    def enqueue(self, commit: CommitRecord, fingerprints: Mapping[str, str], unbuildable: Iterable[str] = ()) -> list[str]:
        if commit.id in self._seen:
            raise SchedulerError(f"commit {commit.id} already enqueued")
        if self._last_ts is not None and commit.timestamp < self._last_ts:
            raise SchedulerError(f"commit {commit.id} is older than the queue tail")
        self._seen.add(commit.id)
        self._last_ts = commit.timestamp
        unbuildable = frozenset(unbuildable)
        fallback = {t: self.last_built[t] for t in unbuildable if t in self.last_built}
        self.last_built.update(fingerprints)
        self.queue.append(QueuedCommit(commit, dict(fingerprints), unbuildable, fallback))
        return [q.commit.id for q in self.queue]

    def __len__(self) -> int:
        return len(self.queue)

    def should_interrupt(self) -> bool:
        return self.policy.mode is QueueMode.INTERRUPT and bool(self.queue)

    def next_job(self) -> Job | None:
        if not self.queue:
            return None
        if self.policy.mode is QueueMode.PROCESS_ALL:
            taken = [self.queue.popleft()]
        else:
            taken = list(self.queue)
            self.queue.clear()
        head = taken[-1]
        priority = max((assign_priority(q.commit, self.rules) for q in taken), key=lambda p: p.level)
        return self._make_job(head, tuple(q.commit.id for q in taken), priority, snapshot=False)

    def snapshot_job(self, head: QueuedCommit, duration: float | None = None) -> Job:
        """Fuzz every buildable target at ``head`` regardless of selection."""
        level = Level.HIGH
        priority = PriorityLevel(level, duration if duration is not None else self.rules.ladder.duration(level))
        return self._make_job(head, (), priority, snapshot=True)

    def _make_job(self, head: QueuedCommit, coalesced: tuple[str, ...], priority: PriorityLevel, snapshot: bool) -> Job:
        changeset = compare(head.fingerprints, self.baseline, head.unbuildable, head.commit.id)
        policy = self.selection
        if snapshot or not self.policy.selective:
            policy = replace(policy, skip_identical=False)
        decision = decide(changeset, policy, self.library)
        self._jobs += 1
        campaigns = tuple(
            CampaignSpec(
                target_name=t,
                commit_id=head.commit.id,
                duration=priority.duration,
                backends=self.backends,
                rng_seed=self.seed * 1_000_003 + self._jobs * 1009 + i,
                sanitizers_enabled=self.sanitizers_enabled,
            )
            for i, t in enumerate(decision.targets(Decision.FUZZ))
        )
        return Job(head, coalesced, changeset, decision, priority, campaigns, snapshot)

    def complete(self, job: Job, fuzzed: Iterable[str]) -> None:
        """Advance the baseline for targets whose campaign finished (or was
        interrupted after merging its partial corpus). A target that failed
        to build was fuzzed with its newest earlier build, if there is one."""
        for t in fuzzed:
            digest = job.head.fuzzed_digest(t)
            if digest is not None:
                self.baseline[t] = digest


# --- core allocation ---


@dataclass(frozen=True)
class Slot:
    spec: CampaignSpec
    start: float
    end: float

    @property
    def cores(self) -> int:
        return self.spec.cores


def allocate_cores(jobs: Sequence[CampaignSpec], budget: int) -> list[Slot]:
    """First-fit packing in FIFO order on ``budget`` cores.

    At every instant the pending list is scanned from the front and any
    campaign whose ensemble fits in the free cores starts.
    """
    for spec in jobs:
        if spec.cores > budget:
            raise SchedulerError(f"campaign {spec.target_name} needs {spec.cores} cores, budget is {budget}")
    pending = list(jobs)
    running: list[Slot] = []
    slots: list[Slot] = []
    now = 0.0
    while pending:
        free = budget - sum(s.cores for s in running)
        still = []
        for spec in pending:
            if spec.cores <= free:
                slot = Slot(spec, now, now + spec.duration)
                running.append(slot)
                slots.append(slot)
                free -= spec.cores
            else:
                still.append(spec)
        pending = still
        if pending:
            now = min(s.end for s in running)
            running = [s for s in running if s.end > now]
    return slots


def peak_cores(slots: Iterable[Slot]) -> int:
    events = []
    for s in slots:
        events.append((s.start, 1, s.cores))
        events.append((s.end, 0, -s.cores))  # ends sort before starts at equal times
    peak = cur = 0
    for _, _, delta in sorted(events):
        cur += delta
        peak = max(peak, cur)
    return peak


# --- snapshots ---

CALENDAR_ALIASES = {"@nightly": "0 2 * * *"}


@dataclass(frozen=True)
class SnapshotSchedule:
    calendar: str
    duration: float = 28800.0

    def occurrences(self, start: float, end: float) -> Iterator[float]:
        """Firing times t with start < t <= end (unix seconds, UTC)."""
        it = croniter(self.calendar, datetime.fromtimestamp(start, tz=timezone.utc))
        while True:
            t = it.get_next(float)
            if t > end:
                return
            yield t


def schedule_snapshot(calendar: str, duration: float = 28800.0) -> SnapshotSchedule:
    """Recurring full-target job on a cron-style calendar (5 fields or @daily-style alias)."""
    expr = CALENDAR_ALIASES.get(calendar, calendar)
    if not croniter.is_valid(expr):
        raise SchedulerError(f"invalid snapshot calendar {calendar!r}")
    if duration <= 0:
        raise SchedulerError("snapshot duration must be > 0")
    return SnapshotSchedule(expr, duration)


# --- job log ---


class JobLog:
    """Append-only JSON-lines record of scheduling events."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, event: str, **fields) -> dict:
        rec = {"event": event, **fields}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        out = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    try:
                        out.append(json.loads(line))
                    except json.JSONDecodeError:
                        continue  # torn tail after a crash
        return out
