"""Per-commit pipeline: build -> fingerprint/select -> minimize -> fuzz -> merge -> log.

The coordinator runs on a virtual clock taken from commit timestamps: a
commit arrives at its timestamp, a job occupies the clock for its campaign
durations, and in ``interrupt`` mode an arrival during a job cancels the
job at the arrival instant (campaigns already started keep and merge what
they found up to then). Mock campaigns cost no wall time; external
backends run for real for the (possibly truncated) duration.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from fuzzci.campaign import Backend, CampaignResult, run_campaign
from fuzzci.commits import CommitRecord
from fuzzci.corpus import Corpus, CorpusStore, minimize
from fuzzci.fingerprint import (
    BuildTarget,
    CheckoutError,
    FingerprintCache,
    ScrubRuleset,
    TargetArtifact,
    build_targets,
    checkout,
    fingerprint,
)
from fuzzci.model import MockModel
from fuzzci.scheduler import Job, JobLog, QueuedCommit, QueueMode, Scheduler, SnapshotSchedule, allocate_cores

log = logging.getLogger(__name__)


class Builder(Protocol):
    targets: Sequence[str]

    def build(self, commit: CommitRecord) -> list[TargetArtifact]: ...


@dataclass
class RepoBuilder:
    """Checks each commit out into a fresh directory and runs the build plan.

    With ``install_dir`` set, every successful build is copied to
    ``install_dir/<target>`` so external fuzzers can run it after the
    checkout is gone; a failed build leaves the previous binary in place.
    """

    repo: Path
    plan: Sequence[BuildTarget]
    workroot: str | None = None
    keep: bool = False
    install_dir: Path | None = None

    @property
    def targets(self) -> list[str]:
        return [b.name for b in self.plan]

    def build(self, commit: CommitRecord) -> list[TargetArtifact]:
        work = Path(tempfile.mkdtemp(prefix=f"fuzzci-build-{commit.id[:12]}-", dir=self.workroot))
        try:
            checkout(self.repo, commit.id, work)
            artifacts = build_targets(commit, self.plan, work)
            if self.install_dir is not None:
                self._install(artifacts)
            return artifacts
        finally:
            if not self.keep:
                shutil.rmtree(work, ignore_errors=True)

    def _install(self, artifacts: Sequence[TargetArtifact]) -> None:
        self.install_dir.mkdir(parents=True, exist_ok=True)
        for art in artifacts:
            if art.build_ok:
                tmp = self.install_dir / f".{art.target_name}.tmp"
                tmp.write_bytes(art.data)
                tmp.chmod(0o755)
                os.replace(tmp, self.install_dir / art.target_name)


@dataclass
class SyntheticBuilder:
    """Stand-in build for synthetic streams.

    A target's bytes are determined by the versions of the files matching
    its source globs; optionally the commit time and id are embedded the way
    real projects embed build metadata.
    """

    sources: Mapping[str, Sequence[str]]
    embed_metadata: bool = True
    versions: dict[str, int] = field(default_factory=dict)

    @property
    def targets(self) -> list[str]:
        return sorted(self.sources)

    def replay(self, commit: CommitRecord) -> None:
        """Advance file versions past a commit processed in an earlier run."""
        for f in commit.changed_files:
            self.versions[f.path] = self.versions.get(f.path, 0) + 1

    def build(self, commit: CommitRecord) -> list[TargetArtifact]:
        self.replay(commit)
        out = []
        for name in self.targets:
            lines = [f"TARGET {name}"]
            for path in sorted(self.versions):
                if any(fnmatch.fnmatch(path, pat) for pat in self.sources[name]):
                    lines.append(f"{path}@{self.versions[path]}")
            if self.embed_metadata:
                stamp = datetime.fromtimestamp(commit.timestamp, tz=timezone.utc).isoformat()
                lines.append(f"built {stamp} from {commit.id}")
            out.append(TargetArtifact(name, commit.id, ("\n".join(lines) + "\n").encode()))
        return out


@dataclass
class RunSummary:
    commits_seen: int = 0
    commits_unprocessable: int = 0
    jobs: int = 0
    campaigns: int = 0
    campaigns_skipped: int = 0
    cancellations: int = 0
    snapshots: int = 0
    stopped_early: bool = False

    @property
    def exit_code(self) -> int:
        return 2 if self.commits_unprocessable else 0


class Coordinator:
    def __init__(
        self,
        scheduler: Scheduler,
        builder: Builder,
        backends: Mapping[str, Backend],
        state_dir: str | Path,
        rules: ScrubRuleset = ScrubRuleset.default(),
        digest: str = "sha256",
        snapshot: SnapshotSchedule | None = None,
        seed_model: MockModel | None = None,
    ):
        self.scheduler = scheduler
        self.builder = builder
        self.backends = backends
        self.rules = rules
        self.ruleset_hash = rules.ruleset_hash()
        self.digest = digest
        self.snapshot = snapshot
        self.seed_model = seed_model
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.corpora = CorpusStore(self.state_dir / "corpus")
        self.job_log = JobLog(self.state_dir / "job_log.jsonl")
        self.cache = FingerprintCache(self.state_dir / "fingerprints.tsv", digest)
        self.stop_requested = False
        self.summary = RunSummary()
        self.now: float | None = None
        self._processed: set[str] = set()
        self._latest: QueuedCommit | None = None
        self._snap_mark: float | None = None
        self._load_state()

    # --- persistence ---

    @property
    def _state_path(self) -> Path:
        return self.state_dir / "state.json"

    def _load_state(self) -> None:
        if not self._state_path.exists():
            return
        state = json.loads(self._state_path.read_text(encoding="utf-8"))
        if state.get("ruleset") == self.ruleset_hash and state.get("digest") == self.digest:
            self.scheduler.baseline.update(state.get("baseline", {}))
            self.scheduler.last_built.update(state.get("last_built", {}))
        self._processed = set(state.get("processed", []))
        self.now = state.get("clock")

    def flush(self) -> None:
        state = {
            "baseline": dict(sorted(self.scheduler.baseline.items())),
            "last_built": dict(sorted(self.scheduler.last_built.items())),
            "processed": sorted(self._processed),
            "ruleset": self.ruleset_hash,
            "digest": self.digest,
            "clock": self.now,
        }
        tmp = self._state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=1, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self._state_path)

    # --- stages ---

    def _fingerprint_commit(self, commit: CommitRecord) -> QueuedCommit | None:
        cached = {t: self.cache.get(commit.id, t, self.ruleset_hash) for t in self.builder.targets}
        if all(v is not None for v in cached.values()) and not isinstance(self.builder, SyntheticBuilder):
            digests = {t: d for t, d in cached.items() if d is not None}
            unbuildable: list[str] = []
        else:
            try:
                artifacts = self.builder.build(commit)
            except CheckoutError as exc:
                self.summary.commits_unprocessable += 1
                self.job_log.write("unprocessable", commit_id=commit.id, reason=str(exc))
                return None
            digests, unbuildable = {}, []
            for art in artifacts:
                if art.build_ok:
                    fp = fingerprint(art, self.rules, self.digest)
                    self.cache.append(fp, self.ruleset_hash)
                    digests[art.target_name] = fp.digest
                else:
                    unbuildable.append(art.target_name)
        for t in self.builder.targets:
            self.job_log.write(
                "fingerprint", commit_id=commit.id, target=t, digest=digests.get(t), build_ok=t in digests
            )
        return QueuedCommit(commit, digests, frozenset(unbuildable))

    def _arrive(self, commit: CommitRecord) -> None:
        self.summary.commits_seen += 1
        queued = self._fingerprint_commit(commit)
        if queued is None:
            return
        self.scheduler.enqueue(commit, queued.fingerprints, queued.unbuildable)
        self._latest = self.scheduler.queue[-1]

    def _seed_corpus(self, target: str) -> Corpus:
        corpus = self.corpora.load(target)
        if not len(corpus) and self.seed_model is not None:
            corpus = self.seed_model.initial_corpus(target)
        return minimize(corpus)

    def _execute(self, job: Job, start: float, cancel_at: float | None) -> list[str]:
        """Run a job's campaigns from ``start``; returns targets whose baseline may advance."""
        self.summary.jobs += 1
        decision = job.decision
        slots = allocate_cores(job.campaigns, self.scheduler.budget)
        window = {s.spec.target_name: (start + s.start, start + s.end) for s in slots}
        for t, d in sorted(decision.per_target.items()):
            begin, end = window.get(t, (start, start))
            if cancel_at is not None:
                begin, end = min(begin, cancel_at), min(end, cancel_at)
            self.job_log.write(
                "decision",
                commit_id=job.commit_id,
                target=t,
                library=self.scheduler.library,
                decision=d.value,
                reason=decision.reason[t],
                priority=job.priority.level.label,
                duration=job.priority.duration,
                coalesced=list(job.coalesced),
                snapshot=job.snapshot,
                start=begin,
                end=end,
            )
            if d.value == "skip":
                self.summary.campaigns_skipped += 1
        fuzzed = []
        for slot in slots:
            spec = slot.spec
            begin, end = start + slot.start, start + slot.end
            interrupted = cancel_at is not None and cancel_at < end
            if interrupted and cancel_at <= begin:
                self.summary.cancellations += 1
                self.job_log.write(
                    "cancel", commit_id=job.commit_id, target=spec.target_name, start=begin, end=cancel_at, merged=False
                )
                continue
            stop = cancel_at if interrupted else end
            with self.corpora.lock(spec.target_name):
                spec = replace(spec, duration=stop - begin, seed_corpus=self._seed_corpus(spec.target_name))
                result = run_campaign(spec, self.backends)
                self.corpora.save(result.corpus)
            self.summary.campaigns += 1
            self._log_campaign(job, result, begin, stop, interrupted)
            fuzzed.append(spec.target_name)
        return fuzzed

    def _log_campaign(self, job: Job, result: CampaignResult, begin: float, stop: float, interrupted: bool) -> None:
        spec = result.spec
        if interrupted:
            self.summary.cancellations += 1
            self.job_log.write(
                "cancel", commit_id=job.commit_id, target=spec.target_name, start=begin, end=stop, merged=True
            )
        self.job_log.write(
            "campaign",
            commit_id=job.commit_id,
            target=spec.target_name,
            decision="fuzz",
            priority=job.priority.level.label,
            duration=spec.duration,
            start=begin,
            end=stop,
            interrupted=interrupted,
            snapshot=job.snapshot,
            backends=list(spec.backends),
            reached=sorted(result.reached),
            triggered=sorted(result.triggered),
            detected=sorted(result.detected),
            new_inputs=len(result.new_inputs),
            corpus_size=len(result.corpus) if result.corpus is not None else 0,
            errors=result.errors,
        )

    def _finish(self, job: Job, fuzzed: Iterable[str]) -> None:
        self.scheduler.complete(job, fuzzed)
        self._processed.update(job.coalesced)
        self.flush()

    def _job_span(self, job: Job) -> float:
        slots = allocate_cores(job.campaigns, self.scheduler.budget)
        return max((s.end for s in slots), default=0.0)

    def _run_snapshots(self, until: float) -> None:
        """Run calendar firings in (mark, until]; each starts once the workers are free."""
        if self.snapshot is None or self._latest is None or self.now is None:
            return
        if self._snap_mark is None:
            self._snap_mark = self.now
        mark = self._snap_mark
        if until <= mark:
            return
        for t in list(self.snapshot.occurrences(mark, until)):
            job = self.scheduler.snapshot_job(self._latest, self.snapshot.duration)
            start = max(self.now, t)
            self.summary.snapshots += 1
            self.job_log.write("snapshot", commit_id=job.commit_id, fired=t, start=start, targets=len(job.campaigns))
            fuzzed = self._execute(job, start, None)
            self._finish(job, fuzzed)
            self.now = start + self._job_span(job)
        self._snap_mark = until

    # --- main loop ---

    def process(self, stream: Iterable[CommitRecord]) -> RunSummary:
        pending = []
        for c in stream:
            if c.id not in self._processed:
                pending.append(c)
            elif isinstance(self.builder, SyntheticBuilder):
                self.builder.replay(c)
        i = 0
        try:
            while (i < len(pending) or len(self.scheduler)) and not self.stop_requested:
                if not len(self.scheduler):
                    arrival = float(pending[i].timestamp)
                    self._run_snapshots(arrival)
                    self.now = arrival if self.now is None else max(self.now, arrival)
                    while i < len(pending) and pending[i].timestamp <= self.now:
                        self._arrive(pending[i])
                        i += 1
                    continue
                self._run_snapshots(self.now)
                job = self.scheduler.next_job()
                assert job is not None
                span = self._job_span(job)
                end = self.now + span
                cancel_at = None
                if (
                    self.scheduler.policy.mode is QueueMode.INTERRUPT
                    and i < len(pending)
                    and self.now < pending[i].timestamp < end
                ):
                    cancel_at = float(pending[i].timestamp)
                fuzzed = self._execute(job, self.now, cancel_at)
                self._finish(job, fuzzed)
                self.now = cancel_at if cancel_at is not None else end
                while i < len(pending) and pending[i].timestamp <= self.now and not self.stop_requested:
                    self._arrive(pending[i])
                    i += 1
        finally:
            self.summary.stopped_early = self.stop_requested
            self.flush()
        return self.summary
