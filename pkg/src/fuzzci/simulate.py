"""Virtual-clock duration experiments over simulated commit chains.

A trial is a chain of commits on one target. Each commit gets one ensemble
campaign; the corpus is minimized before and merged after every campaign and
carried to the next commit. The trial's bug sets are unions over the chain.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from fuzzci.campaign import DEFAULT_BACKENDS, CampaignResult, CampaignSpec, mock_registry, run_campaign
from fuzzci.corpus import minimize
from fuzzci.model import MockModel
from fuzzci.report import DurationSweepReport, TrialRecord, aggregate_sweep
from fuzzci.scheduler import SnapshotSchedule

DEFAULT_DURATIONS_MIN = (5, 10, 15, 30, 60, 120, 240, 480)
# median commits per day reported for open-source projects
COMMITS_PER_DAY = 21
SIM_EPOCH = 1_650_931_200  # a UTC midnight; chains start here


def derive_seed(*parts) -> int:
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


@dataclass(frozen=True)
class ChainOutcome:
    reached: frozenset[str]
    triggered: frozenset[str]
    detected: frozenset[str]
    campaigns: tuple[CampaignResult, ...]
    snapshots: int = 0


def simulate_chain(
    model: MockModel,
    duration: float,
    commits: int,
    seed: int,
    *,
    backends: Sequence[str] = DEFAULT_BACKENDS,
    carryover: bool = True,
    sanitizers_enabled: bool = True,
    snapshot: SnapshotSchedule | None = None,
    commit_interval_s: float = 86400 / COMMITS_PER_DAY,
    target: str | None = None,
) -> ChainOutcome:
    """Run ``commits`` consecutive campaigns of ``duration`` seconds.

    Without ``carryover`` every commit restarts from the model's initial
    seed corpus. With a ``snapshot`` calendar, commit k arrives at
    ``SIM_EPOCH + k * commit_interval_s`` and every calendar firing between
    two commits runs a full-length snapshot campaign whose findings feed
    the following commits.
    """
    registry = mock_registry(model, backends)
    target = target or model.name
    initial = model.initial_corpus(target)
    corpus = initial
    reached: set[str] = set()
    triggered: set[str] = set()
    detected: set[str] = set()
    results = []
    snapshots = 0

    def run(tag: str, dur: float) -> None:
        nonlocal corpus
        spec = CampaignSpec(
            target_name=target,
            commit_id=tag,
            duration=dur,
            backends=tuple(backends),
            seed_corpus=minimize(corpus),
            rng_seed=derive_seed(seed, tag),
            sanitizers_enabled=sanitizers_enabled,
        )
        res = run_campaign(spec, registry)
        results.append(res)
        reached.update(res.reached)
        triggered.update(res.triggered)
        detected.update(res.detected)
        corpus = res.corpus if carryover else initial

    for k in range(commits):
        if snapshot is not None and k:
            prev_t = SIM_EPOCH + (k - 1) * commit_interval_s
            for i, _ in enumerate(snapshot.occurrences(prev_t, SIM_EPOCH + k * commit_interval_s)):
                snapshots += 1
                run(f"snapshot{k}.{i}", snapshot.duration)
        run(f"commit{k}", duration)
    return ChainOutcome(frozenset(reached), frozenset(triggered), frozenset(detected), tuple(results), snapshots)


def run_sweep(
    models: Mapping[str, MockModel],
    durations_s: Iterable[float],
    trials: int = 10,
    commits_per_trial: int = 10,
    seed: int = 0,
    *,
    backends: Sequence[str] = DEFAULT_BACKENDS,
    sanitizers_enabled: bool = True,
    carryover: bool = True,
) -> DurationSweepReport:
    """Full grid of libraries x durations x trials.

    Trial t of a library uses the same seed at every duration, so duration
    comparisons share random numbers; trials use fresh corpora.
    """
    durations_s = list(durations_s)
    records = []
    for lib in sorted(models):
        for dur in durations_s:
            for t in range(trials):
                out = simulate_chain(
                    models[lib],
                    dur,
                    commits_per_trial,
                    derive_seed(seed, lib, t),
                    backends=backends,
                    carryover=carryover,
                    sanitizers_enabled=sanitizers_enabled,
                    target=lib,
                )
                records.append(TrialRecord(lib, dur, t, out.reached, out.triggered, out.detected))
    return aggregate_sweep(records, trials)
