"""Fuzzing campaigns on one target with an ensemble of backends.

Two backends are provided: a deterministic stochastic mock driven by a
:class:`~fuzzci.model.MockModel` (virtual time, no processes), and an
adapter that runs an external fuzzer command under a hard deadline.
"""

from __future__ import annotations

import heapq
import logging
import math
import os
import random
import re
import shlex
import shutil
import signal
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from fuzzci.corpus import (
    Corpus,
    CorpusInput,
    CoverageTarget,
    OpaqueTarget,
    content_hash,
    merge,
    signature_or_flag,
)
from fuzzci.model import MockModel

log = logging.getLogger(__name__)

DEFAULT_BACKENDS = ("aflplusplus", "libfuzzer", "honggfuzz")
BUG_MARKER = re.compile(r"bug:([A-Za-z0-9_.\-]+)")


class CampaignError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class CampaignSpec:
    target_name: str
    commit_id: str
    duration: float
    backends: tuple[str, ...] = DEFAULT_BACKENDS
    seed_corpus: Corpus | None = None
    rng_seed: int = 0
    sanitizers_enabled: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise CampaignError(f"campaign duration must be > 0, got {self.duration}")
        if not self.backends:
            raise CampaignError("campaign needs at least one backend")

    @property
    def cores(self) -> int:
        return len(self.backends)

    def corpus(self) -> Corpus:
        return self.seed_corpus if self.seed_corpus is not None else Corpus(self.target_name)


EventTimes = tuple  # (reach_t, trigger_t | None, detect_t | None)


@dataclass(frozen=True)
class CampaignResult:
    spec: CampaignSpec
    reached: frozenset[str] = frozenset()
    triggered: frozenset[str] = frozenset()
    detected: frozenset[str] = frozenset()
    first_event_times: dict[str, EventTimes] = field(default_factory=dict)
    new_inputs: tuple[CorpusInput, ...] = ()
    cpu_seconds_used: float = 0.0
    errors: dict[str, str] = field(default_factory=dict)
    flags: tuple[str, ...] = ()
    corpus: Corpus | None = None  # seed corpus merged with new_inputs
    interrupted: bool = False

    def check(self) -> None:
        """Raise CampaignError unless detected <= triggered <= reached and event times are ordered."""
        if not (self.detected <= self.triggered <= self.reached):
            raise CampaignError(f"ordering violated for {self.spec.target_name}@{self.spec.commit_id}")
        for bug, (r, t, d) in self.first_event_times.items():
            times = [x for x in (r, t, d) if x is not None]
            if times != sorted(times) or (times and times[-1] > self.spec.duration + 1e-9):
                raise CampaignError(f"event times out of order for bug {bug}: {(r, t, d)}")
            if (t is not None) != (bug in self.triggered) or (d is not None) != (bug in self.detected):
                raise CampaignError(f"event times disagree with bug sets for {bug}")


def apply_sanitizer_slowdown(rate: float, enabled: bool, factor: float = 2.0) -> float:
    """Effective rate once sanitizer instrumentation slows execution by ``factor``."""
    if factor < 1:
        raise CampaignError(f"sanitizer slowdown factor must be >= 1, got {factor}")
    return rate / factor if enabled else rate


def _min_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


def pool_results(spec: CampaignSpec, results: Sequence[CampaignResult], errors: Mapping[str, str] | None = None) -> CampaignResult:
    """Union per-backend results: bug sets unioned, event times take the earliest."""
    times: dict[str, list] = {}
    new_inputs: dict[str, CorpusInput] = {}
    flags: list[str] = []
    for res in results:
        for bug, ev in res.first_event_times.items():
            cur = times.setdefault(bug, [None, None, None])
            for i in range(3):
                cur[i] = _min_opt(cur[i], ev[i])
        for inp in res.new_inputs:
            prev = new_inputs.get(inp.content_hash)
            if prev is None or inp.found_at < prev.found_at:
                new_inputs[inp.content_hash] = inp
        flags.extend(res.flags)
    return CampaignResult(
        spec=spec,
        reached=frozenset().union(*(r.reached for r in results)),
        triggered=frozenset().union(*(r.triggered for r in results)),
        detected=frozenset().union(*(r.detected for r in results)),
        first_event_times={b: tuple(v) for b, v in sorted(times.items())},
        new_inputs=tuple(sorted(new_inputs.values(), key=lambda i: (i.found_at, i.content_hash))),
        cpu_seconds_used=sum(r.cpu_seconds_used for r in results),
        errors=dict(errors or {}),
        flags=tuple(flags),
    )


# --- mock backend ---


def mock_fuzz(
    model: MockModel,
    duration: float,
    seed_corpus: Corpus | None,
    rng_seed: int,
    *,
    sanitizers_enabled: bool = True,
    backend: str = "mock",
    spec: CampaignSpec | None = None,
) -> CampaignResult:
    """Simulate one backend for ``duration`` virtual CPU-seconds.

    Edge discovery runs as independent exponential clocks (rates slowed by
    the model's sanitizer factor when sanitizers are on). A bug is reached
    when its edge is covered, triggers after an Exp(trigger_rate) delay from
    that moment, and is detected at trigger time with probability
    ``detect_given_trigger`` provided sanitizers are on or not required.

    Draws are keyed so that a shorter run is an exact prefix of a longer one
    with the same seed.
    """
    if spec is None:
        spec = CampaignSpec(
            target_name=seed_corpus.target_name if seed_corpus is not None else model.name,
            commit_id="",
            duration=duration,
            backends=(backend,),
            seed_corpus=seed_corpus,
            rng_seed=rng_seed,
            sanitizers_enabled=sanitizers_enabled,
        )
    slowdown = model.sanitizer_slowdown
    edge_rng = random.Random(f"mock-edges:{rng_seed}:{backend}")
    bug_rng = random.Random(f"mock-bugs:{rng_seed}:{backend}")

    start = set(model.roots)
    if seed_corpus is not None:
        start |= {e for e in seed_corpus.edges() if e in model.edges}
    covered = set(start)
    found: dict[int, float] = {}
    heap: list[tuple[float, int]] = []

    def push_children(edge: int, t: float) -> None:
        for child in model.children[edge]:
            if child in covered:
                continue
            rate = apply_sanitizer_slowdown(model.rates[child], sanitizers_enabled, slowdown)
            if rate > 0:
                heapq.heappush(heap, (t + edge_rng.expovariate(rate), child))

    for e in sorted(start):
        push_children(e, 0.0)
    while heap and heap[0][0] <= duration:
        t, e = heapq.heappop(heap)
        if e in covered:
            continue
        covered.add(e)
        found[e] = t
        push_children(e, t)

    reached, triggered, detected = set(), set(), set()
    times: dict[str, tuple] = {}
    for bug in model.bugs:
        delay = bug_rng.expovariate(bug.trigger_rate) if bug.trigger_rate > 0 else math.inf
        u = bug_rng.random()
        if bug.reach_edge in start:
            reach_t = 0.0
        elif bug.reach_edge in found:
            reach_t = found[bug.reach_edge]
        else:
            continue
        reached.add(bug.bug_id)
        trig_t = reach_t + delay
        if trig_t > duration:
            times[bug.bug_id] = (reach_t, None, None)
            continue
        triggered.add(bug.bug_id)
        can_detect = sanitizers_enabled or not bug.sanitizer_required
        if can_detect and u < bug.detect_given_trigger:
            detected.add(bug.bug_id)
            times[bug.bug_id] = (reach_t, trig_t, trig_t)
        else:
            times[bug.bug_id] = (reach_t, trig_t, None)

    origin = f"fuzzer:{backend}"
    new_inputs = tuple(model.input_for_edge(e, origin, t) for e, t in sorted(found.items(), key=lambda kv: (kv[1], kv[0])))
    return CampaignResult(
        spec=spec,
        reached=frozenset(reached),
        triggered=frozenset(triggered),
        detected=frozenset(detected),
        first_event_times=times,
        new_inputs=new_inputs,
        cpu_seconds_used=float(duration),
    )


class Backend(Protocol):
    name: str
    concurrent: bool

    def run(self, spec: CampaignSpec, index: int) -> CampaignResult: ...


@dataclass
class MockBackend:
    name: str
    model: MockModel
    concurrent: bool = False

    def run(self, spec: CampaignSpec, index: int) -> CampaignResult:
        return mock_fuzz(
            self.model,
            spec.duration,
            spec.seed_corpus,
            spec.rng_seed,
            sanitizers_enabled=spec.sanitizers_enabled,
            backend=f"{index}:{self.name}",
            spec=spec,
        )


# --- external backend ---


@dataclass
class ExternalBackendConfig:
    """How to launch an external fuzzer.

    ``command`` is an argv template; available fields are ``{target}``,
    ``{corpus_in}``, ``{corpus_out}``, ``{artifacts}``, ``{duration_s}`` and
    ``{seed}``. ``target_path`` fills ``{target}`` (``{name}`` inside it is the
    target name). The process is killed at ``duration + grace``.
    """

    command: str
    target_path: str = "{name}"
    grace_s: float | None = None
    term_wait_s: float = 2.0
    workroot: str | None = None
    keep_workdir: bool = False
    coverage: CoverageTarget | None = None

    def grace(self, duration: float) -> float:
        if self.grace_s is not None:
            return self.grace_s
        return max(0.1 * duration, 30.0)


def _kill_group(proc: subprocess.Popen, term_wait: float) -> None:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        pass
    try:
        proc.wait(timeout=term_wait)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()


def _files(d: Path) -> list[Path]:
    return sorted(p for p in d.rglob("*") if p.is_file())


def external_fuzz(
    config: ExternalBackendConfig,
    spec: CampaignSpec,
    backend: str = "external",
    index: int = 0,
) -> CampaignResult:
    argv0 = shlex.split(config.command)[0] if config.command.strip() else ""
    if not argv0 or (shutil.which(argv0) is None and not Path(argv0).is_file()):
        raise BackendError(f"backend {backend}: executable {argv0!r} not found")

    work = Path(tempfile.mkdtemp(prefix=f"fuzzci-{spec.target_name}-{index}-", dir=config.workroot))
    corpus_in, corpus_out, artifacts = work / "corpus_in", work / "corpus_out", work / "artifacts"
    for d in (corpus_in, corpus_out, artifacts):
        d.mkdir()
    seed = spec.corpus()
    for inp in seed:
        (corpus_in / inp.content_hash).write_bytes(inp.data)

    argv = shlex.split(
        config.command.format(
            target=config.target_path.format(name=spec.target_name),
            corpus_in=corpus_in,
            corpus_out=corpus_out,
            artifacts=artifacts,
            duration_s=max(1, math.ceil(spec.duration)),
            seed=spec.rng_seed + index,
        )
    )
    deadline = spec.duration + config.grace(spec.duration)
    flags: list[str] = []
    started_wall = time.time()
    started = time.monotonic()
    with open(work / "fuzzer.log", "wb") as log_fh:
        try:
            proc = subprocess.Popen(argv, stdout=log_fh, stderr=subprocess.STDOUT, start_new_session=True)
        except OSError as exc:
            shutil.rmtree(work, ignore_errors=True)
            raise BackendError(f"backend {backend}: cannot start: {exc}") from exc
        killed = False
        try:
            proc.wait(timeout=deadline)
        except subprocess.TimeoutExpired:
            killed = True
            _kill_group(proc, min(config.term_wait_s, config.grace(spec.duration)))
        except BaseException:
            _kill_group(proc, 0.0)
            raise
    elapsed = time.monotonic() - started
    if killed:
        flags.append(f"{backend}: killed at deadline {deadline:.1f}s")

    try:
        crash_files = _files(artifacts)
        if proc.returncode not in (0, None) and not killed and not crash_files:
            flags.append(f"{backend}: exited {proc.returncode} without crash artifacts")
            return CampaignResult(spec=spec, cpu_seconds_used=elapsed, flags=tuple(flags))

        coverage = config.coverage or OpaqueTarget(spec.target_name)
        new_inputs = []
        for f in _files(corpus_out):
            data = f.read_bytes()
            h = content_hash(data)
            if h in seed:
                continue
            sig, bad = signature_or_flag(data, coverage)
            if bad:
                flags.append(f"{backend}: unparsable coverage for input {h[:12]}")
            found_at = min(max(f.stat().st_mtime - started_wall, 0.0), spec.duration)
            new_inputs.append(CorpusInput(h, data, sig, f"fuzzer:{backend}", found_at))

        bugs: dict[str, float] = {}
        unattributed = 0
        for f in crash_files:
            m = BUG_MARKER.search(f.name)
            t = min(max(f.stat().st_mtime - started_wall, 0.0), spec.duration)
            if m:
                bugs[m.group(1)] = min(t, bugs.get(m.group(1), t))
            else:
                unattributed += 1
        if unattributed:
            flags.append(f"{backend}: {unattributed} crash artifact(s) without bug marker")
        ids = frozenset(bugs)
        return CampaignResult(
            spec=spec,
            reached=ids,
            triggered=ids,
            detected=ids,
            first_event_times={b: (t, t, t) for b, t in sorted(bugs.items())},
            new_inputs=tuple(new_inputs),
            cpu_seconds_used=elapsed,
            flags=tuple(flags),
        )
    finally:
        if not config.keep_workdir:
            shutil.rmtree(work, ignore_errors=True)


@dataclass
class ExternalBackend:
    name: str
    config: ExternalBackendConfig
    concurrent: bool = True

    def run(self, spec: CampaignSpec, index: int) -> CampaignResult:
        return external_fuzz(self.config, spec, self.name, index)


# --- ensemble ---


def run_campaign(spec: CampaignSpec, backends: Mapping[str, Backend]) -> CampaignResult:
    """Run every backend of ``spec`` against the same seed corpus and pool them.

    A failing backend is recorded in ``errors`` and does not abort the rest.
    The seed corpus is merged with all findings once, at the end.
    """
    missing = [b for b in spec.backends if b not in backends]
    if missing:
        raise CampaignError(f"unresolvable backends: {', '.join(missing)}")

    def one(index: int, name: str):
        try:
            return backends[name].run(spec, index), None
        except Exception as exc:  # a backend crash only takes out that backend
            log.warning("backend %s failed on %s: %s", name, spec.target_name, exc)
            return None, f"{type(exc).__name__}: {exc}"

    jobs = list(enumerate(spec.backends))
    if len(jobs) > 1 and any(backends[n].concurrent for n in spec.backends):
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            outcomes = list(pool.map(lambda j: one(*j), jobs))
    else:
        outcomes = [one(i, n) for i, n in jobs]

    results = [r for r, _ in outcomes if r is not None]
    errors = {f"{i}:{n}": err for (i, n), (_, err) in zip(jobs, outcomes) if err is not None}
    pooled = pool_results(spec, results, errors)
    pooled = replace(pooled, corpus=merge(spec.corpus(), pooled.new_inputs))
    pooled.check()
    return pooled


def mock_registry(model: MockModel, names: Iterable[str] = DEFAULT_BACKENDS) -> dict[str, Backend]:
    return {n: MockBackend(n, model) for n in names}
