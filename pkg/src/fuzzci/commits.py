"""Commit streams: real git history or a seeded synthetic generator."""

from __future__ import annotations

import enum
import hashlib
import json
import random
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class CommitIngestError(RuntimeError):
    """Fatal error while reading or generating a commit stream."""


class CommitKind(str, enum.Enum):
    INDIVIDUAL = "individual"
    GROUP = "group"
    MERGE = "merge"


@dataclass(frozen=True)
class FileChange:
    path: str
    lines_added: int
    lines_removed: int


@dataclass(frozen=True)
class CommitRecord:
    id: str
    parent_ids: tuple[str, ...]
    timestamp: int
    author: str
    message: str
    changed_files: tuple[FileChange, ...]
    kind: CommitKind
    branch: str = "main"

    @property
    def size(self) -> int:
        """Changed lines (added + removed) over all files."""
        return sum(f.lines_added + f.lines_removed for f in self.changed_files)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent_ids": list(self.parent_ids),
            "timestamp": self.timestamp,
            "author": self.author,
            "message": self.message,
            "changed_files": [[f.path, f.lines_added, f.lines_removed] for f in self.changed_files],
            "kind": self.kind.value,
            "branch": self.branch,
        }


def check_stream(records: Sequence[CommitRecord], allow_external_parents: bool = False) -> None:
    """Raise CommitIngestError if ``records`` violates the stream invariants.

    With ``allow_external_parents`` a parent that never appears in the stream
    is accepted (range walks start mid-history); forward references are not.
    """
    seen: set[str] = set()
    ids = {r.id for r in records}
    for rec in records:
        if rec.id in seen:
            raise CommitIngestError(f"duplicate commit id {rec.id}")
        for p in rec.parent_ids:
            if p in seen:
                continue
            if allow_external_parents and p not in ids:
                continue
            raise CommitIngestError(f"commit {rec.id} references unseen parent {p}")
        if (rec.kind is CommitKind.MERGE) != (len(rec.parent_ids) >= 2):
            raise CommitIngestError(f"commit {rec.id}: kind {rec.kind.value} disagrees with parents")
        seen.add(rec.id)


# --- git backend ---

_RECORD_SEP = "\x1e"
_FIELD_SEP = "\x1f"
_LOG_FORMAT = _RECORD_SEP + _FIELD_SEP.join(["%H", "%P", "%ct", "%an", "%B"]) + _FIELD_SEP


def _git(repo: Path, *args: str) -> str:
    try:
        proc = subprocess.run(
            ["git", "-C", str(repo), *args],
            check=True,
            capture_output=True,
            text=True,
            encoding="utf-8",
            errors="replace",
        )
    except FileNotFoundError as exc:
        raise CommitIngestError("git executable not found") from exc
    except subprocess.CalledProcessError as exc:
        raise CommitIngestError(f"git {' '.join(args)} failed: {exc.stderr.strip()}") from exc
    return proc.stdout


def _parse_numstat(block: str) -> tuple[FileChange, ...]:
    changes = []
    for line in block.splitlines():
        parts = line.split("\t")
        if len(parts) != 3:
            continue
        added, removed, path = parts
        # binary files report "-"
        changes.append(
            FileChange(path, int(added) if added.isdigit() else 0, int(removed) if removed.isdigit() else 0)
        )
    return tuple(changes)


def walk_history(
    repo_path: str | Path,
    rev_range: tuple[str, str] | None = None,
    count: int | None = None,
    branch: str | None = None,
) -> list[CommitRecord]:
    """Read commits from a git repository, oldest first.

    ``rev_range=(from_id, to_id)`` selects ``from_id..to_id`` (from exclusive);
    ``count`` keeps the newest ``count`` commits reachable from HEAD (or the
    range end). Without either, all of HEAD's history is returned. Merge
    commits list their diff against the first parent. Plain history carries
    no push metadata, so records are only ever individual or merge.
    """
    repo = Path(repo_path)
    if not repo.is_dir():
        raise CommitIngestError(f"repository not readable: {repo}")
    _git(repo, "rev-parse", "--git-dir")
    if count is not None and count < 1:
        raise CommitIngestError("count must be >= 1")

    if rev_range is not None:
        start, end = rev_range
        for rev in (start, end):
            _git(repo, "rev-parse", "--verify", "--quiet", f"{rev}^{{commit}}")
        revspec = f"{start}..{end}"
    else:
        revspec = "HEAD"
    if branch is None:
        branch = _git(repo, "rev-parse", "--abbrev-ref", "HEAD").strip() or "HEAD"

    args = [
        "log",
        "--topo-order",
        "--reverse",
        "--numstat",
        "--diff-merges=first-parent",
        "--no-renames",
        f"--format={_LOG_FORMAT}",
    ]
    if count is not None:
        args.append(f"-n{count}")
    out = _git(repo, *args, revspec, "--")

    records = []
    for chunk in out.split(_RECORD_SEP)[1:]:
        fields = chunk.split(_FIELD_SEP)
        sha, parents, ts, author, message, numstat = fields[:6]
        parent_ids = tuple(parents.split())
        records.append(
            CommitRecord(
                id=sha,
                parent_ids=parent_ids,
                timestamp=int(ts),
                author=author,
                message=message.strip(),
                changed_files=_parse_numstat(numstat),
                kind=CommitKind.MERGE if len(parent_ids) >= 2 else CommitKind.INDIVIDUAL,
                branch=branch,
            )
        )
    if not records:
        raise CommitIngestError(f"empty commit range {revspec}")
    return records


# --- synthetic backend ---

DEFAULT_FILE_UNIVERSE = (
    "src/parser.c",
    "src/lexer.c",
    "src/io.c",
    "src/util.h",
    "fuzz/fuzz_parse.c",
    "fuzz/fuzz_io.c",
    "docs/index.html",
    "README.md",
)

_MESSAGE_VERBS = ("fix", "update", "refactor", "add", "tidy", "document", "speed up")
_MESSAGE_NOUNS = ("parser", "buffer handling", "build", "tests", "docs", "error paths", "security check")
_AUTHORS = ("alice", "bob", "carol", "dave")


@dataclass(frozen=True)
class SynthSpec:
    n_commits: int = 10
    file_universe: tuple[str, ...] = DEFAULT_FILE_UNIVERSE
    # {"dist": "geometric", "mean": m} or {"dist": "fixed", "value": v}
    change_size_distribution: dict = field(default_factory=lambda: {"dist": "geometric", "mean": 40})
    merge_probability: float = 0.1
    files_per_commit_mean: float = 1.5
    mean_interarrival_s: float = 1800.0
    group_window_s: float = 60.0
    start_timestamp: int = 1_650_000_000
    branch: str = "main"

    def validate(self) -> None:
        if self.n_commits < 1:
            raise CommitIngestError("n_commits must be >= 1")
        if not 0.0 <= self.merge_probability <= 1.0:
            raise CommitIngestError("merge_probability must be in [0, 1]")
        if not self.file_universe:
            raise CommitIngestError("file_universe must be non-empty")
        if self.files_per_commit_mean < 1.0:
            raise CommitIngestError("files_per_commit_mean must be >= 1")
        if self.mean_interarrival_s <= 0 or self.group_window_s < 0:
            raise CommitIngestError("interarrival mean must be > 0 and group window >= 0")
        dist = self.change_size_distribution.get("dist")
        if dist == "geometric":
            if self.change_size_distribution.get("mean", 0) < 1:
                raise CommitIngestError("geometric change size mean must be >= 1")
        elif dist == "fixed":
            if self.change_size_distribution.get("value", -1) < 0:
                raise CommitIngestError("fixed change size must be >= 0")
        else:
            raise CommitIngestError(f"unknown change size distribution {dist!r}")


def _geometric(rng: random.Random, mean: float) -> int:
    """Geometric draw on {1, 2, ...} with the given mean."""
    if mean <= 1.0:
        return 1
    p = 1.0 / mean
    n = 1
    while rng.random() >= p:
        n += 1
    return n


def _change_size(rng: random.Random, dist: dict) -> int:
    if dist["dist"] == "fixed":
        return int(dist["value"])
    return _geometric(rng, float(dist["mean"]))


def synth_stream(spec: SynthSpec, seed: int) -> list[CommitRecord]:
    """Generate a deterministic synthetic commit stream.

    Commit 1 is a root. Each later commit is a merge with probability
    ``merge_probability``; its second parent is an earlier commit other than
    the first parent when one exists (at index 1 only the root exists, so the
    merge degenerates to a doubled root parent). Non-merge commits whose
    timestamp lies within ``group_window_s`` of a neighbour form a batch push
    and are labelled ``group``.
    """
    spec.validate()
    rng = random.Random(f"synth:{seed}")
    ids: list[str] = []
    timestamps: list[int] = []
    drafts = []
    t = spec.start_timestamp
    for i in range(spec.n_commits):
        if i:
            t += max(1, int(round(rng.expovariate(1.0 / spec.mean_interarrival_s))))
        commit_id = hashlib.sha1(f"{seed}:{i}".encode()).hexdigest()
        is_merge = i > 0 and rng.random() < spec.merge_probability
        if not i:
            parents: tuple[str, ...] = ()
        elif is_merge:
            others = ids[:-1]
            parents = (ids[-1], rng.choice(others) if others else ids[-1])
        else:
            parents = (ids[-1],)
        n_files = min(len(spec.file_universe), _geometric(rng, spec.files_per_commit_mean))
        paths = sorted(rng.sample(list(spec.file_universe), n_files))
        changes = []
        for path in paths:
            size = _change_size(rng, spec.change_size_distribution)
            added = rng.randint(0, size)
            changes.append(FileChange(path, added, size - added))
        message = f"{rng.choice(_MESSAGE_VERBS)} {rng.choice(_MESSAGE_NOUNS)}"
        author = rng.choice(_AUTHORS)
        ids.append(commit_id)
        timestamps.append(t)
        drafts.append((commit_id, parents, t, author, message, tuple(changes), is_merge))

    records = []
    window = spec.group_window_s
    for i, (cid, parents, ts, author, message, changes, is_merge) in enumerate(drafts):
        if is_merge:
            kind = CommitKind.MERGE
        else:
            near_prev = i > 0 and ts - timestamps[i - 1] <= window
            near_next = i + 1 < len(timestamps) and timestamps[i + 1] - ts <= window
            kind = CommitKind.GROUP if (near_prev or near_next) else CommitKind.INDIVIDUAL
        records.append(CommitRecord(cid, parents, ts, author, message, changes, kind, spec.branch))
    return records


def stream_digest(records: Iterable[CommitRecord]) -> str:
    """Stable hex digest of a stream; equal digests mean byte-identical streams."""
    h = hashlib.sha256()
    for rec in records:
        h.update(json.dumps(rec.to_dict(), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()
