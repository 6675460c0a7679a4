"""Per-target corpora: merge, greedy minimization, and on-disk persistence."""

from __future__ import annotations

import hashlib
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

from filelock import FileLock

EDGE_MAX = 2**32 - 1
INDEX_NAME = ".signatures"
LOCK_NAME = ".lock"


class CorpusError(RuntimeError):
    pass


class CoverageParseError(CorpusError):
    pass


@dataclass(frozen=True)
class CoverageSignature:
    edges: frozenset[int] = frozenset()

    def __post_init__(self):
        if not isinstance(self.edges, frozenset):
            object.__setattr__(self, "edges", frozenset(self.edges))
        for e in self.edges:
            if not 0 <= e <= EDGE_MAX:
                raise CorpusError(f"edge id {e} is not a 32-bit value")

    def __len__(self) -> int:
        return len(self.edges)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class CorpusInput:
    content_hash: str
    data: bytes
    signature: CoverageSignature
    origin: str = "seed"  # "seed", "merge" or "fuzzer:<backend>"
    found_at: float = 0.0

    @classmethod
    def from_bytes(cls, data: bytes, signature: CoverageSignature | Iterable[int] = (), origin: str = "seed", found_at: float = 0.0) -> CorpusInput:
        if not isinstance(signature, CoverageSignature):
            signature = CoverageSignature(frozenset(signature))
        return cls(content_hash(data), data, signature, origin, found_at)


@dataclass(frozen=True)
class Corpus:
    target_name: str
    inputs: dict[str, CorpusInput] = field(default_factory=dict)

    @classmethod
    def of(cls, target_name: str, inputs: Iterable[CorpusInput] = ()) -> Corpus:
        return merge(cls(target_name), list(inputs))

    def __len__(self) -> int:
        return len(self.inputs)

    def __iter__(self):
        return iter(self.inputs.values())

    def __contains__(self, h: object) -> bool:
        return h in self.inputs

    def edges(self) -> frozenset[int]:
        out: set[int] = set()
        for inp in self.inputs.values():
            out |= inp.signature.edges
        return frozenset(out)

    def hashes(self) -> frozenset[str]:
        return frozenset(self.inputs)


def merge(base: Corpus, additions: Corpus | Iterable[CorpusInput]) -> Corpus:
    """Union keyed by content hash; on collision the base copy wins."""
    if isinstance(additions, Corpus):
        if additions.target_name != base.target_name:
            raise CorpusError(f"cannot merge corpus of {additions.target_name} into {base.target_name}")
        additions = additions.inputs.values()
    inputs = dict(base.inputs)
    for inp in additions:
        if inp.content_hash != content_hash(inp.data):
            raise CorpusError(f"input {inp.content_hash[:12]} does not match its bytes")
        inputs.setdefault(inp.content_hash, inp)
    return Corpus(base.target_name, inputs)


def minimize(corpus: Corpus) -> Corpus:
    """Greedy set cover over coverage signatures.

    Repeatedly keeps the input that covers the most not-yet-covered edges,
    ties going to the lexicographically smallest content hash. The edge
    union is preserved exactly. Inputs adding no coverage are dropped,
    except that a corpus covering no edges at all keeps its smallest-hash
    input so a target never loses its only seed.
    """
    if len(corpus) <= 1:
        return corpus
    remaining = sorted(corpus.inputs.values(), key=lambda i: i.content_hash)
    uncovered = set(corpus.edges())
    if not uncovered:
        first = remaining[0]
        return Corpus(corpus.target_name, {first.content_hash: first})
    kept: dict[str, CorpusInput] = {}
    while uncovered:
        best, best_gain = None, 0
        for inp in remaining:
            gain = len(inp.signature.edges & uncovered)
            if gain > best_gain:  # strict: earlier (smaller) hash wins ties
                best, best_gain = inp, gain
        assert best is not None
        kept[best.content_hash] = best
        uncovered -= best.signature.edges
        remaining = [i for i in remaining if i.content_hash != best.content_hash and i.signature.edges & uncovered]
    return Corpus(corpus.target_name, dict(sorted(kept.items())))


# --- coverage signatures ---


class CoverageTarget(Protocol):
    name: str

    def signature(self, data: bytes) -> CoverageSignature: ...


def signature_of(data: bytes, target: CoverageTarget) -> CoverageSignature:
    return target.signature(data)


def signature_or_flag(data: bytes, target: CoverageTarget) -> tuple[CoverageSignature, bool]:
    """Like signature_of, but unparsable coverage yields (empty, True)."""
    try:
        return target.signature(data), False
    except CoverageParseError:
        return CoverageSignature(), True


@dataclass
class OpaqueTarget:
    """Target without coverage instrumentation.

    Every distinct input gets its own pseudo-edge derived from its hash, so
    minimization can never prove an input redundant and keeps them all.
    """

    name: str

    def signature(self, data: bytes) -> CoverageSignature:
        return CoverageSignature(frozenset({int.from_bytes(hashlib.sha256(data).digest()[:4], "big")}))


@dataclass
class CommandCoverageTarget:
    """Coverage from an external tool.

    ``command`` is an argv template with ``{input}``; the tool prints
    whitespace-separated decimal edge ids on stdout.
    """

    name: str
    command: str
    timeout: float = 30.0

    def signature(self, data: bytes) -> CoverageSignature:
        with tempfile.NamedTemporaryFile(delete=False) as fh:
            fh.write(data)
            path = fh.name
        try:
            argv = shlex.split(self.command.format(input=path, target=self.name))
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise CoverageParseError(f"coverage tool failed: {exc}") from exc
            if proc.returncode != 0:
                raise CoverageParseError(f"coverage tool exited {proc.returncode}")
            try:
                return CoverageSignature(frozenset(int(tok) for tok in proc.stdout.split()))
            except (ValueError, CorpusError) as exc:
                raise CoverageParseError(f"unparsable coverage output: {exc}") from exc
        finally:
            os.unlink(path)


# --- on-disk layout ---


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_index(corpus: Corpus) -> str:
    lines = []
    for h in sorted(corpus.inputs):
        edges = " ".join(str(e) for e in sorted(corpus.inputs[h].signature.edges))
        lines.append(f"{h} {edges}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def parse_index(text: str) -> dict[str, CoverageSignature]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        h, *edges = line.split()
        out[h] = CoverageSignature(frozenset(int(e) for e in edges))
    return out


class CorpusStore:
    """Directory per target: one file per input named by its hex hash, plus
    a sidecar signature index. Writes go through a per-target file lock and
    atomic renames, so a killed process leaves either the old or the new
    state behind."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, FileLock] = {}

    def target_dir(self, target: str) -> Path:
        return self.root / target

    def lock(self, target: str) -> FileLock:
        """Per-target inter-process lock; re-entrant within one store."""
        if target not in self._locks:
            d = self.target_dir(target)
            d.mkdir(parents=True, exist_ok=True)
            self._locks[target] = FileLock(str(d / LOCK_NAME))
        return self._locks[target]

    def load(self, target: str) -> Corpus:
        d = self.target_dir(target)
        if not d.is_dir():
            return Corpus(target)
        index_path = d / INDEX_NAME
        index = parse_index(index_path.read_text(encoding="utf-8")) if index_path.exists() else {}
        inputs = {}
        for h, sig in index.items():
            f = d / h
            if f.is_file():
                data = f.read_bytes()
                if content_hash(data) == h:
                    inputs[h] = CorpusInput(h, data, sig, "seed")
        return Corpus(target, inputs)

    def save(self, corpus: Corpus) -> None:
        d = self.target_dir(corpus.target_name)
        with self.lock(corpus.target_name):
            for h, inp in corpus.inputs.items():
                if not (d / h).exists():
                    _atomic_write(d / h, inp.data)
            _atomic_write(d / INDEX_NAME, format_index(corpus).encode("utf-8"))
            keep = set(corpus.inputs) | {INDEX_NAME, LOCK_NAME}
            for f in d.iterdir():
                if f.name not in keep:
                    f.unlink()

    def verify(self, target: str) -> list[str]:
        """Integrity problems in a target directory; [] means consistent.

        Checks that every indexed input exists and hashes to its name. Input
        files not (yet) named by the index are tolerated, they are the
        leftovers of an interrupted save and are removed by the next one.
        """
        d = self.target_dir(target)
        problems = []
        if not d.is_dir():
            return problems
        index_path = d / INDEX_NAME
        try:
            index = parse_index(index_path.read_text(encoding="utf-8")) if index_path.exists() else {}
        except (ValueError, CorpusError) as exc:
            return [f"unreadable index: {exc}"]
        for h in index:
            f = d / h
            if not f.is_file():
                problems.append(f"missing input {h}")
            elif content_hash(f.read_bytes()) != h:
                problems.append(f"corrupt input {h}")
        for f in d.iterdir():
            if f.name in (INDEX_NAME, LOCK_NAME) or f.name.startswith(".tmp-"):
                continue
            if f.is_file() and content_hash(f.read_bytes()) != f.name:
                problems.append(f"misnamed file {f.name}")
        return problems
