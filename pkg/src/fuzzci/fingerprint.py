"""Build fuzz targets and compute normalized content fingerprints.

Embedded build metadata (timestamps, git revisions, version strings,
build-id notes) changes on every build and would make every commit look
like a code change. ``normalize`` overwrites such byte ranges with a fixed
filler of the same length before hashing, so two builds that differ only in
metadata get the same fingerprint.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import os
import re
import shlex
import struct
import subprocess
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from fuzzci.commits import CommitRecord

SUPPORTED_DIGESTS = ("sha256", "sha3_256", "blake2s")
FILLER = 0x00


class FingerprintError(RuntimeError):
    pass


class CheckoutError(FingerprintError):
    """The working tree for a commit could not be materialized."""


@dataclass(frozen=True)
class TargetArtifact:
    target_name: str
    commit_id: str
    data: bytes = b""
    build_ok: bool = True
    build_log: str = ""

    def __post_init__(self):
        if not self.build_ok and self.data:
            raise ValueError("failed build must not carry bytes")


@dataclass(frozen=True)
class TargetFingerprint:
    target_name: str
    commit_id: str
    digest: str  # lowercase hex
    normalization_applied: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScrubRule:
    name: str
    pattern: bytes

    def compiled(self) -> re.Pattern[bytes]:
        return _compile(self.pattern)


_PATTERN_CACHE: dict[bytes, re.Pattern[bytes]] = {}


def _compile(pattern: bytes) -> re.Pattern[bytes]:
    compiled = _PATTERN_CACHE.get(pattern)
    if compiled is None:
        compiled = _PATTERN_CACHE[pattern] = re.compile(pattern)
    return compiled


_MONTHS = rb"(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec)"

BUILTIN_RULES: dict[str, ScrubRule] = {
    rule.name: rule
    for rule in (
        ScrubRule(
            "timestamp",
            rb"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2})?",
        ),
        # __DATE__ / __TIME__ as produced by C preprocessors
        ScrubRule("c_date", _MONTHS + rb" [ \d]\d \d{4}"),
        ScrubRule("c_time", rb"(?<![\d:])\d{2}:\d{2}:\d{2}(?![\d:])"),
        ScrubRule("revision", rb"(?<![0-9a-fA-F])[0-9a-f]{40}(?![0-9a-fA-F])"),
        ScrubRule("semver", rb"(?<![\w.])v?\d+\.\d+\.\d+(?:-[0-9A-Za-z.]+)?(?![\w.])"),
    )
}

DEFAULT_RULE_NAMES = ("timestamp", "c_date", "c_time", "revision", "semver")
DEFAULT_STRIP_SECTIONS = (".note.gnu.build-id",)


@dataclass(frozen=True)
class ScrubRuleset:
    rules: tuple[ScrubRule, ...] = ()
    strip_sections: tuple[str, ...] = ()

    @classmethod
    def default(cls) -> ScrubRuleset:
        return cls(tuple(BUILTIN_RULES[n] for n in DEFAULT_RULE_NAMES), DEFAULT_STRIP_SECTIONS)

    @classmethod
    def empty(cls) -> ScrubRuleset:
        return cls()

    @classmethod
    def from_names(cls, names: Iterable[str], strip_sections: Iterable[str] = (), extra: Mapping[str, str] | None = None) -> ScrubRuleset:
        rules = []
        extra = dict(extra or {})
        for name in names:
            if name in extra:
                rules.append(ScrubRule(name, extra.pop(name).encode()))
            elif name in BUILTIN_RULES:
                rules.append(BUILTIN_RULES[name])
            else:
                raise FingerprintError(f"unknown scrub rule {name!r}")
        rules.extend(ScrubRule(n, p.encode()) for n, p in extra.items())
        for rule in rules:
            try:
                rule.compiled()
            except re.error as exc:
                raise FingerprintError(f"bad pattern for scrub rule {rule.name!r}: {exc}") from exc
        return cls(tuple(rules), tuple(strip_sections))

    def ruleset_hash(self) -> str:
        """Short hex id of the ruleset, stored next to cached digests."""
        payload = json.dumps(
            {
                "rules": [[r.name, r.pattern.decode("latin-1")] for r in self.rules],
                "strip_sections": list(self.strip_sections),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# --- ELF section blanking ---


def _elf_sections(data: bytes) -> list[tuple[str, int, int]]:
    """Return (name, offset, size) of file-backed ELF sections, [] if not ELF."""
    if len(data) < 0x34 or data[:4] != b"\x7fELF":
        return []
    ei_class, ei_data = data[4], data[5]
    if ei_class not in (1, 2) or ei_data not in (1, 2):
        return []
    end = "<" if ei_data == 1 else ">"
    try:
        if ei_class == 2:
            shoff, = struct.unpack_from(end + "Q", data, 0x28)
            shentsize, shnum, shstrndx = struct.unpack_from(end + "HHH", data, 0x3A)
            hdr = end + "IIQQQQIIQQ"
        else:
            shoff, = struct.unpack_from(end + "I", data, 0x20)
            shentsize, shnum, shstrndx = struct.unpack_from(end + "HHH", data, 0x2E)
            hdr = end + "IIIIIIIIII"
        if not shoff or shstrndx >= shnum or shentsize < struct.calcsize(hdr):
            return []
        headers = [struct.unpack_from(hdr, data, shoff + i * shentsize) for i in range(shnum)]
        strtab = headers[shstrndx]
        str_off, str_size = strtab[4], strtab[5]
        names = data[str_off : str_off + str_size]
        out = []
        for h in headers:
            name_off, sh_type, offset, size = h[0], h[1], h[4], h[5]
            if sh_type == 8:  # SHT_NOBITS occupies no file bytes
                continue
            end_idx = names.find(b"\0", name_off)
            name = names[name_off:end_idx].decode("ascii", "replace")
            if offset + size <= len(data):
                out.append((name, offset, size))
        return out
    except struct.error:
        return []


def normalize(artifact: TargetArtifact | bytes, rules: ScrubRuleset) -> bytes:
    """Overwrite bytes matched by ``rules`` with a fixed filler.

    Lengths are preserved, so offsets of everything else stay put; the
    filler never matches any rule, which makes the operation idempotent.
    """
    data = artifact.data if isinstance(artifact, TargetArtifact) else artifact
    if isinstance(artifact, TargetArtifact) and not artifact.build_ok:
        raise FingerprintError(f"cannot normalize failed build of {artifact.target_name}")
    return _normalize(data, rules)[0]


def _normalize(data: bytes, rules: ScrubRuleset) -> tuple[bytes, tuple[str, ...]]:
    if not rules.rules and not rules.strip_sections:
        return data, ()
    buf = bytearray(data)
    applied = []
    if rules.strip_sections:
        wanted = set(rules.strip_sections)
        hit = False
        for name, offset, size in _elf_sections(data):
            if name in wanted and size:
                buf[offset : offset + size] = bytes([FILLER]) * size
                hit = True
        if hit:
            applied.append("strip_sections")
    # Blanking one match can expose another via a lookaround; repeat to a fixpoint.
    changed = True
    while changed:
        changed = False
        for rule in rules.rules:
            for m in rule.compiled().finditer(bytes(buf)):
                start, stop = m.span()
                buf[start:stop] = bytes([FILLER]) * (stop - start)
                changed = True
                if rule.name not in applied:
                    applied.append(rule.name)
    return bytes(buf), tuple(applied)


def fingerprint(artifact: TargetArtifact, rules: ScrubRuleset, digest: str = "sha256") -> TargetFingerprint:
    if not artifact.build_ok:
        raise FingerprintError(f"unfingerprintable: {artifact.target_name} failed to build at {artifact.commit_id}")
    if digest not in SUPPORTED_DIGESTS:
        raise FingerprintError(f"unsupported digest {digest!r}")
    normalized, applied = _normalize(artifact.data, rules)
    return TargetFingerprint(
        artifact.target_name,
        artifact.commit_id,
        hashlib.new(digest, normalized).hexdigest(),
        applied,
    )


# --- comparison ---


class ChangeStatus(str, enum.Enum):
    IDENTICAL = "identical"
    CHANGED = "changed"
    NEW = "new"
    REMOVED = "removed"
    UNBUILDABLE = "unbuildable"


@dataclass(frozen=True)
class ChangeSet:
    status: dict[str, ChangeStatus]
    commit_id: str = ""

    def targets(self, status: ChangeStatus) -> list[str]:
        return sorted(t for t, s in self.status.items() if s is status)

    @property
    def identical_fraction(self) -> float:
        considered = [s for s in self.status.values() if s is not ChangeStatus.REMOVED]
        if not considered:
            return 0.0
        return sum(s is ChangeStatus.IDENTICAL for s in considered) / len(considered)


def _by_name(fps: Iterable[TargetFingerprint] | Mapping[str, TargetFingerprint | str]) -> dict[str, str]:
    if isinstance(fps, Mapping):
        return {k: (v.digest if isinstance(v, TargetFingerprint) else v) for k, v in fps.items()}
    out = {}
    for fp in fps:
        if fp.target_name in out:
            raise FingerprintError(f"duplicate fingerprint for target {fp.target_name}")
        out[fp.target_name] = fp.digest
    return out


def compare(
    current: Iterable[TargetFingerprint] | Mapping[str, TargetFingerprint | str],
    baseline: Iterable[TargetFingerprint] | Mapping[str, TargetFingerprint | str],
    unbuildable: Iterable[str] = (),
    commit_id: str = "",
) -> ChangeSet:
    """Classify every target seen in either side.

    Targets listed in ``unbuildable`` are reported as such whether or not a
    baseline exists; they are expected to be absent from ``current``.
    """
    cur = _by_name(current)
    base = _by_name(baseline)
    status: dict[str, ChangeStatus] = {}
    for name in sorted(set(cur) | set(base)):
        if name in cur and name in base:
            status[name] = ChangeStatus.IDENTICAL if cur[name] == base[name] else ChangeStatus.CHANGED
        elif name in cur:
            status[name] = ChangeStatus.NEW
        else:
            status[name] = ChangeStatus.REMOVED
    for name in unbuildable:
        status[name] = ChangeStatus.UNBUILDABLE
    return ChangeSet(status, commit_id)


# --- fingerprint cache ---

CACHE_MAGIC = "# fuzzci-fingerprint-cache v1"


class FingerprintCache:
    """Append-only TSV: commit_id, target_name, hex digest, ruleset hash.

    The header pins the digest algorithm; opening a cache written with a
    different algorithm is an error so digests never mix.
    """

    def __init__(self, path: str | Path, digest: str = "sha256"):
        self.path = Path(path)
        self.digest = digest
        self.entries: dict[tuple[str, str], tuple[str, str]] = {}
        if digest not in SUPPORTED_DIGESTS:
            raise FingerprintError(f"unsupported digest {digest!r}")
        self._hexlen = hashlib.new(digest).digest_size * 2
        if self.path.exists() and self.path.stat().st_size:
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", encoding="utf-8") as fh:
                fh.write(f"{CACHE_MAGIC}\tdigest={digest}\n")

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != f"{CACHE_MAGIC}\tdigest={self.digest}":
                raise FingerprintError(f"fingerprint cache {self.path} has incompatible header {header!r}")
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    # torn final write after a crash: ignore the partial record
                    continue
                commit_id, target, digest, ruleset = parts
                if len(digest) != self._hexlen or len(ruleset) != 16:
                    continue
                self.entries[(commit_id, target)] = (digest, ruleset)

    def get(self, commit_id: str, target: str, ruleset_hash: str) -> str | None:
        hit = self.entries.get((commit_id, target))
        if hit and hit[1] == ruleset_hash:
            return hit[0]
        return None

    def append(self, fp: TargetFingerprint, ruleset_hash: str) -> None:
        key = (fp.commit_id, fp.target_name)
        if self.entries.get(key) == (fp.digest, ruleset_hash):
            return
        self.entries[key] = (fp.digest, ruleset_hash)
        with self.path.open("rb") as fh:
            fh.seek(-1, os.SEEK_END)
            torn = fh.read(1) != b"\n"
        with self.path.open("a", encoding="utf-8") as fh:
            if torn:
                fh.write("\n")
            fh.write(f"{fp.commit_id}\t{fp.target_name}\t{fp.digest}\t{ruleset_hash}\n")


# --- building ---


@dataclass(frozen=True)
class BuildTarget:
    """One entry of a build plan.

    ``command`` is a shell-free template run in the checked-out tree with
    ``{workdir}``, ``{target}`` and ``{output}`` substituted; ``output`` is the
    artifact path relative to the tree (also templated).
    """

    name: str
    command: str
    output: str
    sources: tuple[str, ...] = field(default_factory=tuple)


def checkout(repo_path: str | Path, commit_id: str, workdir: str | Path) -> Path:
    """Export the tree of ``commit_id`` into ``workdir`` (which must be empty or absent)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if any(workdir.iterdir()):
        raise CheckoutError(f"workdir {workdir} is not empty")
    try:
        proc = subprocess.run(
            ["git", "-C", str(repo_path), "archive", "--format=tar", commit_id],
            check=True,
            capture_output=True,
        )
    except (OSError, subprocess.CalledProcessError) as exc:
        detail = getattr(exc, "stderr", b"") or b""
        raise CheckoutError(f"cannot check out {commit_id}: {detail.decode(errors='replace').strip() or exc}") from exc
    with tarfile.open(fileobj=io.BytesIO(proc.stdout)) as tar:
        tar.extractall(workdir)
    return workdir


def build_targets(
    commit: CommitRecord | str,
    build_plan: Sequence[BuildTarget],
    workdir: str | Path,
    timeout: float | None = 600,
) -> list[TargetArtifact]:
    """Run each plan entry in ``workdir``; build failures are captured, not raised."""
    if not build_plan:
        raise FingerprintError("build plan is empty")
    commit_id = commit.id if isinstance(commit, CommitRecord) else commit
    workdir = Path(workdir)
    artifacts = []
    for entry in build_plan:
        subs = {"workdir": str(workdir), "target": entry.name}
        output = workdir / entry.output.format(**subs)
        subs["output"] = str(output)
        output.parent.mkdir(parents=True, exist_ok=True)
        argv = shlex.split(entry.command.format(**subs))
        try:
            proc = subprocess.run(argv, cwd=workdir, capture_output=True, text=True, errors="replace", timeout=timeout)
            log = proc.stdout + proc.stderr
            ok = proc.returncode == 0 and output.is_file()
            if proc.returncode == 0 and not ok:
                log += f"\nbuild produced no artifact at {output}"
        except FileNotFoundError as exc:
            ok, log = False, f"build tool not found: {exc}"
        except subprocess.TimeoutExpired:
            ok, log = False, f"build timed out after {timeout}s"
        artifacts.append(
            TargetArtifact(
                entry.name,
                commit_id,
                output.read_bytes() if ok else b"",
                ok,
                log if log else ("" if ok else "build failed"),
            )
        )
    return artifacts
