from __future__ import annotations

import os
import subprocess
from pathlib import Path

import pytest

from fuzzci.commits import CommitKind, CommitRecord, FileChange

GIT_ENV = {
    "GIT_AUTHOR_NAME": "Fixture",
    "GIT_AUTHOR_EMAIL": "fixture@example.invalid",
    "GIT_COMMITTER_NAME": "Fixture",
    "GIT_COMMITTER_EMAIL": "fixture@example.invalid",
    "GIT_CONFIG_NOSYSTEM": "1",
    "HOME": "/nonexistent",
}


class GitRepo:
    """Throwaway repository with deterministic commit dates."""

    def __init__(self, path: Path):
        self.path = path
        self.clock = 1_600_000_000
        path.mkdir(parents=True, exist_ok=True)
        self.git("init", "-q", "-b", "main")

    def git(self, *args: str) -> str:
        env = {**os.environ, **GIT_ENV}
        env["GIT_AUTHOR_DATE"] = env["GIT_COMMITTER_DATE"] = f"@{self.clock} +0000"
        return subprocess.run(
            ["git", "-C", str(self.path), *args], check=True, capture_output=True, text=True, env=env
        ).stdout

    def write(self, rel: str, text: str, mode: int | None = None) -> None:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        if mode is not None:
            p.chmod(mode)

    def commit(self, message: str, files: dict[str, str] | None = None) -> str:
        for rel, text in (files or {}).items():
            self.write(rel, text)
        self.clock += 60
        self.git("add", "-A")
        self.git("commit", "-q", "--allow-empty", "-m", message)
        return self.head()

    def head(self) -> str:
        return self.git("rev-parse", "HEAD").strip()


@pytest.fixture
def git_repo(tmp_path):
    return GitRepo(tmp_path / "repo")


# Build script for timestamped fixture targets: the artifact is the library
# source plus the build time, like a binary embedding its build date.
STAMPED_BUILD = """#!/bin/sh
set -e
{ cat src/lib.c; printf 'built %s\\n' "$(date -u +%Y-%m-%dT%H:%M:%S.%N)"; } > "$1"
"""


def make_stamped_repo(repo: GitRepo, pattern: str) -> list[str]:
    """One initial commit plus one per character of ``pattern``.

    ``c`` changes the library source, ``d`` touches documentation only. The
    true identical fraction over adjacent pairs is pattern.count('d') / len(pattern).
    """
    ids = [repo.commit("initial", {"src/lib.c": "int f(void) { return 0; }\n", "build.sh": STAMPED_BUILD, "README": "v0\n"})]
    for i, kind in enumerate(pattern, start=1):
        if kind == "c":
            ids.append(repo.commit(f"change code {i}", {"src/lib.c": f"int f(void) {{ return {i}; }}\n"}))
        else:
            ids.append(repo.commit(f"docs {i}", {"README": f"v{i}\n"}))
    return ids


def stamped_config(repo: GitRepo, out: Path, scrub: bool = True) -> dict:
    return {
        "library": "fixture",
        "out": str(out),
        "repo": {"path": str(repo.path)},
        "targets": [{"name": "lib_fuzzer", "command": "sh build.sh {output}", "output": "out/{target}.bin"}],
        "scrub": {"enabled": scrub},
    }


def record(
    cid: str,
    ts: int,
    files=(),
    parents=None,
    kind: CommitKind = CommitKind.INDIVIDUAL,
    message: str = "change",
) -> CommitRecord:
    return CommitRecord(
        id=cid,
        parent_ids=tuple(parents or ()),
        timestamp=ts,
        author="t",
        message=message,
        changed_files=tuple(FileChange(p, a, r) for p, a, r in files),
        kind=kind,
    )
