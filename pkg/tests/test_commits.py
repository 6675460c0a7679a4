from __future__ import annotations

import subprocess

import pytest

from fuzzci.commits import (
    CommitIngestError,
    CommitKind,
    SynthSpec,
    check_stream,
    stream_digest,
    synth_stream,
    walk_history,
)

from conftest import record


def numstat_oracle(repo, commit_id):
    """Per-file line counts straight from git's own diff listing."""
    out = subprocess.run(
        ["git", "-C", str(repo.path), "diff", "--numstat", "--no-renames", f"{commit_id}^", commit_id],
        check=True,
        capture_output=True,
        text=True,
    ).stdout
    rows = []
    for line in out.splitlines():
        a, r, p = line.split("\t")
        rows.append((p, int(a), int(r)))
    return sorted(rows)


def test_linear_history(git_repo):
    ids = [git_repo.commit(f"c{i}", {"f.txt": f"{i}\n"}) for i in range(3)]
    recs = walk_history(git_repo.path)
    assert [r.id for r in recs] == ids
    assert recs[0].parent_ids == ()
    assert [r.parent_ids for r in recs[1:]] == [(ids[0],), (ids[1],)]
    assert all(r.kind is CommitKind.INDIVIDUAL for r in recs)
    assert [r.timestamp for r in recs] == sorted(r.timestamp for r in recs)
    check_stream(recs)


def test_readme_only_change_matches_git_diff(git_repo):
    git_repo.commit("init", {"src/a.c": "int a;\n", "README.md": "hello\n"})
    b = git_repo.commit("docs", {"README.md": "hello\nworld\nagain\n"})
    rec = walk_history(git_repo.path)[-1]
    assert rec.id == b
    got = sorted((f.path, f.lines_added, f.lines_removed) for f in rec.changed_files)
    assert got == numstat_oracle(git_repo, b)
    assert [g[0] for g in got] == ["README.md"]
    assert rec.size == 2


def test_merge_commit_kind(git_repo):
    git_repo.commit("root", {"a": "1\n"})
    git_repo.git("checkout", "-q", "-b", "side")
    git_repo.commit("side", {"b": "1\n"})
    git_repo.git("checkout", "-q", "main")
    git_repo.commit("main", {"c": "1\n"})
    git_repo.clock += 60
    git_repo.git("merge", "-q", "--no-ff", "-m", "merge side", "side")
    recs = walk_history(git_repo.path)
    assert recs[-1].kind is CommitKind.MERGE
    assert len(recs[-1].parent_ids) == 2
    # first-parent diff of the merge brings in the side branch's file
    assert [f.path for f in recs[-1].changed_files] == ["b"]
    check_stream(recs)


def test_count_and_range(git_repo):
    ids = [git_repo.commit(f"c{i}", {"f": f"{i}\n"}) for i in range(5)]
    assert [r.id for r in walk_history(git_repo.path, count=2)] == ids[-2:]
    assert [r.id for r in walk_history(git_repo.path, (ids[1], ids[3]))] == ids[2:4]
    check_stream(walk_history(git_repo.path, (ids[1], ids[3])), allow_external_parents=True)


def test_bad_repo_and_range(tmp_path, git_repo):
    with pytest.raises(CommitIngestError):
        walk_history(tmp_path / "nope")
    (tmp_path / "plain").mkdir()
    with pytest.raises(CommitIngestError):
        walk_history(tmp_path / "plain")
    git_repo.commit("only", {"f": "x\n"})
    with pytest.raises(CommitIngestError):
        walk_history(git_repo.path, ("deadbeef", "HEAD"))
    with pytest.raises(CommitIngestError):
        walk_history(git_repo.path, ("HEAD", "HEAD"))


def test_synth_deterministic():
    spec = SynthSpec(n_commits=10, merge_probability=0.0)
    a, b = synth_stream(spec, 42), synth_stream(spec, 42)
    assert stream_digest(a) == stream_digest(b)
    assert stream_digest(a) != stream_digest(synth_stream(spec, 43))
    assert all(r.kind is not CommitKind.MERGE for r in a)
    check_stream(a)


def test_synth_forced_merges():
    recs = synth_stream(SynthSpec(n_commits=3, merge_probability=1.0), 0)
    assert recs[0].kind is not CommitKind.MERGE
    assert [r.kind for r in recs[1:]] == [CommitKind.MERGE, CommitKind.MERGE]
    check_stream(recs)


def test_synth_merge_fraction():
    recs = synth_stream(SynthSpec(n_commits=1000, merge_probability=0.5), 7)
    frac = sum(r.kind is CommitKind.MERGE for r in recs[1:]) / 999
    assert abs(frac - 0.5) <= 0.05
    check_stream(recs)


def test_synth_groups_follow_window():
    spec = SynthSpec(n_commits=300, merge_probability=0.0, mean_interarrival_s=120, group_window_s=60)
    recs = synth_stream(spec, 1)
    ts = [r.timestamp for r in recs]
    for i, r in enumerate(recs):
        near = (i > 0 and ts[i] - ts[i - 1] <= 60) or (i + 1 < len(ts) and ts[i + 1] - ts[i] <= 60)
        assert (r.kind is CommitKind.GROUP) == near
    assert any(r.kind is CommitKind.GROUP for r in recs)


def test_synth_fixed_change_size():
    spec = SynthSpec(n_commits=50, change_size_distribution={"dist": "fixed", "value": 7})
    for r in synth_stream(spec, 3):
        assert all(f.lines_added + f.lines_removed == 7 for f in r.changed_files)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_commits": 0},
        {"merge_probability": 1.5},
        {"file_universe": ()},
        {"change_size_distribution": {"dist": "poisson"}},
    ],
)
def test_synth_invalid_spec(kwargs):
    with pytest.raises(CommitIngestError):
        synth_stream(SynthSpec(**kwargs), 0)


def test_check_stream_rejects_bad_streams():
    a = record("a", 1)
    with pytest.raises(CommitIngestError):
        check_stream([a, a])
    with pytest.raises(CommitIngestError):
        check_stream([record("b", 1, parents=["a"]), a])
    with pytest.raises(CommitIngestError):
        check_stream([a, record("m", 2, parents=["a"], kind=CommitKind.MERGE)])
