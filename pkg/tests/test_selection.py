from __future__ import annotations

import random

import pytest

from fuzzci.fingerprint import ChangeSet, ChangeStatus, compare
from fuzzci.selection import (
    Decision,
    ErrorPolicy,
    LibraryStats,
    SelectionError,
    SelectionPolicy,
    SelectionStats,
    accumulate,
    decide,
    weighted_mean,
)

S = ChangeStatus
# (library, commits processed, identical-target fraction) measured on seven real libraries
PUBLISHED_ROWS = [
    ("libsndfile", 241, 0.64),
    ("libtiff", 801, 0.53),
    ("libpng", 1158, 0.41),
    ("lua", 2285, 0.20),
    ("poppler", 1919, 0.44),
    ("openssl", 7847, 0.63),
    ("php", 7821, 0.64),
]


def test_all_identical_skips_everything():
    cs = compare({"a": "1", "b": "2"}, {"a": "1", "b": "2"}, commit_id="c")
    d = decide(cs)
    assert d.targets(Decision.SKIP) == ["a", "b"]
    assert d.targets(Decision.FUZZ) == []
    assert d.cores_saved(3) == 6


def test_policy_off_fuzzes_everything():
    cs = ChangeSet({"a": S.IDENTICAL, "b": S.CHANGED, "c": S.UNBUILDABLE, "d": S.NEW})
    d = decide(cs, SelectionPolicy(skip_identical=False))
    assert d.targets(Decision.FUZZ) == ["a", "b", "c", "d"]


def test_openssl_like_one_of_twelve():
    base = {f"t{i}": str(i) for i in range(12)}
    cur = dict(base, t7="changed")
    d = decide(compare(cur, base))
    assert d.targets(Decision.FUZZ) == ["t7"]
    assert len(d.targets(Decision.SKIP)) == 11


@pytest.mark.parametrize(
    "policy,expected", [(ErrorPolicy.FUZZ_ANYWAY, Decision.FUZZ), (ErrorPolicy.SKIP_AND_FLAG, Decision.ERROR)]
)
def test_unbuildable_follows_error_policy(policy, expected):
    cs = ChangeSet({"x": S.UNBUILDABLE, "y": S.IDENTICAL})
    d = decide(cs, SelectionPolicy(error_policy=policy))
    assert d.per_target["x"] is expected
    assert d.reason == {"x": "unbuildable", "y": "identical"}


def test_skip_only_for_identical_and_error_only_for_unbuildable():
    rng = random.Random(0)
    statuses = [S.IDENTICAL, S.CHANGED, S.NEW, S.UNBUILDABLE, S.REMOVED]
    for _ in range(500):
        cs = ChangeSet({f"t{i}": rng.choice(statuses) for i in range(rng.randint(1, 6))})
        pol = SelectionPolicy(rng.random() < 0.7, rng.choice(list(ErrorPolicy)))
        d = decide(cs, pol)
        for t, dec in d.per_target.items():
            if dec is Decision.SKIP:
                assert cs.status[t] is S.IDENTICAL
            if dec is Decision.ERROR:
                assert cs.status[t] is S.UNBUILDABLE
        assert not any(cs.status[t] is S.REMOVED for t in d.per_target)
        if not pol.skip_identical:
            assert Decision.SKIP not in d.per_target.values()


def test_published_rows_weighted_mean():
    rows = [LibraryStats(n, c, 1, f) for n, c, f in PUBLISHED_ROWS]
    # independent hand computation
    expected = sum(c * f for _, c, f in PUBLISHED_ROWS) / sum(c for _, c, _ in PUBLISHED_ROWS)
    assert weighted_mean(rows) == pytest.approx(expected)
    assert abs(weighted_mean(rows) - 0.55) <= 0.01


def test_accumulate_pairs_and_commit_weights():
    decisions = []
    for i in range(10):  # lib a: 1 target, 2 of 10 identical
        decisions.append(decide(ChangeSet({"t": S.IDENTICAL if i < 2 else S.CHANGED}, f"a{i}"), library="a"))
    for i in range(10):  # lib b: 2 targets, 12 of 20 pairs identical
        st = {"u": S.IDENTICAL if i < 6 else S.CHANGED, "v": S.IDENTICAL if i < 6 else S.CHANGED}
        decisions.append(decide(ChangeSet(st, f"b{i}"), library="b"))
    stats = accumulate(decisions)
    assert stats.library("a").identical_fraction == pytest.approx(0.2)
    assert stats.library("b").identical_fraction == pytest.approx(0.6)
    assert stats.library("b").harnesses == 2
    assert stats.weighted_mean == pytest.approx(0.4)
    assert stats.per_commit_distribution["b"] == {1.0: 6, 0.0: 4}
    shuffled = decisions[:]
    random.Random(1).shuffle(shuffled)
    assert accumulate(shuffled).to_dict() == stats.to_dict()


def test_accumulate_grouping_and_all_skip():
    d = [decide(ChangeSet({"t": S.IDENTICAL}, f"c{i}")) for i in range(4)]
    stats = accumulate(d, grouping={f"c{i}": "lib" for i in range(4)})
    assert stats.library("lib").identical_fraction == 1.0


def test_accumulate_errors():
    with pytest.raises(SelectionError):
        accumulate([])
    with pytest.raises(SelectionError):
        LibraryStats("x", 1, 1, 1.5)


def test_stats_dict_roundtrip():
    stats = SelectionStats.from_rows([LibraryStats(n, c, 2, f) for n, c, f in PUBLISHED_ROWS], {"lua": {0.5: 3}})
    assert SelectionStats.from_dict(stats.to_dict()) == stats
