from __future__ import annotations

import json
import math
import random

import pytest

from fuzzci.config import builtin_model
from fuzzci.model import BugModel, Edge, MockModel
from fuzzci.report import (
    DurationSweepReport,
    ReportError,
    SavingsSummary,
    TrialRecord,
    aggregate_sweep,
    core_hours,
    emit,
    load_report,
    savings_summary,
)
from fuzzci.selection import LibraryStats, SelectionStats
from fuzzci.simulate import run_sweep


def rec(lib, dur, t, r=(), g=(), d=()):
    return TrialRecord(lib, dur, t, frozenset(r), frozenset(g), frozenset(d))


def test_single_trial_means_equal_counts():
    rep = aggregate_sweep([rec("x", 60.0, 0, "abc", "ab", "a")], 1)
    c = rep.cell("x", 60.0)
    assert (c.mean_reached, c.mean_triggered, c.mean_detected) == (3, 2, 1)
    assert c.trials == 1 and c.se_reached == 0.0


def test_means_and_standard_errors():
    recs = [rec("x", 1.0, 0, "ab", "a", "a"), rec("x", 1.0, 1, "abcd", "ab", "")]
    c = aggregate_sweep(recs, 2).cell("x", 1.0)
    assert c.mean_reached == 3.0 and c.mean_detected == 0.5
    assert c.se_reached == pytest.approx(1.0)  # stdev(2, 4) / sqrt(2)


def test_missing_and_duplicate_cells():
    with pytest.raises(ReportError, match=r"x@2s#1"):
        aggregate_sweep([rec("x", 1.0, 0), rec("x", 1.0, 1), rec("x", 2.0, 0)], 2)
    with pytest.raises(ReportError, match="duplicate"):
        aggregate_sweep([rec("x", 1.0, 0), rec("x", 1.0, 0)], 1)
    with pytest.raises(ReportError):
        aggregate_sweep([], 1)


def test_permutation_invariance_and_ordering():
    rng = random.Random(4)
    recs = []
    for lib in ("a", "b"):
        for dur in (10.0, 20.0, 40.0):
            for t in range(7):
                r = set(rng.sample("abcdefgh", rng.randint(0, 8)))
                g = {x for x in r if rng.random() < 0.6}
                d = {x for x in g if rng.random() < 0.6}
                recs.append(rec(lib, dur, t, r, g, d))
    base = aggregate_sweep(recs, 7)
    for _ in range(5):
        rng.shuffle(recs)
        assert aggregate_sweep(recs, 7) == base
    for cells in base.per_library.values():
        for c in cells:
            assert c.mean_detected <= c.mean_triggered <= c.mean_reached


def test_lua_like_model_finds_nothing():
    rep = run_sweep({"lua": builtin_model("lua")}, [300.0, 28800.0], trials=5, commits_per_trial=3)
    for c in rep.per_library["lua"]:
        assert c.mean_reached == c.mean_triggered == c.mean_detected == 0


def test_calibrated_bug_half_at_fifteen_minutes():
    m = MockModel({1: Edge(1, None)}, (BugModel("b", 1, math.log(2) / 900),), seed_edges=(1,))
    rep = run_sweep({"cal": m}, [900.0, 28800.0], trials=2000, commits_per_trial=1, backends=("solo",))
    short, long = rep.per_library["cal"]
    assert abs(short.mean_detected - 0.5) < 0.035
    assert long.mean_detected == pytest.approx(1.0, abs=1e-3)


def test_savings_php_and_zero():
    php = SelectionStats.from_rows([LibraryStats("php", 7821, 4, 0.64)])
    s = savings_summary(php)
    assert s.fraction_saved == pytest.approx(0.64)
    assert s.total_campaigns == 7821 * 4
    zero = savings_summary(SelectionStats.from_rows([LibraryStats("z", 10, 2, 0.0)]))
    assert zero.fraction_saved == 0 and zero.campaigns_skipped == 0 and zero.core_hours_saved == 0


def test_core_hours_arithmetic():
    assert core_hours(100, 3, 900) == pytest.approx(75.0)
    s = savings_summary(SelectionStats.from_rows([LibraryStats("l", 100, 1, 1.0)]), 3, 900)
    assert s.campaigns_skipped == 100 and s.core_hours_saved == pytest.approx(75.0)


def sweep() -> DurationSweepReport:
    recs = [
        rec(lib, dur, t, "abc"[: t + 1], "ab"[: t], "a"[: t])
        for lib in ("l1", "l2", "l3")
        for dur in (300.0, 900.0)
        for t in range(2)
    ]
    return aggregate_sweep(recs, 2)


def test_json_roundtrip(tmp_path):
    rep = sweep()
    (path,) = emit(rep, "json", tmp_path)
    assert load_report(path) == rep
    stats = SelectionStats.from_rows([LibraryStats("a", 3, 2, 0.5)], {"a": {0.5: 3}})
    (p2,) = emit(stats, "json", tmp_path, stem="sel")
    assert load_report(p2) == stats
    sv = savings_summary(stats)
    (p3,) = emit(sv, "json", tmp_path, stem="sav")
    assert load_report(p3) == sv
    assert json.loads(path.read_text())["schema_version"] == 1


def test_csv_rows_and_plot_data(tmp_path):
    rep = sweep()
    (path,) = emit(rep, "csv", tmp_path)
    lines = path.read_text().splitlines()
    assert len(lines) - 1 == 3 * 2
    files = emit(rep, "plot_data", tmp_path)
    assert [p.name for p in files] == ["report_reached.csv", "report_triggered.csv", "report_detected.csv"]
    assert files[0].read_text().splitlines()[0] == "library,duration_s,mean,stderr"


def test_emit_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError):
        emit(sweep(), "json", blocker / "sub")
    with pytest.raises(ReportError):
        emit(sweep(), "xml", tmp_path)
    with pytest.raises(ReportError):
        emit(SavingsSummary(3, 900, 1, 0, 0.0, 0.0, {}), "plot_data", tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 2, "kind": "savings"}')
    with pytest.raises(ReportError):
        load_report(bad)
