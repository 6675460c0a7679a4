"""Aggregation of experiment results and report emission (JSON / CSV / plot data)."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from fuzzci.selection import SelectionStats

SCHEMA_VERSION = 1
METRICS = ("reached", "triggered", "detected")


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    """Bug sets of one trial: the union over one simulated commit chain."""

    library: str
    duration: float
    trial: int
    reached: frozenset[str]
    triggered: frozenset[str]
    detected: frozenset[str]


@dataclass(frozen=True)
class SweepCell:
    duration: float
    trials: int
    mean_reached: float
    mean_triggered: float
    mean_detected: float
    se_reached: float
    se_triggered: float
    se_detected: float

    def mean(self, metric: str) -> float:
        return getattr(self, f"mean_{metric}")

    def se(self, metric: str) -> float:
        return getattr(self, f"se_{metric}")


@dataclass(frozen=True)
class DurationSweepReport:
    durations: tuple[float, ...]
    per_library: dict[str, tuple[SweepCell, ...]]  # cells in ``durations`` order

    def cell(self, library: str, duration: float) -> SweepCell:
        for c in self.per_library[library]:
            if c.duration == duration:
                return c
        raise KeyError((library, duration))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "duration_sweep",
            "durations": list(self.durations),
            "per_library": {
                lib: [
                    {
                        "duration_s": c.duration,
                        "trials": c.trials,
                        "mean_reached": c.mean_reached,
                        "mean_triggered": c.mean_triggered,
                        "mean_detected": c.mean_detected,
                        "se_reached": c.se_reached,
                        "se_triggered": c.se_triggered,
                        "se_detected": c.se_detected,
                    }
                    for c in cells
                ]
                for lib, cells in sorted(self.per_library.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> DurationSweepReport:
        _check_schema(data, "duration_sweep")
        per_library = {
            lib: tuple(
                SweepCell(
                    duration=c["duration_s"],
                    trials=c["trials"],
                    mean_reached=c["mean_reached"],
                    mean_triggered=c["mean_triggered"],
                    mean_detected=c["mean_detected"],
                    se_reached=c["se_reached"],
                    se_triggered=c["se_triggered"],
                    se_detected=c["se_detected"],
                )
                for c in cells
            )
            for lib, cells in data["per_library"].items()
        }
        return cls(tuple(data["durations"]), per_library)


def _mean_se(values: Sequence[int]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    return mean, statistics.stdev(values) / math.sqrt(n)


def aggregate_sweep(results: Iterable[TrialRecord], trials: int) -> DurationSweepReport:
    """Per (library, duration) means and standard errors over ``trials`` trials.

    Every trial index 0..trials-1 must be present for every library and
    duration that appears; duplicates are rejected.
    """
    if trials < 1:
        raise ReportError("trials must be >= 1")
    cells: dict[tuple[str, float], dict[int, TrialRecord]] = {}
    libraries, durations = set(), set()
    for rec in results:
        libraries.add(rec.library)
        durations.add(rec.duration)
        slot = cells.setdefault((rec.library, rec.duration), {})
        if rec.trial in slot:
            raise ReportError(f"duplicate trial {rec.trial} for {rec.library} at {rec.duration}s")
        slot[rec.trial] = rec
    if not cells:
        raise ReportError("no results")
    missing = [
        f"{lib}@{dur:g}s#{t}"
        for lib in sorted(libraries)
        for dur in sorted(durations)
        for t in range(trials)
        if t not in cells.get((lib, dur), {})
    ]
    if missing:
        raise ReportError("missing cells: " + ", ".join(missing))

    ordered = tuple(sorted(durations))
    per_library = {}
    for lib in sorted(libraries):
        row = []
        for dur in ordered:
            recs = [cells[(lib, dur)][t] for t in range(trials)]
            stats = {m: _mean_se([len(getattr(r, m)) for r in recs]) for m in METRICS}
            row.append(
                SweepCell(
                    dur,
                    trials,
                    stats["reached"][0],
                    stats["triggered"][0],
                    stats["detected"][0],
                    stats["reached"][1],
                    stats["triggered"][1],
                    stats["detected"][1],
                )
            )
        per_library[lib] = tuple(row)
    return DurationSweepReport(ordered, per_library)


@dataclass(frozen=True)
class SavingsSummary:
    ensemble_size: int
    duration_s: float
    total_campaigns: int
    campaigns_skipped: int
    fraction_saved: float
    core_hours_saved: float
    per_library: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "savings",
            "ensemble_size": self.ensemble_size,
            "duration_s": self.duration_s,
            "total_campaigns": self.total_campaigns,
            "campaigns_skipped": self.campaigns_skipped,
            "fraction_saved": self.fraction_saved,
            "core_hours_saved": self.core_hours_saved,
            "per_library": self.per_library,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SavingsSummary:
        _check_schema(data, "savings")
        return cls(
            data["ensemble_size"],
            data["duration_s"],
            data["total_campaigns"],
            data["campaigns_skipped"],
            data["fraction_saved"],
            data["core_hours_saved"],
            data["per_library"],
        )


def core_hours(skipped_campaigns: float, ensemble_size: int, duration_s: float) -> float:
    return skipped_campaigns * ensemble_size * duration_s / 3600.0


def savings_summary(stats: SelectionStats, ensemble_size: int = 3, duration_s: float = 900.0) -> SavingsSummary:
    """Campaigns avoided by target selection and the cores-hours they would have used.

    A library contributes commits x harnesses target-campaigns, of which its
    identical fraction is skipped. The overall fraction saved is the
    commit-weighted mean of the per-library fractions.
    """
    if not stats.per_library:
        raise ReportError("empty selection stats")
    per_library = {}
    total = skipped = 0.0
    for row in stats.per_library:
        n = row.commits_processed * row.harnesses
        s = n * row.identical_fraction
        total += n
        skipped += s
        per_library[row.name] = {
            "campaigns": n,
            "campaigns_skipped": round(s, 6),
            "fraction_saved": row.identical_fraction,
            "core_hours_saved": round(core_hours(s, ensemble_size, duration_s), 6),
        }
    return SavingsSummary(
        ensemble_size,
        duration_s,
        int(round(total)),
        int(round(skipped)),
        stats.weighted_mean,
        core_hours(skipped, ensemble_size, duration_s),
        per_library,
    )


# --- emission ---


def _check_schema(data: dict, kind: str) -> None:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ReportError(f"unsupported schema_version {data.get('schema_version')!r}")
    if data.get("kind") != kind:
        raise ReportError(f"expected a {kind} report, got {data.get('kind')!r}")


def selection_to_dict(stats: SelectionStats) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "selection", **stats.to_dict()}


def report_to_dict(report) -> dict:
    if isinstance(report, SelectionStats):
        return selection_to_dict(report)
    return report.to_dict()


def load_report(path: str | Path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc
    return report_from_dict(data)


def report_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "duration_sweep":
        return DurationSweepReport.from_dict(data)
    if kind == "savings":
        return SavingsSummary.from_dict(data)
    if kind == "selection":
        _check_schema(data, "selection")
        return SelectionStats.from_dict(data)
    raise ReportError(f"unknown report kind {kind!r}")


def _prepare(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot write to {out}: {exc}") from exc
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def _csv_rows(report) -> tuple[list[str], list[list]]:
    if isinstance(report, DurationSweepReport):
        header = ["library", "duration_s", "trials"] + [f"{p}_{m}" for m in METRICS for p in ("mean", "se")]
        rows = []
        for lib, cells in sorted(report.per_library.items()):
            for c in cells:
                rows.append([lib, c.duration, c.trials] + [v for m in METRICS for v in (c.mean(m), c.se(m))])
        return header, rows
    if isinstance(report, SelectionStats):
        header = ["library", "commits_processed", "harnesses", "identical_fraction"]
        rows = [[r.name, r.commits_processed, r.harnesses, r.identical_fraction] for r in report.per_library]
        rows.append(["weighted_mean", sum(r.commits_processed for r in report.per_library), "", report.weighted_mean])
        return header, rows
    if isinstance(report, SavingsSummary):
        header = ["library", "campaigns", "campaigns_skipped", "fraction_saved", "core_hours_saved"]
        rows = [
            [lib, v["campaigns"], v["campaigns_skipped"], v["fraction_saved"], v["core_hours_saved"]]
            for lib, v in sorted(report.per_library.items())
        ]
        rows.append(["total", report.total_campaigns, report.campaigns_skipped, report.fraction_saved, report.core_hours_saved])
        return header, rows
    raise ReportError(f"cannot render {type(report).__name__} as CSV")


def emit(report, fmt: str, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Write ``report`` into ``out_dir``; returns the files written.

    ``plot_data`` writes one CSV per metric (``<stem>_reached.csv`` etc.) with
    columns library, duration_s, mean, stderr.
    """
    out = _prepare(Path(out_dir))
    if fmt == "json":
        path = out / f"{stem}.json"
        try:
            path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise ReportError(f"cannot write {path}: {exc}") from exc
        return [path]
    if fmt == "csv":
        path = out / f"{stem}.csv"
        _write_csv(path, *_csv_rows(report))
        return [path]
    if fmt == "plot_data":
        if not isinstance(report, DurationSweepReport):
            raise ReportError("plot_data is only defined for duration sweeps")
        paths = []
        for m in METRICS:
            path = out / f"{stem}_{m}.csv"
            rows = [
                [lib, c.duration, c.mean(m), c.se(m)]
                for lib, cells in sorted(report.per_library.items())
                for c in cells
            ]
            _write_csv(path, ["library", "duration_s", "mean", "stderr"], rows)
            paths.append(path)
        return paths
    raise ReportError(f"unknown format {fmt!r}")
