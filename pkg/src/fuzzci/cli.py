"""Command-line entry point: ``fuzzci scan|run|simulate|report``.

Exit codes: 0 success, 1 fatal config/environment error, 2 finished but some
commits could not be processed.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import shutil
import signal
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from fuzzci.campaign import CampaignError
from fuzzci.commits import CommitIngestError, CommitRecord, synth_stream, walk_history
from fuzzci.config import DEFAULT_CONFIG_NAME, Config, ConfigError
from fuzzci.fingerprint import (
    BuildTarget,
    FingerprintCache,
    FingerprintError,
    ScrubRuleset,
    compare,
    fingerprint,
)
from fuzzci.model import ModelError
from fuzzci.pipeline import Coordinator, RepoBuilder, SyntheticBuilder
from fuzzci.report import ReportError, emit, load_report, savings_summary
from fuzzci.scheduler import JobLog, Scheduler, SchedulerError
from fuzzci.selection import Decision, SelectionDecision, SelectionError, SelectionPolicy, accumulate, decide
from fuzzci.simulate import run_sweep

log = logging.getLogger("fuzzci")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
FATAL_ERRORS = (
    ConfigError,
    CommitIngestError,
    FingerprintError,
    ModelError,
    ReportError,
    SchedulerError,
    SelectionError,
    CampaignError,
)


class CLIError(RuntimeError):
    pass


# --- helpers ---


def load_config(args: argparse.Namespace) -> Config:
    if args.config is not None:
        cfg = Config.load(args.config)
    elif Path(DEFAULT_CONFIG_NAME).is_file():
        cfg = Config.load(DEFAULT_CONFIG_NAME)
    else:
        cfg = Config.from_dict({}, Path.cwd())
    out = str(Path(args.out).resolve()) if getattr(args, "out", None) else None
    return cfg.override(seed=getattr(args, "seed", None), out=out)


def check_build_tools(plan: Sequence[BuildTarget]) -> None:
    for entry in plan:
        argv = shlex.split(entry.command)
        if not argv:
            raise CLIError(f"target {entry.name!r} has an empty build command")
        tool = argv[0]
        if "{" in tool:
            continue
        if shutil.which(tool) is None:
            raise CLIError(
                f"build tool {tool!r} for target {entry.name!r} not found on PATH; "
                f"install it or change targets[].command in the config"
            )


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- scan ---


def scan_fingerprints(
    records: Sequence[CommitRecord],
    plan: Sequence[BuildTarget],
    rules: ScrubRuleset,
    digest: str = "sha256",
    cache: FingerprintCache | None = None,
    repo: str | Path = ".",
) -> list[tuple[CommitRecord, dict[str, str], set[str]]]:
    """Fingerprint commits newest first; stops at the first commit where no target builds."""
    builder = RepoBuilder(Path(repo), plan)
    rhash = rules.ruleset_hash()
    out = []
    for commit in reversed(records):
        cached = {b.name: cache.get(commit.id, b.name, rhash) if cache else None for b in plan}
        if all(v is not None for v in cached.values()):
            out.append((commit, {k: v for k, v in cached.items() if v}, set()))
            continue
        artifacts = builder.build(commit)
        digests, failed = {}, set()
        for art in artifacts:
            if art.build_ok:
                fp = fingerprint(art, rules, digest)
                digests[art.target_name] = fp.digest
                if cache is not None:
                    cache.append(fp, rhash)
            else:
                failed.add(art.target_name)
                log.info("target %s does not build at %s: %s", art.target_name, commit.id[:12], art.build_log.strip()[-200:])
        if not digests:
            log.info("no target builds at %s; stopping the scan there", commit.id[:12])
            break
        out.append((commit, digests, failed))
    return out


def scan_decisions(fps, library: str, policy: SelectionPolicy = SelectionPolicy()) -> list[SelectionDecision]:
    """Compare each commit with the one before it (``fps`` is newest first)."""
    decisions = []
    for (newer, cur, bad_new), (_, prev, bad_old) in zip(fps, fps[1:]):
        cs = compare(cur, prev, bad_new | bad_old, newer.id)
        decisions.append(decide(cs, policy, library))
    return decisions


def cmd_scan(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    repo = cfg.section("repo")
    if not repo:
        raise CLIError("scan needs a repo section in the config")
    n = args.commits if args.commits is not None else repo.get("count", 50)
    if n < 2:
        raise CLIError("scan needs at least 2 commits to form a comparison pair")
    plan = cfg.build_plan()
    check_build_tools(plan)
    rules = ScrubRuleset.empty() if args.no_scrub else cfg.rules()
    repo_path = cfg.resolve(repo["path"])
    rev_range = tuple(repo["range"]) if "range" in repo else None
    records = walk_history(repo_path, rev_range, count=n, branch=repo.get("branch"))
    out = cfg.out / "scan"
    out.mkdir(parents=True, exist_ok=True)
    cache = FingerprintCache(out / "fingerprints.tsv", cfg.digest)
    fps = scan_fingerprints(records, plan, rules, cfg.digest, cache, repo_path)
    if len(fps) < 2:
        raise CLIError(f"only {len(fps)} buildable commit(s) found; nothing to compare")
    decisions = scan_decisions(fps, cfg.library, cfg.selection_policy())
    stats = accumulate(decisions)
    emit(stats, "json", out, "selection")
    emit(stats, "csv", out, "selection")
    emit(savings_summary(stats, len(cfg.backend_names), cfg.ladder().low), "json", out, "savings")
    row = stats.per_library[0]
    print(
        f"{row.name}: {row.commits_processed} comparisons, {row.harnesses} targets, "
        f"{row.identical_fraction:.1%} identical (scanned {len(fps)} of {len(records)} commits)"
    )
    return EXIT_OK


# --- run ---


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if args.mode is not None:
        cfg = cfg.override(queue={**cfg.section("queue"), "mode": args.mode})
    if args.cores is not None:
        cfg = cfg.override(cores=args.cores)
    if "repo" in cfg.data:
        repo = cfg.section("repo")
        plan = cfg.build_plan()
        check_build_tools(plan)
        count = args.commits if args.commits is not None else repo.get("count")
        rev_range = tuple(repo["range"]) if "range" in repo else None
        stream = walk_history(cfg.resolve(repo["path"]), rev_range, count=count, branch=repo.get("branch"))
        builder = RepoBuilder(cfg.resolve(repo["path"]), plan, install_dir=cfg.out / "bin")
    else:
        spec = cfg.synth_spec()
        if args.commits is not None:
            spec = cfg.override(synth={**cfg.section("synth"), "n_commits": args.commits}).synth_spec()
        stream = synth_stream(spec, cfg.seed)
        builder = SyntheticBuilder(cfg.target_sources(), cfg.section("synth").get("embed_metadata", True))
    backends = cfg.backends()
    scheduler = Scheduler(
        cfg.target_names,
        cfg.queue_policy(),
        cfg.selection_policy(),
        cfg.priority_rules(),
        cfg.backend_names,
        budget=cfg.cores,
        sanitizers_enabled=cfg.sanitizers,
        library=cfg.library,
        seed=cfg.seed,
    )
    coord = Coordinator(
        scheduler,
        builder,
        backends,
        cfg.out,
        cfg.rules(),
        cfg.digest,
        cfg.snapshot(),
        cfg.campaign_model() if cfg.section("campaign").get("kind", "mock") == "mock" else None,
    )

    def drain(signum, frame):
        log.warning("signal %d received; finishing the current job and flushing state", signum)
        coord.stop_requested = True
        signal.signal(signum, signal.SIG_DFL)

    previous = {s: signal.signal(s, drain) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        summary = coord.process(stream)
    finally:
        for s, h in previous.items():
            signal.signal(s, h)
    _write_json(cfg.out / "run_summary.json", {**vars(summary), "exit_code": summary.exit_code})
    print(
        f"{summary.commits_seen} commits, {summary.jobs} jobs, {summary.campaigns} campaigns, "
        f"{summary.campaigns_skipped} skipped, {summary.cancellations} cancelled, "
        f"{summary.commits_unprocessable} unprocessable" + (" (stopped early)" if summary.stopped_early else "")
    )
    return summary.exit_code


# --- simulate ---


def _parse_durations(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CLIError(f"bad --durations {text!r}; expected comma-separated minutes") from None
    if not vals or any(v <= 0 for v in vals):
        raise CLIError("--durations must list positive minutes")
    return vals


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    sim = dict(cfg.section("simulation"))
    if args.durations is not None:
        sim["durations_min"] = _parse_durations(args.durations)
    if args.trials is not None:
        sim["trials"] = args.trials
    if args.commits_per_trial is not None:
        sim["commits_per_trial"] = args.commits_per_trial
    if args.model:
        sim["libraries"] = dict(_split_model_arg(m) for m in args.model)
    cfg = cfg.override(simulation=sim)
    models = cfg.simulation_models()
    report = run_sweep(
        models,
        cfg.durations_s,
        cfg.trials,
        cfg.commits_per_trial,
        cfg.seed,
        backends=cfg.backend_names,
        sanitizers_enabled=cfg.sanitizers,
        carryover=cfg.carryover,
    )
    out = cfg.out
    for fmt in ("json", "csv", "plot_data"):
        emit(report, fmt, out, "sweep")
    for lib, cells in sorted(report.per_library.items()):
        for c in cells:
            print(
                f"{lib:>12} {c.duration / 60:>6g} min  reached {c.mean_reached:.2f}  "
                f"triggered {c.mean_triggered:.2f}  detected {c.mean_detected:.2f}"
            )
    return EXIT_OK


def _split_model_arg(text: str) -> tuple[str, str]:
    name, sep, ref = text.partition("=")
    if not sep or not name or not ref:
        raise CLIError(f"bad --model {text!r}; expected NAME=PATH or NAME=builtin:MODEL")
    return name, ref


# --- report ---


def decisions_from_log(path: str | Path) -> list[SelectionDecision]:
    """Rebuild per-commit selection decisions from a run's job log."""
    per_commit: dict[str, dict] = defaultdict(lambda: {"per_target": {}, "reason": {}, "library": "default"})
    order = []
    for rec in JobLog.read(path):
        if rec.get("event") != "decision" or rec.get("snapshot"):
            continue
        cid = rec["commit_id"]
        if cid not in per_commit:
            order.append(cid)
        entry = per_commit[cid]
        entry["per_target"][rec["target"]] = Decision(rec["decision"])
        entry["reason"][rec["target"]] = rec["reason"]
        entry["library"] = rec.get("library", "default")
    return [SelectionDecision(cid, **per_commit[cid]) for cid in order]


def cmd_report(args: argparse.Namespace) -> int:
    src = Path(args.input)
    if not src.exists():
        raise CLIError(f"input {src} does not exist")
    if src.suffix == ".jsonl":
        decisions = decisions_from_log(src)
        if not decisions:
            raise CLIError(f"{src} holds no selection decisions")
        report = accumulate(decisions)
    else:
        report = load_report(src)
    out = Path(args.out) if args.out else src.parent
    written = []
    for fmt in args.format or ["json", "csv"]:
        written += emit(report, fmt, out, args.stem or src.stem)
    for p in written:
        print(p)
    return EXIT_OK


# --- entry ---


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuzzci", description="Commit-driven continuous fuzzing with target selection.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_seed=True):
        sp.add_argument("--config", type=Path, help=f"YAML config (default: ./{DEFAULT_CONFIG_NAME} if present)")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        if with_seed:
            sp.add_argument("--seed", type=int, help="rng seed (overrides config 'seed')")

    sp = sub.add_parser("scan", help="measure identical-target fractions over repository history")
    common(sp)
    sp.add_argument("--commits", type=int, help="number of newest commits to scan")
    sp.add_argument("--no-scrub", action="store_true", help="fingerprint raw bytes without scrub rules")
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("run", help="process a commit stream end to end")
    common(sp)
    sp.add_argument("--commits", type=int, help="limit the stream length")
    sp.add_argument("--mode", choices=["process_all", "latest_only", "interrupt"])
    sp.add_argument("--cores", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("simulate", help="campaign-duration sweep on mock models (virtual clock)")
    common(sp)
    sp.add_argument("--durations", help="comma-separated campaign durations in minutes")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--commits-per-trial", type=int)
    sp.add_argument("--model", action="append", help="NAME=PATH or NAME=builtin:MODEL; repeatable")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="re-emit stored results or summarize a job log")
    sp.add_argument("--input", required=True, help="report JSON or job_log.jsonl")
    sp.add_argument("--format", action="append", choices=["json", "csv", "plot_data"])
    sp.add_argument("--out", help="output directory (default: next to the input)")
    sp.add_argument("--stem", help="output file stem (default: input file stem)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (CLIError, *FATAL_ERRORS) as exc:
        print(f"fuzzci: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
