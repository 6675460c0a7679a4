"""YAML configuration: loading, schema validation, defaults, and object builders.

The schema ships as ``fuzzci/data/config.schema.json``; unknown keys are
rejected. Relative paths are resolved against the config file's directory.
Model paths of the form ``builtin:<name>`` refer to the models packaged in
``fuzzci/data/models``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from fuzzci.campaign import DEFAULT_BACKENDS, ExternalBackend, ExternalBackendConfig, mock_registry
from fuzzci.commits import DEFAULT_FILE_UNIVERSE, SynthSpec
from fuzzci.fingerprint import DEFAULT_RULE_NAMES, DEFAULT_STRIP_SECTIONS, BuildTarget, ScrubRuleset
from fuzzci.model import MockModel, load_model, parse_model
from fuzzci.scheduler import (
    DEFAULT_CODE_EXTENSIONS,
    DEFAULT_KEYWORDS,
    DurationLadder,
    PriorityRules,
    QueueMode,
    QueuePolicy,
    SnapshotSchedule,
    schedule_snapshot,
)
from fuzzci.selection import ErrorPolicy, SelectionPolicy
from fuzzci.simulate import DEFAULT_DURATIONS_MIN

DEFAULT_CONFIG_NAME = "fuzzci.yaml"


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("fuzzci").joinpath("data/config.schema.json").read_text(encoding="utf-8"))


def builtin_models() -> list[str]:
    d = resources.files("fuzzci").joinpath("data/models")
    return sorted(p.name[: -len(".model")] for p in d.iterdir() if p.name.endswith(".model"))


def builtin_model(name: str) -> MockModel:
    path = resources.files("fuzzci").joinpath(f"data/models/{name}.model")
    if not path.is_file():
        raise ConfigError(f"no builtin model {name!r} (have: {', '.join(builtin_models())})")
    return parse_model(path.read_text(encoding="utf-8"), name=name)


def _validate(data: Any) -> None:
    validator = jsonschema.Draft7Validator(schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<top>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


@dataclass
class Config:
    data: dict
    base_dir: Path

    @classmethod
    def from_dict(cls, data: Mapping | None, base_dir: str | Path = ".") -> Config:
        data = copy.deepcopy(dict(data or {}))
        _validate(data)
        return cls(data, Path(base_dir).resolve())

    @classmethod
    def load(cls, path: str | Path) -> Config:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, path.parent)

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    def resolve(self, p: str | Path) -> Path:
        p = Path(p).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    def override(self, **values) -> Config:
        """Copy with top-level keys replaced (``None`` values are ignored)."""
        data = copy.deepcopy(self.data)
        for k, v in values.items():
            if v is not None:
                data[k] = v
        return Config.from_dict(data, self.base_dir)

    # --- scalars ---

    @property
    def seed(self) -> int:
        return self.data.get("seed", 0)

    @property
    def out(self) -> Path:
        return self.resolve(self.data.get("out", "fuzzci-out"))

    @property
    def library(self) -> str:
        return self.data.get("library", "default")

    @property
    def cores(self) -> int:
        return self.data.get("cores", 8)

    # --- builders ---

    def rules(self) -> ScrubRuleset:
        s = self.section("scrub")
        if not s.get("enabled", True):
            return ScrubRuleset.empty()
        return ScrubRuleset.from_names(
            s.get("rules", DEFAULT_RULE_NAMES),
            s.get("strip_sections", DEFAULT_STRIP_SECTIONS),
            s.get("extra"),
        )

    @property
    def digest(self) -> str:
        return self.section("scrub").get("digest", "sha256")

    def selection_policy(self) -> SelectionPolicy:
        s = self.section("selection")
        return SelectionPolicy(s.get("skip_identical", True), ErrorPolicy(s.get("error_policy", "fuzz_anyway")))

    def queue_policy(self) -> QueuePolicy:
        q = self.section("queue")
        return QueuePolicy(QueueMode(q.get("mode", "process_all")), q.get("selective", True))

    def ladder(self) -> DurationLadder:
        lad = self.section("ladder")
        try:
            return DurationLadder(lad.get("low", 900.0), lad.get("medium", 3600.0), lad.get("high", 28800.0))
        except ValueError as exc:
            raise ConfigError(f"ladder: {exc}") from exc

    def priority_rules(self) -> PriorityRules:
        p = self.section("priority")
        base = {"individual": "low", "group": "medium", "merge": "high", **p.get("base", {})}
        return PriorityRules(
            base=base,
            code_extensions=tuple(p.get("code_extensions", DEFAULT_CODE_EXTENSIONS)),
            keywords=tuple(p.get("keywords", DEFAULT_KEYWORDS)),
            size_threshold=p.get("size_threshold", 500),
            ladder=self.ladder(),
        )

    def snapshot(self) -> SnapshotSchedule | None:
        s = self.data.get("snapshot")
        if not s:
            return None
        try:
            return schedule_snapshot(s["calendar"], s.get("duration", 28800.0))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def target_names(self) -> list[str]:
        names = [t["name"] for t in self.data.get("targets", [])]
        if len(set(names)) != len(names):
            raise ConfigError("target names must be unique")
        return names

    def build_plan(self) -> list[BuildTarget]:
        plan = []
        for t in self.data.get("targets", []):
            if "command" not in t or "output" not in t:
                raise ConfigError(f"target {t['name']!r} needs command and output to be built from a repository")
            plan.append(BuildTarget(t["name"], t["command"], t["output"], tuple(t.get("sources", ()))))
        if not plan:
            raise ConfigError("no targets configured")
        return plan

    def target_sources(self) -> dict[str, list[str]]:
        out = {t["name"]: list(t.get("sources", ["*"])) for t in self.data.get("targets", [])}
        if not out:
            raise ConfigError("no targets configured")
        return out

    def synth_spec(self) -> SynthSpec:
        s = self.section("synth")
        kwargs = {k: v for k, v in s.items() if k != "embed_metadata"}
        if "file_universe" in kwargs:
            kwargs["file_universe"] = tuple(kwargs["file_universe"])
        else:
            kwargs["file_universe"] = DEFAULT_FILE_UNIVERSE
        spec = SynthSpec(**kwargs)
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from exc
        return spec

    @property
    def backend_names(self) -> tuple[str, ...]:
        return tuple(self.section("campaign").get("backends", DEFAULT_BACKENDS))

    @property
    def sanitizers(self) -> bool:
        return self.section("campaign").get("sanitizers", True)

    def load_model_ref(self, ref: str, name: str | None = None) -> MockModel:
        if ref.startswith("builtin:"):
            model = builtin_model(ref[len("builtin:"):])
        else:
            path = self.resolve(ref)
            if not path.is_file():
                raise ConfigError(f"model file not found: {path}")
            model = load_model(path)
        if name is not None:
            model = replace(model, name=name)
        return model

    def campaign_model(self) -> MockModel | None:
        ref = self.section("campaign").get("model")
        return self.load_model_ref(ref) if ref else None

    def backends(self) -> dict:
        c = self.section("campaign")
        names = self.backend_names
        if c.get("kind", "mock") == "mock":
            model = self.campaign_model()
            if model is None:
                raise ConfigError("campaign.kind is mock but campaign.model is not set")
            return mock_registry(model, names)
        ext = c.get("external", {})
        missing = [n for n in names if n not in ext]
        if missing:
            raise ConfigError(f"no external command configured for backend(s): {', '.join(missing)}")
        return {
            n: ExternalBackend(
                n,
                ExternalBackendConfig(
                    command=ext[n]["command"],
                    target_path=ext[n].get("target_path", str(self.out / "bin" / "{name}")),
                    grace_s=ext[n].get("grace_s"),
                    term_wait_s=ext[n].get("term_wait_s", 2.0),
                ),
            )
            for n in names
        }

    def simulation_models(self) -> dict[str, MockModel]:
        sim = self.section("simulation")
        libs = sim.get("libraries")
        if libs:
            return {name: self.load_model_ref(ref, name) for name, ref in sorted(libs.items())}
        ref = self.section("campaign").get("model")
        if not ref:
            raise ConfigError("simulation needs simulation.libraries or campaign.model")
        return {self.library: self.load_model_ref(ref, self.library)}

    @property
    def durations_s(self) -> list[float]:
        mins = self.section("simulation").get("durations_min", DEFAULT_DURATIONS_MIN)
        return [float(m) * 60.0 for m in mins]

    @property
    def trials(self) -> int:
        return self.section("simulation").get("trials", 10)

    @property
    def commits_per_trial(self) -> int:
        return self.section("simulation").get("commits_per_trial", 10)

    @property
    def carryover(self) -> bool:
        return self.section("simulation").get("carryover", True)
