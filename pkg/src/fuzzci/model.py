"""Ground-truth model for the mock fuzzer backend.

The target is a forest of coverage edges. Root edges are exercised by any
input; every other edge becomes discoverable once its parent is covered and
is then found after an exponential delay whose rate shrinks geometrically
with depth (``base_rate * decay ** depth``). Bugs sit on edges.

Model file format (UTF-8, one record per line, ``#`` starts a comment)::

    @param base_rate 0.05          # discovery rate of depth-1 edges, per CPU-second
    @param decay 0.5               # rate multiplier per extra level of depth
    @param sanitizer_slowdown 2.0  # execution slowdown with sanitizers enabled
    @edge 1 -                      # root edge
    @edge 2 1                      # edge 2, parent 1, rate from depth
    @edge 9 2 0                    # explicit per-edge rate (0 = unreachable)
    @seed 2                        # initial seed corpus covers edge 2 (and its ancestors)
    bug_id reach_edge trigger_rate detect_prob sanitizer_required
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from fuzzci.corpus import Corpus, CorpusInput, CoverageSignature


class ModelError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "y"}
_FALSE = {"0", "false", "no", "n"}


@dataclass(frozen=True)
class BugModel:
    bug_id: str
    reach_edge: int
    trigger_rate: float  # per CPU-second, clock starts when reach_edge is covered
    detect_given_trigger: float = 1.0
    sanitizer_required: bool = True

    def __post_init__(self):
        if self.trigger_rate < 0 or math.isnan(self.trigger_rate):
            raise ModelError(f"bug {self.bug_id}: trigger_rate must be >= 0")
        if not 0.0 <= self.detect_given_trigger <= 1.0:
            raise ModelError(f"bug {self.bug_id}: detect probability must be in [0, 1]")


@dataclass(frozen=True)
class Edge:
    id: int
    parent: int | None
    rate: float | None = None  # None: derived from depth


@dataclass
class MockModel:
    edges: dict[int, Edge]
    bugs: tuple[BugModel, ...] = ()
    base_rate: float = 0.05
    decay: float = 0.5
    sanitizer_slowdown: float = 2.0
    seed_edges: tuple[int, ...] = ()
    name: str = "model"
    depth: dict[int, int] = field(init=False, repr=False)
    children: dict[int, tuple[int, ...]] = field(init=False, repr=False)
    rates: dict[int, float] = field(init=False, repr=False)
    paths: dict[int, frozenset[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()
        self.depth = {}
        self.paths = {}
        for e in sorted(self.edges):
            self._resolve(e)
        kids: dict[int, list[int]] = {e: [] for e in self.edges}
        for e in sorted(self.edges):
            p = self.edges[e].parent
            if p is not None:
                kids[p].append(e)
        self.children = {e: tuple(v) for e, v in kids.items()}
        self.rates = {
            e: (edge.rate if edge.rate is not None else self.base_rate * self.decay ** (self.depth[e] - 1))
            for e, edge in self.edges.items()
        }

    def _resolve(self, e: int) -> None:
        chain = []
        cur: int | None = e
        while cur is not None and cur not in self.depth:
            chain.append(cur)
            cur = self.edges[cur].parent
        d = self.depth[cur] if cur is not None else -1
        path = self.paths[cur] if cur is not None else frozenset()
        for node in reversed(chain):
            d += 1
            path = path | {node}
            self.depth[node] = d
            self.paths[node] = path

    def validate(self) -> None:
        if not self.edges:
            raise ModelError("model has no edges")
        if self.base_rate < 0 or not 0 < self.decay <= 1:
            raise ModelError("need base_rate >= 0 and 0 < decay <= 1")
        if self.sanitizer_slowdown < 1:
            raise ModelError("sanitizer_slowdown must be >= 1")
        for e, edge in self.edges.items():
            if edge.parent is not None and edge.parent not in self.edges:
                raise ModelError(f"edge {e} has unknown parent {edge.parent}")
            if edge.rate is not None and edge.rate < 0:
                raise ModelError(f"edge {e} has negative rate")
        for e in self.edges:
            seen = set()
            cur: int | None = e
            while cur is not None:
                if cur in seen:
                    raise ModelError(f"edge graph has a cycle through {e}")
                seen.add(cur)
                cur = self.edges[cur].parent
        ids = set()
        for bug in self.bugs:
            if bug.reach_edge not in self.edges:
                raise ModelError(f"bug {bug.bug_id} sits on unknown edge {bug.reach_edge}")
            if bug.bug_id in ids:
                raise ModelError(f"duplicate bug id {bug.bug_id}")
            ids.add(bug.bug_id)
        for e in self.seed_edges:
            if e not in self.edges:
                raise ModelError(f"seed edge {e} unknown")

    @property
    def roots(self) -> frozenset[int]:
        return frozenset(e for e, edge in self.edges.items() if edge.parent is None)

    def bug(self, bug_id: str) -> BugModel:
        for b in self.bugs:
            if b.bug_id == bug_id:
                return b
        raise KeyError(bug_id)

    def reachable_bugs(self, covered: frozenset[int] | set[int]) -> set[str]:
        """Bugs whose reach edge lies in ``covered``."""
        return {b.bug_id for b in self.bugs if b.reach_edge in covered}

    # --- inputs ---

    def input_for_edge(self, edge: int, origin: str = "seed", found_at: float = 0.0) -> CorpusInput:
        data = b"mock-edge:%d" % edge
        return CorpusInput.from_bytes(data, CoverageSignature(self.paths[edge]), origin, found_at)

    def initial_corpus(self, target_name: str) -> Corpus:
        return Corpus.of(target_name, [self.input_for_edge(e) for e in self.seed_edges])

    def target(self, name: str | None = None) -> MockTarget:
        return MockTarget(name or self.name, self)


@dataclass
class MockTarget:
    """Coverage oracle for a mock model.

    The empty input (and any input not produced by the mock backend) covers
    the root edges; ``mock-edge:<id>`` covers the path from a root to ``id``.
    """

    name: str
    model: MockModel

    def signature(self, data: bytes) -> CoverageSignature:
        if data.startswith(b"mock-edge:"):
            try:
                edge = int(data[len(b"mock-edge:") :])
            except ValueError:
                edge = None
            if edge is not None and edge in self.model.paths:
                return CoverageSignature(self.model.paths[edge])
        return CoverageSignature(self.model.roots)


# --- file format ---


def parse_model(text: str, name: str = "model") -> MockModel:
    params = {"base_rate": 0.05, "decay": 0.5, "sanitizer_slowdown": 2.0}
    edges: dict[int, Edge] = {}
    bugs = []
    seeds = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "@param":
                if len(tok) != 3 or tok[1] not in params:
                    raise ModelError(f"bad @param {line!r}")
                params[tok[1]] = float(tok[2])
            elif tok[0] == "@edge":
                if len(tok) not in (3, 4):
                    raise ModelError(f"bad @edge {line!r}")
                eid = int(tok[1])
                if eid in edges:
                    raise ModelError(f"duplicate edge {eid}")
                parent = None if tok[2] == "-" else int(tok[2])
                edges[eid] = Edge(eid, parent, float(tok[3]) if len(tok) == 4 else None)
            elif tok[0] == "@seed":
                seeds.extend(int(t) for t in tok[1:])
            elif tok[0].startswith("@"):
                raise ModelError(f"unknown directive {tok[0]}")
            else:
                if len(tok) != 5:
                    raise ModelError(f"bug line needs 5 fields: {line!r}")
                flag = tok[4].lower()
                if flag not in _TRUE | _FALSE:
                    raise ModelError(f"sanitizer_required must be a boolean: {tok[4]!r}")
                bugs.append(BugModel(tok[0], int(tok[1]), float(tok[2]), float(tok[3]), flag in _TRUE))
        except ValueError as exc:
            raise ModelError(f"line {lineno}: {exc}") from exc
    return MockModel(edges, tuple(bugs), seed_edges=tuple(seeds), name=name, **params)


def load_model(path: str | Path) -> MockModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from exc
    return parse_model(text, name=path.stem)


def format_model(model: MockModel) -> str:
    lines = [
        f"@param base_rate {model.base_rate!r}",
        f"@param decay {model.decay!r}",
        f"@param sanitizer_slowdown {model.sanitizer_slowdown!r}",
    ]
    for e in sorted(model.edges):
        edge = model.edges[e]
        parent = "-" if edge.parent is None else str(edge.parent)
        lines.append(f"@edge {e} {parent}" + (f" {edge.rate!r}" if edge.rate is not None else ""))
    if model.seed_edges:
        lines.append("@seed " + " ".join(str(e) for e in model.seed_edges))
    for b in model.bugs:
        lines.append(
            f"{b.bug_id} {b.reach_edge} {b.trigger_rate!r} {b.detect_given_trigger!r} {int(b.sanitizer_required)}"
        )
    return "\n".join(lines) + "\n"


def chain_model(length: int, bugs: tuple[BugModel, ...] = (), **params) -> MockModel:
    """Single path root=1 -> 2 -> ... -> length."""
    edges = {1: Edge(1, None)}
    for e in range(2, length + 1):
        edges[e] = Edge(e, e - 1)
    return MockModel(edges, bugs, **params)


def random_model(rng: random.Random, max_edges: int = 20, max_bugs: int = 5) -> MockModel:
    """Small random forest with random bugs; used by property tests."""
    n = rng.randint(1, max_edges)
    edges = {}
    for e in range(1, n + 1):
        parent = None if e == 1 or rng.random() < 0.15 else rng.randint(1, e - 1)
        rate = None if rng.random() < 0.8 else rng.choice([0.0, rng.uniform(0.0, 0.1)])
        edges[e] = Edge(e, parent, rate)
    bugs = tuple(
        BugModel(
            f"B{i}",
            rng.randint(1, n),
            rng.choice([0.0, rng.uniform(0.0, 0.05), rng.uniform(0.0, 1.0)]),
            rng.random(),
            rng.random() < 0.5,
        )
        for i in range(rng.randint(0, max_bugs))
    )
    seeds = tuple(sorted(rng.sample(range(1, n + 1), rng.randint(0, min(3, n)))))
    return MockModel(
        edges,
        bugs,
        base_rate=rng.uniform(0.001, 0.2),
        decay=rng.uniform(0.2, 1.0),
        sanitizer_slowdown=rng.choice([1.0, 2.0]),
        seed_edges=seeds,
    )
