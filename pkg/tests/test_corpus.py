from __future__ import annotations

import itertools
import os
import random
import signal
import subprocess
import sys
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzci.corpus import (
    INDEX_NAME,
    CommandCoverageTarget,
    Corpus,
    CorpusError,
    CorpusInput,
    CorpusStore,
    CoverageParseError,
    CoverageSignature,
    OpaqueTarget,
    content_hash,
    merge,
    minimize,
    signature_of,
    signature_or_flag,
)


def inp(tag: bytes, edges) -> CorpusInput:
    return CorpusInput.from_bytes(tag, edges)


def random_corpus(rng: random.Random, max_inputs=12, max_edges=16, target="t") -> Corpus:
    n = rng.randint(0, max_inputs)
    edges = rng.randint(1, max_edges)
    return Corpus.of(
        target,
        [inp(b"in-%d-%d" % (i, rng.getrandbits(32)), rng.sample(range(edges), rng.randint(0, edges))) for i in range(n)],
    )


def optimal_cover_size(corpus: Corpus) -> int:
    """Brute force over all subsets, smallest first."""
    items = list(corpus)
    target = corpus.edges()
    for k in range(len(items) + 1):
        for combo in itertools.combinations(items, k):
            got = set()
            for i in combo:
                got |= i.signature.edges
            if got == target:
                return k
    raise AssertionError("unreachable")


def reference_greedy(corpus: Corpus) -> set[str]:
    """Straightforward restatement of the greedy rule used as an oracle."""
    uncovered = set(corpus.edges())
    if not uncovered:
        return {min(corpus.hashes())} if len(corpus) else set()
    chosen = set()
    while uncovered:
        best = max(sorted(corpus, key=lambda i: i.content_hash), key=lambda i: len(i.signature.edges & uncovered))
        chosen.add(best.content_hash)
        uncovered -= best.signature.edges
    return chosen


def test_signature_bounds():
    CoverageSignature(frozenset({0, 2**32 - 1}))
    with pytest.raises(CorpusError):
        CoverageSignature(frozenset({2**32}))
    with pytest.raises(CorpusError):
        CoverageSignature(frozenset({-1}))


def test_content_hash_identity():
    a = inp(b"abc", [1])
    assert a.content_hash == content_hash(b"abc")
    with pytest.raises(CorpusError):
        Corpus.of("t", [CorpusInput("0" * 64, b"abc", CoverageSignature())])


def test_minimize_three_inputs():
    a, b, c = inp(b"A", [1, 2]), inp(b"B", [2]), inp(b"C", [3])
    out = minimize(Corpus.of("t", [a, b, c]))
    assert out.hashes() == {a.content_hash, c.content_hash}


def test_minimize_single_and_empty():
    one = Corpus.of("t", [inp(b"x", [])])
    assert minimize(one) == one
    assert minimize(Corpus("t")) == Corpus("t")
    nothing = Corpus.of("t", [inp(b"x", []), inp(b"y", [])])
    assert len(minimize(nothing)) == 1


def test_minimize_tie_break_smallest_hash():
    x, y = inp(b"x", [1, 2]), inp(b"y", [1, 2])
    out = minimize(Corpus.of("t", [x, y]))
    assert out.hashes() == {min(x.content_hash, y.content_hash)}


def test_minimize_against_brute_force():
    rng = random.Random(1234)
    for _ in range(300):
        c = random_corpus(rng)
        m = minimize(c)
        assert m.edges() == c.edges()
        assert len(m) <= len(c)
        assert minimize(m) == m
        if len(c) > 1:
            assert m.hashes() == reference_greedy(c)
        if c.edges():
            assert len(m) >= optimal_cover_size(c)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.frozensets(st.integers(0, 20), max_size=8), max_size=10))
def test_minimize_properties(sigs):
    c = Corpus.of("t", [inp(b"%d" % i, s) for i, s in enumerate(sigs)])
    m = minimize(c)
    assert m.edges() == c.edges()
    assert m.hashes() <= c.hashes()
    assert minimize(m) == m


def test_merge_semantics():
    c = Corpus.of("t", [inp(b"a", [1])])
    a, b = [inp(b"b", [2])], [inp(b"c", [3]), inp(b"a", [1])]
    assert merge(c, []) == c
    assert merge(merge(c, a), b) == merge(c, a + b)
    assert len(merge(c, [inp(b"a", [9])])) == 1
    assert merge(c, [inp(b"a", [9])]).inputs[content_hash(b"a")].signature.edges == {1}
    with pytest.raises(CorpusError):
        merge(c, Corpus.of("other", a))


def test_growth_control_under_merge_minimize_cycles():
    rng = random.Random(5)
    corpus = Corpus("t")
    ever = set()
    for round_ in range(50):
        new = [inp(b"r%d-%d" % (round_, i), rng.sample(range(40), rng.randint(1, 4))) for i in range(5)]
        for n in new:
            ever |= n.signature.edges
        before = corpus.edges()
        corpus = minimize(merge(corpus, new))
        assert corpus.edges() >= before
        assert len(corpus) <= len(ever)


def test_opaque_and_command_targets(tmp_path):
    t = OpaqueTarget("t")
    assert signature_of(b"x", t) == signature_of(b"x", t)
    assert signature_of(b"x", t) != signature_of(b"y", t)
    script = tmp_path / "cov.py"
    script.write_text("import sys\ndata=open(sys.argv[1],'rb').read()\nprint(' '.join(str(b) for b in sorted(set(data))))\n")
    ct = CommandCoverageTarget("t", f"{sys.executable} {script} {{input}}")
    assert signature_of(b"AAB", ct).edges == {65, 66}
    bad = CommandCoverageTarget("t", f"{sys.executable} -c \"print('garbage')\"")
    with pytest.raises(CoverageParseError):
        signature_of(b"x", bad)
    sig, flagged = signature_or_flag(b"x", bad)
    assert flagged and sig.edges == frozenset()


def test_store_roundtrip_and_verify(tmp_path):
    store = CorpusStore(tmp_path)
    c = Corpus.of("t", [inp(b"a", [1, 2]), inp(b"b", []), inp(b"c", [3])])
    store.save(c)
    assert store.load("t") == Corpus.of("t", [CorpusInput(i.content_hash, i.data, i.signature) for i in c])
    assert store.verify("t") == []
    names = sorted(p.name for p in (tmp_path / "t").iterdir() if not p.name.startswith("."))
    assert names == sorted(c.hashes())
    lines = (tmp_path / "t" / INDEX_NAME).read_text().splitlines()
    assert lines[0].split()[0] == min(c.hashes())
    # shrink: files dropped from the index are removed
    store.save(minimize(c))
    assert store.load("t").hashes() == minimize(c).hashes()
    assert store.verify("t") == []


def test_verify_detects_damage(tmp_path):
    store = CorpusStore(tmp_path)
    c = Corpus.of("t", [inp(b"a", [1]), inp(b"b", [2])])
    store.save(c)
    victim = tmp_path / "t" / content_hash(b"a")
    victim.write_bytes(b"tampered")
    assert store.verify("t")
    victim.unlink()
    assert store.verify("t")


WRITER = r"""
import random, sys
from fuzzci.corpus import Corpus, CorpusInput, CorpusStore
store = CorpusStore(sys.argv[1])
rng = random.Random(int(sys.argv[2]))
i = 0
print("ready", flush=True)
while True:
    i += 1
    n = rng.randint(1, 30)
    inputs = [CorpusInput.from_bytes(rng.randbytes(rng.randint(1, 4096)), rng.sample(range(100), 3)) for _ in range(n)]
    store.save(Corpus.of("t", inputs))
"""


@pytest.mark.parametrize("seed", range(6))
def test_store_survives_sigkill(tmp_path, seed):
    proc = subprocess.Popen([sys.executable, "-c", WRITER, str(tmp_path), str(seed)], stdout=subprocess.PIPE)
    assert proc.stdout.readline().strip() == b"ready"
    time.sleep(0.05 + 0.05 * seed)
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    store = CorpusStore(tmp_path)
    assert store.verify("t") == []
    loaded = store.load("t")
    assert all(content_hash(i.data) == i.content_hash for i in loaded)
    store.save(loaded)  # the next writer cleans up leftovers
    assert store.verify("t") == []
    assert not [p for p in (tmp_path / "t").iterdir() if p.name.startswith(".tmp-")]
