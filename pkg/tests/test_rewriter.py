import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laclip_kit.dataset import read_augmented, write_augmented
from laclip_kit.errors import BackendError, ConfigError, EmptyRewrite, UnknownStrategy
from laclip_kit.rewriter import (STRATEGIES, TASK_SENTENCE, FixtureCompletion, HttpCompletion, MetaPair,
                                 PromptContext, RewriteCache, build_prompt, cache_key, item_seed, load_registry,
                                 postprocess_completion, rewrite_dataset)
from laclip_kit.textaug import AugmentedRecord

GOLDEN = Path(__file__).parent / "golden"
GOLDEN_PROMPTS = [("chatgpt", 1), ("bard", 0), ("mscoco", 0), ("human", 0)]
MOUNTAIN = ("man driving a car through the mountains => "
            "A man confidently navigating a winding mountain road with breathtaking views.")


def records(n=2):
    caps = ["a dog runs on the grass", "two cats sleep on a red sofa", "a boat on a calm lake",
            "people walking in the city at night"]
    return [AugmentedRecord(f"r{i}", f"img{i}", [caps[i % len(caps)]]) for i in range(n)]


@pytest.mark.parametrize("strategy,seed", GOLDEN_PROMPTS)
def test_prompt_golden(strategy, seed):
    _, text = build_prompt(strategy, "a dog on grass", np.random.default_rng(seed))
    assert text.encode() == (GOLDEN / f"prompt_{strategy}_seed{seed}.txt").read_bytes()
    lines = text.split("\n")
    assert len(lines) == 5
    assert lines[0] == TASK_SENTENCE
    assert lines[-1] == "a dog on grass =>"
    assert all(" => " in line for line in lines[1:4])


def test_pinned_seed_contains_mountain_pair():
    _, text = build_prompt("chatgpt", "a dog on grass", np.random.default_rng(1))
    assert MOUNTAIN in text.split("\n")
    assert text.endswith("a dog on grass =>")


def test_registry_shape():
    reg = load_registry()
    for s in STRATEGIES:
        assert reg.size(s) == 16
    assert MetaPair("man driving a car through the mountains",
                    "A man confidently navigating a winding mountain road with breathtaking views.",
                    "chatgpt") == reg.pairs["chatgpt"][12]
    for group in reg.mscoco:
        assert len(set(group)) >= 2
    with pytest.raises(UnknownStrategy):
        reg.size("gpt5")


def test_prompt_deterministic_and_seed_sensitive():
    a = build_prompt("bard", "a cat", np.random.default_rng(3))[1]
    assert a == build_prompt("bard", "a cat", np.random.default_rng(3))[1]
    b = build_prompt("bard", "a cat", np.random.default_rng(4))[1]
    la, lb = a.split("\n"), b.split("\n")
    assert la[0] == lb[0] and la[4] == lb[4]


def test_reachable_orderings():
    pool = load_registry().pairs["human"]
    index = {p: i for i, p in enumerate(pool)}
    seen = set()
    for seed in range(2000):
        ctx, _ = build_prompt("human", "q", np.random.default_rng(seed))
        triple = tuple(index[e] for e in ctx.examples)
        assert len(set(triple)) == 3
        seen.add(triple)
    # 16*15*14 = 3360 ordered triples; 2000 uniform draws hit about 1500 of them
    assert 1300 < len(seen) <= 3360


def test_mscoco_pairs_are_same_image():
    reg = load_registry()
    for seed in range(50):
        ctx, _ = build_prompt("mscoco", "q", np.random.default_rng(seed))
        for ex in ctx.examples:
            assert ex.source != ex.target
            assert any(ex.source in g and ex.target in g for g in reg.mscoco)


def test_prompt_errors():
    with pytest.raises(UnknownStrategy):
        build_prompt("llama", "q", np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_prompt("bard", "  ", np.random.default_rng(0))
    pool = load_registry().pairs["bard"]
    with pytest.raises(ValueError):
        PromptContext(TASK_SENTENCE, (pool[0], pool[0], pool[1]), "q")


@given(st.text(alphabet="abc xyz.,", min_size=1).filter(str.strip), st.sampled_from(STRATEGIES),
       st.integers(0, 2**32 - 1))
def test_prompt_always_five_lines(query, strategy, seed):
    _, text = build_prompt(strategy, query, np.random.default_rng(seed))
    assert text.count("\n") == 4 and text.endswith(" =>")


def test_postprocess():
    assert postprocess_completion("A cat sleeps.\nnext line garbage") == "A cat sleeps."
    assert postprocess_completion("   spaced   ") == "spaced"
    assert postprocess_completion(" => a dog =>\nmore") == "a dog"
    assert postprocess_completion("\n  a fox") == "a fox"
    with pytest.raises(EmptyRewrite):
        postprocess_completion("\n\n")
    with pytest.raises(EmptyRewrite):
        postprocess_completion(" => ")


def test_rewrite_cold_then_warm(tmp_path):
    backend = FixtureCompletion()
    cache = RewriteCache(tmp_path / "cache.log")
    out, report = rewrite_dataset(records(2), list(STRATEGIES), backend, cache)
    assert backend.calls == 8
    assert report.fetched == 8 and report.cached == 0 and report.fallback == 0
    assert all(r.n_rewrites == 4 for r in out)
    assert [m[0] for m in out[0].rewrite_meta] == list(STRATEGIES)
    write_augmented(tmp_path / "a.jsonl", out)

    backend2 = FixtureCompletion()
    out2, report2 = rewrite_dataset(records(2), list(STRATEGIES), backend2, RewriteCache(tmp_path / "cache.log"))
    assert backend2.calls == 0 and report2.cached == 8
    write_augmented(tmp_path / "b.jsonl", out2)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_rewrite_empty_backend_falls_back():
    out, report = rewrite_dataset(records(2), list(STRATEGIES), FixtureCompletion(template="\n\n"))
    assert report.fallback == 8
    assert report.fallback_ids == ["r0"] * 4 + ["r1"] * 4
    for r in out:
        assert r.captions[1:] == [r.captions[0]] * 4
        assert {m[1] for m in r.rewrite_meta} == {"fallback"}


def test_rewrite_order_independent_of_concurrency(tmp_path):
    recs = records(12)
    a, _ = rewrite_dataset(recs, ["chatgpt", "mscoco"], FixtureCompletion(), concurrency=1, rng_seed=5)
    b, _ = rewrite_dataset(recs, ["chatgpt", "mscoco"], FixtureCompletion(), concurrency=16, rng_seed=5)
    write_augmented(tmp_path / "a.jsonl", a)
    write_augmented(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class Flaky:
    backend_id = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0
        self.prompts = []

    def complete(self, prompt, temperature, max_tokens, stop):
        self.calls += 1
        self.prompts.append(prompt)
        if self.calls <= self.failures:
            raise BackendError("boom", f"req{self.calls}")
        return "a rewrite"


def test_retry_then_success_resamples_examples():
    backend = Flaky(failures=2)
    out, report = rewrite_dataset(records(1), ["bard"], backend, retries=3, backoff=0.0)
    assert backend.calls == 3 and out[0].captions[1] == "a rewrite"
    assert len(set(backend.prompts)) == 3  # fresh demonstrations per attempt


def test_retries_exhausted_raises_and_cache_consistent(tmp_path):
    cache = RewriteCache(tmp_path / "c.log")
    backend = Flaky(failures=100)
    with pytest.raises(BackendError):
        rewrite_dataset(records(1), ["human"], backend, cache, retries=2, backoff=0.0)
    assert backend.calls == 3
    assert len(RewriteCache(tmp_path / "c.log")) == 0


def test_cache_reload_and_torn_line(tmp_path):
    path = tmp_path / "c.log"
    cache = RewriteCache(path)
    cache.put("k1", "one", "fixture")
    cache.put("k2", "two", "fixture")
    cache.put("k1", "ignored", "fixture")
    with path.open("a") as f:
        f.write('{"key": "k3", "compl')
    again = RewriteCache(path)
    assert len(again) == 2 and again.get("k1").completion == "one" and "k3" not in again


def test_cache_key_fields_matter():
    base = cache_key("bard", "p", 0.9, 1)
    assert len({base, cache_key("human", "p", 0.9, 1), cache_key("bard", "p2", 0.9, 1),
                cache_key("bard", "p", 0.8, 1), cache_key("bard", "p", 0.9, 2)}) == 5
    assert base == cache_key("bard", "p", 0.9, 1)


@pytest.mark.slow
def test_cache_key_no_collisions_1e6():
    keys = set()
    n = 0
    for seed in range(250):
        for strategy in STRATEGIES:
            for t in range(1000):
                keys.add(cache_key(strategy, f"prompt {t}", 0.9, seed))
                n += 1
    assert n == 10**6 and len(keys) == n


def test_item_seed_independent_of_order():
    assert item_seed(0, "r1", "bard", 0) == item_seed(0, "r1", "bard", 0)
    assert item_seed(0, "r1", "bard", 0) != item_seed(0, "r1", "bard", 1)


def test_rewrite_validation():
    with pytest.raises(ConfigError):
        rewrite_dataset(records(1), [], FixtureCompletion())
    with pytest.raises(ConfigError):
        rewrite_dataset(records(1), ["bard"], FixtureCompletion(), concurrency=0)
    with pytest.raises(UnknownStrategy):
        rewrite_dataset(records(1), ["nope"], FixtureCompletion())


@settings(max_examples=25)
@given(st.lists(st.text(alphabet="ab cd\t", min_size=1).filter(str.strip), min_size=1, max_size=4),
       st.lists(st.sampled_from(STRATEGIES), min_size=1, max_size=4))
def test_original_caption_preserved(caps, strategies):
    recs = [AugmentedRecord(f"id{i}", f"im{i}", [c]) for i, c in enumerate(caps)]
    out, _ = rewrite_dataset(recs, strategies, FixtureCompletion())
    for r_in, r_out in zip(recs, out):
        assert r_out.captions[0] == r_in.captions[0]
        assert len(r_out.captions) == 1 + len(strategies)


def test_http_completion(monkeypatch):
    seen = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            seen["body"] = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen["auth"] = self.headers.get("Authorization")
            payload = json.dumps({"text": " a rewritten dog\nmore"}).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv("COMPLETION_ENDPOINT", f"http://127.0.0.1:{server.server_port}/v1")
        monkeypatch.setenv("COMPLETION_API_KEY", "sekret")
        out, _ = rewrite_dataset(records(1), ["bard"], HttpCompletion())
    finally:
        server.shutdown()
    assert out[0].captions[1] == "a rewritten dog"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"]["temperature"] == 0.9 and seen["body"]["max_tokens"] == 64 and seen["body"]["stop"] == "\n"


def test_http_completion_errors(monkeypatch):
    monkeypatch.delenv("COMPLETION_ENDPOINT", raising=False)
    with pytest.raises(ConfigError):
        HttpCompletion()
    with pytest.raises(BackendError) as e:
        HttpCompletion("http://127.0.0.1:9/", timeout=2).complete("p", 0.9, 64, "\n")
    assert e.value.request_id


def test_written_file_round_trips(tmp_path):
    out, _ = rewrite_dataset(records(3), ["human"], FixtureCompletion())
    write_augmented(tmp_path / "x.jsonl", out)
    assert read_augmented(tmp_path / "x.jsonl") == out
