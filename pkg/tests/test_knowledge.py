import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from hoiprompt.data import CategoryRegistry
from hoiprompt.errors import ChecksumError, EncodingError, InvalidInputError, RetrievalError
from hoiprompt.knowledge import (
    FixtureBackend,
    HTTPLLMBackend,
    KnowledgeCache,
    KnowledgeClient,
    KnowledgeEntry,
    MockTextEncoder,
    RemoteTextEncoder,
    TextEncoder,
    build_prompt,
    embed_text,
    embedding_matrix,
    embeddings_for_categories,
    slugify,
)
from httpstub import StubServer

GOLDEN = Path(__file__).parent / "golden" / "prompts.txt"
GOLDEN_CASES = [("ride bicycle", 50), ("throw frisbee", 1), ("human hold ball", 30)]


def test_prompt_matches_golden_bytes():
    expected = GOLDEN.read_text(encoding="utf-8").splitlines()
    assert [build_prompt(p, n) for p, n in GOLDEN_CASES] == expected


@pytest.mark.parametrize("phrase,n", [("", 5), ("   ", 5), ("ride bicycle", 0), ("ride bicycle", -3)])
def test_prompt_rejects_bad_input(phrase, n):
    with pytest.raises(InvalidInputError):
        build_prompt(phrase, n)


def test_slugify():
    assert slugify("Ride  Bicycle!") == "ride-bicycle"


def _entry(phrase="ride bicycle", n=20, desc="a person pedals a bicycle", backend="fixture"):
    return KnowledgeEntry(0, phrase, desc, n, "fixture", "2026-01-01T00:00:00+00:00", backend)


def test_cache_round_trip(tmp_path):
    cache = KnowledgeCache(tmp_path / "k.jsonl")
    cache.put(_entry())
    cache.put(_entry(n=40, desc="longer text"))
    again = KnowledgeCache(tmp_path / "k.jsonl")
    assert len(again) == 2
    assert again.get(("ride bicycle", 40, "fixture")).description == "longer text"
    assert again.get(("ride bicycle", 40, "other")) is None


def test_cache_tamper_and_missing_sidecar(tmp_path):
    path = tmp_path / "k.jsonl"
    KnowledgeCache(path).put(_entry())
    path.write_text(path.read_text().replace("pedals", "rides"))
    with pytest.raises(ChecksumError):
        KnowledgeCache(path)
    (tmp_path / "k.jsonl.sha256").unlink()
    with pytest.raises(ChecksumError):
        KnowledgeCache(path)


def test_entry_validation():
    with pytest.raises(InvalidInputError):
        KnowledgeEntry(0, "x", "text", 5, "oracle", "t")
    with pytest.raises(InvalidInputError):
        KnowledgeEntry(0, "x", " ", 5, "llm", "t")


def _fixture_dir(tmp_path, phrases):
    d = tmp_path / "fixture"
    d.mkdir(exist_ok=True)
    for p in phrases:
        (d / f"{slugify(p)}.txt").write_text(f"someone does {p} with care\n")
    return d


def test_fixture_backend_and_cache_first(tmp_path):
    backend = FixtureBackend(_fixture_dir(tmp_path, ["ride bicycle"]))
    client = KnowledgeClient(backend, KnowledgeCache(tmp_path / "k.jsonl"))
    e1 = client.retrieve(3, "ride bicycle", 10)
    e2 = client.retrieve(3, "ride bicycle", 10)
    assert e1 == e2 and backend.calls == 1
    assert e1.description == "someone does ride bicycle with care" and e1.source == "fixture"
    client.retrieve(3, "ride bicycle", 11)
    assert backend.calls == 2


def test_fixture_missing_key(tmp_path):
    client = KnowledgeClient(FixtureBackend(_fixture_dir(tmp_path, [])), KnowledgeCache(tmp_path / "k.jsonl"))
    with pytest.raises(RetrievalError, match="kick-ball.txt"):
        client.retrieve(0, "kick ball", 10)


def test_word_limit_warning(tmp_path, caplog):
    client = KnowledgeClient(FixtureBackend(_fixture_dir(tmp_path, ["ride bicycle"])), KnowledgeCache(tmp_path / "k.jsonl"))
    with caplog.at_level(logging.WARNING, logger="hoiprompt.knowledge"):
        entry = client.retrieve(0, "ride bicycle", 2)
    assert entry.word_count == 6
    assert "limit 2" in caplog.text


class SlowBackend(FixtureBackend):
    def complete(self, prompt, max_words, phrase):
        time.sleep(0.01)
        return super().complete(prompt, max_words, phrase)


def single_flight_calls(tmp_path, requests=100, keys=30, workers=16, seed=0):
    """Backend calls and cache size after a shuffled request stream touching every key."""
    rng = np.random.default_rng(seed)
    phrases = [f"verb{i} object{i}" for i in range(keys)]
    backend = SlowBackend(_fixture_dir(tmp_path, phrases))
    client = KnowledgeClient(backend, KnowledgeCache(tmp_path / "k.jsonl"))
    order = phrases + [phrases[i] for i in rng.integers(0, keys, size=requests - keys)]
    order = [order[i] for i in rng.permutation(requests)]
    with ThreadPoolExecutor(workers) as pool:
        results = list(pool.map(lambda p: client.retrieve(0, p, 20), order))
    assert all(r.phrase == p for r, p in zip(results, order))
    return backend.calls, len(client.cache)


def test_single_flight(tmp_path):
    assert single_flight_calls(tmp_path) == (30, 30)


def test_http_backend(monkeypatch):
    seen = []

    def handler(body, headers):
        import json
        doc = json.loads(body)
        seen.append((doc, headers.get("Authorization")))
        return 200, {"text": f"answer in {doc['max_words']} words"}

    monkeypatch.setenv("HOIPROMPT_LLM_API_KEY", "k-123")
    with StubServer(handler) as srv:
        text = HTTPLLMBackend(srv.url, timeout=5).complete(build_prompt("hold cup", 7), 7, "hold cup")
    assert text == "answer in 7 words"
    assert seen[0][0] == {"prompt": "Knowledge retrieve for hold cup, limited to 7 words", "max_words": 7}
    assert seen[0][1] == "Bearer k-123"


def test_http_backend_failure():
    with StubServer(lambda body, headers: (200, {"wrong": 1})) as srv:
        backend = HTTPLLMBackend(srv.url, timeout=5, retries=1, backoff=0.0)
        with pytest.raises(RetrievalError) as info:
            backend.complete("p", 5, "x")
    assert info.value.attempts == 2 and backend.calls == 2


REGISTRY = CategoryRegistry(("ball", "cup"), ("hold", "throw"), ((0, 0), (1, 0), (0, 1)))


def test_mock_text_encoder():
    enc = MockTextEncoder(seed=0)
    a = embed_text("hold ball", enc)
    assert a.vector.shape == (768,)
    assert np.linalg.norm(a.vector) == pytest.approx(1.0)
    assert np.array_equal(a.vector, embed_text("hold ball", enc).vector)
    assert not np.array_equal(a.vector, embed_text("hold cup", enc).vector)
    assert not np.array_equal(a.vector, embed_text("hold ball", MockTextEncoder(seed=1)).vector)


def test_embedding_modes():
    enc = MockTextEncoder()
    phrases = embeddings_for_categories(REGISTRY, enc, hoi_ids=[2, 0])
    assert [e.text_hash for e in phrases] == [embed_text(REGISTRY.phrase(h), enc).text_hash for h in (0, 2)]
    entries = {0: _entry("hold ball", desc="grip a ball"), 2: _entry("hold cup", desc="grip a cup")}
    desc = embeddings_for_categories(REGISTRY, enc, "description", [0, 2], entries)
    assert np.array_equal(desc[1].vector, embed_text("grip a cup", enc).vector)
    with pytest.raises(RetrievalError, match=r"\[1\]"):
        embeddings_for_categories(REGISTRY, enc, "description", None, entries)
    with pytest.raises(InvalidInputError):
        embeddings_for_categories(REGISTRY, enc, "image")
    assert embedding_matrix(phrases).shape == (2, 768)


def test_encoder_failures_wrapped():
    class Broken(TextEncoder):
        encoder_id = "broken"

        def encode(self, text):
            raise RuntimeError("boom")

    class NaN(TextEncoder):
        encoder_id = "nan"

        def encode(self, text):
            return np.full(768, np.nan)

    with pytest.raises(EncodingError):
        embed_text("x", Broken())
    with pytest.raises(EncodingError):
        embed_text("x", NaN())


def test_remote_text_encoder():
    vec = np.linspace(-1, 1, 768)
    with StubServer(lambda body, headers: (200, {"embedding": vec.tolist()})) as srv:
        assert np.allclose(embed_text("hold ball", RemoteTextEncoder(srv.url, timeout=5)).vector, vec)
    with StubServer(lambda body, headers: (200, {"embedding": [0.0] * 10})) as srv:
        with pytest.raises(EncodingError):
            embed_text("hold ball", RemoteTextEncoder(srv.url, timeout=5, retries=0))
