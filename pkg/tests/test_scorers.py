import logging
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cspipe.scorers import (ScoreCache, ScorerClient, ScorerConfig, ScorerError,
                            ScorerInputError, Scorers, TransientError, _hash_unit,
                            chat_provider, json_score_provider, parse_tags,
                            perspective_provider, stub_generate, stub_toxicity)

texts = st.text(min_size=1, max_size=80).filter(lambda s: s.strip())


def test_empty_text_rejected(stubs):
    for f in (stubs.score_toxicity, stubs.score_sentiment, stubs.embed_text):
        with pytest.raises(ScorerInputError):
            f("")
        with pytest.raises(ScorerInputError):
            f("   ")


@given(texts)
@settings(max_examples=50, deadline=None)
def test_stubs_pure_and_in_range(text):
    s = Scorers.stubs()
    t = s.score_toxicity(text)
    assert t == s.score_toxicity(text) and 0.0 <= t <= 1.0
    v = s.score_sentiment(text)
    assert v == s.score_sentiment(text) and -1.0 <= v <= 1.0
    e = s.embed_text(text)
    assert abs(np.linalg.norm(e) - 1.0) < 1e-6
    assert np.array_equal(e, s.embed_text(text))


def test_stub_value_is_the_text_hash():
    # value recorded by hashing once: sha256("toxicity\0" + text) -> (0, 1)
    text = "an untagged fixture comment"
    assert stub_toxicity(text) == _hash_unit(text, "toxicity")
    assert 0.0 < stub_toxicity(text) < 1.0


def test_tags_override():
    assert stub_toxicity("x [[tox=0.25]]") == 0.25
    assert parse_tags("a [[votes=cs5;sent=0.1]] b") == {"votes": "cs5", "sent": "0.1"}


def test_distinct_texts_distinct_embeddings(stubs):
    a = stubs.embed_text("the quick brown fox")
    b = stubs.embed_text("lorem ipsum dolor")
    assert float(a @ b) < 1.0


def _prompt(newcomer, reply):
    return f"...\nNewcomer: {newcomer}\nReply: {reply}\nAnswer:"


def test_generation_determinism(stubs):
    p = _prompt("some text", "other text")
    assert stubs.generate_label(p, 0.0) == stubs.generate_label(p, 0.0)
    first = [stubs.generate_label(p, 1.2, seed=s) for s in range(1, 6)]
    again = [stub_generate(p, 1.2, seed=s) for s in range(1, 6)]
    assert first == again and len(first) == 5


def test_temperature_range(stubs):
    with pytest.raises(ScorerInputError):
        stubs.generate_label(_prompt("a", "b"), 2.5)


def test_sentiment_clamped_with_warning(caplog):
    cfg = ScorerConfig(retries=0)
    s = Scorers.stubs()
    s.sentiment = ScorerClient("sentiment", lambda t: 1.2, cfg)
    with caplog.at_level(logging.WARNING):
        assert s.score_sentiment("fine") == 1.0
    assert "clamped" in caplog.text


def test_nan_rejected():
    s = Scorers.stubs()
    s.toxicity = ScorerClient("toxicity", lambda t: float("nan"), ScorerConfig(retries=0))
    with pytest.raises(ScorerError):
        s.score_toxicity("x")


def test_retry_accounting():
    calls = []

    def flaky(payload):
        calls.append(payload)
        if len(calls) < 3:
            raise TransientError("busy", status=503)
        return 0.5

    c = ScorerClient("t", flaky, ScorerConfig(retries=3, backoff=(0.0,)), sleep=lambda s: None)
    r = c.request("i", "x")
    assert r.value == 0.5 and r.attempts == 3 == len(calls) == c.total_requests
    assert r.attempts <= c.config.retries + 1


def test_retries_exhausted_carry_status():
    c = ScorerClient("t", lambda p: (_ for _ in ()).throw(TransientError("x", status=503)),
                     ScorerConfig(retries=2, backoff=(0.0,)), sleep=lambda s: None)
    with pytest.raises(ScorerError) as err:
        c.request("item7", "x")
    assert err.value.status == 503 and err.value.item_id == "item7"
    assert c.total_requests == 3


def test_client_error_not_retried():
    def bad(p):
        raise ScorerError("nope", status=400)
    c = ScorerClient("t", bad, ScorerConfig(retries=5), sleep=lambda s: None)
    with pytest.raises(ScorerError):
        c.request("i", "x")
    assert c.total_requests == 1


def test_bounded_concurrency():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def slow(p):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.005)
        with lock:
            state["now"] -= 1
        return p

    c = ScorerClient("t", slow, ScorerConfig(max_in_flight=3, retries=0))
    out = c.map([(str(k), k, None) for k in range(40)])
    assert [r.value for r in out] == list(range(40))
    assert state["peak"] <= 3 and c.max_observed_in_flight <= 3


def test_cache_round_trip(tmp_path):
    path = tmp_path / "cache.jsonl"
    calls = []
    c = ScorerClient("tox", lambda t: calls.append(t) or 0.3, ScorerConfig(retries=0),
                     ScoreCache(str(path)))
    c.request("a", "text", "d1")
    assert c.request("a", "text", "d1").cached
    assert len(calls) == 1
    fresh = ScoreCache(str(path))
    assert fresh.get("tox", "d1") == 0.3 and len(fresh) == 1


def test_config_validation_and_secret_repr(monkeypatch):
    with pytest.raises(ValueError):
        ScorerConfig(max_in_flight=0)
    with pytest.raises(ValueError):
        ScorerConfig(retries=100)
    monkeypatch.setenv("CSPIPE_TEST_TOKEN", "sekrit")
    cfg = ScorerConfig(endpoint="http://x", token_env="CSPIPE_TEST_TOKEN")
    assert cfg.token == "sekrit"
    assert "sekrit" not in repr(cfg)


def test_http_providers_shape(monkeypatch):
    monkeypatch.setenv("CSPIPE_TEST_TOKEN", "sekrit")
    cfg = ScorerConfig(endpoint="http://svc", token_env="CSPIPE_TEST_TOKEN")
    seen = {}

    def transport(url, body, headers, timeout):
        seen.update(url=url, body=body, headers=headers)
        if "comment" in body:
            return 200, {"attributeScores": {"TOXICITY": {"summaryScore": {"value": 0.4}}}}
        if "messages" in body:
            return 200, {"choices": [{"message": {"content": "(newcomer: other, reply: other)"}}]}
        return 200, {"value": 0.1}

    assert perspective_provider(cfg, transport=transport)("hi") == 0.4
    assert "sekrit" not in seen["url"]
    assert json_score_provider(cfg, transport=transport)("hi") == 0.1
    assert seen["headers"]["Authorization"] == "Bearer sekrit"
    assert chat_provider(cfg, "m", transport=transport)(("p", 1.2, 3)).startswith("(newcomer")
    assert seen["body"]["seed"] == 3


def test_http_status_mapping():
    cfg = ScorerConfig(endpoint="http://svc")
    with pytest.raises(TransientError):
        json_score_provider(cfg, transport=lambda *a: (503, None))("x")
    with pytest.raises(ScorerError):
        json_score_provider(cfg, transport=lambda *a: (404, None))("x")
