"""Clients for the external scoring and text-generation services.

Four services are consumed: toxicity, sentiment, text embedding and label
generation. Each is reached through a :class:`ScorerClient`, which adds
bounded concurrency, retries with backoff, an optional on-disk cache and
per-request accounting on top of a *provider* callable. Providers are either
HTTP+JSON adapters or the deterministic in-process stubs defined here.

Stub behaviour
--------------
Stubs are pure functions of ``(text, seed)``. Synthetic corpora embed
machine-readable tags of the form ``[[key=value;key=value]]`` in comment
bodies; stubs honour ``tox`` (toxicity), ``sent`` (sentiment) and ``votes``
(label generation) tags and otherwise fall back to a stable hash of the text.
Tags are stripped before embedding.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

EMBED_DIM = 768
_TAG_RE = re.compile(r"\[\[([^\]]*)\]\]")
_TOKEN_RE = re.compile(r"[^\W_]+")


class ScorerError(RuntimeError):
    """A service call failed after all retries."""

    def __init__(self, message, status=None, item_id=None):
        super().__init__(message)
        self.status = status
        self.item_id = item_id


class ScorerInputError(ValueError):
    """Bad input to a scorer (empty text, out-of-range temperature)."""


class TransientError(RuntimeError):
    """Raised by providers for retryable failures (timeouts, 429, 5xx)."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class ScorerConfig:
    endpoint: str = ""
    token_env: str = ""          # name of the env var holding the token
    max_in_flight: int = 4
    retries: int = 3
    backoff: tuple = (0.5, 1.0, 2.0)
    timeout: float = 30.0

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if not 0 <= self.retries <= 20:
            raise ValueError("retries must be in [0, 20]")

    @property
    def token(self):
        return os.environ.get(self.token_env, "") if self.token_env else ""

    def __repr__(self):  # never show the token
        return (f"ScorerConfig(endpoint={self.endpoint!r}, max_in_flight="
                f"{self.max_in_flight}, retries={self.retries})")


@dataclass(frozen=True)
class ScoreResult:
    item_id: str
    value: object
    latency: float
    attempts: int
    cached: bool = False


def text_digest(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ScoreCache:
    """Append-only JSON-lines cache of ``{"scorer", "digest", "value"}``.

    The key includes anything besides the text that changes the value (for
    generation: temperature and seed), folded into the digest by the caller.
    """

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._mem = {}
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._mem[(rec["scorer"], rec["digest"])] = rec["value"]

    def get(self, scorer, digest):
        with self._lock:
            return self._mem.get((scorer, digest))

    def put(self, scorer, digest, value):
        with self._lock:
            if (scorer, digest) in self._mem:
                return
            self._mem[(scorer, digest)] = value
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"scorer": scorer, "digest": digest,
                                         "value": value}, sort_keys=True) + "\n")

    def __len__(self):
        return len(self._mem)


class ScorerClient:
    """Retry, concurrency limit, cache and accounting around a provider.

    ``provider(payload)`` returns a JSON-compatible value or raises
    :class:`TransientError` (retried) / :class:`ScorerError` (not retried).
    """

    def __init__(self, name, provider, config=None, cache=None, sleep=time.sleep):
        self.name = name
        self.provider = provider
        self.config = config or ScorerConfig()
        self.cache = cache
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(self.config.max_in_flight)
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_observed_in_flight = 0
        self.total_requests = 0

    def request(self, item_id, payload, cache_key=None):
        if self.cache is not None and cache_key is not None:
            hit = self.cache.get(self.name, cache_key)
            if hit is not None:
                return ScoreResult(item_id, hit, 0.0, 0, cached=True)
        attempts = 0
        start = time.monotonic()
        last = None
        while attempts <= self.config.retries:
            attempts += 1
            try:
                with self._sem:
                    with self._lock:
                        self.in_flight += 1
                        self.total_requests += 1
                        self.max_observed_in_flight = max(self.max_observed_in_flight,
                                                          self.in_flight)
                    try:
                        value = self.provider(payload)
                    finally:
                        with self._lock:
                            self.in_flight -= 1
            except TransientError as exc:
                last = exc
                if attempts > self.config.retries:
                    break
                sched = self.config.backoff
                self._sleep(sched[min(attempts - 1, len(sched) - 1)] if sched else 0.0)
                continue
            except ScorerError as exc:
                exc.item_id = item_id
                raise
            if self.cache is not None and cache_key is not None:
                self.cache.put(self.name, cache_key, value)
            return ScoreResult(item_id, value, time.monotonic() - start, attempts)
        raise ScorerError(f"{self.name}: giving up on {item_id} after {attempts} "
                          f"attempts ({last})", status=getattr(last, "status", None),
                          item_id=item_id)

    def map(self, items):
        """Fan out ``(item_id, payload, cache_key)`` triples; order preserved."""
        items = list(items)
        if self.config.max_in_flight == 1 or len(items) <= 1:
            return [self.request(*it) for it in items]
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(lambda it: self.request(*it), items))


# ---------------------------------------------------------------- stubs

def parse_tags(text):
    """Merge all ``[[k=v;...]]`` tags in ``text`` into one dict."""
    out = {}
    for m in _TAG_RE.finditer(text or ""):
        for part in m.group(1).split(";"):
            if "=" in part:
                k, v = part.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def strip_tags(text):
    return _TAG_RE.sub(" ", text or "")


def _hash_unit(text, salt):
    """Stable hash of ``text`` mapped into the open interval (0, 1)."""
    h = hashlib.sha256(f"{salt}\x00{text}".encode("utf-8")).digest()
    return (int.from_bytes(h[:8], "big") + 0.5) / 2.0 ** 64


def _require_text(text):
    if not isinstance(text, str) or not text.strip():
        raise ScorerInputError("text must be a non-empty string")


def stub_toxicity(text):
    _require_text(text)
    tags = parse_tags(text)
    if "tox" in tags:
        return float(tags["tox"])
    return _hash_unit(text, "toxicity")


def stub_sentiment(text):
    _require_text(text)
    tags = parse_tags(text)
    if "sent" in tags:
        return float(tags["sent"])
    return 2.0 * _hash_unit(text, "sentiment") - 1.0


@lru_cache(maxsize=65536)
def _token_vector(token):
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(seed).standard_normal(EMBED_DIM)


def tokenize(text):
    return [t.lower() for t in _TOKEN_RE.findall(text or "")]


def stub_embedding(text):
    """Bag of hashed token vectors, unit-normalized.

    Texts sharing vocabulary get similar vectors, which gives synthetic
    corpora a low-rank embedding structure.
    """
    _require_text(text)
    toks = tokenize(strip_tags(text))
    if not toks:
        toks = ["\x00" + text]
    v = np.zeros(EMBED_DIM)
    for t in toks:
        v += _token_vector(t)
    return v / np.linalg.norm(v)


_PROMPT_SLOT_RE = re.compile(
    r"Newcomer:[ \t]*(?P<newcomer>[^\n]*)\nReply:[ \t]*(?P<reply>[^\n]*)\nAnswer:\s*$")
_VOTE_NAMES = {"cs": "counterspeech", "hs": "hate speech", "ot": "other"}


def _votes_to_labels(spec):
    """``"cs4,hs0,ot1"`` -> list of 5 label strings in a fixed order."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if part[:2] in _VOTE_NAMES:
            out.extend([_VOTE_NAMES[part[:2]]] * int(part[2:]))
    return out


def _stub_role_label(text, seed, temperature, role):
    tags = parse_tags(text)
    if "votes" in tags:
        labels = _votes_to_labels(tags["votes"])
        if labels:
            return labels[(seed - 1) % len(labels)]
    # untagged text: one hash-chosen label, perturbed by seed above temperature 0
    key = text if temperature == 0 else f"{text}\x00{seed}\x00{temperature}"
    u = _hash_unit(key, f"label-{role}")
    return ("counterspeech", "hate speech", "other")[min(int(u * 3), 2)]


def stub_generate(prompt, temperature, seed=1):
    """Answer line for the labeling prompt, driven by ``votes`` tags."""
    m = _PROMPT_SLOT_RE.search(prompt)
    if m is None:
        return "I am not sure how to answer that."
    a = _stub_role_label(m.group("newcomer"), seed, temperature, "newcomer")
    b = _stub_role_label(m.group("reply"), seed, temperature, "reply")
    return f"(newcomer: {a}, reply: {b})"


# ---------------------------------------------------------------- HTTP providers

def urllib_transport(url, body, headers, timeout):
    """POST JSON; returns ``(status, parsed_json_or_None)``."""
    req = urllib.request.Request(url, data=json.dumps(body).encode("utf-8"),
                                 headers={"Content-Type": "application/json", **headers},
                                 method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        return exc.code, None
    except (urllib.error.URLError, TimeoutError) as exc:
        raise TransientError(f"transport failure: {exc}") from exc


def _check_status(status, service):
    if status == 429 or status >= 500:
        raise TransientError(f"{service} returned HTTP {status}", status=status)
    if status >= 400:
        raise ScorerError(f"{service} returned HTTP {status}", status=status)


def perspective_provider(config, attribute="TOXICITY", transport=urllib_transport):
    """Perspective-style ``comments:analyze`` request for one attribute."""

    def call(text):
        body = {"comment": {"text": text}, "languages": ["en"],
                "requestedAttributes": {attribute: {}}}
        # key in a header rather than the query string, which proxies log
        headers = {"X-Goog-Api-Key": config.token} if config.token else {}
        status, payload = transport(config.endpoint, body, headers, config.timeout)
        _check_status(status, "toxicity service")
        return float(payload["attributeScores"][attribute]["summaryScore"]["value"])

    return call


def json_score_provider(config, transport=urllib_transport):
    """Generic ``{"text": ...} -> {"value": ...}`` endpoint (sentiment, embedding)."""

    def call(text):
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        status, payload = transport(config.endpoint, {"text": text}, headers, config.timeout)
        _check_status(status, "scoring service")
        return payload["value"]

    return call


def chat_provider(config, model="", transport=urllib_transport):
    """OpenAI-compatible chat-completions endpoint for label generation."""

    def call(payload):
        prompt, temperature, seed = payload
        body = {"model": model, "temperature": temperature, "seed": seed,
                "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        status, resp = transport(config.endpoint, body, headers, config.timeout)
        _check_status(status, "generation service")
        return resp["choices"][0]["message"]["content"]

    return call


# ---------------------------------------------------------------- bundle

class Scorers:
    """The four services the pipeline consumes, behind uniform methods."""

    def __init__(self, toxicity, sentiment, embedding, generation):
        self.toxicity = toxicity
        self.sentiment = sentiment
        self.embedding = embedding
        self.generation = generation

    @classmethod
    def stubs(cls, cache=None, max_in_flight=1):
        cfg = ScorerConfig(max_in_flight=max_in_flight, retries=0)
        return cls(
            ScorerClient("toxicity", stub_toxicity, cfg, cache),
            ScorerClient("sentiment", stub_sentiment, cfg, cache),
            ScorerClient("embedding", lambda t: stub_embedding(t).tolist(), cfg, None),
            ScorerClient("generation", lambda p: stub_generate(*p), cfg, cache),
        )

    @classmethod
    def from_config(cls, cfg, cache=None):
        """Build from the ``scorers`` section of a pipeline config.

        ``{"kind": "stub"}`` selects the stubs; otherwise each service takes
        ``endpoint``, ``token_env`` and limits.
        """
        if cfg.get("kind", "stub") == "stub":
            return cls.stubs(cache=cache)

        def conf(name):
            c = dict(cfg.get(name, {}))
            c.pop("attribute", None)
            c.pop("model", None)
            if "backoff" in c:
                c["backoff"] = tuple(c["backoff"])
            return ScorerConfig(**c)

        tox = conf("toxicity")
        return cls(
            ScorerClient("toxicity", perspective_provider(
                tox, cfg.get("toxicity", {}).get("attribute", "TOXICITY")), tox, cache),
            ScorerClient("sentiment", json_score_provider(conf("sentiment")),
                         conf("sentiment"), cache),
            ScorerClient("embedding", json_score_provider(conf("embedding")),
                         conf("embedding"), cache),
            ScorerClient("generation", chat_provider(
                conf("generation"), cfg.get("generation", {}).get("model", "")),
                conf("generation"), cache),
        )

    def score_toxicity(self, text, item_id=""):
        _require_text(text)
        v = self.toxicity.request(item_id, text, text_digest(text)).value
        return _clamp(float(v), 0.0, 1.0, "toxicity", item_id)

    def score_sentiment(self, text, item_id=""):
        _require_text(text)
        v = self.sentiment.request(item_id, text, text_digest(text)).value
        return _clamp(float(v), -1.0, 1.0, "sentiment", item_id)

    def embed_text(self, text, item_id=""):
        _require_text(text)
        v = np.asarray(self.embedding.request(item_id, text, text_digest(text)).value,
                       dtype=np.float64)
        if v.shape != (EMBED_DIM,):
            raise ScorerError(f"embedding for {item_id} has shape {v.shape}", item_id=item_id)
        n = np.linalg.norm(v)
        if n == 0:
            raise ScorerError(f"zero embedding for {item_id}", item_id=item_id)
        return v / n

    def generate_label(self, prompt, temperature, seed=1, item_id=""):
        if not 0.0 <= temperature <= 2.0:
            raise ScorerInputError(f"temperature {temperature} outside [0, 2]")
        key = text_digest(f"{temperature!r}\x00{seed}\x00{prompt}")
        return self.generation.request(item_id, (prompt, temperature, seed), key).value


def _clamp(v, lo, hi, what, item_id):
    if math.isnan(v):
        raise ScorerError(f"{what} for {item_id!r} is NaN", item_id=item_id)
    if v < lo or v > hi:
        log.warning("%s value %r for %r outside [%s, %s]; clamped", what, v, item_id, lo, hi)
        return min(max(v, lo), hi)
    return v
