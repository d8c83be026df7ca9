"""LLM judge: prompt building, verdict parsing and an OpenAI-compatible client."""

from __future__ import annotations

import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import httpx

from .errors import ConfigError, DataError, JudgeParseError, JudgeRequestError

SEMANTIC = "semantic"
SURFACE = "surface"
UNLABELED = "unlabeled"

HIGH = 0.7
LOW = 0.3
CONTEXT_CHARS = 80

_PREAMBLE = """You are evaluating a latent feature from a sparse autoencoder trained on a language model. You are given the tokens that most strongly activate this feature.

Score the feature on two independent dimensions:

**semantic_score** (0 to 1, continuous): How strongly do these tokens collectively represent a coherent, high-level concept that is interpretable by humans?
- 1.0 = tokens clearly belong to a unified semantic category (e.g. US states and cities, negative-emotion words, cooking verbs, animal species, financial terms)
- 0.5 = tokens share some thematic connection but it's loose or partial
- 0.0 = no discernible high-level concept; tokens seem unrelated or random

**surface_score** (0 to 1, continuous): How strongly do these tokens collectively describe low-level linguistic or surface patterns rather than meaning?
- 1.0 = tokens are unified by syntax, morphology, punctuation, character class, or formatting (e.g. closing braces, digits, -ing suffixes, markup tags, subword fragments)
- 0.5 = tokens partially share surface-level properties but also carry some semantic content
- 0.0 = tokens are not unified by any surface-level pattern

These two scores are INDEPENDENT and can vary continuously from 0 to 1. A feature can be high on both (rare), low on both (noise/random), or high on one and low on the other (typical).

Think carefully about whether the unifying pattern is semantic (about meaning) or surface-level (about form/syntax/characters).

"""

_CONTEXT_HEADER = "**Example contexts** (activating token wrapped in <<>>):\n"

_CLOSING = """
Return ONLY valid JSON with keys "semantic_score" and "surface_score", both floats between 0 and 1.

Example: {"semantic_score": 0.85, "surface_score": 0.1}"""

# Not taken from any published prompt; kept deliberately short.
DEFAULT_SYSTEM_MESSAGE = (
    "You evaluate sparse autoencoder latents. Reply with a single JSON object "
    'containing "semantic_score" and "surface_score".'
)


@dataclass(frozen=True)
class LatentEvidence:
    feature_id: int
    tokens: tuple
    contexts: dict = field(default_factory=dict)  # token -> up to two context windows

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise DataError(f"latent {self.feature_id}: evidence needs at least one token")
        ctx = {}
        for tok, windows in self.contexts.items():
            windows = tuple(windows)
            if len(windows) > 2:
                raise DataError(f"latent {self.feature_id}: token {tok!r} has more than two contexts")
            ctx[tok] = windows
        object.__setattr__(self, "contexts", ctx)


def context_window(text: str, start: int, end: int, width: int = CONTEXT_CHARS) -> str:
    """``text[start:end]`` wrapped in ``<<>>`` with up to ``width`` characters each side."""
    return text[max(0, start - width) : start] + "<<" + text[start:end] + ">>" + text[end : end + width]


def collect_evidence(feature_id, occurrences, top_n=20, max_contexts=2) -> LatentEvidence:
    """Build evidence from ``(token, activation, text, start, end)`` occurrences.

    Tokens are ranked by their maximum activation; each keeps the contexts of
    its strongest occurrences.
    """
    best = {}
    for tok, act, text, start, end in occurrences:
        if act <= 0:
            continue
        best.setdefault(tok, []).append((float(act), text, start, end))
    ranked = sorted(best, key=lambda t: (-max(a for a, *_ in best[t]), t))[:top_n]
    contexts = {}
    for tok in ranked:
        occ = sorted(best[tok], key=lambda o: -o[0])[:max_contexts]
        contexts[tok] = [context_window(text, s, e) for _, text, s, e in occ]
    return LatentEvidence(feature_id, ranked, contexts)


def build_prompt(ev: LatentEvidence) -> str:
    # Plain concatenation: user-controlled strings never pass through str.format.
    parts = [
        _PREAMBLE,
        "**Feature ID**: ",
        str(ev.feature_id),
        "\n**Top-activating tokens** (ordered by activation strength): ",
        ", ".join(ev.tokens),
        "\n\n",
        _CONTEXT_HEADER,
    ]
    for tok in ev.tokens:
        windows = ev.contexts.get(tok, ())
        if not windows:
            continue
        parts.append('- token "' + tok + '":\n')
        for w in windows:
            parts.append(" - " + w + "\n")
    parts.append(_CLOSING)
    return "".join(parts)


@dataclass(frozen=True)
class JudgeVerdict:
    semantic_score: float
    surface_score: float
    label: str
    raw: str = ""


def label_for(semantic: float, surface: float) -> str:
    if semantic > HIGH and surface < LOW:
        return SEMANTIC
    if surface > HIGH and semantic < LOW:
        return SURFACE
    return UNLABELED


def _first_object(text: str):
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    return None


def _score(obj, key, raw):
    if key not in obj:
        raise JudgeParseError(f"verdict is missing {key!r}", raw)
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or math.isnan(v):
        raise JudgeParseError(f"{key!r} is not a number: {v!r}", raw)
    return min(1.0, max(0.0, float(v)))


def parse_verdict(response: str) -> JudgeVerdict:
    obj = _first_object(response)
    if obj is None:
        raise JudgeParseError("no JSON object in judge response", response)
    sem = _score(obj, "semantic_score", response)
    sur = _score(obj, "surface_score", response)
    return JudgeVerdict(sem, sur, label_for(sem, sur), response)


# --- transport ------------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "FMX_JUDGE_API_KEY"
    requests_per_second: float = 2.0
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    system_message: str = DEFAULT_SYSTEM_MESSAGE
    temperature: float = 0.0

    def __post_init__(self):
        if not self.base_url or not self.model:
            raise ConfigError("judge endpoint needs both base_url and model")
        if self.requests_per_second <= 0 or self.max_in_flight < 1 or self.max_retries < 0:
            raise ConfigError("judge rate, in-flight limit and retry count must be positive")


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(self, rate, capacity=None, clock=time.monotonic, sleep=time.sleep):
        self.rate = float(rate)
        self.capacity = float(capacity if capacity is not None else max(1.0, rate))
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


_TRANSIENT = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient:
    def __init__(self, config: EndpointConfig, api_key: str, transport=None, sleep=time.sleep):
        self.config = config
        self._sleep = sleep
        self._bucket = TokenBucket(config.requests_per_second, sleep=sleep)
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=config.timeout,
            transport=transport,
        )

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, user_message: str) -> str:
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": self.config.system_message},
                {"role": "user", "content": user_message},
            ],
        }
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            self._bucket.acquire()
            try:
                resp = self._http.post("/chat/completions", json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code in _TRANSIENT:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise JudgeRequestError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise JudgeRequestError(f"malformed completion body: {exc}") from exc
        raise JudgeRequestError(f"gave up after {self.config.max_retries} retries ({last})")


@dataclass
class JudgeRun:
    verdicts: dict  # feature id -> JudgeVerdict
    errors: dict  # feature id -> message

    @property
    def counts(self) -> dict:
        out = {SEMANTIC: 0, SURFACE: 0, UNLABELED: 0, "errored": len(self.errors)}
        for v in self.verdicts.values():
            out[v.label] += 1
        return out


def judge_latents(
    evidence,
    config: EndpointConfig,
    audit_path=None,
    transport=None,
    sleep: Callable[[float], None] = time.sleep,
    env: Optional[dict] = None,
) -> JudgeRun:
    """Judge each latent once; failures are recorded per latent and never abort the run."""
    env = os.environ if env is None else env
    api_key = env.get(config.api_key_env)
    if not api_key:
        raise ConfigError(f"judge auth token missing: set ${config.api_key_env}")
    evidence = list(evidence)
    ids = [ev.feature_id for ev in evidence]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate feature ids in judge evidence")

    records = {}

    def one(ev):
        prompt = build_prompt(ev)
        rec = {"feature_id": ev.feature_id}
        try:
            raw = client.complete(prompt)
            rec["response"] = raw
            verdict = parse_verdict(raw)
        except (JudgeRequestError, JudgeParseError) as exc:
            rec["error"] = str(exc)
            return ev.feature_id, None, rec
        rec.update(semantic_score=verdict.semantic_score, surface_score=verdict.surface_score, label=verdict.label)
        return ev.feature_id, verdict, rec

    verdicts, errors = {}, {}
    with ChatClient(config, api_key, transport=transport, sleep=sleep) as client:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            for fid, verdict, rec in pool.map(one, evidence):
                records[fid] = rec
                if verdict is None:
                    errors[fid] = rec["error"]
                else:
                    verdicts[fid] = verdict

    if audit_path is not None:
        with open(Path(audit_path), "w") as fh:
            for fid in sorted(records):
                fh.write(json.dumps(records[fid], sort_keys=True) + "\n")
    return JudgeRun(verdicts, errors)
