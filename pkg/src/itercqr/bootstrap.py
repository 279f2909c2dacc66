"""Initial rewrite dataset D0 from an LLM (or from an offline rewrites file).

API mode speaks one OpenAI-style chat-completions shape over httpx, keeps a
JSONL cache (append-only, last write wins) and retries transient failures
with exponential backoff. File mode never opens a connection.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import httpx

from .data import DatasetRow, DatasetVersion, _read_jsonl
from .errors import ExternalServiceError, ValidationError
from .text import truncate_tokens

logger = logging.getLogger(__name__)

API_KEY_ENV = "ITERCQR_LLM_API_KEY"
INSTRUCTION = (
    "The lines below come from a conversational search session. Using the earlier "
    "questions and answers, rewrite the current query so it can be understood on its "
    "own, without the conversation."
)
MAX_CONTEXT_TURNS = 3


@dataclass
class BootstrapRequest:
    instance_id: str
    prompt: str
    context_turns_used: int


@dataclass
class BootstrapConfig:
    mode: str = "file"  # "api" | "file"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.0
    timeout: float = 30.0
    max_tokens: int = 64
    max_query_len: int = 32
    max_attempts: int = 5
    backoff_base: float = 1.0
    max_concurrency: int = 4
    rewrites_path: Optional[str] = None
    cache_path: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("api", "file"):
            raise ValidationError(f"bootstrap mode must be 'api' or 'file', got {self.mode!r}")


def build_request(instance, session):
    """Instruction, up to three preceding (query, answer) pairs oldest first, current query."""
    k = instance.turn_index
    if session.session_id != instance.session_id or not 1 <= k <= len(session.turns):
        raise ValidationError(f"{instance.instance_id} does not belong to session {session.session_id}")
    context = session.turns[max(0, k - 1 - MAX_CONTEXT_TURNS) : k - 1]
    lines = [INSTRUCTION, ""]
    for turn in context:
        lines += [f"Q: {turn.query}", f"A: {turn.answer}"]
    lines += [f"Current query: {instance.current_query}", "Rewrite:"]
    return BootstrapRequest(instance.instance_id, "\n".join(lines), len(context))


def build_prompt(instance, session):
    return build_request(instance, session).prompt


def load_rewrites(path):
    """``{instance_id: rewrite}``; later lines override earlier ones."""
    out = {}
    for lineno, rec in _read_jsonl(path):
        try:
            out[str(rec["instance_id"])] = rec["rewrite"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: expected instance_id and rewrite") from exc
    return out


def write_rewrites(path, rewrites):
    with open(path, "w", encoding="utf-8") as fh:
        for iid, text in rewrites.items():
            fh.write(json.dumps({"instance_id": iid, "rewrite": text}, ensure_ascii=False) + "\n")


def clean_completion(text, max_query_len):
    text = text.strip().strip("\"'`").strip()
    return truncate_tokens(text, max_query_len)


class RewriteClient:
    """Cached LLM rewriter. ``transport`` and ``sleep`` are injectable for tests."""

    def __init__(self, config: BootstrapConfig, transport=None, sleep=time.sleep, api_key=None):
        self.config = config
        self.sleep = sleep
        self._lock = threading.Lock()
        self.cache: dict[str, str] = {}
        if config.cache_path and Path(config.cache_path).exists():
            self.cache = load_rewrites(config.cache_path)
        self.offline: dict[str, str] = {}
        self._http = None
        if config.mode == "file":
            if not config.rewrites_path:
                raise ValidationError("file mode needs rewrites_path")
            self.offline = load_rewrites(config.rewrites_path)
        else:
            self.api_key = api_key or os.environ.get(API_KEY_ENV)
            self._transport = transport
        self.network_calls = 0

    def _client(self):
        if self._http is None:
            if not self.api_key:
                raise ExternalServiceError(f"api mode needs the {API_KEY_ENV} environment variable")
            self._http = httpx.Client(transport=self._transport, timeout=self.config.timeout)
        return self._http

    def close(self):
        if self._http is not None:
            self._http.close()

    def _remember(self, iid, text):
        with self._lock:
            self.cache[iid] = text
            if self.config.cache_path:
                with open(self.config.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"instance_id": iid, "rewrite": text}, ensure_ascii=False) + "\n")

    def _complete(self, prompt):
        cfg = self.config
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error = None
        for attempt in range(cfg.max_attempts):
            if attempt:
                self.sleep(cfg.backoff_base * 2 ** (attempt - 1))
            self.network_calls += 1
            try:
                resp = self._client().post(cfg.endpoint, json=payload, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                logger.warning("LLM request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("LLM request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code >= 400:
                raise ExternalServiceError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ExternalServiceError(f"unexpected completion payload: {exc}") from exc
        raise ExternalServiceError(f"giving up after {cfg.max_attempts} attempts ({last_error})")

    def rewrite(self, instance, session):
        iid = instance.instance_id
        if iid in self.cache:
            return self.cache[iid]
        if self.config.mode == "file":
            if iid not in self.offline:
                raise ExternalServiceError(f"no offline rewrite for instance {iid}")
            text = clean_completion(self.offline[iid], self.config.max_query_len)
        else:
            request = build_request(instance, session)
            try:
                text = clean_completion(self._complete(request.prompt), self.config.max_query_len)
            except ExternalServiceError as exc:
                raise ExternalServiceError(f"{iid}: {exc}") from exc
            if text:
                self._remember(iid, text)
        if not text:
            logger.warning("empty rewrite for %s; falling back to the raw query", iid)
            text = instance.current_query
        return text


def rewrite(instance, session, config, **client_kwargs):
    return RewriteClient(config, **client_kwargs).rewrite(instance, session)


def bootstrap_dataset(instances, sessions, config: BootstrapConfig, client=None):
    """D0: one rewrite per instance, in instance order."""
    client = client or RewriteClient(config)
    by_session = {s.session_id: s for s in sessions}
    instances = list(instances)

    def one(inst):
        if inst.session_id not in by_session:
            raise ValidationError(f"{inst.instance_id}: unknown session {inst.session_id}")
        return client.rewrite(inst, by_session[inst.session_id])

    if config.mode == "api" and config.max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
            targets = list(pool.map(one, instances))
    else:
        targets = [one(inst) for inst in instances]
    provenance = "llm_bootstrap" if config.mode == "api" else "file"
    rows = [DatasetRow(inst.instance_id, target=t) for inst, t in zip(instances, targets)]
    return DatasetVersion(0, rows, provenance, n=1)
