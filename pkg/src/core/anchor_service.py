# anchor_service.py
"""
Anchor phrase extraction through a chat-completion endpoint.

The model gets the instruction below plus the raw multi-event prompt and must
answer with one comma-separated line. Every phrase has to be a substring of the
prompt; phrases are then grouped per event by where they first occur.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Protocol, Sequence

from openai import OpenAI, OpenAIError

from src.core import config
from src.core.errors import (
    AnchorFileError,
    AnchorServiceError,
    AnchorTransportError,
    MalformedResponseError,
    SubstringViolationError,
)

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = """You are an assistant that analyzes a single text prompt describing a video with multiple temporally ordered events.

Your goal is to identify, for each event, a set of anchor phrases that clearly distinguish this event from the others. Anchors should be short noun phrases or verb phrases taken directly from the prompt, such as setting descriptors like "sunny desert" or "icy cave" or concise action phrases like "walking forward" or "reading a book".

Requirements:
1. Do NOT invent new events. Only use events that are explicitly described in the input prompt.
2. Every anchor phrase must be a substring of the original prompt.
3. Omit the shared subject and transitional words. Keep the full remaining verb phrase that describes what is happening in that specific event.

Input format: I will give you one prompt that may contain multiple events in temporal order.
Output format: List all anchor phrases you extract for this prompt on a single line, separated by commas, with no additional explanations.

Now analyze the following prompt and return the anchors in the exact format above."""

# "then" connectors and sentence punctuation delimit events in a flat prompt
_EVENT_SPLIT = re.compile(r"\s*(?:[.;!?]+|,?\s*\b(?:and\s+)?then\b|,\s*after\s+that\b|,\s*finally\b)\s*", re.I)


@dataclass(frozen=True)
class AnchorRequest:
    prompt: str
    endpoint: str | None = None
    model: str = config.ANCHOR_MODEL
    token_env: str = config.ANCHOR_TOKEN_ENV

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise AnchorServiceError("anchor request needs a nonempty prompt")


@dataclass(frozen=True)
class AnchorResponse:
    phrases: tuple[str, ...]
    raw: str
    event_phrases: tuple[tuple[str, ...], ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def serialize(self) -> str:
        return ", ".join(self.phrases)


@dataclass(frozen=True)
class AnchorFileResult:
    event_phrases: list[list[str]]
    warnings: list[str]


class ChatTransport(Protocol):
    def complete(self, messages: list[dict[str, str]], *, model: str, temperature: float) -> str:
        ...


class OpenAIChatTransport:
    """Chat-completion transport over the openai SDK (any compatible base_url)."""

    def __init__(
        self,
        endpoint: str | None = None,
        token_env: str = config.ANCHOR_TOKEN_ENV,
        timeout: float = config.ANCHOR_TIMEOUT_SEC,
        max_retries: int = config.ANCHOR_MAX_RETRIES,
    ):
        api_key = config.require_anchor_token(token_env)
        self._client = OpenAI(
            api_key=api_key,
            base_url=endpoint,
            timeout=timeout,
            max_retries=max_retries,
        )

    def complete(self, messages, *, model, temperature):
        try:
            resp = self._client.chat.completions.create(
                model=model,
                messages=messages,
                temperature=temperature,
            )
        except OpenAIError as exc:
            raise AnchorTransportError(f"chat completion failed: {exc}") from exc
        return resp.choices[0].message.content or ""


class FixtureTransport:
    """Offline transport: canned replies keyed by prompt (or one reply for all)."""

    def __init__(self, replies: str | dict[str, str]):
        self.replies = replies
        self.calls: list[list[dict[str, str]]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureTransport":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise AnchorFileError(f"cannot read fixture {path}: {exc}") from exc

    def complete(self, messages, *, model, temperature):
        self.calls.append(messages)
        if isinstance(self.replies, str):
            return self.replies
        prompt = messages[-1]["content"]
        if prompt not in self.replies:
            raise AnchorTransportError(f"no fixture reply for prompt {prompt[:40]!r}")
        return self.replies[prompt]


# ---- Parsing & validation ----

def parse_anchor_line(text: str | None) -> tuple[str, ...]:
    """One comma-separated line -> ordered, de-duplicated phrases."""
    if text is None or not text.strip():
        raise MalformedResponseError("empty anchor response")
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise MalformedResponseError(f"expected a single line of anchors, got {len(lines)} lines")
    phrases = []
    for part in lines[0].split(","):
        phrase = part.strip().strip("\"'").strip()
        if phrase and phrase not in phrases:
            phrases.append(phrase)
    if not phrases:
        raise MalformedResponseError("anchor response contains no phrases")
    return tuple(phrases)


def check_substrings(phrases: Sequence[str], prompt: str) -> None:
    """Each phrase must occur verbatim (case included) in the prompt."""
    for phrase in phrases:
        if phrase not in prompt:
            raise SubstringViolationError(phrase)


def segment_prompt(prompt: str) -> list[tuple[int, int]]:
    """Character ranges of the event sentences of a flat prompt."""
    ranges = []
    cursor = 0
    for m in _EVENT_SPLIT.finditer(prompt):
        if m.start() > cursor:
            ranges.append((cursor, m.start()))
        cursor = m.end()
    if cursor < len(prompt):
        ranges.append((cursor, len(prompt)))
    return [(a, b) for a, b in ranges if prompt[a:b].strip()]


def assign_to_events(
    phrases: Sequence[str], prompt: str, event_ranges: Sequence[tuple[int, int]]
) -> tuple[tuple[str, ...], ...]:
    """A phrase belongs to the event whose range holds its first occurrence."""
    groups: list[list[str]] = [[] for _ in event_ranges]
    for phrase in phrases:
        at = prompt.find(phrase)
        owner = len(event_ranges) - 1
        for i, (lo, hi) in enumerate(event_ranges):
            if lo <= at < hi:
                owner = i
                break
            if at < lo:
                owner = max(i - 1, 0)
                break
        groups[owner].append(phrase)
    return tuple(tuple(g) for g in groups)


def _audit(path: str | Path | None, request: AnchorRequest, raw: str) -> None:
    if not path:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "dt": datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S"),
        "endpoint": request.endpoint,
        "model": request.model,
        "prompt": request.prompt,
        "response": raw,
    }
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, ensure_ascii=False) + "\n")


def extract_anchors(
    req: AnchorRequest,
    transport: ChatTransport,
    event_ranges: Sequence[tuple[int, int]] | None = None,
    audit_path: str | Path | None = None,
) -> AnchorResponse:
    """
    Ask the endpoint for anchors of `req.prompt`, validate and group them.
    `event_ranges` are the events' character ranges in the prompt; when
    omitted the prompt is segmented on "then" connectors and punctuation.
    """
    messages = [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": req.prompt},
    ]
    raw = transport.complete(messages, model=req.model, temperature=0)
    _audit(audit_path, req, raw)

    phrases = parse_anchor_line(raw)
    check_substrings(phrases, req.prompt)

    ranges = list(event_ranges) if event_ranges is not None else segment_prompt(req.prompt)
    groups = assign_to_events(phrases, req.prompt, ranges) if ranges else (phrases,)
    warnings = tuple(
        f"event {i} received no anchor phrase" for i, g in enumerate(groups) if not g
    )
    for msg in warnings:
        logger.warning(msg)
    logger.info("extracted %d anchor phrases for %d events", len(phrases), len(groups))
    return AnchorResponse(phrases=phrases, raw=raw, event_phrases=groups, warnings=warnings)


def anchors_from_file(path: str | Path) -> AnchorFileResult:
    """
    Read per-event anchors from a plan JSON ("events": [{"text", "anchors"}]).
    Same validation as extract_anchors: each phrase must occur in the prompt.
    """
    if not os.path.exists(path):
        raise AnchorFileError(f"anchor file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise AnchorFileError(f"cannot parse anchor file {path}: {exc}") from exc

    events = doc.get("events") if isinstance(doc, dict) else None
    if not isinstance(events, list):
        raise AnchorServiceError(f"{path}: missing 'events' list")
    prompt = doc.get("prompt") or " ".join(str(e.get("text", "")) for e in events)

    out: list[list[str]] = []
    warnings: list[str] = []
    owner: dict[str, int] = {}
    for i, ev in enumerate(events):
        anchors = ev.get("anchors") if isinstance(ev, dict) else None
        if not anchors:
            raise AnchorServiceError(f"event {i} has no 'anchors' field")
        if not isinstance(anchors, list):
            raise AnchorServiceError(f"event {i}: 'anchors' must be a list of phrases")
        phrases = [str(a).strip() for a in anchors if str(a).strip()]
        check_substrings(phrases, prompt)
        for phrase in phrases:
            key = phrase
            if key in owner and owner[key] != i:
                msg = f"anchor phrase {phrase!r} shared by events {owner[key]} and {i}"
                logger.warning(msg)
                warnings.append(msg)
            owner.setdefault(key, i)
        out.append(phrases)
    return AnchorFileResult(event_phrases=out, warnings=warnings)


def response_to_dict(resp: AnchorResponse) -> dict[str, Any]:
    return {
        "phrases": list(resp.phrases),
        "raw": resp.raw,
        "event_phrases": [list(g) for g in resp.event_phrases],
    }


def response_from_dict(doc: dict[str, Any]) -> AnchorResponse:
    return AnchorResponse(
        phrases=tuple(doc["phrases"]),
        raw=doc.get("raw", ""),
        event_phrases=tuple(tuple(g) for g in doc.get("event_phrases", [])),
    )
