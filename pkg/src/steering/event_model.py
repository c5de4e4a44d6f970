"""
src/steering/event_model.py

Multi-event prompts and their temporal layout.
- EventSpec / EventPlan hold the ordered events, anchor phrases and duration weights.
- assign_windows() splits the latent frames by largest-remainder rounding.
- resolve_anchor_indices() maps anchor phrases to text-token positions.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

from src.core.errors import AnchorResolutionError, PlanValidationError

logger = logging.getLogger(__name__)

# Marker prefixes used by common subword tokenizers (WordPiece, SentencePiece, BPE)
_SUBWORD_MARKERS = ("##", "▁", "Ġ")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
WEIGHT_DENOMINATOR_LIMIT = 10**9


@dataclass(frozen=True)
class EventSpec:
    event_id: int
    text: str
    anchor_phrases: tuple[str, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class EventPlan:
    events: tuple[EventSpec, ...]
    latent_frames: int
    tokens_per_frame: int = 1
    prompt_text: str | None = None

    @property
    def event_count(self) -> int:
        return len(self.events)

    @property
    def weights(self) -> list[float]:
        return [e.weight for e in self.events]

    @property
    def prompt(self) -> str:
        if self.prompt_text is not None:
            return self.prompt_text
        return " ".join(e.text for e in self.events)


@dataclass(frozen=True)
class Span:
    event_id: int
    start: int
    end: int

    @property
    def width(self) -> int:
        return self.end - self.start

    def __str__(self) -> str:
        return f"[{self.start},{self.end})"


@dataclass(frozen=True)
class SpanAssignment:
    spans: tuple[Span, ...]

    @property
    def widths(self) -> list[int]:
        return [s.width for s in self.spans]

    @property
    def latent_frames(self) -> int:
        return self.spans[-1].end if self.spans else 0

    def span_for(self, event_id: int) -> Span:
        for s in self.spans:
            if s.event_id == event_id:
                return s
        raise KeyError(event_id)

    def to_dict(self) -> dict:
        return {
            "latent_frames": self.latent_frames,
            "spans": [
                {"event_id": s.event_id, "start": s.start, "end": s.end}
                for s in self.spans
            ],
        }


@dataclass(frozen=True)
class AnchorIndexSet:
    indices: dict[int, tuple[int, ...]]
    seq_len: int
    warnings: tuple[str, ...] = ()

    def for_event(self, event_id: int) -> tuple[int, ...]:
        return self.indices.get(event_id, ())

    def competitors(self, event_id: int) -> dict[int, tuple[int, ...]]:
        """Anchor sets of every other event that has at least one token."""
        return {
            eid: idx for eid, idx in sorted(self.indices.items())
            if eid != event_id and idx
        }


@dataclass
class PlanReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ---- Window assignment ----

def assign_windows(weights: Sequence[float], latent_frames: int) -> SpanAssignment:
    """
    Largest-remainder split of `latent_frames` proportional to `weights`.
    Ties in the fractional part go to the earliest event.
    """
    if not weights:
        raise PlanValidationError(["empty weights"])
    bad = [i for i, w in enumerate(weights) if not w > 0]
    if bad:
        raise PlanValidationError([f"nonpositive weight for event {i}" for i in bad])
    if not all(math.isfinite(w) for w in weights):
        raise PlanValidationError(["weights must be finite"])
    if int(latent_frames) < 1:
        raise PlanValidationError(["latent_frames must be >= 1"])

    # Rationals with a bounded denominator keep the split invariant under common
    # rescaling, also when the rescaled floats are off by an ulp (3 * 0.1).
    exact = [Fraction(w).limit_denominator(WEIGHT_DENOMINATOR_LIMIT) for w in weights]
    total = sum(exact)
    quotas = [Fraction(latent_frames) * w / total for w in exact]
    widths = [q.numerator // q.denominator for q in quotas]

    remainder = latent_frames - sum(widths)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - widths[i]), i))
    for i in order[:remainder]:
        widths[i] += 1

    spans = []
    start = 0
    for eid, n in enumerate(widths):
        spans.append(Span(eid, start, start + n))
        start += n
    return SpanAssignment(tuple(spans))


def span_row_indices(span: Span, tokens_per_frame: int) -> range:
    return range(span.start * tokens_per_frame, span.end * tokens_per_frame)


# ---- Tokens & anchors ----

def tokenize_prompt(prompt: str, offset: int = 0) -> list[tuple[str, int]]:
    """Word/punctuation tokenizer for runs without a backbone tokenizer."""
    return [(m.group(0), offset + i) for i, m in enumerate(_TOKEN_RE.finditer(prompt))]


def _strip_marker(token: str) -> str:
    for marker in _SUBWORD_MARKERS:
        if token.startswith(marker):
            return token[len(marker):]
    return token


def _token_char_spans(
    prompt: str, tokenization: Sequence[tuple[str, int]]
) -> list[tuple[int, int, int]]:
    """Align tokens to the prompt left to right -> (char_start, char_end, position)."""
    lowered = prompt.lower()
    cursor = 0
    out = []
    for token, position in tokenization:
        piece = _strip_marker(token).strip().lower()
        if not piece:
            continue
        at = lowered.find(piece, cursor)
        if at < 0:
            # special tokens (<s>, padding, ...) have no text
            continue
        out.append((at, at + len(piece), position))
        cursor = at + len(piece)
    return out


def _phrase_occurrences(prompt: str, phrase: str) -> list[tuple[int, int]]:
    needle = phrase.strip().lower()
    hay = prompt.lower()
    out = []
    at = hay.find(needle)
    while at >= 0 and needle:
        out.append((at, at + len(needle)))
        at = hay.find(needle, at + 1)
    return out


def resolve_anchor_indices(
    plan: EventPlan, tokenization: Sequence[tuple[str, int]]
) -> AnchorIndexSet:
    """
    Each event gets the positions of all tokens intersecting any occurrence of
    any of its anchor phrases in the prompt.
    """
    prompt = plan.prompt
    char_spans = _token_char_spans(prompt, tokenization)
    seq_len = max((pos for _, pos in tokenization), default=-1) + 1

    indices: dict[int, tuple[int, ...]] = {}
    unmatched: dict[int, list[str]] = {}
    for event in plan.events:
        found: set[int] = set()
        for phrase in event.anchor_phrases:
            hits = set()
            for lo, hi in _phrase_occurrences(prompt, phrase):
                hits.update(pos for s, e, pos in char_spans if s < hi and e > lo)
            if not hits:
                unmatched.setdefault(event.event_id, []).append(phrase)
            found |= hits
        indices[event.event_id] = tuple(sorted(found))

    if unmatched:
        raise AnchorResolutionError(unmatched)

    warnings = []
    ids = sorted(indices)
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            shared = sorted(set(indices[a]) & set(indices[b]))
            if shared:
                msg = f"events {a} and {b} share anchor tokens {shared}"
                logger.warning(msg)
                warnings.append(msg)

    return AnchorIndexSet(indices=indices, seq_len=seq_len, warnings=tuple(warnings))


def event_char_ranges(plan: EventPlan) -> list[tuple[int, int]]:
    """Character range of every event's text inside plan.prompt (searched in order)."""
    prompt = plan.prompt
    cursor = 0
    out = []
    for event in plan.events:
        at = prompt.find(event.text, cursor)
        if at < 0:
            at = cursor
            end = cursor
        else:
            end = at + len(event.text)
        out.append((at, end))
        cursor = end
    return out


# ---- Validation ----

def validate_plan(
    plan: EventPlan, tokenization: Sequence[tuple[str, int]] | None = None
) -> PlanReport:
    report = PlanReport()
    if plan.event_count < 2:
        report.violations.append(f"at least 2 events required, got {plan.event_count}")
    if plan.latent_frames < 1:
        report.violations.append("latent_frames must be >= 1")
    if plan.tokens_per_frame < 1:
        report.violations.append("tokens_per_frame must be >= 1")

    for position, event in enumerate(plan.events):
        if event.event_id != position:
            report.violations.append(
                f"event ids must be 0..A-1 in order (found {event.event_id} at {position})"
            )
        if not event.weight > 0:
            report.violations.append(f"nonpositive weight for event {event.event_id}")
        if not event.anchor_phrases:
            report.violations.append(f"event {event.event_id} has no anchor phrases")
        elif any(not p.strip() for p in event.anchor_phrases):
            report.violations.append(f"event {event.event_id} has an empty anchor phrase")

    seen: dict[str, int] = {}
    for event in plan.events:
        for phrase in event.anchor_phrases:
            key = phrase.strip().lower()
            if key and key in seen and seen[key] != event.event_id:
                report.warnings.append(
                    f"anchor phrase {phrase!r} used by events {seen[key]} and {event.event_id}"
                )
            seen.setdefault(key, event.event_id)

    if report.ok:
        spans = assign_windows(plan.weights, plan.latent_frames)
        empty = [s.event_id for s in spans.spans if s.width == 0]
        if empty:
            report.warnings.append(f"some spans have zero width (events {empty})")

    if report.ok and tokenization is not None:
        try:
            anchors = resolve_anchor_indices(plan, tokenization)
        except AnchorResolutionError as exc:
            report.violations.append(str(exc))
        else:
            report.warnings.extend(anchors.warnings)

    for msg in report.warnings:
        logger.debug("plan warning: %s", msg)
    return report


def ensure_valid(plan: EventPlan, tokenization: Sequence[tuple[str, int]] | None = None) -> PlanReport:
    report = validate_plan(plan, tokenization)
    if not report.ok:
        raise PlanValidationError(report.violations)
    return report


# ---- JSON ingest ----

def plan_from_dict(doc: dict[str, Any]) -> EventPlan:
    """
    {"latent_frames": int, "tokens_per_frame": int,
     "events": [{"text": str, "anchors": [str], "weight": number}], "prompt": str?}
    Missing weights mean an equal split.
    """
    if not isinstance(doc, dict):
        raise PlanValidationError(["plan document must be a JSON object"])
    try:
        latent_frames = int(doc["latent_frames"])
        raw_events = doc["events"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PlanValidationError([f"missing or invalid field: {exc}"]) from exc
    if not isinstance(raw_events, list):
        raise PlanValidationError(["'events' must be a list"])

    events = []
    for i, ev in enumerate(raw_events):
        if not isinstance(ev, dict):
            raise PlanValidationError([f"event {i} must be an object"])
        anchors = ev.get("anchors")
        if anchors is None:
            anchors = []
        if not isinstance(anchors, list):
            raise PlanValidationError([f"event {i}: 'anchors' must be a list of phrases"])
        try:
            weight = float(ev.get("weight", 1.0))
        except (TypeError, ValueError) as exc:
            raise PlanValidationError([f"event {i}: weight must be a number, got {ev.get('weight')!r}"]) from exc
        events.append(
            EventSpec(
                event_id=i,
                text=str(ev.get("text", "")),
                anchor_phrases=tuple(str(a) for a in anchors),
                weight=weight,
            )
        )
    try:
        tokens_per_frame = int(doc.get("tokens_per_frame", 1))
    except (TypeError, ValueError) as exc:
        raise PlanValidationError([f"tokens_per_frame must be an integer: {exc}"]) from exc
    return EventPlan(
        events=tuple(events),
        latent_frames=latent_frames,
        tokens_per_frame=tokens_per_frame,
        prompt_text=doc.get("prompt"),
    )


def plan_to_dict(plan: EventPlan) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "latent_frames": plan.latent_frames,
        "tokens_per_frame": plan.tokens_per_frame,
        "events": [
            {"text": e.text, "anchors": list(e.anchor_phrases), "weight": e.weight}
            for e in plan.events
        ],
    }
    if plan.prompt_text is not None:
        doc["prompt"] = plan.prompt_text
    return doc


def load_plan(path: str | Path) -> EventPlan:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return plan_from_dict(doc)


def with_anchors(plan: EventPlan, phrases: Iterable[Sequence[str]]) -> EventPlan:
    phrases = list(phrases)
    events = tuple(
        EventSpec(e.event_id, e.text, tuple(p), e.weight)
        for e, p in zip(plan.events, phrases)
    )
    return EventPlan(events, plan.latent_frames, plan.tokens_per_frame, plan.prompt_text)
