"""
src/sim/simulator.py

Toy multi-head cross-attention stack standing in for a video diffusion backbone.

- generate_scenario(): seeded event key clusters, anchor/filler keys and queries
  that lean towards event 0 (the "first action persists" failure mode).
- run(): evaluates the stack over steps x blocks, optionally steering the
  queries where the schedule allows, and reports attention mass per span.
- compare() / run_batch(): paired off/on diffs and seed sweeps.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np

from src.core.errors import DimensionMismatchError, ScenarioError, SimulationError, SteeringError
from src.steering.abss import SolverMode
from src.steering.eaqs import (
    AttentionState,
    ProjectorCache,
    SteeringConfig,
    SteeringContext,
    apply_layer,
)
from src.steering.event_model import (
    AnchorIndexSet,
    EventPlan,
    EventSpec,
    SpanAssignment,
    assign_windows,
    resolve_anchor_indices,
    span_row_indices,
    tokenize_prompt,
)
from src.steering.scheduler import DESK_SCHEDULE, SteeringSchedule, is_active
from src.steering.subspace import KeySlice, dominant_direction

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class SimScenario:
    head_count: int = 4
    head_dim: int = 32
    latent_frames: int = 8
    tokens_per_frame: int = 4
    anchor_tokens_per_event: int = 3
    filler_tokens: int = 4
    event_count: int = 2
    bias_strength: float = 0.8
    cross_event_angle: float = 90.0
    seed: int = 0
    anchor_noise: float = 0.05
    logit_scale: float = 4.0

    def __post_init__(self):
        counts = ("head_count", "head_dim", "latent_frames", "tokens_per_frame",
                  "anchor_tokens_per_event", "filler_tokens", "event_count")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ScenarioError(f"{name} must be >= 1")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ScenarioError(f"bias_strength must be in [0, 1], got {self.bias_strength}")
        if not 0.0 < self.cross_event_angle <= 90.0:
            raise ScenarioError(f"cross_event_angle must be in (0, 90], got {self.cross_event_angle}")
        needed = self.event_count if self.cross_event_angle == 90.0 else self.event_count + 1
        if needed > self.head_dim:
            raise ScenarioError(
                f"cannot place {self.event_count} clusters {self.cross_event_angle} deg apart "
                f"in dimension {self.head_dim}"
            )
        if self.anchor_noise < 0 or self.logit_scale <= 0:
            raise ScenarioError("anchor_noise must be >= 0 and logit_scale > 0")


@dataclass(frozen=True)
class GeneratedScenario:
    config: SimScenario
    state: AttentionState
    plan: EventPlan
    spans: SpanAssignment
    anchors: AnchorIndexSet
    centers: np.ndarray  # H x A x D unit vectors


@dataclass(frozen=True)
class SpanStats:
    span_index: int
    event_id: int
    start: int
    end: int
    event_mass: tuple[float, ...]
    target_mass: float
    leakage: float
    margin: float
    mean_alpha: float | None = None
    mean_beta: float | None = None


@dataclass(frozen=True)
class AttentionReport:
    seed: int
    steered: bool
    solver_mode: str | None
    strength: str | None
    ablation: str | None
    spans: tuple[SpanStats, ...]
    steer_calls: int = 0
    steered_cells: int = 0
    total_cells: int | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "steered": self.steered,
            "solver_mode": self.solver_mode,
            "strength": self.strength,
            "ablation": self.ablation,
            "steer_calls": self.steer_calls,
            "steered_cells": self.steered_cells,
            "total_cells": self.total_cells,
            "spans": [
                {
                    "span_index": s.span_index,
                    "event_id": s.event_id,
                    "start": s.start,
                    "end": s.end,
                    "event_mass": list(s.event_mass),
                    "target_mass": s.target_mass,
                    "leakage": s.leakage,
                    "margin": s.margin,
                    "mean_alpha": s.mean_alpha,
                    "mean_beta": s.mean_beta,
                }
                for s in self.spans
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AttentionReport":
        spans = tuple(
            SpanStats(
                span_index=s["span_index"],
                event_id=s["event_id"],
                start=s["start"],
                end=s["end"],
                event_mass=tuple(s["event_mass"]),
                target_mass=s["target_mass"],
                leakage=s["leakage"],
                margin=s["margin"],
                mean_alpha=s.get("mean_alpha"),
                mean_beta=s.get("mean_beta"),
            )
            for s in doc["spans"]
        )
        return cls(
            seed=doc["seed"],
            steered=doc["steered"],
            solver_mode=doc.get("solver_mode"),
            strength=doc.get("strength"),
            ablation=doc.get("ablation"),
            spans=spans,
            steer_calls=doc.get("steer_calls", 0),
            steered_cells=doc.get("steered_cells", 0),
            total_cells=doc.get("total_cells"),
            schema_version=doc.get("schema_version", SCHEMA_VERSION),
        )


@dataclass(frozen=True)
class SpanDelta:
    span_index: int
    event_id: int
    mass_off: float
    mass_on: float
    margin_off: float
    margin_on: float
    leakage_off: float
    leakage_on: float

    @property
    def target_mass_delta(self) -> float:
        return self.mass_on - self.mass_off

    @property
    def competitor_mass_delta(self) -> float:
        return self.leakage_on - self.leakage_off

    @property
    def margin_delta(self) -> float:
        return self.margin_on - self.margin_off


@dataclass(frozen=True)
class DeltaReport:
    seed: int
    spans: tuple[SpanDelta, ...]
    target_gain: bool
    leakage_drop: bool
    schema_version: int = SCHEMA_VERSION

    @property
    def win(self) -> bool:
        return self.target_gain and self.leakage_drop

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "target_gain": self.target_gain,
            "leakage_drop": self.leakage_drop,
            "win": self.win,
            "spans": [
                {
                    "span_index": s.span_index,
                    "event_id": s.event_id,
                    "mass_off": s.mass_off,
                    "mass_on": s.mass_on,
                    "margin_off": s.margin_off,
                    "margin_on": s.margin_on,
                    "leakage_off": s.leakage_off,
                    "leakage_on": s.leakage_on,
                    "target_mass_delta": s.target_mass_delta,
                    "competitor_mass_delta": s.competitor_mass_delta,
                    "margin_delta": s.margin_delta,
                }
                for s in self.spans
            ],
        }


@dataclass
class BatchSummary:
    deltas: list[DeltaReport] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)
    pairs: dict[int, tuple[AttentionReport, AttentionReport]] = field(default_factory=dict)

    @property
    def wins(self) -> int:
        return sum(1 for d in self.deltas if d.win)

    @property
    def win_rate(self) -> float:
        return self.wins / len(self.deltas) if self.deltas else 0.0


# ---- Scenario generation ----

def _cluster_centers(rng: np.random.Generator, count: int, dim: int, angle_deg: float) -> np.ndarray:
    """`count` unit vectors with pairwise angle exactly `angle_deg`."""
    cos_t = math.cos(math.radians(angle_deg))
    if angle_deg == 90.0:
        cos_t = 0.0
    extra = 0 if cos_t == 0.0 else 1
    basis, _ = np.linalg.qr(rng.standard_normal((dim, count + extra)))
    basis = basis.T  # rows orthonormal
    if extra == 0:
        return basis[:count].copy()
    shared = basis[count]
    return math.sqrt(1.0 - cos_t) * basis[:count] + math.sqrt(cos_t) * shared


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def scenario_prompt(cfg: SimScenario) -> tuple[EventPlan, list[tuple[str, int]]]:
    filler = " ".join(f"f{j}" for j in range(cfg.filler_tokens))
    texts = [
        " ".join(f"e{i}w{t}" for t in range(cfg.anchor_tokens_per_event))
        for i in range(cfg.event_count)
    ]
    prompt = " ".join([filler, *texts])
    events = tuple(EventSpec(i, text, (text,), 1.0) for i, text in enumerate(texts))
    plan = EventPlan(events, cfg.latent_frames, cfg.tokens_per_frame, prompt_text=prompt)
    return plan, tokenize_prompt(prompt)


def generate_scenario(cfg: SimScenario) -> GeneratedScenario:
    """Deterministic given cfg.seed; one generator drives every draw."""
    rng = np.random.default_rng(cfg.seed)
    H, D, A = cfg.head_count, cfg.head_dim, cfg.event_count
    norm = math.sqrt(cfg.logit_scale * math.sqrt(D))

    plan, tokens = scenario_prompt(cfg)
    anchors = resolve_anchor_indices(plan, tokens)
    spans = assign_windows(plan.weights, plan.latent_frames)
    L_k = len(tokens)
    S = cfg.latent_frames * cfg.tokens_per_frame

    centers = np.stack([_cluster_centers(rng, A, D, cfg.cross_event_angle) for _ in range(H)])
    keys = np.empty((H, L_k, D))
    queries = np.empty((H, S, D))
    for h in range(H):
        keys[h] = _unit_rows(rng.standard_normal((L_k, D)))
        for eid, idx in anchors.indices.items():
            noisy = centers[h, eid] + cfg.anchor_noise * rng.standard_normal((len(idx), D))
            keys[h, list(idx)] = _unit_rows(noisy)
        own = _unit_rows(rng.standard_normal((S, D)))
        mixed = (1.0 - cfg.bias_strength) * own + cfg.bias_strength * centers[h, 0]
        queries[h] = _unit_rows(mixed)
    keys *= norm
    queries *= norm

    frame_map = np.arange(S) // cfg.tokens_per_frame
    state = AttentionState(queries=queries, keys=keys, frame_map=frame_map)
    return GeneratedScenario(cfg, state, plan, spans, anchors, centers)


# ---- Attention & reporting ----

def attention(Q: np.ndarray, K: np.ndarray, scale: float) -> np.ndarray:
    """Row-wise softmax(scale * Q K^T)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    if Q.shape[1] != K.shape[1]:
        raise DimensionMismatchError(f"Q is {Q.shape}, K is {K.shape}")
    if not scale > 0:
        raise SteeringError(f"softmax scale must be > 0, got {scale}")
    logits = scale * (Q @ K.T)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def _event_directions(gen: GeneratedScenario) -> np.ndarray:
    """H x A dominant anchor directions, used for the margin column."""
    keys = gen.state.keys
    out = np.zeros((gen.state.head_count, gen.plan.event_count, gen.state.head_dim))
    for h in range(gen.state.head_count):
        for eid, idx in gen.anchors.indices.items():
            if idx:
                out[h, eid] = dominant_direction(KeySlice(keys[h, list(idx)], eid))
    return out


def _span_stats(
    gen: GeneratedScenario,
    block_queries: Sequence[np.ndarray],
    contexts: Sequence[SteeringContext] = (),
) -> tuple[SpanStats, ...]:
    state = gen.state
    scale = 1.0 / math.sqrt(state.head_dim)
    A = gen.plan.event_count
    event_cols = [list(gen.anchors.for_event(e)) for e in range(A)]
    directions = _event_directions(gen)

    # per block: H x S x A mass and H x S x A scores; unchanged blocks share one array
    seen: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    masses = []
    scores = []
    for q in block_queries:
        if id(q) not in seen:
            m = np.empty((state.head_count, state.token_count, A))
            for h in range(state.head_count):
                weights = attention(q[h], state.keys[h], scale)
                if not np.allclose(weights.sum(axis=1), 1.0, rtol=0, atol=ROW_SUM_TOL):
                    raise SimulationError("attention rows do not sum to 1")
                for e, cols in enumerate(event_cols):
                    m[h, :, e] = weights[:, cols].sum(axis=1) if cols else 0.0
            seen[id(q)] = (m, np.einsum("hsd,had->hsa", q, directions))
        m, sc = seen[id(q)]
        masses.append(m)
        scores.append(sc)
    masses = np.stack(masses)  # B x H x S x A
    scores = np.stack(scores)

    stats = []
    for k, span in enumerate(gen.spans.spans):
        rows = span_row_indices(span, gen.plan.tokens_per_frame)
        eid = span.event_id
        if span.width == 0:
            stats.append(SpanStats(k, eid, span.start, span.end, tuple([0.0] * A), 0.0, 0.0, 0.0))
            continue
        per_event = masses[:, :, rows.start:rows.stop, :].mean(axis=(0, 1, 2))
        sc = scores[:, :, rows.start:rows.stop, :]
        others = [e for e in range(A) if e != eid]
        oth_max = sc[..., others].max(axis=-1) if others else np.zeros(sc.shape[:-1])
        margin = float((sc[..., eid] - oth_max).mean())
        leakage = float(sum(per_event[e] for e in others))

        mine = [s for ctx in contexts if ctx.event_id == eid for s in ctx.strengths]
        mean_alpha = float(np.mean([s.alpha for s in mine])) if mine else None
        mean_beta = float(np.mean([s.beta for s in mine])) if mine else None
        stats.append(
            SpanStats(
                span_index=k,
                event_id=eid,
                start=span.start,
                end=span.end,
                event_mass=tuple(float(v) for v in per_event),
                target_mass=float(per_event[eid]),
                leakage=leakage,
                margin=margin,
                mean_alpha=mean_alpha,
                mean_beta=mean_beta,
            )
        )
    return tuple(stats)


def _carry(base: np.ndarray, current: np.ndarray, carry: float) -> np.ndarray:
    if carry == 1.0:
        return current
    if carry == 0.0:
        return base
    return base + carry * (current - base)


def _unsteered_report(gen: GeneratedScenario) -> AttentionReport:
    # every block sees the base queries, so one evaluation stands for all of them
    return AttentionReport(
        seed=gen.config.seed,
        steered=False,
        solver_mode=None,
        strength=None,
        ablation=None,
        spans=_span_stats(gen, [gen.state.queries]),
    )


def run(
    scenario: SimScenario | GeneratedScenario,
    steering_enabled: bool = True,
    solver_mode: SolverMode | str = SolverMode.CLOSED_FORM,
    schedule: SteeringSchedule = DESK_SCHEDULE,
    *,
    config: SteeringConfig | None = None,
    carry: float = 1.0,
    rebuild_projectors: bool = False,
) -> AttentionReport:
    """
    Evaluate the toy stack for schedule.total_steps x schedule.total_blocks
    cells. Steered queries of a block carry into the next step with weight
    `carry`; the report is taken after the final step, averaged over blocks.
    A run that steers no cell reports the unsteered stack, with no solver or
    schedule fields.
    """
    gen = scenario if isinstance(scenario, GeneratedScenario) else generate_scenario(scenario)
    if not 0.0 <= carry <= 1.0:
        raise SimulationError(f"carry must be in [0, 1], got {carry}")
    config = config or SteeringConfig()
    config = replace(config, solver_mode=SolverMode(solver_mode))
    base = gen.state.queries
    total_cells = schedule.total_steps * schedule.total_blocks

    if not steering_enabled:
        return _unsteered_report(gen)

    rng = np.random.default_rng([gen.config.seed, 1])
    cache = ProjectorCache(rebuild=rebuild_projectors)
    current = [base] * max(schedule.total_blocks, 1)
    contexts: list[SteeringContext] = []
    steered_cells = 0

    for step in range(schedule.total_steps):
        for block in range(schedule.total_blocks):
            entering = _carry(base, current[block], carry)
            if is_active(step, block, schedule):
                out = apply_layer(
                    gen.state.with_queries(entering),
                    gen.plan,
                    gen.spans,
                    gen.anchors,
                    True,
                    config=config,
                    cache=cache,
                    layer=block,
                    rng=rng,
                    trace=contexts,
                )
                entering = out.queries
                steered_cells += 1
            current[block] = entering

    if steered_cells == 0:
        return _unsteered_report(gen)

    steer_calls = sum(len(ctx.heads) for ctx in contexts)
    logger.debug("seed %d: %d steered cells, %d head edits", gen.config.seed, steered_cells, steer_calls)
    return AttentionReport(
        seed=gen.config.seed,
        steered=True,
        solver_mode=config.solver_mode.value,
        strength=config.strength.value,
        ablation=config.ablation.value,
        spans=_span_stats(gen, current, contexts),
        steer_calls=steer_calls,
        steered_cells=steered_cells,
        total_cells=total_cells,
    )


def compare(off: AttentionReport, on: AttentionReport) -> DeltaReport:
    if len(off.spans) != len(on.spans) or any(
        (a.event_id, a.start, a.end) != (b.event_id, b.start, b.end)
        for a, b in zip(off.spans, on.spans)
    ):
        raise SimulationError("reports describe different span layouts")

    deltas = tuple(
        SpanDelta(
            span_index=a.span_index,
            event_id=a.event_id,
            mass_off=a.target_mass,
            mass_on=b.target_mass,
            margin_off=a.margin,
            margin_on=b.margin,
            leakage_off=a.leakage,
            leakage_on=b.leakage,
        )
        for a, b in zip(off.spans, on.spans)
    )
    later = [d for d, s in zip(deltas, off.spans) if d.span_index > 0 and s.end > s.start]
    return DeltaReport(
        seed=on.seed,
        spans=deltas,
        target_gain=bool(later) and all(d.target_mass_delta > 0 for d in later),
        leakage_drop=bool(later) and all(d.competitor_mass_delta < 0 for d in later),
    )


def run_pair(
    scenario: SimScenario | GeneratedScenario,
    solver_mode: SolverMode | str = SolverMode.CLOSED_FORM,
    schedule: SteeringSchedule = DESK_SCHEDULE,
    *,
    config: SteeringConfig | None = None,
    steering_enabled: bool = True,
    carry: float = 1.0,
) -> tuple[AttentionReport, AttentionReport, DeltaReport]:
    gen = scenario if isinstance(scenario, GeneratedScenario) else generate_scenario(scenario)
    off = run(gen, False, solver_mode, schedule, config=config, carry=carry)
    if steering_enabled:
        on = run(gen, True, solver_mode, schedule, config=config, carry=carry)
    else:
        on = off
    return off, on, compare(off, on)


def _failure_message(exc: Exception) -> str:
    if isinstance(exc, SteeringError):
        return str(exc)
    return f"{type(exc).__name__}: {exc}"


def run_batch(
    seeds: Iterable[int],
    base: SimScenario,
    solver_mode: SolverMode | str = SolverMode.CLOSED_FORM,
    schedule: SteeringSchedule = DESK_SCHEDULE,
    *,
    config: SteeringConfig | None = None,
    steering_enabled: bool = True,
    carry: float = 1.0,
    workers: int = 1,
) -> BatchSummary:
    """Independent paired runs per seed; results are ordered by seed."""
    seeds = list(seeds)

    def _one(seed: int):
        return run_pair(
            replace(base, seed=seed),
            solver_mode,
            schedule,
            config=config,
            steering_enabled=steering_enabled,
            carry=carry,
        )

    summary = BatchSummary()
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(_one, seed) for seed in seeds}
            for seed, fut in futures.items():
                try:
                    results[seed] = fut.result()
                except Exception as exc:
                    logger.exception("seed %d failed", seed)
                    summary.failures[seed] = _failure_message(exc)
    else:
        for seed in seeds:
            try:
                results[seed] = _one(seed)
            except Exception as exc:
                logger.exception("seed %d failed", seed)
                summary.failures[seed] = _failure_message(exc)

    for seed in seeds:
        if seed in results:
            off, on, delta = results[seed]
            summary.deltas.append(delta)
            summary.pairs[seed] = (off, on)
    logger.info("batch of %d seeds: %d wins, %d failures", len(seeds), summary.wins, len(summary.failures))
    return summary
