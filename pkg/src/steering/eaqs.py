"""
src/steering/eaqs.py

Span-local, per-head query steering for one cross-attention layer.

    Q' = Q* + alpha * Q* P_tgt - beta * Q* P_oth

followed by rescaling each row back to its pre-steering L2 norm. Keys are never
touched; rows outside every positive-width span are left bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable

import numpy as np

from src.core.errors import DimensionMismatchError, SteeringError
from src.steering.abss import (
    DEFAULT_MARGIN_EPS,
    SolverMode,
    SteeringStrengths,
    build_instance,
    solve,
    with_forced,
)
from src.steering.event_model import AnchorIndexSet, EventPlan, SpanAssignment, span_row_indices
from src.steering.subspace import (
    DominantDirections,
    KeySlice,
    RidgeProjector,
    build_projector,
    competitor_directions,
)

logger = logging.getLogger(__name__)

RENORM_FLOOR = 1e-12


class StrengthPolicy(str, Enum):
    ABSS = "abss"
    FIXED = "fixed"
    RANDOM = "random"
    ZERO = "zero"


class Ablation(str, Enum):
    NONE = "none"
    NO_SVD = "no-svd"
    NO_ENHANCE = "no-enhance"
    NO_SUPPRESS = "no-suppress"


@dataclass(frozen=True)
class SteeringConfig:
    solver_mode: SolverMode = SolverMode.CLOSED_FORM
    margin_eps: float = DEFAULT_MARGIN_EPS
    ridge: float | None = None  # None -> relative default per key slice
    strength: StrengthPolicy = StrengthPolicy.ABSS
    fixed_strength: float = 1.0
    ablation: Ablation = Ablation.NONE


@dataclass(frozen=True)
class AttentionState:
    """Queries (H x S x D) and keys (H x L_k x D) of one cross-attention layer."""

    queries: np.ndarray
    keys: np.ndarray
    frame_map: np.ndarray

    def __post_init__(self):
        q, k = self.queries, self.keys
        if q.ndim != 3 or k.ndim != 3:
            raise DimensionMismatchError(f"queries/keys must be H x N x D, got {q.shape} / {k.shape}")
        if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
            raise DimensionMismatchError(f"heads or head_dim differ: {q.shape} vs {k.shape}")
        fm = np.asarray(self.frame_map)
        if fm.shape != (q.shape[1],):
            raise DimensionMismatchError(f"frame_map must have {q.shape[1]} entries, got {fm.shape}")
        if fm.size and (fm[0] != 0 or np.any(np.diff(fm) < 0)):
            raise DimensionMismatchError("frame_map must start at frame 0 and be monotone")

    @property
    def head_count(self) -> int:
        return self.queries.shape[0]

    @property
    def head_dim(self) -> int:
        return self.queries.shape[2]

    @property
    def token_count(self) -> int:
        return self.queries.shape[1]

    @property
    def key_count(self) -> int:
        return self.keys.shape[1]

    def with_queries(self, queries: np.ndarray) -> "AttentionState":
        return AttentionState(queries=queries, keys=self.keys, frame_map=self.frame_map)


@dataclass(frozen=True)
class HeadSteering:
    head: int
    p_tgt: RidgeProjector
    p_oth: RidgeProjector | None
    directions: DominantDirections
    strengths: SteeringStrengths


@dataclass
class SteeringContext:
    event_id: int
    rows: range
    heads: list[HeadSteering] = field(default_factory=list)

    @property
    def strengths(self) -> list[SteeringStrengths]:
        return [h.strengths for h in self.heads]


class ProjectorCache:
    """
    Projectors and directions keyed by (layer, head, event, kind).
    Text keys do not change across denoising steps, so one build serves a run.
    """

    def __init__(self, rebuild: bool = False):
        self.rebuild = rebuild
        self._store: dict[Hashable, object] = {}
        self.builds = 0

    def get(self, key: Hashable, build: Callable[[], object]):
        if self.rebuild or key not in self._store:
            self._store[key] = build()
            self.builds += 1
        return self._store[key]

    def clear(self) -> None:
        self._store.clear()

    def __len__(self) -> int:
        return len(self._store)


def steer_queries(
    q_star: np.ndarray,
    p_tgt: RidgeProjector,
    p_oth: RidgeProjector | None,
    alpha: float,
    beta: float,
) -> np.ndarray:
    q_star = np.asarray(q_star, dtype=np.float64)
    if q_star.ndim != 2 or q_star.shape[1] != p_tgt.dim:
        raise DimensionMismatchError(f"Q* shape {q_star.shape} vs projector dim {p_tgt.dim}")
    if p_oth is not None and p_oth.dim != p_tgt.dim:
        raise DimensionMismatchError(f"projector dims differ: {p_tgt.dim} vs {p_oth.dim}")
    if alpha < 0 or beta < 0:
        raise SteeringError(f"steering strengths must be >= 0, got ({alpha}, {beta})")
    if alpha == 0 and beta == 0:
        return q_star.copy()

    steered = q_star + alpha * (q_star @ p_tgt.matrix)
    if p_oth is not None and beta != 0:
        steered = steered - beta * (q_star @ p_oth.matrix)

    pre = np.linalg.norm(q_star, axis=1)
    post = np.linalg.norm(steered, axis=1)
    rescale = (pre > 0) & (post >= RENORM_FLOOR)
    factor = np.ones_like(pre)
    factor[rescale] = pre[rescale] / post[rescale]
    return steered * factor[:, None]


def _strengths_for(
    q_star: np.ndarray,
    dirs: DominantDirections,
    config: SteeringConfig,
    rng: np.random.Generator | None,
) -> SteeringStrengths:
    if config.strength is StrengthPolicy.ZERO:
        return SteeringStrengths(0.0, 0.0, config.solver_mode)
    if config.strength is StrengthPolicy.FIXED:
        return SteeringStrengths(config.fixed_strength, config.fixed_strength, config.solver_mode)
    if config.strength is StrengthPolicy.RANDOM:
        if rng is None:
            raise SteeringError("random strength policy needs a seeded generator")
        alpha, beta = rng.uniform(0.0, 1.0, size=2)
        return SteeringStrengths(float(alpha), float(beta), config.solver_mode)

    inst = build_instance(q_star, dirs, config.margin_eps)
    return solve(inst, config.solver_mode)


def _gather(keys: np.ndarray, idx, event_id: int) -> KeySlice:
    return KeySlice(keys[np.asarray(idx, dtype=int)], event_id)


def apply_layer(
    state: AttentionState,
    plan: EventPlan,
    spans: SpanAssignment,
    anchors: AnchorIndexSet,
    schedule_active: bool,
    solver_mode: SolverMode | str | None = None,
    *,
    config: SteeringConfig = SteeringConfig(),
    cache: ProjectorCache | None = None,
    layer: int = 0,
    rng: np.random.Generator | None = None,
    trace: list[SteeringContext] | None = None,
) -> AttentionState:
    """
    Steer every positive-width span of `state` towards its event.
    Returns a new state; the input state (and its key tensor) is left as is.
    """
    if not schedule_active:
        return state
    if solver_mode is not None:
        config = SteeringConfig(
            solver_mode=SolverMode(solver_mode),
            margin_eps=config.margin_eps,
            ridge=config.ridge,
            strength=config.strength,
            fixed_strength=config.fixed_strength,
            ablation=config.ablation,
        )
    if anchors.seq_len > state.key_count:
        raise DimensionMismatchError(
            f"anchor indices reach {anchors.seq_len} tokens but layer has {state.key_count} keys"
        )
    if spans.latent_frames and state.frame_map.size and spans.latent_frames <= int(state.frame_map[-1]):
        raise DimensionMismatchError("spans do not cover the frames of frame_map")

    cache = cache if cache is not None else ProjectorCache()
    use_svd = config.ablation is not Ablation.NO_SVD
    queries = state.queries.copy()

    for span in spans.spans:
        if span.width == 0:
            continue
        eid = span.event_id
        rows = span_row_indices(span, plan.tokens_per_frame)
        if rows.stop > state.token_count or np.any(
            (state.frame_map[rows.start:rows.stop] < span.start)
            | (state.frame_map[rows.start:rows.stop] >= span.end)
        ):
            raise DimensionMismatchError(f"span {span} rows {rows} disagree with frame_map")

        tgt_idx = anchors.for_event(eid)
        if not tgt_idx:
            logger.warning("event %d has no anchor tokens; span %s left unsteered", eid, span)
            continue
        competitors = anchors.competitors(eid)
        oth_idx = [i for idx in competitors.values() for i in idx]
        if not competitors:
            logger.warning("event %d has no competitor anchors; suppression disabled", eid)

        ctx = SteeringContext(event_id=eid, rows=rows)
        for h in range(state.head_count):
            K = state.keys[h]
            p_tgt = cache.get(
                (layer, h, eid, "tgt"),
                lambda: build_projector(_gather(K, tgt_idx, eid), config.ridge),
            )
            p_oth = None
            if oth_idx:
                p_oth = cache.get(
                    (layer, h, eid, "oth"),
                    lambda: build_projector(_gather(K, oth_idx, -1), config.ridge),
                )
            dirs = cache.get(
                (layer, h, eid, "dirs", use_svd),
                lambda: competitor_directions(
                    _gather(K, tgt_idx, eid),
                    [_gather(K, idx, j) for j, idx in competitors.items()],
                    use_svd=use_svd,
                ),
            )

            q_star = queries[h, rows.start:rows.stop]
            strengths = _strengths_for(q_star, dirs, config, rng)
            if p_oth is None:
                strengths = with_forced(strengths, beta=0.0)
            if config.ablation is Ablation.NO_ENHANCE:
                strengths = with_forced(strengths, alpha=0.0)
            elif config.ablation is Ablation.NO_SUPPRESS:
                strengths = with_forced(strengths, beta=0.0)

            queries[h, rows.start:rows.stop] = steer_queries(
                q_star, p_tgt, p_oth, strengths.alpha, strengths.beta
            )
            ctx.heads.append(HeadSteering(h, p_tgt, p_oth, dirs, strengths))
            logger.debug(
                "layer %d head %d event %d: alpha=%.4g beta=%.4g",
                layer, h, eid, strengths.alpha, strengths.beta,
            )

        if trace is not None:
            trace.append(ctx)

    return state.with_queries(queries)
