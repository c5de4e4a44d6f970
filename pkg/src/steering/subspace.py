"""
Key-subspace operators: ridge right-projectors and dominant event directions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from src.core.errors import DegenerateKeysError, DimensionMismatchError, RankDeficiencyError

logger = logging.getLogger(__name__)

RELATIVE_RIDGE = 1e-4
POWER_TOL = 1e-10
POWER_MAX_ITER = 500
POWER_START_SEED = 0


@dataclass(frozen=True)
class KeySlice:
    rows: np.ndarray
    event_id: int = -1

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DimensionMismatchError(f"key slice must be non-empty, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise DegenerateKeysError(f"non-finite key entries for event {self.event_id}")
        object.__setattr__(self, "rows", rows)

    @property
    def n_tokens(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class RidgeProjector:
    matrix: np.ndarray
    ridge: float
    source_rank: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class DominantDirections:
    k_tgt: np.ndarray
    k_oth: np.ndarray  # D x J

    @property
    def competitor_count(self) -> int:
        return self.k_oth.shape[1]


def default_ridge(keys: KeySlice) -> float:
    """Ridge scaled to the mean squared key norm."""
    return RELATIVE_RIDGE * float(np.einsum("ij,ij->", keys.rows, keys.rows)) / keys.n_tokens


def build_projector(keys: KeySlice, ridge: float | None = None) -> RidgeProjector:
    """P = K^T (K K^T + eps I)^-1 K."""
    K = keys.rows
    eps = default_ridge(keys) if ridge is None else float(ridge)
    if eps < 0:
        raise ValueError(f"ridge must be >= 0, got {eps}")

    gram = K @ K.T
    rank = int(np.linalg.matrix_rank(K))
    if eps == 0 and rank < keys.n_tokens:
        raise RankDeficiencyError(
            f"K K^T is singular for event {keys.event_id} "
            f"(rank {rank} < {keys.n_tokens} tokens); use ridge > 0"
        )
    inner = gram + eps * np.eye(keys.n_tokens)
    try:
        P = K.T @ np.linalg.solve(inner, K)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"cannot invert K K^T + eps I: {exc}") from exc
    P = 0.5 * (P + P.T)
    return RidgeProjector(matrix=P, ridge=eps, source_rank=rank)


def _normalized_rows(keys: KeySlice) -> np.ndarray:
    norms = np.linalg.norm(keys.rows, axis=1)
    keep = norms > 0
    if not np.any(keep):
        raise DegenerateKeysError(f"all key rows are zero for event {keys.event_id}")
    return keys.rows[keep] / norms[keep, None]


def _fix_sign(v: np.ndarray, U: np.ndarray) -> np.ndarray:
    mean_proj = float(np.mean(U @ v))
    if mean_proj < 0:
        return -v
    if mean_proj == 0 and v[np.argmax(np.abs(v))] < 0:
        return -v
    return v


def _power_iterate(G: np.ndarray, v: np.ndarray, event_id: int) -> np.ndarray:
    for _ in range(POWER_MAX_ITER):
        w = G @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w = w / norm
        if np.linalg.norm(w - v) < POWER_TOL:
            v = w
            break
        v = w
    else:
        logger.debug("power iteration hit %d iterations for event %d", POWER_MAX_ITER, event_id)
    return v / np.linalg.norm(v)


def _start_vector(dim: int) -> np.ndarray:
    v = np.random.default_rng(POWER_START_SEED).standard_normal(dim)
    return v / np.linalg.norm(v)


def dominant_direction(keys: KeySlice) -> np.ndarray:
    """
    Top right-singular vector of the row-normalized keys, by power iteration on
    the Gram matrix from a fixed start vector. Sign chosen so the mean row
    projection is nonnegative.

    The top eigenvalue of G is at least its largest diagonal entry; a result
    whose Rayleigh quotient falls short of that missed the top eigenvector and
    is rerun from the matching basis vector.
    """
    U = _normalized_rows(keys)
    G = U.T @ U

    v = _power_iterate(G, _start_vector(keys.dim), keys.event_id)
    diag = np.diag(G)
    j = int(np.argmax(diag))
    if float(v @ G @ v) < diag[j] * (1.0 - 1e-9):
        logger.debug("power iteration stalled below the Gram diagonal for event %d; restarting", keys.event_id)
        e = np.zeros(keys.dim)
        e[j] = 1.0
        v = _power_iterate(G, e, keys.event_id)
    return _fix_sign(v, U)


def mean_direction(keys: KeySlice) -> np.ndarray:
    """Normalized mean of the normalized rows (direction without the SVD step)."""
    U = _normalized_rows(keys)
    v = U.mean(axis=0)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateKeysError(f"normalized keys of event {keys.event_id} cancel out")
    return v / norm


def competitor_directions(
    target: KeySlice, competitors: Sequence[KeySlice], use_svd: bool = True
) -> DominantDirections:
    direction = dominant_direction if use_svd else mean_direction
    k_tgt = direction(target)
    if competitors:
        k_oth = np.stack([direction(c) for c in competitors], axis=1)
    else:
        k_oth = np.zeros((target.dim, 0))
    return DominantDirections(k_tgt=k_tgt, k_oth=k_oth)


def project(Q: np.ndarray, P: RidgeProjector) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != P.dim:
        raise DimensionMismatchError(
            f"query matrix shape {Q.shape} does not match projector dim {P.dim}"
        )
    return Q @ P.matrix
