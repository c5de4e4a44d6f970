"""
src/steering/abss.py

Strength solver for the span-local query update.

For a span's query slice Q* the solver scores each row against the target and
competitor directions, builds the margin deficit d = S_oth^max - S_tgt + eps and
minimizes

    f(x) = 1/2 x^T M x + 1/2 ||max(0, d - C x)||^2   over x = (alpha, beta) >= 0

with M = diag(||S_tgt||^2, ||S_oth^max||^2) and C = [S_tgt, S_oth^max].
Two modes:
- closed-form: one solve of (M + C^T C) x = C^T d, then clamp at 0.
- active-set: re-solve on the rows whose hinge is active until the mask is stable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from src.core.errors import DimensionMismatchError, SteeringError
from src.steering.subspace import DominantDirections

logger = logging.getLogger(__name__)

TIKHONOV = 1e-8
REFINE_PASSES = 2
DEFAULT_MARGIN_EPS = 0.05


class SolverMode(str, Enum):
    CLOSED_FORM = "closed-form"
    ACTIVE_SET = "active-set"

    @classmethod
    def _missing_(cls, value):
        # "paper" is the command-line name of the closed-form mode
        if value == "paper":
            return cls.CLOSED_FORM
        return None


@dataclass(frozen=True)
class SolverInstance:
    s_tgt: np.ndarray
    s_oth: np.ndarray
    s_oth_max: np.ndarray
    d: np.ndarray
    m: np.ndarray
    c: np.ndarray
    margin_eps: float

    @property
    def rows(self) -> int:
        return self.s_tgt.shape[0]

    @classmethod
    def from_scores(cls, s_tgt, s_oth, margin_eps: float = DEFAULT_MARGIN_EPS) -> "SolverInstance":
        s_tgt = np.asarray(s_tgt, dtype=np.float64).reshape(-1)
        s_oth = np.asarray(s_oth, dtype=np.float64)
        if s_oth.ndim == 1:
            s_oth = s_oth.reshape(-1, 1)
        if s_oth.shape[0] != s_tgt.shape[0]:
            raise DimensionMismatchError(
                f"S_oth has {s_oth.shape[0]} rows, S_tgt has {s_tgt.shape[0]}"
            )
        if margin_eps < 0:
            raise ValueError("margin_eps must be >= 0")
        if s_oth.shape[1] == 0:
            s_oth_max = np.zeros_like(s_tgt)
        else:
            s_oth_max = s_oth.max(axis=1)
        d = s_oth_max - s_tgt + margin_eps
        m = np.diag([float(s_tgt @ s_tgt), float(s_oth_max @ s_oth_max)])
        c = np.column_stack([s_tgt, s_oth_max])
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(d))):
            raise SteeringError("solver instance has non-finite entries")
        return cls(s_tgt, s_oth, s_oth_max, d, m, c, float(margin_eps))


@dataclass(frozen=True)
class SolverDiagnostics:
    objective_at_zero: float
    objective_at_solution: float
    gradient_norm: float
    alpha_clamped: bool = False
    beta_clamped: bool = False
    near_singular: bool = False
    iterations: int = 0
    unclamped: tuple[float, float] | None = None


@dataclass(frozen=True)
class SteeringStrengths:
    alpha: float
    beta: float
    mode: SolverMode
    diagnostics: SolverDiagnostics | None = field(default=None, compare=False)

    @property
    def x(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])


def build_instance(
    q_star: np.ndarray, dirs: DominantDirections, margin_eps: float = DEFAULT_MARGIN_EPS
) -> SolverInstance | None:
    """Scores of the span's query rows; None when the span has no rows (skip)."""
    q_star = np.asarray(q_star, dtype=np.float64)
    if q_star.ndim != 2:
        raise DimensionMismatchError(f"Q* must be a matrix, got shape {q_star.shape}")
    if q_star.shape[0] == 0:
        return None
    if q_star.shape[1] != dirs.k_tgt.shape[0] or dirs.k_oth.shape[0] != dirs.k_tgt.shape[0]:
        raise DimensionMismatchError(
            f"Q* width {q_star.shape[1]} vs direction dim {dirs.k_tgt.shape[0]}"
        )
    s_tgt = q_star @ dirs.k_tgt
    s_oth = q_star @ dirs.k_oth
    return SolverInstance.from_scores(s_tgt, s_oth, margin_eps)


def objective(inst: SolverInstance, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    hinge = np.maximum(0.0, inst.d - inst.c @ x)
    return 0.5 * float(x @ inst.m @ x) + 0.5 * float(hinge @ hinge)


def objective_gradient(inst: SolverInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    hinge = np.maximum(0.0, inst.d - inst.c @ x)
    return inst.m @ x - inst.c.T @ hinge


def _regularized_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tikhonov-regularized solve followed by iterated refinement against A."""
    A_reg = A + TIKHONOV * np.eye(A.shape[0])
    x = np.linalg.solve(A_reg, b)
    for _ in range(REFINE_PASSES):
        x = x + np.linalg.solve(A_reg, b - A @ x)
    return x


def _is_near_singular(A: np.ndarray) -> bool:
    scale = max(float(np.abs(A).max()), 1.0)
    return abs(float(np.linalg.det(A))) <= 1e-12 * scale * scale


def _diagnostics(inst, x, raw=None, iterations=1, near_singular=False) -> SolverDiagnostics:
    return SolverDiagnostics(
        objective_at_zero=objective(inst, np.zeros(2)),
        objective_at_solution=objective(inst, x),
        gradient_norm=float(np.linalg.norm(objective_gradient(inst, x))),
        alpha_clamped=bool(raw is not None and raw[0] < 0),
        beta_clamped=bool(raw is not None and raw[1] < 0),
        near_singular=near_singular,
        iterations=iterations,
        unclamped=None if raw is None else (float(raw[0]), float(raw[1])),
    )


def _zero(inst: SolverInstance, mode: SolverMode) -> SteeringStrengths:
    return SteeringStrengths(0.0, 0.0, mode, _diagnostics(inst, np.zeros(2), iterations=0))


def stationary_system(inst: SolverInstance, mask: np.ndarray | None = None):
    """(M + C_a^T C_a, C_a^T d_a) restricted to the rows in `mask` (all rows if None)."""
    c = inst.c if mask is None else inst.c[mask]
    d = inst.d if mask is None else inst.d[mask]
    return inst.m + c.T @ c, c.T @ d


def solve_closed_form(inst: SolverInstance) -> SteeringStrengths:
    if np.all(inst.d <= 0):
        return _zero(inst, SolverMode.CLOSED_FORM)
    A, b = stationary_system(inst)
    raw = _regularized_solve(A, b)
    x = np.maximum(raw, 0.0)
    diag = _diagnostics(inst, x, raw=raw, near_singular=_is_near_singular(A))
    if diag.near_singular:
        logger.debug("stationary system near singular (M=%s)", np.diag(inst.m))
    return SteeringStrengths(float(x[0]), float(x[1]), SolverMode.CLOSED_FORM, diag)


def _nonneg_quadratic_min(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin_{x>=0} 1/2 x^T A x - b^T x for a 2x2 PSD A, by checking all faces."""
    def q(x):
        return 0.5 * float(x @ A @ x) - float(b @ x)

    candidates = [np.zeros(2)]
    full = _regularized_solve(A, b)
    if np.all(full >= 0):
        candidates.append(full)
    for i in range(2):
        x = np.zeros(2)
        if A[i, i] > 0:
            x[i] = max(b[i] / A[i, i], 0.0)
        candidates.append(x)
    return min(candidates, key=q)


def solve_active_set(inst: SolverInstance, max_iter: int | None = None) -> SteeringStrengths:
    """
    Fixed-point iteration on the hinge mask: solve the nonnegative stationary
    problem for the current active rows, step towards it with backtracking,
    re-evaluate the mask. Never worse than x = 0.
    """
    if np.all(inst.d <= 0):
        return _zero(inst, SolverMode.ACTIVE_SET)

    limit = inst.rows + 2 if max_iter is None else max_iter
    x = np.zeros(2)
    f_x = objective(inst, x)
    mask = inst.d - inst.c @ x > 0
    iterations = 0

    for iterations in range(1, limit + 1):
        A, b = stationary_system(inst, mask)
        target = _nonneg_quadratic_min(A, b)

        step = 1.0
        candidate = target
        f_c = objective(inst, candidate)
        while f_c > f_x and step > 1e-6:
            step *= 0.5
            candidate = x + step * (target - x)
            f_c = objective(inst, candidate)
        if f_c <= f_x:
            x, f_x = candidate, f_c

        new_mask = inst.d - inst.c @ x > 0
        if np.array_equal(new_mask, mask) and np.allclose(x, target, atol=1e-12, rtol=0):
            break
        mask = new_mask

    f_zero = objective(inst, np.zeros(2))
    if f_x > f_zero:
        x = np.zeros(2)
    x = np.maximum(x, 0.0)
    diag = _diagnostics(inst, x, iterations=iterations)
    return SteeringStrengths(float(x[0]), float(x[1]), SolverMode.ACTIVE_SET, diag)


def solve(inst: SolverInstance, mode: SolverMode | str = SolverMode.CLOSED_FORM) -> SteeringStrengths:
    mode = SolverMode(mode)
    if mode is SolverMode.ACTIVE_SET:
        return solve_active_set(inst)
    return solve_closed_form(inst)


def with_forced(strengths: SteeringStrengths, alpha: float | None = None, beta: float | None = None) -> SteeringStrengths:
    return replace(
        strengths,
        alpha=strengths.alpha if alpha is None else float(alpha),
        beta=strengths.beta if beta is None else float(beta),
    )


# ---- JSON helpers (solve subcommand) ----

def instance_to_dict(inst: SolverInstance) -> dict[str, Any]:
    return {
        "s_tgt": inst.s_tgt.tolist(),
        "s_oth": inst.s_oth.tolist(),
        "margin_eps": inst.margin_eps,
    }


def instance_from_dict(doc: dict[str, Any], margin_eps: float = DEFAULT_MARGIN_EPS) -> SolverInstance | None:
    """
    Accepts either scores {"s_tgt", "s_oth", "margin_eps"?} or raw matrices
    {"q_star", "k_tgt", "k_oth", "margin_eps"?} (k_oth given as D x J).
    """
    if not isinstance(doc, dict):
        raise SteeringError("solver instance must be a JSON object")
    eps = float(doc.get("margin_eps", margin_eps))
    if "s_tgt" in doc:
        return SolverInstance.from_scores(doc["s_tgt"], doc.get("s_oth", [[0.0]] * len(doc["s_tgt"])), eps)
    if "q_star" in doc:
        k_oth = np.asarray(doc.get("k_oth", []), dtype=np.float64)
        k_tgt = np.asarray(doc["k_tgt"], dtype=np.float64)
        if k_oth.size == 0:
            k_oth = np.zeros((k_tgt.shape[0], 0))
        elif k_oth.ndim == 1:
            k_oth = k_oth.reshape(-1, 1)
        dirs = DominantDirections(k_tgt=k_tgt, k_oth=k_oth)
        # an empty q_star ([]) is a zero-row span
        q_star = np.asarray(doc["q_star"], dtype=np.float64)
        if q_star.size == 0:
            q_star = q_star.reshape(0, k_tgt.shape[0])
        return build_instance(q_star, dirs, eps)
    raise SteeringError("solver instance needs either 's_tgt'/'s_oth' or 'q_star'/'k_tgt'/'k_oth'")


def strengths_to_dict(strengths: SteeringStrengths) -> dict[str, Any]:
    out: dict[str, Any] = {
        "alpha": strengths.alpha,
        "beta": strengths.beta,
        "mode": strengths.mode.value,
    }
    diag = strengths.diagnostics
    if diag is not None:
        out["diagnostics"] = {
            "objective_at_zero": diag.objective_at_zero,
            "objective_at_solution": diag.objective_at_solution,
            "gradient_norm": diag.gradient_norm,
            "alpha_clamped": diag.alpha_clamped,
            "beta_clamped": diag.beta_clamped,
            "near_singular": diag.near_singular,
            "iterations": diag.iterations,
        }
    return out
