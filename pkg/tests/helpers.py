"""Shared builders for the test modules."""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

from src.steering.abss import SolverInstance, objective, stationary_system

DOG_PROMPT = (
    "On a snowy plain, a dog is running forward, then suddenly stops to sniff "
    "the ground, then continues running."
)


def random_instance(rng: np.random.Generator, max_rows: int = 8, max_comp: int = 3, eps: float = 0.05) -> SolverInstance:
    rows = int(rng.integers(1, max_rows + 1))
    comps = int(rng.integers(1, max_comp + 1))
    s_tgt = rng.uniform(-2.0, 2.0, size=rows)
    s_oth = rng.uniform(-2.0, 2.0, size=(rows, comps))
    return SolverInstance.from_scores(s_tgt, s_oth, eps)


def exact_qp_min(inst: SolverInstance) -> float:
    """
    Minimum of the hinge objective over x >= 0 by enumeration: the minimizer
    solves the stationary system of its own hinge mask on one face of the
    orthant, so the best of all (mask, face) candidates is optimal.
    """
    best = objective(inst, np.zeros(2))
    for bits in itertools.product([False, True], repeat=inst.rows):
        mask = np.array(bits)
        A, b = stationary_system(inst, mask)
        candidates = []
        try:
            candidates.append(np.linalg.solve(A, b))
        except np.linalg.LinAlgError:
            pass
        for i in range(2):
            if A[i, i] > 0:
                x = np.zeros(2)
                x[i] = b[i] / A[i, i]
                candidates.append(x)
        for x in candidates:
            if np.all(x >= 0):
                best = min(best, objective(inst, x))
    return best


def projected_gradient_min(instances: list[SolverInstance], iterations: int = 5000) -> np.ndarray:
    """Batched projected gradient descent, step 1/L per instance."""
    rows = max(inst.rows for inst in instances)
    n = len(instances)
    C = np.zeros((n, rows, 2))
    d = np.full((n, rows), -1.0)  # padded rows never activate
    M = np.zeros((n, 2, 2))
    for k, inst in enumerate(instances):
        C[k, : inst.rows] = inst.c
        d[k, : inst.rows] = inst.d
        M[k] = inst.m
    H = M + np.einsum("nri,nrj->nij", C, C)
    step = 1.0 / np.linalg.eigvalsh(H)[:, -1]

    x = np.zeros((n, 2))
    for _ in range(iterations):
        hinge = np.maximum(0.0, d - np.einsum("nri,ni->nr", C, x))
        grad = np.einsum("nij,nj->ni", M, x) - np.einsum("nri,nr->ni", C, hinge)
        x = np.maximum(x - step[:, None] * grad, 0.0)
    return np.array([objective(inst, x[k]) for k, inst in enumerate(instances)])


def largest_remainder_oracle(weights, frames: int) -> list[int]:
    """Floor/ceil choice per event minimizing sum |N_i - q_i|; ties favour earlier events."""
    total = sum(Fraction(w) for w in weights)
    quotas = [Fraction(frames) * Fraction(w) / total for w in weights]
    floors = [q.numerator // q.denominator for q in quotas]
    best = None
    for bump in itertools.product([0, 1], repeat=len(weights)):
        widths = [f + b for f, b in zip(floors, bump)]
        if sum(widths) != frames:
            continue
        cost = sum(abs(n - q) for n, q in zip(widths, quotas))
        key = (cost, [-w for w in widths])
        if best is None or key < best[0]:
            best = (key, widths)
    return best[1]


def plan_doc(weights=(1, 1), latent_frames: int = 10, tokens_per_frame: int = 1) -> dict:
    texts = [
        ("a dog runs across the sunny desert", ["sunny desert"]),
        ("the dog reads a book in an icy cave", ["reads a book", "icy cave"]),
        ("the dog swims in a calm lake", ["calm lake"]),
        ("the dog sleeps under a red umbrella", ["red umbrella"]),
        ("the dog climbs a steep hill", ["steep hill"]),
    ]
    return {
        "latent_frames": latent_frames,
        "tokens_per_frame": tokens_per_frame,
        "events": [
            {"text": texts[i][0], "anchors": texts[i][1], "weight": w}
            for i, w in enumerate(weights)
        ],
    }
