import time

import numpy as np
import pytest

from src.core.errors import DimensionMismatchError
from src.steering.abss import (
    SolverInstance,
    SolverMode,
    build_instance,
    instance_from_dict,
    instance_to_dict,
    objective,
    objective_gradient,
    solve,
    solve_active_set,
    solve_closed_form,
    stationary_system,
    strengths_to_dict,
    with_forced,
)
from src.steering.subspace import DominantDirections
from tests.helpers import exact_qp_min, projected_gradient_min, random_instance


def _instances(count=500, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_instance(rng) for _ in range(count)]


# ---- build_instance ----

def test_orthogonal_target_scores():
    k_tgt = np.array([1.0, 0.0, 0.0])
    k_oth = np.array([[0.0], [1.0], [0.0]])
    inst = build_instance(np.array([2 * k_tgt]), DominantDirections(k_tgt, k_oth), margin_eps=0.05)
    np.testing.assert_allclose(inst.s_tgt, [2.0])
    np.testing.assert_allclose(inst.s_oth_max, [0.0])
    np.testing.assert_allclose(inst.d, [-2.0 + 0.05])


def test_zero_queries_leave_only_the_margin():
    dirs = DominantDirections(np.array([1.0, 0.0]), np.array([[0.0], [1.0]]))
    inst = build_instance(np.zeros((3, 2)), dirs, margin_eps=0.1)
    np.testing.assert_allclose(inst.d, [0.1, 0.1, 0.1])
    np.testing.assert_array_equal(inst.m, np.zeros((2, 2)))


def test_competitor_max_matches_loop():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((4, 8))
    k_oth = rng.standard_normal((8, 2))
    k_oth /= np.linalg.norm(k_oth, axis=0)
    k_tgt = rng.standard_normal(8)
    k_tgt /= np.linalg.norm(k_tgt)
    inst = build_instance(q, DominantDirections(k_tgt, k_oth))
    for r in range(4):
        expected = max(float(q[r] @ k_oth[:, 0]), float(q[r] @ k_oth[:, 1]))
        assert inst.s_oth_max[r] == pytest.approx(expected, abs=1e-12)
    assert inst.m[0, 0] == pytest.approx(float(inst.s_tgt @ inst.s_tgt))
    assert inst.m[1, 1] == pytest.approx(float(inst.s_oth_max @ inst.s_oth_max))
    np.testing.assert_allclose(inst.d, inst.s_oth_max - inst.s_tgt + 0.05)


def test_empty_span_signals_skip():
    dirs = DominantDirections(np.array([1.0, 0.0]), np.array([[0.0], [1.0]]))
    assert build_instance(np.zeros((0, 2)), dirs) is None


def test_build_instance_dimension_mismatch():
    dirs = DominantDirections(np.array([1.0, 0.0]), np.array([[0.0], [1.0]]))
    with pytest.raises(DimensionMismatchError):
        build_instance(np.zeros((2, 3)), dirs)


def test_no_competitors_gives_zero_column():
    inst = SolverInstance.from_scores([1.0, 2.0], np.zeros((2, 0)), 0.05)
    np.testing.assert_array_equal(inst.s_oth_max, [0.0, 0.0])


# ---- objective & gradient ----

def test_objective_at_zero_is_half_positive_deficit():
    inst = SolverInstance.from_scores([0.0, 1.0, -1.0], [[1.0], [0.0], [2.0]], 0.0)
    pos = np.maximum(inst.d, 0.0)
    assert objective(inst, [0.0, 0.0]) == pytest.approx(0.5 * float(pos @ pos))


def test_objective_vanishes_without_deficit():
    inst = SolverInstance.from_scores([2.0, 3.0], [[0.0], [1.0]], 0.05)
    assert objective(inst, [0.0, 0.0]) == 0.0


def test_scalar_objective_value():
    inst = SolverInstance.from_scores([1.0], [[2.0]], 0.0)
    x = np.array([1 / 3, 1 / 6])
    hinge = max(0.0, 1.0 - (x[0] * 1.0 + x[1] * 2.0))
    expected = 0.5 * (x[0] ** 2 * 1.0 + x[1] ** 2 * 4.0) + 0.5 * hinge**2
    assert objective(inst, x) == pytest.approx(expected, abs=1e-15)


def test_gradient_at_zero():
    inst = SolverInstance.from_scores([0.5, -0.2], [[1.0], [1.5]], 0.05)
    np.testing.assert_allclose(objective_gradient(inst, [0.0, 0.0]), -inst.c.T @ inst.d)

    none_active = SolverInstance.from_scores([2.0, 3.0], [[0.0], [1.0]], 0.05)
    np.testing.assert_array_equal(objective_gradient(none_active, [0.0, 0.0]), [0.0, 0.0])


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(99)
    h = 1e-6
    checked = 0
    while checked < 200:
        inst = random_instance(rng)
        x = rng.uniform(0.0, 2.0, size=2)
        if np.any(np.abs(inst.d - inst.c @ x) < 1e-3):
            continue
        fd = np.array([
            (objective(inst, x + h * e) - objective(inst, x - h * e)) / (2 * h)
            for e in np.eye(2)
        ])
        g = objective_gradient(inst, x)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))
        checked += 1


# ---- solve_closed_form ----

def test_no_deficit_returns_exact_zero():
    inst = SolverInstance.from_scores([2.0, 1.5], [[0.5], [0.2]], 0.05)
    for mode in SolverMode:
        out = solve(inst, mode)
        assert (out.alpha, out.beta) == (0.0, 0.0)


def test_scalar_closed_form():
    out = solve_closed_form(SolverInstance.from_scores([1.0], [[2.0]], 0.0))
    assert out.alpha == pytest.approx(1 / 3, abs=1e-9)
    assert out.beta == pytest.approx(1 / 6, abs=1e-9)
    assert not out.diagnostics.alpha_clamped
    assert out.diagnostics.objective_at_solution < out.diagnostics.objective_at_zero


def test_degenerate_target_column_regularized():
    out = solve_closed_form(SolverInstance.from_scores([0.0], [[1.0]], 0.0))
    assert out.alpha == pytest.approx(0.0, abs=1e-6)
    assert out.beta == pytest.approx(0.5, abs=1e-6)
    assert out.diagnostics.near_singular
    pgd = projected_gradient_min([SolverInstance.from_scores([0.0], [[1.0]], 0.0)])
    assert objective(SolverInstance.from_scores([0.0], [[1.0]], 0.0), out.x) == pytest.approx(pgd[0], abs=1e-6)


def test_closed_form_stationarity_on_random_instances():
    instances = _instances()
    start = time.perf_counter()
    results = [solve_closed_form(inst) for inst in instances]
    assert time.perf_counter() - start < 1.0

    for inst, out in zip(instances, results):
        assert out.alpha >= 0 and out.beta >= 0
        raw = out.diagnostics.unclamped
        if raw is None or raw[0] < 0 or raw[1] < 0:
            continue
        A, b = stationary_system(inst)
        x = np.array(raw)
        assert np.linalg.norm(A @ x - b) <= 1e-6 * (1 + np.linalg.norm(b))


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
def test_scaling_scores_leaves_strengths_unchanged(t):
    rng = np.random.default_rng(17)
    for _ in range(20):
        s_tgt = rng.uniform(-2, 2, size=5)
        s_oth = rng.uniform(-2, 2, size=(5, 2))
        base = solve_closed_form(SolverInstance.from_scores(s_tgt, s_oth, 0.0))
        scaled = solve_closed_form(SolverInstance.from_scores(t * s_tgt, t * s_oth, 0.0))
        np.testing.assert_allclose(scaled.x, base.x, rtol=1e-6, atol=1e-9)


# ---- solve_active_set ----

def test_active_set_agrees_with_closed_form_when_nothing_clamps():
    rng = np.random.default_rng(8)
    checked = 0
    for _ in range(400):
        inst = random_instance(rng)
        closed = solve_closed_form(inst)
        raw = closed.diagnostics.unclamped
        if raw is None or min(raw) < 0 or np.any(inst.d - inst.c @ np.array(raw) <= 0):
            continue
        active = solve_active_set(inst)
        np.testing.assert_allclose(active.x, closed.x, atol=1e-8)
        checked += 1
    assert checked > 0


def test_active_set_matches_exact_minimum():
    for inst in _instances():
        out = solve_active_set(inst)
        assert out.alpha >= 0 and out.beta >= 0
        value = objective(inst, out.x)
        assert value <= objective(inst, np.zeros(2)) + 1e-15
        assert value == pytest.approx(exact_qp_min(inst), abs=1e-4)


def test_active_set_matches_projected_gradient():
    rng = np.random.default_rng(31)
    sample = []
    while len(sample) < 60:
        inst = random_instance(rng)
        # well-conditioned instances so plain projected gradient converges
        if min(np.diag(inst.m)) >= 0.5:
            sample.append(inst)
    oracle = projected_gradient_min(sample)
    for inst, best in zip(sample, oracle):
        assert objective(inst, solve_active_set(inst).x) <= best + 1e-4


def test_active_set_respects_iteration_cap():
    inst = SolverInstance.from_scores([0.3, -0.4, 1.0], [[1.0], [0.5], [1.2]], 0.05)
    out = solve_active_set(inst)
    assert 1 <= out.diagnostics.iterations <= inst.rows + 2


def test_closed_form_is_never_better_than_active_set():
    for inst in _instances(200, seed=5):
        closed = objective(inst, solve_closed_form(inst).x)
        active = objective(inst, solve_active_set(inst).x)
        assert active <= closed + 1e-9


# ---- helpers ----

def test_paper_mode_name_is_the_closed_form_solver():
    assert SolverMode("paper") is SolverMode.CLOSED_FORM
    with pytest.raises(ValueError):
        SolverMode("exact")


def test_forced_strengths_keep_mode():
    out = with_forced(solve_closed_form(SolverInstance.from_scores([1.0], [[2.0]], 0.0)), beta=0.0)
    assert out.beta == 0.0 and out.alpha == pytest.approx(1 / 3, abs=1e-9)
    assert out.mode is SolverMode.CLOSED_FORM


def test_instance_json_forms():
    inst = SolverInstance.from_scores([1.0, 0.5], [[2.0, 0.0], [0.1, 0.3]], 0.05)
    again = instance_from_dict(instance_to_dict(inst))
    np.testing.assert_array_equal(again.d, inst.d)

    raw = instance_from_dict({
        "q_star": [[2.0, 0.0]],
        "k_tgt": [1.0, 0.0],
        "k_oth": [[0.0], [1.0]],
        "margin_eps": 0.0,
    })
    np.testing.assert_allclose(raw.s_tgt, [2.0])
    np.testing.assert_allclose(raw.d, [-2.0])

    doc = strengths_to_dict(solve(inst, "active-set"))
    assert doc["mode"] == "active-set"
    assert set(doc["diagnostics"]) >= {"objective_at_zero", "objective_at_solution", "gradient_norm"}
