import math

import numpy as np
import pytest

from hrgrad.aggregation import fair_direction, hrgrad, restore_magnitudes
from hrgrad.baselines import config_dir
from hrgrad.core import DegeneracyError, GradientSet, InvalidInputError, make_rng
from hrgrad.fuzz import check_invariants, random_gradient_set
from hrgrad.rotation import MerConfig, RotationPlan

from oracles import equal_cosine_closed_form


def _pair(phi, r2=1.0):
    return GradientSet.from_columns([[1.0, 0.0], [r2 * math.cos(phi), r2 * math.sin(phi)]])


def _plan(m, conflicts, refs, angles):
    a = np.zeros(m)
    for i, v in angles.items():
        a[i] = v
    return RotationPlan(conflicts, refs, a, np.zeros(m), np.full(m, math.pi / 2), 0.0)


def test_restore_magnitudes_examples():
    G = GradientSet.from_columns([[1.0, 2.0], [0.5, -1.0]])
    assert np.array_equal(restore_magnitudes(G, _plan(2, [], {}, {})), G.matrix)
    G = GradientSet.from_columns([[-2.0, 0.0]])
    out = restore_magnitudes(G, _plan(1, [0], {0: np.array([0.0, 1.0])}, {0: math.pi / 2}))
    np.testing.assert_allclose(out[:, 0], [0.0, 2.0], atol=1e-15)
    assert abs(float(G.matrix[:, 0] @ out[:, 0])) <= 1e-15
    G = GradientSet.from_columns([[1.0, 0.0]])
    out = restore_magnitudes(G, _plan(1, [0], {0: np.array([0.0, 1.0])}, {0: math.pi / 3}))
    np.testing.assert_allclose(out[:, 0], [0.5, math.sqrt(3) / 2], atol=1e-15)


def test_restore_magnitudes_shape_checks():
    G = GradientSet.from_columns([[1.0, 0.0]])
    with pytest.raises(InvalidInputError):
        restore_magnitudes(G, _plan(2, [], {}, {}))
    with pytest.raises(InvalidInputError):
        restore_magnitudes(G, _plan(1, [0], {0: np.array([0.0, 1.0, 0.0])}, {0: 0.2}))


def test_fair_direction_examples():
    fd = fair_direction(np.eye(4))
    assert fd.s_c == pytest.approx(0.5, abs=1e-12)
    g = np.array([[3.0], [4.0]])
    fd = fair_direction(g)
    np.testing.assert_allclose(fd.direction, [0.6, 0.8], atol=1e-15)
    assert fd.s_c == pytest.approx(1.0, abs=1e-15)
    th = math.radians(60)
    fd = fair_direction(np.array([[1.0, math.cos(th)], [0.0, math.sin(th)]]))
    assert fd.s_c == pytest.approx(math.sqrt(0.75), abs=1e-12)
    np.testing.assert_allclose(fd.direction, [math.cos(th / 2), math.sin(th / 2)], atol=1e-12)


def test_fair_direction_zero_input():
    with pytest.raises(DegeneracyError):
        fair_direction(np.zeros((3, 2)))


def test_fair_direction_rank_deficient_reports_mean():
    fd = fair_direction(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert not fd.full_rank and fd.rank == 1
    assert fd.s_c == pytest.approx(float(fd.projections.mean()))


def test_single_task_is_identity():
    g = np.array([0.3, -7.0, 2.5])
    res = hrgrad(GradientSet.from_columns([g]))
    np.testing.assert_allclose(res.update, g, rtol=0, atol=2e-12 * np.linalg.norm(g))


def test_conflict_free_pair_equals_config():
    G = _pair(math.radians(60))
    res = hrgrad(G)
    assert res.conflicts == []
    np.testing.assert_allclose(res.update, config_dir(G).update, rtol=1e-12)


def test_weak_antiparallel_task_norm_identity():
    G = _pair(math.radians(178), 1e-3)
    res = hrgrad(G)
    M = res.rotated / np.linalg.norm(res.rotated, axis=0)
    expect = equal_cosine_closed_form(M) * (1 + 1e-3)
    assert np.linalg.norm(res.update) == pytest.approx(expect, rel=1e-8)
    assert np.linalg.norm(res.update) > 0


def test_exact_antiparallel_is_degenerate():
    res = hrgrad(_pair(math.pi))
    assert res.degenerate and np.all(res.update == 0)
    assert res.to_dict()["degenerate"] is True


def test_zero_columns_are_passed_through():
    G = GradientSet(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    res = hrgrad(G)
    assert np.all(res.rotated[:, 1] == 0)
    np.testing.assert_allclose(res.update, [1.0, 1.0], rtol=1e-12)
    assert hrgrad(GradientSet(np.zeros((2, 2)))).degenerate


def test_result_dict_schema():
    d = hrgrad(_pair(math.radians(120))).to_dict()
    assert set(d) == {"update", "s_c", "angles", "conflicts", "degenerate"}
    assert d["conflicts"] == [0, 1]


def test_adaptive_history_changes_step_budget():
    G = _pair(math.radians(150))
    a = hrgrad(G, MerConfig(alpha_min_steps=1, alpha_max_steps=20))
    b = hrgrad(G, MerConfig(alpha_min_steps=1, alpha_max_steps=20), loss_history=([1.0, 1.0], [5.0, 0.1]))
    assert a.inner_steps <= 1 < b.inner_steps


def test_invariants_on_random_sets():
    rng = make_rng(41)
    for _ in range(500):
        G = random_gradient_set(rng)
        res = hrgrad(G)
        assert check_invariants(G, res) == {}
        if not res.degenerate:
            assert np.linalg.norm(res.update) == pytest.approx(
                np.dot(np.linalg.norm(res.rotated, axis=0), res.rotated.T @ res.fair_direction / G.norms), rel=1e-8
            )
            if res.full_rank:
                assert np.linalg.norm(res.update) == pytest.approx(res.s_c * G.norms.sum(), rel=1e-8)


def test_antiparallel_sweep_keeps_update_alive():
    for deg in np.linspace(91, 179, 60):
        G = _pair(math.radians(deg))
        assert np.linalg.norm(hrgrad(G).update) / 2 >= 0.01
