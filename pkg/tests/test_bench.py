import csv
import json
import math

import numpy as np
import pytest
from scipy import stats

from hrgrad.baselines import pcgrad, project_conflict
from hrgrad.bench import (
    CSV_HEADER,
    ConflictPairSpec,
    loguniform_density,
    make_conflict_pair,
    make_quadratic_family,
    relative_l2_error,
    run_convergence,
    run_summary,
    run_with_step_premise,
    sample_eps_loguniform,
    verify_convex_descent,
    verify_nonconvex_bound,
)
from hrgrad.core import InvalidInputError


def test_sampler_support_and_half_mass():
    e = sample_eps_loguniform(0.5, 1000, 1)
    assert e.min() >= 0.5 and e.max() <= 1.0
    e = sample_eps_loguniform(1e-6, 200000, 2)
    assert np.mean(e <= 1e-3) == pytest.approx(0.5, abs=0.01)
    with pytest.raises(InvalidInputError):
        sample_eps_loguniform(1.0, 3)
    with pytest.raises(InvalidInputError):
        sample_eps_loguniform(0.0, 3)


def test_sampler_ks():
    e = sample_eps_loguniform(1e-4, 10000, 3)
    lo = math.log(1e-4)
    assert stats.kstest(np.log(e), "uniform", args=(lo, -lo)).pvalue > 0.01


def test_density_identity():
    x = np.geomspace(1e-6, 1.0, 50)
    np.testing.assert_allclose(loguniform_density(x, 1e-6) * x * math.log(1e6), 1.0, rtol=1e-14)
    assert loguniform_density(1e-7, 1e-6) == 0.0


def test_conflict_pair_postconditions():
    for phi, rho, D in ((math.pi / 2, 1.0, 2), (2 * math.pi / 3, 1e3, 7), (math.pi, 0.1, 3)):
        G = make_conflict_pair(ConflictPairSpec(phi, rho, D), seed=4)
        cos = float(G.matrix[:, 0] @ G.matrix[:, 1]) / (G.norms[0] * G.norms[1])
        assert cos == pytest.approx(math.cos(phi), abs=1e-12)
        assert G.norms[1] / G.norms[0] == pytest.approx(rho, rel=1e-12)
    with pytest.raises(InvalidInputError):
        ConflictPairSpec(1.0, 1.0, 1)
    with pytest.raises(InvalidInputError):
        ConflictPairSpec(0.0, 1.0, 2)


def test_energy_clipping_and_low_pass():
    for phi in np.linspace(math.pi / 2 + 0.05, math.pi - 1e-4, 20):
        G = make_conflict_pair(ConflictPairSpec(phi, 1e3, 5), seed=5)
        macro, micro = G.matrix[:, 0], G.matrix[:, 1]
        clipped = project_conflict(micro, macro)
        assert float(clipped @ clipped) == pytest.approx(math.sin(phi) ** 2, rel=1e-10)
        kept = project_conflict(macro, micro)
        assert np.linalg.norm(kept) / np.linalg.norm(micro) == pytest.approx(math.sin(phi), rel=1e-10)


def test_quadratic_family_construction():
    fam = make_quadratic_family(3, 5, eps=[1.0, 0.1, 0.01], seed=6)
    for A in fam.A:
        assert np.linalg.eigvalsh(A).min() > 0
    assert fam.L_global >= max(np.linalg.norm(A, 2) for A in fam.A) - 1e-9
    assert fam.L_global == pytest.approx(np.linalg.norm(fam.A.sum(axis=0), 2), rel=1e-12)
    np.testing.assert_allclose(fam.gradients(fam.theta_star).matrix.sum(axis=1), 0, atol=1e-9)
    sq = make_quadratic_family(2, 4, eps=[0.1, 0.1], seed=6, power=2)
    assert sq.L_global >= 100
    with pytest.raises(InvalidInputError):
        make_quadratic_family(2, 3, eps=[1.0, -1.0])


def test_conflict_free_family_has_no_conflicts():
    fam = make_quadratic_family(4, 6, eps_min=1e-3, seed=7, conflict_free=True)
    rng = np.random.default_rng(0)
    for _ in range(50):
        G = fam.gradients(fam.theta0 + rng.standard_normal(6) * 3)
        P = G.matrix.T @ G.matrix
        assert P.min() >= -1e-9 * np.abs(P).max()


def test_zero_initial_gradient_gives_empty_trajectory():
    fam = make_quadratic_family(2, 4, seed=8, conflict_free=True)
    traj = run_convergence(fam, "hrgrad", 10, theta0=fam.optima[0])
    assert len(traj) == 0 and traj.final_loss == traj.initial_loss == 0.0


def test_orthogonal_tasks_converge_geometrically():
    fam = make_quadratic_family(2, 4, eps=[1.0, 1.0], seed=9, conflict_free=True)
    traj = run_convergence(fam, "hrgrad", 30, gamma=0.1 / fam.L_global)
    ratios = np.array(traj.loss_after) / np.array(traj.total_loss)
    assert np.all(ratios < 1) and np.ptp(ratios) < 1e-9


def test_identical_isotropic_tasks_descent_is_exact():
    fam = make_quadratic_family(2, 4, eps=[1.0, 1.0], seed=10, conflict_free=True)
    g = 0.3 / fam.L_global
    traj = run_convergence(fam, "hrgrad", 5, gamma=g)
    for before, after, un in zip(traj.total_loss, traj.loss_after, traj.update_norm):
        assert after == pytest.approx(before - g * (1 - fam.L_global * g / 2) * un * un, rel=1e-10, abs=1e-14)


def test_conflict_free_kappa_is_one():
    fam = make_quadratic_family(2, 6, eps_min=1e-2, seed=11, conflict_free=True)
    traj = run_convergence(fam, "hrgrad", 20)
    assert all(c == 0 for c in traj.conflicts)
    np.testing.assert_allclose(traj.kappa, 1.0, atol=1e-8)
    rep = verify_convex_descent(traj, fam)
    assert rep.passed and rep.checked == len(traj)


def test_descent_checks_on_conflicting_family():
    fam = make_quadratic_family(3, 6, eps=[1.0, 0.1, 0.01], seed=12)
    traj = run_convergence(fam, "hrgrad", 60)
    rep = verify_convex_descent(traj, fam)
    assert rep.passed
    assert rep.details["sufficient_condition_violations"] == []
    assert rep.checked + rep.skipped == len(traj)


def test_oversized_step_is_caught():
    fam = make_quadratic_family(2, 6, eps_min=1e-2, seed=13, conflict_free=True)
    traj = run_convergence(fam, "hrgrad", 20, gamma=2.5 / fam.L_global)
    rep = verify_convex_descent(traj, fam)
    assert not rep.passed and rep.details["monotone_violations"]


def test_divergence_is_reported():
    fam = make_quadratic_family(2, 4, seed=14, conflict_free=True, eps_min=1e-2)
    traj = run_convergence(fam, "hrgrad", 500, gamma=3.0 / fam.L_global)
    assert traj.aborted and len(traj) < 500
    assert not run_summary(traj, [])["passed"]


def test_nonconvex_bound_reports():
    fam = make_quadratic_family(2, 5, eps=[1.0, 1e-2], seed=15)
    traj = run_with_step_premise(fam, "hrgrad", 80)
    rep = verify_nonconvex_bound(traj, fam)
    assert rep.passed and rep.checked == 1
    assert rep.details["alpha"] > 0 and rep.details["step_size_premise"]
    one = run_convergence(fam, "hrgrad", 1, gamma=traj.gamma)
    r1 = verify_nonconvex_bound(one, fam)
    assert r1.details["min_grad_sum_sq"] <= r1.details["bound"]


def test_nonconvex_bound_converged_run():
    fam = make_quadratic_family(2, 4, eps=[1.0, 1.0], seed=16, conflict_free=True)
    traj = run_convergence(fam, "hrgrad", 200, gamma=1.0 / fam.L_global)
    rep = verify_nonconvex_bound(traj, fam)
    assert rep.passed and rep.details["min_grad_sum_sq"] < 1e-12


def test_baselines_and_adam_mode_run():
    fam = make_quadratic_family(2, 5, eps=[1.0, 0.1], seed=18)
    for method in ("pcgrad", "imtlg", "config", "aligngrad", "mgda", "ls"):
        traj = run_convergence(fam, method, 15, gamma=0.2 / fam.L_global)
        assert len(traj) == 15 and all(math.isfinite(v) for v in traj.total_loss)
    traj = run_convergence(fam, "hrgrad", 40, gamma=1e-2, mode="adam")
    assert len(traj) == 40 and traj.final_loss < traj.initial_loss
    with pytest.raises(InvalidInputError):
        run_convergence(fam, "pcgrad", 5, mode="adam")
    with pytest.raises(ValueError):
        run_convergence(fam, "nash", 5)


def test_csv_output(tmp_path):
    fam = make_quadratic_family(2, 5, eps=[1.0, 0.1], seed=19)
    traj = run_convergence(fam, "hrgrad", 12)
    path = tmp_path / "t.csv"
    traj.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == CSV_HEADER and len(rows) == 13
    assert float(rows[1][1]) == traj.total_loss[0]
    summary = run_summary(traj, [verify_convex_descent(traj, fam)])
    json.dumps(summary)


def test_relative_l2_error():
    assert relative_l2_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert relative_l2_error([2, 4], [1, 2]) == pytest.approx(1.0)
    assert relative_l2_error([1, 0], [0, 1]) == pytest.approx(math.sqrt(2))
    with pytest.raises(InvalidInputError):
        relative_l2_error([1, 2], [0, 0])
    with pytest.raises(InvalidInputError):
        relative_l2_error([1, 2], [1, 2, 3])
