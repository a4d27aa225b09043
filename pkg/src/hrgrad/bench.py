"""Synthetic multiscale task families, convergence runs and the checks that go with them."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregation import hrgrad
from .baselines import BaselineChoice, run_baseline
from .core import GradientSet, InvalidInputError, NumericTolerances, make_rng, unit
from .optimizer import AdamHyper, HRAdam, LRSchedule
from .rotation import MerConfig

CSV_HEADER = ["step", "total_loss", "grad_sum_norm", "update_norm", "s_c", "conflicts", "alpha_max", "rho_min", "kappa"]
DIVERGENCE_FACTOR = 1e12


def sample_eps_loguniform(eps_min: float, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``eps = exp(xi)`` with ``xi ~ Uniform(log eps_min, 0)``."""
    if not (0.0 < eps_min < 1.0):
        raise InvalidInputError(f"eps_min must lie in (0, 1), got {eps_min}")
    if n < 0:
        raise InvalidInputError("n must be >= 0")
    rng = make_rng(seed)
    return np.exp(rng.uniform(math.log(eps_min), 0.0, size=int(n)))


def loguniform_density(eps, eps_min: float) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    inside = (eps >= eps_min) & (eps <= 1.0)
    return np.where(inside, 1.0 / (eps * math.log(1.0 / eps_min)), 0.0)


@dataclass(frozen=True)
class ConflictPairSpec:
    angle: float
    magnitude_ratio: float = 1.0
    dim: int = 2

    def __post_init__(self):
        if not (0.0 < self.angle <= math.pi):
            raise InvalidInputError("angle must lie in (0, pi]")
        if not self.magnitude_ratio > 0:
            raise InvalidInputError("magnitude_ratio must be > 0")
        if self.dim < 2:
            raise InvalidInputError("dimension must be >= 2")


def make_conflict_pair(spec: ConflictPairSpec, seed: int = 0) -> GradientSet:
    """``g1`` unit, ``g2 = ratio * (cos(phi) g1 + sin(phi) u)`` with ``u`` a random unit vector orthogonal to ``g1``."""
    rng = make_rng(seed)
    g1 = unit(rng.standard_normal(spec.dim))
    v = rng.standard_normal(spec.dim)
    u = unit(v - (v @ g1) * g1)
    u = unit(u - (u @ g1) * g1)
    phi = spec.angle
    g2 = spec.magnitude_ratio * (math.cos(phi) * g1 + math.sin(phi) * u)
    return GradientSet.from_columns([g1, g2], names=("macro", "micro"))


def _haar_orthogonal(rng: np.random.Generator, D: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((D, D)))
    return q * np.sign(np.diag(r))


@dataclass(eq=False)
class QuadraticTaskFamily:
    """Tasks ``L_i(theta) = 0.5 (theta - theta_i)^T A_i (theta - theta_i)``."""

    A: np.ndarray  # m x D x D
    optima: np.ndarray  # m x D
    eps: np.ndarray
    theta0: np.ndarray
    conflict_free: bool = False
    power: int = 1
    seed: int = 0
    L_global: float = field(init=False)
    theta_star: np.ndarray = field(init=False)
    L_star: float = field(init=False)

    def __post_init__(self):
        H = self.A.sum(axis=0)
        # symmetric, so the spectral norm is the largest absolute eigenvalue
        self.L_global = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (H + H.T)))))
        rhs = np.einsum("ijk,ik->j", self.A, self.optima)
        self.theta_star = np.linalg.lstsq(H, rhs, rcond=None)[0]
        self.L_star = self.total_loss(self.theta_star)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def D(self) -> int:
        return self.A.shape[1]

    def task_losses(self, theta) -> np.ndarray:
        r = np.asarray(theta)[None, :] - self.optima
        return 0.5 * np.einsum("ij,ijk,ik->i", r, self.A, r)

    def total_loss(self, theta) -> float:
        return float(self.task_losses(theta).sum())

    def task_gradient(self, theta, i: int) -> np.ndarray:
        return self.A[i] @ (np.asarray(theta) - self.optima[i])

    def gradients(self, theta) -> GradientSet:
        r = np.asarray(theta)[None, :] - self.optima
        return GradientSet(np.einsum("ijk,ik->ji", self.A, r))

    def describe(self) -> dict:
        return {
            "m": self.m,
            "D": self.D,
            "eps": self.eps.tolist(),
            "power": self.power,
            "conflict_free": self.conflict_free,
            "seed": self.seed,
            "L_global": self.L_global,
            "L_star": self.L_star,
        }


def make_quadratic_family(
    m: int,
    D: int,
    eps=None,
    seed: int = 0,
    power: int = 1,
    conflict_free: bool = False,
    eps_min: float | None = None,
) -> QuadraticTaskFamily:
    """Build ``A_i = Q_i diag(eps_i**-power, 1, ..., 1) Q_i^T`` with seeded random rotations.

    ``conflict_free`` shares one rotation and one optimum across tasks; the
    Hessians then commute and every pair of task gradients has a nonnegative
    inner product everywhere.  Without ``eps`` the values are drawn
    log-uniformly from ``[eps_min, 1]`` (or set to one).
    """
    if m < 1 or D < 1:
        raise InvalidInputError("need m >= 1 and D >= 1")
    if power < 1:
        raise InvalidInputError("power must be >= 1")
    if eps is None:
        eps = sample_eps_loguniform(eps_min, m, seed) if eps_min is not None else np.ones(m)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (m,)).copy()
    if np.any(eps <= 0) or not np.all(np.isfinite(eps)):
        raise InvalidInputError("eps values must be positive and finite")
    rng = make_rng(seed, 7)
    A = np.empty((m, D, D))
    shared_q = _haar_orthogonal(rng, D)
    shared_opt = rng.standard_normal(D)
    optima = np.empty((m, D))
    for i in range(m):
        Q = shared_q if conflict_free else _haar_orthogonal(rng, D)
        diag = np.ones(D)
        diag[0] = eps[i] ** (-power)
        A[i] = (Q * diag) @ Q.T
        A[i] = 0.5 * (A[i] + A[i].T)
        optima[i] = shared_opt if conflict_free else rng.standard_normal(D)
    theta0 = shared_opt + rng.standard_normal(D) if conflict_free else rng.standard_normal(D)
    return QuadraticTaskFamily(A, optima, eps, theta0, conflict_free, power, seed)


@dataclass(eq=False)
class RunTrajectory:
    method: str
    mode: str
    gamma: float
    steps_requested: int
    total_loss: list[float] = field(default_factory=list)
    loss_after: list[float] = field(default_factory=list)
    task_losses: list[list[float]] = field(default_factory=list)
    grad_sum_norm: list[float] = field(default_factory=list)
    update_norm: list[float] = field(default_factory=list)
    s_c: list[float] = field(default_factory=list)
    angles: list[list[float]] = field(default_factory=list)
    conflicts: list[int] = field(default_factory=list)
    rho_min: list[float] = field(default_factory=list)
    kappa: list[float] = field(default_factory=list)
    min_projection: list[float] = field(default_factory=list)
    degenerate: list[bool] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    aborted: bool = False
    stalled: bool = False
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.total_loss)

    @property
    def alpha_max(self) -> list[float]:
        return [max(a) if a else 0.0 for a in self.angles]

    def rows(self):
        for k in range(len(self)):
            yield [
                k,
                self.total_loss[k],
                self.grad_sum_norm[k],
                self.update_norm[k],
                self.s_c[k],
                self.conflicts[k],
                self.alpha_max[k],
                self.rho_min[k],
                self.kappa[k],
            ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            w.writerow(CSV_HEADER)
            for row in self.rows():
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _step_diagnostics(G: GradientSet, update: np.ndarray):
    """``(s_c, rho_min, kappa)`` measured from the original gradients and the applied update.

    ``s_c`` is ``||update|| / sum_i ||g_i||``, which for HRGrad on full-rank
    inputs is the equal cosine itself.
    """
    keep = G.norms > 0
    un = float(np.linalg.norm(update))
    total = float(G.norms[keep].sum())
    if un == 0.0 or total == 0.0:
        return 0.0, 0.0, 0.0
    d = update / un
    rho = float(np.min(G.directions[:, keep].T @ d))
    s_c = un / total
    return s_c, rho, rho / s_c


def _dual_violations(G: GradientSet) -> int:
    P = G.directions.T @ G.directions
    np.fill_diagonal(P, 1.0)
    return int(np.count_nonzero(P.min(axis=1) < 0))


def run_convergence(
    family: QuadraticTaskFamily,
    method: str = "hrgrad",
    steps: int = 100,
    gamma: float | None = None,
    mode: str = "direct",
    seed: int = 0,
    mer_cfg: MerConfig | None = None,
    tol: NumericTolerances | None = None,
    adam: AdamHyper | None = None,
    schedule: LRSchedule | None = None,
    theta0=None,
) -> RunTrajectory:
    """Optimize the family's total loss and record per-step diagnostics.

    ``direct`` applies ``theta <- theta - gamma * update`` with the aggregated
    update.  ``adam`` drives :class:`HRAdam` in round-robin order (HRGrad only).
    A run stops early when every task gradient vanishes, when the aggregated
    update is the zero vector, or when the loss exceeds 1e12 times its initial
    value (``aborted``).
    """
    if steps < 0:
        raise InvalidInputError("steps must be >= 0")
    if mode not in ("direct", "adam"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    method = method.lower()
    if method != "hrgrad":
        BaselineChoice(method)
        if mode == "adam":
            raise InvalidInputError("adam mode is only available for hrgrad")
    if gamma is None:
        gamma = 1.0 / family.L_global
    if not gamma > 0:
        raise InvalidInputError("gamma must be > 0")
    mer_cfg = mer_cfg or MerConfig()
    tol = tol or NumericTolerances()
    theta = np.array(family.theta0 if theta0 is None else theta0, dtype=float, copy=True)
    traj = RunTrajectory(method, mode, float(gamma), int(steps))
    traj.config = {"family": family.describe(), "method": method, "mode": mode, "gamma": float(gamma), "steps": int(steps), "seed": int(seed)}
    traj.initial_loss = family.total_loss(theta)
    limit = DIVERGENCE_FACTOR * max(abs(traj.initial_loss), 1e-300)
    step_rng = make_rng(seed, 11)
    opt = HRAdam(theta, family.m, adam or AdamHyper(lr=gamma), schedule, mer_cfg, tol) if mode == "adam" else None
    prev_losses = None
    t0 = time.perf_counter()

    for k in range(steps):
        G = family.gradients(theta)
        if not np.any(G.norms > 0):
            break
        losses = family.task_losses(theta)
        angles = np.zeros(family.m)
        conflicts = 0
        min_proj = float("nan")
        if mode == "adam":
            i = opt.next_task
            rep = opt.step(family.task_gradient(theta, i), task_index=i, loss_snapshot=losses if i == 0 else None)
            new_theta = opt.theta.copy()
            update = (theta - new_theta) / gamma
            angles, conflicts, degenerate = rep.angles, len(rep.conflicts), rep.degenerate
        elif method == "hrgrad":
            res = hrgrad(G, mer_cfg, tol, loss_history=(prev_losses, losses))
            update = res.update
            angles, conflicts, degenerate = res.angles, res.conflict_count, res.degenerate
            if not degenerate:
                keep = G.norms > 0
                M = res.rotated[:, keep] / G.norms[keep]
                min_proj = float(np.min(M.T @ res.fair_direction))
            new_theta = theta - gamma * update
        else:
            res = run_baseline(method, G, tol, seed=int(step_rng.integers(2**31)))
            update = res.update
            conflicts, degenerate = _dual_violations(G), res.degenerate
            new_theta = theta - gamma * update
        prev_losses = losses

        s_c, rho, kappa = _step_diagnostics(G, update)
        after = family.total_loss(new_theta)
        traj.total_loss.append(float(losses.sum()))
        traj.loss_after.append(after)
        traj.task_losses.append(losses.tolist())
        traj.grad_sum_norm.append(float(np.linalg.norm(G.matrix.sum(axis=1))))
        traj.update_norm.append(float(np.linalg.norm(update)))
        traj.s_c.append(s_c)
        traj.angles.append([float(a) for a in angles])
        traj.conflicts.append(int(conflicts))
        traj.rho_min.append(rho)
        traj.kappa.append(kappa)
        traj.min_projection.append(min_proj)
        traj.degenerate.append(bool(degenerate))
        theta = new_theta
        if not np.isfinite(after) or after > limit:
            traj.aborted = True
            break
        if mode == "direct" and not np.any(update):
            traj.stalled = True
            break

    traj.final_loss = family.total_loss(theta)
    traj.wall_time = time.perf_counter() - t0
    return traj


def run_with_step_premise(
    family: QuadraticTaskFamily,
    method: str = "hrgrad",
    steps: int = 100,
    gamma: float | None = None,
    max_tries: int = 40,
    **kwargs,
) -> RunTrajectory:
    """Rerun ``direct`` mode with a shrinking step until ``gamma <= kappa_min / L`` holds on the trajectory.

    ``kappa`` depends on the path, so it is only known after a run.  Each retry
    uses ``min(gamma / 2, 0.9 kappa_min / L)``.  Returns the last trajectory
    (which may still miss the premise if ``kappa_min <= 0``).
    """
    L = family.L_global
    gamma = 1.0 / L if gamma is None else gamma
    traj = run_convergence(family, method, steps, gamma, "direct", **kwargs)
    for _ in range(max_tries):
        kmin = min(traj.kappa) if len(traj) else 1.0
        if kmin <= 0 or gamma <= kmin / L:
            break
        gamma = min(gamma / 2, 0.9 * kmin / L)
        traj = run_convergence(family, method, steps, gamma, "direct", **kwargs)
    return traj


@dataclass
class VerificationReport:
    name: str
    passed: bool
    checked: int = 0
    violations: list[int] = field(default_factory=list)
    skipped: int = 0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "checked": self.checked,
            "violations": list(self.violations),
            "skipped": self.skipped,
            "details": self.details,
        }


def verify_convex_descent(traj: RunTrajectory, family: QuadraticTaskFamily, gamma: float | None = None) -> VerificationReport:
    """Per-step descent inequality ``L+ <= L - gamma kappa (1 - L gamma / (2 kappa)) ||u||^2``.

    Asserted on steps with ``rho_min > 0`` and ``gamma <= 2 kappa / L``; other
    steps are counted as skipped.  HRGrad runs additionally assert that
    conflict-free steps never increase the loss, and report the sufficient
    condition ``rho_min >= S_c - 2 sin(alpha_max / 2)``.
    """
    gamma = traj.gamma if gamma is None else gamma
    L = family.L_global
    violations, monotone, sufficient = [], [], []
    checked = skipped = 0
    for k in range(len(traj)):
        before, after = traj.total_loss[k], traj.loss_after[k]
        rho, kappa, un = traj.rho_min[k], traj.kappa[k], traj.update_norm[k]
        slack = 1e-8 * abs(before)
        if rho > 0 and gamma <= 2 * kappa / L:
            checked += 1
            bound = before - gamma * kappa * (1 - L * gamma / (2 * kappa)) * un * un
            if after > bound + slack:
                violations.append(k)
        else:
            skipped += 1
        if traj.method == "hrgrad" and traj.mode == "direct":
            if traj.conflicts[k] == 0 and after > before + 1e-12 * abs(before):
                monotone.append(k)
            mp = traj.min_projection[k]
            if math.isfinite(mp) and rho < mp - 2 * math.sin(traj.alpha_max[k] / 2) - 1e-12:
                sufficient.append(k)
    passed = not violations and not monotone
    return VerificationReport(
        "convex_descent",
        passed,
        checked,
        violations,
        skipped,
        {"monotone_violations": monotone, "sufficient_condition_violations": sufficient, "L": L, "gamma": gamma},
    )


def verify_nonconvex_bound(traj: RunTrajectory, family: QuadraticTaskFamily, gamma: float | None = None) -> VerificationReport:
    """Ergodic bound ``min_k ||sum_i g_i^k||^2 <= 2 (L0 - L*) / (gamma kappa_min alpha^2 K)``.

    ``alpha = min_k S_c^k`` must be positive whenever no step was degenerate.
    The bound is asserted only under its hypotheses: ``kappa_min > 0`` and
    ``gamma <= kappa_min / L``.  Otherwise it is evaluated and reported but
    the check counts as skipped.
    """
    gamma = traj.gamma if gamma is None else gamma
    K = len(traj)
    details: dict = {"K": K}
    if K == 0:
        return VerificationReport("nonconvex_bound", True, 0, [], 0, details)
    alpha = min(traj.s_c)
    kappa_min = min(traj.kappa)
    any_degenerate = any(traj.degenerate)
    measured = min(v * v for v in traj.grad_sum_norm)
    details.update(
        {
            "alpha": alpha,
            "kappa_min": kappa_min,
            "min_grad_sum_sq": measured,
            "any_degenerate": any_degenerate,
            "step_size_premise": bool(kappa_min > 0 and gamma <= kappa_min / family.L_global),
        }
    )
    violations = []
    alpha_ok = any_degenerate or alpha > 0
    if not alpha_ok:
        violations.append(-1)
    details["bound"] = None
    checked, skipped = 0, 1
    if kappa_min > 0 and alpha > 0:
        bound = 2 * (traj.initial_loss - family.L_star) / (gamma * kappa_min * alpha * alpha * K) * (1 + 1e-6)
        details["bound"] = bound
        details["holds"] = bool(measured <= bound)
        if details["step_size_premise"]:
            checked, skipped = 1, 0
            if measured > bound:
                violations.append(int(np.argmin(traj.grad_sum_norm)))
    return VerificationReport("nonconvex_bound", not violations, checked, violations, skipped, details)


def relative_l2_error(predicted, reference) -> float:
    p = np.asarray(predicted, dtype=float).ravel()
    r = np.asarray(reference, dtype=float).ravel()
    if p.shape != r.shape:
        raise InvalidInputError("vectors differ in length")
    den = float(r @ r)
    if den == 0.0:
        raise InvalidInputError("reference vector is zero")
    diff = p - r
    return math.sqrt(float(diff @ diff) / den)


def run_summary(traj: RunTrajectory, reports: list[VerificationReport]) -> dict:
    return {
        "config": traj.config,
        "steps_run": len(traj),
        "initial_loss": traj.initial_loss,
        "final_loss": traj.final_loss,
        "aborted": traj.aborted,
        "stalled": traj.stalled,
        "wall_time": traj.wall_time,
        "reports": [r.to_dict() for r in reports],
        "passed": all(r.passed for r in reports) and not traj.aborted,
    }


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
