"""Conflict detection, planar rotations toward the anchor, and MER angle selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, DegeneracyError, InvalidInputError, NumericTolerances, unit

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class MerConfig:
    lam: float = 0.1
    inner_lr: float = 0.1
    alpha_min_steps: int = 2
    alpha_max_steps: int = 20
    k_std: float = 0.1

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidInputError("lam must be >= 0")
        if not 0 < self.inner_lr <= 1:
            raise InvalidInputError("inner_lr must lie in (0, 1]")
        if not 1 <= self.alpha_min_steps <= self.alpha_max_steps:
            raise InvalidInputError("need 1 <= alpha_min_steps <= alpha_max_steps")
        if not self.k_std > 0:
            raise InvalidInputError("k_std must be > 0")


@dataclass(eq=False)
class RotationPlan:
    conflicts: list[int]
    references: dict[int, np.ndarray]
    angles: np.ndarray
    alpha_lower: np.ndarray
    alpha_upper: np.ndarray
    mer_value: float
    steps_run: int = 0
    halvings: int = 0
    history: list[float] = field(default_factory=list)

    @property
    def alpha_max(self) -> float:
        return float(self.angles.max()) if self.angles.size else 0.0


def detect_conflicts(units: np.ndarray, d_star: np.ndarray, tol: NumericTolerances | None = None) -> list[int]:
    """Indices whose unit gradient has a negative inner product with the anchor."""
    tol = tol or NumericTolerances()
    d_star = np.asarray(d_star, dtype=float)
    if not np.any(d_star):
        raise DegeneracyError("anchor is the zero vector; take the zero-update path")
    dots = np.asarray(units).T @ d_star
    return [int(i) for i in np.flatnonzero(dots < -tol.conflict_tol)]


def detect_dual_cone_violations(directions: np.ndarray, tol: NumericTolerances | None = None) -> list[int]:
    """Indices whose direction has a negative inner product with some other task direction.

    These are exactly the tasks lying outside the dual cone of the gradient set.
    """
    tol = tol or NumericTolerances()
    C = directions.T @ directions
    np.fill_diagonal(C, 1.0)
    return [int(i) for i in np.flatnonzero(C.min(axis=1) < -tol.conflict_tol)]


def reference_direction(g_bar: np.ndarray, d_star: np.ndarray) -> np.ndarray:
    """Gram-Schmidt reference ``w = d* - (g.d*) g``, normalized.

    When ``g`` is (anti)parallel to the anchor the residual vanishes and the
    canonical axis least aligned with ``g`` is orthogonalized instead.
    """
    c = float(g_bar @ d_star)
    v = d_star - c * g_bar
    if np.linalg.norm(v) <= 1e-12 * max(1.0, np.linalg.norm(d_star)):
        e = np.zeros_like(g_bar)
        e[int(np.argmin(np.abs(g_bar)))] = 1.0
        v = e - float(g_bar @ e) * g_bar
    w = unit(v)
    # one re-orthogonalization pass keeps w.g at the rounding floor
    w = unit(w - float(w @ g_bar) * g_bar)
    return w


def rotate(g_bar: np.ndarray, w: np.ndarray, alpha: float, ortho_tol: float = 1e-10) -> np.ndarray:
    if abs(float(g_bar @ w)) > ortho_tol:
        raise ContractError(f"rotation frame not orthogonal (g.w = {float(g_bar @ w):.3e})")
    return math.cos(alpha) * g_bar + math.sin(alpha) * w


def anchor_lower_bound(c: float) -> float:
    """Smallest angle with ``r(alpha) . d* >= 0`` for ``c = g.d*``; zero if ``c >= 0``."""
    if c >= 0:
        return 0.0
    return math.atan(-c / math.sqrt(max(1.0 - c * c, 0.0))) if c > -1.0 else HALF_PI


def _sinusoid_interval(a: float, b: float, tol: float) -> tuple[float, float] | None:
    """Sub-interval of ``[0, pi/2]`` where ``a cos t + b sin t >= 0``."""
    a_ok, b_ok = a >= -tol, b >= -tol
    if a_ok and b_ok:
        return 0.0, HALF_PI
    if a_ok:
        return 0.0, math.atan2(max(a, 0.0), -b)
    if b_ok:
        return (math.atan2(-a, b) if b > 0 else HALF_PI), HALF_PI
    return None


def feasible_interval(
    g_bar: np.ndarray,
    w: np.ndarray,
    d_star: np.ndarray,
    others: np.ndarray | None = None,
    tol: float = 1e-12,
) -> tuple[float, float, bool]:
    """Angles in ``[0, pi/2]`` keeping ``r(alpha)`` non-conflicting with the anchor and ``others``.

    The anchor constraint gives the closed-form lower bound
    ``arctan(-c / sqrt(1 - c^2))``.  Each column ``u`` of ``others`` adds the
    constraint ``r(alpha) . u >= 0``.  Returns ``(lower, upper, feasible)``;
    when the constraints do not intersect the interval collapses to the
    angle of the anchor itself.
    """
    c = float(g_bar @ d_star)
    lo, hi = anchor_lower_bound(c), HALF_PI
    if others is not None and others.size:
        a_vals = g_bar @ others
        b_vals = w @ others
        for a, b in zip(a_vals, b_vals):
            iv = _sinusoid_interval(float(a), float(b), tol)
            if iv is None:
                lo, hi = 1.0, 0.0
                break
            lo, hi = max(lo, iv[0]), min(hi, iv[1])
    if lo <= hi:
        return lo, hi, True
    s = float(w @ d_star)
    theta = min(max(math.atan2(s, c), 0.0), HALF_PI)
    return theta, theta, False


def _rotated(units: np.ndarray, references: dict[int, np.ndarray], angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = np.array(units, dtype=float, copy=True)
    T = np.zeros_like(R)
    for i, w in references.items():
        ca, sa = math.cos(angles[i]), math.sin(angles[i])
        R[:, i] = ca * units[:, i] + sa * w
        T[:, i] = -sa * units[:, i] + ca * w
    return R, T


def mer_objective(
    angles: np.ndarray,
    units: np.ndarray,
    references: dict[int, np.ndarray],
    conflicts,
    lam: float,
) -> float:
    """Pairwise alignment energy plus ``lam``-weighted proximity to the original directions.

    ``(1/(m(m-1))) sum_{i<j} (1 - r_i.r_j) + (lam/(4m)) sum_i ||r_i - g_i||^2``.
    Tasks outside ``conflicts`` are held at angle zero.  For a single task the
    alignment term is zero.
    """
    return _mer_value_and_grad(np.asarray(angles, dtype=float), units, references, list(conflicts), lam)[0]


def _mer_value_and_grad(angles, units, references, conflicts, lam):
    m = units.shape[1]
    a = np.zeros(m)
    a[conflicts] = angles[conflicts]
    R, T = _rotated(units, {i: references[i] for i in conflicts}, a)
    total = R.sum(axis=1)
    P = R.T @ R
    if m > 1:
        pair = (m * (m - 1) / 2 - (P.sum() - np.trace(P)) / 2) / (m * (m - 1))
    else:
        pair = 0.0
    diff = R - units
    prox = lam / (4 * m) * float(np.sum(diff * diff))
    grad = np.zeros(m)
    for i in conflicts:
        t = T[:, i]
        d_align = -float(t @ (total - R[:, i])) / (m * (m - 1)) if m > 1 else 0.0
        d_prox = lam / (4 * m) * 2.0 * float(diff[:, i] @ t)
        grad[i] = d_align + d_prox
    return pair + prox, grad


def adaptive_steps(prev_losses, curr_losses, cfg: MerConfig, delta: float = 1e-12) -> int:
    """Inner iteration count ``floor(a_min + (a_max - a_min) s/(s + k_std))``.

    ``s`` is the population standard deviation of the per-task relative loss
    changes.  Without a previous snapshot the minimum count is returned.
    """
    if prev_losses is None:
        return cfg.alpha_min_steps
    prev = np.asarray(prev_losses, dtype=float)
    curr = np.asarray(curr_losses, dtype=float)
    if prev.shape != curr.shape or prev.ndim != 1:
        raise InvalidInputError(f"loss vectors differ in shape: {prev.shape} vs {curr.shape}")
    rel = (curr - prev) / (prev + delta)
    s = float(np.std(rel))
    if not math.isfinite(s):
        return cfg.alpha_max_steps
    span = cfg.alpha_max_steps - cfg.alpha_min_steps
    return int(math.floor(cfg.alpha_min_steps + span * (s / (s + cfg.k_std))))


def optimize_angles(
    units: np.ndarray,
    references: dict[int, np.ndarray],
    conflicts,
    d_star: np.ndarray,
    cfg: MerConfig | None = None,
    steps: int | None = None,
    bounds: dict[int, tuple[float, float]] | None = None,
) -> RotationPlan:
    """Projected gradient descent on the MER energy over the conflicting angles.

    Iterates start at the lower feasibility bound and are clamped to
    ``[lower_i, upper_i]``.  Without explicit ``bounds`` the lower bound is the
    anchor angle and the upper bound is ``pi/2``.  A step that raises the
    energy by more than 1e-12 is retried with half the step size (at most ten
    times); if it still fails the iterate is kept and descent stops.
    """
    cfg = cfg or MerConfig()
    steps = cfg.alpha_min_steps if steps is None else int(steps)
    units = np.asarray(units, dtype=float)
    m = units.shape[1]
    conflicts = sorted(int(i) for i in conflicts)
    lower, upper = np.zeros(m), np.zeros(m)
    for i in conflicts:
        if bounds is not None:
            lower[i], upper[i] = bounds[i]
        else:
            lower[i] = anchor_lower_bound(float(units[:, i] @ d_star))
            upper[i] = HALF_PI
    angles = lower.copy()
    value, grad = _mer_value_and_grad(angles, units, references, conflicts, cfg.lam)
    history = [value]
    if not conflicts:
        return RotationPlan([], {}, angles, lower, upper, value, 0, 0, history)

    lr = cfg.inner_lr
    halvings = 0
    run = 0
    for _ in range(steps):
        accepted = False
        while True:
            trial = np.clip(angles - lr * grad, lower, upper)
            trial_value, trial_grad = _mer_value_and_grad(trial, units, references, conflicts, cfg.lam)
            if trial_value <= value + 1e-12:
                accepted = True
                break
            if halvings >= 10:
                break
            lr *= 0.5
            halvings += 1
        if not accepted:
            break
        angles, value, grad = trial, trial_value, trial_grad
        history.append(value)
        run += 1
    refs = {i: references[i] for i in conflicts}
    return RotationPlan(conflicts, refs, angles, lower, upper, value, run, halvings, history)
