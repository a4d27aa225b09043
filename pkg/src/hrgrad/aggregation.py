"""Magnitude restoration, the pseudoinverse fair direction, and the full HRGrad operator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cone import HarmonizedCone, build_cone
from .core import (
    DegeneracyError,
    GradientSet,
    InvalidInputError,
    NumericTolerances,
    pinv_rows_times_ones,
    unit,
)
from .rotation import (
    MerConfig,
    RotationPlan,
    adaptive_steps,
    detect_conflicts,
    detect_dual_cone_violations,
    feasible_interval,
    optimize_angles,
    reference_direction,
)


@dataclass(frozen=True)
class FairDirection:
    direction: np.ndarray
    s_c: float
    full_rank: bool
    rank: int
    projections: np.ndarray  # M^T g_u


@dataclass(eq=False)
class AggregationResult:
    rotated: np.ndarray
    fair_direction: np.ndarray
    s_c: float
    update: np.ndarray
    angles: np.ndarray
    cosines: np.ndarray
    conflicts: list[int]
    degenerate: bool
    full_rank: bool
    rank: int
    mer_value: float = 0.0
    inner_steps: int = 0
    infeasible: list[int] = field(default_factory=list)
    anchor: np.ndarray | None = None

    @property
    def conflict_count(self) -> int:
        return len(self.conflicts)

    @property
    def alpha_max(self) -> float:
        return float(self.angles.max()) if self.angles.size else 0.0

    def to_dict(self) -> dict:
        return {
            "update": self.update.tolist(),
            "s_c": float(self.s_c),
            "angles": self.angles.tolist(),
            "conflicts": list(self.conflicts),
            "degenerate": bool(self.degenerate),
        }


def restore_magnitudes(G: GradientSet, plan: RotationPlan) -> np.ndarray:
    """Columns ``||g_i|| r_i(alpha_i)`` for conflicting tasks, ``g_i`` otherwise."""
    if plan.angles.shape != (G.m,):
        raise InvalidInputError(f"plan has {plan.angles.size} angles for {G.m} tasks")
    out = np.array(G.matrix, copy=True)
    for i in plan.conflicts:
        w = plan.references[i]
        if w.shape != (G.D,):
            raise InvalidInputError("reference dimension does not match gradient dimension")
        a = plan.angles[i]
        out[:, i] = G.norms[i] * (math.cos(a) * G.directions[:, i] + math.sin(a) * w)
    return out


def fair_direction(rotated: np.ndarray, tol: NumericTolerances | None = None) -> FairDirection:
    """Equal-projection direction ``g_u = U((M^+)^T 1)`` over the unit columns ``M``.

    For full column rank ``S_c = 1/sqrt(1^T (M^T M)^{-1} 1)``; otherwise the
    mean of ``M^T g_u`` is reported and ``full_rank`` is false.
    """
    tol = tol or NumericTolerances()
    rotated = np.asarray(rotated, dtype=float)
    if rotated.ndim == 1:
        rotated = rotated[:, None]
    norms = np.linalg.norm(rotated, axis=0)
    if not np.any(norms > 0):
        raise DegeneracyError("all rotated gradients are zero")
    M = rotated[:, norms > 0] / norms[norms > 0]
    res = pinv_rows_times_ones(M, tol)
    if res.degenerate or not np.any(res.vector):
        return FairDirection(np.zeros(M.shape[0]), 0.0, False, res.rank, np.zeros(M.shape[1]))
    g_u = unit(res.vector)
    proj = M.T @ g_u
    if res.full_column_rank:
        # (M^+)^T 1 = M lam with M^T M lam = 1, so 1^T (M^T M)^{-1} 1 = ||M lam||^2
        s_c = 1.0 / float(np.linalg.norm(res.vector))
    else:
        s_c = float(proj.mean())
    return FairDirection(g_u, s_c, res.full_column_rank, res.rank, proj)


def _on_active(values, active, m):
    if values is None:
        return None
    values = np.asarray(values, dtype=float)
    return values[active] if values.shape == (m,) else values


def _zero_result(G: GradientSet, anchor=None, conflicts=()) -> AggregationResult:
    return AggregationResult(
        rotated=np.array(G.matrix, copy=True),
        fair_direction=np.zeros(G.D),
        s_c=0.0,
        update=np.zeros(G.D),
        angles=np.zeros(G.m),
        cosines=np.zeros(G.m),
        conflicts=list(conflicts),
        degenerate=True,
        full_rank=False,
        rank=0,
        anchor=anchor,
    )


def rotation_plan(
    G: GradientSet,
    cone: HarmonizedCone,
    cfg: MerConfig,
    tol: NumericTolerances,
    steps: int,
) -> tuple[RotationPlan, list[int]]:
    """Detect conflicts, build references and feasible angle intervals, optimize the angles.

    A task is treated as conflicting when its direction has a negative inner
    product with the anchor or with any other task direction.  Its admissible
    angles keep the rotated direction non-conflicting with the anchor and with
    every original task direction.
    """
    units = G.directions
    d_star = cone.anchor
    conflicts = sorted(set(detect_conflicts(units, d_star, tol)) | set(detect_dual_cone_violations(units, tol)))
    references, bounds, infeasible = {}, {}, []
    for i in conflicts:
        g_bar = units[:, i]
        w = reference_direction(g_bar, d_star)
        others = np.delete(units, i, axis=1)
        lo, hi, ok = feasible_interval(g_bar, w, d_star, others, tol.conflict_tol)
        references[i], bounds[i] = w, (lo, hi)
        if not ok:
            infeasible.append(i)
    plan = optimize_angles(units, references, conflicts, d_star, cfg, steps, bounds=bounds)
    return plan, infeasible


def hrgrad(
    G: GradientSet,
    cfg: MerConfig | None = None,
    tol: NumericTolerances | None = None,
    loss_history: tuple | None = None,
) -> AggregationResult:
    """Aggregate task gradients into the HRGrad update.

    ``loss_history`` is an optional ``(previous_losses, current_losses)`` pair
    that sets the inner iteration count adaptively.  Zero gradients are left
    out of every stage and returned untouched; a degenerate cone yields the
    zero update with ``degenerate=True``.
    """
    cfg = cfg or MerConfig()
    tol = tol or NumericTolerances()
    active = np.flatnonzero(G.active)
    if active.size == 0:
        return _zero_result(G)
    sub = G if active.size == G.m else G.subset(active)

    cone = build_cone(sub, tol)
    if cone.degenerate:
        return _zero_result(G, anchor=cone.anchor)

    if loss_history is not None:
        prev, curr = (_on_active(v, active, G.m) for v in loss_history)
        steps = adaptive_steps(prev, curr, cfg, tol.delta)
    else:
        steps = cfg.alpha_min_steps

    plan, infeasible = rotation_plan(sub, cone, cfg, tol, steps)
    rot_sub = restore_magnitudes(sub, plan)
    fair = fair_direction(rot_sub, tol)

    rotated = np.array(G.matrix, copy=True)
    rotated[:, active] = rot_sub
    angles = np.zeros(G.m)
    angles[active] = plan.angles
    conflicts = [int(active[i]) for i in plan.conflicts]
    infeasible = [int(active[i]) for i in infeasible]

    if not np.any(fair.direction):
        res = _zero_result(G, anchor=cone.anchor, conflicts=conflicts)
        res.rotated, res.angles, res.rank = rotated, angles, fair.rank
        return res

    g_u = fair.direction
    scale = float(np.sum(rot_sub.T @ g_u))
    update = scale * g_u
    unorm = np.linalg.norm(update)
    cosines = np.zeros(G.m)
    if unorm > 0:
        cosines[active] = (rot_sub.T @ update) / (sub.norms * unorm)
    return AggregationResult(
        rotated=rotated,
        fair_direction=g_u,
        s_c=fair.s_c,
        update=update,
        angles=angles,
        cosines=cosines,
        conflicts=conflicts,
        degenerate=False,
        full_rank=fair.full_rank,
        rank=fair.rank,
        mer_value=plan.mer_value,
        inner_steps=plan.steps_run,
        infeasible=infeasible,
        anchor=cone.anchor,
    )
