"""Randomized checks of the operator's geometric identities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationResult, hrgrad
from .core import GradientSet, NumericTolerances, make_rng
from .rotation import MerConfig

# per-identity tolerances
ISOMETRY_TOL = 1e-10
NONCONFLICT_TOL = 1e-9
EQUAL_COSINE_TOL = 1e-8
PRODUCT_TOL = 1e-8
COMPAT_TOL = 1e-10
PROXY_SLACK = 1e-9


def random_gradient_set(
    rng: np.random.Generator,
    m_range=(2, 6),
    d_range=(4, 64),
    norm_range=(1e-6, 1e3),
) -> GradientSet:
    """Directions uniform on the sphere, norms log-uniform in ``norm_range``."""
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    D = int(rng.integers(d_range[0], d_range[1] + 1))
    dirs = rng.standard_normal((D, m))
    dirs /= np.linalg.norm(dirs, axis=0)
    norms = np.exp(rng.uniform(math.log(norm_range[0]), math.log(norm_range[1]), size=m))
    return GradientSet(dirs * norms)


def check_invariants(G: GradientSet, res: AggregationResult) -> dict[str, float]:
    """Return the worst error of every identity that fails; empty when all hold."""
    bad: dict[str, float] = {}
    keep = G.norms > 0
    n = G.norms[keep]
    rot = res.rotated[:, keep]

    iso = float(np.max(np.abs(np.linalg.norm(rot, axis=0) - n) / n))
    if iso > ISOMETRY_TOL:
        bad["isometry"] = iso

    compat = float(np.max(np.abs(np.einsum("ij,ij->j", G.matrix[:, keep], rot) - n * n * np.cos(res.angles[keep])) / (n * n)))
    if compat > COMPAT_TOL:
        bad["compatibility"] = compat

    alpha_max = float(res.angles.max()) if res.angles.size else 0.0
    drift = float(np.linalg.norm(res.rotated.sum(axis=1) - G.matrix.sum(axis=1)))
    allowed = 2 * math.sin(alpha_max / 2) * float(G.norms[res.conflicts].sum()) + PROXY_SLACK
    if drift > allowed:
        bad["proxy"] = drift - allowed

    u = res.update
    un = float(np.linalg.norm(u))
    if un == 0.0:
        return bad
    worst = float(np.min((rot.T @ u) / (n * un)))
    if worst < -NONCONFLICT_TOL:
        bad["nonconflict"] = worst
    if res.full_rank:
        eq = float(np.max(np.abs(res.cosines[keep] - res.s_c)))
        if eq > EQUAL_COSINE_TOL:
            bad["equal_cosine"] = eq
    prod = abs(float(rot.sum(axis=1) @ u) - un * un) / (un * un)
    if prod > PRODUCT_TOL:
        bad["aggregate_product"] = prod
    return bad


@dataclass
class FuzzReport:
    iterations: int
    seed: int
    violations: list[dict] = field(default_factory=list)
    full_rank_cases: int = 0
    degenerate_cases: int = 0
    conflict_cases: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations


def run_fuzz(
    iterations: int,
    seed: int = 0,
    cfg: MerConfig | None = None,
    tol: NumericTolerances | None = None,
) -> FuzzReport:
    """Check the identities on ``iterations`` random gradient sets; case ``k`` uses stream ``(seed, k)``."""
    report = FuzzReport(int(iterations), int(seed))
    for k in range(int(iterations)):
        G = random_gradient_set(make_rng(seed, k))
        res = hrgrad(G, cfg, tol)
        report.full_rank_cases += int(res.full_rank)
        report.degenerate_cases += int(res.degenerate)
        report.conflict_cases += int(res.conflict_count > 0)
        bad = check_invariants(G, res)
        if bad:
            report.violations.append({"case": k, "errors": bad, "gradients": G.to_dict()})
    return report
