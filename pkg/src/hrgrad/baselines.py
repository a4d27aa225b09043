"""Reference aggregators: PCGrad, IMTL-G, ConFIG, AlignGrad, MGDA min-norm and linear scalarization."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GradientSet,
    InvalidInputError,
    NumericTolerances,
    make_rng,
    pinv_rows_times_ones,
    unit,
)


class BaselineChoice(str, enum.Enum):
    PCGRAD = "pcgrad"
    IMTLG = "imtlg"
    CONFIG = "config"
    ALIGNGRAD = "aligngrad"
    MGDA = "mgda"
    LS = "ls"


@dataclass(eq=False)
class BaselineResult:
    update: np.ndarray
    degenerate: bool = False
    info: dict = field(default_factory=dict)


def project_conflict(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``O(b, a)``: remove from ``a`` its component along ``b`` when they conflict."""
    d = float(a @ b)
    bb = float(b @ b)
    if d >= 0 or bb == 0.0:
        return a
    return a - (d / bb) * b


def pcgrad(G: GradientSet, permutation_seed: int = 0) -> BaselineResult:
    """Sum of per-task gradients after sequential conflict removal in seeded random order."""
    rng = make_rng(permutation_seed)
    m = G.m
    orders = []
    projected = np.empty_like(G.matrix)
    for i in range(m):
        others = np.array([j for j in range(m) if j != i], dtype=int)
        order = rng.permutation(others) if others.size else others
        orders.append(order.tolist())
        gi = np.array(G.matrix[:, i], copy=True)
        for j in order:
            gi = project_conflict(G.matrix[:, j], gi)
        projected[:, i] = gi
    return BaselineResult(projected.sum(axis=1), False, {"orders": orders, "projected": projected})


def imtl_g_weights(G: GradientSet) -> tuple[np.ndarray, bool]:
    """Weights making the update's projection onto every unit gradient equal.

    Returns ``(alpha, exact)``; ``exact`` is false when the linear system was
    singular and a least-squares solution was used instead.
    """
    if G.m < 2:
        raise InvalidInputError("IMTL-G needs at least two tasks")
    g = G.matrix
    u = G.directions
    U = (u[:, :1] - u[:, 1:]).T
    Dm = (g[:, :1] - g[:, 1:]).T
    A = U @ Dm.T
    b = U @ g[:, 0]
    exact = True
    try:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError
        tail = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        tail = np.linalg.lstsq(A, b, rcond=None)[0]
        exact = False
    alpha = np.concatenate([[1.0 - tail.sum()], tail])
    return alpha, exact


def imtl_g(G: GradientSet) -> BaselineResult:
    alpha, exact = imtl_g_weights(G)
    return BaselineResult(G.matrix @ alpha, not exact, {"weights": alpha, "least_squares": not exact})


def config_dir(G: GradientSet, tol: NumericTolerances | None = None) -> BaselineResult:
    """ConFIG: project the gradient sum onto the pseudoinverse equal-cosine direction of the raw unit gradients."""
    tol = tol or NumericTolerances()
    keep = G.norms > 0
    if not np.any(keep):
        raise InvalidInputError("all gradients are zero")
    M0 = G.directions[:, keep]
    res = pinv_rows_times_ones(M0, tol)
    g_u = unit(res.vector)
    update = float(np.sum(G.matrix[:, keep].T @ g_u)) * g_u
    projections = M0.T @ g_u
    s_c = 1.0 / float(np.linalg.norm(res.vector)) if res.full_column_rank else float(projections.mean())
    # near anti-parallel columns make M0^T M0 nearly singular
    sv = res.singular_values
    ill = not res.full_column_rank or (sv.size > 0 and sv[-1] < 1e-6 * sv[0])
    return BaselineResult(
        update,
        bool(ill),
        {"direction": g_u, "s_c": s_c, "rank": res.rank, "full_rank": res.full_column_rank},
    )


def alignment_score(G: GradientSet) -> float:
    """``2 ||mean_i U(g_i)||^2 - 1``; the pairwise cosine when ``m = 2``."""
    mean = G.directions[:, G.norms > 0].mean(axis=1)
    return 2.0 * float(mean @ mean) - 1.0


def aligngrad(G: GradientSet, tol: NumericTolerances | None = None) -> BaselineResult:
    tol = tol or NumericTolerances()
    keep = G.norms > 0
    if not np.any(keep):
        raise InvalidInputError("all gradients are zero")
    s = G.directions[:, keep].sum(axis=1)
    score = alignment_score(G)
    if np.linalg.norm(s) <= 1e-10 * keep.sum():
        return BaselineResult(np.zeros(G.D), True, {"score": score})
    g_u = unit(s)
    update = float(np.sum(G.matrix[:, keep].T @ g_u)) * g_u
    return BaselineResult(update, False, {"score": score, "direction": g_u})


def mgda_minnorm(G: GradientSet, max_iter: int = 256, gap_tol: float = 1e-10) -> BaselineResult:
    """Min-norm point of the convex hull of the unit gradients.

    Fully corrective Frank-Wolfe (Wolfe's min-norm-point method): each major
    step adds the vertex minimizing the linearization, then re-solves the
    affine min-norm problem over the active vertices, dropping any that leave
    the simplex.  Stops once the duality gap ``x.x - min_j u_j.x`` drops below
    ``gap_tol``.
    """
    keep = np.flatnonzero(G.norms > 0)
    if keep.size == 0:
        return BaselineResult(np.zeros(G.D), True, {"weights": np.zeros(G.m), "iterations": 0, "gap": 0.0})
    V = G.directions[:, keep]
    Q = V.T @ V
    S = [int(np.argmin(np.diag(Q)))]
    w = np.array([1.0])
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        x = V[:, S] @ w
        dots = V.T @ x
        j = int(np.argmin(dots))
        gap = float(x @ x - dots[j])
        if gap <= gap_tol or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            k = len(S)
            K = np.zeros((k + 1, k + 1))
            K[:k, :k] = Q[np.ix_(S, S)]
            K[:k, k] = K[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            lam = np.linalg.lstsq(K, rhs, rcond=None)[0][:k]
            if np.all(lam > 1e-15):
                w = lam
                break
            # move toward the affine minimizer until a weight hits zero
            neg = lam <= 1e-15
            step = float(np.min(w[neg] / (w[neg] - lam[neg])))
            w = w + step * (lam - w)
            alive = w > 1e-15
            S = [s_ for s_, a in zip(S, alive) if a]
            w = w[alive] / w[alive].sum()
    weights = np.zeros(G.m)
    weights[keep[S]] = w
    point = V[:, S] @ w
    return BaselineResult(point, bool(np.linalg.norm(point) <= 1e-12), {"weights": weights, "iterations": it, "gap": gap})


def linear_scalarization(G: GradientSet, weights=None) -> BaselineResult:
    w = np.full(G.m, 1.0) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (G.m,):
        raise InvalidInputError(f"expected {G.m} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite and nonnegative")
    return BaselineResult(G.matrix @ w, False, {"weights": w})


def run_baseline(choice, G: GradientSet, tol: NumericTolerances | None = None, seed: int = 0, weights=None) -> BaselineResult:
    choice = BaselineChoice(choice)
    if choice is BaselineChoice.PCGRAD:
        return pcgrad(G, seed)
    if choice is BaselineChoice.IMTLG:
        return imtl_g(G)
    if choice is BaselineChoice.CONFIG:
        return config_dir(G, tol)
    if choice is BaselineChoice.ALIGNGRAD:
        return aligngrad(G, tol)
    if choice is BaselineChoice.MGDA:
        return mgda_minnorm(G)
    return linear_scalarization(G, weights)
