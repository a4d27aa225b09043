"""Extreme rays of the harmonized cone and the physical anchor direction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    GradientSet,
    InvalidInputError,
    NumericTolerances,
    SizeLimitError,
    gram,
    normalize,
)

MAX_TASKS = 16
MAX_RAYS = 512


@dataclass(frozen=True, eq=False)
class HarmonizedCone:
    weight_rays: np.ndarray  # p x m, unit rows
    physical_rays: np.ndarray  # p x D
    anchor: np.ndarray
    degenerate: bool
    kept: np.ndarray  # mask of physical rays used in the centroid

    @property
    def p(self) -> int:
        return self.weight_rays.shape[0]


def _is_subset(a: int, b: int) -> bool:
    return a & ~b == 0


def extreme_rays(A, tol: NumericTolerances | None = None) -> np.ndarray:
    """Extreme rays of ``{lam >= 0 : A lam >= 0}`` by the double description method.

    Starts from the nonnegative orthant (generated by the standard basis) and
    intersects it with the halfspaces ``A[i] . lam >= 0`` one row at a time.
    Zero sets are tracked as bitmasks over the constraints processed so far;
    a (positive, negative) pair is combined only when no third ray's zero set
    contains their common zero set.  Returns a ``p x m`` array of unit rows.
    """
    tol = tol or NumericTolerances()
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("matrix contains NaN or Inf")
    m = A.shape[0]
    if m > MAX_TASKS:
        raise SizeLimitError(f"double description limited to m <= {MAX_TASKS}, got {m}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * scale):
        raise InvalidInputError("matrix is not symmetric")

    rays = [np.eye(m)[k] for k in range(m)]
    full = (1 << m) - 1
    zsets = [full & ~(1 << k) for k in range(m)]

    for i in range(m):
        a = A[i]
        bit = 1 << (m + i)
        anorm = np.linalg.norm(a)
        if anorm == 0.0:
            zsets = [z | bit for z in zsets]
            continue
        R = np.array(rays)
        vals = R @ a
        thr = tol.cone_zero_tol * anorm
        pos = [k for k in range(len(rays)) if vals[k] > thr]
        neg = [k for k in range(len(rays)) if vals[k] < -thr]
        if not neg:
            zsets = [z | bit if abs(vals[k]) <= thr else z for k, z in enumerate(zsets)]
            continue

        new_rays, new_z = [], []
        for k in range(len(rays)):
            if vals[k] > thr:
                new_rays.append(rays[k])
                new_z.append(zsets[k])
            elif vals[k] >= -thr:
                new_rays.append(rays[k])
                new_z.append(zsets[k] | bit)
        for p in pos:
            for n in neg:
                common = zsets[p] & zsets[n]
                if any(
                    _is_subset(common, zsets[k]) for k in range(len(rays)) if k != p and k != n
                ):
                    continue
                r = vals[p] * rays[n] - vals[n] * rays[p]
                r = r / np.linalg.norm(r)
                new_rays.append(r)
                new_z.append(common | bit)
                if len(new_rays) > MAX_RAYS:
                    raise SizeLimitError(f"more than {MAX_RAYS} extreme rays")
        rays, zsets = new_rays, new_z
        if not rays:
            break

    if not rays:
        return np.zeros((0, m))
    out = np.array(rays)
    out = np.where(np.abs(out) < 1e-300, 0.0, out)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    order = sorted(range(len(out)), key=lambda k: tuple(-out[k]))
    return out[order]


def build_cone(G: GradientSet, tol: NumericTolerances | None = None) -> HarmonizedCone:
    """Weight-space rays, their images ``r_j = G pi_j`` and the anchor ``d*``.

    ``d* = U(sum_j U(r_j))`` over physical rays whose norm exceeds
    ``cone_zero_tol * max_i ||g_i||``.  If none survive the cone is flagged
    degenerate and the anchor is the zero vector.
    """
    tol = tol or NumericTolerances()
    if not np.any(G.norms > 0):
        raise InvalidInputError("all gradients are zero")
    Pi = extreme_rays(gram(G), tol)
    R = Pi @ G.matrix.T if Pi.size else np.zeros((0, G.D))
    rnorms = np.linalg.norm(R, axis=1)
    kept = rnorms > tol.cone_zero_tol * float(G.norms.max())
    if not np.any(kept):
        return HarmonizedCone(Pi, R, np.zeros(G.D), True, kept)
    total = np.zeros(G.D)
    for j in np.flatnonzero(kept):
        total += normalize(R[j], tol.delta)
    anchor = normalize(total, tol.delta)
    return HarmonizedCone(Pi, R, anchor, False, kept)
