"""Gradient matrices and the small linear-algebra kernels shared by every stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class HRGradError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(HRGradError, ValueError):
    """Malformed, non-finite or inconsistently shaped input."""


class SizeLimitError(InvalidInputError):
    """Input exceeds a cost guard (task count, ray count)."""


class DegeneracyError(HRGradError):
    """A geometric object needed downstream does not exist (zero anchor, zero matrix)."""


class ContractError(HRGradError):
    """A caller violated a documented precondition."""


@dataclass(frozen=True)
class NumericTolerances:
    delta: float = 1e-12
    cone_zero_tol: float = 1e-10
    conflict_tol: float = 1e-12
    svd_cutoff_rel: float = 1e-12

    def __post_init__(self):
        for name in ("delta", "cone_zero_tol", "conflict_tol", "svd_cutoff_rel"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidInputError(f"{name} must be strictly positive, got {value!r}")


def _as_finite(v, name="input") -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains NaN or Inf")
    return arr


def normalize(v, delta: float = 1e-12) -> np.ndarray:
    """Return ``v / (||v|| + delta)``.

    The result always has norm strictly below one for ``delta > 0`` and maps
    the zero vector to itself.
    """
    v = _as_finite(v, "vector")
    n = np.linalg.norm(v)
    out = v / (n + delta)
    if delta > 0 and n > 0:
        # n + delta rounds to n for large n; shave ulps so the bound stays strict
        while np.linalg.norm(out) >= 1.0:
            out = out * (1.0 - 2.0**-52)
    return out


def unit(v, eps: float = 0.0) -> np.ndarray:
    """Exact unit vector ``v/||v||``; vectors with norm ``<= eps`` map to zero."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n <= eps or n == 0.0:
        return np.zeros_like(v)
    return v / n


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Task gradients stored column-wise as a ``D x m`` matrix.

    ``units`` holds the delta-stabilized normalizations ``U(g_i)``;
    ``directions`` holds exact unit vectors (zero for zero columns) and is what
    the rotation and aggregation stages work with.
    """

    matrix: np.ndarray
    names: tuple[str, ...] = ()
    delta: float = 1e-12
    norms: np.ndarray = field(init=False, repr=False)
    units: np.ndarray = field(init=False, repr=False)
    directions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        G = _as_finite(self.matrix, "gradient matrix")
        if G.ndim == 1:
            G = G[:, None]
        if G.ndim != 2 or G.shape[0] < 1 or G.shape[1] < 1:
            raise InvalidInputError(f"gradient matrix must be D x m with D, m >= 1, got shape {G.shape}")
        G = G.copy()
        G.setflags(write=False)
        norms = np.linalg.norm(G, axis=0)
        units = G / (norms + self.delta)
        directions = np.divide(G, norms, out=np.zeros_like(G), where=norms > 0)
        for arr in (norms, units, directions):
            arr.setflags(write=False)
        names = tuple(self.names) if self.names else tuple(f"task{i}" for i in range(G.shape[1]))
        if len(names) != G.shape[1]:
            raise InvalidInputError(f"{len(names)} names given for {G.shape[1]} tasks")
        object.__setattr__(self, "matrix", G)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "directions", directions)

    @classmethod
    def from_columns(cls, columns: Sequence, **kwargs) -> "GradientSet":
        cols = [np.asarray(c, dtype=float).ravel() for c in columns]
        if not cols:
            raise InvalidInputError("at least one gradient is required")
        if len({c.size for c in cols}) != 1:
            raise InvalidInputError("gradients have different lengths")
        return cls(np.column_stack(cols), **kwargs)

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    @property
    def D(self) -> int:
        return self.matrix.shape[0]

    @property
    def active(self) -> np.ndarray:
        """Boolean mask of nonzero columns."""
        return self.norms > 0

    def column(self, i: int) -> np.ndarray:
        return self.matrix[:, i]

    def subset(self, idx) -> "GradientSet":
        idx = list(idx)
        return GradientSet(self.matrix[:, idx], names=tuple(self.names[i] for i in idx), delta=self.delta)

    def to_dict(self) -> dict:
        return {
            "dim": self.D,
            "tasks": self.m,
            "gradients": self.matrix.T.tolist(),
            "names": list(self.names),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict, delta: float = 1e-12) -> "GradientSet":
        if not isinstance(data, dict):
            raise InvalidInputError("GradientSet document must be a JSON object")
        unknown = set(data) - {"dim", "tasks", "gradients", "names"}
        if unknown:
            raise InvalidInputError(f"unknown keys: {sorted(unknown)}")
        rows = data.get("gradients")
        if not isinstance(rows, list) or not rows:
            raise InvalidInputError("'gradients' must be a non-empty list of rows")
        if any(not isinstance(r, list) for r in rows):
            raise InvalidInputError("every gradient row must be a list of floats")
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise InvalidInputError(f"ragged gradient rows (lengths {sorted(lengths)})")
        try:
            arr = np.array(rows, dtype=float)
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"non-numeric gradient entry: {exc}") from None
        D, m = arr.shape[1], arr.shape[0]
        if "dim" in data and data["dim"] != D:
            raise InvalidInputError(f"'dim'={data['dim']} but rows have length {D}")
        if "tasks" in data and data["tasks"] != m:
            raise InvalidInputError(f"'tasks'={data['tasks']} but {m} rows given")
        names = data.get("names") or ()
        if names and (not isinstance(names, list) or len(names) != m):
            raise InvalidInputError("'names' must list one name per task")
        return cls(arr.T, names=tuple(str(n) for n in names), delta=delta)

    @classmethod
    def from_json(cls, text: str, delta: float = 1e-12) -> "GradientSet":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data, delta=delta)


def gram(G: GradientSet | np.ndarray) -> np.ndarray:
    """Gram matrix ``G^T G``, symmetrized."""
    M = G.matrix if isinstance(G, GradientSet) else _as_finite(G, "matrix")
    A = M.T @ M
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class PinvOnes:
    """``(M^+)^T 1`` together with the numerical rank used to form it."""

    vector: np.ndarray
    rank: int
    singular_values: np.ndarray
    columns: int

    @property
    def degenerate(self) -> bool:
        return self.rank == 0

    @property
    def full_column_rank(self) -> bool:
        return self.rank == self.columns and self.rank > 0


def pinv_rows_times_ones(M, tol: NumericTolerances | None = None) -> PinvOnes:
    """Compute ``(M^+)^T 1_m`` through a thin SVD.

    With ``M = U S V^T`` this equals ``U S^+ V^T 1``.  Singular values below
    ``svd_cutoff_rel * sigma_max`` are dropped.
    """
    tol = tol or NumericTolerances()
    M = _as_finite(M, "matrix")
    if M.ndim == 1:
        M = M[:, None]
    D, m = M.shape
    if not np.any(M):
        return PinvOnes(np.zeros(D), 0, np.zeros(min(D, m)), m)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > tol.svd_cutoff_rel * s[0]
    coeff = (Vt[keep] @ np.ones(m)) / s[keep]
    return PinvOnes(U[:, keep] @ coeff, int(keep.sum()), s, m)


def pseudoinverse_rows_times_ones(M, tol: NumericTolerances | None = None) -> np.ndarray:
    return pinv_rows_times_ones(M, tol).vector


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for consumer ``key`` under a master ``seed``.

    Streams are derived with ``SeedSequence`` spawn keys, so adding a new
    consumer never shifts the draws of existing ones.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))
