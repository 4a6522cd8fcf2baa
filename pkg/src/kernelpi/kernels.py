"""Kernels, Gram matrices, and kernel-expanded feedback policies.

A feedback policy is stored stage by stage as a dictionary of anchor states
together with a coefficient matrix.  Evaluating the policy at a state x sums
the coefficient rows weighted by the kernel values k(x, anchor_j), so the
policy output is linear in the coefficients for a fixed evaluation point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "KernelSpec",
    "Dictionary",
    "StagePolicy",
    "KernelPolicy",
    "GramPair",
    "GramSingularityWarning",
    "eval_kernel",
    "kernel_matrix",
    "gram_matrix",
    "cross_gram",
    "eval_policy",
    "eval_policy_batch",
    "median_length_scale",
]

_FAMILIES = ("gaussian-rbf", "linear", "polynomial")


class GramSingularityWarning(UserWarning):
    """Raised as a warning when a Gram matrix is structurally singular."""


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric positive-definite kernel on state space.

    length_scale applies to the gaussian-rbf family only; degree and offset
    apply to the polynomial family only.
    """

    family: str = "gaussian-rbf"
    length_scale: float = 1.0
    degree: int = 2
    offset: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {_FAMILIES}")
        if self.family == "gaussian-rbf" and not self.length_scale > 0:
            raise ValueError("length_scale must be > 0 for the gaussian-rbf kernel")
        if self.family == "polynomial" and int(self.degree) < 1:
            raise ValueError("polynomial degree must be a positive integer")


def _as_points(arr, name: str) -> np.ndarray:
    pts = np.asarray(arr, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2:
        raise ValueError(f"{name} must be a vector or a 2-d array of row vectors")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite entries")
    return pts


def kernel_matrix(spec: KernelSpec, X, Y) -> np.ndarray:
    """Pairwise kernel evaluations: entry (i, j) is k(X[i], Y[j])."""
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.family == "gaussian-rbf":
        sq = (
            np.sum(X * X, axis=1)[:, None]
            + np.sum(Y * Y, axis=1)[None, :]
            - 2.0 * (X @ Y.T)
        )
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * spec.length_scale**2))
    if spec.family == "linear":
        return X @ Y.T
    return (X @ Y.T + spec.offset) ** spec.degree


def eval_kernel(spec: KernelSpec, x, y) -> float:
    """Evaluate k(x, y) for a single pair of state vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])


@dataclass
class Dictionary:
    """Ordered anchor states for one stage of a kernel policy."""

    points: np.ndarray
    stage: int = 0

    def __post_init__(self) -> None:
        self.points = _as_points(self.points, "dictionary points")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def has_duplicates(self) -> bool:
        return np.unique(self.points, axis=0).shape[0] < self.size


def gram_matrix(spec: KernelSpec, dictionary: Dictionary, ridge: float = 0.0) -> np.ndarray:
    """Gram matrix over the dictionary points, optionally ridge-shifted.

    With ridge == 0 and duplicated points the result is singular; a
    GramSingularityWarning is emitted so the caller can decide.
    """
    if dictionary.size == 0:
        raise ValueError("dictionary must be non-empty")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    K = kernel_matrix(spec, dictionary.points, dictionary.points)
    K = 0.5 * (K + K.T)
    if ridge > 0:
        K = K + ridge * np.eye(dictionary.size)
    elif dictionary.has_duplicates():
        warnings.warn(
            "duplicate dictionary points with ridge=0 produce a singular Gram matrix",
            GramSingularityWarning,
            stacklevel=2,
        )
    return K


def cross_gram(spec: KernelSpec, samples, dictionary: Dictionary) -> np.ndarray:
    """Kernel evaluations between sample states (rows) and dictionary points (columns)."""
    samples = _as_points(samples, "samples")
    if samples.shape[0] == 0:
        raise ValueError("samples must be non-empty")
    return kernel_matrix(spec, samples, dictionary.points)


@dataclass
class GramPair:
    """Gram matrix over a stage dictionary plus the sample/dictionary cross matrix."""

    gram: np.ndarray
    cross: np.ndarray

    def __post_init__(self) -> None:
        self.gram = np.asarray(self.gram, dtype=float)
        self.cross = np.asarray(self.cross, dtype=float)
        if self.gram.shape[0] != self.gram.shape[1]:
            raise ValueError("gram must be square")
        if self.cross.shape[1] != self.gram.shape[0]:
            raise ValueError("cross column count must equal the dictionary size")


def _zero_coefficients(m: int) -> np.ndarray:
    return np.zeros((0, m))


@dataclass
class StagePolicy:
    """One stage of a kernel policy: anchors plus an (M, m) coefficient matrix.

    A stage with dictionary=None evaluates to zero control; its coefficient
    matrix has zero rows and records only the control dimension.
    """

    dictionary: Optional[Dictionary]
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.ndim != 2:
            raise ValueError("coefficients must be a 2-d (anchors x inputs) matrix")
        if self.dictionary is not None and self.coefficients.shape[0] != self.dictionary.size:
            raise ValueError(
                f"coefficient rows ({self.coefficients.shape[0]}) must match "
                f"dictionary size ({self.dictionary.size})"
            )

    @property
    def input_dim(self) -> int:
        return self.coefficients.shape[1]

    @classmethod
    def zero(cls, m: int, dictionary: Optional[Dictionary] = None) -> "StagePolicy":
        if dictionary is None:
            return cls(None, _zero_coefficients(m))
        return cls(dictionary, np.zeros((dictionary.size, m)))


@dataclass
class KernelPolicy:
    """Stage-indexed kernel policy over a finite horizon."""

    kernel: KernelSpec
    stages: list

    @property
    def horizon(self) -> int:
        return len(self.stages)

    @property
    def input_dim(self) -> int:
        return self.stages[0].input_dim

    def copy(self) -> "KernelPolicy":
        return KernelPolicy(
            self.kernel,
            [StagePolicy(st.dictionary, st.coefficients.copy()) for st in self.stages],
        )


def _check_stage(policy: KernelPolicy, t: int) -> StagePolicy:
    if not 0 <= t < policy.horizon:
        raise ValueError(f"stage {t} out of range for horizon {policy.horizon}")
    return policy.stages[t]


def eval_policy_batch(policy: KernelPolicy, t: int, states) -> np.ndarray:
    """Evaluate the stage-t policy at a batch of states, returning (N, m) controls."""
    stage = _check_stage(policy, t)
    states = _as_points(states, "states")
    if stage.dictionary is None:
        return np.zeros((states.shape[0], stage.input_dim))
    K = cross_gram(policy.kernel, states, stage.dictionary)
    return K @ stage.coefficients


def eval_policy(policy: KernelPolicy, t: int, x) -> np.ndarray:
    """Evaluate the stage-t policy at a single state, returning an m-vector."""
    x = np.asarray(x, dtype=float).ravel()
    return eval_policy_batch(policy, t, x[None, :])[0]


def median_length_scale(points) -> float:
    """Median pairwise distance of a point batch; falls back to 1.0 when degenerate."""
    pts = _as_points(points, "points")
    if pts.shape[0] < 2:
        return 1.0
    diffs = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.sum(diffs * diffs, axis=-1))
    iu = np.triu_indices(pts.shape[0], k=1)
    vals = d[iu]
    vals = vals[vals > 0]
    if vals.size == 0:
        return 1.0
    return float(np.median(vals))
