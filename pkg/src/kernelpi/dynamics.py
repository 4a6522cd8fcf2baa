"""Stacked discrete-time team dynamics and batched trajectory rollouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .kernels import KernelPolicy, eval_policy_batch

__all__ = [
    "StateSpace",
    "LinearSystem",
    "TrajectoryBatch",
    "DivergenceError",
    "STATE_GUARD",
    "discretize_double_integrator",
    "assemble_team_system",
    "step",
    "rollout",
]

# Any state whose norm exceeds this aborts a rollout as divergent.
STATE_GUARD = 1.0e6


class DivergenceError(RuntimeError):
    """A trajectory left the finite / bounded region during simulation."""

    def __init__(self, message: str, sample_index: Optional[int] = None, stage: Optional[int] = None):
        super().__init__(message)
        self.sample_index = sample_index
        self.stage = stage


@dataclass
class StateSpace:
    """Per-member discrete-time state-space pair (A_i, B_i)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B row count must match A")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all()):
            raise ValueError("state-space matrices must be finite")


@dataclass
class LinearSystem:
    """Stacked team system x+ = A x + B u with per-member input widths."""

    A: np.ndarray
    B: np.ndarray
    input_blocks: tuple

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.input_blocks = tuple(int(b) for b in self.input_blocks)
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B row count must match A")
        if sum(self.input_blocks) != self.B.shape[1]:
            raise ValueError(
                f"input block widths {self.input_blocks} must sum to B columns ({self.B.shape[1]})"
            )
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all()):
            raise ValueError("system matrices must be finite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def discretize_double_integrator(dt: float) -> StateSpace:
    """Exact zero-order-hold discretization of p' = v, v' = u on state (p, v).

    p+ = p + v dt + u dt^2/2 and v+ = v + u dt; exact for piecewise-constant u.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    return StateSpace(A, B)


def assemble_team_system(subsystems: Sequence[StateSpace]) -> LinearSystem:
    """Block-diagonal stacking of member systems with concatenated input columns."""
    if len(subsystems) == 0:
        raise ValueError("need at least one subsystem")
    n = sum(s.A.shape[0] for s in subsystems)
    m = sum(s.B.shape[1] for s in subsystems)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    blocks = []
    r = c = 0
    for s in subsystems:
        k, mi = s.B.shape
        A[r : r + k, r : r + k] = s.A
        B[r : r + k, c : c + mi] = s.B
        blocks.append(mi)
        r += k
        c += mi
    return LinearSystem(A, B, tuple(blocks))


def step(sys: LinearSystem, x, u) -> np.ndarray:
    """One transition x+ = A x + B u with shape and finiteness checks."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.shape[0] != sys.n:
        raise ValueError(f"state has dimension {x.shape[0]}, expected {sys.n}")
    if u.shape[0] != sys.m:
        raise ValueError(f"control has dimension {u.shape[0]}, expected {sys.m}")
    nxt = sys.A @ x + sys.B @ u
    if not np.isfinite(nxt).all():
        raise DivergenceError("non-finite state after step")
    return nxt


@dataclass
class TrajectoryBatch:
    """Monte Carlo ensemble of state and control trajectories."""

    states: np.ndarray  # (N, T+1, n)
    controls: np.ndarray  # (N, T, m)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 3 or self.controls.ndim != 3:
            raise ValueError("states and controls must be 3-d arrays")
        if self.states.shape[0] != self.controls.shape[0]:
            raise ValueError("sample counts disagree")
        if self.states.shape[1] != self.controls.shape[1] + 1:
            raise ValueError("states must cover one more step than controls")

    @property
    def sample_count(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.controls.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def input_dim(self) -> int:
        return self.controls.shape[2]


PolicyLike = Union[KernelPolicy, Callable[[int, np.ndarray], np.ndarray], None]


def _policy_fn(policy: PolicyLike, m: int):
    if policy is None:
        return lambda t, X: np.zeros((X.shape[0], m))
    if isinstance(policy, KernelPolicy):
        return lambda t, X: eval_policy_batch(policy, t, X)
    return policy


def _check_batch_finite(X: np.ndarray, t: int, guard: float) -> None:
    bad = ~np.isfinite(X).all(axis=1)
    bad |= np.linalg.norm(X, axis=1) > guard
    if bad.any():
        i = int(np.argmax(bad))
        raise DivergenceError(
            f"trajectory diverged at sample {i}, stage {t}", sample_index=i, stage=t
        )


def rollout(
    sys: LinearSystem,
    policy: PolicyLike,
    x0_batch,
    horizon: Optional[int] = None,
    state_guard: float = STATE_GUARD,
) -> TrajectoryBatch:
    """Simulate all samples forward under the policy, storing states and controls.

    policy may be a KernelPolicy, a callable (t, states (N, n)) -> (N, m), or
    None for zero control.  A non-finite or guard-exceeding state aborts with a
    DivergenceError naming the first offending sample and stage.
    """
    X0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if X0.shape[1] != sys.n:
        raise ValueError(f"initial states have dimension {X0.shape[1]}, expected {sys.n}")
    if isinstance(policy, KernelPolicy):
        T = policy.horizon if horizon is None else horizon
        if T > policy.horizon:
            raise ValueError("horizon exceeds policy length")
    else:
        if horizon is None:
            raise ValueError("horizon is required for callable or zero policies")
        T = horizon
    N = X0.shape[0]
    fn = _policy_fn(policy, sys.m)
    states = np.empty((N, T + 1, sys.n))
    controls = np.empty((N, T, sys.m))
    states[:, 0] = X0
    X = X0
    for t in range(T):
        _check_batch_finite(X, t, state_guard)
        U = np.asarray(fn(t, X), dtype=float)
        controls[:, t] = U
        X = X @ sys.A.T + U @ sys.B.T
        states[:, t + 1] = X
    _check_batch_finite(X, T, state_guard)
    return TrajectoryBatch(states, controls)
