"""Signal-free intersection scenarios: geometry, sampling, and safety metrics.

Vehicles follow fixed straight paths through a square conflict region.  Each
vehicle's dynamic state is its signed arc-length coordinate along the path
(zero at the point closest to the intersection center, negative upstream)
plus its speed, so the stacked team state is (arc_1, speed_1, ..., arc_V,
speed_V).  Planar positions are reconstructed from the paths for distance
and collision computations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .costs import CollisionSpec, CostSpec
from .dynamics import LinearSystem, StateSpace, assemble_team_system, discretize_double_integrator

__all__ = [
    "StraightPath",
    "VehicleSpec",
    "Scenario",
    "ScenarioConfig",
    "NonConflictingPathsWarning",
    "build_intersection",
    "sample_initial_states",
    "positions_from_states",
    "pairwise_distances",
    "min_pairwise_distance",
]


class NonConflictingPathsWarning(UserWarning):
    """No pair of vehicle paths crosses inside the conflict region."""


@dataclass
class StraightPath:
    """Directed straight line; point(arc) = origin + arc * direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=float).ravel()
        d = np.asarray(self.direction, dtype=float).ravel()
        nrm = np.linalg.norm(d)
        if nrm == 0:
            raise ValueError("direction must be nonzero")
        self.direction = d / nrm

    def point(self, arc) -> np.ndarray:
        arc = np.asarray(arc, dtype=float)
        return self.origin + arc[..., None] * self.direction


@dataclass
class VehicleSpec:
    role: str  # "CAV" | "HDV"
    path: StraightPath
    entry_offset: float
    desired_speed: float
    position_jitter: float
    speed_range: Tuple[float, float]

    def __post_init__(self) -> None:
        if self.role not in ("CAV", "HDV"):
            raise ValueError("role must be CAV or HDV")
        if not self.entry_offset > 0:
            raise ValueError("entry_offset must be > 0")


@dataclass
class Scenario:
    """Intersection instance: vehicle list, conflict geometry, sampling boxes."""

    vehicles: list
    intersection_length: float
    safety_distance: float
    softening: float
    dt: float

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_vehicles

    @property
    def arc_indices(self) -> np.ndarray:
        return np.arange(0, self.state_dim, 2)

    @property
    def speed_indices(self) -> np.ndarray:
        return np.arange(1, self.state_dim, 2)

    @property
    def cav_indices(self) -> list:
        return [i for i, v in enumerate(self.vehicles) if v.role == "CAV"]

    @property
    def hdv_indices(self) -> list:
        return [i for i, v in enumerate(self.vehicles) if v.role == "HDV"]

    def conflict_pairs(self) -> list:
        """Vehicle pairs whose paths cross inside the conflict region."""
        half = 0.5 * self.intersection_length
        pairs = []
        for i in range(self.n_vehicles):
            for j in range(i + 1, self.n_vehicles):
                p = _line_intersection(self.vehicles[i].path, self.vehicles[j].path)
                if p is not None and np.all(np.abs(p) <= half + 1e-9):
                    pairs.append((i, j))
        return pairs

    def path_arrays(self):
        """Stacked (V, 2) path origins and directions, cached."""
        arrs = getattr(self, "_path_arrays", None)
        if arrs is None:
            origins = np.array([v.path.origin for v in self.vehicles])
            dirs = np.array([v.path.direction for v in self.vehicles])
            arrs = (origins, dirs)
            self._path_arrays = arrs
        return arrs

    def min_distance(self, state) -> float:
        _, d = pairwise_distances(np.asarray(state, dtype=float), self)
        return float(d.min()) if d.size else float("inf")


def _line_intersection(a: StraightPath, b: StraightPath) -> Optional[np.ndarray]:
    cross = a.direction[0] * b.direction[1] - a.direction[1] * b.direction[0]
    if abs(cross) < 1e-12:
        return None
    rhs = b.origin - a.origin
    s = (rhs[0] * b.direction[1] - rhs[1] * b.direction[0]) / cross
    return a.point(np.asarray(s))


@dataclass
class ScenarioConfig:
    """Construction parameters for an intersection scenario.

    Entry offsets, desired speeds, sampling boxes, and cost weights are
    configuration values; only the intersection length and the time step are
    pinned by the reference setup (10 m, 0.1 s).
    """

    n_cav: int = 2
    n_hdv: int = 0
    horizon: int = 50
    dt: float = 0.1
    intersection_length: float = 10.0
    lane_offset: float = 1.75
    entry_offsets: Optional[Sequence[float]] = None
    desired_speeds: Optional[Sequence[float]] = None
    position_jitter: float = 2.0
    speed_range: Tuple[float, float] = (8.0, 12.0)
    safety_distance: float = 2.0
    softening: float = 0.1
    state_weight: float = 1.0e-4
    speed_weight: float = 1.0
    control_weight: float = 0.1
    terminal_state_weight: float = 1.0e-4
    hdv_gain: float = 0.6

    @property
    def n_vehicles(self) -> int:
        return self.n_cav + self.n_hdv


def _road_cycle(lane_offset: float) -> list:
    # west->east, south->north, east->west, north->south; opposite directions
    # run on laterally offset lanes so only crossing movements conflict.
    return [
        StraightPath(origin=(0.0, -lane_offset), direction=(1.0, 0.0)),
        StraightPath(origin=(lane_offset, 0.0), direction=(0.0, 1.0)),
        StraightPath(origin=(0.0, lane_offset), direction=(-1.0, 0.0)),
        StraightPath(origin=(-lane_offset, 0.0), direction=(0.0, -1.0)),
    ]


def _make_penalties(scenario: Scenario, speed_weight: float, desired_speeds: np.ndarray):
    """Stage and terminal penalties with the zero-state offset removed.

    The stage penalty combines the pairwise proximity cost with a speed
    tracking term sum_v w * ((v - v_des)^2 - v_des^2); both are shifted by
    constants so the penalty vanishes exactly at the zero state, which keeps
    the cost contract intact without affecting minimizers.
    """
    spec = CollisionSpec(
        safety_distance=scenario.safety_distance,
        softening=scenario.softening,
        position_extractor=lambda x: positions_from_states(x, scenario),
    )
    v_idx = scenario.speed_indices
    vdes = np.asarray(desired_speeds, dtype=float)
    phi0 = float(spec.penalty_of_state(np.zeros(scenario.state_dim)))

    def psi(x):
        x = np.asarray(x, dtype=float)
        v = x[..., v_idx]
        track = speed_weight * np.sum((v - vdes) ** 2 - vdes**2, axis=-1)
        return track + spec.penalty_of_state(x) - phi0

    def psi_F(x):
        return spec.penalty_of_state(np.asarray(x, dtype=float)) - phi0

    return psi, psi_F


def build_intersection(cfg: ScenarioConfig):
    """Assemble an intersection scenario with its dynamics and cost.

    Returns (scenario, learner_system, plant_system, cost_spec).  The learner
    system is the naive block-diagonal model whose inputs are the CAV
    accelerations; the plant additionally contains each HDV's hidden speed
    reaction to the surrounding CAV traffic, so the plant stays exactly
    linear while the coupling is unknown to the learner.
    """
    if cfg.n_cav < 1:
        raise ValueError("need at least one CAV")
    V = cfg.n_vehicles
    roads = _road_cycle(cfg.lane_offset)
    if V > len(roads):
        raise ValueError(f"at most {len(roads)} vehicles supported")
    offsets = list(cfg.entry_offsets) if cfg.entry_offsets is not None else [20.0] * V
    speeds = list(cfg.desired_speeds) if cfg.desired_speeds is not None else [10.0] * V
    if len(offsets) != V or len(speeds) != V:
        raise ValueError("entry_offsets and desired_speeds must have one entry per vehicle")
    half = 0.5 * cfg.intersection_length
    vehicles = []
    for i in range(V):
        role = "CAV" if i < cfg.n_cav else "HDV"
        if offsets[i] - cfg.position_jitter <= half:
            raise ValueError(
                f"vehicle {i} can start inside the conflict region: "
                f"entry offset {offsets[i]} minus jitter {cfg.position_jitter} "
                f"does not clear half-length {half}"
            )
        vehicles.append(
            VehicleSpec(
                role=role,
                path=roads[i],
                entry_offset=float(offsets[i]),
                desired_speed=float(speeds[i]),
                position_jitter=cfg.position_jitter,
                speed_range=tuple(cfg.speed_range),
            )
        )
    scenario = Scenario(
        vehicles=vehicles,
        intersection_length=cfg.intersection_length,
        safety_distance=cfg.safety_distance,
        softening=cfg.softening,
        dt=cfg.dt,
    )
    if V >= 2 and not scenario.conflict_pairs():
        warnings.warn(
            "no pair of vehicle paths crosses inside the conflict region",
            NonConflictingPathsWarning,
            stacklevel=2,
        )

    base = discretize_double_integrator(cfg.dt)
    learner = _assemble_with_inputs(base, scenario)
    plant = _assemble_with_inputs(base, scenario)
    k = cfg.hdv_gain * cfg.dt
    cavs = scenario.cav_indices
    for h in scenario.hdv_indices:
        vh = 2 * h + 1
        plant.A[vh, vh] = 1.0 - k
        for c in cavs:
            plant.A[vh, 2 * c + 1] += k / len(cavs)

    n = scenario.state_dim
    Q = cfg.state_weight * np.eye(n)
    Q_F = cfg.terminal_state_weight * np.eye(n)
    R = cfg.control_weight * np.eye(learner.m)
    psi, psi_F = _make_penalties(scenario, cfg.speed_weight, speeds)
    cost = CostSpec(Q=Q, R=R, Q_F=Q_F, psi=psi, psi_F=psi_F)
    return scenario, learner, plant, cost


def _assemble_with_inputs(base: StateSpace, scenario: Scenario) -> LinearSystem:
    """Stack per-vehicle kinematics; only CAVs contribute input columns."""
    subsystems = []
    for v in scenario.vehicles:
        if v.role == "CAV":
            subsystems.append(StateSpace(base.A.copy(), base.B.copy()))
        else:
            subsystems.append(StateSpace(base.A.copy(), np.zeros((2, 0))))
    return assemble_team_system(subsystems)


def sample_initial_states(scenario: Scenario, rng: np.random.Generator, N: int) -> np.ndarray:
    """Draw N stacked initial states from the per-vehicle uniform boxes."""
    if N < 1:
        raise ValueError("need N >= 1")
    X = np.empty((N, scenario.state_dim))
    for i, v in enumerate(scenario.vehicles):
        lo_p = -v.entry_offset - v.position_jitter
        hi_p = -v.entry_offset + v.position_jitter
        X[:, 2 * i] = rng.uniform(lo_p, hi_p, size=N)
        X[:, 2 * i + 1] = rng.uniform(v.speed_range[0], v.speed_range[1], size=N)
    return X


def positions_from_states(states, scenario: Scenario) -> np.ndarray:
    """Reconstruct planar vehicle positions, shape (..., V, 2), from stacked states."""
    x = np.asarray(states, dtype=float)
    arcs = x[..., 0::2]
    origins, dirs = scenario.path_arrays()
    return origins + arcs[..., None] * dirs


def pairwise_distances(trajectory, scenario: Scenario):
    """Euclidean distances of reconstructed positions for all vehicle pairs.

    trajectory is any array of stacked states with the state on the last axis
    (a single state, a (T, n) trajectory, or a (N, T, n) batch); a
    TrajectoryBatch may be passed directly.  Returns (pairs, values) where
    values has the pair axis last.
    """
    if hasattr(trajectory, "states"):
        trajectory = trajectory.states
    pos = positions_from_states(trajectory, scenario)
    V = scenario.n_vehicles
    iu, ju = np.triu_indices(V, k=1)
    pairs = list(zip(iu.tolist(), ju.tolist()))
    diff = pos[..., iu, :] - pos[..., ju, :]
    values = np.sqrt(np.sum(diff * diff, axis=-1))
    return pairs, values


def min_pairwise_distance(trajectory, scenario: Scenario) -> float:
    """Minimum pairwise distance over all times and pairs; inf for one vehicle."""
    _, values = pairwise_distances(trajectory, scenario)
    return float(values.min()) if values.size else float("inf")
