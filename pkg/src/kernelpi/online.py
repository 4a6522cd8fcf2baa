"""Model-free control loop: excitation and identification, then receding-horizon planning.

The loop runs in two strictly sequential phases.  During the first
ident_steps real steps a zero base control plus Gaussian excitation is
applied and the parameter estimate is updated recursively from the observed
transitions.  Afterwards the estimate is frozen and every real step plans a
short window on the identified model from the single observed state, applies
only the first control of the candidate sequence, and shifts the candidate
one stage forward as the next warm start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import CostSpec
from .dynamics import DivergenceError, LinearSystem, rollout, step as dyn_step
from .kernels import Dictionary, KernelPolicy, KernelSpec, StagePolicy, eval_policy
from .offline import PolicyIterationDiverged, SolverConfig, run_policy_iteration
from .rls import PeWindow, pe_check, rls_init, rls_update, estimate
from .seeding import substreams

__all__ = [
    "OnlineConfig",
    "OnlineStepRecord",
    "OnlineLog",
    "WindowResult",
    "LinearPlant",
    "excitation_input",
    "plan_window",
    "shift_warm_start",
    "run_online",
]


@dataclass
class OnlineConfig:
    """Settings for the online loop.

    gamma is carried for interface compatibility but drives no behavior.
    """

    horizon: int = 50
    window: int = 4
    ident_steps: int = 40
    sigma_excitation: float = 1.5
    gamma: float = 0.9
    m0_scale: float = 1.0e5
    forgetting: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.window <= self.horizon:
            raise ValueError("window must satisfy 1 <= window <= horizon")
        if not 0 <= self.ident_steps < self.horizon:
            raise ValueError("ident_steps must satisfy 0 <= ident_steps < horizon")
        if self.sigma_excitation < 0:
            raise ValueError("sigma_excitation must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


class LinearPlant:
    """Ground-truth linear plant behind an apply/observe boundary.

    Exposes only step(x, u); the true matrices are available to the harness
    for error reporting, never to the planner.
    """

    def __init__(self, system: LinearSystem):
        self.system = system

    def step(self, x, u) -> np.ndarray:
        return dyn_step(self.system, x, u)

    @property
    def theta(self) -> np.ndarray:
        return np.hstack([self.system.A, self.system.B])


def excitation_input(rng: np.random.Generator, sigma_exc: float, base, active_channels=None):
    """Base control plus zero-mean Gaussian excitation on the active channels."""
    base = np.asarray(base, dtype=float).copy()
    if sigma_exc < 0:
        raise ValueError("sigma_exc must be >= 0")
    if sigma_exc == 0:
        return base
    noise = sigma_exc * rng.standard_normal(base.shape)
    if active_channels is not None:
        mask = np.zeros(base.shape, dtype=bool)
        mask[np.asarray(active_channels, dtype=int)] = True
        noise = np.where(mask, noise, 0.0)
    return base + noise


@dataclass
class WindowResult:
    stages: list  # StagePolicy for t = s .. window_end - 1
    window_end: int
    cost_before: float
    cost_after: float
    step_sq: float
    evals: int
    rejected: bool = False


def plan_window(
    x_s,
    model: LinearSystem,
    warm_start: Optional[list],
    kernel: KernelSpec,
    s: int,
    cfg: OnlineConfig,
    spec: CostSpec,
    dict_rng: Optional[np.random.Generator] = None,
) -> WindowResult:
    """Improve the window policies on the identified model from the observed state.

    The window covers t = s .. min(horizon, s + window) - 1 and is solved by
    the same backward stage improvement as the full-horizon routine, with the
    single state x_s as the sample batch, so there is no Monte Carlo
    averaging.  The returned candidate never costs more than the warm start;
    if the predicted rollout diverges the warm start is kept unchanged.
    """
    x_s = np.asarray(x_s, dtype=float).ravel()
    end = min(cfg.horizon, s + cfg.window)
    h = end - s
    if h < 1:
        raise ValueError("empty planning window")
    if warm_start is not None:
        if len(warm_start) != h:
            raise ValueError(f"warm start covers {len(warm_start)} stages, window needs {h}")
        stages = [StagePolicy(st.dictionary, st.coefficients.copy()) for st in warm_start]
    else:
        stages = [StagePolicy.zero(model.m) for _ in range(h)]
    policy = KernelPolicy(kernel, stages)
    try:
        policy, records = run_policy_iteration(
            model,
            spec,
            h,
            x_s[None, :],
            cfg.solver,
            policy=policy,
            dict_rng=dict_rng,
        )
    except PolicyIterationDiverged:
        kept = warm_start if warm_start is not None else stages
        return WindowResult(
            stages=kept,
            window_end=end,
            cost_before=math.inf,
            cost_after=math.inf,
            step_sq=0.0,
            evals=0,
            rejected=True,
        )
    return WindowResult(
        stages=policy.stages,
        window_end=end,
        cost_before=records[0].cost,
        cost_after=records[-1].cost_after,
        step_sq=float(sum(r.total_step_sq for r in records)),
        evals=int(sum(int(r.inner_evals.sum()) for r in records)),
    )


def shift_warm_start(
    stages: list,
    s: int,
    x_next,
    model: LinearSystem,
    kernel: KernelSpec,
    cfg: OnlineConfig,
) -> list:
    """Drop the executed stage and extend the window if its end moved.

    Overlapping stages keep their dictionaries and coefficient bits.  A newly
    appended terminal stage starts from zero coefficients with a fresh
    single-point dictionary at the state the shifted candidate predicts
    there.
    """
    x_next = np.asarray(x_next, dtype=float).ravel()
    new_end = min(cfg.horizon, s + 1 + cfg.window)
    needed = new_end - (s + 1)
    shifted = [StagePolicy(st.dictionary, st.coefficients.copy()) for st in stages[1:]]
    if len(shifted) >= needed:
        return shifted[:needed]
    x_hat = x_next
    for j in range(needed):
        if j == len(shifted):
            anchor = Dictionary(points=x_hat[None, :], stage=s + 1 + j)
            shifted.append(StagePolicy.zero(model.m, anchor))
        pol = KernelPolicy(kernel, [shifted[j]])
        u = eval_policy(pol, 0, x_hat)
        x_hat = model.A @ x_hat + model.B @ u
    return shifted


@dataclass
class OnlineStepRecord:
    step: int
    phase: str  # "identify" | "plan"
    state: np.ndarray
    control: np.ndarray
    min_distance: float
    state_norm: float
    residual_norm: Optional[float] = None
    param_error: Optional[float] = None
    window_cost_before: Optional[float] = None
    window_cost_after: Optional[float] = None
    window_step_sq: Optional[float] = None
    window_rejected: bool = False


@dataclass
class OnlineLog:
    """Closed-loop trace of one online run."""

    steps: list
    states: np.ndarray  # (S+1, n) observed states including the final one
    controls: np.ndarray  # (S, m)
    horizon: int
    ident_steps: int
    diverged: bool
    pe_result: object
    min_distance: float
    min_distance_post_ident: float
    max_state_norm: float

    @property
    def planning_steps(self) -> list:
        return [r for r in self.steps if r.phase == "plan"]

    @property
    def identification_steps(self) -> list:
        return [r for r in self.steps if r.phase == "identify"]


def run_online(
    plant,
    cfg: OnlineConfig,
    spec: CostSpec,
    scenario=None,
    theta0: Optional[np.ndarray] = None,
    x0=None,
) -> OnlineLog:
    """Execute the full identify-then-plan loop against the plant.

    The plant only needs a step(x, u) method; passing a LinearSystem wraps it.
    When the true system is available (LinearPlant), the per-step parameter
    error is logged during identification.  Passing ident_steps=0 together
    with theta0 equal to the true stacked matrices skips identification and
    runs pure receding-horizon control.
    """
    if isinstance(plant, LinearSystem):
        plant = LinearPlant(plant)
    truth = plant.theta if isinstance(plant, LinearPlant) else None
    if isinstance(plant, LinearPlant):
        n, m = plant.system.n, plant.system.m
        blocks = plant.system.input_blocks
    else:
        if scenario is None:
            raise ValueError("a bare plant object needs a scenario for dimensions")
        n, m = 2 * scenario.n_vehicles, len(scenario.cav_indices)
        blocks = tuple([1] * m)

    rngs = substreams(cfg.seed, ("initial-state", "excitation", "window-dictionary"))
    if x0 is None:
        if scenario is None:
            raise ValueError("need either x0 or a scenario to sample it from")
        from .intersection import sample_initial_states

        x0 = sample_initial_states(scenario, rngs["initial-state"], 1)[0]
    x = np.asarray(x0, dtype=float).ravel()

    def min_dist(state) -> float:
        return scenario.min_distance(state) if scenario is not None else math.inf

    rls = rls_init(n, m, lam=cfg.forgetting, M0_scale=cfg.m0_scale, theta0=theta0)
    pe = PeWindow(length=2 * (n + m), alpha=1e-3)
    steps: list = []
    states = [x.copy()]
    controls: list = []
    diverged = False

    for s in range(cfg.ident_steps):
        u = excitation_input(rngs["excitation"], cfg.sigma_excitation, np.zeros(m))
        try:
            x_next = plant.step(x, u)
        except DivergenceError:
            diverged = True
            break
        rls, resid = rls_update(rls, x, u, x_next)
        pe.push(np.concatenate([x, u]))
        steps.append(
            OnlineStepRecord(
                step=s,
                phase="identify",
                state=x.copy(),
                control=u.copy(),
                min_distance=min_dist(x),
                state_norm=float(np.linalg.norm(x)),
                residual_norm=float(np.linalg.norm(resid)),
                param_error=(
                    float(np.linalg.norm(truth - rls.theta_hat)) if truth is not None else None
                ),
            )
        )
        controls.append(u)
        states.append(x_next.copy())
        x = x_next

    A_hat, B_hat = estimate(rls)
    model = LinearSystem(A_hat, B_hat, blocks)

    kernel = _resolve_online_kernel(cfg, model, x)

    warm = None
    if not diverged:
        for s in range(cfg.ident_steps, cfg.horizon):
            result = plan_window(
                x, model, warm, kernel, s, cfg, spec, dict_rng=rngs["window-dictionary"]
            )
            u = eval_policy(KernelPolicy(kernel, [result.stages[0]]), 0, x)
            try:
                x_next = plant.step(x, u)
            except DivergenceError:
                diverged = True
                break
            steps.append(
                OnlineStepRecord(
                    step=s,
                    phase="plan",
                    state=x.copy(),
                    control=u.copy(),
                    min_distance=min_dist(x),
                    state_norm=float(np.linalg.norm(x)),
                    window_cost_before=result.cost_before,
                    window_cost_after=result.cost_after,
                    window_step_sq=result.step_sq,
                    window_rejected=result.rejected,
                )
            )
            controls.append(u)
            states.append(x_next.copy())
            if s + 1 < cfg.horizon:
                warm = shift_warm_start(result.stages, s, x_next, model, kernel, cfg)
            x = x_next

    states_arr = np.array(states)
    controls_arr = np.array(controls) if controls else np.zeros((0, m))
    dists = (
        [min_dist(st) for st in states_arr]
        if scenario is not None
        else [math.inf] * len(states_arr)
    )
    post = dists[cfg.ident_steps :] if len(dists) > cfg.ident_steps else []
    return OnlineLog(
        steps=steps,
        states=states_arr,
        controls=controls_arr,
        horizon=cfg.horizon,
        ident_steps=cfg.ident_steps,
        diverged=diverged,
        pe_result=pe_check(pe),
        min_distance=float(min(dists)) if dists else math.inf,
        min_distance_post_ident=float(min(post)) if post else math.inf,
        max_state_norm=float(np.max(np.linalg.norm(states_arr, axis=1))),
    )


def _resolve_online_kernel(cfg: OnlineConfig, model: LinearSystem, x: np.ndarray) -> KernelSpec:
    """Kernel for the window policies; the median heuristic falls back to the
    drift trajectory predicted by the identified model from the current state."""
    if cfg.solver.kernel_family != "gaussian-rbf" or cfg.solver.length_scale is not None:
        return cfg.solver.kernel_spec()
    steps_left = max(cfg.horizon - cfg.ident_steps, 1)
    try:
        ref = rollout(model, None, x[None, :], horizon=steps_left).states[0]
    except DivergenceError:
        ref = x[None, :]
    return cfg.solver.kernel_spec(reference_points=ref)
