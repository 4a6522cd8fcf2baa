"""Full-horizon policy iteration with implicit secant-type stage updates.

Each outer iteration simulates the sample batch forward under the current
policy, evaluates the remaining cost backward, and then improves the policy
stage by stage from the last stage to the first.  A stage improvement solves
the implicit step condition

    J_t(c_new) - J_t(c_old) = -(1/delta) ||pi_new - pi_old||^2

where the norm stacks the policy values at the sampled states.  Any solution
with a nonzero step strictly decreases the stage objective, and because each
stage objective chains exactly into the next through the re-simulated
continuation values, the recorded total cost is non-increasing across outer
iterations by construction.

Two inner solvers are available.  The default "secant" solver picks the
Gram-preconditioned descent direction and finds the step length by 1-d root
finding, which enforces the identity above to root-finder precision.  The
"fixed_point" solver iterates the damped substitution

    c <- c_old - delta K^-1 Ks' D(c)

with backtracking on the damping factor; its fixed points solve the
coefficient-space update equation exactly, at the price of restricting the
step direction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .costs import CostSpec, TailEvaluator, empirical_stage_objective, evaluate_cost_to_go
from .dynamics import DivergenceError, LinearSystem, rollout, STATE_GUARD
from .kernels import (
    Dictionary,
    GramPair,
    KernelPolicy,
    KernelSpec,
    StagePolicy,
    cross_gram,
    gram_matrix,
    median_length_scale,
)
from .seeding import substreams

__all__ = [
    "SolverConfig",
    "IterationRecord",
    "StageUpdateResult",
    "PolicyIterationDiverged",
    "ProbeRow",
    "discrete_frechet_derivative",
    "solve_implicit_update",
    "policy_iteration",
    "run_policy_iteration",
    "build_dictionaries",
    "complexity_probe",
]


@dataclass
class SolverConfig:
    """Tuning knobs for the policy-iteration solver.

    delta_lr scales the implicit step: larger values permit longer steps per
    stage update.  ridge is a relative factor; the absolute shift added to a
    stage Gram solve is ridge times the mean Gram diagonal.
    """

    delta_lr: float = 1.0
    max_outer_iters: int = 100
    inner_tol: float = 1.0e-6
    inner_max_iters: int = 40
    mc_samples: int = 50
    dict_size: int = 30
    ridge: float = 1.0e-8
    seed: int = 0
    kernel_family: str = "gaussian-rbf"
    length_scale: Optional[float] = None
    poly_degree: int = 2
    poly_offset: float = 1.0
    inner_solver: str = "secant"
    convergence_tol: float = 1.0e-8

    def __post_init__(self) -> None:
        if not self.delta_lr > 0:
            raise ValueError("delta_lr must be > 0")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be > 0")
        if self.inner_max_iters < 1 or self.max_outer_iters < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.mc_samples < 1 or self.dict_size < 1:
            raise ValueError("mc_samples and dict_size must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.inner_solver not in ("secant", "fixed_point"):
            raise ValueError("inner_solver must be 'secant' or 'fixed_point'")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")

    def kernel_spec(self, reference_points=None) -> KernelSpec:
        """Resolve the kernel; a missing rbf length scale uses the median heuristic."""
        ls = self.length_scale
        if self.kernel_family == "gaussian-rbf" and ls is None:
            if reference_points is None:
                raise ValueError("length_scale unset and no reference points given")
            ls = median_length_scale(reference_points)
        return KernelSpec(
            family=self.kernel_family,
            length_scale=float(ls) if ls is not None else 1.0,
            degree=self.poly_degree,
            offset=self.poly_offset,
        )


@dataclass
class StageUpdateResult:
    """Outcome of one stage update, with descent and step diagnostics."""

    c_new: np.ndarray
    objective_old: float
    objective_new: float
    evals: int
    value_step_sq: float  # ||pi_new - pi_old||_F^2 over the sampled states
    rkhs_step_sq: float  # dc' (K + ridge I) dc, the kernel-space step norm
    secant_gap: float  # |dJ + value_step_sq / delta|
    update_residual: float  # ||K dc + delta Ks' D|| in coefficient space
    accepted: bool
    reason: str


@dataclass
class IterationRecord:
    """Per-outer-iteration history entry."""

    iteration: int
    cost: float  # batch cost of the policy entering this iteration
    cost_after: float  # batch cost of the policy after the backward sweep
    stage_step_norms: np.ndarray  # per stage, sqrt of value_step_sq
    stage_rkhs_norms: np.ndarray
    stage_secant_gaps: np.ndarray
    stage_residuals: np.ndarray
    inner_evals: np.ndarray
    wall_time: float

    @property
    def total_step_sq(self) -> float:
        return float(np.sum(self.stage_step_norms**2))


class PolicyIterationDiverged(RuntimeError):
    """Simulation blew up; carries the partial history collected so far."""

    def __init__(self, message: str, records: list, policy: Optional[KernelPolicy], cause=None):
        super().__init__(message)
        self.records = records
        self.policy = policy
        self.cause = cause


def discrete_frechet_derivative(pi_new, pi_old, J_new: float, J_old: float) -> np.ndarray:
    """Secant-type derivative: (pi_new - pi_old) (J_new - J_old) / ||pi_new - pi_old||^2.

    Returns the zero element when the policy values coincide.  For a nonzero
    difference the inner product with (pi_new - pi_old) reproduces
    J_new - J_old exactly.
    """
    new = np.asarray(pi_new, dtype=float)
    old = np.asarray(pi_old, dtype=float)
    if new.shape != old.shape:
        raise ValueError("policy value arrays must share a shape")
    d = new - old
    nrm2 = float(np.sum(d * d))
    if nrm2 == 0.0:
        return np.zeros_like(d)
    return d * ((float(J_new) - float(J_old)) / nrm2)


class _StageWorkspace:
    """Cached quantities for improving a single stage."""

    def __init__(self, t, c_old, tail_values, states, grams, cfg, spec, sys, chol, ridge_abs):
        self.t = t
        self.c_old = np.asarray(c_old, dtype=float)
        self.tail_values = tail_values
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        self.grams = grams
        self.cfg = cfg
        self.spec = spec
        self.sys = sys
        self.chol = chol
        self.ridge_abs = ridge_abs
        self.K_ridge = grams.gram + ridge_abs * np.eye(grams.gram.shape[0])
        self.cross = grams.cross
        self.pi_old = self.cross @ self.c_old
        self.evals = 0

    def objective_of(self, C) -> float:
        self.evals += 1
        return empirical_stage_objective(
            self.t, C, self.states, self.tail_values, self.sys, self.spec, self.grams
        )

    def value_gradient(self) -> np.ndarray:
        """Gradient of the stage objective with respect to the sampled controls.

        The continuation term is differentiated by forward differences on the
        successor states, batched into a single tail evaluation.
        """
        A, B = self.sys.A, self.sys.B
        y0 = self.states @ A.T + self.pi_old @ B.T
        N, n = y0.shape
        h = 1.0e-5 * (1.0 + np.abs(y0))
        Ybig = np.repeat(y0[None, :, :], n + 1, axis=0)
        for j in range(n):
            Ybig[j + 1, :, j] += h[:, j]
        vals = np.asarray(self.tail_values(Ybig.reshape(-1, n))).reshape(n + 1, N)
        self.evals += n + 1
        dV = ((vals[1:] - vals[0]) / h.T).T  # (N, n)
        return (2.0 * self.pi_old @ self.spec.R + dV @ B) / N

    def descent_direction(self):
        """Gram-preconditioned direction from the projected value gradient."""
        G = self.value_gradient()
        W = self.cross.T @ G
        V = -cho_solve(self.chol, W)
        P = self.cross @ V
        p2 = float(np.sum(P * P))
        s0 = float(np.sum(G * P))
        return V, P, p2, s0

    def diagnostics(self, c_new, J_old, J_new):
        dC = c_new - self.c_old
        dpi = self.cross @ dC
        value_sq = float(np.sum(dpi * dpi))
        rkhs_sq = float(np.sum(dC * (self.K_ridge @ dC)))
        gap = abs(J_new - J_old + value_sq / self.cfg.delta_lr)
        D = discrete_frechet_derivative(self.pi_old + dpi, self.pi_old, J_new, J_old)
        resid = float(
            np.linalg.norm(self.K_ridge @ dC + self.cfg.delta_lr * (self.cross.T @ D))
        )
        return value_sq, rkhs_sq, gap, resid


def _fallback(ws: _StageWorkspace, J0: float, reason: str) -> StageUpdateResult:
    return StageUpdateResult(
        c_new=ws.c_old.copy(),
        objective_old=J0,
        objective_new=J0,
        evals=ws.evals,
        value_step_sq=0.0,
        rkhs_step_sq=0.0,
        secant_gap=0.0,
        update_residual=0.0,
        accepted=False,
        reason=reason,
    )


def _solve_secant(ws: _StageWorkspace, J0: float) -> StageUpdateResult:
    cfg = ws.cfg
    V, P, p2, s0 = ws.descent_direction()
    scale = 1.0 + abs(J0)
    if not np.isfinite(p2) or p2 <= 1e-300 or s0 >= -1e-14 * scale:
        return _fallback(ws, J0, "stationary")
    delta = cfg.delta_lr
    cache = {}

    def g(a: float) -> float:
        if a not in cache:
            Ja = ws.objective_of(ws.c_old + a * V)
            cache[a] = (Ja - J0 + (a * a) * p2 / delta, Ja)
        return cache[a][0]

    a_hi = -s0 * delta / p2
    for _ in range(60):
        if g(a_hi) > 0:
            break
        a_hi *= 2.0
    else:
        return _fallback(ws, J0, "no-bracket")
    a_lo = 0.5 * a_hi
    for _ in range(60):
        if g(a_lo) < 0:
            break
        a_lo *= 0.5
    else:
        return _fallback(ws, J0, "no-descent")
    try:
        a_star = brentq(g, a_lo, a_hi, xtol=1e-13 * a_hi, rtol=4 * np.finfo(float).eps, maxiter=200)
    except (ValueError, RuntimeError):
        return _fallback(ws, J0, "bracket-failed")
    c_new = ws.c_old + a_star * V
    J1 = cache[a_star][1] if a_star in cache else ws.objective_of(c_new)
    if not np.isfinite(J1) or J1 > J0:
        return _fallback(ws, J0, "no-descent")
    value_sq, rkhs_sq, gap, resid = ws.diagnostics(c_new, J0, J1)
    return StageUpdateResult(
        c_new=c_new,
        objective_old=J0,
        objective_new=J1,
        evals=ws.evals,
        value_step_sq=value_sq,
        rkhs_step_sq=rkhs_sq,
        secant_gap=gap,
        update_residual=resid,
        accepted=True,
        reason="ok",
    )


def _solve_fixed_point(ws: _StageWorkspace, J0: float) -> StageUpdateResult:
    cfg = ws.cfg
    V, P, p2, s0 = ws.descent_direction()
    scale = 1.0 + abs(J0)
    if not np.isfinite(p2) or p2 <= 1e-300 or s0 >= -1e-14 * scale:
        return _fallback(ws, J0, "stationary")
    delta = cfg.delta_lr
    res_scale = max(1.0, float(np.linalg.norm(ws.K_ridge @ ws.c_old)))
    # bootstrap inside the descent region so the substitution map has a
    # nonzero step to evaluate the secant quotient on
    a0 = -s0 * delta / p2
    for _ in range(60):
        if ws.objective_of(ws.c_old + a0 * V) <= J0:
            break
        a0 *= 0.5
    else:
        return _fallback(ws, J0, "no-descent")
    c = ws.c_old + a0 * V
    descending = None  # latest iterate with Jc <= J0
    omega = 1.0
    for _ in range(cfg.inner_max_iters):
        dpi = ws.cross @ (c - ws.c_old)
        nrm2 = float(np.sum(dpi * dpi))
        if nrm2 == 0.0:
            break
        Jc = ws.objective_of(c)
        if np.isfinite(Jc) and Jc <= J0:
            descending = (Jc, c)
        D = dpi * ((Jc - J0) / nrm2)
        resid = float(np.linalg.norm(ws.K_ridge @ (c - ws.c_old) + delta * (ws.cross.T @ D)))
        if resid <= cfg.inner_tol * res_scale and Jc <= J0:
            descending = (Jc, c)
            break
        target = ws.c_old - delta * cho_solve(ws.chol, ws.cross.T @ D)
        c_next = (1.0 - omega) * c + omega * target
        Jn = ws.objective_of(c_next)
        # backtrack the damping factor whenever the objective would rise
        # above the starting value
        while Jn > J0 and omega > 1e-3:
            omega *= 0.5
            c_next = (1.0 - omega) * c + omega * target
            Jn = ws.objective_of(c_next)
        if Jn > J0:
            break
        c = c_next
    if descending is not None and descending[0] < J0:
        best_J, best_c = descending
        value_sq, rkhs_sq, gap, resid = ws.diagnostics(best_c, J0, best_J)
        return StageUpdateResult(
            c_new=best_c,
            objective_old=J0,
            objective_new=best_J,
            evals=ws.evals,
            value_step_sq=value_sq,
            rkhs_step_sq=rkhs_sq,
            secant_gap=gap,
            update_residual=resid,
            accepted=True,
            reason="ok",
        )
    return _fallback(ws, J0, "no-descent")


def solve_implicit_update(
    t: int,
    c_old: np.ndarray,
    tail_values: Callable[[np.ndarray], np.ndarray],
    states_at_t,
    grams: GramPair,
    cfg: SolverConfig,
    spec: CostSpec,
    sys: LinearSystem,
    chol=None,
    ridge_abs: Optional[float] = None,
) -> StageUpdateResult:
    """Improve the stage-t coefficients against the already-updated tail.

    Guarantees objective_new <= objective_old: when the inner solver cannot
    find a descending step the old coefficients are returned unchanged.
    tail_values must evaluate the continuation cost at arbitrary successor
    states (normally a TailEvaluator over the updated later stages).
    """
    if ridge_abs is None:
        mean_diag = float(np.mean(np.diag(grams.gram)))
        ridge_abs = cfg.ridge * (mean_diag if mean_diag > 0 else 1.0)
    if chol is None:
        M = grams.gram.shape[0]
        try:
            chol = cho_factor(grams.gram + ridge_abs * np.eye(M))
        except np.linalg.LinAlgError as exc:
            raise ValueError("stage Gram matrix is singular even after the ridge shift") from exc
    ws = _StageWorkspace(t, c_old, tail_values, states_at_t, grams, cfg, spec, sys, chol, ridge_abs)
    J0 = ws.objective_of(ws.c_old)
    if cfg.inner_solver == "fixed_point":
        return _solve_fixed_point(ws, J0)
    return _solve_secant(ws, J0)


def build_dictionaries(
    states: np.ndarray, horizon: int, dict_size: int, rng: np.random.Generator
) -> list:
    """Per-stage anchor sets subsampled without replacement from rollout states.

    states has shape (N, T+1, n); duplicates within a stage are dropped so the
    Gram matrices stay nonsingular.
    """
    dicts = []
    N = states.shape[0]
    for t in range(horizon):
        m = min(dict_size, N)
        idx = np.sort(rng.choice(N, size=m, replace=False))
        pts = np.unique(states[idx, t, :], axis=0)
        dicts.append(Dictionary(points=pts, stage=t))
    return dicts


def _prepare_stage_solvers(kernel: KernelSpec, dicts: Sequence[Dictionary], ridge_rel: float):
    grams, chols, ridges = [], [], []
    for d in dicts:
        K = gram_matrix(kernel, d, ridge=0.0)
        mean_diag = float(np.mean(np.diag(K)))
        ridge_abs = ridge_rel * (mean_diag if mean_diag > 0 else 1.0)
        try:
            chol = cho_factor(K + ridge_abs * np.eye(d.size))
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                f"Gram matrix for stage {d.stage} is singular even after the ridge shift"
            ) from exc
        grams.append(K)
        chols.append(chol)
        ridges.append(ridge_abs)
    return grams, chols, ridges


def run_policy_iteration(
    sys: LinearSystem,
    spec: CostSpec,
    horizon: int,
    x0_batch,
    cfg: SolverConfig,
    policy: Optional[KernelPolicy] = None,
    dict_rng: Optional[np.random.Generator] = None,
    state_guard: float = STATE_GUARD,
):
    """Iterate forward simulation, backward evaluation, and stage improvement.

    When a policy is given (possibly with missing stage dictionaries, which
    evaluate to zero control) it is improved in place from its warm state;
    otherwise a zero policy is created.  Dictionaries are filled from the
    first rollout and kept fixed afterwards so the stage Gram factors can be
    cached.  Returns (policy, records); rollout divergence raises
    PolicyIterationDiverged carrying the partial history.
    """
    X0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if dict_rng is None:
        dict_rng = np.random.default_rng(cfg.seed)
    if policy is None:
        kernel = cfg.kernel_spec(reference_points=X0)
        policy = KernelPolicy(kernel, [StagePolicy.zero(sys.m) for _ in range(horizon)])
    else:
        kernel = policy.kernel
        if policy.horizon != horizon:
            raise ValueError("policy horizon disagrees with the requested horizon")

    records: list = []
    solvers = None
    for k in range(cfg.max_outer_iters):
        try:
            batch = rollout(sys, policy, X0, horizon=horizon, state_guard=state_guard)
        except DivergenceError as exc:
            raise PolicyIterationDiverged(
                f"forward simulation diverged at iteration {k}: {exc}", records, policy, exc
            ) from exc
        if solvers is None:
            missing = [t for t, st in enumerate(policy.stages) if st.dictionary is None]
            if missing:
                dicts = build_dictionaries(batch.states, horizon, cfg.dict_size, dict_rng)
                for t in missing:
                    policy.stages[t] = StagePolicy.zero(sys.m, dicts[t])
            solvers = _prepare_stage_solvers(
                kernel, [st.dictionary for st in policy.stages], cfg.ridge
            )
        gram_raw, chols, ridges = solvers
        cost_k = evaluate_cost_to_go(batch, spec).total_cost

        t0 = time.perf_counter()
        stage_results = [None] * horizon
        try:
            for t in range(horizon - 1, -1, -1):
                stage = policy.stages[t]
                cross = cross_gram(kernel, batch.states[:, t], stage.dictionary)
                grams = GramPair(gram_raw[t], cross)
                tail = TailEvaluator(sys, spec, policy, t + 1, state_guard=state_guard)
                res = solve_implicit_update(
                    t,
                    stage.coefficients,
                    tail.values,
                    batch.states[:, t],
                    grams,
                    cfg,
                    spec,
                    sys,
                    chol=chols[t],
                    ridge_abs=ridges[t],
                )
                policy.stages[t] = StagePolicy(stage.dictionary, res.c_new)
                stage_results[t] = res
        except DivergenceError as exc:
            raise PolicyIterationDiverged(
                f"stage improvement diverged at iteration {k}: {exc}", records, policy, exc
            ) from exc
        wall = time.perf_counter() - t0

        records.append(
            IterationRecord(
                iteration=k,
                cost=cost_k,
                cost_after=stage_results[0].objective_new,
                stage_step_norms=np.sqrt([r.value_step_sq for r in stage_results]),
                stage_rkhs_norms=np.sqrt([max(r.rkhs_step_sq, 0.0) for r in stage_results]),
                stage_secant_gaps=np.array([r.secant_gap for r in stage_results]),
                stage_residuals=np.array([r.update_residual for r in stage_results]),
                inner_evals=np.array([r.evals for r in stage_results]),
                wall_time=wall,
            )
        )
        if cfg.convergence_tol > 0:
            if records[-1].total_step_sq < cfg.convergence_tol * (1.0 + abs(cost_k)):
                break
    return policy, records


def policy_iteration(
    sys: LinearSystem,
    spec: CostSpec,
    p0_sampler: Callable[[np.random.Generator, int], np.ndarray],
    cfg: SolverConfig,
    horizon: int,
):
    """Public entry point: sample the initial-state batch, then iterate.

    p0_sampler(rng, N) must return an (N, n) batch.  The batch is drawn once
    per run from a dedicated substream and reused across iterations for
    reproducibility.
    """
    rngs = substreams(cfg.seed, ("initial-states", "dictionary"))
    X0 = p0_sampler(rngs["initial-states"], cfg.mc_samples)
    return run_policy_iteration(sys, spec, horizon, X0, cfg, dict_rng=rngs["dictionary"])


@dataclass
class ProbeRow:
    mc_samples: int
    dict_size: int
    horizon: int
    seconds_per_iteration: float


def complexity_probe(points: Sequence[tuple], iterations: int = 2, seed: int = 0) -> list:
    """Per-iteration wall times of the solver over a (samples, anchors, horizon) grid.

    Runs a small two-vehicle crossing instance at each grid point and reports
    the mean sweep time, skipping the first iteration (it pays one-off setup
    costs).  Timing rows are informational; no hard bounds are asserted here.
    """
    from .intersection import ScenarioConfig, build_intersection, sample_initial_states

    rows = []
    for (n_samples, dict_size, horizon) in points:
        scen_cfg = ScenarioConfig(
            n_cav=2,
            n_hdv=0,
            horizon=int(horizon),
            entry_offsets=(12.0, 14.0),
            position_jitter=1.0,
            speed_range=(4.0, 6.0),
        )
        scenario, learner, _, cost = build_intersection(scen_cfg)
        cfg = SolverConfig(
            delta_lr=float(n_samples),
            max_outer_iters=int(iterations) + 1,
            mc_samples=int(n_samples),
            dict_size=int(dict_size),
            seed=seed,
            convergence_tol=0.0,
        )
        _, records = policy_iteration(
            learner,
            cost,
            lambda rng, N: sample_initial_states(scenario, rng, N),
            cfg,
            horizon=int(horizon),
        )
        timed = records[1:] if len(records) > 1 else records
        rows.append(
            ProbeRow(
                mc_samples=int(n_samples),
                dict_size=int(dict_size),
                horizon=int(horizon),
                seconds_per_iteration=float(np.mean([r.wall_time for r in timed])),
            )
        )
    return rows
