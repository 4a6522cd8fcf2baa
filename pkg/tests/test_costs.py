import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernelpi.costs import (
    CollisionSpec,
    CostSpec,
    TailEvaluator,
    collision_penalty,
    empirical_stage_objective,
    evaluate_cost_to_go,
    stage_cost,
    terminal_cost,
)
from kernelpi.dynamics import DivergenceError, LinearSystem, TrajectoryBatch, rollout
from kernelpi.kernels import Dictionary, GramPair, KernelPolicy, KernelSpec, StagePolicy, cross_gram, gram_matrix

PAIR_SPEC = CollisionSpec(safety_distance=1.0, softening=0.1)


def grid_extractor(x):
    # interpret consecutive state pairs as planar coordinates
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape[:-1] + (-1, 2))


def test_collision_single_vehicle_is_zero():
    assert collision_penalty(np.array([[1.0, 2.0]]), PAIR_SPEC) == 0.0


def test_collision_coincident_pair():
    pos = np.array([[0.0, 0.0], [0.0, 0.0]])
    assert collision_penalty(pos, PAIR_SPEC) == pytest.approx(10.0)


def test_collision_two_meters_apart():
    pos = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert collision_penalty(pos, PAIR_SPEC) == pytest.approx(1.0 / 4.1, rel=1e-12)


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 9999), V=st.integers(2, 5))
def test_collision_counts_pairs_and_permutes(seed, V):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-5, 5, size=(V, 2))
    val = collision_penalty(pos, PAIR_SPEC)
    manual = sum(
        PAIR_SPEC.safety_distance**2 / (np.sum((pos[i] - pos[j]) ** 2) + PAIR_SPEC.softening)
        for i in range(V)
        for j in range(i + 1, V)
    )
    assert val == pytest.approx(manual, rel=1e-12)
    perm = rng.permutation(V)
    assert collision_penalty(pos[perm], PAIR_SPEC) == pytest.approx(val, rel=1e-12)


def test_collision_monotone_in_distance():
    base = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
    v0 = collision_penalty(base, PAIR_SPEC)
    closer = base.copy()
    closer[1, 0] = 2.0
    assert collision_penalty(closer, PAIR_SPEC) > v0


def test_collision_spec_validation():
    with pytest.raises(ValueError):
        CollisionSpec(safety_distance=0.0, softening=0.1)
    with pytest.raises(ValueError):
        CollisionSpec(safety_distance=1.0, softening=0.0)


def test_stage_cost_zero_state_zero_control():
    spec = CostSpec(Q=np.eye(2), R=[[1.0]], Q_F=np.eye(2))
    assert stage_cost(np.zeros(2), np.zeros(1), spec) == 0.0


def test_stage_cost_known_value():
    spec = CostSpec(Q=np.eye(2), R=[[1.0]], Q_F=np.eye(2))
    assert stage_cost([1.0, 2.0], [3.0], spec) == pytest.approx(14.0)


def test_stage_cost_additive_penalty():
    spec = CostSpec(
        Q=np.eye(4),
        R=np.eye(2),
        Q_F=np.eye(4),
        psi=lambda x: collision_penalty(grid_extractor(x), PAIR_SPEC),
    )
    x = np.zeros(4)  # both planar points coincide at the origin
    assert stage_cost(x, np.zeros(2), spec) == pytest.approx(10.0)


def test_terminal_cost_values():
    spec = CostSpec(Q=np.eye(2), R=[[1.0]], Q_F=2.0 * np.eye(2))
    assert terminal_cost(np.zeros(2), spec) == 0.0
    assert terminal_cost([1.0, 1.0], spec) == pytest.approx(4.0)
    spec_pen = CostSpec(
        Q=np.eye(4),
        R=np.eye(2),
        Q_F=np.eye(4),
        psi_F=lambda x: collision_penalty(grid_extractor(x), PAIR_SPEC),
    )
    assert terminal_cost(np.zeros(4), spec_pen) == pytest.approx(10.0)


def test_cost_spec_validation():
    good = CostSpec(Q=np.eye(2), R=[[1.0]], Q_F=np.eye(2))
    good.validate()
    with pytest.raises(ValueError):
        CostSpec(Q=-np.eye(2), R=[[1.0]], Q_F=np.eye(2)).validate()
    with pytest.raises(ValueError):
        CostSpec(Q=[[1.0, 0.5], [0.0, 1.0]], R=[[1.0]], Q_F=np.eye(2)).validate()
    with pytest.raises(ValueError):
        CostSpec(Q=np.eye(2), R=[[1.0]], Q_F=np.eye(2), psi=lambda x: 1.0 + 0.0 * x[..., 0]).validate()


def _quad_spec(n, m):
    return CostSpec(Q=np.eye(n), R=np.eye(m), Q_F=np.eye(n))


def test_cost_to_go_zero_trajectories():
    batch = TrajectoryBatch(states=np.zeros((3, 5, 2)), controls=np.zeros((3, 4, 1)))
    table = evaluate_cost_to_go(batch, _quad_spec(2, 1))
    np.testing.assert_array_equal(table.values, np.zeros((3, 5)))


def test_cost_to_go_single_step_base_case():
    states = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    controls = np.array([[[2.0]]])
    batch = TrajectoryBatch(states=states, controls=controls)
    spec = _quad_spec(2, 1)
    table = evaluate_cost_to_go(batch, spec)
    expected_v1 = terminal_cost(states[0, 1], spec)
    expected_v0 = stage_cost(states[0, 0], controls[0, 0], spec) + expected_v1
    assert table.values[0, 1] == pytest.approx(expected_v1)
    assert table.values[0, 0] == pytest.approx(expected_v0)


def test_cost_to_go_matches_forward_sum():
    rng = np.random.default_rng(7)
    sys_ = LinearSystem(A=[[1.0, 0.1], [0.0, 0.95]], B=[[0.0], [0.1]], input_blocks=(1,))
    policy = lambda t, X: 0.3 * rng.standard_normal((X.shape[0], 1)) * 0 + 0.1 * X[:, :1]
    batch = rollout(sys_, policy, rng.normal(size=(4, 2)), horizon=3)
    spec = CostSpec(
        Q=np.eye(2), R=[[0.5]], Q_F=2 * np.eye(2), psi=lambda x: np.sum(x**2, axis=-1) ** 2 * 0.01
    )
    table = evaluate_cost_to_go(batch, spec)
    forward = np.zeros(4)
    for t in range(3):
        forward += stage_cost(batch.states[:, t], batch.controls[:, t], spec)
    forward += terminal_cost(batch.states[:, 3], spec)
    np.testing.assert_allclose(table.values[:, 0], forward, rtol=1e-8)
    assert table.total_cost == pytest.approx(forward.mean(), rel=1e-12)


def test_cost_to_go_nonnegative_with_nonnegative_penalties():
    rng = np.random.default_rng(11)
    sys_ = LinearSystem(A=np.eye(4), B=0.1 * np.eye(4)[:, :2], input_blocks=(1, 1))
    spec = CostSpec(
        Q=0.1 * np.eye(4),
        R=np.eye(2),
        Q_F=np.eye(4),
        psi=lambda x: collision_penalty(grid_extractor(x), PAIR_SPEC),
        psi_F=lambda x: collision_penalty(grid_extractor(x), PAIR_SPEC),
    )
    batch = rollout(sys_, lambda t, X: rng.normal(size=(X.shape[0], 2)), rng.normal(size=(5, 4)), horizon=4)
    table = evaluate_cost_to_go(batch, spec)
    assert (table.values >= 0).all()


def _stage_problem(seed=0, N=6, M=3, n=2, m=1):
    rng = np.random.default_rng(seed)
    sys_ = LinearSystem(A=rng.normal(size=(n, n)) * 0.3 + np.eye(n), B=rng.normal(size=(n, m)), input_blocks=(m,))
    spec = CostSpec(Q=np.eye(n), R=np.eye(m), Q_F=0.5 * np.eye(n))
    states = rng.normal(size=(N, n))
    pts = rng.normal(size=(M, n))
    kernel = KernelSpec(family="gaussian-rbf", length_scale=1.5)
    d = Dictionary(points=pts)
    grams = GramPair(gram_matrix(kernel, d), cross_gram(kernel, states, d))
    return sys_, spec, states, grams, rng


def test_empirical_stage_objective_zero_case():
    sys_, spec, states, grams, _ = _stage_problem()
    zero_states = np.zeros_like(states)
    grams_zero = GramPair(grams.gram, np.ones_like(grams.cross))
    val = empirical_stage_objective(
        0,
        np.zeros((grams.gram.shape[0], sys_.m)),
        zero_states,
        lambda Y: np.zeros(Y.shape[0]),
        sys_,
        spec,
        grams_zero,
    )
    assert val == 0.0


def test_empirical_stage_objective_terminal_stage_hand_value():
    sys_, spec, _, _, rng = _stage_problem(seed=3, N=1, M=1)
    x = np.array([[0.4, -0.2]])
    pts = np.array([[1.0, 0.5]])
    kernel = KernelSpec(family="gaussian-rbf", length_scale=1.0)
    d = Dictionary(points=pts)
    grams = GramPair(gram_matrix(kernel, d), cross_gram(kernel, x, d))
    C = np.array([[0.8]])
    val = empirical_stage_objective(
        0, C, x, lambda Y: terminal_cost(Y, spec), sys_, spec, grams
    )
    u = grams.cross[0] @ C
    y = sys_.A @ x[0] + sys_.B @ u
    expected = float(x[0] @ spec.Q @ x[0] + u @ spec.R @ u + y @ spec.Q_F @ y)
    assert val == pytest.approx(expected, rel=1e-12)


def test_empirical_stage_objective_quadratic_in_coefficients():
    # with no nonlinear penalty and a terminal continuation the objective is
    # an explicit quadratic in the coefficients; compare against it
    sys_, spec, states, grams, rng = _stage_problem(seed=9, N=8, M=4, n=3, m=2)
    K = grams.cross
    A, B, Q, R, QF = sys_.A, sys_.B, spec.Q, spec.R, spec.Q_F
    N = states.shape[0]

    def closed_form(C):
        Pi = K @ C
        c0 = np.einsum("ni,ij,nj->n", states, Q, states)
        quad_u = np.einsum("ni,ij,nj->n", Pi, R + B.T @ QF @ B, Pi)
        lin = 2.0 * np.einsum("ni,ij,nj->n", states @ A.T, QF @ B, Pi)
        c1 = np.einsum("ni,ij,nj->n", states @ A.T, QF, states @ A.T)
        return float(np.mean(c0 + quad_u + lin + c1))

    tail = lambda Y: terminal_cost(Y, spec)
    for _ in range(5):
        C = rng.normal(size=(4, 2))
        val = empirical_stage_objective(0, C, states, tail, sys_, spec, grams)
        assert val == pytest.approx(closed_form(C), rel=1e-10)


def test_tail_evaluator_reports_divergent_sample():
    sys_ = LinearSystem(A=[[5.0]], B=[[1.0]], input_blocks=(1,))
    spec = CostSpec(Q=[[1.0]], R=[[1.0]], Q_F=[[1.0]])
    kernel = KernelSpec(family="linear")
    stages = [StagePolicy(None, np.zeros((0, 1))) for _ in range(12)]
    policy = KernelPolicy(kernel, stages)
    tail = TailEvaluator(sys_, spec, policy, 0)
    with pytest.raises(DivergenceError) as exc:
        tail.values(np.array([[1.0], [1e5]]))
    assert exc.value.sample_index == 1


def test_tail_evaluator_snapshot_matches_rollout_cost():
    rng = np.random.default_rng(21)
    sys_ = LinearSystem(A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.005], [0.1]], input_blocks=(1,))
    spec = CostSpec(Q=np.eye(2), R=[[0.3]], Q_F=np.eye(2))
    kernel = KernelSpec(family="gaussian-rbf", length_scale=2.0)
    stages = [
        StagePolicy(Dictionary(points=rng.normal(size=(3, 2))), rng.normal(size=(3, 1)) * 0.2)
        for _ in range(4)
    ]
    policy = KernelPolicy(kernel, stages)
    x0 = rng.normal(size=(5, 2))
    tail = TailEvaluator(sys_, spec, policy, 0)
    vals = tail.values(x0)
    batch = rollout(sys_, policy, x0)
    table = evaluate_cost_to_go(batch, spec)
    np.testing.assert_allclose(vals, table.values[:, 0], rtol=1e-10)
