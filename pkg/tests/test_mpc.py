import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handmpc.model import ContactPoint, LipmState, WorldParams, propagate, zmp_lipm
from handmpc.mpc import (
    LEFT, RIGHT, DeltaZTrajectory, GaitSchedule, MpcConfig, MpcSolution, Phase, WalkingMpc,
    build_mpc_qp, compute_reach_delay, extract_delta_z, prediction_matrices,
)
from handmpc.qp import MalformedProblem, solve
from handmpc.sim import Scenario, Simulator, simulate

W = WorldParams()
FEET = {LEFT: np.array([0.0, 0.1]), RIGHT: np.array([0.0, -0.1])}
STAND = GaitSchedule(walking=False)
# single support on the right foot, swing foot touches down after 0.5 s
MID_STANCE = GaitSchedule(phase_index=1, elapsed=0.5)


def test_gait_schedule_sequence():
    g = GaitSchedule()
    assert g.phase(0)[0] == Phase.DoubleSupport and g.phase(0)[1] == 0.5
    assert g.phase(1) == (Phase.RightSupport, 1.0, RIGHT)
    assert g.phase(2)[0] == Phase.DoubleSupport
    assert g.phase(3) == (Phase.LeftSupport, 1.0, LEFT)
    h = g.advanced(0.5)
    assert h.phase_index == 1 and h.elapsed == pytest.approx(0.0)
    assert g.advanced(1.55).current[0] == Phase.DoubleSupport
    assert g.lookahead([0.1, 0.5, 1.49, 1.5, 1.55, 1.6]) == [0, 1, 1, 2, 2, 3]
    assert STAND.advanced(100.0).current[0] == Phase.DoubleSupport


def test_prediction_matrices_match_propagation():
    rng = np.random.default_rng(0)
    N, T = 16, 0.1
    P = prediction_matrices(N, T, W.c_z, W.g)
    s0 = LipmState(rng.normal(size=2), rng.normal(size=2), rng.normal(size=2))
    jerk = rng.normal(size=(N, 2))
    s = s0
    for k in range(N):
        s = propagate(s, jerk[k], W, T)
        for a in range(2):
            for key, val in (("pos", s.c[a]), ("vel", s.c_dot[a]), ("acc", s.c_ddot[a]),
                             ("zmp", zmp_lipm(s, W)[a])):
                Ps, Pu = P[key]
                assert Ps[k] @ s0.axis(a) + Pu[k] @ jerk[:, a] == pytest.approx(val, abs=1e-10)


def test_rest_at_support_center_is_already_optimal():
    sol = WalkingMpc().solve(LipmState(), STAND, FEET)
    assert np.abs(sol.jerk).max() < 1e-9
    assert sol.slack_norm == 0.0 or sol.slack_norm < 1e-12


def _walk_state(t):
    """(state, gait, feet) seen by the controller at MPC tick ``t`` of a nominal walk."""
    sim = Simulator(Scenario(duration=t + 1.0))
    while sim.time < t - 1e-9:
        sim.step()
    return sim.state, sim.gait.advanced(sim.sc.mpc.dt_mpc), {k: v.copy() for k, v in sim.feet.items()}


def test_small_disturbance_is_absorbed_by_stepping():
    state, gait, feet = _walk_state(2.1)
    base = WalkingMpc().solve(state, gait, feet)
    pushed = WalkingMpc().solve(LipmState(state.c, state.c_dot + [0.04, 0.0], state.c_ddot), gait, feet)
    assert pushed.slack_norm < MpcConfig().slack_eps
    assert pushed.footsteps[0][0] > base.footsteps[0][0] + 0.01


def _blocked_config():
    # wall standoff keeps every footstep behind x = 0
    return MpcConfig(exclusions=((1.0, 0.0, 0.0),))


def test_blocked_footsteps_produce_slack_after_delay():
    cfg = _blocked_config()
    state = LipmState([0, -0.1], [0.6, 0.0])
    for n_delay in (0, 3, 6):
        problem, layout = build_mpc_qp(state, MID_STANCE, cfg, n_delay, W, FEET)
        sol = WalkingMpc(cfg).solve(state, MID_STANCE, FEET, n_delay)
        assert sol.slack_norm > cfg.slack_eps
        assert np.all(sol.slack[:n_delay] == 0.0)
        assert np.linalg.norm(sol.slack[n_delay:], axis=1).max() > cfg.slack_eps
        # the delay rows are pinned by equal bounds
        N, M = layout["N"], layout["M"]
        for a in range(2):
            rows = slice(2 * N + 2 * M + a * N, 2 * N + 2 * M + a * N + n_delay)
            assert np.all(problem.lb[rows] == 0.0) and np.all(problem.ub[rows] == 0.0)
        dz = extract_delta_z(sol, cfg.slack_eps)
        assert dz and min(dz.steps) >= n_delay


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 16), st.floats(-1.0, 1.0), st.floats(-0.5, 0.5))
def test_delay_rows_are_exactly_zero(n_delay, vx, vy):
    cfg = _blocked_config()
    sol = WalkingMpc(cfg).solve(LipmState([0, -0.1], [vx, vy]), MID_STANCE, FEET, n_delay)
    assert np.all(sol.slack[:n_delay] == 0.0)
    assert sol.n_delay == n_delay


def test_malformed_inputs():
    with pytest.raises(MalformedProblem):
        build_mpc_qp(LipmState(), STAND, MpcConfig(), 17, W, FEET)
    with pytest.raises(MalformedProblem):
        build_mpc_qp(LipmState(), STAND, MpcConfig(), 0, W, {LEFT: np.zeros(3), RIGHT: np.zeros(2)})
    with pytest.raises(ValueError):
        MpcConfig(polygon_scale=0.0)
    with pytest.raises(ValueError):
        MpcConfig(w_slack=0.0)


def _fake_solution(slack):
    slack = np.asarray(slack, dtype=float)
    z = np.zeros_like(slack)
    return MpcSolution(z, np.zeros((0, 2)), [], slack, z, z, z, z)


def test_extract_delta_z_examples():
    assert not extract_delta_z(_fake_solution(np.zeros((16, 2))), 1e-4)
    s = np.zeros((16, 2))
    s[5] = (0.03, 0.0)
    dz = extract_delta_z(_fake_solution(s), 1e-4)
    assert dz.steps == [5]
    np.testing.assert_array_equal(dz.entries[0][1], [0.03, 0.0])
    s = np.zeros((16, 2))
    s[2] = (-0.01, 0.002)
    s[3] = (5e-5, 0.0)  # below the threshold
    s[7] = (0.02, -0.03)
    dz = extract_delta_z(_fake_solution(s), 1e-4)
    assert dz.steps == [2, 7]
    np.testing.assert_array_equal(dz.entries[0][1], s[2])
    np.testing.assert_array_equal(dz.entries[1][1], s[7])
    assert isinstance(dz, DeltaZTrajectory) and len(dz) == 2


def test_reach_delay_examples():
    assert compute_reach_delay([0.3, 0, 1], ContactPoint([0.3, 0, 1]), 1.5, 0.1) == 0
    assert compute_reach_delay([0, 0, 1], [0.5, 0, 1], 1.0, 0.1) == 5
    assert compute_reach_delay([0, 0, 1], [10, 0, 1], 1.0, 0.1, 16) == 16
    assert compute_reach_delay([0, 0, 1], [0.51, 0, 1], 1.0, 0.1) == 6
    with pytest.raises(ValueError):
        compute_reach_delay([0, 0, 1], [1, 0, 1], 0.0, 0.1)


def test_nominal_walk_needs_no_slack():
    sc = Scenario(duration=4.0)
    trace = simulate(sc, keep_solutions=True)
    assert trace.mpc_solutions
    assert all(sol.slack_norm < sc.mpc.slack_eps for _, sol in trace.mpc_solutions)
    assert not trace.fallen and not trace.contacts_used


def test_containment_from_solution_supports():
    """Predicted ZMP lies in the scaled rectangle of the planned supports when S = 0."""
    cfg = MpcConfig()
    h = cfg.conservative_half_extents
    rng = np.random.default_rng(4)
    gaits = [STAND, GaitSchedule(), MID_STANCE, GaitSchedule(phase_index=2, elapsed=0.05),
             GaitSchedule(phase_index=3, elapsed=0.9)]
    hits = 0
    for _ in range(40):
        gait = gaits[int(rng.integers(len(gaits)))]
        state = LipmState(rng.uniform(-0.02, 0.02, 2), rng.uniform(-0.05, 0.05, 2))
        problem, layout = build_mpc_qp(state, gait, cfg, 0, W, FEET)
        x = solve(problem).x
        N, M = layout["N"], layout["M"]
        slack = x[2 * N + 2 * M:]
        if np.abs(slack).max() > 0:
            continue
        hits += 1
        feet = np.column_stack([x[2 * N:2 * N + M], x[2 * N + M:2 * N + 2 * M]])
        zmp = np.column_stack([layout["P"]["zmp"][0] @ state.axis(a) + layout["P"]["zmp"][1] @ x[a * N:(a + 1) * N]
                               for a in range(2)])
        for k, sup in enumerate(layout["supports"]):
            pts = np.array([r[1] if r[0] == "fixed" else feet[r[1]] for r in sup.feet])
            assert np.all(zmp[k] >= pts.min(axis=0) - h - 1e-8)
            assert np.all(zmp[k] <= pts.max(axis=0) + h + 1e-8)
    assert hits > 0


def test_slack_is_last_resort():
    """Raising the slack weight never increases the slack; slack only lowers the cost."""
    cfg_state = LipmState([0, -0.1], [0.6, 0.0])
    prev = np.inf
    for w in (1e2, 1e3, 1e4, 1e5):
        cfg = MpcConfig(exclusions=((1.0, 0.0, 0.0),), w_slack=w)
        sol = WalkingMpc(cfg).solve(cfg_state, MID_STANCE, FEET)
        assert sol.slack_norm <= prev + 1e-9
        prev = sol.slack_norm
        free, _ = build_mpc_qp(cfg_state, MID_STANCE, cfg, 0, W, FEET)
        pinned, _ = build_mpc_qp(cfg_state, MID_STANCE, cfg, 16, W, FEET)
        assert solve(free).objective <= solve(pinned).objective + 1e-9


def test_receding_horizon_consistency_when_standing():
    cfg = MpcConfig()
    mpc = WalkingMpc(cfg)
    state = LipmState()
    sol = mpc.solve(state, STAND, FEET)
    nxt = mpc.solve(sol.predicted_state(0), STAND.advanced(cfg.dt_mpc), FEET)
    np.testing.assert_allclose(nxt.pos[:-1], sol.pos[1:], atol=1e-6)
    np.testing.assert_allclose(nxt.zmp[:-1], sol.zmp[1:], atol=1e-6)
