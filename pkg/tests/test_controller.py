import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoon_smpc.controller import (
    ConfigurationError,
    Controller,
    ControllerConfig,
    DesignError,
    FollowerState,
    Mode,
    MpcProblem,
    TtsisState,
    VehicleParams,
    discretize,
    fallback_input,
    gap_divisor,
    solve_lyapunov,
    solve_mpc,
    spacing_error,
    supervise,
    terminal_design,
    terminal_set,
    ttsis_reset,
    ttsis_step,
)
from platoon_smpc.sim import simulate_follower

PRM = VehicleParams()


@pytest.fixture(scope="module")
def problem():
    return MpcProblem.build()


# ---- parameters and dynamics ----------------------------------------------


def test_vehicle_params_invariants():
    for bad in (dict(h=0), dict(zeta=-1), dict(Ts=0), dict(delta_s=0), dict(d0=2.0, delta_s=2.0)):
        with pytest.raises(ConfigurationError):
            VehicleParams(**bad)
    assert PRM.desired_gap(27.0) == pytest.approx(28.9)


def test_controller_config_invariants():
    with pytest.raises(ConfigurationError):
        ControllerConfig(u_min=1.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(b_sign=0.5)
    with pytest.raises(ConfigurationError):
        ControllerConfig(alpha=0)


def test_discretize_example():
    A, B, G = discretize(VehicleParams(h=0.7, zeta=0.5, Ts=0.1))
    np.testing.assert_allclose(A[0], [1, 0.1, -0.07])
    assert A[2, 2] == pytest.approx(0.8)
    np.testing.assert_allclose(B, [0, 0, 0.2])
    np.testing.assert_allclose(G, [0, 0.1, 0])
    _, Bneg, _ = discretize(PRM, b_sign=-1.0)
    np.testing.assert_allclose(Bneg, -B)


def test_discretize_limits():
    A, _, _ = discretize(VehicleParams(Ts=1e-9))
    np.testing.assert_allclose(A, np.eye(3), atol=1e-8)
    with pytest.raises(ConfigurationError):
        discretize(VehicleParams(Ts=0.6, zeta=0.5))


# ---- spacing error ------------------------------------------------------------


def test_spacing_error_examples():
    assert spacing_error(28.9, 0.0, 27.0, PRM, 0.0) == pytest.approx(0.0, abs=1e-12)
    got = spacing_error(28.9, 0.0, 27.0, PRM, 1.0, 50.0)
    assert got == pytest.approx(28.9 / (2 - math.exp(-50)) - 28.9)
    assert got == pytest.approx(-14.45)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(0, 200), st.floats(0, 40), st.floats(0, 1), st.floats(0, 1), st.floats(0.1, 200),
)
def test_spacing_error_monotone_in_pc(gap, v, p1, p2, alpha):
    lo, hi = sorted((p1, p2))
    assert spacing_error(gap, 0.0, v, PRM, hi, alpha) <= spacing_error(gap, 0.0, v, PRM, lo, alpha) + 1e-12
    assert 1.0 <= gap_divisor(lo, alpha) <= gap_divisor(hi, alpha) <= 2.0


# ---- terminal ingredients -----------------------------------------------------


def test_scalar_riccati_example():
    K, Qbar = terminal_design(0.5, 1.0, 1.0, 1.0)
    k, q = float(K[0, 0]), float(Qbar[0, 0])
    assert q == pytest.approx((0.5 + k) ** 2 * q + 1 + k**2, abs=1e-10)
    # fixed point of the scalar Riccati map, solved independently
    p = 1.0
    for _ in range(200):
        p = 1 + 0.25 * p - 0.25 * p**2 / (1 + p)
    assert k == pytest.approx(-0.5 * p / (1 + p), abs=1e-10)


def test_lqr_is_stabilizing(problem):
    Acl = problem.Az + np.outer(problem.Bz, problem.K)
    assert max(abs(np.linalg.eigvals(Acl))) < 1
    W = problem.Q + problem.R * np.outer(problem.K, problem.K)
    np.testing.assert_allclose(problem.Qbar, Acl.T @ problem.Qbar @ Acl + W, atol=1e-9)


def test_non_stabilizable_rejected():
    A = np.diag([1.5, 0.5])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(DesignError):
        terminal_design(A, B, np.eye(2), np.eye(1))


def test_lyapunov_solver_against_scipy():
    from scipy.linalg import solve_discrete_lyapunov

    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    W = np.eye(4)
    np.testing.assert_allclose(solve_lyapunov(A, W), solve_discrete_lyapunov(A.T, W), atol=1e-10)


def test_terminal_set_zero_gain():
    A = np.diag([0.5, 0.8])
    ts = terminal_set(A, np.zeros((2, 1)), np.zeros((1, 2)), -1.0, 1.0, [-1, -1], [1, 1])
    assert ts.N_c == 0
    assert ts.contains(np.array([0.9, -0.9]))
    assert not ts.contains(np.array([1.1, 0.0]))  # violates the i = 0 row


def test_terminal_set_cap():
    A = np.array([[0.999]])
    with pytest.raises(DesignError, match="spectral radius"):
        terminal_set(
            A, np.zeros((1, 1)), np.zeros((1, 1)), -1, 1, [-100], [100], extra_rows=[([1.0], -1.0, 1.0)], cap=3
        )


def test_terminal_set_invariance_oracle(problem):
    ts = problem.terminal
    cfg = problem.config
    lo = np.array([cfg.terminal_delta_box[0], cfg.dv_bounds[0], cfg.a_bounds[0], cfg.u_min])
    hi = np.array([cfg.terminal_delta_box[1], cfg.dv_bounds[1], cfg.a_bounds[1], cfg.u_max])
    Acl = problem.Az + np.outer(problem.Bz, problem.K)
    rng = np.random.default_rng(11)
    members = []
    while len(members) < 1000:
        x = rng.uniform(lo, hi) * rng.uniform(0, 1) ** 2
        if ts.contains(x):
            members.append(x)
    for x in members:
        for _ in range(3 * ts.N_c + 1):
            u = x[3] + problem.K @ x
            assert cfg.u_min - 1e-9 <= u <= cfg.u_max + 1e-9
            assert np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9)
            x = Acl @ x


# ---- MPC solve ------------------------------------------------------------------


def test_origin_is_optimal(problem):
    out = solve_mpc(problem, FollowerState(0.0, 0.0, 0.0, 0.0, 27.0, 0.0), np.zeros(20))
    assert out.feasible and out.u == 0.0 and out.cost == pytest.approx(0.0, abs=1e-12)
    assert out.inputs.shape == (20,) and out.states.shape == (21, 4)


def test_forecast_is_padded(problem):
    s = FollowerState(1.0, 0.5, 0.0, 0.0, 25.0, 0.0)
    a = solve_mpc(problem, s, [0.3, -0.5])
    b = solve_mpc(problem, s, [0.3] + [-0.5] * 19)
    assert a.cost == b.cost and np.array_equal(a.inputs, b.inputs)


def test_tight_input_bound_signals_infeasibility():
    prob = MpcProblem.build(config=ControllerConfig(u_min=-0.5))
    out = solve_mpc(prob, FollowerState(0.0, -8.0, 0.0, 0.0, 27.0, 0.0))
    assert not out.feasible


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(-3, 3), st.floats(-2, 1), st.floats(15, 30), st.floats(-10, 2))
def test_solution_respects_bounds_and_kkt(d, dv, a, v, u_prev):
    prob = _shared_problem()
    out = solve_mpc(prob, FollowerState(d, dv, a, 0.0, v, u_prev), np.zeros(20))
    if out.feasible:
        assert np.all(out.inputs >= prob.config.u_min) and np.all(out.inputs <= prob.config.u_max)
        assert max(out.kkt.values()) < 1e-6
        z = out.states
        assert np.all(z[1:, 1] >= prob.config.dv_bounds[0] - 1e-7)
        assert np.all(z[1:, 2] <= prob.config.a_bounds[1] + 1e-7)


_CACHE = {}


def _shared_problem():
    if "p" not in _CACHE:
        _CACHE["p"] = MpcProblem.build()
    return _CACHE["p"]


def test_plan_cost_matches_reported_cost(problem):
    s = FollowerState(3.0, -1.0, 0.2, 0.0, 25.0, 0.0)
    w = np.linspace(-0.5, 0.0, 20)
    out = solve_mpc(problem, s, w)
    du = np.diff(np.concatenate([[0.0], out.inputs]))
    z = problem.predict(np.array([3.0, -1.0, 0.2, 0.0]), du, w)
    assert problem.plan_cost(z, du) == pytest.approx(out.cost, rel=1e-9)


# ---- supervisor and fallback ------------------------------------------------------


def test_supervise_nominal():
    s = FollowerState(0.0, 0.0, 0.0, 0.0, 27.0)
    cons, mode, lower = supervise(s, 0.0, 100.0, None, True, PRM)
    assert mode is Mode.NOMINAL
    assert lower == pytest.approx(-28.9 + 2.0)
    assert cons.margin == pytest.approx(2.0)


def test_supervise_cutin_example():
    s = FollowerState(0.0, 0.0, 0.0, 0.0, 27.0)
    cons, mode, lower = supervise(s, 0.8, 112.0, 100.0, True, PRM)
    assert mode is Mode.CUTIN_ACTIVE
    assert lower == pytest.approx(-14.9)
    assert cons.margin == pytest.approx(14.0 / (2 - math.exp(-40)))


def test_supervise_fallback_modes():
    closing = FollowerState(1.0, -2.0, 0.0, 0.0, 27.0)
    _, mode, _ = supervise(closing, 0.0, 50.0, None, False, PRM)
    assert mode is Mode.FALLBACK_BRAKE and fallback_input(mode, ControllerConfig()) == -10.0
    opening = FollowerState(1.0, 2.0, 0.0, 0.0, 27.0)
    _, mode, _ = supervise(opening, 0.0, 50.0, None, False, PRM)
    assert mode is Mode.FALLBACK_ACCEL and fallback_input(mode, ControllerConfig()) == 2.0
    with pytest.raises(ValueError):
        fallback_input(Mode.NOMINAL, ControllerConfig())


def test_fallback_brake_held_until_feasible(problem):
    ctl = Controller(problem, stochastic=False)
    gap, v, vl, a = 8.0, 27.0, 19.0, 0.0
    modes, recovered = [], False
    for _ in range(100):
        out = ctl.step(gap, v, vl - v, a, [])
        if out.mode is Mode.FALLBACK_BRAKE:
            assert out.u == -10.0 and not recovered
        elif out.feasible:
            recovered = True
        if recovered:
            assert out.u >= problem.config.u_min and out.u <= problem.config.u_max
        modes.append(out.mode)
        gap += 0.1 * (vl - v)
        v += 0.1 * a
        a += 0.1 / PRM.zeta * (out.u - a)
    assert modes[0] is Mode.FALLBACK_BRAKE and recovered


def test_pc_latch():
    ctl = Controller(_shared_problem())
    assert not ctl.update_pc(0.03)
    assert ctl.update_pc(0.4) and ctl.pc_held == 0.4
    assert not ctl.update_pc(0.42)
    assert ctl.update_pc(0.0) and ctl.pc_held == 0.0
    conventional = Controller(_shared_problem(), stochastic=False)
    assert not conventional.update_pc(1.0) and conventional.pc_held == 0.0


def test_jerk_decreases_with_input_weight():
    peaks = []
    for cu in (0.1, 1.0, 10.0):
        prob = MpcProblem.build(config=ControllerConfig(c_u=cu))
        run = simulate_follower(prob, -5.0, 0.0, 0.0, 27.0, (), 200)
        peaks.append(np.max(np.abs(np.diff(np.concatenate([[0.0], run.u])))))
    assert peaks[0] > peaks[1] > peaks[2]


# ---- TTSIS bookkeeping ------------------------------------------------------------


def test_ttsis_flow_without_jump():
    s = TtsisState(delta=1.0, dv=-0.5, a=0.2, gap=29.9, v=27.0)
    new, jumped = ttsis_step(s, 0.0, u=0.5, a_lead=-0.3)
    A, B, G = discretize(PRM)
    expected = A @ [1.0, -0.5, 0.2] + B * 0.5 + G * -0.3
    assert not jumped
    np.testing.assert_allclose([new.delta, new.dv, new.a], expected, rtol=0, atol=1e-15)


def test_ttsis_jump_magnitude_and_edge_trigger():
    gap, v = 40.0, 27.0
    s = TtsisState(float(spacing_error(gap, 0, v, PRM)), 0.0, 0.0, gap, v)
    after = ttsis_reset(s, 1.0, PRM, 50.0)
    jump = s.delta - after.delta
    assert jump == pytest.approx(gap - gap / (2 - math.exp(-50)))
    assert jump == pytest.approx(gap / 2)
    first, jumped1 = ttsis_step(s, 1.0)
    second, jumped2 = ttsis_step(first, 1.0)
    assert jumped1 and not jumped2


@pytest.mark.parametrize("p", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_reset_region_invariance(p):
    """Resets keep delta within +/- (h v + L + d0) for gaps up to twice the
    desired gap, and never touch dv or a."""
    rng = np.random.default_rng(int(p * 100))
    for _ in range(500):
        v = rng.uniform(0, 40)
        bound = PRM.desired_gap(v)
        gap = rng.uniform(0, 2 * bound)
        s = TtsisState(gap - bound, rng.uniform(-15, 15), rng.uniform(-10, 3), gap, v)
        r = ttsis_reset(s, p, PRM)
        assert -bound - 1e-9 <= r.delta <= bound + 1e-9
        assert (r.dv, r.a, r.gap, r.v) == (s.dv, s.a, s.gap, s.v)
