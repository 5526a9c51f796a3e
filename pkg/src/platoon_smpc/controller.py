"""Conventional and stochastic MPC for one CACC follower.

State ``[delta, dv, a]`` (spacing error, speed difference to the preceding
vehicle, own acceleration) with a first-order engine lag. The MPC penalizes
input increments, so internally the state is augmented with the previous
input and the decision variables are ``du[0..N-1]``. A dual-mode terminal
weight and terminal set make the finite-horizon problem equivalent to the
infinite-horizon one and recursively feasible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .qp import QPResult, solve_qp


class ConfigurationError(ValueError):
    pass


class DesignError(RuntimeError):
    """Terminal ingredients could not be computed."""


@dataclass(frozen=True)
class VehicleParams:
    h: float = 0.7
    d0: float = 5.0
    L: float = 5.0
    zeta: float = 0.5
    Ts: float = 0.1
    delta_s: float = 2.0

    def __post_init__(self):
        if self.h <= 0 or self.zeta <= 0 or self.Ts <= 0:
            raise ConfigurationError("h, zeta and Ts must be positive")
        if not self.d0 > self.delta_s > 0:
            raise ConfigurationError("need d0 > delta_s > 0")
        if self.L <= 0:
            raise ConfigurationError("vehicle length must be positive")

    @property
    def standstill(self) -> float:
        return self.L + self.d0

    def desired_gap(self, v: float) -> float:
        return self.h * v + self.L + self.d0


@dataclass(frozen=True)
class ControllerConfig:
    N: int = 20
    c_delta: float = 1.0
    c_v: float = 0.5
    c_u: float = 0.1
    u_min: float = -10.0
    u_max: float = 2.0
    dv_bounds: Tuple[float, float] = (-15.0, 15.0)
    a_bounds: Tuple[float, float] = (-10.0, 3.0)
    alpha: float = 50.0
    b_sign: float = 1.0
    terminal_delta_box: Tuple[float, float] = (-50.0, 50.0)
    use_terminal_set: bool = True
    guard_threshold: float = 0.05
    brake: float = -10.0
    nc_cap: int = 500

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("horizon N must be at least 1")
        if self.c_delta < 0 or self.c_v < 0 or self.c_u <= 0:
            raise ConfigurationError("weights: c_delta, c_v >= 0 and c_u > 0")
        if not self.u_min < 0 < self.u_max:
            raise ConfigurationError("input bounds must bracket zero")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.b_sign not in (1.0, -1.0):
            raise ConfigurationError("b_sign must be +1 or -1")


def spacing_error(x_prev, x_host, v_host, params: VehicleParams, pc=0.0, alpha=50.0):
    """Spacing error with the gap scaled down by the cut-in probability.

    At ``pc = 0`` this is the usual constant-time-headway error; as ``pc``
    grows the measured gap is divided by up to ~2, so the controller acts
    as if it needed twice the distance.
    """
    den = 2.0 - np.exp(-alpha * np.asarray(pc, dtype=float))
    return (np.asarray(x_prev) - np.asarray(x_host)) / den - params.h * np.asarray(v_host) - params.L - params.d0


def gap_divisor(pc: float, alpha: float) -> float:
    return 2.0 - math.exp(-alpha * pc)


def discretize(params: VehicleParams, b_sign: float = 1.0):
    """Forward-Euler matrices (A, B, G) of the follower error dynamics."""
    Ts, zeta, h = params.Ts, params.zeta, params.h
    if Ts >= zeta:
        raise ConfigurationError(f"Ts = {Ts} must be smaller than zeta = {zeta}")
    A = np.array([[1.0, Ts, -h * Ts], [0.0, 1.0, -Ts], [0.0, 0.0, 1.0 - Ts / zeta]])
    B = np.array([0.0, 0.0, b_sign * Ts / zeta])
    G = np.array([0.0, Ts, 0.0])
    return A, B, G


def _stabilizable(A, B, tol=1e-9) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1 - tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-8) < n:
                return False
    return True


def solve_lyapunov(Acl: np.ndarray, W: np.ndarray) -> np.ndarray:
    """P with P = Acl' P Acl + W (Kronecker form; small n only)."""
    n = Acl.shape[0]
    M = np.eye(n * n) - np.kron(Acl.T, Acl.T)
    P = np.linalg.solve(M, W.reshape(-1)).reshape(n, n)
    return 0.5 * (P + P.T)


def terminal_design(A, B, Q, R, max_iter: int = 10_000, tol: float = 1e-13):
    """LQR gain K (u = Kx) and the tail-cost weight Qbar of u = Kx."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not _stabilizable(A, B):
        raise DesignError("(A, B) is not stabilizable")
    P = Q.copy()
    for it in range(max_iter):
        S = R + B.T @ P @ B
        K = -np.linalg.solve(S, B.T @ P @ A)
        Pn = Q + A.T @ P @ A + A.T @ P @ B @ K
        Pn = 0.5 * (Pn + Pn.T)
        if not np.all(np.isfinite(Pn)):
            raise DesignError("Riccati iteration diverged")
        if np.max(np.abs(Pn - P)) <= tol * max(1.0, np.max(np.abs(Pn))):
            P = Pn
            break
        P = Pn
    else:
        raise DesignError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    Acl = A + B @ K
    rho = max(abs(np.linalg.eigvals(Acl)))
    if rho >= 1:
        raise DesignError(f"closed loop not stable (spectral radius {rho:.6f})")
    Qbar = solve_lyapunov(Acl, Q + K.T @ R @ K)
    return K, Qbar


@dataclass(frozen=True)
class TerminalSet:
    """Rows ``lo <= rows @ x <= hi`` describing Omega, built for i = 0..N_c."""

    N_c: int
    rows: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    kind: Tuple[str, ...]
    step: np.ndarray

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        y = self.rows @ x
        return bool(np.all(y >= self.lo - tol) and np.all(y <= self.hi + tol))


def _box_extremes(c: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    return float(np.sum(np.minimum(c * lo, c * hi))), float(np.sum(np.maximum(c * lo, c * hi)))


def terminal_set(
    A,
    B,
    K,
    u_min: float,
    u_max: float,
    x_min,
    x_max,
    input_row=None,
    extra_rows=(),
    cap: int = 500,
) -> TerminalSet:
    """Terminal set rows for i = 0..N_c under the feedback u = Kx.

    The constrained outputs are the input (``input_row @ x``, default
    ``K @ x``), every state coordinate against ``[x_min, x_max]``, and any
    ``extra_rows`` given as ``(row, lo, hi)``. N_c is the smallest index for
    which every output at step N_c + 1 stays within its bounds over the
    whole state box, so the rows for later steps are implied.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    K = np.asarray(K, dtype=float).reshape(-1, n)
    Acl = A + B @ K
    rho = max(abs(np.linalg.eigvals(Acl)))
    if rho >= 1:
        raise DesignError(f"A + BK is not stable (spectral radius {rho:.6f})")
    x_min = np.asarray(x_min, dtype=float)
    x_max = np.asarray(x_max, dtype=float)
    if not (np.all(np.isfinite(x_min)) and np.all(np.isfinite(x_max))):
        raise DesignError("terminal set needs a finite state box")
    c_in = K[0] if input_row is None else np.asarray(input_row, dtype=float).ravel()
    outputs = [(c_in, u_min, u_max, "input")]
    outputs += [(np.eye(n)[j], x_min[j], x_max[j], f"x{j}") for j in range(n)]
    outputs += [(np.asarray(r, dtype=float), lo, hi, "extra") for r, lo, hi in extra_rows]

    N_c = None
    Ap = Acl.copy()  # Acl^(j+1)
    for j in range(cap + 1):
        ok = True
        for c, lo, hi, _ in outputs:
            emin, emax = _box_extremes(c @ Ap, x_min, x_max)
            if emin < lo - 1e-12 or emax > hi + 1e-12:
                ok = False
                break
        if ok:
            N_c = j
            break
        Ap = Ap @ Acl
    if N_c is None:
        raise DesignError(f"N_c not found below {cap} (spectral radius {rho:.6f})")

    rows, lo, hi, kind, step = [], [], [], [], []
    Ai = np.eye(n)
    for i in range(N_c + 1):
        for c, l, u, k in outputs:
            rows.append(c @ Ai)
            lo.append(l)
            hi.append(u)
            kind.append(k)
            step.append(i)
        Ai = Ai @ Acl
    return TerminalSet(N_c, np.array(rows), np.array(lo, dtype=float), np.array(hi, dtype=float), tuple(kind), np.array(step))


class Mode(str, Enum):
    NOMINAL = "nominal"
    CUTIN_ACTIVE = "cutin_active"
    FALLBACK_BRAKE = "fallback_brake"
    FALLBACK_ACCEL = "fallback_accel"


@dataclass(frozen=True)
class FollowerState:
    delta: float
    dv: float
    a: float
    x: float = 0.0
    v: float = 0.0
    u_prev: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.delta, self.dv, self.a])


@dataclass(frozen=True)
class SpacingConstraint:
    """Lower bound on the controller's spacing error, as a function of the
    predicted host speed: ``delta >= margin - h*v - L - d0``.

    ``margin`` is ``(delta_s + (x_prev - x_rv)) / divisor``: the physical
    safe-gap requirement mapped into the (possibly stochastic) spacing-error
    frame the controller works in.
    """

    margin: float
    mode: Mode = Mode.NOMINAL


@dataclass
class ControllerOutput:
    u: float
    mode: Mode
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    feasible: bool
    relaxed: bool = False
    kkt: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0


@dataclass
class MpcProblem:
    """Condensed QP data for one follower; rebuilt only when parameters change."""

    params: VehicleParams
    config: ControllerConfig
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    Az: np.ndarray
    Bz: np.ndarray
    Gz: np.ndarray
    Q: np.ndarray
    R: float
    K: np.ndarray
    Qbar: np.ndarray
    terminal: Optional[TerminalSet]
    Phi: np.ndarray = None
    Gam: np.ndarray = None
    Psi: np.ndarray = None
    H: np.ndarray = None
    Hchol: np.ndarray = None
    Qt: np.ndarray = None

    @property
    def N(self) -> int:
        return self.config.N

    @property
    def N_c(self) -> Optional[int]:
        return None if self.terminal is None else self.terminal.N_c

    @classmethod
    def build(cls, params: VehicleParams = VehicleParams(), config: ControllerConfig = ControllerConfig()):
        A, B, G = discretize(params, config.b_sign)
        Az = np.zeros((4, 4))
        Az[:3, :3] = A
        Az[:3, 3] = B
        Az[3, 3] = 1.0
        Bz = np.append(B, 1.0)
        Gz = np.append(G, 0.0)
        Q = np.diag([config.c_delta, config.c_v, 0.0, 0.0])
        R = float(config.c_u)
        K, Qbar = terminal_design(Az, Bz, Q, R)
        K = K.reshape(4)

        term = None
        if config.use_terminal_set:
            ulo, uhi = config.u_min, config.u_max
            x_min = [config.terminal_delta_box[0], config.dv_bounds[0], config.a_bounds[0], ulo]
            x_max = [config.terminal_delta_box[1], config.dv_bounds[1], config.a_bounds[1], uhi]
            # gap row checked at its most demanding rhs (preceding vehicle at rest)
            gap = (np.array([1.0, -params.h, 0.0, 0.0]), params.delta_s - params.L - params.d0, np.inf)
            term = terminal_set(
                Az, Bz, K[None, :], ulo, uhi, x_min, x_max,
                input_row=np.eye(4)[3] + K, extra_rows=[gap], cap=config.nc_cap,
            )
        prob = cls(params, config, A, B, G, Az, Bz, Gz, Q, R, K, Qbar, term)
        prob._condense()
        return prob

    def _condense(self):
        N, nz = self.N, 4
        Phi = np.zeros((N + 1, nz, nz))
        Gam = np.zeros((N + 1, nz, N))
        Psi = np.zeros((N + 1, nz, N))
        Phi[0] = np.eye(nz)
        for k in range(N):
            Phi[k + 1] = self.Az @ Phi[k]
            Gam[k + 1] = self.Az @ Gam[k]
            Gam[k + 1][:, k] = self.Bz
            Psi[k + 1] = self.Az @ Psi[k]
            Psi[k + 1][:, k] = self.Gz
        Qt = np.array([self.Q] * N + [self.Qbar])
        Hh = np.einsum("kin,kij,kjm->nm", Gam, Qt, Gam) + self.R * np.eye(N)
        self.Phi, self.Gam, self.Psi, self.Qt = Phi, Gam, Psi, Qt
        self.H = 2.0 * Hh
        self.Hchol = np.linalg.cholesky(self.H)

    def predict(self, z0: np.ndarray, du: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.Phi @ z0 + self.Gam @ du + self.Psi @ w

    def plan_cost(self, z: np.ndarray, du: np.ndarray) -> float:
        """Stage costs over the horizon plus the terminal weight."""
        stage = sum(z[k] @ self.Q @ z[k] for k in range(self.N)) + self.R * float(du @ du)
        return float(stage + z[self.N] @ self.Qbar @ z[self.N])

    def qp_data(self, z0, w, constraint: SpacingConstraint, v_lead0: float, terminal: bool = True):
        """Objective (H, f, const) and rows C du >= b for one solve."""
        cfg, prm, N = self.config, self.params, self.N
        s = self.Phi @ z0 + self.Psi @ w  # free response, (N+1, 4)
        f = 2.0 * np.einsum("kij,kj,kin->n", self.Qt, s, self.Gam)
        const = float(np.einsum("ki,kij,kj->", s[1:], self.Qt[1:], s[1:]) + z0 @ self.Q @ z0)
        rows, rhs = [], []
        # input box: u_k = u_prev + sum_{j<=k} du_j
        tri = np.tril(np.ones((N, N)))
        rows += [tri, -tri]
        rhs += [np.full(N, cfg.u_min - z0[3]), np.full(N, z0[3] - cfg.u_max)]
        # path constraints on z_1..z_N
        G1 = self.Gam[1:]
        s1 = s[1:]
        vl = v_lead0 + prm.Ts * np.cumsum(w)  # preceding speed at steps 1..N
        gap_lb = constraint.margin - prm.h * vl - prm.L - prm.d0
        grow = np.array([1.0, -prm.h, 0.0, 0.0])
        rows.append(np.einsum("i,kin->kn", grow, G1))
        rhs.append(gap_lb - s1 @ grow)
        for j, (lo, hi) in ((1, cfg.dv_bounds), (2, cfg.a_bounds)):
            if np.isfinite(lo):
                rows.append(G1[:, j, :])
                rhs.append(lo - s1[:, j])
            if np.isfinite(hi):
                rows.append(-G1[:, j, :])
                rhs.append(s1[:, j] - hi)
        if terminal and self.terminal is not None:
            T = self.terminal
            sN, GN = s[N], self.Gam[N]
            lo = T.lo.copy()
            # gap rows use the terminal preceding speed (constant in mode 2)
            is_gap = np.array([k == "extra" for k in T.kind])
            lo[is_gap] = gap_lb[-1]
            TG = T.rows @ GN
            Ts_ = T.rows @ sN
            fin_lo = np.isfinite(lo)
            fin_hi = np.isfinite(T.hi)
            rows += [TG[fin_lo], -TG[fin_hi]]
            rhs += [lo[fin_lo] - Ts_[fin_lo], Ts_[fin_hi] - T.hi[fin_hi]]
        return f, const, np.vstack(rows), np.concatenate(rhs)


def forecast_horizon(forecast: Sequence[float], N: int) -> np.ndarray:
    """Pad a disturbance forecast to N steps by holding its last value."""
    w = np.asarray(forecast, dtype=float).ravel()
    if w.size == 0:
        return np.zeros(N)
    if w.size >= N:
        return w[:N].copy()
    return np.concatenate([w, np.full(N - w.size, w[-1])])


def solve_mpc(
    problem: MpcProblem,
    state: FollowerState,
    disturbance_forecast: Sequence[float] = (),
    constraint: Optional[SpacingConstraint] = None,
    terminal: bool = True,
) -> ControllerOutput:
    """Solve one MPC step; infeasibility is reported, not raised."""
    prm = problem.params
    if constraint is None:
        constraint = SpacingConstraint(prm.delta_s)
    w = forecast_horizon(disturbance_forecast, problem.N)
    z0 = np.array([state.delta, state.dv, state.a, state.u_prev])
    f, const, C, b = problem.qp_data(z0, w, constraint, state.v + state.dv, terminal)
    res: QPResult = solve_qp(problem.H, f, C, b, L=problem.Hchol)
    du = res.x
    z = problem.predict(z0, du, w)
    # the QP meets the input box up to round-off; clip so u is exactly inside
    inputs = np.clip(state.u_prev + np.cumsum(du), problem.config.u_min, problem.config.u_max)
    cost = res.objective + const
    return ControllerOutput(
        u=float(inputs[0]),
        mode=constraint.mode,
        states=z,
        inputs=inputs,
        cost=float(cost),
        feasible=res.feasible,
        relaxed=not terminal,
        kkt=res.kkt,
        iterations=res.iterations,
    )


def supervise(
    state: FollowerState,
    pc: float,
    x_prev: float,
    x_rv: Optional[float],
    plan_feasible: bool,
    params: VehicleParams,
    alpha: float = 50.0,
    tightened: Optional[bool] = None,
):
    """Spacing-error bound and mode for the current cycle.

    Returns ``(SpacingConstraint, Mode, delta_lower_bound)``. The bound is
    ``-h v - L - d0 + delta_s`` with no cut-in threat and
    ``-h v - L - d0 + (x_prev - x_rv) + delta_s`` while one is suspected
    (``pc > 0``, or ``tightened=True`` for a vehicle already in the lane).
    When no feasible plan exists the mode switches to a fallback: full
    braking if the gap is short or closing, full acceleration otherwise.
    """
    if tightened is None:
        tightened = pc > 0
    base = -params.h * state.v - params.L - params.d0
    offset = 0.0
    mode = Mode.NOMINAL
    if tightened and x_rv is not None:
        offset = x_prev - x_rv
        mode = Mode.CUTIN_ACTIVE
    lower = base + offset + params.delta_s
    if not plan_feasible:
        mode = Mode.FALLBACK_BRAKE if (state.delta < 0 or state.dv < 0) else Mode.FALLBACK_ACCEL
    margin = (params.delta_s + offset) / gap_divisor(pc, alpha)
    return SpacingConstraint(margin, mode), mode, lower


def fallback_input(mode: Mode, config: ControllerConfig) -> float:
    if mode is Mode.FALLBACK_BRAKE:
        return config.brake
    if mode is Mode.FALLBACK_ACCEL:
        return config.u_max
    raise ValueError(f"{mode} is not a fallback mode")


# ---- time-triggered stochastic impulsive bookkeeping ---------------------


@dataclass(frozen=True)
class TtsisState:
    """Controller-frame state plus what the reset map needs."""

    delta: float
    dv: float
    a: float
    gap: float
    v: float
    pc_held: float = 0.0


def ttsis_reset(state: TtsisState, pc: float, params: VehicleParams, alpha: float = 50.0) -> TtsisState:
    """Reset map: recompute the spacing error from the gap with a new P_c."""
    delta = float(spacing_error(state.gap, 0.0, state.v, params, pc, alpha))
    return replace(state, delta=delta, pc_held=pc)


def ttsis_guard(state: TtsisState, pc: float, threshold: float = 0.05) -> bool:
    return abs(pc - state.pc_held) > threshold


def ttsis_step(
    state: TtsisState,
    pc: float,
    u: float = 0.0,
    a_lead: float = 0.0,
    params: VehicleParams = VehicleParams(),
    alpha: float = 50.0,
    threshold: float = 0.05,
    b_sign: float = 1.0,
):
    """One 0.1 s cycle: reset if the guard fires, then flow one Euler step.

    Returns ``(new_state, jumped)``.
    """
    jumped = ttsis_guard(state, pc, threshold)
    if jumped:
        state = ttsis_reset(state, pc, params, alpha)
    A, B, G = discretize(params, b_sign)
    x = A @ np.array([state.delta, state.dv, state.a]) + B * u + G * a_lead
    gap = state.gap + params.Ts * state.dv
    v = state.v + params.Ts * state.a
    return TtsisState(float(x[0]), float(x[1]), float(x[2]), gap, v, state.pc_held), jumped


class Controller:
    """One follower's controller: holds the previous input and P_c latch."""

    def __init__(self, problem: MpcProblem, stochastic: bool = True):
        self.problem = problem
        self.stochastic = stochastic
        self.pc_held = 0.0
        self.u_prev = 0.0

    @property
    def config(self) -> ControllerConfig:
        return self.problem.config

    def update_pc(self, pc: float) -> bool:
        """Latch a new P_c when it moves past the guard threshold."""
        if not self.stochastic:
            return False
        if abs(pc - self.pc_held) > self.config.guard_threshold or (pc == 0.0 and self.pc_held != 0.0):
            self.pc_held = pc
            return True
        return False

    def step(
        self,
        gap: float,
        v: float,
        dv: float,
        a: float,
        forecast: Sequence[float],
        x_rv_offset: Optional[float] = None,
        suspect: bool = False,
    ) -> ControllerOutput:
        """Compute the input for this cycle.

        ``gap`` is x_prev - x_host; ``x_rv_offset`` is x_prev - x_rv when a
        suspicious vehicle is tracked. ``suspect`` marks that the tightened
        bound applies even with zero P_c (used by the non-predictive leg).
        """
        prm, cfg = self.problem.params, self.config
        pc = self.pc_held if self.stochastic else 0.0
        delta = float(spacing_error(gap, 0.0, v, prm, pc, cfg.alpha))
        state = FollowerState(delta, dv, a, 0.0, v, self.u_prev)
        x_rv = None if x_rv_offset is None else gap - x_rv_offset
        tight = pc > 0 or suspect
        cons, mode, _ = supervise(state, pc, gap, x_rv, True, prm, cfg.alpha, tightened=tight)
        out = solve_mpc(self.problem, state, forecast, cons, terminal=True)
        if not out.feasible:
            out = solve_mpc(self.problem, state, forecast, cons, terminal=False)
        if not out.feasible:
            _, mode, _ = supervise(state, pc, gap, x_rv, False, prm, cfg.alpha, tightened=tight)
            u = fallback_input(mode, cfg)
            out = ControllerOutput(u, mode, out.states, out.inputs, float("nan"), False, True, out.kkt, out.iterations)
        self.u_prev = out.u
        return out
