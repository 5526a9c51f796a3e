"""Closed-loop cut-in scenario: leader, host follower and one interferer.

The host is simulated twice against the identical leader and interferer:
once with the stochastic MPC fed by the cut-in predictor, once with the
conventional MPC (P_c forced to zero, tightened bound only once the
interferer physically enters the lane).

Positions are front-bumper positions along the host lane; lateral 0 is the
host lane centre and the interferer starts one lane to the left.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .controller import (
    ConfigurationError,
    Controller,
    ControllerConfig,
    ControllerOutput,
    MpcProblem,
    VehicleParams,
    spacing_error,
)
from .cutin import LANE_WIDTH, compute_pc
from .kinematics import DURATION_ENVELOPE, KinematicVehicle, generate_lane_change, kinematic_step  # noqa: F401
from .predictor import LaneChangePredictor, PredictionFan, trace_channels
from .signals import SAMPLE_INTERVAL

log = logging.getLogger(__name__)

MANEUVERS = {"average_5p5s": 5.5, "harsh_3p5s": 3.5}
PC_DETECTION = 0.5


class ScenarioError(ValueError):
    """Malformed scenario description; ``keys`` lists the offending entries."""

    def __init__(self, problems: Sequence[str]):
        self.keys = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.keys))


@dataclass(frozen=True)
class LeaderSegment:
    t0: float
    t1: float
    accel: float


@dataclass(frozen=True)
class PlatoonConfig:
    speed: float = 27.0
    initial_delta: float = 0.0
    initial_dv: float = 0.0
    leader_profile: Tuple[LeaderSegment, ...] = ()


@dataclass(frozen=True)
class InterfererConfig:
    enabled: bool = True
    maneuver: str = "average_5p5s"
    duration: Optional[float] = None
    start_time: float = 3.0
    longitudinal_offset: float = 13.0  # front bumper ahead of the host's at t = 0
    speed_offset: float = 0.0
    length: float = 5.0
    width: float = 1.8

    @property
    def maneuver_duration(self) -> float:
        if self.maneuver == "custom":
            return float(self.duration)
        return MANEUVERS[self.maneuver]


@dataclass(frozen=True)
class PredictorConfig:
    source: str = "model"  # "model" or "oracle"
    model_path: Optional[str] = None
    oracle_halfwidth: float = 0.2
    disturbance: str = "nar"  # "nar", "oracle" or "zero"


@dataclass(frozen=True)
class Scenario:
    platoon: PlatoonConfig = PlatoonConfig()
    interferer: InterfererConfig = InterfererConfig()
    vehicle: VehicleParams = VehicleParams()
    controller: ControllerConfig = ControllerConfig()
    predictor: PredictorConfig = PredictorConfig()
    lane_width: float = LANE_WIDTH
    duration: float = 20.0
    seed: int = 0
    name: str = "scenario"

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return parse_scenario(d)

    def to_dict(self) -> dict:
        ctl = {**dataclasses.asdict(self.vehicle), **dataclasses.asdict(self.controller)}
        plat = dataclasses.asdict(self.platoon)
        plat["leader_profile"] = [dataclasses.asdict(s) for s in self.platoon.leader_profile]
        return {
            "name": self.name,
            "seed": self.seed,
            "duration": self.duration,
            "lane_width": self.lane_width,
            "platoon": plat,
            "interferer": dataclasses.asdict(self.interferer),
            "controller": ctl,
            "predictor": {k: v for k, v in dataclasses.asdict(self.predictor).items() if k != "model_path"},
            "predictor_model_path": self.predictor.model_path,
        }

    def replace(self, **changes) -> "Scenario":
        """Copy with overrides; keys may be dotted (``controller.alpha``)."""
        d = self.to_dict()
        for key, value in changes.items():
            target = d
            parts = key.split(".")
            for p in parts[:-1]:
                target = target[p]
            target[parts[-1]] = value
        return parse_scenario(d)


_TOP_KEYS = {"name", "seed", "duration", "lane_width", "platoon", "interferer", "controller", "predictor", "predictor_model_path"}


def _block(d, name, klass, problems, rename=None):
    raw = d.get(name, {}) or {}
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected an object")
        return {}
    known = {f.name for f in dataclasses.fields(klass)}
    out = {}
    for k, v in raw.items():
        if k not in known:
            problems.append(f"{name}.{k}: unknown key")
        else:
            out[k] = v
    return out


def _make(klass, kwargs, prefix, problems):
    try:
        defaults = {f.name: f.default for f in dataclasses.fields(klass)}
        clean = {}
        for k, v in kwargs.items():
            dflt = defaults.get(k)
            if isinstance(dflt, bool):
                if not isinstance(v, bool):
                    problems.append(f"{prefix}.{k}: expected true/false")
                    continue
            elif isinstance(dflt, (int, float)) and not isinstance(dflt, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    problems.append(f"{prefix}.{k}: expected a number")
                    continue
                if isinstance(dflt, int) and float(v) != int(v):
                    problems.append(f"{prefix}.{k}: expected an integer")
                    continue
                v = type(dflt)(v)
            elif isinstance(dflt, tuple) and k != "leader_profile":
                if not (isinstance(v, (list, tuple)) and len(v) == len(dflt)):
                    problems.append(f"{prefix}.{k}: expected a list of {len(dflt)} numbers")
                    continue
                v = tuple(float(x) for x in v)
            clean[k] = v
        return klass(**clean)
    except (ConfigurationError, TypeError, ValueError) as exc:
        problems.append(f"{prefix}: {exc}")
        return klass()


def parse_scenario(d: dict) -> Scenario:
    """Validate a scenario dict; every problem is collected before raising."""
    if not isinstance(d, dict):
        raise ScenarioError(["<root>: expected an object"])
    problems: List[str] = [f"{k}: unknown key" for k in d if k not in _TOP_KEYS]

    plat_raw = _block(d, "platoon", PlatoonConfig, problems)
    segs = []
    for i, s in enumerate(plat_raw.pop("leader_profile", []) or []):
        if not (isinstance(s, dict) and set(s) == {"t0", "t1", "accel"}):
            problems.append(f"platoon.leader_profile[{i}]: expected keys t0, t1, accel")
            continue
        if not s["t1"] > s["t0"]:
            problems.append(f"platoon.leader_profile[{i}]: t1 must exceed t0")
            continue
        segs.append(LeaderSegment(float(s["t0"]), float(s["t1"]), float(s["accel"])))
    platoon = _make(PlatoonConfig, plat_raw, "platoon", problems)
    platoon = dataclasses.replace(platoon, leader_profile=tuple(segs))
    if platoon.speed <= 0:
        problems.append("platoon.speed: must be positive")

    inter = _make(InterfererConfig, _block(d, "interferer", InterfererConfig, problems), "interferer", problems)
    if inter.maneuver not in (*MANEUVERS, "custom"):
        problems.append(f"interferer.maneuver: must be one of {sorted(MANEUVERS) + ['custom']}")
    elif inter.maneuver == "custom":
        lo, hi = DURATION_ENVELOPE
        if inter.duration is None or not lo <= float(inter.duration) <= hi:
            problems.append(f"interferer.duration: custom maneuvers need a duration in [{lo}, {hi}] s")

    ctl_raw = d.get("controller", {}) or {}
    if not isinstance(ctl_raw, dict):
        problems.append("controller: expected an object")
        ctl_raw = {}
    vkeys = {f.name for f in dataclasses.fields(VehicleParams)}
    ckeys = {f.name for f in dataclasses.fields(ControllerConfig)}
    for k in ctl_raw:
        if k not in vkeys | ckeys:
            problems.append(f"controller.{k}: unknown key")
    vehicle = _make(VehicleParams, {k: v for k, v in ctl_raw.items() if k in vkeys}, "controller", problems)
    controller = _make(ControllerConfig, {k: v for k, v in ctl_raw.items() if k in ckeys}, "controller", problems)

    pred_raw = _block(d, "predictor", PredictorConfig, problems)
    pred_raw.pop("model_path", None)
    predictor = _make(PredictorConfig, pred_raw, "predictor", problems)
    path = d.get("predictor_model_path")
    if path is not None and not isinstance(path, str):
        problems.append("predictor_model_path: expected a string or null")
        path = None
    predictor = dataclasses.replace(predictor, model_path=path)
    if predictor.source not in ("model", "oracle"):
        problems.append("predictor.source: must be 'model' or 'oracle'")
    if predictor.disturbance not in ("nar", "oracle", "zero"):
        problems.append("predictor.disturbance: must be 'nar', 'oracle' or 'zero'")

    top = {}
    for key, kind in (("seed", int), ("duration", float), ("lane_width", float), ("name", str)):
        if key in d:
            v = d[key]
            ok = isinstance(v, str) if kind is str else (isinstance(v, (int, float)) and not isinstance(v, bool))
            if kind is int and ok and float(v) != int(v):
                ok = False
            if not ok:
                problems.append(f"{key}: expected {kind.__name__}")
            else:
                top[key] = kind(v)
    if top.get("duration", 1.0) <= 0:
        problems.append("duration: must be positive")
    if problems:
        raise ScenarioError(problems)
    return Scenario(platoon, inter, vehicle, controller, predictor, **top)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError([f"<file>: not valid JSON ({exc})"]) from None
    return parse_scenario(d)


# ---- simulation ------------------------------------------------------------


@dataclass
class LegLog:
    t: List[float] = field(default_factory=list)
    delta: List[float] = field(default_factory=list)
    delta_ctrl: List[float] = field(default_factory=list)
    gap: List[float] = field(default_factory=list)
    v: List[float] = field(default_factory=list)
    a: List[float] = field(default_factory=list)
    u: List[float] = field(default_factory=list)
    pc: List[float] = field(default_factory=list)
    mode: List[str] = field(default_factory=list)
    cost: List[float] = field(default_factory=list)
    feasible: List[bool] = field(default_factory=list)
    preceding: List[str] = field(default_factory=list)

    def array(self, name) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)


@dataclass
class ScenarioResult:
    scenario: Scenario
    legs: Dict[str, LegLog]
    crossing_index: Optional[int]
    metrics: Dict[str, Dict[str, object]]
    interferer_xy: np.ndarray

    @property
    def crossing_time(self) -> Optional[float]:
        return None if self.crossing_index is None else self.crossing_index * self.scenario.vehicle.Ts


@dataclass
class _World:
    """Leader and interferer trajectories shared by both legs."""

    n: int
    leader: np.ndarray  # (n, 3): x_front, v, a
    rv: Optional[Dict[str, np.ndarray]]  # trace-frame channels of the interferer
    rv_front: Optional[np.ndarray]
    rv_y: Optional[np.ndarray]
    rv_vx: Optional[np.ndarray]
    rv_dx: float
    crossing: Optional[int]


def _leader_accel(profile: Sequence[LeaderSegment], t: float) -> float:
    return float(sum(s.accel for s in profile if s.t0 <= t + 1e-9 < s.t1))


def build_world(sc: Scenario) -> _World:
    prm = sc.vehicle
    Ts = prm.Ts
    n = int(round(sc.duration / Ts)) + 1
    v_host0 = sc.platoon.speed - sc.platoon.initial_dv
    leader = np.zeros((n, 3))
    leader[0] = (prm.desired_gap(v_host0) + sc.platoon.initial_delta, sc.platoon.speed, 0.0)
    for k in range(n):
        leader[k, 2] = _leader_accel(sc.platoon.leader_profile, k * Ts)
        if k + 1 < n:
            leader[k + 1, 0] = leader[k, 0] + Ts * leader[k, 1]
            leader[k + 1, 1] = leader[k, 1] + Ts * leader[k, 2]

    it = sc.interferer
    if not it.enabled:
        return _World(n, leader, None, None, None, None, 0.0, None)
    D = it.maneuver_duration
    post = max(sc.duration - it.start_time - D, 0.0) + 1.0
    recs = generate_lane_change(
        D, sc.platoon.speed + it.speed_offset, sc.lane_width, seed=sc.seed,
        direction=-1, pre_time=it.start_time, post_time=post,
    )
    ch = trace_channels(recs)
    ch = {k: v[:n] for k, v in ch.items()}
    if len(ch["x"]) < n:
        raise ConfigurationError("interferer trace shorter than the scenario")
    dx = it.longitudinal_offset - it.length / 2  # world x of the trace origin (vehicle centre)
    front = ch["x"] + dx + it.length / 2
    y = sc.lane_width + ch["y"]
    vx = ch["speed"] * np.cos(ch["heading"])
    inside = np.nonzero(y <= sc.lane_width / 2)[0]
    crossing = int(inside[0]) if inside.size else None
    return _World(n, leader, ch, front, y, vx, dx, crossing)


def _oracle_fan(world: _World, k: int, hw: float, steps: int = 10) -> PredictionFan:
    idx = np.minimum(np.arange(k + 1, k + steps + 1), world.n - 1)
    return PredictionFan(world.rv["x"][idx] + world.rv_dx, world.rv_y[idx], np.full(steps, hw), np.full(steps, hw), k * SAMPLE_INTERVAL)


def _forecast(sc: Scenario, world: _World, k: int, use_rv: bool, predictor, N: int) -> np.ndarray:
    src = sc.predictor.disturbance
    if src == "zero":
        return np.zeros(N)
    if use_rv:
        acc = world.rv["ax"]
    else:
        acc = world.leader[:, 2]
    if src == "oracle":
        idx = np.minimum(np.arange(k, k + N), world.n - 1)
        return acc[idx].copy()
    hist = acc[: k + 1]
    if predictor is None or hist.size < predictor.delays + 1:
        return np.full(N, acc[k])
    return predictor.predict_inputs({"ax": hist}, ("ax",))["ax"]


def _run_leg(sc: Scenario, world: _World, problem: MpcProblem, stochastic: bool, predictor) -> LegLog:
    prm, cfg = sc.vehicle, sc.controller
    Ts = prm.Ts
    ctl = Controller(problem, stochastic=stochastic)
    x, v, a = 0.0, sc.platoon.speed - sc.platoon.initial_dv, 0.0
    log_ = LegLog()
    plan_v: Optional[np.ndarray] = None
    it = sc.interferer
    for k in range(world.n):
        rv_ahead = world.rv is not None and world.crossing is not None and k >= world.crossing
        if rv_ahead:
            x_p, v_p = world.rv_front[k], world.rv_vx[k]
            name = "interferer"
        else:
            x_p, v_p = world.leader[k, 0], world.leader[k, 1]
            name = "leader"
        gap, dv = x_p - x, v_p - v
        suspicious = world.rv is not None and not rv_ahead
        x_rv_offset = x_p - world.rv_front[k] if suspicious else None

        pc = 0.0
        if stochastic and suspicious:
            fan = None
            if sc.predictor.source == "oracle":
                fan = _oracle_fan(world, k, sc.predictor.oracle_halfwidth)
            elif k >= predictor.delays:
                hist = {c: world.rv[c][: k + 1] for c in world.rv if c != "t"}
                fan = predictor.predict_fan(hist, k * Ts).translated(world.rv_dx, sc.lane_width)
            if fan is not None:
                S = fan.steps
                vf = plan_v[:S] if plan_v is not None and plan_v.size >= S else np.full(S, v)
                xf = x + Ts * np.cumsum(vf)
                host = np.column_stack([xf, np.zeros(S), vf])
                pc = compute_pc(fan, host, prm.h, prm.d0, sc.lane_width, it.length, it.width).value
        if stochastic:
            if suspicious:
                ctl.update_pc(pc)
            else:
                ctl.pc_held = 0.0
        suspect = (not stochastic) and suspicious and (world.rv_y[k] - it.width / 2 < sc.lane_width / 2)

        w = _forecast(sc, world, k, rv_ahead, predictor, problem.N)
        out: ControllerOutput = ctl.step(gap, v, dv, a, w, x_rv_offset, suspect)
        if out.mode.value.startswith("fallback"):
            plan_v = None
        else:
            wN = np.resize(w, problem.N) if w.size < problem.N else w[: problem.N]
            vl = v_p + Ts * np.concatenate([[0.0], np.cumsum(wN)])
            plan_v = (vl - out.states[:, 1])[1:]

        log_.t.append(round(k * Ts, 10))
        log_.delta.append(gap - prm.h * v - prm.L - prm.d0)
        log_.delta_ctrl.append(float(spacing_error(gap, 0.0, v, prm, ctl.pc_held if stochastic else 0.0, cfg.alpha)))
        log_.gap.append(gap)
        log_.v.append(v)
        log_.a.append(a)
        log_.u.append(out.u)
        log_.pc.append(pc)
        log_.mode.append(out.mode.value)
        log_.cost.append(out.cost)
        log_.feasible.append(bool(out.feasible and not out.relaxed))
        log_.preceding.append(name)

        u_phys = cfg.b_sign * out.u
        x, v, a = x + Ts * v, v + Ts * a, a + Ts / prm.zeta * (u_phys - a)
    return log_


def leg_metrics(leg: LegLog, crossing: Optional[int], stochastic: bool) -> Dict[str, object]:
    delta = leg.array("delta")
    u = leg.array("u")
    pc = leg.array("pc")
    t = leg.array("t")
    m: Dict[str, object] = {
        "max_abs_delta": float(np.max(np.abs(delta))),
        "peak_abs_u": float(np.max(np.abs(u))),
        "max_abs_du": float(np.max(np.abs(np.diff(u)))) if u.size > 1 else 0.0,
        "min_gap": float(np.min(leg.array("gap"))),
        "fallback_cycles": int(sum(m_.startswith("fallback") for m_ in leg.mode)),
        "relaxed_cycles": int(sum(not f for f in leg.feasible)),
        "crossing_time": None if crossing is None else float(t[crossing]),
        "delta_at_crossing": None if crossing is None else float(delta[crossing]),
        "detection_time": None,
        "detection_lead_time": None,
    }
    if stochastic:
        hits = np.nonzero(pc > PC_DETECTION)[0]
        if hits.size:
            m["detection_time"] = float(t[hits[0]])
            if crossing is not None:
                m["detection_lead_time"] = round(float(t[crossing] - t[hits[0]]), 10)
    return m


def run_scenario(sc: Scenario, predictor: Optional[LaneChangePredictor] = None) -> ScenarioResult:
    """Paired SMPC / conventional MPC run of one scenario."""
    needs_model = sc.interferer.enabled and sc.predictor.source == "model"
    needs_nar = sc.predictor.disturbance == "nar"
    if predictor is None and (needs_model or needs_nar):
        if sc.predictor.model_path is None:
            if needs_model:
                raise ConfigurationError("scenario needs a trained predictor (predictor_model_path) or predictor.source = 'oracle'")
        else:
            predictor = LaneChangePredictor.load(sc.predictor.model_path)
    world = build_world(sc)
    problem = MpcProblem.build(sc.vehicle, sc.controller)
    legs = {
        "smpc": _run_leg(sc, world, problem, True, predictor),
        "mpc": _run_leg(sc, world, problem, False, predictor),
    }
    metrics = {name: leg_metrics(leg, world.crossing, name == "smpc") for name, leg in legs.items()}
    xy = np.zeros((0, 2)) if world.rv is None else np.column_stack([world.rv_front, world.rv_y])
    return ScenarioResult(sc, legs, world.crossing, metrics, xy)


@dataclass
class FollowerRun:
    delta: np.ndarray
    dv: np.ndarray
    a: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    feasible: np.ndarray  # full QP (with terminal set) solved
    a_lead: np.ndarray


def simulate_follower(
    problem: MpcProblem,
    delta0: float,
    dv0: float,
    a0: float,
    v0: float,
    leader_accel: Sequence[float] = (),
    steps: int = 300,
    u_prev0: float = 0.0,
) -> FollowerRun:
    """Controller-only closed loop with P_c = 0 and an exactly known leader.

    ``leader_accel`` lists the leader's accelerations from step 0 (zero
    afterwards); the disturbance forecast is the true future profile.
    """
    prm, cfg = problem.params, problem.config
    Ts = prm.Ts
    acc = np.zeros(steps + problem.N)
    la = np.asarray(leader_accel, dtype=float)
    acc[: min(la.size, acc.size)] = la[: acc.size]
    ctl = Controller(problem, stochastic=False)
    ctl.u_prev = u_prev0
    gap = delta0 + prm.desired_gap(v0)
    v, a, vl = v0, a0, v0 + dv0
    out_arr = {k: np.zeros(steps) for k in ("delta", "dv", "a", "u", "cost")}
    feas = np.zeros(steps, dtype=bool)
    for k in range(steps):
        out = ctl.step(gap, v, vl - v, a, acc[k : k + problem.N])
        out_arr["delta"][k] = gap - prm.desired_gap(v)
        out_arr["dv"][k] = vl - v
        out_arr["a"][k] = a
        out_arr["u"][k] = out.u
        out_arr["cost"][k] = out.cost
        feas[k] = out.feasible and not out.relaxed
        gap += Ts * (vl - v)
        vl += Ts * acc[k]
        v, a = v + Ts * a, a + Ts / prm.zeta * (cfg.b_sign * out.u - a)
    return FollowerRun(out_arr["delta"], out_arr["dv"], out_arr["a"], out_arr["u"], out_arr["cost"], feas, acc[:steps])
