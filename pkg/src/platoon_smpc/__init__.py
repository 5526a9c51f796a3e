"""Stochastic MPC for CACC platoons with neural cut-in prediction."""

from .controller import (
    Controller,
    ControllerConfig,
    ControllerOutput,
    FollowerState,
    Mode,
    MpcProblem,
    VehicleParams,
    discretize,
    solve_mpc,
    spacing_error,
    supervise,
    terminal_design,
    terminal_set,
    ttsis_step,
)
from .cutin import BadSet, CutinProbability, Rect, compute_pc, rect_intersection_ratio
from .kinematics import KinematicVehicle, generate_corpus, generate_lane_change, kinematic_step
from .nets import DelayLineNet, TrainingConfig, train
from .predictor import LaneChangePredictor, PredictionFan
from .signals import SignalSeries, TraceRecord, load_trace
from .sim import Scenario, ScenarioResult, run_scenario

__version__ = "0.1.0"
