"""Lane-change trajectory predictor built from delay-line networks.

One NAR net per driver-input signal forecasts that signal ``S_m`` steps
ahead; a NARX net rolls the longitudinal position forward using the
forecast speed/heading/acceleration (and optionally yaw rate); an RNN does
the same for the lateral position from steering, yaw rate and heading.
Per-step 90% half-widths come from empirical quantiles of validation
residuals.

All nets see the same preprocessing: dead-band smoothing, normalization
with bounds frozen on the training traces, then first differences.
Multi-step forecasts are produced by feeding one-step predictions back into
the delay line.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .nets import (
    DEFAULT_DELAYS,
    PREDICTION_STEPS,
    DelayLineNet,
    InsufficientDataError,
    TrainingConfig,
    UntrainedNetError,
    fit,
    make_windows,
)
from .signals import SAMPLE_INTERVAL, CLAMP_LIMIT, deadband, SMOOTHING_THRESHOLDS, trace_arrays

log = logging.getLogger(__name__)

FORMAT = "platoon-smpc-predictor/1"
NAR_SIGNALS = ("swa", "yaw_rate", "heading", "speed", "ax")
NARX_EXO = ("yaw_rate", "heading", "speed", "ax")
NARX_EXO_NO_YAW = ("heading", "speed", "ax")
RNN_EXO = ("swa", "yaw_rate", "heading")
POSITION_CHANNELS = ("x", "y")
ALL_CHANNELS = POSITION_CHANNELS + NAR_SIGNALS
HALFWIDTH_FLOOR = 0.05
MIN_CALIBRATION_WINDOWS = 50
CONFIDENCE = 0.90


class ChannelError(ValueError):
    """History or forecasts do not provide the channels a net expects."""


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionFan:
    """Predicted centre positions and 90% half-widths for steps 1..S_m."""

    long_pred: np.ndarray
    lat_pred: np.ndarray
    long_halfwidth: np.ndarray
    lat_halfwidth: np.ndarray
    base_time: float = 0.0

    def __post_init__(self):
        for name in ("long_pred", "lat_pred", "long_halfwidth", "lat_halfwidth"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.long_pred.size
        if not (self.lat_pred.size == self.long_halfwidth.size == self.lat_halfwidth.size == n):
            raise ValueError("fan arrays must share one length")
        for hw in (self.long_halfwidth, self.lat_halfwidth):
            if np.any(hw <= 0):
                raise ValueError("half-widths must be positive")
            if np.any(np.diff(hw) < 0):
                raise ValueError("half-widths must be non-decreasing in step")

    @property
    def steps(self) -> int:
        return int(self.long_pred.size)

    def translated(self, dx: float, dy: float) -> "PredictionFan":
        return PredictionFan(
            self.long_pred + dx, self.lat_pred + dy, self.long_halfwidth, self.lat_halfwidth, self.base_time
        )


def _levels(values: np.ndarray, channel: str, bounds: Tuple[float, float], clamp: bool) -> np.ndarray:
    """Smoothed, normalized levels of one raw channel (causal)."""
    sm = deadband(values, SMOOTHING_THRESHOLDS.get(channel, 0.0))
    lo, hi = bounds
    if hi <= lo:
        return np.zeros_like(sm)
    out = 2.0 * (sm - lo) / (hi - lo) - 1.0
    return np.clip(out, -CLAMP_LIMIT, CLAMP_LIMIT) if clamp else out


def _denorm(levels: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    if hi <= lo:
        return np.full_like(levels, lo)
    return (levels + 1.0) * (hi - lo) / 2.0 + lo


def trace_channels(records) -> Dict[str, np.ndarray]:
    """Channel arrays of one trace, longitudinal position rebased to zero."""
    arr = trace_arrays(records)
    out = {ch: arr[ch] for ch in ALL_CHANNELS}
    out["x"] = out["x"] - out["x"][0]
    out["t"] = arr["t"]
    return out


@dataclass
class LaneChangePredictor:
    bounds: Dict[str, Tuple[float, float]]
    nar: Dict[str, DelayLineNet]
    narx: DelayLineNet
    rnn: DelayLineNet
    narx_exo: Tuple[str, ...] = NARX_EXO
    rnn_exo: Tuple[str, ...] = RNN_EXO
    steps: int = PREDICTION_STEPS
    long_halfwidth: Optional[np.ndarray] = None
    lat_halfwidth: Optional[np.ndarray] = None
    seed: int = 0
    metrics: Dict[str, object] = field(default_factory=dict)

    @property
    def delays(self) -> int:
        return self.narx.input_delays

    # ---- preprocessing -------------------------------------------------

    def levels(self, history: Mapping[str, np.ndarray], channels: Sequence[str]) -> Dict[str, np.ndarray]:
        need = self.delays + 1
        out = {}
        for ch in channels:
            if ch not in history:
                raise ChannelError(f"history has no {ch!r} channel")
            vals = np.asarray(history[ch], dtype=float)
            if vals.shape[-1] < need:
                raise InsufficientDataError(
                    f"{ch} history has {vals.shape[-1]} samples, need at least {need}"
                )
            if ch == "x":
                vals = vals - vals[..., -need : -need + 1]
            out[ch] = _levels(vals, ch, self.bounds[ch], clamp=True)[..., -need:]
        return out

    # ---- batched core ---------------------------------------------------

    def _nar_forecast(self, levels: Mapping[str, np.ndarray], signals: Sequence[str]) -> Dict[str, np.ndarray]:
        """Iterated one-step NAR forecasts of differenced levels, (B, steps)."""
        out = {}
        for ch in signals:
            net = self.nar.get(ch)
            if net is None or not net.trained:
                raise UntrainedNetError(f"no trained NAR net for {ch!r}")
            window = np.diff(np.atleast_2d(levels[ch]), axis=1)[:, -self.delays :]
            preds = np.empty((window.shape[0], self.steps))
            for m in range(self.steps):
                nxt = net.forward(window[:, :, None])
                preds[:, m] = nxt
                window = np.concatenate([window[:, 1:], nxt[:, None]], axis=1)
            out[ch] = self._snap(ch, np.atleast_2d(levels[ch])[:, -1], preds)
        return out

    def _snap(self, ch: str, last: np.ndarray, diffs: np.ndarray) -> np.ndarray:
        """Dead-band the forecast path so it lives in the smoothed domain the
        nets were trained on: moves smaller than the channel threshold are
        held at the last emitted level."""
        thr = SMOOTHING_THRESHOLDS.get(ch, 0.0)
        lo, hi = self.bounds[ch]
        if thr <= 0 or hi <= lo:
            return diffs
        thr_n = 2.0 * thr / (hi - lo)
        path = last[:, None] + np.cumsum(diffs, axis=1)
        held = last.copy()
        out = np.empty_like(path)
        for m in range(path.shape[1]):
            move = np.abs(path[:, m] - held) >= thr_n
            held = np.where(move, path[:, m], held)
            out[:, m] = held
        return np.diff(np.concatenate([last[:, None], out], axis=1), axis=1)

    def _roll(self, net: DelayLineNet, target_levels: np.ndarray, exo_levels, exo_fc) -> np.ndarray:
        """Iterated NARX/RNN forecast of a position channel in level units."""
        if not net.trained:
            raise UntrainedNetError(f"{net.kind} net is not trained")
        d = self.delays
        target_levels = np.atleast_2d(target_levels)
        ar = np.diff(target_levels, axis=1)[:, -d:]
        exo_full = [
            np.concatenate([np.diff(np.atleast_2d(lv), axis=1)[:, -d:], fc], axis=1)
            for lv, fc in zip(exo_levels, exo_fc)
        ]
        B = ar.shape[0]
        preds = np.empty((B, self.steps))
        for m in range(1, self.steps + 1):
            X = np.empty((B, d, 1 + len(exo_full)))
            X[:, :, 0] = ar
            for c, series in enumerate(exo_full, start=1):
                X[:, :, c] = series[:, m : m + d]
            nxt = net.forward(X)
            preds[:, m - 1] = nxt
            ar = np.concatenate([ar[:, 1:], nxt[:, None]], axis=1)
        return target_levels[:, -1:] + np.cumsum(preds, axis=1)

    def _positions(self, levels: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        fc = self._nar_forecast(levels, sorted(set(self.narx_exo) | set(self.rnn_exo)))
        x_lv = self._roll(self.narx, levels["x"], [levels[c] for c in self.narx_exo], [fc[c] for c in self.narx_exo])
        y_lv = self._roll(self.rnn, levels["y"], [levels[c] for c in self.rnn_exo], [fc[c] for c in self.rnn_exo])
        return _denorm(x_lv, self.bounds["x"]), _denorm(y_lv, self.bounds["y"])

    # ---- public single-history API -----------------------------------

    def predict_inputs(self, history: Mapping[str, np.ndarray], signals: Sequence[str] = NAR_SIGNALS) -> Dict[str, np.ndarray]:
        """Forecast each driver-input signal ``steps`` samples ahead (physical units)."""
        lv = self.levels(history, signals)
        diffs = self._nar_forecast(lv, signals)
        return {
            ch: _denorm(lv[ch][..., -1:] + np.cumsum(diffs[ch], axis=1), self.bounds[ch])[0]
            for ch in signals
        }

    def _exo_from_forecasts(self, history, exo_forecasts, channels):
        missing = [c for c in channels if c not in exo_forecasts]
        if missing:
            raise ChannelError(f"missing exogenous forecast(s): {missing}")
        lv = self.levels(history, channels)
        fc = []
        for c in channels:
            f = np.asarray(exo_forecasts[c], dtype=float)
            if f.size != self.steps:
                raise ChannelError(f"forecast for {c!r} has {f.size} values, need {self.steps}")
            lo, hi = self.bounds[c]
            f_lv = np.clip(2.0 * (f - lo) / (hi - lo) - 1.0, -CLAMP_LIMIT, CLAMP_LIMIT) if hi > lo else 0 * f
            fc.append(np.diff(np.concatenate([lv[c][-1:], f_lv]))[None, :])
        return [lv[c] for c in channels], fc

    def predict_longitudinal(self, history, exo_forecasts=None) -> np.ndarray:
        """Longitudinal positions for steps 1..S_m in the history's frame."""
        exo_forecasts = self.predict_inputs(history, self.narx_exo) if exo_forecasts is None else exo_forecasts
        exo_lv, exo_fc = self._exo_from_forecasts(history, exo_forecasts, self.narx_exo)
        x = np.asarray(history["x"], dtype=float)
        base = x[-(self.delays + 1)]
        lv = self.levels(history, ("x",))["x"]
        return _denorm(self._roll(self.narx, lv, exo_lv, exo_fc), self.bounds["x"])[0] + base

    def predict_lateral(self, history, exo_forecasts=None) -> np.ndarray:
        """Lateral positions for steps 1..S_m in the history's frame."""
        exo_forecasts = self.predict_inputs(history, self.rnn_exo) if exo_forecasts is None else exo_forecasts
        exo_lv, exo_fc = self._exo_from_forecasts(history, exo_forecasts, self.rnn_exo)
        lv = self.levels(history, ("y",))["y"]
        return _denorm(self._roll(self.rnn, lv, exo_lv, exo_fc), self.bounds["y"])[0]

    def predict_fan(self, history: Mapping[str, np.ndarray], base_time: float = 0.0) -> PredictionFan:
        if self.long_halfwidth is None:
            raise CalibrationError("predictor has not been calibrated")
        lv = self.levels(history, ALL_CHANNELS)
        xs, ys = self._positions(lv)
        x = np.asarray(history["x"], dtype=float)
        return PredictionFan(
            xs[0] + x[-(self.delays + 1)], ys[0], self.long_halfwidth, self.lat_halfwidth, base_time
        )

    # ---- calibration --------------------------------------------------

    def window_errors(self, traces: Sequence[Mapping[str, np.ndarray]], stride: int = 1):
        """Prediction errors (pred - truth) over every full window of the traces.

        Returns arrays of shape (n_windows, steps) for the longitudinal and
        lateral axes.
        """
        long_err, lat_err = [], []
        d, S = self.delays, self.steps
        for tr in traces:
            n = len(tr["x"])
            ends = np.arange(d, n - S, stride)
            if ends.size == 0:
                continue
            full = {ch: _levels(tr[ch], ch, self.bounds[ch], clamp=True) for ch in ALL_CHANNELS}
            idx = ends[:, None] + np.arange(-d, 1)[None, :]
            lv = {ch: full[ch][idx] for ch in ALL_CHANNELS}
            xs, ys = self._positions(lv)
            fut = ends[:, None] + np.arange(1, S + 1)[None, :]
            # positions are compared as displacements from the window's last sample
            long_err.append((xs - _denorm(lv["x"][:, -1:], self.bounds["x"])) - (tr["x"][fut] - tr["x"][ends][:, None]))
            lat_err.append(ys - tr["y"][fut])
        if not long_err:
            return np.zeros((0, S)), np.zeros((0, S))
        return np.concatenate(long_err), np.concatenate(lat_err)

    def calibrate(self, traces: Sequence[Mapping[str, np.ndarray]]) -> None:
        """Per-step 90% half-widths from validation residuals.

        Half-width at step k is the 90th percentile of |error| at that step,
        made non-decreasing by a running maximum and floored at 5 cm.
        """
        long_err, lat_err = self.window_errors(traces)
        if long_err.shape[0] < MIN_CALIBRATION_WINDOWS:
            raise CalibrationError(
                f"{long_err.shape[0]} validation windows, need at least {MIN_CALIBRATION_WINDOWS}"
            )
        self.long_halfwidth = calibrated_halfwidths(long_err)
        self.lat_halfwidth = calibrated_halfwidths(lat_err)

    def coverage(self, traces) -> Tuple[np.ndarray, np.ndarray]:
        long_err, lat_err = self.window_errors(traces)
        return (
            np.mean(np.abs(long_err) <= self.long_halfwidth, axis=0),
            np.mean(np.abs(lat_err) <= self.lat_halfwidth, axis=0),
        )

    # ---- training ---------------------------------------------------

    @classmethod
    def fit(
        cls,
        traces: Sequence[Mapping[str, np.ndarray]],
        cfg: TrainingConfig = TrainingConfig(),
        narx_use_yaw: bool = True,
        hidden_units: int = 20,
        delays: int = DEFAULT_DELAYS,
        steps: int = PREDICTION_STEPS,
        groups: Optional[Sequence[str]] = None,
    ) -> "LaneChangePredictor":
        """Train every net and calibrate on a corpus of channel dicts.

        Traces are split whole into train / validation / test sets in the
        ``cfg.split`` proportions (see ``split_traces``).
        """
        traces = list(traces)
        for tr in traces:
            if len(tr["x"]) < delays + steps + 1:
                raise InsufficientDataError(
                    f"trace of {len(tr['x'])} samples shorter than {delays + steps + 1}"
                )
        train_set, val_set, test_set = split_traces(traces, cfg, groups)
        if not train_set or not val_set:
            raise InsufficientDataError("corpus too small for a train/validation split")

        bounds = {}
        for ch in ALL_CHANNELS:
            allv = np.concatenate([deadband(tr[ch], SMOOTHING_THRESHOLDS.get(ch, 0.0)) for tr in train_set])
            bounds[ch] = (float(allv.min()), float(allv.max()))

        def diffs(ts):
            return [
                {ch: np.diff(_levels(tr[ch], ch, bounds[ch], clamp=False)) for ch in ALL_CHANNELS}
                for tr in ts
            ]

        dtr, dva = diffs(train_set), diffs(val_set)
        narx_exo = NARX_EXO if narx_use_yaw else NARX_EXO_NO_YAW

        def windows(ds, target, exo):
            parts = [make_windows(d[target], [d[c] for c in exo], delays) for d in ds]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

        def train_one(net, target, exo, seed_offset):
            Xtr, ytr = windows(dtr, target, exo)
            Xva, yva = windows(dva, target, exo)
            sub = TrainingConfig(cfg.split, cfg.epochs, cfg.learning_rate, cfg.momentum, cfg.patience, cfg.seed + seed_offset)
            return fit(net, Xtr, ytr, Xva, yva, sub)

        nar = {}
        for k, ch in enumerate(NAR_SIGNALS):
            nar[ch] = train_one(DelayLineNet("NAR", 0, delays, hidden_units), ch, (), k + 1)
        narx = train_one(DelayLineNet("NARX", len(narx_exo), delays, hidden_units), "x", narx_exo, 11)
        rnn = train_one(DelayLineNet("RNN", len(RNN_EXO), delays, hidden_units), "y", RNN_EXO, 12)

        pred = cls(bounds, nar, narx, rnn, tuple(narx_exo), RNN_EXO, steps, seed=cfg.seed)
        pred.calibrate(val_set)
        pred.metrics = pred.evaluate(test_set)
        pred.metrics["n_traces"] = {"train": len(train_set), "validation": len(val_set), "test": len(test_set)}
        pred.metrics["val_mse"] = {
            **{f"NAR_{ch}": net.history["best_val_mse"] for ch, net in nar.items()},
            "NARX": narx.history["best_val_mse"],
            "RNN": rnn.history["best_val_mse"],
        }
        return pred

    def evaluate(self, traces) -> Dict[str, object]:
        long_err, lat_err = self.window_errors(traces)
        if long_err.shape[0] == 0:
            return {}
        return {
            "windows": int(long_err.shape[0]),
            "long_rmse": np.sqrt(np.mean(long_err**2, axis=0)).tolist(),
            "lat_rmse": np.sqrt(np.mean(lat_err**2, axis=0)).tolist(),
            "long_coverage": np.mean(np.abs(long_err) <= self.long_halfwidth, axis=0).tolist(),
            "lat_coverage": np.mean(np.abs(lat_err) <= self.lat_halfwidth, axis=0).tolist(),
            "long_halfwidth": self.long_halfwidth.tolist(),
            "lat_halfwidth": self.lat_halfwidth.tolist(),
        }

    # ---- serialization ------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "seed": self.seed,
            "steps": self.steps,
            "bounds": {ch: list(b) for ch, b in self.bounds.items()},
            "narx_exo": list(self.narx_exo),
            "rnn_exo": list(self.rnn_exo),
            "nets": {
                **{f"NAR:{ch}": net.to_dict() for ch, net in self.nar.items()},
                "NARX": self.narx.to_dict(),
                "RNN": self.rnn.to_dict(),
            },
            "calibration": {
                "confidence": CONFIDENCE,
                "long_halfwidth": None if self.long_halfwidth is None else self.long_halfwidth.tolist(),
                "lat_halfwidth": None if self.lat_halfwidth is None else self.lat_halfwidth.tolist(),
            },
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LaneChangePredictor":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported predictor format {d.get('format')!r}")
        nets = d["nets"]
        cal = d["calibration"]
        return cls(
            bounds={ch: tuple(b) for ch, b in d["bounds"].items()},
            nar={k.split(":", 1)[1]: DelayLineNet.from_dict(v) for k, v in nets.items() if k.startswith("NAR:")},
            narx=DelayLineNet.from_dict(nets["NARX"]),
            rnn=DelayLineNet.from_dict(nets["RNN"]),
            narx_exo=tuple(d["narx_exo"]),
            rnn_exo=tuple(d["rnn_exo"]),
            steps=d["steps"],
            long_halfwidth=None if cal["long_halfwidth"] is None else np.array(cal["long_halfwidth"]),
            lat_halfwidth=None if cal["lat_halfwidth"] is None else np.array(cal["lat_halfwidth"]),
            seed=d["seed"],
            metrics=d.get("metrics", {}),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LaneChangePredictor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def split_traces(traces, cfg: TrainingConfig, groups: Optional[Sequence[str]] = None):
    """Seeded split of whole traces, stratified by ``groups`` labels.

    Each group (e.g. lane change / straight / curve) is shuffled and cut in
    the ``cfg.split`` proportions separately, so every split sees the same
    mix of maneuvers.
    """
    labels = ["all"] * len(traces) if groups is None else list(groups)
    if len(labels) != len(traces):
        raise ValueError("groups must label every trace")
    rng = np.random.default_rng(cfg.seed)
    parts = ([], [], [])
    for g in sorted(set(labels)):
        idx = np.array([i for i, lab in enumerate(labels) if lab == g])
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(round(cfg.split[0] * idx.size))
        n_va = int(round(cfg.split[1] * idx.size))
        for part, sel in zip(parts, (idx[:n_tr], idx[n_tr : n_tr + n_va], idx[n_tr + n_va :])):
            part.extend(int(i) for i in sel)
    return tuple([traces[i] for i in sorted(part)] for part in parts)


def trace_group(name: str) -> str:
    """Stratification label from a corpus trace name (``curve_007`` -> ``curve``)."""
    return name.rstrip("0123456789").rstrip("_") or name


def calibrated_halfwidths(errors: np.ndarray, q: float = CONFIDENCE, floor: float = HALFWIDTH_FLOOR) -> np.ndarray:
    hw = np.quantile(np.abs(errors), q, axis=0)
    return np.maximum(np.maximum.accumulate(hw), floor)


def kinematic_lateral_extrapolation(trace: Mapping[str, np.ndarray], end: int, steps: int = PREDICTION_STEPS) -> np.ndarray:
    """Constant-heading, constant-speed lateral forecast from sample ``end``."""
    k = np.arange(1, steps + 1) * SAMPLE_INTERVAL
    return trace["y"][end] + trace["speed"][end] * np.sin(trace["heading"][end]) * k
