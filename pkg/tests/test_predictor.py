import numpy as np
import pytest

from platoon_smpc.kinematics import generate_lane_change, generate_road_trace
from platoon_smpc.nets import InsufficientDataError, TrainingConfig, UntrainedNetError
from platoon_smpc.predictor import (
    ALL_CHANNELS,
    CalibrationError,
    ChannelError,
    LaneChangePredictor,
    PredictionFan,
    calibrated_halfwidths,
    kinematic_lateral_extrapolation,
    split_traces,
    trace_channels,
    trace_group,
)
from platoon_smpc.signals import SMOOTHING_THRESHOLDS


def _window(tr, end, d=15):
    return {ch: tr[ch][end - d : end + 1] for ch in ALL_CHANNELS}


# ---- fan and calibration helpers ------------------------------------------


def test_prediction_fan_invariants():
    fan = PredictionFan(np.arange(3.0), np.zeros(3), [0.1, 0.2, 0.2], [0.05, 0.05, 0.1])
    assert fan.steps == 3
    moved = fan.translated(2.0, -1.0)
    np.testing.assert_array_equal(moved.long_pred, [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(moved.lat_pred, [-1.0] * 3)
    with pytest.raises(ValueError):
        PredictionFan(np.zeros(2), np.zeros(2), [0.1, 0.0], [0.1, 0.1])
    with pytest.raises(ValueError):
        PredictionFan(np.zeros(2), np.zeros(2), [0.2, 0.1], [0.1, 0.1])
    with pytest.raises(ValueError):
        PredictionFan(np.zeros(2), np.zeros(3), [0.1, 0.1], [0.1, 0.1])


def test_calibration_of_perfect_predictor_hits_floor():
    np.testing.assert_array_equal(calibrated_halfwidths(np.zeros((80, 10))), np.full(10, 0.05))


def test_calibration_quantile_and_running_max():
    errs = np.tile(np.arange(1, 101, dtype=float)[:, None], (1, 3))
    errs[:, 1] *= 0.5  # step 2 narrower than step 1 -> lifted by running max
    hw = calibrated_halfwidths(errs)
    q = np.quantile(np.arange(1, 101), 0.9)
    np.testing.assert_allclose(hw, [q, q, q])


def test_trace_group_labels():
    assert trace_group("lane_change_012") == "lane_change"
    assert trace_group("curve_000") == "curve"
    assert trace_group("straight_3") == "straight"


def test_split_is_stratified_and_seeded():
    traces = [{"x": np.zeros(1), "id": i} for i in range(40)]
    groups = ["lane_change"] * 20 + ["curve"] * 20
    a = split_traces(traces, TrainingConfig(seed=3), groups)
    b = split_traces(traces, TrainingConfig(seed=3), groups)
    assert [[t["id"] for t in p] for p in a] == [[t["id"] for t in p] for p in b]
    assert [len(p) for p in a] == [28, 6, 6]
    for part in a:
        ids = [t["id"] for t in part]
        assert sum(i < 20 for i in ids) == sum(i >= 20 for i in ids)


# ---- trained-model behaviour (small model) ---------------------------------


@pytest.fixture(scope="module")
def lane_change():
    return trace_channels(generate_lane_change(5.5, 27.0, seed=99))


def test_output_shapes(small_predictor, lane_change):
    h = _window(lane_change, 40)
    fc = small_predictor.predict_inputs(h)
    assert set(fc) == {"swa", "yaw_rate", "heading", "speed", "ax"}
    assert all(v.shape == (10,) for v in fc.values())
    assert small_predictor.predict_longitudinal(h).shape == (10,)
    assert small_predictor.predict_lateral(h).shape == (10,)
    fan = small_predictor.predict_fan(h, base_time=4.0)
    assert fan.steps == 10 and fan.base_time == 4.0


def test_input_errors(small_predictor, lane_change):
    h = _window(lane_change, 40)
    short = {ch: v[-10:] for ch, v in h.items()}
    with pytest.raises(InsufficientDataError):
        small_predictor.predict_inputs(short)
    missing = {ch: v for ch, v in h.items() if ch != "heading"}
    with pytest.raises(ChannelError):
        small_predictor.predict_lateral(missing)
    fc = small_predictor.predict_inputs(h)
    del fc["speed"]
    with pytest.raises(ChannelError):
        small_predictor.predict_longitudinal(h, fc)


def test_untrained_nar_rejected(small_predictor, lane_change):
    pred = LaneChangePredictor.from_dict(small_predictor.to_dict())
    pred.nar["swa"].trained = False
    with pytest.raises(UntrainedNetError):
        pred.predict_inputs(_window(lane_change, 40), ["swa"])


def test_uncalibrated_fan_rejected(small_predictor, lane_change):
    pred = LaneChangePredictor.from_dict(small_predictor.to_dict())
    pred.long_halfwidth = None
    with pytest.raises(CalibrationError):
        pred.predict_fan(_window(lane_change, 40))


def test_too_few_calibration_windows(small_predictor, lane_change):
    pred = LaneChangePredictor.from_dict(small_predictor.to_dict())
    short = {ch: v[:60] for ch, v in lane_change.items()}  # 35 windows
    with pytest.raises(CalibrationError):
        pred.calibrate([short])


def test_first_forecast_step_is_a_forward_pass(small_predictor, lane_change):
    h = _window(lane_change, 45)
    lv = small_predictor.levels(h, ["speed"])["speed"]
    net = small_predictor.nar["speed"]
    step = float(net.forward(np.diff(lv)[None, -15:, None])[0])
    lo, hi = small_predictor.bounds["speed"]
    thr = 2 * SMOOTHING_THRESHOLDS["speed"] / (hi - lo)
    level = lv[-1] + (step if abs(step) >= thr else 0.0)
    expected = (level + 1) * (hi - lo) / 2 + lo
    got = small_predictor.predict_inputs(h, ["speed"])["speed"][0]
    assert got == pytest.approx(expected, abs=1e-12)


def test_constant_history_gives_constant_forecast(small_predictor):
    h = {ch: np.zeros(16) for ch in ALL_CHANNELS}
    h["speed"] = np.full(16, 25.0)
    fc = small_predictor.predict_inputs(h)
    for ch, v in fc.items():
        assert np.max(np.abs(v - h[ch][-1])) < 1e-3, ch


def test_no_hidden_state_across_calls(small_predictor, lane_change):
    a, b = _window(lane_change, 40), _window(lane_change, 70)
    first = small_predictor.predict_lateral(a)
    small_predictor.predict_lateral(b)
    np.testing.assert_array_equal(small_predictor.predict_lateral(a), first)


def test_position_frame_follows_history(small_predictor, lane_change):
    h = _window(lane_change, 40)
    shifted = dict(h, x=h["x"] + 1000.0)
    np.testing.assert_allclose(
        small_predictor.predict_longitudinal(shifted), small_predictor.predict_longitudinal(h) + 1000.0,
        atol=1e-9,
    )


def test_save_load_bit_identical(small_predictor, lane_change, tmp_path):
    path = tmp_path / "model.json"
    small_predictor.save(path)
    clone = LaneChangePredictor.load(path)
    h = _window(lane_change, 50)
    a, b = small_predictor.predict_fan(h), clone.predict_fan(h)
    assert np.array_equal(a.long_pred, b.long_pred) and np.array_equal(a.lat_pred, b.lat_pred)
    assert np.array_equal(a.lat_halfwidth, b.lat_halfwidth)
    with pytest.raises(ValueError):
        LaneChangePredictor.from_dict({"format": "other"})


def test_fit_is_deterministic():
    traces = [trace_channels(generate_lane_change(5.0, 25.0, seed=s)) for s in range(6)]
    traces += [trace_channels(generate_road_trace(10.0, 25.0, seed=s)) for s in range(4)]
    cfg = TrainingConfig(split=(0.6, 0.4, 0.0), epochs=5, seed=1)
    a = LaneChangePredictor.fit(traces, cfg)
    b = LaneChangePredictor.fit(traces, cfg)
    assert a.to_dict() == b.to_dict()


def test_short_trace_rejected():
    tr = trace_channels(generate_road_trace(1.0, 20.0))
    with pytest.raises(InsufficientDataError):
        LaneChangePredictor.fit([tr], TrainingConfig(epochs=1))


# ---- accuracy examples ------------------------------------------------------


@pytest.mark.slow
def test_constant_velocity_longitudinal():
    trs = [trace_channels(generate_road_trace(10.0, 10.0, 0.0, seed=i)) for i in range(20)]
    pred = LaneChangePredictor.fit(trs, TrainingConfig(epochs=300, seed=0))
    worst = 0.0
    for i in range(5):
        tr = trace_channels(generate_road_trace(6.0, 10.0, 0.0, seed=100 + i))
        x = pred.predict_longitudinal(_window(tr, 29))
        worst = max(worst, np.max(np.abs(x - (tr["x"][29] + np.arange(1, 11) * 1.0))))
    assert worst < 0.3


@pytest.mark.slow
def test_straight_driving_stays_in_lane(trained_predictor):
    pred = trained_predictor[0]
    worst = 0.0
    for s in range(5):
        tr = trace_channels(generate_road_trace(10.0, 27.0, 0.0, seed=500 + s))
        for end in range(15, len(tr["x"]) - 1, 5):
            worst = max(worst, np.max(np.abs(pred.predict_lateral(_window(tr, end)))))
    assert worst < 0.2


@pytest.mark.slow
def test_curve_not_read_as_lane_change(trained_predictor):
    pred = trained_predictor[0]
    worst = 0.0
    for s, radius in enumerate((400.0, -400.0, 700.0, -700.0)):
        tr = trace_channels(generate_road_trace(10.0, 25.0, 1.0 / radius, seed=600 + s))
        for end in range(15, len(tr["x"]) - 1, 5):
            worst = max(worst, np.max(np.abs(pred.predict_lateral(_window(tr, end)))))
    assert worst < 0.3


@pytest.mark.slow
def test_rnn_beats_kinematic_extrapolation(trained_predictor):
    pred = trained_predictor[0]
    rnn_err, kin_err = [], []
    for s in range(8):
        tr = trace_channels(generate_lane_change([5.5, 3.5][s % 2], 27.0, seed=700 + s, accel_std=0.3))
        for end in range(15, len(tr["x"]) - 11, 2):
            truth = tr["y"][end + 1 : end + 11]
            rnn_err.append(abs(pred.predict_lateral(_window(tr, end))[-1] - truth[-1]))
            kin_err.append(abs(kinematic_lateral_extrapolation(tr, end)[-1] - truth[-1]))
    assert np.mean(rnn_err) < np.mean(kin_err)
