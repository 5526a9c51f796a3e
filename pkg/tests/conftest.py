import time

import numpy as np
import pytest

from platoon_smpc.kinematics import generate_corpus
from platoon_smpc.nets import TrainingConfig
from platoon_smpc.predictor import LaneChangePredictor, split_traces, trace_channels, trace_group

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line per criterion and print it."""

    def _report(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def _corpus(n, seed):
    corpus = generate_corpus(n, seed=seed)
    return [trace_channels(r) for _, r in corpus], [trace_group(name) for name, _ in corpus]


@pytest.fixture(scope="session")
def small_predictor():
    """Quickly trained predictor for API level tests (accuracy not checked)."""
    traces, groups = _corpus(30, seed=7)
    return LaneChangePredictor.fit(traces, TrainingConfig(epochs=60, seed=7), groups=groups)


@pytest.fixture(scope="session")
def trained_predictor():
    """Predictor trained on a 150-maneuver synthetic corpus, with its
    held-out test traces and the wall-clock time of generation plus training."""
    t0 = time.perf_counter()
    traces, groups = _corpus(150, seed=0)
    cfg = TrainingConfig(epochs=1500, seed=0)
    pred = LaneChangePredictor.fit(traces, cfg, groups=groups)
    _, _, test = split_traces(traces, cfg, groups)
    return pred, test, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
