"""Small tapped-delay-line networks written directly in numpy.

Three flavours share one window layout. A window that predicts the target at
``t + 1`` is an array of shape ``(delays, 1 + n_exo)``:

* column 0 holds the autoregressive history ``y[t - delays + 1 .. t]``
* columns 1.. hold the exogenous channels ``u[t - delays + 2 .. t + 1]``,
  i.e. aligned one step ahead so the forecast value at the target instant
  is part of the input.

NAR and NARX flatten the window into one feed-forward tanh layer; the RNN
runs an Elman cell over the 15 rows and reads out the final hidden state.
Inputs and targets are standardized inside the net with statistics frozen
at training time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("NAR", "NARX", "RNN")
DEFAULT_DELAYS = 15
DEFAULT_HIDDEN = 20
PREDICTION_STEPS = 10


class InsufficientDataError(ValueError):
    pass


class UntrainedNetError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    split: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    epochs: int = 1500
    learning_rate: float = 0.02
    momentum: float = 0.9
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split}")
        if min(self.split) < 0:
            raise ValueError("split fractions must be non-negative")


@dataclass
class DelayLineNet:
    kind: str
    n_exo: int = 0
    input_delays: int = DEFAULT_DELAYS
    hidden_units: int = DEFAULT_HIDDEN
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    in_mean: Optional[np.ndarray] = None
    in_std: Optional[np.ndarray] = None
    out_mean: float = 0.0
    out_std: float = 1.0
    trained: bool = False
    seed: Optional[int] = None
    history: Dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown net kind {self.kind!r}")
        if self.kind == "NAR" and self.n_exo:
            raise ValueError("NAR nets take no exogenous inputs")
        if self.kind != "NAR" and self.n_exo < 1:
            raise ValueError(f"{self.kind} needs at least one exogenous channel")

    @property
    def n_channels(self) -> int:
        return 1 + self.n_exo

    def init_params(self, rng: np.random.Generator) -> None:
        d, h, c = self.input_delays, self.hidden_units, self.n_channels

        def uniform(shape, fan_in):
            lim = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        if self.kind == "RNN":
            self.params = {
                "Wx": uniform((c, h), c),
                "Wh": uniform((h, h), h),
                "b": uniform((h,), c),
                "Wo": uniform((h,), h),
                "bo": uniform((1,), h),
            }
        else:
            self.params = {
                "W1": uniform((d * c, h), d * c),
                "b1": uniform((h,), d * c),
                "W2": uniform((h,), h),
                "b2": uniform((1,), h),
            }
        if self.in_mean is None:
            self.in_mean = np.zeros(c)
            self.in_std = np.ones(c)

    # forward / backward in standardized units

    def _scale_inputs(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[1:] != (self.input_delays, self.n_channels):
            raise ValueError(
                f"expected windows of shape (batch, {self.input_delays}, {self.n_channels}), got {X.shape}"
            )
        return (X - self.in_mean) / self.in_std

    def _forward_scaled(self, Xs: np.ndarray):
        p = self.params
        if self.kind == "RNN":
            # time-major so each step works on a contiguous (batch, hidden) block
            pre = np.ascontiguousarray(Xs.transpose(1, 0, 2)) @ p["Wx"] + p["b"]
            hs = np.zeros((self.input_delays + 1, Xs.shape[0], self.hidden_units))
            for j in range(self.input_delays):
                np.tanh(pre[j] + hs[j] @ p["Wh"], out=hs[j + 1])
            out = hs[-1] @ p["Wo"] + p["bo"][0]
            return out, hs
        flat = Xs.reshape(Xs.shape[0], -1)
        hid = np.tanh(flat @ p["W1"] + p["b1"])
        out = hid @ p["W2"] + p["b2"][0]
        return out, (flat, hid)

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Predict the next target value for a batch of windows."""
        if not self.params:
            raise UntrainedNetError(f"{self.kind} net has no weights")
        out, _ = self._forward_scaled(self._scale_inputs(X))
        return out * self.out_std + self.out_mean

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean squared error on standardized targets and its gradient."""
        Xs = self._scale_inputs(X)
        ys = (np.asarray(y, dtype=float) - self.out_mean) / self.out_std
        out, cache = self._forward_scaled(Xs)
        n = Xs.shape[0]
        err = out - ys
        loss = float(np.mean(err**2))
        dout = 2.0 * err / n
        p = self.params
        if self.kind == "RNN":
            hs = cache
            d = self.input_delays
            grads = {"Wo": hs[-1].T @ dout, "bo": np.array([dout.sum()])}
            das = np.empty_like(hs[1:])
            dh = np.outer(dout, p["Wo"])
            WhT = p["Wh"].T
            for j in range(d - 1, -1, -1):
                np.multiply(dh, 1.0 - hs[j + 1] ** 2, out=das[j])
                dh = das[j] @ WhT
            flat_da = das.reshape(-1, self.hidden_units)
            Xt = np.ascontiguousarray(Xs.transpose(1, 0, 2)).reshape(-1, self.n_channels)
            grads["Wx"] = Xt.T @ flat_da
            grads["Wh"] = hs[:-1].reshape(-1, self.hidden_units).T @ flat_da
            grads["b"] = flat_da.sum(axis=0)
            return loss, grads
        flat, hid = cache
        dhid = np.outer(dout, p["W2"]) * (1.0 - hid**2)
        grads = {
            "W2": hid.T @ dout,
            "b2": np.array([dout.sum()]),
            "W1": flat.T @ dhid,
            "b1": dhid.sum(axis=0),
        }
        return loss, grads

    def mse(self, X: np.ndarray, y: np.ndarray) -> float:
        out, _ = self._forward_scaled(self._scale_inputs(X))
        ys = (np.asarray(y, dtype=float) - self.out_mean) / self.out_std
        return float(np.mean((out - ys) ** 2))

    # serialization

    def to_dict(self) -> dict:
        if not self.trained:
            raise UntrainedNetError("refusing to serialize an untrained net")
        return {
            "kind": self.kind,
            "n_exo": self.n_exo,
            "input_delays": self.input_delays,
            "hidden_units": self.hidden_units,
            "seed": self.seed,
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean,
            "out_std": self.out_std,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DelayLineNet":
        net = cls(
            kind=d["kind"],
            n_exo=d["n_exo"],
            input_delays=d["input_delays"],
            hidden_units=d["hidden_units"],
            seed=d.get("seed"),
        )
        net.in_mean = np.array(d["in_mean"], dtype=float)
        net.in_std = np.array(d["in_std"], dtype=float)
        net.out_mean = float(d["out_mean"])
        net.out_std = float(d["out_std"])
        net.params = {
            k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()
        }
        net.trained = True
        return net


def make_windows(
    target: np.ndarray, exo: Sequence[np.ndarray] = (), delays: int = DEFAULT_DELAYS
) -> Tuple[np.ndarray, np.ndarray]:
    """All (window, next-target) pairs of one differenced series.

    ``exo`` series must have the same length as ``target``.
    """
    target = np.asarray(target, dtype=float)
    n = target.size
    if n < delays + 1:
        return np.zeros((0, delays, 1 + len(exo))), np.zeros(0)
    cols = [target] + [np.asarray(e, dtype=float) for e in exo]
    if any(c.size != n for c in cols):
        raise ValueError("exogenous series must match the target length")
    idx = np.arange(n - delays)[:, None] + np.arange(delays)[None, :]
    X = np.empty((n - delays, delays, len(cols)))
    X[:, :, 0] = target[idx]
    for c, series in enumerate(cols[1:], start=1):
        X[:, :, c] = series[idx + 1]
    y = target[delays:]
    return X, y


def split_windows(X: np.ndarray, y: np.ndarray, split: Sequence[float]):
    """Contiguous train/validation/test blocks in window order."""
    n = len(y)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    cuts = [0, n_train, n_train + n_val, n]
    return [(X[a:b], y[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


def train(
    net: DelayLineNet,
    data: Sequence,
    cfg: TrainingConfig = TrainingConfig(),
    min_samples: Optional[int] = None,
) -> DelayLineNet:
    """Batch-train a net on differenced series.

    ``data`` is a sequence with one item per trace: a 1-D array / SignalSeries
    for NAR, or a ``(target, [exo, ...])`` pair for NARX and RNN. Windows of
    all traces are concatenated in order and split 70/15/15 (by default)
    into contiguous train / validation / test blocks.

    Training is full-batch gradient descent with momentum. It stops early
    once the validation error has risen ``cfg.patience`` epochs in a row and
    keeps the weights of the best validation epoch.
    """
    if min_samples is None:
        min_samples = net.input_delays + PREDICTION_STEPS
    Xs, ys = [], []
    for item in data:
        if net.kind == "NAR":
            target, exo = _values(item), []
        else:
            target, exo = _values(item[0]), [_values(e) for e in item[1]]
            if len(exo) != net.n_exo:
                raise ValueError(f"{net.kind} expects {net.n_exo} exogenous channels, got {len(exo)}")
        if target.size < min_samples:
            raise InsufficientDataError(
                f"series of length {target.size} is shorter than {min_samples} samples"
            )
        X, y = make_windows(target, exo, net.input_delays)
        Xs.append(X)
        ys.append(y)
    if not Xs:
        raise InsufficientDataError("no training series")
    X = np.concatenate(Xs)
    y = np.concatenate(ys)
    (Xtr, ytr), (Xva, yva), (Xte, yte) = split_windows(X, y, cfg.split)
    if len(ytr) == 0 or len(yva) == 0:
        raise InsufficientDataError("not enough windows for a train/validation split")
    return fit(net, Xtr, ytr, Xva, yva, cfg, X_test=Xte, y_test=yte)


def _values(item) -> np.ndarray:
    return np.asarray(getattr(item, "values", item), dtype=float)


def fit(
    net: DelayLineNet,
    Xtr: np.ndarray,
    ytr: np.ndarray,
    Xva: np.ndarray,
    yva: np.ndarray,
    cfg: TrainingConfig,
    X_test: Optional[np.ndarray] = None,
    y_test: Optional[np.ndarray] = None,
) -> DelayLineNet:
    rng = np.random.default_rng(cfg.seed)
    flat = Xtr.reshape(-1, net.n_channels)
    net.in_mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    net.in_std = np.where(std > 1e-12, std, 1.0)
    net.out_mean = float(ytr.mean())
    s = float(ytr.std())
    net.out_std = s if s > 1e-12 else 1.0
    net.init_params(rng)
    net.seed = cfg.seed

    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    best = {k: v.copy() for k, v in net.params.items()}
    best_val = net.mse(Xva, yva)
    prev_val = best_val
    rising = 0
    train_curve: List[float] = []
    val_curve: List[float] = [best_val]
    for epoch in range(cfg.epochs):
        loss, grads = net.loss_and_grad(Xtr, ytr)
        for k in net.params:
            velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * grads[k]
            net.params[k] = net.params[k] + velocity[k]
        val = net.mse(Xva, yva)
        if not np.isfinite(val):
            raise FloatingPointError(f"{net.kind} training diverged at epoch {epoch}")
        train_curve.append(loss)
        val_curve.append(val)
        if val < best_val:
            best_val = val
            best = {k: v.copy() for k, v in net.params.items()}
        rising = rising + 1 if val > prev_val else 0
        prev_val = val
        if rising >= cfg.patience:
            log.debug("%s early stop at epoch %d", net.kind, epoch)
            break
    net.params = best
    net.trained = True
    net.history = {"train_mse": train_curve, "val_mse": val_curve, "best_val_mse": best_val}
    if X_test is not None and len(y_test):
        net.history["test_rmse"] = float(np.sqrt(np.mean((net.forward(X_test) - y_test) ** 2)))
    log.info("%s trained: %d epochs, best val mse %.3e", net.kind, len(train_curve), best_val)
    return net


def numerical_gradient(net: DelayLineNet, X: np.ndarray, y: np.ndarray, eps: float = 1e-5):
    """Central finite differences of ``loss_and_grad``'s loss, for checks."""
    grads = {}
    for k, v in net.params.items():
        g = np.zeros_like(v)
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = v[i]
            v[i] = orig + eps
            lp = net.loss_and_grad(X, y)[0]
            v[i] = orig - eps
            lm = net.loss_and_grad(X, y)[0]
            v[i] = orig
            g[i] = (lp - lm) / (2 * eps)
        grads[k] = g
    return grads
