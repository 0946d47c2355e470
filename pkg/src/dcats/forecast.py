"""Lightweight channel-independent forecasters trained with manual backprop.

Every model maps a normalized ``input_len`` history to a ``horizon`` forecast
and stores its weights in one flat float64 vector. Layouts (row-major):

* linear:    W (H x L), b (H)
* mlp:       W1 (hidden x L), b1 (hidden), W2 (H x hidden), b2 (H)
* sparsetsf: W (H/w x L/w), b (H/w), shared across the w phase strands
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DcatsError, TrainingDivergedError
from .tsdata import make_windows

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DCATSMD1"
MAPE_EPS = 1.0


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "linear"
    input_len: int = 96
    horizon: int = 12
    hidden: int = 32
    period: int = 4
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: str = "mse"
    patience: int = 3
    seed: int = 0


PRETRAIN_DEFAULTS = TrainConfig(epochs=30, learning_rate=1e-3)
FINETUNE_DEFAULTS = TrainConfig(epochs=10, learning_rate=1e-4)


class Model:
    """Base class; subclasses define the parameter layout and the two passes."""

    kind = ""

    def __init__(self, config: ModelConfig, params=None):
        self.validate_config(config)
        self.config = config
        n = self.param_count(config)
        if params is None:
            params = self._init_params(config)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise ConfigError(f"{self.kind} expects {n} parameters, got {params.shape}")
        self.params = params

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        self._params = value
        self._views = self.unpack(value)

    @classmethod
    def validate_config(cls, config: ModelConfig) -> None:
        if config.input_len < 1 or config.horizon < 1:
            raise ConfigError("input_len and horizon must be >= 1")

    @classmethod
    def param_count(cls, config: ModelConfig) -> int:
        return sum(int(np.prod(shape)) for shape, _ in cls.shapes(config))

    @classmethod
    def shapes(cls, config):
        """[(shape, fan_in)] in layout order."""
        raise NotImplementedError

    @classmethod
    def _init_params(cls, config):
        rng = np.random.default_rng(config.seed)
        parts = []
        for shape, fan_in in cls.shapes(config):
            s = 1.0 / math.sqrt(fan_in)
            parts.append(rng.uniform(-s, s, size=int(np.prod(shape))))
        return np.concatenate(parts)

    def unpack(self, vec=None):
        if vec is None:
            return self._views
        out, i = [], 0
        for shape, _ in self.shapes(self.config):
            n = int(np.prod(shape))
            out.append(vec[i:i + n].reshape(shape))
            i += n
        return out

    def clone(self) -> "Model":
        return type(self)(self.config, self.params.copy())

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.config.input_len:
            raise ValueError(f"input length {x.shape[1]} != input_len {self.config.input_len}")
        y, _ = self._forward(x)
        return y[0] if single else y

    def loss_and_grad(self, x, y, loss: str = "mse"):
        """Batch loss and its exact gradient w.r.t. the flat parameter vector."""
        pred, cache = self._forward(x)
        err = pred - y
        if loss == "mse":
            flat = err.ravel()
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported by train()
                value = float(flat @ flat) / err.size
            dpred = err * (2.0 / err.size)
        elif loss == "mae":
            value = float(np.mean(np.abs(err)))
            dpred = np.sign(err) / err.size
        else:
            raise ConfigError(f"unknown loss {loss!r}")
        return value, self._backward(x, dpred, cache)

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, x, dpred, cache):
        raise NotImplementedError


class LinearNet(Model):
    kind = "linear"

    @classmethod
    def shapes(cls, c):
        # weights stored input-major so the batch product runs on contiguous operands
        return [((c.input_len, c.horizon), c.input_len), ((c.horizon,), c.input_len)]

    def _forward(self, x):
        W, b = self.unpack()
        return x @ W + b, None

    def _backward(self, x, dpred, cache):
        return np.concatenate([(x.T @ dpred).ravel(), dpred.sum(axis=0)])


class MLPNet(Model):
    kind = "mlp"

    @classmethod
    def validate_config(cls, config):
        super().validate_config(config)
        if config.hidden < 1:
            raise ConfigError("hidden must be >= 1")

    @classmethod
    def shapes(cls, c):
        return [((c.input_len, c.hidden), c.input_len), ((c.hidden,), c.input_len),
                ((c.hidden, c.horizon), c.hidden), ((c.horizon,), c.hidden)]

    def _forward(self, x):
        W1, b1, W2, b2 = self.unpack()
        z = x @ W1 + b1
        a = np.maximum(z, 0.0)
        return a @ W2 + b2, (z, a)

    def _backward(self, x, dpred, cache):
        z, a = cache
        _, _, W2, _ = self.unpack()
        dz = (dpred @ W2.T) * (z > 0)
        return np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0),
                               (a.T @ dpred).ravel(), dpred.sum(axis=0)])


class SparseTSFNet(Model):
    """One affine map shared by the ``period`` phase strands of the input.

    Strand p holds x[p], x[p + w], ... ; its output fills y[p], y[p + w], ...
    """

    kind = "sparsetsf"

    @classmethod
    def validate_config(cls, config):
        super().validate_config(config)
        w = config.period
        if w < 1 or config.input_len % w or config.horizon % w:
            raise ConfigError(
                f"sparsetsf period {w} must divide input_len {config.input_len} "
                f"and horizon {config.horizon}")

    @classmethod
    def shapes(cls, c):
        n_in, n_out = c.input_len // c.period, c.horizon // c.period
        return [((n_in, n_out), n_in), ((n_out,), n_in)]

    def _strands(self, x):
        """(batch * period, L_in / period) matrix, one row per strand."""
        c = self.config
        n_in = c.input_len // c.period
        return x.reshape(len(x), n_in, c.period).transpose(0, 2, 1).reshape(-1, n_in)

    def _forward(self, x):
        W, b = self.unpack()
        s = self._strands(x)
        o = (s @ W + b).reshape(len(x), self.config.period, -1)
        return o.transpose(0, 2, 1).reshape(len(x), self.config.horizon), s

    def _backward(self, x, dpred, s):
        c = self.config
        n_out = c.horizon // c.period
        do = dpred.reshape(len(x), n_out, c.period).transpose(0, 2, 1).reshape(-1, n_out)
        return np.concatenate([(s.T @ do).ravel(), do.sum(axis=0)])


MODEL_REGISTRY = {cls.kind: cls for cls in (LinearNet, MLPNet, SparseTSFNet)}


def init_model(config: ModelConfig) -> Model:
    try:
        cls = MODEL_REGISTRY[config.kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {config.kind!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return cls(config)


def forward(model: Model, x):
    return model.forward(x)


# --------------------------------------------------------------------------
# training

class EmptySubDatasetError(DcatsError):
    """No training window is left to fine-tune on."""


class _WindowData:
    """Normalized (input, target) arrays for a window set."""

    def __init__(self, store, windows, scaler):
        L, H = windows.input_len, windows.horizon
        rows = _rows_of(store, windows.entries[:, 0])
        spans = sliding_window_view(normalized_values(store, scaler), L + H, axis=1)
        block = spans[rows, windows.entries[:, 1]]
        self.x = np.ascontiguousarray(block[:, :L])
        self.y = np.ascontiguousarray(block[:, L:])

    def __len__(self):
        return len(self.x)


_NORM_CACHE = {}


def normalized_values(store, scaler):
    """Whole store z-scored with ``scaler``; memoized per (store, scaler) pair."""
    key = (id(store), id(scaler))
    hit = _NORM_CACHE.get(key)
    if hit is not None and hit[0] is store and hit[1] is scaler:
        return hit[2]
    if len(_NORM_CACHE) > 8:
        _NORM_CACHE.clear()
    norm = (store.values - scaler.mean[:, None]) / scaler.std[:, None]
    norm.setflags(write=False)
    _NORM_CACHE[key] = (store, scaler, norm)
    return norm


def _rows_of(store, location_ids):
    ids = np.asarray(store.location_ids)
    order = np.argsort(ids)
    pos = np.searchsorted(ids[order], location_ids)
    rows = order[np.minimum(pos, len(ids) - 1)]
    if len(rows) and not np.array_equal(ids[rows], location_ids):
        raise KeyError("window set references a location absent from the store")
    return rows


def _mean_loss(model, data, loss, batch=4096):
    total = 0.0
    for s in range(0, len(data), batch):
        pred = model.forward(data.x[s:s + batch])
        err = pred - data.y[s:s + batch]
        total += float(np.sum(err ** 2) if loss == "mse" else np.sum(np.abs(err)))
    return total / (len(data) * data.y.shape[1])


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def train(model: Model, windows, store, scaler, tc: TrainConfig, val_windows=None):
    """Mini-batch training in place on a copy; returns (trained model, history).

    Early stopping (with restore of the best epoch) applies only when
    ``val_windows`` is supplied.
    """
    if len(windows) == 0:
        raise EmptySubDatasetError("training window set is empty")
    if tc.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"unknown optimizer {tc.optimizer!r}")
    model = model.clone()
    data = _WindowData(store, windows, scaler)
    val = _WindowData(store, val_windows, scaler) if val_windows is not None and len(val_windows) else None
    rng = np.random.default_rng(tc.seed)
    hist = TrainHistory()
    m1 = np.zeros_like(model.params)
    m2 = np.zeros_like(model.params)
    buf = np.empty_like(model.params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    best_val, best_params, bad = math.inf, model.params.copy(), 0

    params = model.params  # updated in place; the cached weight views stay valid
    for epoch in range(tc.epochs):
        perm = rng.permutation(len(data))
        losses = []
        for s in range(0, len(perm), tc.batch_size):
            b = perm[s:s + tc.batch_size]
            xb, yb = data.x[b], data.y[b]
            value, grad = model.loss_and_grad(xb, yb, tc.loss)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, step {step + 1} "
                    f"(learning_rate={tc.learning_rate:g}); try a smaller learning rate")
            step += 1
            if tc.optimizer == "adam":
                m1 *= beta1
                m1 += (1 - beta1) * grad
                m2 *= beta2
                grad *= grad
                grad *= 1 - beta2
                m2 += grad
                # bias correction folded into the step size (equivalent form of the update)
                corr = math.sqrt(1 - beta2 ** step)
                lr_t = tc.learning_rate * corr / (1 - beta1 ** step)
                np.sqrt(m2, out=buf)
                buf += eps * corr
                np.divide(m1, buf, out=buf)
                buf *= lr_t
                params -= buf
            else:
                params -= tc.learning_rate * grad
            losses.append(value * len(xb))
        hist.train_loss.append(sum(losses) / len(data))
        if val is not None:
            v = _mean_loss(model, val, tc.loss)
            hist.val_loss.append(v)
            if v < best_val:
                best_val, best_params, bad = v, params.copy(), 0
                hist.best_epoch = epoch
            else:
                bad += 1
                if bad >= tc.patience:
                    hist.stopped_early = True
                    break
    if val is not None and hist.best_epoch >= 0:
        model.params = best_params
    return model, hist


def fine_tune(foundation: Model, sub_windows, store, scaler, tc: TrainConfig, val_windows=None) -> Model:
    """Continue training a copy of ``foundation``; the foundation is left untouched."""
    if len(sub_windows) == 0:
        raise EmptySubDatasetError("sub-dataset has no training windows after pruning")
    if tc.epochs == 0:
        return foundation.clone()
    tuned, _ = train(foundation, sub_windows, store, scaler, tc, val_windows)
    return tuned


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalMetrics:
    mae: float
    rmse: float
    mape: float
    per_step_mae: tuple = ()
    per_step_rmse: tuple = ()
    per_step_mape: tuple = ()
    n_points: int = 0
    mape_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, actual, mape_eps: float = MAPE_EPS) -> EvalMetrics:
    """MAE, RMSE and MAPE (percent) over all windows and horizon steps.

    Arrays are (n_windows, H). MAPE skips points with |actual| <= ``mape_eps``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    actual = np.atleast_2d(np.asarray(actual, dtype=np.float64))
    err = pred - actual
    absd = np.abs(err)
    keep = np.abs(actual) > mape_eps
    ape = np.where(keep, absd / np.where(keep, np.abs(actual), 1.0), 0.0)
    n_keep = keep.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        step_mape = tuple((100.0 * ape.sum(axis=0) / n_keep).tolist())
    mape = 100.0 * float(ape.sum()) / keep.sum() if keep.any() else math.nan
    return EvalMetrics(
        mae=float(absd.mean()),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mape=mape,
        per_step_mae=tuple(absd.mean(axis=0).tolist()),
        per_step_rmse=tuple(np.sqrt(np.mean(err ** 2, axis=0)).tolist()),
        per_step_mape=step_mape,
        n_points=int(err.size),
        mape_excluded=int(err.size - keep.sum()),
    )


def predict_windows(model: Model, store, scaler, windows):
    """Denormalized forecasts and actuals for every window, shape (n, H)."""
    data = _WindowData(store, windows, scaler)
    rows = _rows_of(store, windows.entries[:, 0])
    pred = model.forward(data.x) * scaler.std[rows][:, None] + scaler.mean[rows][:, None]
    idx = windows.entries[:, 1][:, None] + windows.input_len + np.arange(windows.horizon)[None, :]
    return pred, store.values[rows[:, None], idx]


def evaluate(model: Model, store, scaler, target_id, eval_range, input_len=None, horizon=None) -> EvalMetrics:
    input_len = model.config.input_len if input_len is None else input_len
    horizon = model.config.horizon if horizon is None else horizon
    windows = make_windows(store, eval_range, [target_id], input_len, horizon)
    if len(windows) == 0:
        raise DataError(f"range {tuple(eval_range)} too short for one window "
                        f"(needs {input_len + horizon} steps)")
    pred, actual = predict_windows(model, store, scaler, windows)
    return compute_metrics(pred, actual)


# --------------------------------------------------------------------------
# checkpoints

def model_to_bytes(model: Model) -> bytes:
    header = json.dumps(asdict(model.config), sort_keys=True, separators=(",", ":")).encode()
    return (CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header
            + np.ascontiguousarray(model.params, dtype="<f8").tobytes())


def model_from_bytes(raw: bytes) -> Model:
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError("not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[off:off + 4])
    config = ModelConfig(**json.loads(raw[off + 4:off + 4 + hlen]))
    params = np.frombuffer(raw, dtype="<f8", offset=off + 4 + hlen)
    model = MODEL_REGISTRY[config.kind](config, params.copy())
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def with_seed(config, seed: int):
    return replace(config, seed=seed)
