"""Backpropagation, Adam with feasibility projection, and k-fold evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .features import N_CONVEX, Dataset
from .model import TABLE1, Family, IcnnModel, init_network
from .networks import FicnnParams, PicnnParams, clamp_in_place, ficnn_forward, picnn_forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _split_inputs(params, inputs):
    """FICNN takes one matrix; PICNN takes ``(y, ytilde)`` or one matrix split at N_CONVEX."""
    if isinstance(params, PicnnParams):
        if isinstance(inputs, tuple):
            Y, V = inputs
        else:
            inputs = np.atleast_2d(inputs)
            Y, V = inputs[:, : params.input_dim], inputs[:, params.input_dim :]
        return np.atleast_2d(np.asarray(Y, float)), np.atleast_2d(np.asarray(V, float))
    return np.atleast_2d(np.asarray(inputs, float)), None


def _ficnn_loss_grad(p: FicnnParams, Y, t, grad):
    pres, zs = [], [None]
    z = None
    for i in range(p.n_layers):
        pre = Y @ p.Wy[i].T + p.b[i]
        if i > 0:
            pre += z @ p.Wz[i].T
        pres.append(pre)
        z = p.activations[i](pre)
        zs.append(z)
    r = z[:, 0] - t
    loss = float(np.mean(r * r))
    dz = (2.0 / len(t)) * r[:, None]
    for i in reversed(range(p.n_layers)):
        delta = dz * p.activations[i].derivative(pres[i])
        grad[f"Wy{i}"][...] = delta.T @ Y
        grad[f"b{i}"][...] = delta.sum(axis=0)
        if i > 0:
            grad[f"Wz{i}"][...] = delta.T @ zs[i]
            dz = delta @ p.Wz[i]
    return loss


def _picnn_loss_grad(p: PicnnParams, Y, V0, t, grad):
    L = p.n_layers
    Vs, cache = [V0], []
    z = None
    V = V0
    for i in range(L):
        pre_y = V @ p.Wyv[i].T + p.by[i]
        gate_y = p.yv_activations[i](pre_y)
        yg = Y * gate_y
        pre = yg @ p.Wy[i].T + V @ p.Wv[i].T + p.b[i]
        entry = {"pre_y": pre_y, "gate_y": gate_y, "yg": yg, "z": z}
        if i > 0:
            pre_z = V @ p.Wzv[i].T + p.bz[i]
            gate_z = p.zv_activations[i](pre_z)
            pre += (z * gate_z) @ p.Wz[i].T
            entry.update(pre_z=pre_z, gate_z=gate_z)
        entry["pre"] = pre
        z = p.activations[i](pre)
        if i < L - 1:
            pre_t = V @ p.Wt[i].T + p.bt[i]
            entry["pre_t"] = pre_t
            V = p.tilde_activations[i](pre_t)
            Vs.append(V)
        cache.append(entry)
    r = z[:, 0] - t
    loss = float(np.mean(r * r))
    dz = (2.0 / len(t)) * r[:, None]
    dv_next = None
    for i in reversed(range(L)):
        c, V = cache[i], Vs[i]
        delta = dz * p.activations[i].derivative(c["pre"])
        grad[f"Wy{i}"][...] = delta.T @ c["yg"]
        grad[f"b{i}"][...] = delta.sum(axis=0)
        grad[f"Wv{i}"][...] = delta.T @ V
        dv = delta @ p.Wv[i]
        dpre_y = (delta @ p.Wy[i]) * Y * p.yv_activations[i].derivative(c["pre_y"])
        grad[f"Wyv{i}"][...] = dpre_y.T @ V
        grad[f"by{i}"][...] = dpre_y.sum(axis=0)
        dv += dpre_y @ p.Wyv[i]
        if i > 0:
            dzg = delta @ p.Wz[i]
            grad[f"Wz{i}"][...] = delta.T @ (c["z"] * c["gate_z"])
            dpre_z = dzg * c["z"] * p.zv_activations[i].derivative(c["pre_z"])
            grad[f"Wzv{i}"][...] = dpre_z.T @ V
            grad[f"bz{i}"][...] = dpre_z.sum(axis=0)
            dv += dpre_z @ p.Wzv[i]
            dz = dzg * c["gate_z"]
        if dv_next is not None:
            dpre_t = dv_next * p.tilde_activations[i].derivative(c["pre_t"])
            grad[f"Wt{i}"][...] = dpre_t.T @ V
            grad[f"bt{i}"][...] = dpre_t.sum(axis=0)
            dv += dpre_t @ p.Wt[i]
        dv_next = dv
    return loss


def loss_and_gradient(params, inputs, targets, out: np.ndarray | None = None):
    """Mean squared error over the batch and its gradient as a flat vector.

    The gradient uses the layout of ``params.flat``. ReLU kinks get
    subgradient 0.
    """
    Y, V = _split_inputs(params, inputs)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if len(t) == 0:
        raise ValueError("empty batch")
    if Y.shape[0] != len(t):
        raise ValueError(f"{Y.shape[0]} input rows but {len(t)} targets")
    if Y.shape[1] != params.input_dim:
        raise ValueError(f"inputs have {Y.shape[1]} columns, network expects {params.input_dim}")
    flat = np.zeros_like(params.flat) if out is None else out
    grad = params.unflatten(flat)
    if V is None:
        loss = _ficnn_loss_grad(params, Y, t, grad)
    else:
        if V.shape[1] != params.tilde_dim:
            raise ValueError(f"ytilde has {V.shape[1]} columns, network expects {params.tilde_dim}")
        loss = _picnn_loss_grad(params, Y, V, t, grad)
    return loss, flat


def gradients(params, inputs, targets) -> dict[str, np.ndarray]:
    """Gradient of the batch MSE keyed like ``params.named_arrays()``."""
    _, flat = loss_and_gradient(params, inputs, targets)
    return params.unflatten(flat)


def mse(params, inputs, targets) -> float:
    Y, V = _split_inputs(params, inputs)
    pred = ficnn_forward(params, Y) if V is None else picnn_forward(params, Y, V)
    return float(np.mean((pred - np.asarray(targets, float).reshape(-1)) ** 2))


class Adam:
    """Adam on a flat parameter vector, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        params -= (self.lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.eps)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    beta_offset: float = 0.8

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    @classmethod
    def for_rate(cls, rate_minutes: int, **overrides) -> TrainConfig:
        """Adam defaults plus the epochs and output offset tuned for ``rate_minutes``."""
        preset = TABLE1[rate_minutes]
        kw = {"epochs": preset["epochs"], "beta_offset": preset["beta"]}
        kw.update(overrides)
        return cls(**kw)


def train(params, inputs, targets, config: TrainConfig):
    """Minimise batch MSE with Adam, projecting onto the feasible set after each step.

    Returns ``(params, loss_trace)``; ``params`` is a trained copy and the
    trace holds one loss per mini-batch (``epochs * ceil(n / batch_size)``).
    """
    Y, V = _split_inputs(params, inputs)
    t = np.asarray(targets, dtype=float).reshape(-1)
    n = len(t)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if Y.shape[0] != n:
        raise ValueError(f"{Y.shape[0]} input rows but {n} targets")
    params = params.copy()
    mask = params.constrained_mask()
    clamp_in_place(params, mask)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    grad = np.zeros_like(params.flat)
    bs = config.batch_size
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            batch = Y[idx] if V is None else (Y[idx], V[idx])
            loss, _ = loss_and_gradient(params, batch, t[idx], out=grad)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            trace.append(loss)
            opt.step(params.flat, grad)
            clamp_in_place(params, mask)
    return params, np.asarray(trace)


def fit_scaler(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def fit_model(family, dataset: Dataset, config: TrainConfig | None = None,
              hidden: int | None = None, n_layers: int | None = None):
    """Initialise and train a network of ``family`` on ``dataset``.

    Returns ``(IcnnModel, loss_trace)``. Layer count and width default to the
    tuned values for the dataset's sampling rate.
    """
    family = Family(family)
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    preset = TABLE1.get(dataset.rate_minutes, TABLE1[20])
    config = config or TrainConfig.for_rate(dataset.rate_minutes)
    hidden = hidden or preset["hidden"]
    n_layers = n_layers or preset["layers"]
    mean, scale = fit_scaler(dataset.X)
    net = init_network(family, hidden, n_layers, config.beta_offset,
                       np.random.default_rng([config.seed, 0]))
    Xs = (dataset.X - mean) / scale
    inputs = (Xs[:, :N_CONVEX], Xs[:, N_CONVEX:]) if family.partial else Xs
    net, trace = train(net, inputs, dataset.target, config)
    return IcnnModel(family, net, mean, scale, dataset.rate_minutes), trace


# k-fold evaluation ---------------------------------------------------------

HORIZONS = {"1h": (20, 3), "6h": (180, 2)}


@dataclass
class FoldReport:
    """Per-repetition validation MSE (K^2) and its summary statistics."""

    family: str
    horizon: str
    mse: np.ndarray = field(repr=False)

    @property
    def median(self) -> float:
        return float(np.median(self.mse))

    @property
    def q1(self) -> float:
        return float(np.percentile(self.mse, 25))

    @property
    def q3(self) -> float:
        return float(np.percentile(self.mse, 75))

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    @property
    def min(self) -> float:
        return float(np.min(self.mse))

    @property
    def max(self) -> float:
        return float(np.max(self.mse))

    def summary(self) -> dict:
        return {
            "family": self.family, "horizon": self.horizon, "repetitions": len(self.mse),
            "median": self.median, "q1": self.q1, "q3": self.q3, "iqr": self.iqr,
            "min": self.min, "max": self.max,
        }  # fmt: skip

    def repetitions_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "family": self.family, "horizon": self.horizon,
            "repetition": np.arange(len(self.mse)), "mse": self.mse,
        })  # fmt: skip


def multistep_starts(dataset: Dataset, steps: int, rows: np.ndarray) -> np.ndarray:
    """Rows ``j`` such that ``j .. j+steps-1`` are consecutive and all in ``rows``."""
    n = len(dataset)
    member = np.zeros(n, dtype=bool)
    member[rows] = True
    ts = dataset.timestamps.astype("datetime64[ns]").astype(np.int64)
    rate_ns = dataset.rate_minutes * 60 * 10**9
    ok = member.copy()
    for s in range(1, steps):
        shifted = np.zeros(n, dtype=bool)
        shifted[: n - s] = member[s:] & (ts[s:] - ts[: n - s] == s * rate_ns)
        ok &= shifted
    return np.flatnonzero(ok)


def multistep_mse(model: IcnnModel, dataset: Dataset, starts: np.ndarray, steps: int) -> float:
    """MSE of the final-step temperature after ``steps`` closed-loop predictions."""
    from .rollout import rollout_rows

    pred = rollout_rows(model, dataset, starts, steps)
    truth = dataset.T_br[starts] + sum(dataset.target[starts + s] for s in range(steps))
    return float(np.mean((pred - truth) ** 2))


def _one_repetition(args):
    family, dataset, rep, seed, train_folds, val_folds, steps, config = args
    rng = np.random.default_rng([seed, rep])
    folds = np.unique(dataset.folds)
    chosen = rng.permutation(folds)
    train_set = chosen[:train_folds]
    val_set = chosen[train_folds : train_folds + val_folds]
    train_rows = np.flatnonzero(np.isin(dataset.folds, train_set))
    val_rows = np.flatnonzero(np.isin(dataset.folds, val_set))
    cfg = replace(config, seed=int(rng.integers(2**31)))
    model, _ = fit_model(family, dataset.subset(train_rows), cfg)
    starts = multistep_starts(dataset, steps, val_rows)
    if starts.size == 0:
        raise ValueError("validation folds contain no complete multi-step window")
    return multistep_mse(model, dataset, starts, steps)


def kfold_evaluate(family, dataset: Dataset, repetitions: int = 20, train_folds: int = 9,
                   val_folds: int = 3, horizon: str = "1h", seed: int = 0,
                   config: TrainConfig | None = None, n_jobs: int = 1) -> FoldReport:
    """Repeated random fold split: train on ``train_folds`` months, validate on ``val_folds``.

    Validation error is the MSE of the temperature predicted ``horizon`` ahead
    by repeated one-step prediction (1h: three 20 min steps, 6h: two 180 min
    steps). ``dataset`` must be sampled at the horizon's rate.
    """
    family = Family(family)
    if horizon not in HORIZONS:
        raise ValueError(f"horizon must be one of {sorted(HORIZONS)}")
    rate, steps = HORIZONS[horizon]
    if dataset.rate_minutes != rate:
        raise ValueError(f"horizon {horizon} needs a {rate} min dataset, got {dataset.rate_minutes} min")
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    if train_folds + val_folds > dataset.n_folds:
        raise ValueError(
            f"requested {train_folds}+{val_folds} folds but dataset has {dataset.n_folds}"
        )
    config = config or TrainConfig.for_rate(rate)
    jobs = [(family, dataset, r, seed, train_folds, val_folds, steps, config)
            for r in range(repetitions)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            mse = list(pool.map(_one_repetition, jobs))
    else:
        mse = [_one_repetition(j) for j in jobs]
    log.info("kfold %s %s: %s", family.value, horizon, mse)
    return FoldReport(family.value, horizon, np.asarray(mse))

