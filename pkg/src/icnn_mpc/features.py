"""Raw measurement records, resampling and the lagged feature vector.

Raw records are kept in a :class:`pandas.DataFrame` with the columns of
:data:`RAW_COLUMNS`. Temperatures are in degC, ``Q_sol`` in W/m2 and ``Q_u``
is the heating (+) / cooling (-) energy delivered over the step in kWh.

A feature row at step ``k`` predicts ``T_br[k+1] - T_br[k]`` from

* convex inputs ``dT_amb, dT_br_k, dT_br_km1, dT_br_km2, Q_u`` and
* non-convex inputs ``Q_sol_k, Q_sol_km1, Q_sol_km2, t_sin, t_cos, dT_l``

where ``dT_br_k = T_br[k] - T_br[k-1]`` and the ``d*`` quantities with a
location subscript are differences to the bedroom temperature.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

RAW_COLUMNS = ("timestamp", "T_br", "T_l", "T_amb", "Q_sol", "Q_u")
CONVEX_FEATURES = ("dT_amb", "dT_br_k", "dT_br_km1", "dT_br_km2", "Q_u")
NONCONVEX_FEATURES = ("Q_sol_k", "Q_sol_km1", "Q_sol_km2", "t_sin", "t_cos", "dT_l")
FEATURES = CONVEX_FEATURES + NONCONVEX_FEATURES
N_CONVEX = len(CONVEX_FEATURES)

# coverage below this fraction turns a resampling window into a gap
MIN_COVERAGE = 0.5


def encode_time(timestamp) -> tuple[float, float]:
    """Time of day as ``(sin, cos)`` of the fractional hour on a 24 h circle."""
    ts = pd.Timestamp(timestamp)
    hour = ts.hour + ts.minute / 60 + ts.second / 3600 + ts.microsecond / 3.6e9
    angle = 2 * np.pi * hour / 24
    return float(np.sin(angle)), float(np.cos(angle))


def encode_times(timestamps) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`encode_time`."""
    idx = pd.DatetimeIndex(timestamps)
    hour = (idx - idx.normalize()) / pd.Timedelta(hours=1)
    angle = 2 * np.pi * np.asarray(hour, dtype=float) / 24
    return np.sin(angle), np.cos(angle)


def validate_records(records: pd.DataFrame) -> None:
    missing = [c for c in RAW_COLUMNS if c not in records.columns]
    if missing:
        raise ValueError(f"records lack columns {missing}")
    ts = pd.DatetimeIndex(records["timestamp"])
    if len(ts) > 1 and not (np.diff(ts.asi8) > 0).all():
        raise ValueError("timestamps must be strictly increasing")
    temps = records[["T_br", "T_l", "T_amb"]].to_numpy()
    if np.any((temps < -40) | (temps > 60)):
        raise ValueError("temperature outside [-40, 60] degC")
    if np.any(records["Q_sol"].to_numpy() < 0):
        raise ValueError("negative solar irradiation")


def read_records(path) -> pd.DataFrame:
    """Read a measurement CSV (header ``timestamp,T_br,T_l,T_amb,Q_sol,Q_u``)."""
    df = pd.read_csv(path, encoding="utf-8")
    if tuple(df.columns) != RAW_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(RAW_COLUMNS)}, got {','.join(df.columns)}")
    df["timestamp"] = pd.to_datetime(df["timestamp"], format="ISO8601")
    validate_records(df)
    return df


def write_records(records: pd.DataFrame, path) -> None:
    out = records.loc[:, list(RAW_COLUMNS)].copy()
    out["timestamp"] = pd.DatetimeIndex(out["timestamp"]).strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False, float_format="%.10g", encoding="utf-8")


def native_rate(records: pd.DataFrame) -> pd.Timedelta:
    ts = pd.DatetimeIndex(records["timestamp"])
    if len(ts) < 2:
        raise ValueError("need at least two records to infer the sampling rate")
    return pd.Timedelta(np.median(np.diff(ts.asi8)), unit="ns")


def resample(records: pd.DataFrame, rate, base_rate=None) -> pd.DataFrame:
    """Aggregate records into windows of length ``rate`` aligned to midnight.

    Temperatures and ``Q_sol`` are averaged, ``Q_u`` is summed. Windows with
    less than half of their expected samples are dropped (they become gaps).
    ``base_rate`` defaults to the median spacing of the input.
    """
    rate = pd.Timedelta(rate)
    base = native_rate(records) if base_rate is None else pd.Timedelta(base_rate)
    if base > rate:
        raise ValueError(f"cannot resample {base} records to the finer rate {rate}")
    expected = rate / base
    df = records.loc[:, list(RAW_COLUMNS)].copy()
    df["window"] = pd.DatetimeIndex(df["timestamp"]).floor(rate)
    grouped = df.groupby("window", sort=True)
    out = grouped[["T_br", "T_l", "T_amb", "Q_sol"]].mean()
    out["Q_u"] = grouped["Q_u"].sum()
    coverage = grouped.size() / expected
    out = out[coverage.to_numpy() >= MIN_COVERAGE]
    out = out.rename_axis("timestamp").reset_index()
    return out.loc[:, list(RAW_COLUMNS)]


@dataclass
class Dataset:
    """Feature rows with their one-step targets.

    ``X`` holds the features in :data:`FEATURES` order. ``T_br`` is the bedroom
    temperature at step ``k`` and ``folds`` the month index of each row.
    """

    X: np.ndarray
    target: np.ndarray
    timestamps: np.ndarray
    T_br: np.ndarray
    folds: np.ndarray
    rate_minutes: int

    def __len__(self) -> int:
        return len(self.target)

    @property
    def y(self) -> np.ndarray:
        return self.X[:, :N_CONVEX]

    @property
    def ytilde(self) -> np.ndarray:
        return self.X[:, N_CONVEX:]

    @property
    def n_folds(self) -> int:
        return len(np.unique(self.folds))

    def subset(self, index) -> Dataset:
        return Dataset(
            self.X[index], self.target[index], self.timestamps[index],
            self.T_br[index], self.folds[index], self.rate_minutes,
        )  # fmt: skip

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=list(FEATURES))
        df.insert(0, "timestamp", pd.DatetimeIndex(self.timestamps))
        df["target"] = self.target
        df["T_br"] = self.T_br
        df["fold"] = self.folds
        return df

    def to_csv(self, path) -> None:
        df = self.to_frame()
        df["timestamp"] = df["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, rate_minutes: int) -> Dataset:
        df = pd.read_csv(path)
        return cls(
            df[list(FEATURES)].to_numpy(float),
            df["target"].to_numpy(float),
            pd.to_datetime(df["timestamp"], format="ISO8601").to_numpy(),
            df["T_br"].to_numpy(float),
            df["fold"].to_numpy(int),
            rate_minutes,
        )


def month_folds(timestamps) -> np.ndarray:
    """Label each timestamp with a 0-based index of its calendar month."""
    idx = pd.DatetimeIndex(timestamps)
    months = idx.year.to_numpy() * 12 + idx.month.to_numpy()
    _, labels = np.unique(months, return_inverse=True)
    return labels.astype(int)


def build_features(records: pd.DataFrame, rate) -> Dataset:
    """Emit one feature row per step whose lag and target window is gap-free.

    A row at step ``k`` needs records ``k-3 .. k+1`` spaced exactly ``rate``
    apart: three temperature lags reach back to ``T_br[k-3]`` and the target
    reaches forward to ``T_br[k+1]``.
    """
    rate = pd.Timedelta(rate)
    ts = pd.DatetimeIndex(records["timestamp"])
    if len(ts) > 1 and not (np.diff(ts.asi8) > 0).all():
        raise ValueError("records must be sorted by strictly increasing timestamp")
    n = len(records)
    empty = Dataset(
        np.empty((0, len(FEATURES))), np.empty(0), np.empty(0, dtype="datetime64[ns]"),
        np.empty(0), np.empty(0, dtype=int), int(rate / pd.Timedelta(minutes=1)),
    )  # fmt: skip
    if n < 5:
        return empty
    T = records["T_br"].to_numpy(float)
    Q = records["Q_sol"].to_numpy(float)
    dT = np.diff(T)
    step_ok = np.diff(ts.asi8) == rate.value
    k = np.arange(3, n - 1)
    valid = step_ok[k - 3] & step_ok[k - 2] & step_ok[k - 1] & step_ok[k]
    k = k[valid]
    if k.size == 0:
        return empty
    t_sin, t_cos = encode_times(ts[k])
    T_amb = records["T_amb"].to_numpy(float)
    T_l = records["T_l"].to_numpy(float)
    X = np.column_stack([
        T_amb[k] - T[k],
        dT[k - 1],
        dT[k - 2],
        dT[k - 3],
        records["Q_u"].to_numpy(float)[k],
        Q[k],
        Q[k - 1],
        Q[k - 2],
        t_sin,
        t_cos,
        T_l[k] - T[k],
    ])  # fmt: skip
    return Dataset(
        X, dT[k], ts[k].to_numpy(), T[k], month_folds(ts[k]),
        int(rate / pd.Timedelta(minutes=1)),
    )  # fmt: skip
