"""Trained temperature-change predictors: a network plus input scaling."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import serialization
from .features import FEATURES, N_CONVEX
from .networks import (
    FicnnParams,
    Mode,
    PicnnParams,
    ficnn_forward,
    init_ficnn,
    init_picnn,
    picnn_forward,
)


class Family(str, enum.Enum):
    FICNN_AMOS = "ficnn_amos"
    FICNN_MPC = "ficnn_mpc"
    PICNN_AMOS = "picnn_amos"
    PICNN_MPC = "picnn_mpc"

    @property
    def partial(self) -> bool:
        return self.value.startswith("picnn")

    @property
    def mode(self) -> Mode:
        return Mode.MPC if self.value.endswith("mpc") else Mode.AMOS


# Tuned settings per sampling rate in minutes: 20 min for up to one hour
# ahead, 180 min beyond that.
TABLE1 = {
    20: {"epochs": 20, "layers": 4, "hidden": 9, "beta": 0.8},
    180: {"epochs": 40, "layers": 4, "hidden": 8, "beta": 12.0},
}


@dataclass(eq=False)
class IcnnModel:
    """Predicts ``dT_br[k+1]`` (K) from raw feature rows in ``FEATURES`` order.

    Inputs are z-scored with ``mean``/``scale`` before reaching the network.
    Scales are positive, so convexity and monotonicity in the raw convex
    features carry over from the network.
    """

    family: Family
    net: FicnnParams | PicnnParams
    mean: np.ndarray
    scale: np.ndarray
    rate_minutes: int

    def __post_init__(self):
        self.family = Family(self.family)
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=float).reshape(-1)
        if self.mean.shape != (len(FEATURES),) or self.scale.shape != (len(FEATURES),):
            raise ValueError(f"scaler needs {len(FEATURES)} entries")
        if np.any(self.scale <= 0):
            raise ValueError("feature scales must be positive")

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def predict(self, X) -> np.ndarray:
        return net_predict(self.net, self.standardize(X))

    def save(self, path) -> None:
        serialization.save(
            path, self.net,
            header={"family": self.family.value, "rate_minutes": self.rate_minutes,
                    "features": " ".join(FEATURES)},
            extra_arrays={"mean": self.mean, "scale": self.scale},
        )  # fmt: skip

    @classmethod
    def load(cls, path, validate: bool = True) -> IcnnModel:
        net, header, extras = serialization.load(path, validate=validate)
        return cls(
            Family(header["family"]), net, extras["mean"], extras["scale"],
            int(header["rate_minutes"]),
        )  # fmt: skip


def net_predict(net, Xs: np.ndarray) -> np.ndarray:
    """Evaluate ``net`` on standardised full feature rows."""
    Xs = np.atleast_2d(Xs)
    if isinstance(net, PicnnParams):
        return np.atleast_1d(picnn_forward(net, Xs[:, :N_CONVEX], Xs[:, N_CONVEX:]))
    return np.atleast_1d(ficnn_forward(net, Xs))


def init_network(family: Family, hidden: int, n_layers: int, beta: float,
                 rng: np.random.Generator):
    family = Family(family)
    if family.partial:
        return init_picnn(N_CONVEX, len(FEATURES) - N_CONVEX, hidden, n_layers,
                          family.mode, beta, rng)
    return init_ficnn(len(FEATURES), hidden, n_layers, family.mode, beta, rng)
