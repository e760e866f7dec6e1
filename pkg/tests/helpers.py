import numpy as np
import pandas as pd

from icnn_mpc.features import FEATURES
from icnn_mpc.model import Family, IcnnModel, init_network
from icnn_mpc.networks import Activation, FicnnParams, Mode

NF = len(FEATURES)

# scaler roughly matching real feature ranges so the network sees O(1) inputs
MEAN = np.array([8, 0, 0, 0, -0.3, 300, 300, 300, 0, 0, 2.0])
SCALE = np.array([5, 0.2, 0.2, 0.2, 0.3, 300, 300, 300, 1, 1, 2.0])


def wrap(net, rate=20):
    family = Family.FICNN_MPC if net.mode is Mode.MPC else Family.FICNN_AMOS
    return IcnnModel(family, net, np.zeros(NF), np.ones(NF), rate)


def linear_model(coef: dict, rate=20, mode=Mode.MPC, bias=0.0):
    """One-layer net computing ``bias + sum(coef[name] * feature[name])``."""
    Wy = np.zeros((1, NF))
    for k, v in coef.items():
        Wy[0, FEATURES.index(k)] = v
    net = FicnnParams([None], [Wy], [np.array([bias])], [Activation.identity()], mode)
    return wrap(net, rate)


def random_model(family, rate, seed, noise=0.2):
    rng = np.random.default_rng(seed)
    net = init_network(family, 6, 3, 0.5, rng)
    net.flat[:] += rng.normal(scale=noise, size=net.flat.size)
    mask = net.constrained_mask()
    net.flat[mask] = np.abs(net.flat[mask])
    return IcnnModel(family, net, MEAN, SCALE, rate)


def quasiconvex_gap(J):
    """Largest rise of a sampled 1-D function above both its left and right minima.

    Zero (up to roundoff) iff every sampled sublevel set is an interval.
    """
    J = np.asarray(J)
    left = np.minimum.accumulate(J)
    right = np.minimum.accumulate(J[::-1])[::-1]
    return float(np.max(J[1:-1] - np.maximum(left[:-2], right[2:])))


def coordinate_oracle(f, lower, upper, starts, points=121, rounds=30, shrink=0.25, min_width=1e-6):
    """Exhaustive coordinate-wise grid search with shrinking windows.

    ``f`` maps a batch ``(B, N)`` to objectives ``(B,)``. Each pass scans every
    coordinate over a grid in its current window, moving to the best point;
    windows shrink around the incumbent when a pass stops improving.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    best_u, best_f = None, np.inf
    for s in starts:
        u = np.array(s, float)
        fu = float(f(u[None])[0])
        width = upper - lower
        for _ in range(rounds):
            improved = False
            for k in range(len(u)):
                lo = max(lower[k], u[k] - width[k] / 2)
                hi = min(upper[k], u[k] + width[k] / 2)
                grid = np.linspace(lo, hi, points)
                U = np.repeat(u[None], points, axis=0)
                U[:, k] = grid
                vals = f(U)
                i = int(np.argmin(vals))
                if vals[i] < fu - 1e-15:
                    u, fu, improved = U[i], float(vals[i]), True
            if not improved:
                width = width * shrink
                if np.all(width < min_width):
                    break
        if fu < best_f:
            best_u, best_f = u, fu
    return best_u, best_f


def fine_records(n, T_br, start="2021-07-01 04:00", T_amb=30.0, Q_sol=0.0, T_l=24.0, Q_u=0.0):
    ts = pd.date_range(start, periods=n, freq="20min")
    return pd.DataFrame({
        "timestamp": ts, "T_br": np.broadcast_to(T_br, (n,)).astype(float),
        "T_l": T_l, "T_amb": T_amb, "Q_sol": Q_sol, "Q_u": Q_u,
    })  # fmt: skip
