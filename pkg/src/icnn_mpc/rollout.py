"""Multi-step temperature prediction by feeding predictions back as lags.

A :class:`RolloutPlan` chains segments of one-step models, e.g. three 20 min
steps followed by two 180 min steps. Inputs ``u`` are per-fine-step energies
(kWh); on a coarser segment the same value is held for the whole step, so the
model sees ``u * rate / base_rate`` (move blocking).

At a switch to a coarser rate the temperature lags are rebuilt: lag 1 is the
sum of all fine-step predictions so far plus the measured change over the
rest of the coarse window (``coarse_offset``), lags 2 and 3 come from
measured coarse history. Sums of convex non-decreasing functions stay convex and
non-decreasing, so the seam does not break the guarantee of MPC-mode models.

The ambient difference ``dT_amb`` is computed against the initial room
temperature by default. Feeding the predicted temperature back into it
(``ambient_feedback=True``) is more faithful physically but enters with a
negative sign and voids the convexity guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .features import FEATURES, encode_times
from .model import IcnnModel


class RolloutError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    model: IcnnModel
    steps: int

    @property
    def rate_minutes(self) -> int:
        return self.model.rate_minutes


@dataclass
class RolloutPlan:
    segments: list[Segment]

    def __post_init__(self):
        self.segments = list(self.segments)
        if not self.segments:
            raise RolloutError("plan needs at least one segment")
        rates = [s.rate_minutes for s in self.segments]
        if any(b < a for a, b in zip(rates, rates[1:])):
            raise RolloutError(f"segments must run fine to coarse, got rates {rates}")
        if len(set(rates)) > 2:
            raise RolloutError("at most two sampling rates are supported")
        if any(s.steps < 1 for s in self.segments):
            raise RolloutError("every segment needs at least one step")

    @classmethod
    def standard(cls, fine: IcnnModel, coarse: IcnnModel | None = None,
                 fine_steps: int = 3, coarse_steps: int = 2) -> RolloutPlan:
        """Three fine steps then two coarse steps (7 h for 20/180 min models)."""
        segs = [Segment(fine, fine_steps)]
        if coarse is not None and coarse_steps:
            segs.append(Segment(coarse, coarse_steps))
        return cls(segs)

    @property
    def n_steps(self) -> int:
        return sum(s.steps for s in self.segments)

    @property
    def base_rate(self) -> int:
        return self.segments[0].rate_minutes

    @property
    def step_minutes(self) -> np.ndarray:
        return np.concatenate([[s.rate_minutes] * s.steps for s in self.segments]).astype(int)

    @property
    def step_offsets(self) -> np.ndarray:
        """Start of every step in minutes after the plan start."""
        return np.concatenate([[0], np.cumsum(self.step_minutes)[:-1]])

    @property
    def horizon(self) -> pd.Timedelta:
        return pd.Timedelta(minutes=int(self.step_minutes.sum()))

    @property
    def input_scale(self) -> np.ndarray:
        """Multiplier from the decision variable to each step's ``Q_u``."""
        return self.step_minutes / self.base_rate

    def step_times(self, start) -> pd.DatetimeIndex:
        return pd.Timestamp(start) + pd.to_timedelta(self.step_offsets, unit="min")


@dataclass
class RolloutHistory:
    """Measured state at the start of a rollout.

    ``dT`` holds ``(dT_br_k, dT_br_km1, dT_br_km2)`` at the first segment's
    rate and ``Q_sol`` the two previous solar values ``(km1, km2)``.
    ``coarse_dT`` and ``coarse_Q_sol`` are the two most recent measured
    values at the coarse rate, used when the plan switches rate, and
    ``coarse_offset`` the measured change from the start of the coarse window
    ending at the switch up to now. Any field may carry a leading batch
    dimension.
    """

    T_br: float | np.ndarray
    dT: np.ndarray
    Q_sol: np.ndarray
    coarse_dT: np.ndarray = field(default_factory=lambda: np.zeros(2))
    coarse_Q_sol: np.ndarray = field(default_factory=lambda: np.zeros(2))
    coarse_offset: float | np.ndarray = 0.0


@dataclass
class DisturbanceTrace:
    """Per-step exogenous inputs: step start times, ambient temperature,
    solar irradiation (window means for coarse steps) and the living-room
    difference held fixed over the horizon.

    ``timestamps`` may be 2-D (one row per batch member)."""

    timestamps: pd.DatetimeIndex | np.ndarray
    T_amb: np.ndarray
    Q_sol: np.ndarray
    dT_l: float | np.ndarray = 0.0

    def __len__(self) -> int:
        return np.atleast_2d(np.asarray(self.timestamps)).shape[1]


def _simulate(plan: RolloutPlan, history: RolloutHistory, dist: DisturbanceTrace,
              u: np.ndarray, ambient_feedback: bool) -> np.ndarray:
    N = plan.n_steps
    if u.shape[-1] != N:
        raise RolloutError(f"plan has {N} steps but u has {u.shape[-1]} entries")
    if len(dist) < N:
        raise RolloutError(f"disturbance trace covers {len(dist)} of {N} steps")
    U = np.atleast_2d(u)
    T0 = np.asarray(history.T_br, dtype=float)
    dT = np.asarray(history.dT, dtype=float)
    B = max(U.shape[0], T0.size, dT.reshape(-1, 3).shape[0],
            np.atleast_2d(dist.T_amb).shape[0], np.atleast_2d(dist.Q_sol).shape[0],
            np.asarray(dist.dT_l).size)
    U = np.broadcast_to(U, (B, N))
    T0 = np.broadcast_to(T0.reshape(-1), (B,))
    lags = np.array(np.broadcast_to(dT.reshape(-1, 3), (B, 3)))
    qlags = np.array(np.broadcast_to(np.asarray(history.Q_sol, float).reshape(-1, 2), (B, 2)))
    T_amb = np.broadcast_to(np.atleast_2d(np.asarray(dist.T_amb, float))[:, :N], (B, N))
    Q_sol = np.broadcast_to(np.atleast_2d(np.asarray(dist.Q_sol, float))[:, :N], (B, N))
    dT_l = np.broadcast_to(np.asarray(dist.dT_l, float).reshape(-1), (B,))
    stamps = np.asarray(dist.timestamps, dtype="datetime64[ns]")
    stamps = np.atleast_2d(stamps)[:, :N]
    t_sin, t_cos = encode_times(stamps.reshape(-1))
    t_sin = np.broadcast_to(t_sin.reshape(stamps.shape), (B, N))
    t_cos = np.broadcast_to(t_cos.reshape(stamps.shape), (B, N))
    scale = plan.input_scale

    X = np.empty((B, len(FEATURES)))
    T = T0.copy()
    out = np.empty((B, N))
    fine_sum = np.zeros(B)
    j = 0
    prev_rate = plan.base_rate
    for seg in plan.segments:
        if seg.rate_minutes != prev_rate:
            coarse = np.broadcast_to(np.asarray(history.coarse_dT, float).reshape(-1, 2), (B, 2))
            offset = np.broadcast_to(np.asarray(history.coarse_offset, float).reshape(-1), (B,))
            lags = np.column_stack([fine_sum + offset, coarse])
            qlags = np.array(np.broadcast_to(
                np.asarray(history.coarse_Q_sol, float).reshape(-1, 2), (B, 2)))
            prev_rate = seg.rate_minutes
        for _ in range(seg.steps):
            X[:, 0] = T_amb[:, j] - (T if ambient_feedback else T0)
            X[:, 1:4] = lags
            X[:, 4] = U[:, j] * scale[j]
            X[:, 5] = Q_sol[:, j]
            X[:, 6:8] = qlags
            X[:, 8] = t_sin[:, j]
            X[:, 9] = t_cos[:, j]
            X[:, 10] = dT_l
            delta = seg.model.predict(X)
            if not np.all(np.isfinite(delta)):
                raise RolloutError(f"non-finite prediction at step {j}")
            T = T + delta
            out[:, j] = T
            lags = np.column_stack([delta, lags[:, 0], lags[:, 1]])
            qlags = np.column_stack([Q_sol[:, j], qlags[:, 0]])
            if seg.rate_minutes == plan.base_rate:
                fine_sum = fine_sum + delta
            j += 1
    return out


def predict_trajectory(plan: RolloutPlan, history: RolloutHistory, disturbances: DisturbanceTrace,
                       u, ambient_feedback: bool = False) -> np.ndarray:
    """Room temperature after each step of ``plan``.

    ``u`` is one input sequence (shape ``(N,)``, returns ``(N,)``) or a
    batch ``(B, N)`` returning ``(B, N)``.
    """
    u = np.asarray(u, dtype=float)
    out = _simulate(plan, history, disturbances, u, ambient_feedback)
    return out[0] if u.ndim == 1 and out.shape[0] == 1 else out


def rollout_rows(model: IcnnModel, dataset, starts: np.ndarray, steps: int,
                 ambient_feedback: bool = False) -> np.ndarray:
    """Predict ``T_br`` ``steps`` ahead from each start row of a feature dataset.

    Rows ``start .. start+steps-1`` must be consecutive; their measured
    disturbances and inputs drive the rollout while temperature lags come
    from the predictions.
    """
    starts = np.asarray(starts)
    idx = starts[:, None] + np.arange(steps)[None, :]
    X = dataset.X
    T_br = dataset.T_br
    history = RolloutHistory(T_br[starts], X[starts, 1:4], X[starts, 6:8])
    dist = DisturbanceTrace(
        dataset.timestamps[idx], X[idx, 0] + T_br[idx], X[idx, 5], X[starts, 10]
    )
    plan = RolloutPlan([Segment(model, steps)])
    return _simulate(plan, history, dist, X[idx, 4], ambient_feedback)[:, -1]


# convexity audit -----------------------------------------------------------


@dataclass
class AuditReport:
    """Per-step counts of midpoint-convexity and monotonicity violations."""

    midpoint_violations: np.ndarray
    worst_gap: np.ndarray
    monotone_violations: np.ndarray
    worst_drop: np.ndarray
    samples: int
    tol: float

    @property
    def violations(self) -> int:
        return int(self.midpoint_violations.sum())

    @property
    def monotonicity_violations(self) -> int:
        return int(self.monotone_violations.sum())

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.monotonicity_violations == 0

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": np.arange(1, len(self.worst_gap) + 1),
            "violations": self.midpoint_violations,
            "worst_gap": self.worst_gap,
            "monotone_violations": self.monotone_violations,
            "worst_drop": self.worst_drop,
        })  # fmt: skip

    def to_csv(self, path) -> None:
        self.frame().to_csv(path, index=False, float_format="%.6e")

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.violations} convexity and {self.monotonicity_violations} "
            f"monotonicity violations over {self.samples} pairs "
            f"(worst gap {self.worst_gap.max():.3e}, tol {self.tol:g})"
        )


def audit_convexity(plan: RolloutPlan, history: RolloutHistory, disturbances: DisturbanceTrace,
                    u_box=(-0.6, 0.0), lag_box=(-0.5, 0.5), samples: int = 10_000,
                    tol: float = 1e-9, seed: int = 0, chunk: int = 2000,
                    ambient_feedback: bool = False) -> AuditReport:
    """Sample convexity and monotonicity of every predicted temperature.

    The audited inputs are the whole input sequence plus the three initial
    temperature lags. For each random pair ``a, b`` in the box and each
    ``t`` in ``{0.25, 0.5, 0.75}`` the gap ``T(t a + (1-t) b) - (t T(a) + (1-t) T(b))``
    must not exceed ``tol``. For each sample and coordinate, a random
    increase of that coordinate must not lower any temperature by more than
    ``tol``.
    """
    N = plan.n_steps
    dim = N + 3
    lo = np.r_[np.full(N, u_box[0]), np.full(3, lag_box[0])]
    hi = np.r_[np.full(N, u_box[1]), np.full(3, lag_box[1])]
    rng = np.random.default_rng(seed)
    T_br = np.asarray(history.T_br, dtype=float).reshape(-1)[:1]

    def run(P):
        h = RolloutHistory(np.broadcast_to(T_br, (len(P),)), P[:, N:],
                           history.Q_sol, history.coarse_dT, history.coarse_Q_sol,
                           history.coarse_offset)
        return _simulate(plan, h, disturbances, P[:, :N], ambient_feedback)

    mid_viol = np.zeros(N, dtype=int)
    mono_viol = np.zeros(N, dtype=int)
    worst_gap = np.full(N, -np.inf)
    worst_drop = np.full(N, -np.inf)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        A = rng.uniform(lo, hi, size=(n, dim))
        Bp = rng.uniform(lo, hi, size=(n, dim))
        fa, fb = run(A), run(Bp)
        for t in (0.25, 0.5, 0.75):
            gap = run(t * A + (1 - t) * Bp) - (t * fa + (1 - t) * fb)
            mid_viol += (gap > tol).sum(axis=0)
            worst_gap = np.maximum(worst_gap, gap.max(axis=0))
        for c in range(dim):
            P = A.copy()
            P[:, c] += rng.uniform(0, 1, size=n) * (hi[c] - A[:, c])
            drop = fa - run(P)
            mono_viol += (drop > tol).sum(axis=0)
            worst_drop = np.maximum(worst_drop, drop.max(axis=0))
        done += n
    return AuditReport(mid_viol, worst_gap, mono_viol, worst_drop, samples, tol)
