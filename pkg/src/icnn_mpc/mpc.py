"""Soft-constrained receding-horizon control over multi-step ICNN dynamics.

Only the inputs ``u`` are decision variables. Predicted temperatures follow
from forward simulation and the optimal slack of every step has a closed
form, so the problem is a box-constrained minimisation over ``u`` alone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import pandas as pd
from scipy.optimize import Bounds, minimize

from .rollout import DisturbanceTrace, RolloutHistory, RolloutPlan, predict_trajectory

log = logging.getLogger(__name__)

U_MIN, U_MAX = -0.6, 0.0


# comfort schedule ----------------------------------------------------------


class ComfortSchedule:
    """Piecewise-constant daily comfort band.

    ``table`` rows are ``(time_of_day, x_min, x_max)``; each row holds from
    its time of day until the next one and the last row wraps past midnight.
    """

    def __init__(self, table):
        df = pd.DataFrame(table, columns=["time_of_day", "x_min", "x_max"])
        hours = np.array([_hours(t) for t in df["time_of_day"]], dtype=float)
        order = np.argsort(hours)
        self.hours = hours[order]
        self.lo = df["x_min"].to_numpy(float)[order]
        self.hi = df["x_max"].to_numpy(float)[order]
        if len(self.hours) == 0:
            raise ValueError("schedule needs at least one row")
        if np.any((self.hours < 0) | (self.hours >= 24)):
            raise ValueError("time_of_day must lie in [00:00, 24:00)")
        if np.any(self.lo > self.hi):
            raise ValueError("x_min exceeds x_max in schedule")

    @classmethod
    def default(cls) -> ComfortSchedule:
        return cls([("00:00", 22.0, 23.0), ("06:00", 22.0, 25.0), ("22:00", 22.0, 23.0)])

    @classmethod
    def read_csv(cls, path) -> ComfortSchedule:
        df = pd.read_csv(path, dtype={"time_of_day": str})
        if list(df.columns) != ["time_of_day", "x_min", "x_max"]:
            raise ValueError(f"{path}: expected header time_of_day,x_min,x_max")
        return cls(df.itertuples(index=False))

    def to_csv(self, path) -> None:
        rows = [(f"{int(h):02d}:{int(round(h % 1 * 60)):02d}", lo, hi)
                for h, lo, hi in zip(self.hours, self.lo, self.hi)]
        pd.DataFrame(rows, columns=["time_of_day", "x_min", "x_max"]).to_csv(path, index=False)

    def _index(self, t) -> np.ndarray:
        idx = pd.DatetimeIndex(np.atleast_1d(np.asarray(t, dtype="datetime64[ns]")))
        h = np.asarray((idx - idx.normalize()) / pd.Timedelta(hours=1), dtype=float)
        return (np.searchsorted(self.hours, h, side="right") - 1) % len(self.hours)

    def x_min(self, t):
        out = self.lo[self._index(t)]
        return float(out[0]) if np.ndim(t) == 0 and not isinstance(t, pd.DatetimeIndex) else out

    def x_max(self, t):
        out = self.hi[self._index(t)]
        return float(out[0]) if np.ndim(t) == 0 and not isinstance(t, pd.DatetimeIndex) else out


def _hours(value) -> float:
    if isinstance(value, (int, float, np.number)):
        return float(value)
    hh, mm = str(value).split(":")[:2]
    return int(hh) + int(mm) / 60


# problem -------------------------------------------------------------------


@dataclass
class MpcProblem:
    """Box-constrained input problem with a soft comfort band per step.

    ``dynamics`` maps a batch of input sequences ``(B, N)`` to predicted
    temperatures ``(B, N)`` at the end of every step. ``weights`` scale the
    input cost per step (the number of fine steps a blocked input is held).

    Long steps may carry interior checkpoints: point ``i`` lies a fraction
    ``path_frac[i]`` into step ``path_step[i]`` and its temperature is
    interpolated linearly between the neighbouring step ends (``x0`` before
    the first step). A step's slack covers its end and its checkpoints.
    """

    dynamics: Callable[[np.ndarray], np.ndarray]
    x_min: np.ndarray
    x_max: np.ndarray
    R: float = 1.0
    lam: float = 100.0
    u_min: float = U_MIN
    u_max: float = U_MAX
    weights: np.ndarray | None = None
    x0: float | None = None
    path_step: np.ndarray | None = None
    path_frac: np.ndarray | None = None
    path_min: np.ndarray | None = None
    path_max: np.ndarray | None = None

    def __post_init__(self):
        self.x_min = np.asarray(self.x_min, dtype=float).reshape(-1)
        self.x_max = np.asarray(self.x_max, dtype=float).reshape(-1)
        if self.x_min.shape != self.x_max.shape:
            raise ValueError("x_min and x_max must have one entry per step")
        if self.u_min > self.u_max:
            raise ValueError("u_min exceeds u_max")
        if np.any(self.x_min > self.x_max):
            raise ValueError("x_min exceeds x_max")
        if self.R <= 0 or self.lam <= 0:
            raise ValueError("R and lam must be positive")
        w = np.ones(self.n_steps) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (self.n_steps,) or np.any(w <= 0):
            raise ValueError("weights need one positive entry per step")
        self.weights = w
        if self.path_step is None:
            self.path_step = np.zeros(0, dtype=int)
            self.path_frac = self.path_min = self.path_max = np.zeros(0)
        else:
            self.path_step = np.asarray(self.path_step, dtype=int)
            self.path_frac = np.asarray(self.path_frac, dtype=float)
            self.path_min = np.asarray(self.path_min, dtype=float)
            self.path_max = np.asarray(self.path_max, dtype=float)
            n = len(self.path_step)
            if any(len(a) != n for a in (self.path_frac, self.path_min, self.path_max)):
                raise ValueError("checkpoint arrays differ in length")
            if n and self.x0 is None and np.any(self.path_step == 0):
                raise ValueError("checkpoints in the first step need x0")
            if np.any(self.path_min > self.path_max):
                raise ValueError("x_min exceeds x_max at a checkpoint")

    @property
    def n_steps(self) -> int:
        return len(self.x_min)

    @classmethod
    def from_rollout(cls, plan: RolloutPlan, history: RolloutHistory,
                     disturbances: DisturbanceTrace, x_min, x_max,
                     ambient_feedback: bool = False, **kwargs) -> MpcProblem:
        def dynamics(U):
            return predict_trajectory(plan, history, disturbances, U, ambient_feedback)

        kwargs.setdefault("weights", plan.input_scale)
        return cls(dynamics, x_min, x_max, **kwargs)


@dataclass
class MpcSolution:
    u: np.ndarray
    x: np.ndarray
    eps: np.ndarray
    objective: float
    iterations: int = 0
    wall_ms: float = 0.0
    converged: bool = True


def eliminate_slack(problem: MpcProblem, u):
    """Optimal slacks and objective for fixed inputs.

    For one sequence ``u`` (shape ``(N,)``) returns ``(eps (N,), objective)``,
    for a batch ``(B, N)`` returns ``(eps (B, N), objective (B,))``.
    """
    u = np.asarray(u, dtype=float)
    U = np.atleast_2d(u)
    x = np.asarray(problem.dynamics(U), dtype=float).reshape(U.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite predicted trajectory")
    eps = np.maximum(0.0, np.maximum(x - problem.x_max, problem.x_min - x))
    if len(problem.path_step):
        prev = np.column_stack([np.full(len(x), np.nan if problem.x0 is None else problem.x0), x[:, :-1]])
        j, f = problem.path_step, problem.path_frac
        xp = prev[:, j] + f * (x[:, j] - prev[:, j])
        viol = np.maximum(xp - problem.path_max, problem.path_min - xp)
        for k in np.unique(j):
            eps[:, k] = np.maximum(eps[:, k], viol[:, j == k].max(axis=1))
    obj = (problem.R * problem.weights * U**2).sum(axis=1) + problem.lam * (eps**2).sum(axis=1)
    if u.ndim == 1:
        return eps[0], float(obj[0])
    return eps, obj


# solvers -------------------------------------------------------------------


class Solver(Protocol):
    def minimize(self, fun: Callable[[np.ndarray], float], x0: np.ndarray,
                 lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, int, bool]:
        """Return ``(x, iterations, converged)`` for a box-constrained problem."""


@dataclass
class CobylaSolver:
    """Derivative-free linear-approximation trust region (scipy's COBYLA).

    The linear models go stale on the badly scaled valleys a large slack
    weight creates, so a run that stops on its budget is restarted from its
    end point with a fresh trust region, up to ``restarts`` times.
    """

    rhobeg: float = 0.1
    tol: float = 1e-4
    maxiter: int = 500
    restarts: int = 4

    def minimize(self, fun, x0, lower, upper):
        bounds = Bounds(lower, upper)
        x = np.asarray(x0, float)
        nfev = 0
        for _ in range(self.restarts + 1):
            res = minimize(fun, x, method="COBYLA", bounds=bounds,
                           options={"rhobeg": self.rhobeg, "tol": self.tol, "maxiter": self.maxiter})
            nfev += int(res.nfev)
            x = np.clip(res.x, lower, upper)
            if res.success:
                return x, nfev, True
        return x, nfev, False


def solve(problem: MpcProblem, solver: Solver | None = None, u0=None) -> MpcSolution:
    """Minimise the slack-eliminated objective over the input box.

    The solver runs from ``u0`` (warm start) and from zero. The objective is
    evaluated unclipped so the solver sees a slope at the box faces; only
    points inside the box compete for the returned best iterate.
    """
    solver = solver or CobylaSolver()
    N = problem.n_steps
    lower = np.full(N, problem.u_min)
    upper = np.full(N, problem.u_max)
    best = {"f": np.inf, "u": None}

    def consider(v, f):
        if f < best["f"]:
            best["f"], best["u"] = f, v.copy()

    def fun(v):
        _, f = eliminate_slack(problem, v)
        if np.all(v >= lower) and np.all(v <= upper):
            consider(v, f)
        return f

    starts = [np.clip(np.zeros(N), lower, upper)]
    if u0 is not None:
        starts.insert(0, np.clip(np.asarray(u0, float).reshape(N), lower, upper))
    t0 = time.perf_counter()
    iterations = 0
    converged = False
    for start in starts:
        consider(start, eliminate_slack(problem, start)[1])
        x, nit, ok = solver.minimize(fun, start, lower, upper)
        x = np.clip(x, lower, upper)
        consider(x, eliminate_slack(problem, x)[1])
        iterations += nit
        converged = converged or ok
    wall = (time.perf_counter() - t0) * 1e3
    u = best["u"]
    eps, obj = eliminate_slack(problem, u)
    x = np.asarray(problem.dynamics(u[None, :]), float).reshape(-1)
    if not converged:
        log.warning("solver did not converge, applying best iterate (objective %.6g)", obj)
    return MpcSolution(u, x, eps, obj, iterations, wall, converged)


def checkpoints(schedule: ComfortSchedule, starts, step_minutes, base_minutes: int, margin: float = 0.0):
    """Interior checkpoints at every ``base_minutes`` grid point of the long steps.

    Returns ``(step index, fraction into the step, x_min, x_max)`` arrays for
    :class:`MpcProblem`, with the band tightened by ``margin``.
    """
    step_minutes = np.asarray(step_minutes, dtype=int)
    steps, fracs = [], []
    for j, m in enumerate(step_minutes // base_minutes):
        for i in range(1, m):
            steps.append(j)
            fracs.append(i / m)
    steps, fracs = np.array(steps, dtype=int), np.array(fracs, dtype=float)
    at = pd.DatetimeIndex(starts)[steps] + pd.to_timedelta(fracs * step_minutes[steps], unit="min")
    p_max = schedule.x_max(at) - margin
    p_min = np.minimum(schedule.x_min(at) + margin, p_max)
    return steps, fracs, p_min, p_max


# forecasts -----------------------------------------------------------------


class OracleForecaster:
    """Exact future weather read from the trace the plant runs on."""

    def __init__(self, weather: pd.DataFrame):
        w = weather.set_index(pd.DatetimeIndex(weather["timestamp"]))
        self.T_amb = w["T_amb"].astype(float)
        self.Q_sol = w["Q_sol"].astype(float)

    def __call__(self, times: pd.DatetimeIndex, records: pd.DataFrame, current: dict):
        T = self.T_amb.reindex(times).ffill().fillna(current["T_amb"]).to_numpy()
        Q = self.Q_sol.reindex(times).ffill().fillna(current["Q_sol"]).to_numpy()
        return T, Q


class PersistenceForecaster:
    """Same time on the previous day where measured, else the current value."""

    def __call__(self, times: pd.DatetimeIndex, records: pd.DataFrame, current: dict):
        past = records.set_index(pd.DatetimeIndex(records["timestamp"]))
        back = pd.DatetimeIndex(times) - pd.Timedelta(days=1)
        T = past["T_amb"].reindex(back).fillna(current["T_amb"]).to_numpy(float)
        Q = past["Q_sol"].reindex(back).fillna(current["Q_sol"]).to_numpy(float)
        return T, Q


# controller ----------------------------------------------------------------


@dataclass
class MpcController:
    """Receding-horizon controller over a fine and an optional coarse model.

    ``step(records, current)`` receives all past measurements (each row with
    the input that was applied over it) and the current measurement, and
    returns the input to apply now. ``margin`` tightens the band by that many
    kelvin on both sides to absorb model error.
    """

    fine: object
    coarse: object | None
    schedule: ComfortSchedule
    forecaster: Callable
    fine_steps: int = 3
    coarse_steps: int = 2
    R: float = 1.0
    lam: float = 100.0
    u_min: float = U_MIN
    u_max: float = U_MAX
    margin: float = 0.0
    solver: Solver = field(default_factory=CobylaSolver)
    ambient_feedback: bool = False

    def __post_init__(self):
        self.plan = RolloutPlan.standard(self.fine, self.coarse, self.fine_steps, self.coarse_steps)
        self.ratio = self.plan.step_minutes[-1] // self.plan.base_rate
        self.fallback = _ScheduleThermostat(self.schedule, self.u_min)
        self.warm = None
        self.last_info = {}
        self.rows = []

    @property
    def required_history(self) -> int:
        """Past fine-rate records needed before the controller can plan."""
        if self.coarse is None or self.coarse_steps == 0:
            return 3
        return 3 * self.ratio - self.fine_steps

    def history(self, records: pd.DataFrame, current: dict):
        fine = self.plan.base_rate
        n = self.required_history
        if len(records) < n:
            return None
        ts = pd.DatetimeIndex(records["timestamp"][-n:])
        expect = pd.Timestamp(current["timestamp"]) - pd.to_timedelta(np.arange(n, 0, -1) * fine, unit="min")
        if not ts.equals(pd.DatetimeIndex(expect)):
            return None
        T = np.r_[records["T_br"].to_numpy(float)[-n:], current["T_br"]]
        Q = records["Q_sol"].to_numpy(float)[-n:]
        dT = np.array([T[-1] - T[-2], T[-2] - T[-3], T[-3] - T[-4]])
        hist = RolloutHistory(current["T_br"], dT, np.array([Q[-1], Q[-2]]))
        if n > 3:
            # coarse windows end at the seam s = now + fine_steps
            r, f = self.ratio, self.fine_steps

            def T_at(offset):  # offset in fine steps relative to now (<= 0)
                return T[len(T) - 1 + offset]

            hist.coarse_offset = current["T_br"] - T_at(f - r)
            hist.coarse_dT = np.array([T_at(f - r) - T_at(f - 2 * r),
                                       T_at(f - 2 * r) - T_at(f - 3 * r)])
            hist.coarse_Q_sol = np.array([np.nan, Q[len(Q) + f - 2 * r:len(Q) + f - r].mean()])
        return hist

    def build_problem(self, records: pd.DataFrame, current: dict, hist: RolloutHistory) -> MpcProblem:
        now = pd.Timestamp(current["timestamp"])
        plan = self.plan
        fine = pd.Timedelta(minutes=plan.base_rate)
        n_fine = int(plan.horizon / fine)
        times = now + fine * np.arange(n_fine)
        T_f, Q_f = self.forecaster(times, records, current)
        T_f[0], Q_f[0] = current["T_amb"], current["Q_sol"]
        T_amb, Q_sol = [], []
        pos = (plan.step_offsets // plan.base_rate).astype(int)
        for p, m in zip(pos, plan.step_minutes // plan.base_rate):
            T_amb.append(T_f[p:p + m].mean())
            Q_sol.append(Q_f[p:p + m].mean())
        if self.required_history > 3:
            # most recent coarse solar window mixes measurements and forecast
            f, r = self.fine_steps, self.ratio
            past = records["Q_sol"].to_numpy(float)[len(records) - (r - f):]
            hist.coarse_Q_sol = np.array([np.r_[past, Q_f[:f]].mean(), hist.coarse_Q_sol[1]])
        dist = DisturbanceTrace(plan.step_times(now), np.array(T_amb), np.array(Q_sol),
                                current["T_l"] - current["T_br"])
        ends = plan.step_times(now) + pd.to_timedelta(plan.step_minutes, unit="min")
        x_min = self.schedule.x_min(ends) + self.margin
        x_max = self.schedule.x_max(ends) - self.margin
        x_min = np.minimum(x_min, x_max)
        steps, fracs, p_min, p_max = checkpoints(self.schedule, plan.step_times(now),
                                                 plan.step_minutes, plan.base_rate, self.margin)
        return MpcProblem.from_rollout(plan, hist, dist, x_min, x_max, self.ambient_feedback,
                                       R=self.R, lam=self.lam, u_min=self.u_min, u_max=self.u_max,
                                       x0=current["T_br"], path_step=steps, path_frac=fracs,
                                       path_min=p_min, path_max=p_max)

    def step(self, records: pd.DataFrame, current: dict) -> float:
        hist = self.history(records, current)
        if hist is None:
            u = self.fallback(current["T_br"], current["timestamp"])
            log.info("%s: history too short, thermostat fallback u=%.3f", current["timestamp"], u)
            self.last_info = {"fallback": True, "converged": True, "objective": np.nan,
                              "iterations": 0, "wall_ms": 0.0}
            self._log(current["timestamp"], u, None)
            return u
        problem = self.build_problem(records, current, hist)
        u0 = None if self.warm is None else np.r_[self.warm[1:], self.warm[-1]]
        sol = solve(problem, self.solver, u0)
        self.warm = sol.u
        u = float(np.clip(sol.u[0], self.u_min, self.u_max))
        self.last_info = {"fallback": False, "converged": sol.converged,
                          "objective": sol.objective, "iterations": sol.iterations,
                          "wall_ms": sol.wall_ms}
        self._log(current["timestamp"], u, sol)
        return u

    def _log(self, ts, u, sol: MpcSolution | None):
        row = {"timestamp": ts, "u0": u}
        n = self.plan.n_steps
        x = np.full(n, np.nan) if sol is None else sol.x
        eps = np.full(n, np.nan) if sol is None else sol.eps
        row.update({f"x{j + 1}": x[j] for j in range(n)})
        row.update({f"eps{j + 1}": eps[j] for j in range(n)})
        row.update({k: self.last_info[k] for k in ("objective", "iterations", "wall_ms", "converged")})
        self.rows.append(row)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


class _ScheduleThermostat:
    """Hysteresis rule around ``x_max - 1`` used while history is cold."""

    def __init__(self, schedule: ComfortSchedule, u_min: float, offset: float = 1.0, band: float = 0.5):
        self.schedule, self.u_min, self.offset, self.band = schedule, u_min, offset, band
        self.on = False

    def __call__(self, T_room, t) -> float:
        sp = self.schedule.x_max(pd.Timestamp(t)) - self.offset
        if T_room > sp + self.band:
            self.on = True
        elif T_room < sp - self.band:
            self.on = False
        return self.u_min if self.on else 0.0
