"""Lumped 2R2C room model used as plant, data source and baseline.

Units: temperatures in degC, capacitances in kWh/K, resistances in K/kW,
time steps in hours, energies in kWh and irradiation in W/m2. ``A_sol``
converts W/m2 of global irradiation into kW of room gain with the blinds
fully open; ``blind_state`` scales it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .features import RAW_COLUMNS

log = logging.getLogger(__name__)

STEP = pd.Timedelta(minutes=20)
DT_HOURS = STEP / pd.Timedelta(hours=1)
U_MIN, U_MAX = -0.6, 0.0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoomModel:
    C_room: float = 2.0
    C_wall: float = 8.0
    R_amb: float = 8.0
    R_wall: float = 2.0
    R_neighbor: float = 6.0
    A_sol: float = 0.003
    blind_state: float = 0.3

    def __post_init__(self):
        for name in ("C_room", "C_wall", "R_amb", "R_wall", "R_neighbor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.A_sol < 0:
            raise ValueError("A_sol must be non-negative")
        if not 0 <= self.blind_state <= 1:
            raise ValueError("blind_state must lie in [0, 1]")


@dataclass(frozen=True)
class RoomState:
    T_room: float
    T_wall: float


def step(model: RoomModel, state: RoomState, T_amb: float, T_neighbor: float, Q_sol: float,
         Q_u: float, dt: float = DT_HOURS, blind: float | None = None) -> RoomState:
    """One explicit-Euler step of length ``dt`` hours; ``Q_u`` is the energy (kWh) added."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    blind = model.blind_state if blind is None else blind
    Tr, Tw = state.T_room, state.T_wall
    gains = ((T_amb - Tr) / model.R_amb + (Tw - Tr) / model.R_wall
             + (T_neighbor - Tr) / model.R_neighbor + blind * model.A_sol * Q_sol)
    Tr_next = Tr + dt / model.C_room * gains + Q_u / model.C_room
    Tw_next = Tw + dt / model.C_wall * (Tr - Tw) / model.R_wall
    if not (np.isfinite(Tr_next) and np.isfinite(Tw_next)):
        raise SimulationError(f"non-finite state after step from {state}")
    return RoomState(float(Tr_next), float(Tw_next))


# weather -------------------------------------------------------------------


def make_weather(days: float, start="2021-01-01", seed: int = 0, T_low: float = 20.0,
                 T_high: float = 32.0, sol_peak: float = 800.0, wind_days=(),
                 noise: float = 0.3, day_spread: float = 1.5) -> pd.DataFrame:
    """Diurnal synthetic weather at 20 min resolution.

    Ambient temperature follows a sinusoid between ``T_low`` and ``T_high``
    peaking at 15:00, shifted by a random per-day offset and AR(1) noise.
    Solar irradiation is a half sine between 06:00 and 18:00 scaled by a
    random daily clearness. ``wind_days`` (0-based day indices) set the wind
    flag, which opens the blinds in the simulator.
    """
    rng = np.random.default_rng(seed)
    n = int(round(days * 24 * 60 / 20))
    ts = pd.date_range(pd.Timestamp(start), periods=n, freq=STEP)
    hour = np.asarray((ts - ts.normalize()) / pd.Timedelta(hours=1), dtype=float)
    day = np.asarray((ts.normalize() - ts[0].normalize()).days, dtype=int)
    n_days = day.max() + 1 if n else 0
    offset = rng.normal(0, day_spread, n_days)[day] if n else np.zeros(0)
    ar = np.zeros(n)
    for i in range(1, n):
        ar[i] = 0.95 * ar[i - 1] + noise * np.sqrt(1 - 0.95**2) * rng.standard_normal()
    mid, amp = (T_high + T_low) / 2, (T_high - T_low) / 2
    T_amb = mid + amp * np.cos(2 * np.pi * (hour - 15) / 24) + offset + ar
    clear = rng.uniform(0.6, 1.0, n_days)[day] if n else np.zeros(0)
    Q_sol = sol_peak * clear * np.clip(np.sin(np.pi * (hour - 6) / 12), 0, None)
    wind = np.isin(day, list(wind_days))
    return pd.DataFrame({"timestamp": ts, "T_amb": T_amb, "Q_sol": Q_sol, "wind": wind})


def read_weather(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    expected = ["timestamp", "T_amb", "Q_sol", "wind"]
    if list(df.columns) != expected:
        raise ValueError(f"{path}: expected header {','.join(expected)}")
    df["timestamp"] = pd.to_datetime(df["timestamp"], format="ISO8601")
    df["wind"] = df["wind"].astype(str).str.lower().isin(["1", "true"])
    if np.any(df["Q_sol"] < 0):
        raise ValueError("negative solar irradiation in weather trace")
    return df


def write_weather(weather: pd.DataFrame, path) -> None:
    out = weather.loc[:, ["timestamp", "T_amb", "Q_sol", "wind"]].copy()
    out["timestamp"] = pd.DatetimeIndex(out["timestamp"]).strftime("%Y-%m-%dT%H:%M:%S")
    out["wind"] = out["wind"].astype(int)
    out.to_csv(path, index=False, float_format="%.10g")


# controllers ---------------------------------------------------------------


class Thermostat:
    """Hysteresis cooling: full power above ``setpoint + band``, off below ``setpoint - band``.

    ``setpoint`` is a number or a callable of the timestamp.
    """

    def __init__(self, setpoint=23.0, band: float = 0.5, u_min: float = U_MIN):
        self.setpoint = setpoint
        self.band = band
        self.u_min = u_min
        self.on = False

    def __call__(self, T_room: float, time) -> float:
        sp = self.setpoint(time) if callable(self.setpoint) else self.setpoint
        if T_room > sp + self.band:
            self.on = True
        elif T_room < sp - self.band:
            self.on = False
        return self.u_min if self.on else 0.0


class RandomExcitation:
    """Cooling energy drawn uniformly from ``[u_min, 0]`` and held for 1-6 steps."""

    def __init__(self, seed: int = 0, u_min: float = U_MIN, max_hold: int = 6):
        self.rng = np.random.default_rng(seed)
        self.u_min = u_min
        self.max_hold = max_hold
        self.left = 0
        self.value = 0.0

    def __call__(self, T_room: float, time) -> float:
        if self.left == 0:
            self.value = float(self.rng.uniform(self.u_min, 0.0))
            self.left = int(self.rng.integers(1, self.max_hold + 1))
        self.left -= 1
        return self.value


def generate_dataset(model: RoomModel, weather: pd.DataFrame, controller="random",
                     steps: int | None = None, seed: int = 0, setpoint: float = 23.0,
                     T_neighbor: float = 24.0, warmup: int = 0,
                     initial: RoomState | None = None) -> pd.DataFrame:
    """Simulate open/closed-loop operation and return raw records.

    ``controller`` is ``"random"``, ``"thermostat"`` or any callable
    ``(T_room, timestamp) -> Q_u``. The first ``warmup`` of ``steps`` steps
    are simulated but not emitted. Row ``k`` holds the state at the start of
    step ``k`` together with the input applied over it.
    """
    steps = len(weather) if steps is None else steps
    if steps < 4:
        raise ValueError("need at least 4 steps")
    if steps > len(weather):
        raise ValueError(f"weather trace has {len(weather)} steps, {steps} requested")
    if controller == "random":
        controller = RandomExcitation(seed)
    elif controller == "thermostat":
        controller = Thermostat(setpoint)
    state = initial or RoomState(T_neighbor, T_neighbor)
    rows = []
    for k in range(steps):
        w = weather.iloc[k]
        u = float(controller(state.T_room, w["timestamp"]))
        if k >= warmup:
            rows.append((w["timestamp"], state.T_room, T_neighbor, w["T_amb"], w["Q_sol"], u))
        blind = 1.0 if w["wind"] else None
        state = step(model, state, w["T_amb"], T_neighbor, w["Q_sol"], u, blind=blind)
    return pd.DataFrame(rows, columns=list(RAW_COLUMNS))


# closed loop ---------------------------------------------------------------


@dataclass
class RunLog:
    """Per-step log of a closed-loop run plus summary metrics."""

    frame: pd.DataFrame

    def summary(self) -> dict:
        df = self.frame
        return {
            "steps": len(df),
            "energy_kwh": float(df["u"].abs().sum()),
            "violation_above_Kh": float(df["viol_above"].sum() * DT_HOURS),
            "violation_below_Kh": float(df["viol_below"].sum() * DT_HOURS),
            "violation_Kh": float((df["viol_above"] + df["viol_below"]).sum() * DT_HOURS),
            "mean_solve_ms": float(df["wall_ms"].mean()) if "wall_ms" in df else 0.0,
            "max_solve_ms": float(df["wall_ms"].max()) if "wall_ms" in df else 0.0,
        }

    def violation_kh(self, exclude_days=()) -> float:
        df = self.frame
        day = (pd.DatetimeIndex(df["timestamp"]).normalize() - pd.Timestamp(df["timestamp"].iloc[0]).normalize()).days
        keep = ~np.isin(np.asarray(day), list(exclude_days))
        return float((df["viol_above"] + df["viol_below"])[keep].sum() * DT_HOURS)


def closed_loop(model: RoomModel, weather: pd.DataFrame, controller, schedule,
                steps: int | None = None, warmup: int = 24, T_neighbor: float = 24.0,
                initial: RoomState | None = None) -> RunLog:
    """Run ``controller`` against the plant and log comfort and energy.

    ``controller`` is either a plain callable ``(T_room, timestamp) -> u`` or
    an object with ``step(records, now) -> u`` (an MPC controller), which
    receives every measured record so far. The first ``warmup`` steps run a
    schedule-following thermostat and are excluded from the log. Comfort is
    judged at the end of each step against ``schedule``.
    """
    steps = len(weather) if steps is None else steps
    if warmup + steps > len(weather):
        raise ValueError("weather trace too short for warm-up plus run")
    fallback = Thermostat(lambda t: schedule.x_max(t) - 1.0)
    state = initial or RoomState(23.0, 23.0)
    records = []
    log_rows = []
    ts_all = pd.DatetimeIndex(weather["timestamp"])
    for k in range(warmup + steps):
        w = weather.iloc[k]
        now = ts_all[k]
        info = {}
        if k < warmup:
            u = fallback(state.T_room, now)
        elif hasattr(controller, "step"):
            frame = pd.DataFrame(records, columns=list(RAW_COLUMNS))
            current = {"timestamp": now, "T_br": state.T_room, "T_l": T_neighbor,
                       "T_amb": w["T_amb"], "Q_sol": w["Q_sol"], "T_wall": state.T_wall}
            u = controller.step(frame, current)
            info = dict(getattr(controller, "last_info", {}) or {})
        else:
            u = float(controller(state.T_room, now))
        u = float(np.clip(u, U_MIN, U_MAX))
        records.append((now, state.T_room, T_neighbor, w["T_amb"], w["Q_sol"], u))
        blind = 1.0 if w["wind"] else None
        nxt = step(model, state, w["T_amb"], T_neighbor, w["Q_sol"], u, blind=blind)
        if k >= warmup:
            end = now + STEP
            lo, hi = schedule.x_min(end), schedule.x_max(end)
            row = {
                "timestamp": now, "T_room": state.T_room, "T_next": nxt.T_room, "u": u,
                "x_min": lo, "x_max": hi, "T_amb": w["T_amb"], "Q_sol": w["Q_sol"],
                "wind": bool(w["wind"]),
                "viol_above": max(0.0, nxt.T_room - hi), "viol_below": max(0.0, lo - nxt.T_room),
                "saturated": u <= U_MIN + 1e-9,
            }  # fmt: skip
            row.update(info)
            log_rows.append(row)
        state = nxt
    return RunLog(pd.DataFrame(log_rows))


def with_blinds(model: RoomModel, blind_state: float) -> RoomModel:
    return replace(model, blind_state=blind_state)


def rc_trajectory(model: RoomModel, T_room, T_wall, T_amb, Q_sol, wind, U,
                  step_blocks, T_neighbor: float = 24.0) -> np.ndarray:
    """Batched plant simulation for blocked inputs.

    ``U`` is ``(B, N)``; input ``j`` is applied on each of ``step_blocks[j]``
    consecutive 20 min steps. ``T_amb``, ``Q_sol`` and ``wind`` hold one value
    per 20 min step. Returns the room temperature at the end of every block.
    """
    U = np.atleast_2d(np.asarray(U, float))
    Tr = np.full(U.shape[0], float(T_room))
    Tw = np.full(U.shape[0], float(T_wall))
    out = np.empty(U.shape)
    i = 0
    for j, m in enumerate(step_blocks):
        for _ in range(int(m)):
            blind = 1.0 if wind[i] else model.blind_state
            gains = ((T_amb[i] - Tr) / model.R_amb + (Tw - Tr) / model.R_wall
                     + (T_neighbor - Tr) / model.R_neighbor + blind * model.A_sol * Q_sol[i])
            Tr, Tw = (Tr + DT_HOURS / model.C_room * gains + U[:, j] / model.C_room,
                      Tw + DT_HOURS / model.C_wall * (Tr - Tw) / model.R_wall)
            i += 1
        out[:, j] = Tr
    return out


class PerfectModelController:
    """MPC that plans with the true plant and exact weather.

    Uses the same horizon, move blocking, checkpoints and cost as the ICNN
    controller.
    """

    def __init__(self, model: RoomModel, weather: pd.DataFrame, schedule,
                 step_blocks=(1, 1, 1, 9, 9), T_neighbor: float = 24.0, margin: float = 0.0,
                 solver=None, R: float = 1.0, lam: float = 100.0):
        from .mpc import CobylaSolver

        self.model, self.schedule = model, schedule
        self.blocks = np.asarray(step_blocks, dtype=int)
        self.w = weather.set_index(pd.DatetimeIndex(weather["timestamp"]))
        self.T_neighbor, self.margin = T_neighbor, margin
        self.solver = solver or CobylaSolver()
        self.R, self.lam = R, lam
        self.warm = None
        self.last_info = {}

    def step(self, records: pd.DataFrame, current: dict) -> float:
        from .mpc import MpcProblem, checkpoints, solve

        now = pd.Timestamp(current["timestamp"])
        times = now + STEP * np.arange(self.blocks.sum())
        w = self.w.reindex(times).ffill().bfill()
        ends = now + STEP * np.cumsum(self.blocks)

        def dynamics(U):
            return rc_trajectory(self.model, current["T_br"], current["T_wall"],
                                 w["T_amb"].to_numpy(float), w["Q_sol"].to_numpy(float),
                                 w["wind"].to_numpy(bool), U, self.blocks, self.T_neighbor)

        x_max = self.schedule.x_max(ends) - self.margin
        x_min = np.minimum(self.schedule.x_min(ends) + self.margin, x_max)
        starts = now + STEP * np.r_[0, np.cumsum(self.blocks)[:-1]]
        base = int(STEP / pd.Timedelta(minutes=1))
        steps, fracs, p_min, p_max = checkpoints(self.schedule, starts, self.blocks * base, base, self.margin)
        problem = MpcProblem(dynamics, x_min, x_max, self.R, self.lam, U_MIN, U_MAX,
                             weights=self.blocks.astype(float), x0=current["T_br"],
                             path_step=steps, path_frac=fracs, path_min=p_min, path_max=p_max)
        u0 = None if self.warm is None else np.r_[self.warm[1:], self.warm[-1]]
        sol = solve(problem, self.solver, u0)
        self.warm = sol.u
        self.last_info = {"objective": sol.objective, "iterations": sol.iterations,
                          "wall_ms": sol.wall_ms, "converged": sol.converged}
        return float(sol.u[0])
