"""Command line entry point: ``icnn-mpc <command> [options]``.

Settings come from built-in defaults, then the command's section of an INI
file given with ``--config``, then ``--set key=value`` and the dedicated
flags. Each run writes the resolved settings to ``<out>/config_<command>.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import features as F
from . import simulator as sim
from .model import TABLE1, Family, IcnnModel
from .mpc import ComfortSchedule, MpcController, OracleForecaster, PersistenceForecaster
from .networks import InvariantError
from .rollout import DisturbanceTrace, RolloutHistory, RolloutPlan, audit_convexity
from .serialization import FormatError
from .training import HORIZONS, TrainConfig, fit_model, kfold_evaluate

log = logging.getLogger("icnn_mpc")

DEFAULTS = {
    "gen-data": {
        "days": 365.0, "start": "2021-01-01", "controller": "random", "setpoint": 23.0,
        "seed": 0, "wind_days": "", "T_neighbor": 24.0, "blind_state": 0.3,
    },
    "train": {
        "data": "records.csv", "family": "ficnn_mpc", "rates": "20 180", "seed": 0,
        "epochs": 0, "lr": 1e-3, "batch_size": 32,
    },
    "evaluate": {
        "data": "records.csv", "families": "ficnn_amos ficnn_mpc picnn_amos picnn_mpc",
        "horizons": "1h 6h", "repetitions": 20, "train_folds": 9, "val_folds": 3,
        "seed": 0, "epochs": 0, "n_jobs": 1,
    },
    "audit": {
        "fine_model": "model_20.icnn", "coarse_model": "model_180.icnn", "samples": 10000,
        "tol": 1e-9, "seed": 0, "start": "2021-07-01T14:00:00", "T_br": 24.5,
        "T_amb": 30.0, "Q_sol": 500.0, "dT_l": -0.5,
    },
    "mpc-run": {
        "controller": "mpc", "fine_model": "model_20.icnn", "coarse_model": "model_180.icnn",
        "weather": "", "schedule": "", "days": 5.0, "start": "2021-07-01", "seed": 7,
        "wind_days": "3", "warmup": 24, "margin": 0.2, "forecaster": "oracle",
        "R": 1.0, "lam": 100.0, "T_neighbor": 24.0, "blind_state": 0.3,
    },
    "report": {"run_log": "run_log.csv", "title": ""},
}


class ConfigError(ValueError):
    pass


def resolve_config(command: str, path=None, overrides=None) -> dict:
    """Merge defaults, the INI section for ``command`` and overrides."""
    defaults = DEFAULTS[command]
    values = dict(defaults)
    pending = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        unknown_sections = set(parser.sections()) - set(DEFAULTS)
        if unknown_sections:
            raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
        if parser.has_section(command):
            pending.update(parser.items(command))
    pending.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key, raw in pending.items():
        if key not in defaults:
            raise ConfigError(f"unknown key '{key}' for {command}; known: {sorted(defaults)}")
        values[key] = _coerce(key, raw, defaults[key])
    return values


def _coerce(key, raw, default):
    if isinstance(raw, str) and not isinstance(default, str):
        try:
            return type(default)(float(raw)) if isinstance(default, int) else type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def write_config(command: str, values: dict, out: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser[command] = {k: str(v) for k, v in values.items()}
    with open(out / f"config_{command}.ini", "w", encoding="utf-8") as fh:
        parser.write(fh)


def _days_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(",", " ").split()]


def _resolve(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() or p.exists() else out / p


# commands ------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> int:
    weather = sim.make_weather(cfg["days"], cfg["start"], seed=cfg["seed"],
                               wind_days=_days_list(cfg["wind_days"]))
    plant = sim.RoomModel(blind_state=cfg["blind_state"])
    records = sim.generate_dataset(plant, weather, cfg["controller"], seed=cfg["seed"],
                                   setpoint=cfg["setpoint"], T_neighbor=cfg["T_neighbor"])
    F.write_records(records, out / "records.csv")
    sim.write_weather(weather, out / "weather.csv")
    print(f"wrote {len(records)} records to {out / 'records.csv'}")
    return 0


def _dataset(records: pd.DataFrame, rate: int) -> F.Dataset:
    base = F.native_rate(records)
    r = records if pd.Timedelta(minutes=rate) == base else F.resample(records, f"{rate}min")
    return F.build_features(r, f"{rate}min")


def cmd_train(cfg: dict, out: Path) -> int:
    records = F.read_records(_resolve(out, cfg["data"]))
    family = Family(cfg["family"])
    losses = []
    for rate in [int(r) for r in cfg["rates"].split()]:
        if rate not in TABLE1:
            raise ConfigError(f"no tuned settings for rate {rate} min")
        overrides = {"seed": cfg["seed"], "lr": cfg["lr"], "batch_size": cfg["batch_size"]}
        if cfg["epochs"] > 0:
            overrides["epochs"] = cfg["epochs"]
        config = TrainConfig.for_rate(rate, **overrides)
        ds = _dataset(records, rate)
        model, trace = fit_model(family, ds, config)
        model.save(out / f"model_{rate}.icnn")
        per_epoch = trace.reshape(config.epochs, -1).mean(axis=1)
        losses += [(rate, e + 1, loss) for e, loss in enumerate(per_epoch)]
        print(f"{family.value} @ {rate} min: {len(ds)} rows, last epoch loss {per_epoch[-1]:.6g}")
    pd.DataFrame(losses, columns=["rate_minutes", "epoch", "loss"]).to_csv(
        out / "loss.csv", index=False, float_format="%.10g")
    return 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    records = F.read_records(_resolve(out, cfg["data"]))
    rows, reps = [], []
    for horizon in cfg["horizons"].split():
        if horizon not in HORIZONS:
            raise ConfigError(f"unknown horizon {horizon}; choose from {sorted(HORIZONS)}")
        ds = _dataset(records, HORIZONS[horizon][0])
        config = None
        if cfg["epochs"] > 0:
            config = TrainConfig.for_rate(HORIZONS[horizon][0], epochs=cfg["epochs"])
        for fam in cfg["families"].split():
            report = kfold_evaluate(Family(fam), ds, cfg["repetitions"], cfg["train_folds"],
                                    cfg["val_folds"], horizon, cfg["seed"], config, cfg["n_jobs"])
            rows.append(report.summary())
            reps.append(report.repetitions_frame())
            s = rows[-1]
            print(f"{fam:11s} {horizon}: median {s['median']:.4g} IQR {s['iqr']:.4g}")
    pd.DataFrame(rows).to_csv(out / "report.csv", index=False, float_format="%.10g")
    pd.concat(reps).to_csv(out / "repetitions.csv", index=False, float_format="%.17g")
    return 0


def audit_context(cfg: dict, plan: RolloutPlan):
    """Fixed afternoon operating point used as the audit's disturbance."""
    n = plan.n_steps
    history = RolloutHistory(cfg["T_br"], np.zeros(3), np.full(2, cfg["Q_sol"]),
                             np.zeros(2), np.full(2, cfg["Q_sol"]))
    dist = DisturbanceTrace(plan.step_times(cfg["start"]), np.full(n, cfg["T_amb"]),
                            np.full(n, cfg["Q_sol"]), cfg["dT_l"])
    return history, dist


def cmd_audit(cfg: dict, out: Path, strict: bool = False) -> int:
    fine = IcnnModel.load(_resolve(out, cfg["fine_model"]))
    coarse_path = _resolve(out, cfg["coarse_model"]) if cfg["coarse_model"] else None
    coarse = IcnnModel.load(coarse_path) if coarse_path else None
    plan = RolloutPlan.standard(fine, coarse)
    history, dist = audit_context(cfg, plan)
    report = audit_convexity(plan, history, dist, samples=cfg["samples"], tol=cfg["tol"],
                             seed=cfg["seed"])
    report.to_csv(out / "audit.csv")
    print(report.summary_line())
    return 1 if strict and not report.passed else 0


def _controller(cfg: dict, out: Path, weather: pd.DataFrame, schedule: ComfortSchedule):
    if cfg["controller"] == "thermostat":
        return sim.Thermostat(lambda t: schedule.x_max(t) - 1.0)
    if cfg["controller"] != "mpc":
        raise ConfigError(f"unknown controller {cfg['controller']!r}")
    fine = IcnnModel.load(_resolve(out, cfg["fine_model"]))
    coarse = IcnnModel.load(_resolve(out, cfg["coarse_model"])) if cfg["coarse_model"] else None
    if cfg["forecaster"] == "oracle":
        forecaster = OracleForecaster(weather)
    elif cfg["forecaster"] == "persistence":
        forecaster = PersistenceForecaster()
    else:
        raise ConfigError(f"unknown forecaster {cfg['forecaster']!r}")
    return MpcController(fine, coarse, schedule, forecaster, R=cfg["R"], lam=cfg["lam"],
                         margin=cfg["margin"], coarse_steps=2 if coarse else 0)


def cmd_mpc_run(cfg: dict, out: Path) -> int:
    steps = int(round(cfg["days"] * 72))
    if cfg["weather"]:
        weather = sim.read_weather(_resolve(out, cfg["weather"]))
    else:
        total = (steps + cfg["warmup"] + 27 * 3) / 72
        weather = sim.make_weather(total, cfg["start"], seed=cfg["seed"],
                                   wind_days=_days_list(cfg["wind_days"]))
    schedule = (ComfortSchedule.read_csv(_resolve(out, cfg["schedule"])) if cfg["schedule"]
                else ComfortSchedule.default())
    controller = _controller(cfg, out, weather, schedule)
    plant = sim.RoomModel(blind_state=cfg["blind_state"])
    run = sim.closed_loop(plant, weather, controller, schedule, steps=steps,
                          warmup=cfg["warmup"], T_neighbor=cfg["T_neighbor"])
    run.frame.to_csv(out / "run_log.csv", index=False, float_format="%.10g")
    if hasattr(controller, "log_frame"):
        controller.log_frame().to_csv(out / "controller_log.csv", index=False, float_format="%.10g")
    summary = run.summary()
    summary["controller"] = cfg["controller"]
    pd.DataFrame([summary]).to_csv(out / "summary.csv", index=False, float_format="%.10g")
    print(f"{cfg['controller']}: energy {summary['energy_kwh']:.3f} kWh, violations "
          f"{summary['violation_Kh']:.3f} K.h, mean solve {summary['mean_solve_ms']:.1f} ms")
    return 0


def cmd_report(cfg: dict, out: Path) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    df = pd.read_csv(_resolve(out, cfg["run_log"]), parse_dates=["timestamp"])
    end = df["timestamp"] + sim.STEP
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(10, 6),
                                   gridspec_kw={"height_ratios": [2, 1]})
    ax1.step(end, df["x_max"], where="pre", color="tab:red", lw=1, label="x_max")
    ax1.step(end, df["x_min"], where="pre", color="tab:blue", lw=1, label="x_min")
    ax1.plot(end, df["T_next"], color="k", lw=1.2, label="room")
    wind = df["wind"].astype(bool).to_numpy()
    if wind.any():
        ax1.fill_between(end, df["x_min"].min() - 1, df["x_max"].max() + 1, where=wind,
                         color="0.9", step="pre", label="wind")
    ax1.set_ylabel("temperature [degC]")
    ax1.legend(loc="upper right", fontsize=8)
    ax2.step(df["timestamp"], df["u"], where="post", color="tab:cyan")
    ax2.set_ylabel("Q_u [kWh]")
    if cfg["title"]:
        ax1.set_title(cfg["title"])
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(out / "report.svg")
    plt.close(fig)
    print(f"wrote {out / 'report.svg'}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
    "audit": cmd_audit, "mpc-run": cmd_mpc_run, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icnn-mpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with a [%s] section" % name)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting; repeatable")
        if name == "train":
            p.add_argument("--family", help="model family")
        if name == "evaluate":
            p.add_argument("--family", help="space-separated families to evaluate")
        if name == "audit":
            p.add_argument("--strict", action="store_true", help="exit 1 when the audit fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    family = getattr(args, "family", None)
    if family:
        overrides["families" if args.command == "evaluate" else "family"] = family
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(args.command, cfg, out)
        if args.command == "audit":
            return cmd_audit(cfg, out, strict=args.strict)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, InvariantError, FormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
