import configparser

import numpy as np
import pandas as pd
import pytest

from icnn_mpc.cli import main
from icnn_mpc.features import read_records
from icnn_mpc.model import Family, IcnnModel


@pytest.fixture(scope="module")
def two_months(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--set", "days=61", "--set", "start=2021-06-01"]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, models):
    out = tmp_path_factory.mktemp("models")
    fine, coarse = models(Family.FICNN_MPC)
    fine.save(out / "model_20.icnn")
    coarse.save(out / "model_180.icnn")
    return out


def test_gen_data_one_day(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "days=1"]) == 0
    assert len(read_records(tmp_path / "records.csv")) == 72
    assert (tmp_path / "weather.csv").exists()


def test_gen_data_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "4", "--set", "days=2"]) == 0
    for f in ("records.csv", "weather.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_echo_reproduces_run(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "9", "--set", "days=1"]) == 0
    echo = tmp_path / "a" / "config_gen-data.ini"
    cp = configparser.ConfigParser()
    cp.read(echo)
    assert cp["gen-data"]["seed"] == "9"
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--config", str(echo)]) == 0
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_unknown_key_rejected(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "dayz=1"]) == 2
    assert "dayz" in capsys.readouterr().err


def test_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[gen-data]\ndays = 1\n[bogus]\nx = 1\n")
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(cfg)]) == 2


def test_malformed_set_rejected(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "days"]) == 2


def test_train_writes_two_models_and_honors_epochs(tmp_path, two_months):
    args = ["train", "--out", str(tmp_path), "--family", "picnn_mpc",
            "--set", f"data={two_months / 'records.csv'}", "--set", "epochs=2"]
    assert main(args) == 0
    for rate in (20, 180):
        m = IcnnModel.load(tmp_path / f"model_{rate}.icnn")
        assert m.family is Family.PICNN_MPC
    loss = pd.read_csv(tmp_path / "loss.csv")
    assert list(loss.columns) == ["rate_minutes", "epoch", "loss"]
    assert loss.groupby("rate_minutes").size().to_dict() == {20: 2, 180: 2}
    first = {r: (tmp_path / f"model_{r}.icnn").read_bytes() for r in (20, 180)}
    assert main(args) == 0
    for r in (20, 180):
        assert (tmp_path / f"model_{r}.icnn").read_bytes() == first[r]


def test_train_malformed_csv(tmp_path):
    (tmp_path / "records.csv").write_text("a,b\n1,2\n")
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_evaluate_single_repetition(tmp_path, two_months):
    args = ["evaluate", "--out", str(tmp_path), "--family", "ficnn_amos ficnn_mpc",
            "--set", f"data={two_months / 'records.csv'}", "--set", "repetitions=1",
            "--set", "train_folds=1", "--set", "val_folds=1", "--set", "epochs=1"]
    assert main(args) == 0
    report = pd.read_csv(tmp_path / "report.csv")
    assert len(report) == 4
    assert report.groupby("horizon").size().to_dict() == {"1h": 2, "6h": 2}
    np.testing.assert_array_equal(report["min"], report["median"])
    np.testing.assert_array_equal(report["max"], report["median"])
    reps = pd.read_csv(tmp_path / "repetitions.csv")
    again = reps.groupby(["family", "horizon"], sort=False)["mse"].median().to_numpy()
    np.testing.assert_allclose(again, report["median"], rtol=1e-9)


def test_audit_passes_for_mpc_models(trained_dir, capsys):
    assert main(["audit", "--out", str(trained_dir), "--strict", "--set", "samples=500"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("PASS")
    df = pd.read_csv(trained_dir / "audit.csv")
    assert (df["violations"] == 0).all()


def test_audit_strict_fails_on_nonconvex_model(tmp_path, capsys):
    from test_rollout import _amos_abs_model

    _amos_abs_model(-2.0).save(tmp_path / "amos.icnn")
    base = ["audit", "--out", str(tmp_path), "--set", "fine_model=amos.icnn", "--set", "coarse_model=",
            "--set", "samples=500"]
    assert main(base) == 0
    assert "FAIL" in capsys.readouterr().out
    assert main(base + ["--strict"]) == 1


def test_audit_rejects_planted_negative_weight(tmp_path, models):
    models(Family.FICNN_MPC)[0].save(tmp_path / "m.icnn")
    lines = (tmp_path / "m.icnn").read_text().splitlines()
    i = next(i for i, line in enumerate(lines) if line.startswith("array Wy0"))
    rest = lines[i + 1].partition(" ")[2]
    lines[i + 1] = f"-1.0 {rest}".strip()
    (tmp_path / "bad.icnn").write_text("\n".join(lines) + "\n")
    assert main(["audit", "--out", str(tmp_path), "--set", "fine_model=bad.icnn",
                 "--set", "coarse_model=", "--set", "samples=100"]) == 2


def test_mpc_run_and_report(trained_dir, tmp_path):
    out = tmp_path / "mpc"
    common = ["--set", "days=0.25", "--set", "warmup=24", "--set", "wind_days="]
    assert main(["mpc-run", "--out", str(out), "--set", f"fine_model={trained_dir / 'model_20.icnn'}",
                 "--set", f"coarse_model={trained_dir / 'model_180.icnn'}", *common]) == 0
    log = pd.read_csv(out / "run_log.csv")
    summary = pd.read_csv(out / "summary.csv").iloc[0]
    assert len(log) == 18
    assert summary["energy_kwh"] == pytest.approx(log["u"].abs().sum(), rel=1e-9)
    assert log["u"].between(-0.6, 0).all()
    assert (out / "controller_log.csv").exists()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.svg").read_text().lstrip().startswith("<?xml")

    base = tmp_path / "thermostat"
    assert main(["mpc-run", "--out", str(base), "--set", "controller=thermostat", *common]) == 0
    other = pd.read_csv(base / "summary.csv")
    assert set(other.columns) == set(pd.read_csv(out / "summary.csv").columns)
    assert other["controller"][0] == "thermostat"


def test_mpc_run_unknown_controller(tmp_path):
    assert main(["mpc-run", "--out", str(tmp_path), "--set", "controller=pid"]) == 2

