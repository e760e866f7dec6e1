import statistics

import numpy as np
import pandas as pd
import pytest

from icnn_mpc.features import N_CONVEX, Dataset, build_features
from icnn_mpc.model import TABLE1, Family, init_network
from icnn_mpc.networks import Activation, FicnnParams, Mode, check_invariants, init_ficnn, init_picnn
from icnn_mpc.simulator import RoomModel, generate_dataset, make_weather
from icnn_mpc.training import (
    FoldReport,
    TrainConfig,
    TrainingError,
    fit_model,
    gradients,
    kfold_evaluate,
    loss_and_gradient,
    mse,
    multistep_mse,
    multistep_starts,
    train,
)

FAMILY_NETS = {
    "ficnn_amos": lambda rng: init_ficnn(4, 5, 3, Mode.AMOS, 0.3, rng),
    "ficnn_mpc": lambda rng: init_ficnn(4, 5, 3, Mode.MPC, 0.3, rng),
    "picnn_amos": lambda rng: init_picnn(3, 2, 4, 3, Mode.AMOS, 0.3, rng),
    "picnn_mpc": lambda rng: init_picnn(3, 2, 4, 3, Mode.MPC, 0.3, rng),
}


def _batch(params, rng, n=16):
    if hasattr(params, "Wt"):
        return (rng.normal(size=(n, params.input_dim)), rng.normal(size=(n, params.tilde_dim)))
    return rng.normal(size=(n, params.input_dim))


def _randomise(params, rng):
    params.flat[:] = rng.normal(scale=0.7, size=params.flat.size)
    mask = params.constrained_mask()
    params.flat[mask] = np.abs(params.flat[mask])
    return params


# gradients ------------------------------------------------------------------


def test_linear_regression_gradient():
    p = FicnnParams([None], [np.zeros((1, 1))], [np.zeros(1)], [Activation.identity()], Mode.MPC)
    g = gradients(p, np.array([[1.0]]), np.array([2.0]))
    assert g["b0"][0] == -4.0
    assert g["Wy0"][0, 0] == -4.0


@pytest.mark.parametrize("family", list(FAMILY_NETS))
def test_gradient_zero_at_perfect_fit(family):
    rng = np.random.default_rng(0)
    p = _randomise(FAMILY_NETS[family](rng), rng)
    X = _batch(p, rng)
    Y, V = (X if isinstance(X, tuple) else (X, None))
    from icnn_mpc.networks import ficnn_forward, picnn_forward

    t = ficnn_forward(p, Y) if V is None else picnn_forward(p, Y, V)
    loss, g = loss_and_gradient(p, X, t)
    assert loss == 0.0
    np.testing.assert_array_equal(g, 0.0)


def _fd_relative_error(p, X, t, h=1e-5):
    loss, g = loss_and_gradient(p, X, t)
    num = np.empty_like(g)
    for i in range(p.flat.size):
        old = p.flat[i]
        p.flat[i] = old + h
        up = mse(p, X, t)
        p.flat[i] = old - h
        dn = mse(p, X, t)
        p.flat[i] = old
        num[i] = (up - dn) / (2 * h)
    # floor keeps roundoff on near-zero entries from dominating
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-5 * (1 + loss))
    return float(np.max(np.abs(g - num) / denom))


@pytest.mark.parametrize("family", list(FAMILY_NETS))
def test_gradient_matches_finite_differences(family):
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        p = _randomise(FAMILY_NETS[family](rng), rng)
        X = _batch(p, rng)
        t = rng.normal(size=16)
        worst = max(worst, _fd_relative_error(p, X, t))
    assert worst < 1e-5


def test_dimension_mismatch_rejected():
    p = init_ficnn(3, 4, 2, Mode.MPC, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        loss_and_gradient(p, np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        loss_and_gradient(p, np.zeros((2, 3)), np.zeros(3))


# train ----------------------------------------------------------------------


def _quadratic(lo, hi, seed=0, n=2000):
    rng = np.random.default_rng(seed)
    Y = rng.uniform(lo, hi, size=(n, 2))
    return Y, (Y**2).sum(axis=1)


def _fit_quadratic(mode, lo, hi):
    Y, t = _quadratic(lo, hi)
    preset = TABLE1[20]
    p = init_ficnn(2, preset["hidden"], preset["layers"], mode, 0.0, np.random.default_rng(0))
    cfg = TrainConfig(epochs=preset["epochs"], lr=1e-2)
    p, _ = train(p, Y, t, cfg)
    return mse(p, Y, t)


@pytest.mark.xfail(strict=True, reason="Mpc-mode nets are non-decreasing in every input; "
                   "y1^2 + y2^2 on [-2, 2]^2 is not, so the best monotone fit has MSE well above 0.05")
def test_mpc_ficnn_fits_convex_quadratic():
    assert _fit_quadratic(Mode.MPC, -2, 2) < 0.05


def test_amos_ficnn_fits_convex_quadratic():
    assert _fit_quadratic(Mode.AMOS, -2, 2) < 0.05


def test_mpc_ficnn_fits_quadratic_on_monotone_region():
    assert _fit_quadratic(Mode.MPC, 0, 2) < 0.05


@pytest.mark.parametrize("family", list(FAMILY_NETS))
def test_constant_target(family):
    rng = np.random.default_rng(1)
    p = FAMILY_NETS[family](rng)
    X = _batch(p, rng, n=500)
    t = np.full(500, 1.7)
    p, _ = train(p, X, t, TrainConfig(epochs=60, lr=1e-2))
    assert mse(p, X, t) < 1e-3


def test_empty_dataset_is_error():
    p = init_ficnn(3, 4, 2, Mode.MPC, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        train(p, np.zeros((0, 3)), np.zeros(0), TrainConfig())


def test_non_finite_loss_aborts_with_location():
    p = init_ficnn(2, 3, 2, Mode.MPC, 0.0, np.random.default_rng(0))
    Y = np.ones((40, 2))
    t = np.ones(40)
    t[35] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 0, batch 1"):
        train(p, Y, t, TrainConfig(epochs=2, batch_size=32, seed=0))


def test_trace_length_and_finite():
    rng = np.random.default_rng(2)
    p = FAMILY_NETS["picnn_mpc"](rng)
    X = _batch(p, rng, n=100)
    _, trace = train(p, X, rng.normal(size=100), TrainConfig(epochs=3, batch_size=32))
    assert trace.shape == (3 * 4,)
    assert np.all(np.isfinite(trace))


@pytest.mark.parametrize("family", list(FAMILY_NETS))
def test_training_is_deterministic(family):
    rng = np.random.default_rng(3)
    p = FAMILY_NETS[family](rng)
    X = _batch(p, rng, n=200)
    t = rng.normal(size=200)
    a, ta = train(p, X, t, TrainConfig(epochs=3, seed=9))
    b, tb = train(p, X, t, TrainConfig(epochs=3, seed=9))
    np.testing.assert_array_equal(a.flat, b.flat)
    np.testing.assert_array_equal(ta, tb)


@pytest.mark.parametrize("family", list(FAMILY_NETS))
def test_constraints_hold_exactly_after_training(family):
    rng = np.random.default_rng(4)
    p = FAMILY_NETS[family](rng)
    X = _batch(p, rng, n=300)
    # decreasing target pushes constrained weights negative
    Y = X[0] if isinstance(X, tuple) else X
    t = -5 * Y.sum(axis=1)
    p, _ = train(p, X, t, TrainConfig(epochs=5, lr=5e-2))
    assert np.all(p.flat[p.constrained_mask()] >= 0.0)
    assert np.any(p.flat[p.constrained_mask()] == 0.0)
    check_invariants(p)


def test_input_params_not_mutated():
    rng = np.random.default_rng(5)
    p = FAMILY_NETS["ficnn_mpc"](rng)
    before = p.flat.copy()
    train(p, _batch(p, rng, n=50), rng.normal(size=50), TrainConfig(epochs=1))
    np.testing.assert_array_equal(p.flat, before)


def test_for_rate_presets():
    assert TrainConfig.for_rate(20).epochs == 20 and TrainConfig.for_rate(20).beta_offset == 0.8
    assert TrainConfig.for_rate(180).epochs == 40 and TrainConfig.for_rate(180).beta_offset == 12.0
    assert TrainConfig.for_rate(180, epochs=3).epochs == 3


# k-fold ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def plant_dataset():
    """Synthetic RC plant over 24 days, relabelled into 12 two-day folds."""
    weather = make_weather(25, start="2021-07-01", seed=0)
    records = generate_dataset(RoomModel(), weather, controller="random", steps=24 * 72, seed=0)
    ds = build_features(records, "20min")
    days = (pd.DatetimeIndex(ds.timestamps) - pd.Timestamp("2021-07-01")).days
    ds.folds = np.asarray(days // 2, dtype=int)
    return ds


def test_same_rows_validation_equals_training_mse(plant_dataset):
    ds = plant_dataset
    model, _ = fit_model(Family.FICNN_MPC, ds, TrainConfig.for_rate(20, epochs=2))
    starts = multistep_starts(ds, 1, np.arange(len(ds)))
    assert len(starts) == len(ds)
    one_step = float(np.mean((model.predict(ds.X) - ds.target) ** 2))
    assert multistep_mse(model, ds, starts, 1) == pytest.approx(one_step, rel=1e-12)


def test_multistep_starts_respects_gaps():
    ts = pd.date_range("2021-07-01", periods=10, freq="20min").delete(5)
    ds = Dataset(np.zeros((9, 11)), np.zeros(9), ts.to_numpy(), np.zeros(9), np.zeros(9, int), 20)
    np.testing.assert_array_equal(multistep_starts(ds, 3, np.arange(9)), [0, 1, 2, 5, 6])
    np.testing.assert_array_equal(multistep_starts(ds, 3, np.arange(1, 9)), [1, 2, 5, 6])


def test_kfold_twenty_repetitions(plant_dataset):
    rep = kfold_evaluate(Family.FICNN_MPC, plant_dataset, repetitions=20,
                         config=TrainConfig.for_rate(20, epochs=1))
    assert rep.mse.shape == (20,)
    assert np.all(np.isfinite(rep.mse)) and np.all(rep.mse > 0)
    assert rep.min <= rep.median <= rep.max and rep.iqr >= 0


def test_kfold_deterministic_and_parallel_equal(plant_dataset):
    cfg = TrainConfig.for_rate(20, epochs=1)
    a = kfold_evaluate(Family.PICNN_MPC, plant_dataset, repetitions=2, config=cfg, seed=3)
    b = kfold_evaluate(Family.PICNN_MPC, plant_dataset, repetitions=2, config=cfg, seed=3, n_jobs=2)
    np.testing.assert_array_equal(a.mse, b.mse)


def test_kfold_too_many_folds(plant_dataset):
    with pytest.raises(ValueError, match="folds"):
        kfold_evaluate(Family.FICNN_MPC, plant_dataset, train_folds=10, val_folds=3)


def test_kfold_horizon_rate_mismatch(plant_dataset):
    with pytest.raises(ValueError):
        kfold_evaluate(Family.FICNN_MPC, plant_dataset, horizon="6h")


def test_fold_report_summary_matches_independent_quantiles():
    values = np.random.default_rng(7).lognormal(size=20)
    s = FoldReport("ficnn_mpc", "1h", values).summary()
    q1, q2, q3 = statistics.quantiles(values.tolist(), n=4, method="inclusive")
    assert s["median"] == pytest.approx(statistics.median(values.tolist()), rel=1e-15)
    assert s["q1"] == pytest.approx(q1, rel=1e-15) and s["q3"] == pytest.approx(q3, rel=1e-15)
    assert s["iqr"] == pytest.approx(q3 - q1, rel=1e-12)
    assert s["min"] == min(values) and s["max"] == max(values)
    assert s["repetitions"] == 20


def test_fit_model_shapes_follow_rate(plant_dataset):
    model, trace = fit_model(Family.PICNN_MPC, plant_dataset, TrainConfig.for_rate(20, epochs=1))
    assert model.net.n_layers == 4
    assert model.net.Wy[0].shape[0] == 9
    assert model.net.activations[-1] == Activation.shifted_relu(0.8)
    assert len(trace) == int(np.ceil(len(plant_dataset) / 32))
    assert model.net.input_dim == N_CONVEX


def test_init_network_families():
    for fam in Family:
        net = init_network(fam, 8, 4, 12.0, np.random.default_rng(0))
        assert net.mode is fam.mode
        check_invariants(net)
