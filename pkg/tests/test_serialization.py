import numpy as np
import pytest

from icnn_mpc import serialization
from icnn_mpc.model import Family, IcnnModel, init_network
from icnn_mpc.networks import InvariantError, Mode, init_ficnn, init_picnn
from icnn_mpc.serialization import FormatError


def _perturbed(p, seed):
    rng = np.random.default_rng(seed)
    p.flat[:] += rng.normal(size=p.flat.size) * 1e-3
    p.flat[p.constrained_mask()] = np.abs(p.flat[p.constrained_mask()])
    return p


@pytest.mark.parametrize("mode", [Mode.AMOS, Mode.MPC])
def test_ficnn_roundtrip_bit_identical(mode):
    p = _perturbed(init_ficnn(11, 9, 4, mode, 0.8, np.random.default_rng(0)), 1)
    text = serialization.dumps(p, header={"note": "x"})
    q, header, extras = serialization.loads(text)
    np.testing.assert_array_equal(p.flat, q.flat)
    assert q.activations == p.activations and q.mode == p.mode
    assert header["note"] == "x" and extras == {}
    assert serialization.dumps(q, header={"note": "x"}) == text


@pytest.mark.parametrize("mode", [Mode.AMOS, Mode.MPC])
def test_picnn_roundtrip_bit_identical(mode):
    p = _perturbed(init_picnn(5, 6, 8, 4, mode, 12.0, np.random.default_rng(0)), 2)
    q, _, _ = serialization.loads(serialization.dumps(p))
    np.testing.assert_array_equal(p.flat, q.flat)
    assert q.zv_activations == p.zv_activations
    assert q.yv_activations == p.yv_activations
    assert q.tilde_activations == p.tilde_activations


def test_extra_arrays_roundtrip():
    p = init_ficnn(2, 3, 2, Mode.MPC, 0.0, np.random.default_rng(0))
    extra = {"mean": np.array([0.1, 1 / 3]), "scale": np.array([2.0, np.pi])}
    _, _, got = serialization.loads(serialization.dumps(p, extra_arrays=extra))
    for k, v in extra.items():
        np.testing.assert_array_equal(got[k].reshape(-1), v)


def test_planted_negative_wy_rejected_on_load():
    p = init_ficnn(3, 4, 2, Mode.MPC, 0.0, np.random.default_rng(0))
    lines = serialization.dumps(p).splitlines()
    i = next(i for i, line in enumerate(lines) if line.startswith("array Wy0"))
    lines[i + 1] = "-1.0" + lines[i + 1][lines[i + 1].index(" "):] if " " in lines[i + 1] else "-1.0"
    with pytest.raises(InvariantError):
        serialization.loads("\n".join(lines) + "\n")
    serialization.loads("\n".join(lines) + "\n", validate=False)


@pytest.mark.parametrize("text", ["", "not a model\n", "icnn-model 1\nnetwork: ficnn\n"])
def test_malformed_text_rejected(text):
    with pytest.raises(FormatError):
        serialization.loads(text)


def test_model_file_roundtrip(tmp_path):
    net = init_network(Family.PICNN_MPC, 9, 4, 0.8, np.random.default_rng(3))
    m = IcnnModel(Family.PICNN_MPC, net, np.arange(11.0), np.linspace(1, 2, 11), 20)
    m.save(tmp_path / "m.icnn")
    m2 = IcnnModel.load(tmp_path / "m.icnn")
    assert m2.family is Family.PICNN_MPC and m2.rate_minutes == 20
    np.testing.assert_array_equal(m2.net.flat, m.net.flat)
    np.testing.assert_array_equal(m2.mean, m.mean)
    np.testing.assert_array_equal(m2.scale, m.scale)
    X = np.random.default_rng(0).normal(size=(5, 11))
    np.testing.assert_array_equal(m.predict(X), m2.predict(X))
