import numpy as np
import pytest
from hypothesis import given, strategies as st

from capsamc import capsnet, modsig
from capsamc import nncore as nn
from capsamc.capsnet import CheckpointError, ConvSpec, NetworkConfig
from gradcheck import model_loss, whole_model_error
from tiny import batch_for, tiny_config


def test_default_shape_trace_is_exact():
    trace = dict(NetworkConfig().shape_trace())
    assert trace["feature"] == (64, 3639)
    assert trace["conv1"] == (48, 517)
    assert trace["conv2"] == (64, 62)
    assert trace["pool"] == (64, 55)
    assert trace["capsule"] == (32,)
    assert trace["point"] == (1,)
    assert trace["concat"] == (8,) == trace["softmax"]


def test_default_parameter_shapes():
    shapes = capsnet.parameter_shapes(NetworkConfig())
    assert shapes["branch0.fc.weight"] == (32, 3520)
    assert shapes["feature.conv.weight"] == (64, 2, 22)
    assert shapes["branch7.conv1.weight"] == (48, 64, 23)
    assert shapes["branch7.point.weight"] == (1, 32)
    assert "branch8.fc.weight" not in shapes


def test_scaled_config_fits_toy_frames():
    trace = dict(capsnet.scaled_config(4096).shape_trace())
    assert trace["pool"][1] >= 1


def test_collapsed_layer_is_named():
    with pytest.raises(ValueError, match="conv2"):
        capsnet.build(NetworkConfig(input_length=1000))
    with pytest.raises(ValueError, match="pool"):
        capsnet.build(NetworkConfig(input_length=4096))


def test_build_is_deterministic_in_seed():
    a, b, c = (capsnet.build(tiny_config(seed=s)) for s in (1, 1, 2))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params if k.endswith("weight"))


def test_initial_values():
    m = capsnet.build(tiny_config())
    for k, v in m.params.items():
        if k.endswith(".bias") or k.endswith(".beta"):
            assert not v.any(), k
        elif k.endswith(".gamma"):
            assert np.all(v == 1), k
        else:
            fan_in = v.shape[1] * (v.shape[2] if v.ndim == 3 else 1)
            fan_out = v.shape[0] * (v.shape[2] if v.ndim == 3 else 1)
            assert np.abs(v).max() <= np.sqrt(6 / (fan_in + fan_out)) + 1e-7, k


def test_branch_count_sets_output_width():
    cfg = tiny_config(classes=("BPSK", "QPSK", "8PSK", "MSK"))
    x, _ = batch_for(cfg, 3)
    probs, _ = capsnet.forward(capsnet.build(cfg), x)
    assert probs.shape == (3, 4)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_forward_rows_are_distributions(seed, scale):
    cfg = tiny_config()
    x, _ = batch_for(cfg, 3, seed)
    probs, _ = capsnet.forward(capsnet.build(cfg), x * np.float32(scale))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)


def test_zero_model_outputs_uniform():
    cfg = tiny_config(classes=modsig.SCHEME_NAMES)
    m = capsnet.build(cfg)
    for k in m.params:
        if k.endswith("weight") or k.endswith("bias"):
            m.params[k][...] = 0
    x, _ = batch_for(cfg, 2)
    probs, _ = capsnet.forward(m, x)
    np.testing.assert_allclose(probs, 0.125, atol=1e-7)


def test_forward_rejects_wrong_input():
    m = capsnet.build(tiny_config())
    with pytest.raises(nn.ShapeError):
        capsnet.forward(m, np.zeros((1, 2, 65), np.float32))
    with pytest.raises(nn.ShapeError):
        capsnet.forward(m, np.zeros((1, 3, 64), np.float32))


@pytest.mark.parametrize("branch", [0, 2])
def test_branch_independence(branch):
    cfg = tiny_config()
    m = capsnet.build(cfg)
    x, _ = batch_for(cfg, 4, seed=9)
    before = capsnet.logits_of(m, x)
    z = m.copy()
    for k in z.params:
        if k.startswith(f"branch{branch}."):
            z.params[k][...] = 0
    after = capsnet.logits_of(z, x)
    others = [i for i in range(cfg.branch_count) if i != branch]
    np.testing.assert_array_equal(before[:, others], after[:, others])
    assert not np.array_equal(before[:, branch], after[:, branch])


def test_predict_tie_breaks_to_lowest_index():
    cfg = tiny_config(classes=modsig.SCHEME_NAMES)
    m = capsnet.build(cfg)
    for k in m.params:
        if k.startswith("branch") and (k.endswith("weight") or k.endswith("bias")):
            m.params[k][...] = 0
    m.params["branch2.point.bias"][0] = 3.0
    m.params["branch5.point.bias"][0] = 3.0
    label, probs = capsnet.predict(m, np.ones(64, np.complex64))
    assert label == modsig.ModulationScheme.PSK8
    assert probs[2] == probs[5]


def test_predict_invariant_to_positive_scaling(rng):
    m = capsnet.build(tiny_config())
    s = (rng.standard_normal(64) + 1j * rng.standard_normal(64))
    l1, p1 = capsnet.predict(m, s)
    l2, p2 = capsnet.predict(m, s * 37.5)
    assert l1 == l2
    np.testing.assert_allclose(p1, p2, atol=1e-6)
    with pytest.raises(nn.NonFiniteError):
        capsnet.predict(m, np.full(64, np.nan, np.complex64))


@pytest.mark.parametrize("dtype,tol", [("float32", 1e-3), ("float64", 1e-6)])
def test_whole_model_gradient(dtype, tol):
    worst, zero_bias = whole_model_error(dtype)
    assert worst < tol
    # biases feeding train-mode batch norm have an exactly zero true gradient
    assert zero_bias < 1e-6


def test_saturated_correct_prediction_has_tiny_gradient():
    cfg = tiny_config("float64")
    m = capsnet.build(cfg)
    m.params["branch1.point.bias"][0] = 60.0
    x, _ = batch_for(cfg, 4)
    _, cache = capsnet.forward(m, x, train=True)
    grads, loss = capsnet.backward(m, cache, np.ones(4, dtype=int))
    assert loss < 1e-20
    assert max(np.abs(g).max() for g in grads.values()) < 1e-20


def test_duplicated_row_doubles_its_head_gradient(rng):
    # Train-mode batch norm couples samples, so the doubling identity holds at
    # the loss head, where the mean loss is a plain sum over rows.
    p = nn.softmax(rng.standard_normal((3, 8)))
    y = np.array([1, 4, 6])
    g = nn.softmax_cross_entropy_backward(p, y) * 3
    gd = nn.softmax_cross_entropy_backward(np.vstack([p, p[:1]]), np.append(y, 1)) * 4
    np.testing.assert_allclose(gd[0] + gd[3], 2 * g[0])


def test_backward_rejects_bad_cache():
    cfg = tiny_config()
    m = capsnet.build(cfg)
    x, y = batch_for(cfg, 4)
    _, cache = capsnet.forward(m, x, train=False)
    with pytest.raises(ValueError, match="train-mode"):
        capsnet.backward(m, cache, y)
    _, cache = capsnet.forward(m, x, train=True)
    with pytest.raises(ValueError, match="labels"):
        capsnet.backward(m, cache, y[:3])


def test_small_step_decreases_loss():
    # One SGDM step at lr 1e-3 should lower the loss of the batch it was taken on.
    cfg = tiny_config("float64")
    wins = 0
    trials = 20
    for t in range(trials):
        m = capsnet.build(tiny_config("float64", seed=t))
        x, y = batch_for(cfg, 4, seed=100 + t)
        before = model_loss(m, x, y)
        _, cache = capsnet.forward(m, x, train=True, update_stats=False)
        grads, _ = capsnet.backward(m, cache, y)
        nn.sgdm_step(m.params, grads, nn.OptimizerState(1e-3, 0.9))
        wins += model_loss(m, x, y) < before
    assert wins >= 0.95 * trials


def test_training_steps_are_bit_reproducible():
    def run():
        cfg = tiny_config()
        m = capsnet.build(cfg)
        opt = nn.OptimizerState(0.01, 0.9)
        for step in range(3):
            x, y = batch_for(cfg, 4, seed=step)
            _, cache = capsnet.forward(m, x, train=True)
            grads, _ = capsnet.backward(m, cache, y)
            nn.sgdm_step(m.params, grads, opt)
        return m

    a, b = run(), run()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for k in a.buffers:
        assert a.buffers[k].tobytes() == b.buffers[k].tobytes()


def test_running_stats_update_only_in_train_mode():
    cfg = tiny_config()
    m = capsnet.build(cfg)
    x, _ = batch_for(cfg, 4)
    capsnet.forward(m, x, train=False)
    assert not m.buffers["feature.bn.running_mean"].any()
    capsnet.forward(m, x, train=True)
    assert m.buffers["feature.bn.running_mean"].any()


# -- checkpoints ---------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    cfg = tiny_config()
    m = capsnet.build(cfg)
    x, _ = batch_for(cfg, 4)
    capsnet.forward(m, x, train=True)  # non-trivial running stats
    m.provenance = {"dataset": "unit", "epoch": 3, "val_accuracy": 0.5}
    path = tmp_path / "m.ckpt"
    capsnet.save(m, path)
    return m, path, x


def test_checkpoint_round_trip_is_bit_exact(trained):
    m, path, x = trained
    back = capsnet.load(path)
    assert back.config == m.config
    assert back.provenance == m.provenance
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    for k in m.buffers:
        assert back.buffers[k].tobytes() == m.buffers[k].tobytes()
    assert capsnet.infer(back, x).tobytes() == capsnet.infer(m, x).tobytes()


def test_checkpoint_rejects_truncation(trained):
    _, path, _ = trained
    data = path.read_bytes()
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            capsnet.load(path)


def test_checkpoint_rejects_trailing_bytes_and_bad_magic(trained):
    _, path, _ = trained
    data = path.read_bytes()
    path.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        capsnet.load(path)
    path.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="not a"):
        capsnet.load(path)


def test_checkpoint_rejects_version_and_digest(trained):
    _, path, _ = trained
    data = bytearray(path.read_bytes())
    bad = bytearray(data)
    bad[8] = 9
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        capsnet.load(path)
    bad = bytearray(data)
    bad[12] ^= 0xFF
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="digest"):
        capsnet.load(path)


def test_checkpoint_rejects_other_branch_count(trained):
    _, path, _ = trained
    with pytest.raises(CheckpointError, match="branches"):
        capsnet.load(path, expected=tiny_config(classes=("BPSK", "QPSK")))
    assert capsnet.load(path, expected=tiny_config()).config == tiny_config()
