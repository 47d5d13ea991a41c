"""Finite-difference sweeps shared by the unit and acceptance suites.

Each check runs the package's backward pass in the requested dtype and
compares it with central differences of the float64 forward pass on the
same values.
"""
import numpy as np

from capsamc import capsnet
from capsamc import nncore as nn
from oracles import numeric_grad, rel_error
from tiny import batch_for, tiny_config


def _probe_loss(out, probe):
    return float(np.sum(out.astype(np.float64) * probe))


def _worst(pairs):
    return max(rel_error(a, n) for a, n in pairs)


def conv_error(rng, dtype, stride):
    x = rng.standard_normal((2, 3, 23)).astype(dtype)
    k = rng.standard_normal((4, 3, 5)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    probe = rng.standard_normal(nn.conv1d(x, k, b, stride).shape)
    g = nn.conv1d_backward(probe.astype(dtype), x, k, stride)
    x64, k64, b64 = (v.astype(np.float64) for v in (x, k, b))
    f = lambda: _probe_loss(nn.conv1d(x64, k64, b64, stride), probe)
    return _worst([(g.input_grad, numeric_grad(f, x64)), (g.param_grads["weight"], numeric_grad(f, k64)),
                   (g.param_grads["bias"], numeric_grad(f, b64))])


def batchnorm_error(rng, dtype, shape, train):
    c = shape[1]
    x = (rng.standard_normal(shape) * 2 + 1).astype(dtype)
    gamma = rng.uniform(0.5, 1.5, c).astype(dtype)
    beta = rng.standard_normal(c).astype(dtype)
    stats = nn.BatchNormStats(rng.standard_normal(c), rng.uniform(0.5, 2, c))
    out, cache, _ = nn.batchnorm(x, gamma, beta, stats, train)
    probe = rng.standard_normal(out.shape)
    g = nn.batchnorm_backward(probe.astype(dtype), cache)
    x64, g64, b64 = (v.astype(np.float64) for v in (x, gamma, beta))
    f = lambda: _probe_loss(nn.batchnorm(x64, g64, b64, stats, train)[0], probe)
    return _worst([(g.input_grad, numeric_grad(f, x64)), (g.param_grads["gamma"], numeric_grad(f, g64)),
                   (g.param_grads["beta"], numeric_grad(f, b64))])


def activation_error(rng, dtype, kind):
    x = rng.standard_normal((3, 4, 5))
    x[np.abs(x) < 0.05] += 0.2  # keep relu away from its kink
    x = x.astype(dtype)
    out = nn.activation(x, kind)
    probe = rng.standard_normal(out.shape)
    g = nn.activation_backward(probe.astype(dtype), out, kind)
    x64 = x.astype(np.float64)
    return rel_error(g.input_grad, numeric_grad(lambda: _probe_loss(nn.activation(x64, kind), probe), x64))


def avgpool_error(rng, dtype, window, stride):
    x = rng.standard_normal((2, 3, 17)).astype(dtype)
    probe = rng.standard_normal(nn.avgpool1d(x, window, stride).shape)
    g = nn.avgpool1d_backward(probe.astype(dtype), 17, window, stride)
    x64 = x.astype(np.float64)
    return rel_error(g.input_grad, numeric_grad(lambda: _probe_loss(nn.avgpool1d(x64, window, stride), probe), x64))


def fc_error(rng, dtype):
    x = rng.standard_normal((4, 2, 5)).astype(dtype)
    w = rng.standard_normal((3, 10)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    probe = rng.standard_normal(nn.fully_connected(x, w, b).shape)
    g = nn.fully_connected_backward(probe.astype(dtype), x, w)
    x64, w64, b64 = (v.astype(np.float64) for v in (x, w, b))
    f = lambda: _probe_loss(nn.fully_connected(x64, w64, b64), probe)
    return _worst([(g.input_grad, numeric_grad(f, x64)), (g.param_grads["weight"], numeric_grad(f, w64)),
                   (g.param_grads["bias"], numeric_grad(f, b64))])


def softmax_ce_error(rng):
    logits = rng.standard_normal((4, 8))
    labels = np.array([0, 3, 7, 3])
    g = nn.softmax_cross_entropy_backward(nn.softmax(logits), labels)
    f = lambda: float(np.mean(nn.cross_entropy(nn.softmax(logits), labels)))
    return rel_error(g, numeric_grad(f, logits))


def layer_errors(dtype, seed=0) -> dict[str, float]:
    """Worst relative error of every nncore layer with a backward pass."""
    rng = np.random.default_rng(seed)
    errs = {}
    for stride in (1, 2, 3, 5):
        errs[f"conv1d/s{stride}"] = conv_error(rng, dtype, stride)
    for shape in ((5, 3), (4, 3, 7)):
        for train in (True, False):
            errs[f"batchnorm/{len(shape)}d/{'train' if train else 'infer'}"] = batchnorm_error(rng, dtype, shape, train)
    for kind in ("tanh", "relu"):
        errs[f"activation/{kind}"] = activation_error(rng, dtype, kind)
    for window, stride in ((8, 1), (3, 2), (4, 4), (1, 1)):
        errs[f"avgpool/{window}x{stride}"] = avgpool_error(rng, dtype, window, stride)
    errs["fully_connected"] = fc_error(rng, dtype)
    if dtype == np.float64:
        errs["softmax+ce"] = softmax_ce_error(rng)
    return errs


def bn_fed_biases(cfg):
    """Biases whose output feeds train-mode batch norm; the mean subtraction
    cancels them, so their true gradient is exactly zero."""
    names = {"feature.conv.bias"}
    for i in range(cfg.branch_count):
        names |= {f"branch{i}.conv1.bias", f"branch{i}.conv2.bias", f"branch{i}.fc.bias"}
    return names


def model_loss(model, x, y):
    probs, _ = capsnet.forward(model, x, train=True, update_stats=False)
    return float(np.mean(nn.cross_entropy(probs.astype(np.float64), y)))


def whole_model_error(dtype, seed=4):
    """(worst relative error over parameters, worst |grad| of the zero-gradient
    biases relative to the largest gradient) for the tiny network."""
    cfg = tiny_config(dtype)
    m = capsnet.build(cfg)
    r = np.random.default_rng(seed)
    for k in m.params:  # move off the symmetric initial point
        m.params[k] += (0.1 * r.standard_normal(m.params[k].shape)).astype(cfg.dtype)
    x, y = batch_for(cfg, 5, seed=2)
    _, cache = capsnet.forward(m, x, train=True, update_stats=False)
    grads, _ = capsnet.backward(m, cache, y)
    ref = capsnet.ModelState(tiny_config("float64"), {k: v.astype(np.float64) for k, v in m.params.items()},
                             {k: v.astype(np.float64) for k, v in m.buffers.items()})
    x64 = x.astype(np.float64)
    scale = max(np.abs(g).max() for g in grads.values())
    worst, zero_bias = 0.0, 0.0
    for name, p in ref.params.items():
        num = numeric_grad(lambda: model_loss(ref, x64, y), p)
        if name in bn_fed_biases(cfg):
            zero_bias = max(zero_bias, np.abs(grads[name]).max() / scale, np.abs(num).max() / scale)
            continue
        worst = max(worst, rel_error(grads[name], num))
    return worst, zero_bias
