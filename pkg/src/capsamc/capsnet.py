"""The branch-per-class capsule network and its checkpoint format.

Topology (default sizes for a 2 x 32768 input)::

    conv 2->64 k22 s9 -> BN -> tanh                         64 x 3639
    per branch i (one per class):
        conv 64->48 k23 s7 -> BN -> tanh                     48 x 517
        conv 48->64 k22 s8 -> BN -> tanh                     64 x 62
        avg pool w8 s1                                        64 x 55
        dense 3520->32 -> BN -> relu        (capsule vector)  32
        dense 32->1                                           1
    concat branches -> softmax                                8

No routing between capsules: each capsule vector is reduced to one logit by
its own point-wise dense layer.  The first branch convolution of all
branches reads the same feature map, so the eight kernels are run as one
stacked convolution; that is arithmetically the same as eight separate ones.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore as nn
from .modsig import SCHEME_NAMES, ComplexSignal, ModulationScheme, normalize_power


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    channels: int


@dataclass(frozen=True)
class NetworkConfig:
    input_length: int = 32768
    input_channels: int = 2
    class_names: tuple[str, ...] = SCHEME_NAMES
    feature: ConvSpec = ConvSpec(22, 9, 64)
    branch_conv1: ConvSpec = ConvSpec(23, 7, 48)
    branch_conv2: ConvSpec = ConvSpec(22, 8, 64)
    pool_window: int = 8
    pool_stride: int = 1
    capsule_width: int = 32
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("feature", "branch_conv1", "branch_conv2"):
            spec = getattr(self, name)
            if isinstance(spec, dict):
                spec = ConvSpec(**spec)
                object.__setattr__(self, name, spec)
            if min(spec.kernel, spec.stride, spec.channels) < 1:
                raise ValueError(f"{name}: kernel, stride and channels must be positive")
        object.__setattr__(self, "class_names", tuple(ModulationScheme.from_name(c).label for c in self.class_names))
        if len(set(self.class_names)) != len(self.class_names) or not self.class_names:
            raise ValueError("class_names must be a non-empty list of distinct schemes")
        if min(self.pool_window, self.pool_stride, self.capsule_width, self.input_length, self.input_channels) < 1:
            raise ValueError("pool, capsule width and input sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def branch_count(self) -> int:
        return len(self.class_names)

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-sample activation shapes through one branch; raises on a collapsed layer."""
        trace = [("input", (self.input_channels, self.input_length))]
        length = self.input_length
        for name, spec in (("feature", self.feature), ("conv1", self.branch_conv1), ("conv2", self.branch_conv2)):
            length = nn.output_length(length, spec.kernel, spec.stride)
            if length < 1:
                raise ValueError(f"layer {name}: kernel {spec.kernel} does not fit the incoming length")
            trace.append((name, (spec.channels, length)))
        length = nn.output_length(length, self.pool_window, self.pool_stride)
        if length < 1:
            raise ValueError(f"layer pool: window {self.pool_window} does not fit the incoming length")
        trace.append(("pool", (self.branch_conv2.channels, length)))
        trace.append(("capsule", (self.capsule_width,)))
        trace.append(("point", (1,)))
        trace.append(("concat", (self.branch_count,)))
        trace.append(("softmax", (self.branch_count,)))
        return trace

    @property
    def flat_features(self) -> int:
        return int(np.prod(dict(self.shape_trace())["pool"]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["class_names"] = tuple(d.get("class_names", SCHEME_NAMES))
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def scaled_config(length: int, class_names=SCHEME_NAMES, **overrides) -> NetworkConfig:
    """Default widths and kernels with strides shrunk to fit a shorter frame.

    Used for the desk-scale runs on 4096-sample frames.
    """
    base = dict(
        input_length=length,
        class_names=tuple(class_names),
        feature=ConvSpec(22, 9, 64),
        branch_conv1=ConvSpec(23, 4, 48),
        branch_conv2=ConvSpec(22, 2, 64),
    )
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            copy.deepcopy(self.provenance),
        )

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _bn_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.gamma", f"{prefix}.beta"


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in allocation order."""
    f, c1, c2 = config.feature, config.branch_conv1, config.branch_conv2
    shapes = {
        "feature.conv.weight": (f.channels, config.input_channels, f.kernel),
        "feature.conv.bias": (f.channels,),
        "feature.bn.gamma": (f.channels,),
        "feature.bn.beta": (f.channels,),
    }
    flat = config.flat_features
    for i in range(config.branch_count):
        p = f"branch{i}"
        shapes.update({
            f"{p}.conv1.weight": (c1.channels, f.channels, c1.kernel),
            f"{p}.conv1.bias": (c1.channels,),
            f"{p}.bn1.gamma": (c1.channels,),
            f"{p}.bn1.beta": (c1.channels,),
            f"{p}.conv2.weight": (c2.channels, c1.channels, c2.kernel),
            f"{p}.conv2.bias": (c2.channels,),
            f"{p}.bn2.gamma": (c2.channels,),
            f"{p}.bn2.beta": (c2.channels,),
            f"{p}.fc.weight": (config.capsule_width, flat),
            f"{p}.fc.bias": (config.capsule_width,),
            f"{p}.bn3.gamma": (config.capsule_width,),
            f"{p}.bn3.beta": (config.capsule_width,),
            f"{p}.point.weight": (1, config.capsule_width),
            f"{p}.point.bias": (1,),
        })
    return shapes


def bn_layers(config: NetworkConfig) -> list[str]:
    names = ["feature.bn"]
    for i in range(config.branch_count):
        names += [f"branch{i}.bn1", f"branch{i}.bn2", f"branch{i}.bn3"]
    return names


def build(config: NetworkConfig) -> ModelState:
    """Allocate a model: Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    config.shape_trace()  # raises naming the collapsed layer
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            if len(shape) == 3:
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape[1], shape[0]
            params[name] = _glorot(rng, shape, fan_in, fan_out, dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    buffers = {}
    for layer in bn_layers(config):
        n = params[f"{layer}.gamma"].shape[0]
        buffers[f"{layer}.running_mean"] = np.zeros(n, dtype=dtype)
        buffers[f"{layer}.running_var"] = np.ones(n, dtype=dtype)
    return ModelState(config, params, buffers)


# -- forward / backward ---------------------------------------------------------

@dataclass
class ForwardCache:
    train: bool
    batch_size: int
    x: np.ndarray
    inner: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


def _stats(model: ModelState, layer: str) -> nn.BatchNormStats:
    return nn.BatchNormStats(model.buffers[f"{layer}.running_mean"], model.buffers[f"{layer}.running_var"])


def _bn(model: ModelState, layer: str, x: np.ndarray, train: bool, new_stats: dict):
    g, b = (model.params[n] for n in _bn_names(layer))
    out, cache, stats = nn.batchnorm(x, g, b, _stats(model, layer), train)
    if train:
        new_stats[layer] = stats
    return out, cache


def _stacked(model: ModelState, suffix: str) -> np.ndarray:
    return np.concatenate([model.params[f"branch{i}.{suffix}"] for i in range(model.config.branch_count)])


def forward(model: ModelState, batch: np.ndarray, train: bool = False, update_stats: bool = True):
    """Run a ``(B, channels, length)`` batch; returns ``(probabilities, cache)``.

    In train mode batch statistics are used and, unless ``update_stats`` is
    off, the running statistics in ``model.buffers`` are updated in place.
    """
    cfg = model.config
    x = np.asarray(batch)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.input_channels or x.shape[2] != cfg.input_length:
        raise nn.ShapeError(
            f"expected input (B, {cfg.input_channels}, {cfg.input_length}), got {tuple(np.shape(batch))}"
        )
    x = x.astype(model.dtype, copy=False)
    p = model.params
    K = cfg.branch_count
    c1 = cfg.branch_conv1.channels
    inner: dict = {}
    new_stats: dict = {}

    z0 = nn.conv1d(x, p["feature.conv.weight"], p["feature.conv.bias"], cfg.feature.stride)
    n0, inner["bn0"] = _bn(model, "feature.bn", z0, train, new_stats)
    del z0
    h0 = nn.activation(n0, "tanh")
    del n0
    inner["h0"] = h0

    # branch conv1 for all branches at once
    z1 = nn.conv1d(h0, _stacked(model, "conv1.weight"), _stacked(model, "conv1.bias"), cfg.branch_conv1.stride)
    branches = []
    logits = []
    for i in range(K):
        pre = f"branch{i}"
        bc: dict = {}
        n1, bc["bn1"] = _bn(model, f"{pre}.bn1", z1[:, i * c1 : (i + 1) * c1], train, new_stats)
        h1 = nn.activation(n1, "tanh")
        z2 = nn.conv1d(h1, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"], cfg.branch_conv2.stride)
        n2, bc["bn2"] = _bn(model, f"{pre}.bn2", z2, train, new_stats)
        h2 = nn.activation(n2, "tanh")
        pooled = nn.avgpool1d(h2, cfg.pool_window, cfg.pool_stride)
        flat = pooled.reshape(pooled.shape[0], -1)
        cap = nn.fully_connected(flat, p[f"{pre}.fc.weight"], p[f"{pre}.fc.bias"])
        n3, bc["bn3"] = _bn(model, f"{pre}.bn3", cap, train, new_stats)
        r = nn.activation(n3, "relu")
        logit = nn.fully_connected(r, p[f"{pre}.point.weight"], p[f"{pre}.point.bias"])
        if train:
            bc.update(h1=h1, h2=h2, flat=flat, r=r)
        branches.append(bc)
        logits.append(logit[:, 0])
    del z1
    logits = nn.depth_concat(logits, expected=K)
    probs = nn.softmax(logits)
    if train and update_stats:
        for layer, st in new_stats.items():
            model.buffers[f"{layer}.running_mean"] = st.mean
            model.buffers[f"{layer}.running_var"] = st.var
    inner["branches"] = branches
    cache = ForwardCache(train, x.shape[0], x if train else None, inner, logits, probs)
    return probs, cache


def backward(model: ModelState, cache: ForwardCache, labels) -> tuple[dict[str, np.ndarray], float]:
    """Gradients of the mean cross-entropy for every parameter, plus that loss."""
    if not cache.train:
        raise ValueError("backward needs the cache of a train-mode forward pass")
    labels = np.asarray(labels)
    if labels.shape != (cache.batch_size,):
        raise ValueError(f"got {labels.shape[0] if labels.ndim else 1} labels for a batch of {cache.batch_size}")
    cfg = model.config
    p = model.params
    K = cfg.branch_count
    loss = float(np.mean(nn.cross_entropy(cache.probs, labels)))
    dlogits = nn.softmax_cross_entropy_backward(cache.probs, labels).astype(model.dtype)
    grads: dict[str, np.ndarray] = {}
    h0 = cache.inner["h0"]
    dz1_parts = []
    for i, (bc, dl) in enumerate(zip(cache.inner["branches"], nn.depth_concat_backward(dlogits))):
        pre = f"branch{i}"
        g = nn.fully_connected_backward(dl[:, None], bc["r"], p[f"{pre}.point.weight"])
        grads[f"{pre}.point.weight"], grads[f"{pre}.point.bias"] = g.param_grads["weight"], g.param_grads["bias"]
        g = nn.activation_backward(g.input_grad, bc["r"], "relu")
        g = nn.batchnorm_backward(g.input_grad, bc["bn3"])
        grads[f"{pre}.bn3.gamma"], grads[f"{pre}.bn3.beta"] = g.param_grads["gamma"], g.param_grads["beta"]
        g = nn.fully_connected_backward(g.input_grad, bc["flat"], p[f"{pre}.fc.weight"])
        grads[f"{pre}.fc.weight"], grads[f"{pre}.fc.bias"] = g.param_grads["weight"], g.param_grads["bias"]
        h2 = bc["h2"]
        dpool = g.input_grad.reshape(h2.shape[0], h2.shape[1], -1)
        g = nn.avgpool1d_backward(dpool, h2.shape[2], cfg.pool_window, cfg.pool_stride)
        g = nn.activation_backward(g.input_grad, h2, "tanh")
        g = nn.batchnorm_backward(g.input_grad, bc["bn2"])
        grads[f"{pre}.bn2.gamma"], grads[f"{pre}.bn2.beta"] = g.param_grads["gamma"], g.param_grads["beta"]
        g = nn.conv1d_backward(g.input_grad, bc["h1"], p[f"{pre}.conv2.weight"], cfg.branch_conv2.stride)
        grads[f"{pre}.conv2.weight"], grads[f"{pre}.conv2.bias"] = g.param_grads["weight"], g.param_grads["bias"]
        g = nn.activation_backward(g.input_grad, bc["h1"], "tanh")
        g = nn.batchnorm_backward(g.input_grad, bc["bn1"])
        grads[f"{pre}.bn1.gamma"], grads[f"{pre}.bn1.beta"] = g.param_grads["gamma"], g.param_grads["beta"]
        dz1_parts.append(g.input_grad)
    dz1 = np.concatenate(dz1_parts, axis=1)
    del dz1_parts
    g = nn.conv1d_backward(dz1, h0, _stacked(model, "conv1.weight"), cfg.branch_conv1.stride)
    c1 = cfg.branch_conv1.channels
    for i in range(K):
        grads[f"branch{i}.conv1.weight"] = g.param_grads["weight"][i * c1 : (i + 1) * c1]
        grads[f"branch{i}.conv1.bias"] = g.param_grads["bias"][i * c1 : (i + 1) * c1]
    g = nn.activation_backward(g.input_grad, h0, "tanh")
    g = nn.batchnorm_backward(g.input_grad, cache.inner["bn0"])
    grads["feature.bn.gamma"], grads["feature.bn.beta"] = g.param_grads["gamma"], g.param_grads["beta"]
    g = nn.conv1d_backward(g.input_grad, cache.x, p["feature.conv.weight"], cfg.feature.stride)
    grads["feature.conv.weight"], grads["feature.conv.bias"] = g.param_grads["weight"], g.param_grads["bias"]
    grads = {k: grads[k].astype(model.dtype, copy=False) for k in p}
    return grads, loss


def logits_of(model: ModelState, batch: np.ndarray) -> np.ndarray:
    _, cache = forward(model, batch, train=False)
    return cache.logits


def infer(model: ModelState, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Inference-mode probabilities for a large batch, processed in chunks."""
    out = [forward(model, batch[i : i + chunk], train=False)[0] for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.branch_count), dtype=model.dtype)


def iq_tensor(samples: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Complex frame -> ``(2, L)`` real array with I on channel 0 and Q on channel 1."""
    s = np.asarray(samples)
    if not np.all(np.isfinite(s)):
        raise nn.NonFiniteError("signal contains non-finite samples")
    if normalize:
        s = normalize_power(s)
    return np.stack([s.real, s.imag])


def predict(model: ModelState, signal: ComplexSignal | np.ndarray, normalize: bool = True):
    """Most likely scheme and the probability vector.

    Ties go to the lowest class index (``numpy.argmax`` semantics).
    """
    samples = signal.samples if isinstance(signal, ComplexSignal) else signal
    probs = forward(model, iq_tensor(samples, normalize)[None], train=False)[0][0]
    return ModulationScheme.from_name(model.config.class_names[int(np.argmax(probs))]), probs


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"CAPSNET\0"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _pack_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    nb = name.encode()
    buf.write(struct.pack("<I", len(nb)) + nb)
    buf.write(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype(dt, copy=False).tobytes())


def save(model: ModelState, path) -> None:
    """Little-endian file: magic, version, config digest, config and provenance
    as JSON, then ``name length | name | dtype code | rank | extents | data``
    per tensor (parameters prefixed ``param:``, buffers ``buffer:``)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(model.config.digest())
    for blob in (json.dumps(model.config.to_dict(), sort_keys=True), json.dumps(model.provenance, sort_keys=True)):
        b = blob.encode()
        buf.write(struct.pack("<Q", len(b)) + b)
    tensors = [(f"param:{k}", v) for k, v in model.params.items()]
    tensors += [(f"buffer:{k}", v) for k, v in model.buffers.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _pack_tensor(buf, name, arr)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path, expected: NetworkConfig | None = None) -> ModelState:
    """Read a checkpoint written by :func:`save`; nothing is returned on any error."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a capsule-network checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest = r.take(32)
    (n,) = r.unpack("<Q")
    config = NetworkConfig.from_dict(json.loads(r.take(n)))
    if config.digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    (n,) = r.unpack("<Q")
    provenance = json.loads(r.take(n))
    if expected is not None and expected.branch_count != config.branch_count:
        raise CheckpointError(
            f"{path}: checkpoint has {config.branch_count} branches, expected {expected.branch_count}"
        )
    if expected is not None and expected.class_names != config.class_names:
        raise CheckpointError(f"{path}: class set {config.class_names} != expected {expected.class_names}")
    (count,) = r.unpack("<I")
    params, buffers = {}, {}
    for _ in range(count):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode()
        code, rank = r.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}Q")
        dt = _CODE_DTYPES[code]
        arr = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        kind, _, key = name.partition(":")
        (params if kind == "param" else buffers)[key] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    want = parameter_shapes(config)
    if set(want) != set(params):
        raise CheckpointError(f"{path}: parameter set does not match its config")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise CheckpointError(f"{path}: {k} has shape {params[k].shape}, config implies {shape}")
    params = {k: params[k] for k in want}
    return ModelState(config, params, buffers, provenance)


def with_config(model: ModelState, **changes) -> ModelState:
    return replace(model, config=replace(model.config, **changes))
