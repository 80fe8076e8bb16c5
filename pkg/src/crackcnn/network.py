"""Network assembly, shape inference, parameter counting and checkpoints.

The layer stack is fixed::

    Input[3,228,228] -> C1(16, 3x3/1) -> ReLU -> [LRN] -> P1(3x3/2)
                     -> C2(32, 3x3/1) -> ReLU -> [LRN] -> P2(3x3/2)
                     -> Flatten -> FC1(128) -> ReLU -> FC2(T) -> Softmax

All convolutions and pools use SAME padding. Only the number of classes,
the LRN switch and (for tests) the input size vary.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from crackcnn import layers as L
from crackcnn.tensor import DTYPE, rng_uniform

MAGIC = b"CRKM"
FORMAT_VERSION = 1

PARAM_NAMES = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
)
CONV_PARAMS = PARAM_NAMES[:4]
HEAD_PARAMS = ("fc2.weight", "fc2.bias")


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or inconsistent checkpoint files."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # Input, Conv, Pool, Relu, Lrn, Flatten, Fc, Softmax
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    filters: int | None = None
    kernel: tuple[int, int] | None = None  # (F_x, F_y)
    stride: tuple[int, int] | None = None  # (S_x, S_y)
    params: int = 0


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 2
    lrn_enabled: bool = True
    input_shape: tuple[int, int, int] = (3, 228, 228)
    conv_channels: tuple[int, int] = (16, 32)
    hidden: int = 128
    lrn: L.LrnParams = L.LrnParams()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"bad input shape {self.input_shape}")

    def layer_specs(self) -> list[LayerSpec]:
        """Full ordered layer stack with inferred shapes; shape chaining is asserted."""
        c, h, w = self.input_shape
        specs = [LayerSpec("Input", "Input", (c, h, w), (c, h, w))]
        for i, k in enumerate(self.conv_channels, start=1):
            specs.append(
                LayerSpec(f"C{i}", "Conv", (c, h, w), (k, h, w), filters=k, kernel=(3, 3), stride=(1, 1), params=k * c * 9 + k)
            )
            c = k
            specs.append(LayerSpec(f"ReLU{i}", "Relu", (c, h, w), (c, h, w)))
            if self.lrn_enabled:
                specs.append(LayerSpec(f"LRN{i}", "Lrn", (c, h, w), (c, h, w)))
            ho, _, _ = L.same_pad_geometry(h, 3, 2)
            wo, _, _ = L.same_pad_geometry(w, 3, 2)
            specs.append(LayerSpec(f"P{i}", "Pool", (c, h, w), (c, ho, wo), kernel=(3, 3), stride=(2, 2)))
            h, w = ho, wo
        flat = c * h * w
        specs.append(LayerSpec("Flatten", "Flatten", (c, h, w), (flat,)))
        specs.append(LayerSpec("FC1", "Fc", (flat,), (self.hidden,), params=flat * self.hidden + self.hidden))
        specs.append(LayerSpec("ReLU3", "Relu", (self.hidden,), (self.hidden,)))
        t = self.num_classes
        specs.append(LayerSpec("FC2", "Fc", (self.hidden,), (t,), params=self.hidden * t + t))
        specs.append(LayerSpec("Softmax", "Softmax", (t,), (t,)))
        for a, b in zip(specs, specs[1:]):
            assert a.out_shape == b.in_shape, f"{a.name} -> {b.name} shape break"
        return specs

    @property
    def flat_features(self) -> int:
        return next(s for s in self.layer_specs() if s.kind == "Flatten").out_shape[0]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.input_shape[0]
        k1, k2 = self.conv_channels
        return {
            "conv1.weight": (k1, c, 3, 3),
            "conv1.bias": (k1,),
            "conv2.weight": (k2, k1, 3, 3),
            "conv2.bias": (k2,),
            "fc1.weight": (self.hidden, self.flat_features),
            "fc1.bias": (self.hidden,),
            "fc2.weight": (self.num_classes, self.hidden),
            "fc2.bias": (self.num_classes,),
        }


def _glorot(rng, shape) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in, fan_out = shape[1], shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng_uniform(rng, -bound, bound, shape)


def init_params(config: NetworkConfig, rng: np.random.Generator, names=PARAM_NAMES) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases, drawn in ``PARAM_NAMES`` order."""
    shapes = config.param_shapes()
    out = {}
    for name in names:
        shape = shapes[name]
        out[name] = np.zeros(shape, DTYPE) if name.endswith(".bias") else _glorot(rng, shape)
    return out


class Network:
    """The crack-detection CNN with its parameters.

    ``forward(x, train=True)`` keeps the activations needed by ``backward``.
    Parameters are stored by name in ``params`` (see ``PARAM_NAMES``).
    """

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        shapes = config.param_shapes()
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name in PARAM_NAMES:
            if params[name].shape != shapes[name]:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shapes[name]}")
        self.config = config
        self.params = {name: params[name] for name in PARAM_NAMES}
        self._cache = None

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x: np.ndarray, train: bool = False, trace: list | None = None):
        """Return ``(logits, probabilities)`` for a batch ``[N, C, H, W]``.

        If ``trace`` is a list, ``(layer name, output shape)`` pairs are appended.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
            raise ValueError(f"expected input [N, {', '.join(map(str, cfg.input_shape))}], got {list(x.shape)}")
        p = self.params
        caches = {}

        def note(name, a):
            if trace is not None:
                trace.append((name, tuple(a.shape[1:])))

        note("Input", x)
        h = x
        for i in (1, 2):
            conv = L.ConvParams(p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            h, caches[f"conv{i}"] = L.conv2d_forward(h, conv)
            note(f"C{i}", h)
            caches[f"relu{i}"] = h
            h = L.relu_forward(h)
            if cfg.lrn_enabled:
                h, caches[f"lrn{i}"] = L.lrn_forward(h, cfg.lrn)
            h, caches[f"pool{i}"] = L.maxpool_forward(h, 3, 2, need_argmax=train)
            note(f"P{i}", h)
        pooled_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        note("Flatten", h)
        h, caches["fc1"] = L.fc_forward(h, L.FcParams(p["fc1.weight"], p["fc1.bias"]))
        note("FC1", h)
        caches["relu3"] = h
        h = L.relu_forward(h)
        logits, caches["fc2"] = L.fc_forward(h, L.FcParams(p["fc2.weight"], p["fc2.bias"]))
        note("FC2", logits)
        probs = L.softmax(logits)
        if train:
            caches["pooled_shape"] = pooled_shape
            self._cache = caches
        else:
            self._cache = None
        return logits, probs

    def backward(self, dlogits: np.ndarray, skip: frozenset[str] | set[str] = frozenset()) -> dict[str, np.ndarray]:
        """Gradients of every parameter not in ``skip`` given ``dLoss/dlogits``.

        Work below the lowest trainable layer is not done at all.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(x, train=True)")
        c = self._cache
        grads = {}
        need = [n for n in PARAM_NAMES if n not in skip]
        lowest = min((PARAM_NAMES.index(n) for n in need), default=len(PARAM_NAMES))

        dh, dw, db = L.fc_backward(dlogits, c["fc2"], need_dx=lowest < 6)
        grads["fc2.weight"], grads["fc2.bias"] = dw, db
        if lowest < 6:
            dh = L.relu_backward(c["relu3"], dh)
            dh, dw, db = L.fc_backward(dh, c["fc1"], need_dx=lowest < 4)
            grads["fc1.weight"], grads["fc1.bias"] = dw, db
        if lowest < 4:
            dh = dh.reshape(c["pooled_shape"])
            for i in (2, 1):
                dh = L.maxpool_backward(dh, c[f"pool{i}"])
                if self.config.lrn_enabled:
                    dh = L.lrn_backward(dh, c[f"lrn{i}"])
                dh = L.relu_backward(c[f"relu{i}"], dh)
                dh, dw, db = L.conv2d_backward(dh, c[f"conv{i}"], need_dx=i == 2 and lowest < 2)
                grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = dw, db
                if i == 2 and lowest >= 2:
                    break
        return {n: grads[n] for n in need}

    def predict_proba(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size])[1] for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def build_network(num_classes: int, lrn_enabled: bool = True, rng: np.random.Generator | None = None, **config_kw) -> Network:
    """Build and initialize the network; ``config_kw`` is passed to ``NetworkConfig``."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if rng is None:
        from crackcnn.tensor import make_rng

        rng = make_rng(0)
    config = NetworkConfig(num_classes=num_classes, lrn_enabled=lrn_enabled, **config_kw)
    return Network(config, init_params(config, rng))


def count_params(net: Network | NetworkConfig) -> tuple[list[LayerSpec], int]:
    """Rows in the order Input, C1, P1, C2, P2, FC1, FC2 and the total."""
    config = net.config if isinstance(net, Network) else net
    rows = [s for s in config.layer_specs() if s.kind in ("Input", "Conv", "Pool", "Fc")]
    total = sum(s.params for s in rows)
    if isinstance(net, Network):
        assert total == sum(v.size for v in net.params.values())
    return rows, total


def format_param_table(net: Network | NetworkConfig) -> str:
    rows, total = count_params(net)

    def vol(shape):
        return "x".join(str(d) for d in shape)

    lines = [f"{'layer':<6} {'input':>12} {'filter':>8} {'stride':>7} {'output':>12} {'params':>12}"]
    for s in rows:
        filt = "-"
        if s.kind == "Conv":
            filt = f"{s.filters}@{s.kernel[0]}x{s.kernel[1]}"
        elif s.kind == "Pool":
            filt = f"{s.kernel[0]}x{s.kernel[1]}"
        stride = f"{s.stride[0]}x{s.stride[1]}" if s.stride else "-"
        lines.append(f"{s.name:<6} {vol(s.in_shape):>12} {filt:>8} {stride:>7} {vol(s.out_shape):>12} {s.params:>12,}")
    lines.append(f"{'total':<6} {'':>12} {'':>8} {'':>7} {'':>12} {total:>12,}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    network: Network
    class_labels: list[str]
    step: int = 0
    seed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.class_labels) != self.network.num_classes:
            raise ValueError(f"{len(self.class_labels)} class labels for a {self.network.num_classes}-class network")


def default_labels(num_classes: int) -> list[str]:
    return [f"class{i}" for i in range(num_classes)]


def swap_head(
    ckpt: Checkpoint, new_num_classes: int, rng: np.random.Generator, class_labels: list[str] | None = None
) -> Checkpoint:
    """Copy every parameter except FC2, which is freshly initialized for ``new_num_classes``."""
    if new_num_classes < 2:
        raise ValueError(f"new_num_classes must be >= 2, got {new_num_classes}")
    config = replace(ckpt.network.config, num_classes=new_num_classes)
    params = {k: v.copy() for k, v in ckpt.network.params.items() if k not in HEAD_PARAMS}
    params.update(init_params(config, rng, HEAD_PARAMS))
    labels = list(class_labels) if class_labels is not None else default_labels(new_num_classes)
    info = dict(ckpt.info)
    info["base_step"] = ckpt.step
    info["base_labels"] = list(ckpt.class_labels)
    return Checkpoint(Network(config, params), labels, step=0, seed=ckpt.seed, info=info)


def _metadata(ckpt: Checkpoint) -> dict:
    cfg = ckpt.network.config
    return {
        "num_classes": cfg.num_classes,
        "input_shape": list(cfg.input_shape),
        "conv_channels": list(cfg.conv_channels),
        "hidden": cfg.hidden,
        "lrn_enabled": cfg.lrn_enabled,
        "lrn": {"depth_radius": cfg.lrn.depth_radius, "bias": cfg.lrn.bias, "alpha": cfg.lrn.alpha, "beta": cfg.lrn.beta},
        "class_labels": list(ckpt.class_labels),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "tensors": list(PARAM_NAMES),
        "info": ckpt.info,
    }


def write_records(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Magic, u32 version, u32-length JSON header, then one record per tensor.

    A record is u32 name length, UTF-8 name, u32 ndims, u32 dims, and the
    raw little-endian float32 data. All integers are little-endian.
    """
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for name, t in tensors.items():
        bname = name.encode("utf-8")
        parts.append(struct.pack("<I", len(bname)) + bname)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_records(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"corrupt checkpoint {path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != magic:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic (expected {magic!r})")
    version, hlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    try:
        meta = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: bad header ({e})") from e
    tensors = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<I", take(4))
        if not 1 <= ndim <= 4:
            raise CheckpointError(f"corrupt checkpoint {path}: tensor {name!r} has {ndim} dims")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = math.prod(dims)
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(DTYPE).reshape(dims)
        tensors[name] = data
    expected = meta.get("tensors", [])
    if list(tensors) != list(expected):
        raise CheckpointError(f"corrupt checkpoint {path}: tensors {list(tensors)} do not match header {expected}")
    return meta, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    write_records(path, MAGIC, _metadata(ckpt), ckpt.network.params)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_records(path, MAGIC)
    try:
        lrn = L.LrnParams(**meta["lrn"])
        config = NetworkConfig(
            num_classes=int(meta["num_classes"]),
            lrn_enabled=bool(meta["lrn_enabled"]),
            input_shape=tuple(meta["input_shape"]),
            conv_channels=tuple(meta["conv_channels"]),
            hidden=int(meta["hidden"]),
            lrn=lrn,
        )
        net = Network(config, tensors)
        return Checkpoint(net, list(meta["class_labels"]), int(meta["step"]), int(meta["seed"]), dict(meta.get("info", {})))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
