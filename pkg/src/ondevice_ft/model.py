"""Pose-regression CNN: architecture, parameter store, forward and backward.

The reference network follows PULP-Frontnet: a 5x5 stride-2 convolution and
2x2 max pooling, then three blocks of two 3x3 convolutions (the first with
stride 2) at 32, 64 and 128 channels, every convolution followed by
batch-norm and ReLU, and a fully-connected head from 1920 features to the
four pose outputs ``(x, y, z, phi)``.

The forward pass keeps only what the backward pass of the active
:class:`Strategy` needs: layer inputs for weight gradients, batch-norm inputs
(from which ReLU signs and pooling routes are recomputed), or bit-packed sign
masks when neither is stored.
"""
from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels as K

__all__ = [
    "Strategy",
    "LayerSpec",
    "Architecture",
    "ParamStore",
    "ActivationCache",
    "StaleCacheError",
    "build_reference_architecture",
    "init_params",
    "forward",
    "backward",
    "precompute_features",
    "features_to_int8",
    "save_checkpoint",
    "load_checkpoint",
    "save_int8_checkpoint",
    "load_int8_checkpoint",
    "checkpoint_kind",
    "calibrate_batchnorm",
    "images_to_input",
]


class Strategy(str, enum.Enum):
    ALL = "all"
    BN = "bn"
    BIAS = "bias"
    FC = "fc"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | batchnorm | relu | pool | flatten | fc
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False
    eps: float = 1e-5


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple  # (C, H, W)
    layers: tuple

    def to_json(self) -> str:
        doc = {
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        doc = json.loads(text)
        return cls(tuple(doc["input_shape"]), tuple(LayerSpec(**d) for d in doc["layers"]))

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def output_size(self) -> int:
        return self.layers[-1].out_channels

    @property
    def head_index(self) -> int:
        """Index of the final fully-connected layer."""
        return max(i for i, layer in enumerate(self.layers) if layer.kind == "fc")

    def param_shapes(self) -> dict[str, tuple]:
        """Trainable tensors and batch-norm buffers, in layer order."""
        shapes: dict[str, tuple] = {}
        for layer in self.layers:
            n = layer.name
            if layer.kind == "conv":
                shapes[f"{n}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                if layer.bias:
                    shapes[f"{n}.bias"] = (layer.out_channels,)
            elif layer.kind == "batchnorm":
                for p in ("gamma", "beta", "mean", "var"):
                    shapes[f"{n}.{p}"] = (layer.out_channels,)
            elif layer.kind == "fc":
                shapes[f"{n}.weight"] = (layer.out_channels, layer.in_channels)
                shapes[f"{n}.bias"] = (layer.out_channels,)
        return shapes

    def trainable_names(self) -> list[str]:
        return [n for n in self.param_shapes() if not n.endswith((".mean", ".var"))]

    def activation_shapes(self) -> list[tuple]:
        """Per-frame input shape of every layer, plus the final output shape."""
        shape = tuple(self.input_shape)
        shapes = [shape]
        for layer in self.layers:
            if layer.kind == "conv":
                c, h, w = shape
                if c != layer.in_channels:
                    raise K.ShapeError(f"{layer.name}: expects {layer.in_channels} channels, gets {c}")
                shape = (
                    layer.out_channels,
                    K.conv_output_size(h, layer.kernel, layer.stride, layer.padding),
                    K.conv_output_size(w, layer.kernel, layer.stride, layer.padding),
                )
            elif layer.kind == "pool":
                c, h, w = shape
                shape = (c, h // layer.kernel, w // layer.kernel)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "fc":
                if shape != (layer.in_channels,):
                    raise K.ShapeError(f"{layer.name}: expects {layer.in_channels} features, gets {shape}")
                shape = (layer.out_channels,)
            shapes.append(shape)
        return shapes


def _conv_block(name: str, cin: int, cout: int, k: int, stride: int, pad: int) -> list[LayerSpec]:
    return [
        LayerSpec("conv", f"conv{name}", cin, cout, k, stride, pad),
        LayerSpec("batchnorm", f"bn{name}", cout, cout),
        LayerSpec("relu", f"relu{name}"),
    ]


def build_reference_architecture() -> Architecture:
    layers = _conv_block("1", 1, 32, 5, 2, 2)
    layers.append(LayerSpec("pool", "pool1", kernel=2, stride=2))
    for i, (cin, cout, stride) in enumerate(
        [(32, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1)], start=2
    ):
        layers += _conv_block(str(i), cin, cout, 3, stride, 1)
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("fc", "fc", 1920, 4, bias=True))
    return Architecture((1, 96, 160), tuple(layers))


def strategy_mask(arch: Architecture, strategy: Strategy | str) -> frozenset:
    """Names of the parameter tensors a strategy updates."""
    strategy = Strategy(strategy)
    names = arch.trainable_names()
    if strategy is Strategy.ALL:
        return frozenset(names)
    if strategy is Strategy.BN:
        return frozenset(n for n in names if n.endswith((".gamma", ".beta")))
    if strategy is Strategy.BIAS:
        return frozenset(n for n in names if n.endswith((".bias", ".beta")))
    head = arch.layers[arch.head_index].name
    return frozenset({f"{head}.weight", f"{head}.bias"})


class StaleCacheError(RuntimeError):
    """The activation cache no longer matches the parameters or strategy."""


@dataclass
class ParamStore:
    """Parameter tensors, matching gradient buffers and a trainability mask."""

    arch: Architecture
    tensors: dict
    grads: dict = field(default_factory=dict)
    mask: frozenset = frozenset()
    version: int = 0

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise K.ShapeError(f"parameter names do not match architecture: {sorted(missing)}")
        for name, shape in shapes.items():
            t = np.ascontiguousarray(self.tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise K.ShapeError(f"{name}: shape {t.shape}, expected {shape}")
            self.tensors[name] = t
        self.zero_grad()

    def set_strategy(self, strategy: Strategy | str | None) -> None:
        self.mask = frozenset() if strategy is None else strategy_mask(self.arch, strategy)

    def zero_grad(self) -> None:
        self.grads = {
            n: np.zeros_like(self.tensors[n]) for n in self.arch.trainable_names()
        }

    def count(self, names=None) -> int:
        names = self.mask if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.arch, {k: v.copy() for k, v in self.tensors.items()}, mask=self.mask)
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_params(arch: Architecture, seed: int = 0) -> ParamStore:
    """Kaiming-uniform (fan-in) weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            gain = 6.0 if len(shape) == 4 else 3.0
            bound = np.sqrt(gain / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif kind in ("gamma", "var"):
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return ParamStore(arch, tensors)


# -- forward / backward ---------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Tensors kept from the forward pass for the backward pass.

    ``entries`` maps a key to ``(category, value)`` where the category is
    ``"activation"`` or ``"input"`` and the value is an array or
    :class:`~ondevice_ft.kernels.SignMask`.
    """

    strategy: Strategy
    start: int
    stop: int  # earliest layer the backward pass must reach
    batch: int
    input_shape: tuple
    version: int
    entries: dict = field(default_factory=dict)

    def _bytes(self, category: str) -> int:
        return sum(v.nbytes for cat, v in self.entries.values() if cat == category)

    @property
    def activation_bytes(self) -> int:
        return self._bytes("activation")

    @property
    def activation_bytes_per_frame(self) -> float:
        return self.activation_bytes / self.batch

    def get(self, key):
        entry = self.entries.get(key)
        return None if entry is None else entry[1]


def _earliest_trainable(arch: Architecture, mask: frozenset) -> int | None:
    owners = {n.rsplit(".", 1)[0] for n in mask}
    idx = [i for i, layer in enumerate(arch.layers) if layer.name in owners]
    return min(idx) if idx else None


def _apply(layer: LayerSpec, params: ParamStore, x: np.ndarray, need_argmax: bool = False):
    """Run one layer forward; returns (output, aux) where aux is pool argmax."""
    n = layer.name
    if layer.kind == "conv":
        bias = params[f"{n}.bias"] if layer.bias else None
        return K.conv2d_fw(x, params[f"{n}.weight"], bias, layer.stride, layer.padding), None
    if layer.kind == "batchnorm":
        return K.batchnorm_fw(
            x, params[f"{n}.gamma"], params[f"{n}.beta"], params[f"{n}.mean"], params[f"{n}.var"], layer.eps
        ), None
    if layer.kind == "relu":
        return np.maximum(x, np.float32(0)), None
    if layer.kind == "pool":
        if need_argmax:
            return K.maxpool_fw(x, layer.kernel)
        return K.maxpool_values(x, layer.kernel), None
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    if layer.kind == "fc":
        return K.fc_fw(x, params[f"{n}.weight"], params[f"{n}.bias"]), None
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def forward(
    arch: Architecture,
    params: ParamStore,
    x: np.ndarray,
    strategy: Strategy | str | None = None,
    start: int = 0,
    stop_before: int | None = None,
):
    """Run layers ``start .. stop_before - 1`` on ``x``.

    Returns ``(output, cache)``; ``cache`` is None when no strategy is given
    (inference only).
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    layers = arch.layers
    stop_before = len(layers) if stop_before is None else stop_before
    expected = arch.activation_shapes()[start]
    if tuple(x.shape[1:]) != tuple(expected):
        raise K.ShapeError(f"input shape {x.shape[1:]} does not match {expected}")
    if strategy is None:
        for layer in layers[start:stop_before]:
            x, _ = _apply(layer, params, x)
        return x, None

    strategy = Strategy(strategy)
    mask = strategy_mask(arch, strategy)
    earliest = _earliest_trainable(arch, mask)
    if earliest is None or earliest < start:
        raise ValueError(f"strategy {strategy.value} trains layers before index {start}")
    cache = ActivationCache(strategy, start, earliest, x.shape[0], tuple(x.shape), params.version)
    stored_inputs = set()
    for i in range(start, stop_before):
        layer = layers[i]
        n = layer.name
        if i >= earliest:
            if layer.kind in ("conv", "fc") and f"{n}.weight" in mask:
                cat = "input" if (strategy is Strategy.FC and i == earliest) else "activation"
                cache.entries[("x", i)] = (cat, x)
                stored_inputs.add(i)
            elif layer.kind == "batchnorm" and f"{n}.gamma" in mask:
                cache.entries[("x", i)] = ("activation", x)
                stored_inputs.add(i)
            elif layer.kind == "relu" and i > earliest and (i - 1) not in stored_inputs:
                pooled = i + 1 < len(layers) and layers[i + 1].kind == "pool"
                sign = K.route_mask(x, layers[i + 1].kernel) if pooled else K.SignMask.from_bool(x > 0)
                cache.entries[("mask", i)] = ("activation", sign)
        keep_argmax = layer.kind == "pool" and i > earliest and layers[i - 1].kind != "relu"
        x, aux = _apply(layer, params, x, keep_argmax)
        if keep_argmax:
            cache.entries[("argmax", i)] = ("activation", aux)
    return x, cache


def _relu_pool_backward(arch, params, cache, i: int, dy: np.ndarray, relu_input_shape):
    """Backward through relu at index i (and a following pool, if any)."""
    layers = arch.layers
    pooled = i + 1 < len(layers) and layers[i + 1].kind == "pool"
    stored = cache.get(("mask", i))
    if stored is None:
        prev_x = cache.get(("x", i - 1))
        if prev_x is None:
            raise StaleCacheError(f"no data to recover the mask of layer {layers[i].name}")
        with K.uncounted():
            pre, _ = _apply(layers[i - 1], params, prev_x)
        stored = K.route_mask(pre, layers[i + 1].kernel) if pooled else K.SignMask.from_bool(pre > 0)
    if stored.shape != tuple(relu_input_shape):
        raise StaleCacheError("cached mask shape does not match the batch")
    if pooled:
        return K.maxpool_relu_bw(dy, stored, layers[i + 1].kernel)
    return K.relu_bw(dy, stored)


def backward(arch: Architecture, params: ParamStore, cache: ActivationCache, dout: np.ndarray) -> None:
    """Accumulate gradients of the cached strategy's tensors into ``params.grads``.

    The input-gradient chain stops at the earliest trainable layer.
    """
    if cache.version != params.version:
        raise StaleCacheError("parameters changed since the forward pass")
    mask = strategy_mask(arch, cache.strategy)
    if params.mask and params.mask != mask:
        raise StaleCacheError("cache strategy differs from the parameter store mask")
    dout = np.asarray(dout, dtype=np.float32)
    if dout.shape != (cache.batch, arch.output_size):
        raise K.ShapeError(f"output gradient shape {dout.shape}, expected {(cache.batch, arch.output_size)}")
    layers = arch.layers
    shapes = arch.activation_shapes()
    g = params.grads
    dy = dout
    i = len(layers) - 1
    while i >= cache.stop:
        layer = layers[i]
        n = layer.name
        in_shape = (cache.batch,) + tuple(shapes[i])
        need_ig = i > cache.stop
        if layer.kind == "fc":
            if f"{n}.weight" in mask:
                dw, db = K.fc_bw_wg(cache.get(("x", i)), dy)
                g[f"{n}.weight"] += dw
            else:
                db = dy.sum(axis=0)
            if f"{n}.bias" in mask:
                g[f"{n}.bias"] += db
            if need_ig:
                dy = K.fc_bw_ig(dy, params[f"{n}.weight"])
        elif layer.kind == "flatten":
            dy = dy.reshape(in_shape)
        elif layer.kind == "relu":
            dy = _relu_pool_backward(arch, params, cache, i, dy, in_shape)
        elif layer.kind == "pool":
            # relu + pool are handled together at the relu index
            if layers[i - 1].kind != "relu":
                dy = K.maxpool_bw(dy, cache.get(("argmax", i)), layer.kernel)
            else:
                i -= 1
                dy = _relu_pool_backward(arch, params, cache, i, dy, (cache.batch,) + tuple(shapes[i]))
        elif layer.kind == "batchnorm":
            args = (params[f"{n}.mean"], params[f"{n}.var"], layer.eps)
            if f"{n}.gamma" in mask:
                dgamma, dbeta = K.batchnorm_bw_wg(cache.get(("x", i)), dy, *args)
                g[f"{n}.gamma"] += dgamma
            else:
                dbeta = dy.sum(axis=(0, 2, 3)) if dy.ndim == 4 else dy.sum(axis=0)
            if f"{n}.beta" in mask:
                g[f"{n}.beta"] += dbeta
            if need_ig:
                dy = K.batchnorm_bw_ig(dy, params[f"{n}.gamma"], params[f"{n}.var"], layer.eps)
        elif layer.kind == "conv":
            if f"{n}.weight" in mask:
                dw, db = K.conv2d_bw_wg(cache.get(("x", i)), dy, layer.stride, layer.padding, layer.kernel)
                g[f"{n}.weight"] += dw
            else:
                db = dy.sum(axis=(0, 2, 3))
            if layer.bias and f"{n}.bias" in mask:
                g[f"{n}.bias"] += db
            if need_ig:
                dy = K.conv2d_bw_ig(dy, params[f"{n}.weight"], layer.stride, layer.padding, in_shape)
        i -= 1


def images_to_input(images) -> np.ndarray:
    """u8 ``(n, H, W)`` frames to float32 ``(n, 1, H, W)`` in [0, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[:, None]
    return x.astype(np.float32) * np.float32(1 / 255)


# -- fc-strategy feature precomputation ---------------------------------------------------------


def precompute_features(arch: Architecture, params: ParamStore, images: np.ndarray, batch: int = 64):
    """Run the frozen backbone (every layer before the head) in float32."""
    head = arch.head_index
    out = []
    for s in range(0, len(images), batch):
        f, _ = forward(arch, params, images[s : s + batch], stop_before=head)
        out.append(f)
    return np.concatenate(out, axis=0)


def features_to_int8(features: np.ndarray, qparams=None):
    """Quantize backbone features to int8 storage; returns ``(codes, qparams)``."""
    from .quantization import calibrate, quantize

    qparams = calibrate(features) if qparams is None else qparams
    return quantize(features, qparams), qparams


# -- initialization of frozen batch-norm statistics ---------------------------------------------


def calibrate_batchnorm(arch: Architecture, params: ParamStore, images: np.ndarray) -> None:
    """Set each batch-norm layer's frozen mean/var from a batch of images, in order."""
    x = np.ascontiguousarray(images, dtype=np.float32)
    for layer in arch.layers:
        if layer.kind == "batchnorm":
            axes = (0, 2, 3) if x.ndim == 4 else (0,)
            params.tensors[f"{layer.name}.mean"] = x.mean(axis=axes).astype(np.float32)
            params.tensors[f"{layer.name}.var"] = x.var(axis=axes).astype(np.float32)
        x, _ = _apply(layer, params, x)


# -- checkpoint files ---------------------------------------------------------------------------

_MAGIC = b"TTCK"
_VERSION = 1
_KIND_F32 = 0
_KIND_INT8 = 1


def _write_header(fh, arch: Architecture, kind: int) -> None:
    desc = arch.to_json().encode("utf-8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<HBI", _VERSION, kind, len(desc)))
    fh.write(desc)


def _read_header(fh):
    if fh.read(4) != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, kind, n = struct.unpack("<HBI", fh.read(7))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return Architecture.from_json(fh.read(n).decode("utf-8")), kind


def checkpoint_kind(path) -> str:
    """``"f32"`` or ``"int8"``."""
    with open(path, "rb") as fh:
        _, kind = _read_header(fh)
    return {_KIND_F32: "f32", _KIND_INT8: "int8"}.get(kind, "unknown")


def save_checkpoint(path, params: ParamStore) -> None:
    buf = io.BytesIO()
    _write_header(buf, params.arch, _KIND_F32)
    for name in params.arch.param_shapes():
        buf.write(params.tensors[name].astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        arch, kind = _read_header(fh)
        if kind != _KIND_F32:
            raise ValueError("checkpoint is int8; use load_int8_checkpoint")
        tensors = {}
        for name, shape in arch.param_shapes().items():
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return ParamStore(arch, tensors)


def save_int8_checkpoint(path, arch: Architecture, codes: dict, qparams: dict, floats: dict) -> None:
    """Write int8 tensors (with their scale and zero point) and float32 buffers."""
    buf = io.BytesIO()
    _write_header(buf, arch, _KIND_INT8)
    for name in arch.param_shapes():
        if name in codes:
            q = qparams[name]
            buf.write(struct.pack("<Bfi", _KIND_INT8, q.scale, q.zero_point))
            buf.write(np.asarray(codes[name], dtype=np.int8).tobytes())
        else:
            buf.write(struct.pack("<B", _KIND_F32))
            buf.write(np.asarray(floats[name], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_int8_checkpoint(path):
    """Returns ``(arch, codes, qparams, floats)``."""
    from .quantization import QuantParams

    codes, qparams, floats = {}, {}, {}
    with open(path, "rb") as fh:
        arch, kind = _read_header(fh)
        if kind != _KIND_INT8:
            raise ValueError("checkpoint is float32; use load_checkpoint")
        for name, shape in arch.param_shapes().items():
            count = int(np.prod(shape))
            (tag,) = struct.unpack("<B", fh.read(1))
            if tag == _KIND_INT8:
                scale, zp = struct.unpack("<fi", fh.read(8))
                qparams[name] = QuantParams(scale, zp)
                codes[name] = np.frombuffer(fh.read(count), dtype=np.int8).reshape(shape).copy()
            else:
                floats[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return arch, codes, qparams, floats
