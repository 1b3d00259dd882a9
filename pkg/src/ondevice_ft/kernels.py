"""Forward and backward float32 kernels (FW, BW-IG, BW-WG) for each layer type.

Tensors are plain ``numpy.float32`` arrays in NCHW layout (``(N, F)`` for the
fully-connected layer). Every kernel reports the multiply-accumulates it
performs to the active :func:`count_macs` counters, split by phase.

Convolution is cross-correlation. Its input gradient is computed as a dense
transposed convolution: the output gradient is dilated by the stride and
correlated with the flipped kernel at input resolution, which costs
``Cin * Cout * K**2 * Hin * Win`` MACs per image.
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "MacCounter",
    "count_macs",
    "uncounted",
    "SignMask",
    "conv2d_fw",
    "conv2d_bw_ig",
    "conv2d_bw_wg",
    "conv_output_size",
    "batchnorm_fw",
    "batchnorm_bw_ig",
    "batchnorm_bw_wg",
    "relu_fw",
    "relu_bw",
    "maxpool_fw",
    "maxpool_values",
    "maxpool_bw",
    "route_mask",
    "maxpool_relu_bw",
    "fc_fw",
    "fc_bw_ig",
    "fc_bw_wg",
]

_CHECK_FINITE = bool(os.environ.get("ONDEVICE_FT_CHECK_FINITE"))


class ShapeError(ValueError):
    """Raised when kernel operands have inconsistent shapes."""


@dataclass
class MacCounter:
    fw: int = 0
    bw_ig: int = 0
    bw_wg: int = 0
    calls: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.fw + self.bw_ig + self.bw_wg

    def add(self, phase: str, kernel: str, macs: int) -> None:
        setattr(self, phase, getattr(self, phase) + int(macs))
        key = (phase, kernel)
        self.calls[key] = self.calls.get(key, 0) + int(macs)


_counters: list[MacCounter] = []


@contextmanager
def count_macs():
    """Collect MAC counts of every kernel invoked inside the block."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


@contextmanager
def uncounted():
    """Suspend every active counter (for recomputation outside the workload)."""
    saved = _counters[:]
    _counters.clear()
    try:
        yield
    finally:
        _counters[:] = saved


def _tally(phase: str, kernel: str, macs: int) -> None:
    for c in _counters:
        c.add(phase, kernel, macs)


def _checked(t: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(t)):
        raise FloatingPointError("non-finite values in kernel output")
    return t


# -- convolution ---------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: tuple[int, int, int, int]):
    """Patch matrix of an NCHW tensor.

    Rows are output pixels ``(n, oh, ow)``; columns are ``(kh, kw, c)`` so each
    of the ``k * k`` slice copies moves channel-contiguous runs.
    """
    top, bottom, left, right = pad
    n, c, h, w = x.shape
    hp, wp = h + top + bottom, w + left + right
    xp = np.zeros((n, hp, wp, c), dtype=np.float32)
    xp[:, top : top + h, left : left + w, :] = x.transpose(0, 2, 3, 1)
    oh, ow = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = np.empty((n, oh, ow, k, k, c), dtype=np.float32)
    for kh in range(k):
        for kw in range(k):
            cols[:, :, :, kh, kw, :] = xp[
                :, kh : kh + stride * (oh - 1) + 1 : stride, kw : kw + stride * (ow - 1) + 1 : stride, :
            ]
    return cols.reshape(n * oh * ow, k * k * c), oh, ow


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    """(Cout, Cin, K, K) -> (Cout, K*K*Cin), matching the patch column order."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv expects 4-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError("only square kernels are supported")
    if stride < 1:
        raise ShapeError("stride must be >= 1")


def conv2d_fw(x, weight, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation ``y = W * x + b`` with zero padding."""
    _check_conv(x, weight, stride)
    n = x.shape[0]
    cout, cin, k, _ = weight.shape
    cols, oh, ow = _im2col(x, k, stride, (padding,) * 4)
    y = cols @ _weight_matrix(weight).T
    _tally("fw", "conv", n * oh * ow * cout * cin * k * k)
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.reshape(1, cout, 1, 1)
    return _checked(np.ascontiguousarray(y, dtype=np.float32))


def conv2d_bw_ig(dy, weight, stride: int, padding: int, input_shape) -> np.ndarray:
    """Gradient w.r.t. the convolution input, as a dense transposed convolution."""
    n, cin, h, w = input_shape
    cout, _, k, _ = weight.shape
    oh, ow = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if dy.shape != (n, cout, oh, ow):
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {(n, cout, oh, ow)}")
    if stride > 1:
        dil = np.zeros((n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=dy.dtype)
        dil[:, :, ::stride, ::stride] = dy
    else:
        dil = dy
    edge = k - 1 - padding
    if edge < 0:
        raise ShapeError("padding larger than kernel - 1 is not supported")
    extra_h = (h + 2 * padding - k) % stride
    extra_w = (w + 2 * padding - k) % stride
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    cols, gh, gw = _im2col(dil, k, 1, (edge, edge + extra_h, edge, edge + extra_w))
    assert (gh, gw) == (h, w)
    dx = cols @ _weight_matrix(flipped).T
    _tally("bw_ig", "conv", n * h * w * cin * cout * k * k)
    dx = dx.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
    return _checked(np.ascontiguousarray(dx, dtype=np.float32))


def conv2d_bw_wg(x, dy, stride: int, padding: int, kernel_size: int):
    """Weight and bias gradients: correlation of ``x`` with ``dy``; channel sums of ``dy``."""
    n, cin = x.shape[:2]
    cols, oh, ow = _im2col(x, kernel_size, stride, (padding,) * 4)
    if dy.shape[0] != n or dy.shape[2:] != (oh, ow):
        raise ShapeError(f"dy shape {dy.shape} inconsistent with input {x.shape}")
    cout = dy.shape[1]
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy_rows.T @ cols).reshape(cout, kernel_size, kernel_size, cin).transpose(0, 3, 1, 2)
    _tally("bw_wg", "conv", n * oh * ow * cout * cin * kernel_size**2)
    db = dy.sum(axis=(0, 2, 3))
    return _checked(dw.astype(np.float32)), _checked(db.astype(np.float32))


# -- batch normalization (frozen statistics) ------------------------------------


def _bn_inv_std(var, eps) -> np.ndarray:
    denom = np.asarray(var, dtype=np.float32) + np.float32(eps)
    if np.any(denom <= 0):
        raise ValueError("batch-norm variance + epsilon must be positive")
    return (1.0 / np.sqrt(denom)).astype(np.float32)


def _per_channel(v, x):
    return np.asarray(v, dtype=np.float32).reshape((1, -1) + (1,) * (x.ndim - 2))


def batchnorm_normalize(x, mean, var, eps) -> np.ndarray:
    """The normalized input ``(x - mean) / sqrt(var + eps)``."""
    return (x - _per_channel(mean, x)) * _per_channel(_bn_inv_std(var, eps), x)


def batchnorm_fw(x, gamma, beta, mean, var, eps) -> np.ndarray:
    if x.shape[1] != np.size(gamma):
        raise ShapeError(f"{x.shape[1]} channels vs {np.size(gamma)} batch-norm parameters")
    scale = np.asarray(gamma, np.float32) * _bn_inv_std(var, eps)
    shift = np.asarray(beta, np.float32) - np.asarray(mean, np.float32) * scale
    y = x * _per_channel(scale, x)
    y += _per_channel(shift, x)
    _tally("fw", "batchnorm", x.size)
    return _checked(y.astype(np.float32, copy=False))


def batchnorm_bw_ig(dy, gamma, var, eps) -> np.ndarray:
    dx = dy * _per_channel(np.asarray(gamma, np.float32) * _bn_inv_std(var, eps), dy)
    _tally("bw_ig", "batchnorm", dy.size)
    return _checked(dx.astype(np.float32, copy=False))


def batchnorm_bw_wg(x, dy, mean, var, eps):
    """``(dgamma, dbeta)`` summed over batch and spatial positions."""
    axes = (0,) + tuple(range(2, dy.ndim))
    xhat = batchnorm_normalize(x, mean, var, eps)
    dgamma = (dy * xhat).sum(axis=axes)
    _tally("bw_wg", "batchnorm", dy.size)
    dbeta = dy.sum(axis=axes)
    return _checked(dgamma.astype(np.float32)), _checked(dbeta.astype(np.float32))


# -- ReLU with 1-bit sign masks -------------------------------------------------


@dataclass(frozen=True)
class SignMask:
    """Bit-packed record of which elements of a tensor were positive."""

    bits: np.ndarray
    shape: tuple

    @classmethod
    def from_bool(cls, positive: np.ndarray) -> "SignMask":
        return cls(np.packbits(positive, axis=None), tuple(positive.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.bits.nbytes

    def unpack(self) -> np.ndarray:
        return np.unpackbits(self.bits, count=self.size).reshape(self.shape).astype(bool)


def relu_fw(x: np.ndarray):
    positive = x > 0
    return np.where(positive, x, np.float32(0)), SignMask.from_bool(positive)


def relu_bw(dy: np.ndarray, mask: SignMask) -> np.ndarray:
    if tuple(dy.shape) != mask.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match mask shape {mask.shape}")
    return np.where(mask.unpack(), dy, np.float32(0))


# -- max pooling ------------------------------------------------------------------


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"pooling window {k} does not tile {h}x{w}")
    return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k
    )


def _unwindow(v: np.ndarray, k: int) -> np.ndarray:
    n, c, oh, ow, _ = v.shape
    return v.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)


def _quadrants(x: np.ndarray):
    return x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]


def _check_tiles(x: np.ndarray, k: int) -> None:
    if x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"pooling window {k} does not tile {x.shape[2]}x{x.shape[3]}")


def maxpool_fw(x: np.ndarray, k: int = 2):
    """Non-overlapping max pooling; returns the output and per-window argmax.

    Ties go to the lowest flat index inside the window.
    """
    if k != 2:
        win = _windows(x, k)
        arg = win.argmax(axis=-1).astype(np.uint8)
        return np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0], arg
    y = maxpool_values(x)
    q = _quadrants(x)
    arg = np.where(q[0] == y, 0, np.where(q[1] == y, 1, np.where(q[2] == y, 2, 3)))
    return y, arg.astype(np.uint8)


def maxpool_values(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Max pooling output only (no argmax record)."""
    if k != 2:
        return _windows(x, k).max(axis=-1)
    _check_tiles(x, k)
    q = _quadrants(x)
    return np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))


def maxpool_bw(dy: np.ndarray, argmax: np.ndarray, k: int = 2) -> np.ndarray:
    if dy.shape != argmax.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match argmax shape {argmax.shape}")
    onehot = np.arange(k * k, dtype=np.uint8) == argmax[..., None]
    return _unwindow(np.where(onehot, dy[..., None], np.float32(0)), k)


def route_mask(pre_relu: np.ndarray, k: int = 2) -> SignMask:
    """One bit per element: set where ReLU-then-pool passes the gradient through.

    For ReLU followed by max pooling, the backward pass of both is fully
    described by this mask (argmax position of each window, if positive), so
    it costs the same single bit per element as a plain sign mask.
    """
    _check_tiles(pre_relu, k)
    peak = maxpool_values(pre_relu, k)
    open_ = peak > 0  # windows whose max survives the ReLU
    hit = np.zeros(pre_relu.shape, dtype=bool)
    for idx in range(k * k):
        r, c = divmod(idx, k)
        first = open_ & (pre_relu[:, :, r::k, c::k] == peak)
        hit[:, :, r::k, c::k] = first
        open_ &= ~first
    return SignMask.from_bool(hit)


def maxpool_relu_bw(dy: np.ndarray, route: SignMask, k: int = 2) -> np.ndarray:
    """Backward of ReLU followed by max pooling, from a :func:`route_mask`."""
    n, c, oh, ow = dy.shape
    if route.shape != (n, c, oh * k, ow * k):
        raise ShapeError(f"route mask {route.shape} does not match dy {dy.shape}")
    hit = route.unpack()
    dx = np.zeros(route.shape, dtype=np.float32)
    for r in range(k):
        for col in range(k):
            sub = hit[:, :, r::k, col::k]
            dx[:, :, r::k, col::k] = np.where(sub, dy, np.float32(0))
    return dx


# -- fully connected ----------------------------------------------------------------


def fc_fw(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc input {x.shape} vs weight {weight.shape}")
    y = x @ weight.T
    _tally("fw", "fc", x.shape[0] * weight.size)
    if bias is not None:
        y = y + bias
    return _checked(y.astype(np.float32, copy=False))


def fc_bw_ig(dy: np.ndarray, weight: np.ndarray) -> np.ndarray:
    if dy.ndim != 2 or dy.shape[1] != weight.shape[0]:
        raise ShapeError(f"dy {dy.shape} vs weight {weight.shape}")
    _tally("bw_ig", "fc", dy.shape[0] * weight.size)
    return _checked((dy @ weight).astype(np.float32, copy=False))


def fc_bw_wg(x: np.ndarray, dy: np.ndarray):
    if x.shape[0] != dy.shape[0]:
        raise ShapeError(f"batch mismatch {x.shape} vs {dy.shape}")
    _tally("bw_wg", "fc", x.shape[0] * x.shape[1] * dy.shape[1])
    return _checked((dy.T @ x).astype(np.float32)), _checked(dy.sum(axis=0).astype(np.float32))
