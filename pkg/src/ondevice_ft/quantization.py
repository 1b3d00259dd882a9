"""Per-tensor int8 quantization around float fine-tuning.

Deployed weights are int8; fine-tuning dequantizes them, trains in float32,
then quantizes again with the *original* scale and zero point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantParams",
    "quantize",
    "dequantize",
    "calibrate",
    "quantize_params",
    "dequantize_params",
    "requantize_after_finetune",
    "RequantReport",
]

QMIN, QMAX = -128, 127


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    bit_width: int = 8

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside the int8 range")
        if self.bit_width != 8:
            raise ValueError("only 8-bit quantization is supported")
        object.__setattr__(self, "scale", float(np.float32(self.scale)))


def quantize(t, q: QuantParams) -> np.ndarray:
    """``clamp(round_half_even(t / scale) + zero_point)`` as int8."""
    scaled = np.asarray(t, dtype=np.float64) / q.scale
    codes = np.rint(scaled) + q.zero_point
    return np.clip(codes, QMIN, QMAX).astype(np.int8)


def dequantize(codes, q: QuantParams) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float32) - np.float32(q.zero_point)) * np.float32(q.scale)


def calibrate(t) -> QuantParams:
    """Symmetric min/max calibration; an all-zero tensor gets scale 1."""
    t = np.asarray(t, dtype=np.float32)
    if t.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    peak = float(np.max(np.abs(t)))
    return QuantParams(peak / 127.0 if peak > 0 else 1.0, 0)


def quantize_params(params, names=None):
    """Calibrate and quantize the trainable tensors of a ParamStore.

    Returns ``(codes, qparams)`` keyed by tensor name. Batch-norm running
    statistics stay float32 and are not included.
    """
    names = params.arch.trainable_names() if names is None else names
    qparams = {n: calibrate(params.tensors[n]) for n in names}
    codes = {n: quantize(params.tensors[n], qparams[n]) for n in names}
    return codes, qparams


def dequantize_params(arch, codes: dict, qparams: dict, floats: dict):
    """Build a float32 ParamStore from int8 codes plus float buffers."""
    from .model import ParamStore

    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name in codes:
            tensors[name] = dequantize(codes[name], qparams[name]).reshape(shape)
        else:
            tensors[name] = np.asarray(floats[name], dtype=np.float32).reshape(shape)
    return ParamStore(arch, tensors)


@dataclass
class RequantReport:
    codes: dict
    qparams: dict
    saturation: dict  # tensor name -> fraction of elements clamped

    @property
    def saturated_tensors(self) -> list[str]:
        return [n for n, f in self.saturation.items() if f > 0]


def requantize_after_finetune(params, original_qparams: dict) -> RequantReport:
    """Quantize fine-tuned tensors with the unchanged pre-fine-tuning parameters."""
    codes, saturation = {}, {}
    for name, q in original_qparams.items():
        t = params.tensors[name]
        scaled = np.rint(t.astype(np.float64) / q.scale) + q.zero_point
        saturation[name] = float(np.mean((scaled < QMIN) | (scaled > QMAX)))
        codes[name] = quantize(t, q)
    return RequantReport(codes, dict(original_qparams), saturation)
