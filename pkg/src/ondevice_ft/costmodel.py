"""Analytic per-frame memory and MAC accounting for each sparse-update strategy.

All figures are per frame. Memory is what one training step must keep:
the stored input, the activations kept for the backward pass and the
weight-gradient buffers. MACs are per frame per training step, split into
forward, backward input-gradient and backward weight-gradient phases.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import kernels as K
from . import model as M
from .model import Architecture, Strategy, strategy_mask

__all__ = [
    "CostReport",
    "count_params",
    "memory_per_frame",
    "macs_per_step",
    "cost_report",
    "cost_table",
    "empirical_mac_counter",
    "table_to_tsv",
    "table_to_json",
]

KIB = 1024
F32 = 4


@dataclass(frozen=True)
class CostReport:
    strategy: str
    params_k: float
    input_bytes: int
    activation_bytes: int
    weight_grad_bytes: int
    total_bytes: int
    fw_mmac: float
    bw_ig_mmac: float
    bw_wg_mmac: float
    total_mmac: float

    @property
    def total_kib(self) -> float:
        return self.total_bytes / KIB


def count_params(arch: Architecture, strategy: Strategy | str) -> int:
    shapes = arch.param_shapes()
    return int(sum(np.prod(shapes[n]) for n in strategy_mask(arch, strategy)))


def _earliest(arch: Architecture, mask) -> int:
    owners = {n.rsplit(".", 1)[0] for n in mask}
    return min(i for i, layer in enumerate(arch.layers) if layer.name in owners)


def memory_per_frame(arch: Architecture, strategy: Strategy | str) -> dict:
    """Bytes of ``input``, ``activation`` and ``weight_grad`` storage per frame.

    The input is the u8 image, or the u8 backbone features for ``fc``.
    Activations are what the backward pass reads: f32 layer inputs of
    trained convolution/fc weights and trained batch-norm scales, else
    1-bit ReLU signs (fused with the following max-pool route when there is
    one) and u8 pooling indices where no stored tensor lets them be recomputed.
    """
    strategy = Strategy(strategy)
    mask = strategy_mask(arch, strategy)
    shapes = arch.activation_shapes()
    layers = arch.layers
    earliest = _earliest(arch, mask)
    size = lambda i: int(np.prod(shapes[i]))  # noqa: E731

    activation = 0
    stored = set()
    for i in range(earliest, len(layers)):
        layer = layers[i]
        n = layer.name
        if layer.kind in ("conv", "fc") and f"{n}.weight" in mask:
            stored.add(i)
            if not (strategy is Strategy.FC and i == earliest):
                activation += F32 * size(i)
        elif layer.kind == "batchnorm" and f"{n}.gamma" in mask:
            stored.add(i)
            activation += F32 * size(i)
        elif layer.kind == "relu" and i > earliest and (i - 1) not in stored:
            activation += -(-size(i) // 8)
        elif layer.kind == "pool" and i > earliest and layers[i - 1].kind != "relu":
            activation += size(i + 1)
    if strategy is Strategy.FC:
        input_bytes = size(arch.head_index)
    else:
        input_bytes = size(0)
    return {
        "input": input_bytes,
        "activation": activation,
        "weight_grad": F32 * count_params(arch, strategy),
    }


def _layer_macs(layer, in_shape, out_shape) -> tuple[int, int]:
    """(forward MACs, input-gradient MACs) of one layer for one frame."""
    if layer.kind == "conv":
        k2 = layer.kernel**2 * layer.in_channels * layer.out_channels
        return k2 * out_shape[1] * out_shape[2], k2 * in_shape[1] * in_shape[2]
    if layer.kind == "batchnorm":
        n = int(np.prod(in_shape))
        return n, n
    if layer.kind == "fc":
        n = layer.in_channels * layer.out_channels
        return n, n
    return 0, 0


def macs_per_step(arch: Architecture, strategy: Strategy | str) -> dict:
    """MACs per frame per step: ``fw``, ``bw_ig`` and ``bw_wg``.

    The input-gradient chain runs from the output down to (not into) the
    earliest trained layer. Weight gradients cost one forward-equivalent
    pass over each trained weight tensor; bias-only updates are free.
    """
    strategy = Strategy(strategy)
    mask = strategy_mask(arch, strategy)
    shapes = arch.activation_shapes()
    earliest = _earliest(arch, mask)
    first = arch.head_index if strategy is Strategy.FC else 0
    fw = ig = wg = 0
    for i, layer in enumerate(arch.layers):
        f, g = _layer_macs(layer, shapes[i], shapes[i + 1])
        if i >= first:
            fw += f
        if i > earliest:
            ig += g
        if layer.kind in ("conv", "fc") and f"{layer.name}.weight" in mask:
            wg += f
        elif layer.kind == "batchnorm" and f"{layer.name}.gamma" in mask:
            wg += f
    return {"fw": fw, "bw_ig": ig, "bw_wg": wg}


def cost_report(arch: Architecture, strategy: Strategy | str) -> CostReport:
    strategy = Strategy(strategy)
    mem = memory_per_frame(arch, strategy)
    macs = macs_per_step(arch, strategy)
    return CostReport(
        strategy=strategy.value,
        params_k=count_params(arch, strategy) / 1000,
        input_bytes=mem["input"],
        activation_bytes=mem["activation"],
        weight_grad_bytes=mem["weight_grad"],
        total_bytes=sum(mem.values()),
        fw_mmac=macs["fw"] / 1e6,
        bw_ig_mmac=macs["bw_ig"] / 1e6,
        bw_wg_mmac=macs["bw_wg"] / 1e6,
        total_mmac=sum(macs.values()) / 1e6,
    )


def cost_table(arch: Architecture | None = None, strategies=tuple(Strategy)) -> list[CostReport]:
    arch = arch or M.build_reference_architecture()
    return [cost_report(arch, s) for s in strategies]


def empirical_mac_counter(
    arch: Architecture, strategy: Strategy | str | None = None, batch: int = 1, seed: int = 0
) -> K.MacCounter:
    """Run one instrumented step on random data and return the measured MACs.

    Counts are totals over ``batch`` frames. With ``strategy=None`` only the
    inference forward pass runs. The ``fc`` strategy starts from features.
    """
    rng = np.random.default_rng(seed)
    params = M.init_params(arch, seed)
    start = arch.head_index if strategy is not None and Strategy(strategy) is Strategy.FC else 0
    shape = arch.activation_shapes()[start]
    x = rng.standard_normal((batch, *shape)).astype(np.float32)
    with K.count_macs() as counter:
        out, cache = M.forward(arch, params, x, strategy, start=start)
        if strategy is not None:
            params.set_strategy(strategy)
            M.backward(arch, params, cache, np.ones_like(out))
    return counter


_COLUMNS = [f.name for f in fields(CostReport)]


def table_to_tsv(rows: list[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(_COLUMNS + ["total_kib"])
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in _COLUMNS] + [_fmt(r.total_kib)])
    return buf.getvalue()


def table_to_json(rows: list[CostReport]) -> str:
    return json.dumps([{**asdict(r), "total_kib": r.total_kib} for r in rows], indent=2)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)
