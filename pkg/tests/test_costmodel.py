import json

import numpy as np
import pytest

from ondevice_ft import costmodel as C
from ondevice_ft import model as M
from ondevice_ft.model import Strategy

from oracles import matches_published

# published per-frame figures: params [k], memory [kB], MMAC per step
PUBLISHED = {
    "all": (304.4, 2073.9, 53.1),
    "bn": (1.0, 603.8, 38.8),
    "bias": (0.5, 17.7, 38.7),
    "fc": (7.7, 31.9, 0.02),
}


@pytest.fixture(scope="module")
def arch():
    return M.build_reference_architecture()


@pytest.fixture(scope="module")
def table(arch):
    return {r.strategy: r for r in C.cost_table(arch)}


@pytest.mark.parametrize("strategy", list(PUBLISHED))
def test_params_within_2_percent(table, strategy):
    assert matches_published(table[strategy].params_k, PUBLISHED[strategy][0], 0.02, 1)


@pytest.mark.parametrize(
    "strategy",
    ["all", "bn", pytest.param("bias", marks=pytest.mark.xfail(strict=True, reason="published bias memory is not reproducible")), "fc"],
)
def test_memory_within_10_percent(table, strategy):
    assert matches_published(table[strategy].total_kib, PUBLISHED[strategy][1], 0.10, 1)


@pytest.mark.parametrize("strategy", list(PUBLISHED))
def test_macs_within_15_percent(table, strategy):
    decimals = 2 if strategy == "fc" else 1
    assert matches_published(table[strategy].total_mmac, PUBLISHED[strategy][2], 0.15, decimals)


def test_exact_counts(arch, table):
    assert C.count_params(arch, "all") == 304_356
    assert C.count_params(arch, "fc") == 7684
    assert C.count_params(arch, "bn") == 960
    assert C.count_params(arch, "bias") == 484
    assert table["all"].activation_bytes / 1024 == pytest.approx(870.0, rel=0.10)
    assert table["fc"].input_bytes == 1920 and table["fc"].weight_grad_bytes == 4 * 7684


def test_param_ordering(table):
    p = {k: r.params_k for k, r in table.items()}
    assert p["bias"] < p["bn"] < p["fc"] < p["all"]


def test_step_to_forward_ratio(table):
    r = table["all"]
    assert r.total_mmac / r.fw_mmac == pytest.approx(3.7, abs=0.3)
    assert r.fw_mmac == pytest.approx(14.3, rel=0.05)


def test_activation_special_cases(arch, table):
    assert table["fc"].activation_bytes == 0
    shapes = arch.activation_shapes()
    relu = [int(np.prod(shapes[i])) for i, layer in enumerate(arch.layers) if layer.kind == "relu"]
    assert table["bias"].activation_bytes == sum(-(-n // 8) for n in relu)


def test_fc_head_forward_is_7680(arch):
    assert C.macs_per_step(arch, "fc")["fw"] == 7680


@pytest.mark.parametrize("strategy", [None] + list(Strategy))
def test_analytic_matches_instrumented(arch, strategy):
    c = C.empirical_mac_counter(arch, strategy, batch=2)
    if strategy is None:
        assert c.fw == 2 * C.macs_per_step(arch, "all")["fw"]
        return
    m = C.macs_per_step(arch, strategy)
    assert (c.fw, c.bw_ig, c.bw_wg) == (2 * m["fw"], 2 * m["bw_ig"], 2 * m["bw_wg"])


def test_tsv_and_json_agree(table):
    rows = list(table.values())
    lines = C.table_to_tsv(rows).strip().split("\n")
    header = lines[0].split("\t")
    parsed = json.loads(C.table_to_json(rows))
    assert len(lines) == 5 and len(parsed) == 4
    for line, obj in zip(lines[1:], parsed):
        for key, cell in zip(header, line.split("\t")):
            assert str(obj[key]) == cell if isinstance(obj[key], str) else float(cell) == obj[key]
