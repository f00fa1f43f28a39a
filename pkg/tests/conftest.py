import math

from kvsim.cost_model import HardwareSpec, ModelSpec
from kvsim.kv_manager import activation_reserve, pool_size_from_hardware, kv_bytes_per_token_layer

TINY = ModelSpec("tiny", n_layers=8, n_heads=8, n_kv_heads=8, d_head=64, hidden=512, n_param=5e8)


def hw_for_blocks(model, blocks, max_input, tpb=16, **kw):
    """Hardware whose KV pool holds exactly ``blocks`` GPU blocks for ``max_input``."""
    kv = (blocks + 0.5) * tpb * kv_bytes_per_token_layer(model) / 0.9
    mem = model.weight_bytes + activation_reserve(model, max_input) + kv
    n = kw.get("n_gpus", 1)
    base = dict(flops=1e14, hbm_bandwidth=8e11, pcie_bandwidth=3.2e10)
    base.update(kw)
    hw = HardwareSpec("t", gpu_mem=mem / n, **base)
    got = pool_size_from_hardware(model, hw, max_input, tpb).gpu_blocks_total
    assert got == blocks, got
    return hw


ACCEPTANCE_LINES = {}


def report_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print("\n" + line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
