"""End-to-end acceptance checks; each test prints one PASS/FAIL line for its criterion."""

import math
import time
from itertools import product

import numpy as np
import pytest

from conftest import TINY, hw_for_blocks, report_criterion
from kvsim.cost_model import (CostParams, HardwareSpec, ModelSpec, get_hardware, get_model,
                              min_retained_layers)
from kvsim.engine import BASELINE, LAYERKV, EngineConfig, Policy, Scenario, Simulation
from kvsim.kv_manager import layer_placement
from kvsim.scheduler import DecodingState, SLOSpec, allow_prefill_budget, max_admissions
from kvsim.workload import RequestTemplate, Trace, generate_fixed, generate_sharegpt_like

SEED = 0
M7 = get_model("llama2-7b")
L20 = get_hardware("l20")
CONTEXTS = (128, 512, 1024, 4096, 8192)
RATES = (1.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0)
POLICIES = {"baseline": Policy(BASELINE), "layerkv": Policy(LAYERKV),
            "layerkv_no_slo": Policy(LAYERKV, slo_scheduler=False)}
SLO = SLOSpec(ttft_slo=3.0, tpot_slo=0.2)


def check(number, ok, detail):
    report_criterion(number, ok, detail)
    assert ok, detail


@pytest.fixture(scope="module")
def fixed_sweep():
    out = {}
    for ctx in CONTEXTS:
        tr = generate_fixed(100, ctx, 512, rate=1.0, seed=SEED)
        t0 = time.perf_counter()
        s = Simulation(Scenario(M7, L20, tr, slo=SLO, policy=Policy(BASELINE),
                                engine=EngineConfig(max_input_tokens=16384), seed=SEED)).run()
        out[ctx] = (s.summary(), time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def rate_sweep():
    out = {}
    for rate in RATES:
        tr = generate_sharegpt_like(1000, rate, seed=SEED)
        for name, pol in POLICIES.items():
            out[rate, name] = Simulation(Scenario(M7, L20, tr, slo=SLO, policy=pol,
                                                  seed=SEED)).run().summary()
    return out


def test_c01_queuing_dominates_long_contexts(fixed_sweep):
    share = {c: fixed_sweep[c][0]["queuing_share"] for c in CONTEXTS}
    slowest = max(t for _, t in fixed_sweep.values())
    ok = all(share[c] > 0.5 for c in CONTEXTS if c >= 4096) and share[128] < 0.2 and slowest < 60
    detail = ", ".join(f"{c}:{share[c]:.2f}" for c in CONTEXTS) + f"; slowest point {slowest:.1f}s"
    check(1, ok, "queuing share of TTFT " + detail)


def test_c02_ttft_superlinear(fixed_sweep):
    s4, s8 = fixed_sweep[4096][0], fixed_sweep[8192][0]
    ttft_ratio = s8["mean_ttft_s"] / s4["mean_ttft_s"]
    tpot_ratio = s8["mean_tpot_s"] / s4["mean_tpot_s"]
    ok = ttft_ratio > 4 and tpot_ratio < 2
    check(2, ok, f"TTFT(8192)/TTFT(4096) = {ttft_ratio:.2f} (need > 4), "
                 f"TPOT ratio = {tpot_ratio:.2f} (need < 2)")


def saturating_rate(rate_sweep):
    """Lowest swept rate at which queuing is most of the baseline TTFT."""
    for r in RATES:
        if rate_sweep[r, "baseline"]["queuing_share"] > 0.5:
            return r
    return None


def test_c03_layerkv_ttft_win(rate_sweep):
    sat = saturating_rate(rate_sweep)
    assert sat is not None, "no swept rate saturates the baseline"
    b, l = rate_sweep[sat, "baseline"], rate_sweep[sat, "layerkv"]
    mean_r = l["mean_ttft_s"] / b["mean_ttft_s"]
    p99_r = l["p99_ttft_s"] / b["p99_ttft_s"]
    b1, l1 = rate_sweep[1.0, "baseline"], rate_sweep[1.0, "layerkv"]
    low = (l1["mean_ttft_s"] / b1["mean_ttft_s"], l1["p99_ttft_s"] / b1["p99_ttft_s"])
    ok = mean_r <= 0.2 and p99_r <= 0.25 and all(0.8 <= x <= 1.2 for x in low)
    check(3, ok, f"at {sat:g} req/s layerkv/baseline mean TTFT {mean_r:.3f}, P99 {p99_r:.3f}; "
                 f"at 1 req/s {low[0]:.3f}, {low[1]:.3f}")


def test_c04_throughput_parity(rate_sweep):
    ratios = {r: rate_sweep[r, "layerkv"]["throughput_tok_s"] / rate_sweep[r, "baseline"]["throughput_tok_s"]
              for r in RATES}
    ok = all(x >= 0.95 for x in ratios.values())
    check(4, ok, "layerkv/baseline throughput " + ", ".join(f"{r:g}:{x:.3f}" for r, x in ratios.items()))


def test_c05_slo_violation_reduction(rate_sweep):
    loaded = [r for r in RATES if rate_sweep[r, "baseline"]["violation_rate"] >= 0.2]
    gaps = {r: rate_sweep[r, "baseline"]["violation_rate"] - rate_sweep[r, "layerkv"]["violation_rate"]
            for r in loaded}
    ablation_worse = [r for r in RATES if rate_sweep[r, "layerkv_no_slo"]["tpot_violations"]
                      > rate_sweep[r, "layerkv"]["tpot_violations"]]
    ok = bool(loaded) and all(g >= 0.15 for g in gaps.values()) and bool(ablation_worse)
    rates_txt = ", ".join(
        f"{r:g}:{rate_sweep[r, 'baseline']['violation_rate']:.2f}/"
        f"{rate_sweep[r, 'layerkv']['violation_rate']:.2f}" for r in loaded)
    check(5, ok, f"violation rate baseline/layerkv where baseline >= 20%: {rates_txt or 'none'}; "
                 f"ablation TPOT violations exceed layerkv at {[f'{r:g}' for r in ablation_worse]}")


def brute_force_admissions(times, states, slo):
    budgets = [allow_prefill_budget(s, slo) for s in states if s.n_past >= 1]
    best = 0
    for k in range(len(times) + 1):
        if all(all(sum(times[:j]) < b for b in budgets) for j in range(1, k + 1)):
            best = k
    return best


def test_c06_scheduler_matches_brute_force():
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for _ in range(1000):
        slo = SLOSpec(tpot_slo=float(rng.uniform(0.02, 0.5)))
        states = []
        for _ in range(rng.integers(0, 9)):
            n_past = int(rng.integers(0, 300))
            lo = int(rng.integers(1, 500))
            states.append(DecodingState(float(rng.uniform(0, 1.5 * slo.tpot_slo * max(n_past, 1))),
                                        n_past, (lo, lo + int(rng.integers(1, 500)))))
        times = [float(x) for x in rng.uniform(0.001, 2.0, size=rng.integers(0, 9))]
        if max_admissions(times, states, slo) != brute_force_admissions(times, states, slo):
            mismatches += 1
    check(6, mismatches == 0, f"{mismatches} mismatches in 1000 random instances")


def prefill_end(model, hw, seqlen, x):
    tr = Trace((RequestTemplate(0, 0.0, seqlen, 2),))
    s = Simulation(Scenario(model, hw, tr, policy=Policy(LAYERKV)))
    s.kv.allocate_prefill(0, seqlen, x)
    s._start_prefill([s.requests[0]])
    return s._heap[0][0]


def test_c07_overlap_guarantee():
    rng = np.random.default_rng(SEED + 1)
    presets = [get_model(n) for n in ("llama2-7b", "yi-34b-gqa", "llama3.1-70b-gqa")]
    bad = 0
    for _ in range(200):
        model = presets[rng.integers(0, 3)]
        n = int(rng.choice([1, 2, 4, 8]))
        mem = (model.weight_bytes * 1.5 + 40e9) / n
        hw = HardwareSpec("r", flops=float(rng.uniform(5e13, 1e15)), hbm_bandwidth=2e12,
                          pcie_bandwidth=float(rng.uniform(4e9, 6.4e10)), gpu_mem=mem, n_gpus=n,
                          nvlink=bool(rng.random() < 0.3))
        seqlen = int(rng.integers(16, 16385))
        x = min_retained_layers(model, hw, CostParams(), seqlen)
        if prefill_end(model, hw, seqlen, x) != prefill_end(model, hw, seqlen, model.n_layers):
            bad += 1
    check(7, bad == 0, f"{bad} of 200 triples delayed by offloading")


def test_c08_conservation_suite():
    rng = np.random.default_rng(SEED + 2)
    failures = []
    for i in range(100):
        L = int(rng.choice([2, 4, 8, 12]))
        model = ModelSpec("r", n_layers=L, n_heads=8, n_kv_heads=int(rng.choice([2, 8])), d_head=64,
                          hidden=512, n_param=5e8)
        n = int(rng.integers(10, 40))
        rate = float(rng.uniform(10, 80))
        if rng.random() < 0.5:
            tr = generate_sharegpt_like(n, rate, seed=int(rng.integers(1 << 30)), mu=4.0, sigma=1.0)
        else:
            tr = generate_fixed(n, int(rng.integers(4, 400)), int(rng.integers(1, 120)), rate,
                                seed=int(rng.integers(1 << 30)))
        n_gpus = int(rng.choice([1, 2]))
        hw = hw_for_blocks(model, int(rng.integers(L * 30, L * 120)), tr.max_prompt_tokens,
                           n_gpus=n_gpus, pcie_bandwidth=float(rng.uniform(1e9, 3.2e10)))
        pol = list(POLICIES.values())[rng.integers(0, 3)]
        sc = Scenario(model, hw, tr, policy=pol, seed=i,
                      engine=EngineConfig(debug_invariants=True,
                                          cpu_pool_factor=float(rng.choice([1.0, 2.0, 8.0]))))
        s = Simulation(sc)
        s.observers.append(lambda sm: sm.kv.check_invariants())
        try:
            rep = s.run()
        except Exception as e:  # any bookkeeping error is a failure of this criterion
            failures.append(f"run {i}: {type(e).__name__}: {e}")
            continue
        p = s.kv.pools
        leaked = (p.gpu_blocks_total - p.gpu_blocks_free, p.cpu_blocks_total - p.cpu_blocks_free)
        if leaked != (0, 0) or s.kv.table or rep.completed + rep.rejected != n:
            failures.append(f"run {i}: leaked {leaked}")
    check(8, not failures, f"{100 - len(failures)}/100 randomized runs clean" +
          (f"; first failure {failures[0]}" if failures else ""))


def test_c09_determinism():
    tr = generate_sharegpt_like(400, 8.0, seed=SEED + 3)
    diffs = []
    for name, pol in POLICIES.items():
        for hw in (L20, get_hardware("l20", n_gpus=2)):
            runs = [Simulation(Scenario(M7, hw, tr, policy=pol, seed=SEED + 3)).run().requests_csv()
                    for _ in range(2)]
            if runs[0] != runs[1]:
                diffs.append(f"{name}/tp{hw.n_gpus}")
    check(9, not diffs, "byte-identical requests.csv for every policy" if not diffs
          else f"differs: {diffs}")


def test_c10_placement_golden():
    plan = layer_placement(8, 4)
    ok = plan.retained_layer_indices == {1, 3, 5, 7} and plan.offloaded_layer_indices == {0, 2, 4, 6}
    check(10, ok, f"layer_placement(8, 4) retains {sorted(plan.retained_layer_indices)}")
