import math

import pytest

from conftest import TINY, hw_for_blocks
from kvsim.cost_model import CostParams, HardwareSpec, decode_step_time, get_hardware, get_model, prefill_time
from kvsim.engine import (BASELINE, LAYERKV, EngineConfig, Policy, Request, Scenario, Simulation,
                          substream)
from kvsim.interconnect import D2H
from kvsim.kv_manager import GPU
from kvsim.scheduler import LengthBuckets
from kvsim.workload import RequestTemplate, Trace, generate_sharegpt_like

M7 = get_model("llama2-7b")
L20 = get_hardware("l20")


def trace(*rows):
    return Trace(tuple(RequestTemplate(i, a, p, o) for i, (a, p, o) in enumerate(rows)))


def sim(tr, policy=BASELINE, slo=True, model=TINY, hw=None, **eng):
    hw = hw or hw_for_blocks(model, 100, eng.get("max_input_tokens") or tr.max_prompt_tokens)
    sc = Scenario(model, hw, tr, policy=Policy(policy, slo),
                  engine=EngineConfig(debug_invariants=True, **eng))
    return Simulation(sc, keep_transfer_log=True)


def test_single_request_ttft_is_prefill_time():
    for arrival in (0.0, 0.5):
        s = Simulation(Scenario(M7, L20, trace((arrival, 1000, 4)), policy=Policy(BASELINE)))
        rec = s.run().records[0]
        assert rec.queuing_s == 0.0
        expected = prefill_time(M7, L20, CostParams(), 1000)
        if arrival == 0.0:
            assert rec.ttft_s == expected
        else:
            assert rec.ttft_s == pytest.approx(expected, rel=1e-12)


def test_same_seed_same_report():
    tr = generate_sharegpt_like(80, 4.0, seed=11)
    a = Simulation(Scenario(M7, L20, tr, seed=5)).run().requests_csv()
    b = Simulation(Scenario(M7, L20, tr, seed=5)).run().requests_csv()
    assert a == b


def test_baseline_head_of_line_blocking():
    # A holds 48 then 56 blocks; B needs 56 of 100 and must wait for A; C fits but queues behind B
    s = sim(trace((0.0, 96, 20), (0.001, 112, 2), (0.002, 16, 2)))
    s.run()
    a, b, c = (s.requests[i] for i in range(3))
    assert a.prefill_start == 0.0
    assert b.prefill_start >= a.finish
    assert c.prefill_start >= b.prefill_start


def test_baseline_exact_fit_is_admitted():
    s = sim(trace((0.0, 192, 1)))  # 12 blocks x 8 layers == pool
    rep = s.run()
    assert rep.rejected == 0 and rep.records[0].queuing_s == 0.0


def test_oversized_request_rejected():
    s = sim(trace((0.0, 256, 2), (0.1, 16, 2)))
    rep = s.run()
    assert rep.rejected == 1 and rep.completed == 1


def test_short_prompt_admitted_immediately():
    s = sim(trace((0.0, 96, 50), (0.01, 16, 2)))
    s.run()
    assert s.requests[1].prefill_start == pytest.approx(0.01) or \
        s.requests[1].prefill_start <= s.requests[0].finish


def test_layerkv_admits_where_baseline_blocks():
    rows = ((0.0, 96, 40), (0.001, 112, 2))
    base = sim(trace(*rows))
    base.run()
    lkv = sim(trace(*rows), LAYERKV)
    lkv.run()
    assert lkv.requests[1].prefill_start < base.requests[1].prefill_start
    assert lkv.requests[1].prefill_start < lkv.requests[0].finish


def test_no_prefill_transfers_when_all_layers_fit():
    s = sim(trace((0.0, 32, 4), (0.5, 32, 4)), LAYERKV, hw=hw_for_blocks(TINY, 5000, 32))
    s.run()
    assert all(r.retained_layers == TINY.n_layers for r in s.requests.values())
    assert not [j for j in s.bus.log if j.tag.startswith("prefill")]


def test_zero_retained_emits_one_job_per_layer():
    s = Simulation(Scenario(M7, L20, trace((0.0, 2048, 2)), policy=Policy(LAYERKV)),
                   keep_transfer_log=True)
    r = s.requests[0]
    s.kv.allocate_prefill(0, 2048, 0)
    s._start_prefill([r])
    s.bus.advance_to(10.0)
    jobs = [j for j in s.bus.log if j.tag.startswith("prefill")]
    assert len(jobs) == 32 and all(j.direction == D2H for j in jobs)
    ends = sorted(j.submit_time for j in jobs)
    assert ends[0] > 0 and ends[-1] == pytest.approx(prefill_time(M7, L20, CostParams(), 2048))


@pytest.mark.parametrize("n_gpus", [1, 2])
def test_prefill_completion_not_delayed_by_offload(n_gpus):
    hw = get_hardware("l20", n_gpus=n_gpus)
    ends = []
    for x in (0, 32):
        s = Simulation(Scenario(M7, hw, trace((0.0, 2048, 2)), policy=Policy(LAYERKV)))
        s.kv.allocate_prefill(0, 2048, x)
        s._start_prefill([s.requests[0]])
        ends.append(s._heap[0][0])
    assert ends[0] == ends[1]


def _decode_one(hw, tokens, x):
    s = Simulation(Scenario(M7, hw, trace((0.0, tokens, 8)), policy=Policy(LAYERKV)))
    r = s.requests[0]
    s.kv.allocate_prefill(0, tokens, x)
    r.first_token, r.generated = 0.0, 1
    s.running.append(r)
    s.kv.append_decode_block(0, spill=True)
    s._start_decode([r])
    return s, s._heap[0][0], decode_step_time(M7, hw, CostParams(), s.kv.table[0].tokens)


def test_decode_gpu_resident_has_no_stall():
    s, t, step = _decode_one(L20, 512, 32)
    assert t == pytest.approx(step) and s.fetch_stall_s == pytest.approx(0.0, abs=1e-12)


def test_decode_fast_link_hides_fetch():
    fast = get_hardware("l20", pcie_bandwidth=1e14)
    s, t, step = _decode_one(fast, 512, 16)
    assert t == pytest.approx(step, rel=1e-3)


def test_decode_slow_link_is_transfer_bound():
    slow = get_hardware("l20", pcie_bandwidth=1e9)
    s, t, step = _decode_one(slow, 4096, 0)
    fetch = 4097 * 32 * 16384 / 1e9
    assert t == pytest.approx(fetch, rel=0.02)
    assert t > 10 * step


def test_budget_exhausted_blocks_admission():
    s = Simulation(Scenario(M7, L20, trace((0.0, 64, 50), (5.0, 64, 4)), policy=Policy(LAYERKV)))
    a, b = s.requests[0], s.requests[1]
    s.kv.allocate_prefill(0, 64, 32)
    a.first_token, a.generated = 0.0, 10
    a.bucket = (30, 60)
    s.running.append(a)
    s.now = 5.0  # 0.5 s per token so far against a 0.2 s target
    s.queue.append(b)
    batch, budget = s._admit()
    assert batch == [] and budget < 0
    assert s.kv.pools.gpu_blocks_free > 1000


def test_empty_decoding_set_admits_by_blocks():
    s = Simulation(Scenario(M7, L20, trace(*[(0.0, 64, 4)] * 5), policy=Policy(LAYERKV)))
    s.queue.extend(s.requests.values())
    batch, budget = s._admit()
    assert len(batch) == 5 and budget == math.inf


def test_ablation_ignores_budget():
    s = Simulation(Scenario(M7, L20, trace((0.0, 64, 50), (5.0, 64, 4)),
                            policy=Policy(LAYERKV, slo_scheduler=False)))
    a, b = s.requests[0], s.requests[1]
    s.kv.allocate_prefill(0, 64, 32)
    a.first_token, a.generated = 0.0, 10
    s.running.append(a)
    s.now = 5.0
    s.queue.append(b)
    batch, _ = s._admit()
    assert batch == [b]


def test_invariants_hold_at_every_event():
    tr = generate_sharegpt_like(40, 20.0, seed=3)
    for pol in (BASELINE, LAYERKV):
        s = sim(tr, pol, hw=hw_for_blocks(TINY, 1200, tr.max_prompt_tokens))
        s.observers.append(lambda sm: sm.kv.check_invariants())
        rep = s.run()
        assert rep.completed + rep.rejected == 40
        assert s.kv.pools.gpu_blocks_free == s.kv.pools.gpu_blocks_total
        assert s.kv.pools.cpu_blocks_free == s.kv.pools.cpu_blocks_total


def test_wall_cap_truncates():
    tr = generate_sharegpt_like(30, 2.0, seed=1)
    rep = Simulation(Scenario(M7, L20, tr, engine=EngineConfig(wall_cap_s=3.0))).run()
    assert rep.truncated and rep.completed < 30


def test_tensor_parallel_run_completes():
    tr = generate_sharegpt_like(60, 6.0, seed=2)
    hw = get_hardware("l20", n_gpus=2)
    rep = Simulation(Scenario(get_model("yi-34b-gqa"), hw, tr)).run()
    assert rep.completed == 60


def test_decision_log(tmp_path):
    tr = generate_sharegpt_like(30, 10.0, seed=1)
    s = Simulation(Scenario(M7, L20, tr))
    s.run()
    s.write_decision_log(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "time,decoding,min_budget_s,admitted,offload" and len(lines) > 1


def test_substreams_are_distinct():
    a = substream(1, 0).random(4)
    b = substream(1, 1).random(4)
    assert (a != b).all()
    assert (substream(1, 0).random(4) == a).all()


def test_policy_labels():
    assert Policy(BASELINE, False) == Policy(BASELINE)
    assert Policy(LAYERKV, False).label == "layerkv_no_slo"
    with pytest.raises(ValueError):
        Policy("fifo")


def test_lone_request_outgrowing_pool_is_aborted():
    # 96 prompt tokens fit (48 of 100 blocks) but 296 cached tokens never can
    s = sim(trace((0.0, 96, 200), (0.01, 16, 4)))
    rep = s.run()
    assert rep.rejected == 1 and rep.completed == 1
    assert s.kv.pools.gpu_blocks_free == s.kv.pools.gpu_blocks_total
