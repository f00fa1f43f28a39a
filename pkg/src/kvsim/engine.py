"""Discrete-event serving engine: one device group, continuous batching, two policies.

The device runs one iteration at a time: either a prefill batch or a decode
step for the running set. Scheduling happens at every iteration boundary and
whenever an idle device sees an arrival or a finished transfer. Transfers run
on the shared PCIe bus model concurrently with compute.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cost_model import (CostParams, HardwareSpec, ModelSpec, allreduce_time, decode_step_time,
                         min_retained_layers, prefill_time)
from .interconnect import D2H, DEFAULT_CHUNK_BYTES, H2D, PcieBus, TransferJob
from .kv_manager import (DEFAULT_CPU_POOL_FACTOR, DEFAULT_TOKENS_PER_BLOCK, GPU, KVManager,
                         OffloadJob, PromoteJob, pool_size_from_hardware)
from .metrics import MetricsReport, RequestRecord
from .scheduler import (Bucket, DecodingState, ForecastState, LengthBuckets, SLOSpec, SeqForecast,
                        forecast_availability, max_admissions, min_budget, offload_decision,
                        predict_bucket, predicted_finish_stage)
from .workload import Trace

log = logging.getLogger(__name__)

BASELINE = "baseline"
LAYERKV = "layerkv"

# tie-break order for simultaneous events
TRANSFER_COMPLETE, PREFILL_COMPLETE, DECODE_DONE, ARRIVAL, TICK = range(5)

# substream keys under the scenario seed
WORKLOAD_STREAM = 0
PREDICTOR_STREAM = 1


class SimulationError(RuntimeError):
    pass


def substream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


@dataclass(frozen=True)
class Policy:
    variant: str = LAYERKV
    slo_scheduler: bool = True

    def __post_init__(self):
        if self.variant not in (BASELINE, LAYERKV):
            raise ValueError(f"unknown policy {self.variant!r}")
        if self.variant == BASELINE and not self.slo_scheduler:
            # the flag only means something for layerkv; normalise so equal policies compare equal
            object.__setattr__(self, "slo_scheduler", True)

    @property
    def label(self) -> str:
        if self.variant == BASELINE:
            return BASELINE
        return LAYERKV if self.slo_scheduler else "layerkv_no_slo"


@dataclass(frozen=True)
class EngineConfig:
    tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK
    cpu_pool_factor: float = DEFAULT_CPU_POOL_FACTOR
    max_input_tokens: Optional[int] = None  # None: longest prompt in the trace
    max_batch_tokens: int = 8192
    offload_threshold_frac: float = 0.05
    forecast_horizon: int = 8
    promote: bool = True  # copy host-resident KV back when the forecast has room
    fetch_hidden_only: bool = True  # decode host-resident requests only while their fetch hides under compute
    fetch_order: str = "deadline"  # "deadline" | "fcfs" order among host-resident decoders
    budget_scope: str = "running"  # "running" | "batch": which decoders feed the admission budget
    tpot_estimate: str = "request"  # "request" | "system": pace used to project remaining decode time
    promote_headroom: float = 2.0  # promotion keeps the forecast above this many thresholds
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    wall_cap_s: float = 24 * 3600.0
    debug_invariants: bool = False

    def __post_init__(self):
        if self.max_batch_tokens < 1:
            raise ValueError("max_batch_tokens must be >= 1")
        if not 0 <= self.offload_threshold_frac < 1:
            raise ValueError("offload_threshold_frac must be in [0, 1)")
        if self.promote_headroom < 1:
            raise ValueError("promote_headroom must be >= 1")
        if self.forecast_horizon < 1:
            raise ValueError("forecast_horizon must be >= 1")
        if self.wall_cap_s <= 0:
            raise ValueError("wall_cap_s must be > 0")


@dataclass
class Scenario:
    model: ModelSpec
    hw: HardwareSpec
    trace: Trace
    cost: CostParams = field(default_factory=CostParams)
    slo: SLOSpec = field(default_factory=SLOSpec)
    policy: Policy = field(default_factory=Policy)
    engine: EngineConfig = field(default_factory=EngineConfig)
    buckets: Optional[LengthBuckets] = None  # None: deciles of the trace's output lengths
    seed: int = 0


@dataclass
class Request:
    id: int
    arrival: float
    prompt_tokens: int
    output_tokens: int
    bucket: Bucket
    prefill_len: int = 0  # tokens to prefill at the next admission
    prefill_start: Optional[float] = None
    first_token: Optional[float] = None
    finish: Optional[float] = None
    generated: int = 0
    retained_layers: int = 0
    prefill_done: float = -math.inf
    preemptions: int = 0

    def __post_init__(self):
        if not self.prefill_len:
            self.prefill_len = self.prompt_tokens


@dataclass
class DecisionRow:
    time: float
    decoding: int
    min_budget: float
    admitted: int
    offload: str


class Simulation:
    def __init__(self, sc: Scenario, keep_transfer_log: bool = False):
        self.sc = sc
        self.model = sc.model
        self.hw = sc.hw
        self.cost = sc.cost
        self.cfg = sc.engine
        self.layerkv = sc.policy.variant == LAYERKV
        L = self.model.n_layers
        max_in = self.cfg.max_input_tokens or max(sc.trace.max_prompt_tokens, 1)
        pools = pool_size_from_hardware(self.model, self.hw, max_in, self.cfg.tokens_per_block,
                                        self.cfg.cpu_pool_factor)
        self.kv = KVManager(self.model, pools, debug=self.cfg.debug_invariants)
        self.bus = PcieBus(self.hw, self.cost.delta, self.cfg.chunk_bytes, keep_log=keep_transfer_log)
        self.threshold = int(self.cfg.offload_threshold_frac * pools.gpu_blocks_total)
        self.L = L
        buckets = sc.buckets or LengthBuckets.deciles_of([r.output_tokens for r in sc.trace] or [1])
        rng = substream(sc.seed, PREDICTOR_STREAM)
        self.requests: Dict[int, Request] = {}
        for t in sc.trace:
            self.requests[t.id] = Request(t.id, t.arrival, t.prompt_tokens, t.output_tokens,
                                          predict_bucket(t.output_tokens, buckets, rng))
        self.queue: List[Request] = []
        self.running: List[Request] = []  # decoding requests, admission order
        self.now = 0.0
        self.busy = False
        self._tick_pending = False
        self._heap: list = []
        self._seq = itertools.count()
        self._pending_offloads = 0
        self._promoting: set = set()
        self._last_batch: set = set()
        self._last_step = 0.0
        self._admit_hold = False  # set by a preemption until the running set advances
        self.decisions: List[DecisionRow] = []
        self.rejected: List[int] = []
        self.done: List[Request] = []
        self.preemptions = 0
        self.tp_contended = self.hw.pcie_contended
        # pipeline bookkeeping, reported as extras
        self.fetch_stall_s = 0.0
        self.offloaded_layers = 0
        # hooks for tests: called after every event with the simulation
        self.observers: list = []

    # event plumbing

    def _push(self, t: float, kind: int, payload=None) -> None:
        heapq.heappush(self._heap, (t, kind, next(self._seq), payload))

    def _wake(self) -> None:
        if not self.busy and not self._tick_pending:
            self._tick_pending = True
            self._push(self.now, TICK)

    def run(self) -> MetricsReport:
        for r in sorted(self.requests.values(), key=lambda r: (r.arrival, r.id)):
            self._push(r.arrival, ARRIVAL, r)
        truncated = False
        handlers = {ARRIVAL: self._on_arrival, PREFILL_COMPLETE: self._on_prefill_complete,
                    DECODE_DONE: self._on_decode_done, TRANSFER_COMPLETE: self._on_transfer,
                    TICK: self._on_tick}
        while self._heap:
            t, kind, _, payload = heapq.heappop(self._heap)
            if t > self.cfg.wall_cap_s:
                truncated = True
                break
            if t < self.now:
                raise SimulationError(f"time went backwards: {t} < {self.now}")
            self.now = t
            self.bus.advance_to(t)
            handlers[kind](payload)
            for obs in self.observers:
                obs(self)
        unfinished = len(self.requests) - len(self.done) - len(self.rejected)
        if unfinished and not truncated:
            raise SimulationError(f"{unfinished} requests never finished")
        return self._report(truncated)

    # handlers

    def _on_arrival(self, r: Request) -> None:
        self.queue.append(r)
        self._wake()

    def _on_transfer(self, payload: Tuple[object, TransferJob]) -> None:
        job, transfer = payload
        t = self.bus.completion(transfer)
        if t > self.now:
            self._push(t, TRANSFER_COMPLETE, payload)
            return
        if isinstance(job, PromoteJob):
            self.kv.finish_promote(job)
            self._promoting.discard(job.request_id)
        else:
            self.kv.finish_offload(job)
        self._pending_offloads -= 1
        self._wake()

    def _on_prefill_complete(self, batch: List[Request]) -> None:
        self.busy = False
        for r in batch:
            r.prefill_done = self.now
            if r.first_token is None:
                r.first_token = self.now
                r.generated = 1
            if r.generated >= r.output_tokens:
                self._finish(r)
            else:
                self.running.append(r)
        self._wake()

    def _on_decode_done(self, batch: List[Request]) -> None:
        self.busy = False
        self._admit_hold = False
        for r in batch:
            r.generated += 1
            if r.generated >= r.output_tokens:
                self._finish(r)
        self._wake()

    def _finish(self, r: Request) -> None:
        r.finish = self.now
        if r in self.running:
            self.running.remove(r)
        self.kv.release(r.id)
        self.done.append(r)

    def _on_tick(self, _payload) -> None:
        self._tick_pending = False
        if self.busy:
            return
        plan = "none"
        if self.layerkv:
            plan = self._escalate_offload()
            if plan == "none" and self.cfg.promote:
                self._promote()
        batch, budget = self._admit()
        if self.layerkv and (batch or plan != "none" or self.queue):
            self.decisions.append(DecisionRow(self.now, len(self.running), budget, len(batch), plan))
        if batch:
            self._start_prefill(batch)
            return
        members = self._select_decode()
        if members:
            self._start_decode(members)
            return
        if self.running and self._pending_offloads == 0:
            # every running request is blocked on KV space and nothing will free any
            if len(self.running) == 1:
                self._abort(self.running[0])  # outgrew the whole pool on its own
            else:
                self._preempt_newest()
            self._wake()

    # admission

    def _admit(self) -> Tuple[List[Request], float]:
        budget = math.inf
        if self._admit_hold and not self.running:
            self._admit_hold = False  # nothing left to advance; the hold would never clear
        if not self.queue or self._admit_hold:
            return [], budget
        if self.layerkv:
            return self._admit_layerkv()
        return self._admit_baseline(), budget

    def _batch_prefix(self) -> List[Request]:
        """FCFS queue prefix whose prompt tokens fit the batch cap (the head always fits)."""
        out, tokens = [], 0
        for r in self.queue:
            if out and tokens + r.prefill_len > self.cfg.max_batch_tokens:
                break
            out.append(r)
            tokens += r.prefill_len
        return out

    def _stalled(self) -> bool:
        kv = self.kv
        return any(kv.needs_block(r.id) and kv.gpu_layer_count(r.id) > kv.pools.gpu_blocks_free
                   for r in self.running)

    def _admit_baseline(self) -> List[Request]:
        kv = self.kv
        if self._stalled():
            return []  # running requests get freed blocks first
        batch = []
        for r in self._batch_prefix():
            need = self.L * kv.blocks_for(r.prefill_len)
            if need > kv.pools.gpu_blocks_total:
                self._reject(r)
                continue
            if kv.pools.gpu_blocks_free < need:
                break  # head-of-line blocking
            kv.allocate_prefill(r.id, r.prefill_len, self.L)
            r.retained_layers = self.L
            batch.append(r)
        for r in batch:
            self.queue.remove(r)
        return batch

    def _reject(self, r: Request) -> None:
        log.warning("request %d needs more KV blocks than the pool holds; rejected", r.id)
        self.queue.remove(r)
        self.rejected.append(r.id)

    def _decoding_states(self) -> List[DecodingState]:
        pool = self.running
        if self.cfg.budget_scope == "batch":
            last = self._last_batch
            pool = [r for r in self.running if r.id in last]
        return [DecodingState(self.now - r.first_token, r.generated, r.bucket)
                for r in pool if r.generated >= 1]

    def _admit_layerkv(self) -> Tuple[List[Request], float]:
        kv = self.kv
        cands = self._batch_prefix()
        budget = math.inf
        if self.sc.policy.slo_scheduler:
            states = self._decoding_states()
            pace = self._last_step if self.cfg.tpot_estimate == "system" and self._last_step else None
            budget = min_budget(states, self.sc.slo, pace)
            times = [prefill_time(self.model, self.hw, self.cost, r.prefill_len) for r in cands]
            cands = cands[:max_admissions(times, states, self.sc.slo, pace)]
        batch: List[Request] = []
        extra: List[SeqForecast] = []
        for r in cands:
            nb = kv.blocks_for(r.prefill_len)
            x_min = min_retained_layers(self.model, self.hw, self.cost, r.prefill_len)
            if x_min * nb > kv.pools.gpu_blocks_total or \
                    (self.L - x_min) * nb > kv.pools.cpu_blocks_total:
                self._reject(r)
                continue
            x = self._choose_retained(nb, x_min, extra)
            if x is None:
                break
            kv.allocate_prefill(r.id, r.prefill_len, x)
            r.retained_layers = x
            extra.append(SeqForecast(x * nb, x, None))
            batch.append(r)
        for r in batch:
            self.queue.remove(r)
        return batch, budget

    def _choose_retained(self, nb: int, x_min: int, extra: List[SeqForecast]) -> Optional[int]:
        """Most GPU layers that keep the forecast above threshold, but at least ``x_min``."""
        pools = self.kv.pools
        gpu_cap = pools.gpu_blocks_free // nb
        lo = max(x_min, self.L - pools.cpu_blocks_free // nb)
        hi = min(self.L, gpu_cap)
        if hi < lo:
            return None
        fc = self._forecast(extra)
        room = min((fc[t] - self.threshold) // (nb + t) for t in range(1, len(fc)))
        return int(min(hi, max(lo, room)))

    # forecasting and offload escalation

    def _seq_forecasts(self) -> List[SeqForecast]:
        kv, tpb = self.kv, self.kv.tpb
        out = []
        for r in self.running:
            ent = kv.table[r.id]
            out.append(SeqForecast(ent.gpu_allocated, ent.home.count(GPU),
                                   predicted_finish_stage(r.generated, r.bucket, tpb)))
        return out

    def _forecast(self, extra: Sequence[SeqForecast] = ()) -> List[int]:
        kv = self.kv
        fs = ForecastState(kv.pools.gpu_blocks_free + kv.sending_gpu_blocks, self.threshold,
                           self._seq_forecasts() + list(extra), sum(s.gpu_blocks for s in extra))
        return forecast_availability(fs, self.cfg.forecast_horizon)

    def _escalate_offload(self) -> str:
        if not self.running:
            return "none"
        fc = self._forecast()
        low = min(fc)
        if low >= self.threshold:
            return "none"
        kv = self.kv
        cands = [r for r in self.running if kv.table[r.id].gpu_allocated]
        cands.sort(key=lambda r: (r.prefill_done, r.id), reverse=True)  # most recent first
        half_credit = 0
        for r in cands:
            ent = kv.table[r.id]
            layers = ent.gpu_layers()
            half = layers[:math.ceil(len(layers) / 2)]
            half_credit += sum(1 for l in half for d, _ in ent.blocks[l] if d == GPU)
        plan = offload_decision(fc, self.threshold, half_credit)
        deficit = self.threshold - low
        reclaimed = 0
        for r in cands:
            if reclaimed >= deficit:
                break
            job = kv.plan_offload(r.id, plan)
            if job.empty:
                continue
            reclaimed += len(job.gpu_slots)
            self.offloaded_layers += len(job.layers)
            transfer = TransferJob(job.bytes, D2H, self.now, self.cfg.chunk_bytes, f"offload:{r.id}")
            self._pending_offloads += 1
            self._push(self.bus.submit_transfer(transfer), TRANSFER_COMPLETE, (job, transfer))
        return plan

    def _promote(self) -> None:
        """Bring host-resident requests back to GPU, most urgent first, while the forecast allows."""
        kv = self.kv
        cands = [r for r in self.running
                 if not kv.table[r.id].fully_gpu and r.id not in self._promoting]
        if not cands:
            return
        cands.sort(key=lambda r: (self._deadline(r), r.id))
        fc = self._forecast()
        floor = self.cfg.promote_headroom * self.threshold
        for r in cands:
            need, layers = kv.promote_demand(r.id)
            if need > kv.pools.gpu_blocks_free:
                continue
            if min(fc[t] - need - layers * t for t in range(len(fc))) < floor:
                continue
            job = kv.plan_promote(r.id)
            if job.empty:
                continue
            fc = [v - need - layers * t for t, v in enumerate(fc)]
            self._promoting.add(r.id)
            transfer = TransferJob(job.bytes, H2D, self.now, self.cfg.chunk_bytes, f"promote:{r.id}")
            self._pending_offloads += 1
            self._push(self.bus.submit_transfer(transfer), TRANSFER_COMPLETE, (job, transfer))

    # prefill

    def _start_prefill(self, batch: List[Request]) -> None:
        start = self.now
        lens = [r.prefill_len for r in batch]
        dur = sum(prefill_time(self.model, self.hw, self.cost, n) for n in lens)
        for r in batch:
            if r.prefill_start is None:
                r.prefill_start = start
        c = dur / self.L
        layer_end = [start + (i + 1) * c for i in range(self.L - 1)] + [start + dur]
        end = layer_end[-1]
        if self.tp_contended:
            # all-reduce windows first: offload chunks are then laid out around them
            ar = allreduce_time(self.model, self.hw, sum(lens))
            t = start
            for i in range(self.L):
                t += c
                layer_end[i] = t
                t = self.bus.register_allreduce(t, ar)
            end = t
        kvb = self.kv.kv_bytes
        for layer in range(self.L):
            nbytes = sum(r.prefill_len * kvb for r in batch
                         if self.kv.table[r.id].home[layer] != GPU)
            if nbytes:
                self.bus.enqueue(TransferJob(nbytes, D2H, layer_end[layer], self.cfg.chunk_bytes,
                                             f"prefill:{layer}"))
        self.busy = True
        self._push(end, PREFILL_COMPLETE, batch)

    # decode

    def _deadline(self, r: Request) -> float:
        return r.first_token + self.sc.slo.tpot_slo * r.generated

    def _select_decode(self) -> List[Request]:
        kv = self.kv
        cap = self.cfg.max_batch_tokens
        members: List[Request] = []
        if not self.layerkv:
            for r in self.running:
                if len(members) >= cap:
                    break
                if kv.append_decode_block(r.id):
                    members.append(r)
            return members
        cpu_side = []
        for r in self.running:
            if r.id in self._promoting:
                continue  # waits for its blocks to land
            if kv.table[r.id].fully_gpu:
                if len(members) < cap and kv.append_decode_block(r.id, spill=True):
                    members.append(r)
            else:
                cpu_side.append(r)
        if not cpu_side or len(members) >= cap:
            return members
        if not self.cfg.fetch_hidden_only:
            for r in cpu_side:
                if len(members) >= cap:
                    break
                if kv.append_decode_block(r.id, spill=True):
                    members.append(r)
            return members
        # host-resident KV rides the PCIe link while the step computes; take the
        # most urgent requests whose fetch still hides under the step
        if self.cfg.fetch_order == "fcfs":
            cpu_side.sort(key=lambda r: (r.arrival, r.id))
        else:
            cpu_side.sort(key=lambda r: (self._deadline(r), r.id))
        kv_tokens = sum(kv.table[r.id].tokens for r in members)
        fetch_s = 0.0
        bw = self.hw.pcie_bandwidth
        taken = 0
        for r in cpu_side:
            if len(members) >= cap:
                break
            ent = kv.table[r.id]
            f = sum(ent.cpu_tokens(l, kv.tpb) for l in range(self.L)) * kv.kv_bytes / bw
            step = decode_step_time(self.model, self.hw, self.cost, kv_tokens + ent.tokens)
            if taken and fetch_s + f > step:
                break
            if not kv.append_decode_block(r.id, spill=True):
                continue
            members.append(r)
            taken += 1
            fetch_s += f
            kv_tokens += ent.tokens
        return members

    def _start_decode(self, members: List[Request]) -> None:
        kv = self.kv
        self._last_batch = {r.id for r in members}
        start = self.now
        kv_tokens = sum(kv.table[r.id].tokens for r in members)
        step = decode_step_time(self.model, self.hw, self.cost, kv_tokens)
        c = step / self.L
        fetch: List[Optional[TransferJob]] = [None] * self.L
        if self.layerkv:
            per_layer = [0] * self.L
            for r in members:
                ent = kv.table[r.id]
                if ent.fully_gpu:
                    continue
                for l in range(self.L):
                    per_layer[l] += ent.cpu_tokens(l, kv.tpb)
            for l in range(self.L):
                if per_layer[l]:
                    fetch[l] = self.bus.enqueue(TransferJob(per_layer[l] * kv.kv_bytes, H2D, start,
                                                            self.cfg.chunk_bytes, f"fetch:{l}"))
        ar = allreduce_time(self.model, self.hw, len(members)) if self.tp_contended else 0.0
        t = start
        for l in range(self.L):
            if fetch[l] is not None:
                t = max(t, self.bus.completion(fetch[l]))
            t += c
            if ar:
                t = self.bus.register_allreduce(t, ar)
        self.fetch_stall_s += (t - start) - step - ar * self.L
        self._last_step = t - start
        self.busy = True
        self._push(t, DECODE_DONE, members)

    # preemption (livelock breaker only)

    def _preempt_newest(self) -> None:
        pool = [r for r in self.running if r.id not in self._promoting] or self.running
        r = max(pool, key=lambda r: (r.arrival, r.id))
        self.running.remove(r)
        self.kv.release(r.id)
        r.prefill_len = r.prompt_tokens + r.generated - 1
        r.preemptions += 1
        self.preemptions += 1
        self.queue.insert(0, r)
        self._admit_hold = True

    def _abort(self, r: Request) -> None:
        log.warning("request %d outgrew the KV pools while running alone; aborted", r.id)
        self.running.remove(r)
        self.kv.release(r.id)
        self.rejected.append(r.id)

    # report

    def _report(self, truncated: bool) -> MetricsReport:
        slo = self.sc.slo
        recs = []
        for r in sorted(self.done, key=lambda r: r.id):
            queuing = r.prefill_start - r.arrival
            prefill = r.first_token - r.prefill_start
            ttft = queuing + prefill
            tpot = (r.finish - r.first_token) / (r.output_tokens - 1) if r.output_tokens > 1 else 0.0
            recs.append(RequestRecord(r.id, r.arrival, queuing, prefill, ttft, tpot, r.output_tokens,
                                      r.finish, ttft > slo.ttft_slo, tpot > slo.tpot_slo,
                                      r.preemptions))
        extra = {"gpu_blocks_total": float(self.kv.pools.gpu_blocks_total),
                 "fetch_stall_s": self.fetch_stall_s,
                 "escalation_offloaded_layers": float(self.offloaded_layers),
                 "pcie_busy_s": self.bus.busy_time}
        return MetricsReport(recs, len(self.requests), len(self.rejected), truncated,
                             self.preemptions, self.now, extra)

    def write_decision_log(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "decoding", "min_budget_s", "admitted", "offload"])
            for d in self.decisions:
                w.writerow([f"{d.time:.9f}", d.decoding, f"{d.min_budget:.9f}", d.admitted, d.offload])


def run(sc: Scenario) -> MetricsReport:
    return Simulation(sc).run()
