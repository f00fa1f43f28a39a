"""GPU/CPU KV block pools and the layer-wise block table.

A physical block holds ``tokens_per_block`` tokens of KV for a single layer.
Every (logical block, layer) pair of a live request sits in exactly one GPU
or CPU slot. GPU slots being drained to the host stay reserved in a send
buffer until the transfer that empties them completes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Tuple

from .cost_model import HardwareSpec, ModelSpec, kv_bytes_per_token_layer

GPU = "G"
CPU = "C"

# Activation memory reserved during profiling: 2 * tokens * hidden * bytes per
# element, times this many live activation tensors.
ACTIVATION_FACTOR = 8
DEFAULT_TOKENS_PER_BLOCK = 16
DEFAULT_CPU_POOL_FACTOR = 8


class KVError(RuntimeError):
    """Internal bookkeeping violation (double release, unknown request...)."""


class ConfigurationError(ValueError):
    pass


class OutOfBlocks(RuntimeError):
    pass


class BlockPools:
    def __init__(self, gpu_blocks_total: int, cpu_blocks_total: int,
                 tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK):
        if gpu_blocks_total < 0 or cpu_blocks_total < 0 or tokens_per_block < 1:
            raise ValueError("invalid pool sizes")
        self.gpu_blocks_total = gpu_blocks_total
        self.cpu_blocks_total = cpu_blocks_total
        self.tokens_per_block = tokens_per_block
        # stacks; slot 0 is handed out first
        self._free = {GPU: list(range(gpu_blocks_total - 1, -1, -1)),
                      CPU: list(range(cpu_blocks_total - 1, -1, -1))}

    @property
    def gpu_blocks_free(self) -> int:
        return len(self._free[GPU])

    @property
    def cpu_blocks_free(self) -> int:
        return len(self._free[CPU])

    def free_count(self, dev: str) -> int:
        return len(self._free[dev])

    def take(self, dev: str, n: int) -> List[int]:
        stack = self._free[dev]
        if n > len(stack):
            raise OutOfBlocks(f"need {n} {dev} blocks, {len(stack)} free")
        if n == 0:
            return []
        out = stack[-n:]
        del stack[-n:]
        out.reverse()
        return out

    def give(self, dev: str, slots: List[int]) -> None:
        self._free[dev].extend(reversed(slots))

    def __repr__(self) -> str:
        return (f"BlockPools(gpu={self.gpu_blocks_free}/{self.gpu_blocks_total}, "
                f"cpu={self.cpu_blocks_free}/{self.cpu_blocks_total}, tpb={self.tokens_per_block})")


def activation_reserve(model: ModelSpec, max_input_tokens: int) -> float:
    return 2.0 * max_input_tokens * model.hidden * model.f_precision * ACTIVATION_FACTOR


def pool_size_from_hardware(model: ModelSpec, hw: HardwareSpec, max_input_tokens: int,
                            tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK,
                            cpu_pool_factor: float = DEFAULT_CPU_POOL_FACTOR) -> BlockPools:
    """Size the GPU pool the way a profiling pass would; the CPU pool is a multiple of it."""
    total_mem = hw.gpu_mem * hw.n_gpus
    if total_mem <= model.weight_bytes:
        raise ConfigurationError(
            f"model does not fit: weights {model.weight_bytes / 1e9:.1f} GB, "
            f"memory {total_mem / 1e9:.1f} GB")
    kv_bytes = (total_mem - model.weight_bytes - activation_reserve(model, max_input_tokens)) \
        * hw.kv_reserve_fraction
    if kv_bytes <= 0:
        raise ConfigurationError("model does not fit: no memory left for KV blocks")
    gpu_blocks = int(kv_bytes // (tokens_per_block * kv_bytes_per_token_layer(model)))
    if gpu_blocks < model.n_layers:
        raise ConfigurationError("model does not fit: KV pool smaller than one block per layer")
    return BlockPools(gpu_blocks, int(gpu_blocks * cpu_pool_factor), tokens_per_block)


@dataclass(frozen=True)
class PlacementPlan:
    retained_layer_indices: FrozenSet[int]
    offloaded_layer_indices: FrozenSet[int]


def layer_placement(n_layers: int, x: int) -> PlacementPlan:
    """Spread ``x`` GPU-retained layers evenly; layer 0 is offloaded first."""
    if not 0 <= x <= n_layers:
        raise ValueError(f"x must be in [0, {n_layers}]")
    retained = frozenset((2 * j + 1) * n_layers // (2 * x) for j in range(x)) if x else frozenset()
    return PlacementPlan(retained, frozenset(range(n_layers)) - retained)


@dataclass
class RequestKV:
    tokens: int
    home: List[str]  # device new blocks of each layer go to
    blocks: List[List[Tuple[str, int]]]  # per layer: (device, slot) per logical block
    gpu_allocated: int = 0  # live GPU blocks
    cpu_allocated: int = 0
    cpu_counts: List[int] = field(default_factory=list)  # CPU blocks per layer

    def __post_init__(self):
        if not self.cpu_counts:
            self.cpu_counts = [sum(1 for dev, _ in layer if dev == CPU) for layer in self.blocks]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks[0])

    def gpu_layers(self) -> List[int]:
        return [l for l, h in enumerate(self.home) if h == GPU]

    def cpu_tokens(self, layer: int, tokens_per_block: int) -> int:
        n = self.cpu_counts[layer]
        if n and self.blocks[layer][-1][0] == CPU:
            return n * tokens_per_block - (len(self.blocks[layer]) * tokens_per_block - self.tokens)
        return n * tokens_per_block

    @property
    def fully_gpu(self) -> bool:
        return self.cpu_allocated == 0


@dataclass
class OffloadJob:
    id: int
    request_id: int
    layers: List[int]
    bytes: int
    gpu_slots: List[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.layers


@dataclass
class PromoteJob:
    """Host-resident blocks being copied back into reserved GPU slots."""

    id: int
    request_id: int
    layers: List[int]
    bytes: int
    moves: List[Tuple[int, int, int]] = field(default_factory=list)  # (layer, block, gpu slot)

    @property
    def empty(self) -> bool:
        return not self.moves


@dataclass(frozen=True)
class FetchJob:
    request_id: int
    layer: int
    bytes: int


class KVManager:
    """Owns the pools and the block table; only the engine's event loop mutates it."""

    def __init__(self, model: ModelSpec, pools: BlockPools, debug: bool = False):
        self.model = model
        self.pools = pools
        self.table: Dict[int, RequestKV] = {}
        self.send_buffer: Dict[int, List[int]] = {}
        self.recv_buffer: Dict[int, PromoteJob] = {}
        self.kv_bytes = kv_bytes_per_token_layer(model)
        self.debug = debug
        self._job_ids = itertools.count()

    @property
    def tpb(self) -> int:
        return self.pools.tokens_per_block

    @property
    def sending_gpu_blocks(self) -> int:
        """GPU slots that return to the pool once their offload lands."""
        return sum(len(s) for s in self.send_buffer.values())

    @property
    def inflight_gpu_blocks(self) -> int:
        return self.sending_gpu_blocks + sum(len(j.moves) for j in self.recv_buffer.values())

    def blocks_for(self, tokens: int) -> int:
        return math.ceil(tokens / self.tpb)

    def prefill_demand(self, tokens: int, x: int) -> Tuple[int, int]:
        """(GPU blocks, CPU blocks) a prompt of ``tokens`` needs with ``x`` retained layers."""
        nb = self.blocks_for(tokens)
        return nb * x, nb * (self.model.n_layers - x)

    def can_allocate_prefill(self, tokens: int, x: int) -> bool:
        g, c = self.prefill_demand(tokens, x)
        return g <= self.pools.gpu_blocks_free and c <= self.pools.cpu_blocks_free

    def allocate_prefill(self, rid: int, tokens: int, x: int) -> Tuple[int, int]:
        """Allocate prompt KV with ``x`` layers on GPU; atomic, raises OutOfBlocks."""
        if rid in self.table:
            raise KVError(f"request {rid} already has KV allocated")
        L = self.model.n_layers
        plan = layer_placement(L, x)
        g, c = self.prefill_demand(tokens, x)
        if g > self.pools.gpu_blocks_free or c > self.pools.cpu_blocks_free:
            raise OutOfBlocks(f"request {rid}: need {g} GPU / {c} CPU blocks")
        nb = self.blocks_for(tokens)
        gslots = self.pools.take(GPU, g)
        cslots = self.pools.take(CPU, c)
        home, blocks = [], []
        gi = ci = 0
        for layer in range(L):
            if layer in plan.retained_layer_indices:
                home.append(GPU)
                blocks.append([(GPU, s) for s in gslots[gi:gi + nb]])
                gi += nb
            else:
                home.append(CPU)
                blocks.append([(CPU, s) for s in cslots[ci:ci + nb]])
                ci += nb
        self.table[rid] = RequestKV(tokens, home, blocks, g, c)
        self._check()
        return g, c

    def _entry(self, rid: int) -> RequestKV:
        try:
            return self.table[rid]
        except KeyError:
            raise KVError(f"unknown request {rid}") from None

    def gpu_layer_count(self, rid: int) -> int:
        return self._entry(rid).home.count(GPU)

    def plan_offload(self, rid: int, mode: str) -> OffloadJob:
        """Move retained layers to the host: ``half`` takes ceil(x/2) lowest-index ones."""
        if mode not in ("half", "full"):
            raise ValueError(f"mode must be 'half' or 'full', got {mode!r}")
        ent = self._entry(rid)
        retained = ent.gpu_layers()
        n = math.ceil(len(retained) / 2) if mode == "half" else len(retained)
        layers = retained[:n]
        job = OffloadJob(next(self._job_ids), rid, [], 0)
        if not layers:
            return job
        moving = sum(1 for l in layers for dev, _ in ent.blocks[l] if dev == GPU)
        if moving > self.pools.cpu_blocks_free:
            return job
        cslots = iter(self.pools.take(CPU, moving))
        freed: List[int] = []
        for l in layers:
            new = []
            for dev, slot in ent.blocks[l]:
                if dev == GPU:
                    freed.append(slot)
                    new.append((CPU, next(cslots)))
                else:
                    new.append((dev, slot))
            ent.blocks[l] = new
            ent.home[l] = CPU
            ent.cpu_counts[l] = len(new)
        ent.cpu_allocated += moving
        ent.gpu_allocated -= moving  # these now count as send-buffer blocks
        job.layers = layers
        job.bytes = len(layers) * ent.tokens * self.kv_bytes
        job.gpu_slots = freed
        self.send_buffer[job.id] = freed
        self._check()
        return job

    def finish_offload(self, job: OffloadJob) -> int:
        slots = self.send_buffer.pop(job.id, None)
        if slots is None:
            return 0
        self.pools.give(GPU, slots)
        self._check()
        return len(slots)

    def promote_demand(self, rid: int) -> Tuple[int, int]:
        """(GPU blocks, layers) needed to bring every host-resident block of ``rid`` back."""
        ent = self._entry(rid)
        return ent.cpu_allocated, sum(1 for c in ent.cpu_counts if c)

    def plan_promote(self, rid: int) -> PromoteJob:
        """Reserve GPU slots for all host-resident blocks of ``rid``; the table flips on finish."""
        ent = self._entry(rid)
        job = PromoteJob(next(self._job_ids), rid, [], 0)
        need = ent.cpu_allocated
        if need == 0 or need > self.pools.gpu_blocks_free:
            return job
        if any(j.request_id == rid for j in self.recv_buffer.values()):
            return job  # one promotion per request at a time
        slots = iter(self.pools.take(GPU, need))
        for layer, row in enumerate(ent.blocks):
            if not ent.cpu_counts[layer]:
                continue
            job.layers.append(layer)
            job.bytes += ent.cpu_tokens(layer, self.tpb) * self.kv_bytes
            for b, (dev, _) in enumerate(row):
                if dev == CPU:
                    job.moves.append((layer, b, next(slots)))
        self.recv_buffer[job.id] = job
        self._check()
        return job

    def finish_promote(self, job: PromoteJob) -> int:
        if self.recv_buffer.pop(job.id, None) is None:
            return 0
        ent = self.table.get(job.request_id)
        if ent is None:  # released while copying: the reserved slots just go back
            self.pools.give(GPU, [slot for _, _, slot in job.moves])
            self._check()
            return 0
        freed = []
        for layer, b, slot in job.moves:
            dev, old = ent.blocks[layer][b]
            if dev != CPU:
                raise KVError(f"request {job.request_id}: promoted block not on host")
            freed.append(old)
            ent.blocks[layer][b] = (GPU, slot)
            ent.cpu_counts[layer] -= 1
        for layer in job.layers:
            ent.home[layer] = GPU
        ent.gpu_allocated += len(job.moves)
        ent.cpu_allocated -= len(job.moves)
        self.pools.give(CPU, freed)
        self._check()
        return len(job.moves)

    def plan_decode_fetch(self, rid: int) -> List[FetchJob]:
        ent = self._entry(rid)
        jobs = []
        for layer in range(self.model.n_layers):
            t = ent.cpu_tokens(layer, self.tpb)
            if t:
                jobs.append(FetchJob(rid, layer, t * self.kv_bytes))
        return jobs

    def needs_block(self, rid: int) -> bool:
        ent = self._entry(rid)
        return ent.tokens >= ent.n_blocks * self.tpb

    def append_decode_block(self, rid: int, spill: bool = False) -> bool:
        """Record one more cached token, opening a new block row when the tail is full.

        Returns False (and changes nothing) when the pools cannot supply the row.
        With ``spill`` set, GPU-homed layers that cannot get a GPU block are
        re-homed to the CPU instead.
        """
        ent = self._entry(rid)
        if ent.tokens < ent.n_blocks * self.tpb:
            ent.tokens += 1
            return True
        g = ent.home.count(GPU)
        c = len(ent.home) - g
        if g > self.pools.gpu_blocks_free:
            if not spill or g + c > self.pools.cpu_blocks_free:
                return False
            ent.home = [CPU] * len(ent.home)
            g, c = 0, len(ent.home)
        elif c > self.pools.cpu_blocks_free:
            return False
        gslots = iter(self.pools.take(GPU, g))
        cslots = iter(self.pools.take(CPU, c))
        for layer, h in enumerate(ent.home):
            if h == GPU:
                ent.blocks[layer].append((GPU, next(gslots)))
            else:
                ent.blocks[layer].append((CPU, next(cslots)))
                ent.cpu_counts[layer] += 1
        ent.gpu_allocated += g
        ent.cpu_allocated += c
        ent.tokens += 1
        self._check()
        return True

    def release(self, rid: int) -> Tuple[int, int]:
        ent = self.table.pop(rid, None)
        if ent is None:
            raise KVError(f"release of unknown or already released request {rid}")
        gs = [s for layer in ent.blocks for dev, s in layer if dev == GPU]
        cs = [s for layer in ent.blocks for dev, s in layer if dev == CPU]
        if len(gs) != ent.gpu_allocated or len(cs) != ent.cpu_allocated:
            raise KVError(f"request {rid}: block count drift")
        self.pools.give(GPU, gs)
        self.pools.give(CPU, cs)
        self._check()
        return len(gs), len(cs)

    def _check(self) -> None:
        if self.debug:
            self.check_invariants()

    def check_invariants(self) -> None:
        seen = {GPU: set(), CPU: set()}
        live = {GPU: 0, CPU: 0}
        for rid, ent in self.table.items():
            n = ent.n_blocks
            if ent.tokens > n * self.tpb or (n and ent.tokens <= (n - 1) * self.tpb):
                raise KVError(f"request {rid}: blocks do not tile {ent.tokens} tokens")
            for li, layer in enumerate(ent.blocks):
                if len(layer) != n:
                    raise KVError(f"request {rid}: ragged block table")
                if ent.cpu_counts[li] != sum(1 for d, _ in layer if d == CPU):
                    raise KVError(f"request {rid}: stale per-layer CPU count")
                for dev, slot in layer:
                    if slot in seen[dev]:
                        raise KVError(f"{dev} slot {slot} mapped twice")
                    seen[dev].add(slot)
                    live[dev] += 1
        for slots in itertools.chain(self.send_buffer.values(),
                                     ([m[2] for m in j.moves] for j in self.recv_buffer.values())):
            for slot in slots:
                if slot in seen[GPU]:
                    raise KVError(f"in-flight slot {slot} also live")
                seen[GPU].add(slot)
        inflight = self.inflight_gpu_blocks
        p = self.pools
        if p.gpu_blocks_free + live[GPU] + inflight != p.gpu_blocks_total:
            raise KVError("GPU block conservation violated: "
                          f"{p.gpu_blocks_free}+{live[GPU]}+{inflight} != {p.gpu_blocks_total}")
        if p.cpu_blocks_free + live[CPU] != p.cpu_blocks_total:
            raise KVError("CPU block conservation violated")
        if seen[GPU] & set(p._free[GPU]) or seen[CPU] & set(p._free[CPU]):
            raise KVError("slot is both free and in use")

    def dump(self) -> str:
        """One line per (request, block, layer): ``rid block layer DEV:slot``."""
        lines = []
        for rid in sorted(self.table):
            ent = self.table[rid]
            for b in range(ent.n_blocks):
                for layer in range(len(ent.blocks)):
                    dev, slot = ent.blocks[layer][b]
                    lines.append(f"{rid} {b} {layer} {dev}:{slot}")
        return "\n".join(lines) + ("\n" if lines else "")
