"""Analytical time and size models for prefill, decode, KV offload and all-reduce.

Every function here is a pure function of its arguments. Times are seconds,
sizes are bytes, token counts are plain ints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    hidden: int
    n_param: float
    f_precision: int = 2

    def __post_init__(self):
        for attr in ("n_layers", "n_heads", "n_kv_heads", "d_head", "hidden", "n_param", "f_precision"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"ModelSpec.{attr} must be > 0, got {getattr(self, attr)!r}")
        if self.n_kv_heads > self.n_heads:
            raise ValueError("n_kv_heads cannot exceed n_heads")
        if self.hidden != self.n_heads * self.d_head:
            raise ValueError(
                f"hidden ({self.hidden}) must equal n_heads * d_head ({self.n_heads * self.d_head})"
            )

    @property
    def weight_bytes(self) -> float:
        return self.n_param * self.f_precision


@dataclass(frozen=True)
class HardwareSpec:
    """Per-device rates and capacities plus the tensor-parallel degree."""

    name: str
    flops: float
    hbm_bandwidth: float
    pcie_bandwidth: float
    gpu_mem: float
    n_gpus: int = 1
    nvlink: bool = False
    kv_reserve_fraction: float = 0.9

    def __post_init__(self):
        for attr in ("flops", "hbm_bandwidth", "pcie_bandwidth", "gpu_mem", "n_gpus"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"HardwareSpec.{attr} must be > 0, got {getattr(self, attr)!r}")
        if not 0 < self.kv_reserve_fraction <= 1:
            raise ValueError("kv_reserve_fraction must be in (0, 1]")

    @property
    def pcie_contended(self) -> bool:
        """True when tensor-parallel all-reduce traffic shares the PCIe link."""
        return self.n_gpus > 1 and not self.nvlink


@dataclass(frozen=True)
class CostParams:
    alpha: float = 1.0  # prefill correction
    beta: float = 1.0  # offload correction
    gamma: float = 1.0  # decode correction
    delta: float = 0.5  # fraction of remaining all-reduce time to wait before rechecking the bus

    def __post_init__(self):
        for attr in ("alpha", "beta", "gamma", "delta"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"CostParams.{attr} must be > 0")


# Architecture constants follow the public model cards.
MODEL_PRESETS: Dict[str, ModelSpec] = {
    "llama2-7b": ModelSpec("llama2-7b", n_layers=32, n_heads=32, n_kv_heads=32, d_head=128,
                           hidden=4096, n_param=7e9),
    "yi-34b-gqa": ModelSpec("yi-34b-gqa", n_layers=60, n_heads=56, n_kv_heads=8, d_head=128,
                            hidden=7168, n_param=34.4e9),
    "llama3.1-70b-gqa": ModelSpec("llama3.1-70b-gqa", n_layers=80, n_heads=64, n_kv_heads=8,
                                  d_head=128, hidden=8192, n_param=70.6e9),
}

# Nominal datasheet figures: dense fp16 tensor throughput, memory bandwidth,
# PCIe 4.0 x16 host link.
HARDWARE_PRESETS: Dict[str, HardwareSpec] = {
    "l20": HardwareSpec("l20", flops=1.195e14, hbm_bandwidth=8.64e11, pcie_bandwidth=3.2e10,
                        gpu_mem=48e9),
    "a100-80g": HardwareSpec("a100-80g", flops=3.12e14, hbm_bandwidth=2.039e12,
                             pcie_bandwidth=3.2e10, gpu_mem=80e9, nvlink=True),
}


def get_model(name: str) -> ModelSpec:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; known: {sorted(MODEL_PRESETS)}") from None


def get_hardware(name: str, **overrides) -> HardwareSpec:
    try:
        base = HARDWARE_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown hardware preset {name!r}; known: {sorted(HARDWARE_PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def prefill_time(model: ModelSpec, hw: HardwareSpec, p: CostParams, seqlen: int) -> float:
    """Compute-bound prefill estimate for one prompt of ``seqlen`` tokens.

    The device FLOP rate is scaled by the tensor-parallel degree.
    """
    if seqlen < 0:
        raise ValueError("seqlen must be >= 0")
    work = seqlen * (2.0 * model.n_param + 2.0 * seqlen * model.hidden)
    return p.alpha * work / (hw.flops * hw.n_gpus)


def kv_bytes_per_token_layer(model: ModelSpec) -> int:
    # K and V, one layer, one token; GQA shares heads so n_kv_heads is used
    return 2 * model.d_head * model.n_kv_heads * model.f_precision


def offload_time(model: ModelSpec, hw: HardwareSpec, p: CostParams, seqlen: int,
                 layers_offloaded: int) -> float:
    if not 0 <= layers_offloaded <= model.n_layers:
        raise ValueError(
            f"layers_offloaded must be in [0, {model.n_layers}], got {layers_offloaded}"
        )
    return p.beta * seqlen * layers_offloaded * kv_bytes_per_token_layer(model) / hw.pcie_bandwidth


def min_retained_layers(model: ModelSpec, hw: HardwareSpec, p: CostParams, seqlen: int) -> int:
    """Smallest number of layers to keep on GPU so the remaining offload hides under prefill."""
    budget = prefill_time(model, hw, p, seqlen)
    for x in range(model.n_layers + 1):
        if offload_time(model, hw, p, seqlen, model.n_layers - x) <= budget:
            return x
    return model.n_layers  # unreachable: x = L offloads nothing


def decode_step_time(model: ModelSpec, hw: HardwareSpec, p: CostParams,
                     batch_kv_tokens: int) -> float:
    """Memory-bound decode iteration: stream the weights plus every cached KV byte once."""
    if batch_kv_tokens < 0:
        raise ValueError("batch_kv_tokens must be >= 0")
    kv = batch_kv_tokens * model.n_layers * kv_bytes_per_token_layer(model)
    return p.gamma * (model.weight_bytes + kv) / (hw.hbm_bandwidth * hw.n_gpus)


def allreduce_time(model: ModelSpec, hw: HardwareSpec, tokens: int) -> float:
    """PCIe time of the two per-layer all-reduces (attention + FFN) for ``tokens`` activations.

    Zero when there is no tensor parallelism or the all-reduce rides NVLink.
    """
    if not hw.pcie_contended or tokens <= 0:
        return 0.0
    ring = (hw.n_gpus - 1) / hw.n_gpus
    one = 2.0 * tokens * model.hidden * model.f_precision * ring / hw.pcie_bandwidth
    return 2.0 * one
