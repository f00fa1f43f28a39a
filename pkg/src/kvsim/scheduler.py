"""SLO-aware prefill admission, output-length buckets and GPU block forecasting.

The admission rule protects the TPOT target of requests already decoding:
each of them yields a time budget for inserting prefills, and the FCFS
queue prefix whose summed prefill time stays strictly under the smallest
budget may run.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import List, Optional, Sequence, Tuple

import numpy as np

Bucket = Tuple[int, int]  # [lo, hi)


@dataclass(frozen=True)
class SLOSpec:
    ttft_slo: float = 3.0
    tpot_slo: float = 0.2

    def __post_init__(self):
        if self.ttft_slo <= 0 or self.tpot_slo <= 0:
            raise ValueError("SLO thresholds must be > 0")


@dataclass(frozen=True)
class LengthBuckets:
    """Half-open length ranges ``[b[i], b[i+1])`` covering ``[1, b[-1])``."""

    boundaries: Tuple[int, ...]
    accuracy: float = 0.8

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 1:
            raise ValueError("boundaries must start at 1 and define at least one bucket")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")

    @property
    def n(self) -> int:
        return len(self.boundaries) - 1

    @property
    def max_len(self) -> int:
        return self.boundaries[-1] - 1

    def bucket(self, i: int) -> Bucket:
        return self.boundaries[i], self.boundaries[i + 1]

    def index_of(self, length: int) -> int:
        if length < 1:
            raise ValueError("length must be >= 1")
        # lengths past the last boundary land in the top bucket
        return min(bisect.bisect_right(self.boundaries, length) - 1, self.n - 1)

    @classmethod
    def from_cuts(cls, cuts: Sequence[float], max_len: int, accuracy: float = 0.8) -> "LengthBuckets":
        inner = sorted({int(math.ceil(c)) for c in cuts if 1 < math.ceil(c) <= max_len})
        return cls(tuple([1] + inner + [max_len + 1]), accuracy)

    @classmethod
    def deciles_lognormal(cls, mu: float, sigma: float, lo: int, hi: int,
                          accuracy: float = 0.8) -> "LengthBuckets":
        nd = NormalDist()
        cuts = [min(max(math.exp(mu + sigma * nd.inv_cdf(q / 10)), lo), hi) for q in range(1, 10)]
        return cls.from_cuts(cuts, hi, accuracy)

    @classmethod
    def deciles_of(cls, lengths: Sequence[int], accuracy: float = 0.8) -> "LengthBuckets":
        arr = np.asarray(lengths)
        cuts = np.quantile(arr, np.arange(1, 10) / 10).tolist()
        return cls.from_cuts(cuts, int(arr.max()), accuracy)


def predict_bucket(true_output_len: int, buckets: LengthBuckets, rng: np.random.Generator) -> Bucket:
    """Oracle classifier: right bucket with probability ``accuracy``, else a neighbour."""
    i = buckets.index_of(true_output_len)
    if buckets.n == 1 or rng.random() < buckets.accuracy:
        return buckets.bucket(i)
    if i == 0:
        j = 1
    elif i == buckets.n - 1:
        j = i - 1
    else:
        j = i - 1 if rng.random() < 0.5 else i + 1
    return buckets.bucket(j)


@dataclass
class DecodingState:
    t_past: float
    n_past: int
    bucket: Bucket

    def __post_init__(self):
        if self.t_past < 0:
            raise ValueError("t_past must be >= 0")


def future_tokens(state: DecodingState) -> int:
    return max(1, state.bucket[0] - state.n_past)


def allow_prefill_budget(state: DecodingState, slo: SLOSpec,
                         current_tpot: Optional[float] = None) -> float:
    """Time that may still be spent on inserted prefills before this request misses TPOT.

    The remaining decode time is projected at the request's own mean pace unless
    ``current_tpot`` (a system-wide per-token time) is given.
    """
    if state.n_past < 1:
        raise ValueError("budget needs at least one generated token")
    n_future = future_tokens(state)
    pace = state.t_past / state.n_past if current_tpot is None else current_tpot
    t_future = pace * n_future
    return slo.tpot_slo * (state.n_past + n_future) - (state.t_past + t_future)


def min_budget(states: Sequence[DecodingState], slo: SLOSpec,
               current_tpot: Optional[float] = None) -> float:
    budgets = [allow_prefill_budget(s, slo, current_tpot) for s in states if s.n_past >= 1]
    return min(budgets) if budgets else math.inf


def max_admissions(prefill_times: Sequence[float], states: Sequence[DecodingState],
                   slo: SLOSpec, current_tpot: Optional[float] = None) -> int:
    """Longest queue prefix whose cumulative prefill time is strictly below the tightest budget."""
    limit = min_budget(states, slo, current_tpot)
    n = 0
    total = 0.0
    for t in prefill_times:
        if not total + t < limit:
            break
        total += t
        n += 1
    return n


@dataclass(frozen=True)
class SeqForecast:
    """One decoding sequence as the forecaster sees it."""

    gpu_blocks: int  # GPU blocks held now
    blocks_per_stage: int  # GPU blocks it needs per stage while alive
    finish_stage: Optional[int] = None  # stage at which it is predicted to end


@dataclass
class ForecastState:
    avail: int
    threshold: int
    sequences: List[SeqForecast] = field(default_factory=list)
    admissions: int = 0  # GPU blocks planned for prefills at stage 0


def predicted_finish_stage(n_past: int, bucket: Bucket, tokens_per_block: int) -> int:
    """Stage (``tokens_per_block`` decode iterations each) in which the bucket median is reached."""
    lo, hi = bucket
    median = (lo + hi - 1) / 2
    remaining = max(0.0, median - n_past)
    return int(remaining // tokens_per_block)


def forecast_availability(fs: ForecastState, horizon: int) -> List[int]:
    """Free-block trajectory ``Avail(0..horizon)`` from Avail(t+1) = Avail(t) + Released(t) - Allocated(t)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    avail = [fs.avail]
    for t in range(horizon):
        released = 0
        allocated = fs.admissions if t == 0 else 0
        for s in fs.sequences:
            if s.finish_stage is not None and s.finish_stage < t:
                continue
            if s.finish_stage == t:
                released += s.gpu_blocks + t * s.blocks_per_stage
            else:
                allocated += s.blocks_per_stage
        avail.append(avail[-1] + released - allocated)
    return avail


def offload_decision(forecast: Sequence[int], threshold: int, half_reclaim: int) -> str:
    """``none`` unless the forecast dips strictly below threshold; ``full`` if half is not enough."""
    low = min(forecast)
    if low >= threshold:
        return "none"
    if low + half_reclaim >= threshold:
        return "half"
    return "full"
