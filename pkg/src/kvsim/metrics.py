"""Per-request latency records and run-level aggregates."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence

import numpy as np

REQUEST_COLUMNS = ("id", "arrival", "queuing_s", "prefill_s", "ttft_s", "mean_tpot_s",
                   "output_tokens", "violated")


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival: float
    queuing_s: float
    prefill_s: float
    ttft_s: float
    mean_tpot_s: float  # 0 for single-token outputs, which have no inter-token gap
    output_tokens: int
    finish: float
    ttft_violated: bool
    tpot_violated: bool
    preemptions: int = 0

    @property
    def violated(self) -> bool:
        return self.ttft_violated or self.tpot_violated


def _pct(values: Sequence[float], q: float) -> float:
    return float(np.percentile(values, q)) if len(values) else math.nan


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


@dataclass
class MetricsReport:
    records: List[RequestRecord]
    n_requests: int
    rejected: int = 0
    truncated: bool = False
    preemptions: int = 0
    sim_end: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def completed(self) -> int:
        return len(self.records)

    def summary(self) -> Dict[str, float]:
        recs = self.records
        ttft = [r.ttft_s for r in recs]
        tpot = [r.mean_tpot_s for r in recs if r.output_tokens > 1]
        queuing = [r.queuing_s for r in recs]
        prefill = [r.prefill_s for r in recs]
        out_tokens = sum(r.output_tokens for r in recs)
        if recs:
            span = max(r.finish for r in recs) - min(r.arrival for r in recs)
        else:
            span = 0.0
        mean_ttft = _mean(ttft)
        n = len(recs)
        s = {
            "requests": self.n_requests,
            "completed": n,
            "rejected": self.rejected,
            "truncated": int(self.truncated),
            "mean_ttft_s": mean_ttft,
            "p50_ttft_s": _pct(ttft, 50),
            "p99_ttft_s": _pct(ttft, 99),
            "mean_queuing_s": _mean(queuing),
            "mean_prefill_s": _mean(prefill),
            "queuing_share": _mean(queuing) / mean_ttft if n and mean_ttft > 0 else math.nan,
            "mean_tpot_s": _mean(tpot),
            "p99_tpot_s": _pct(tpot, 99),
            "throughput_tok_s": out_tokens / span if span > 0 else math.nan,
            "violation_rate": sum(r.violated for r in recs) / n if n else math.nan,
            "ttft_violations": sum(r.ttft_violated for r in recs),
            "tpot_violations": sum(r.tpot_violated for r in recs),
            "preemptions": self.preemptions,
            "sim_end_s": self.sim_end,
        }
        s.update(self.extra)
        return s

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "requests": [asdict(r) for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    def requests_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REQUEST_COLUMNS)
        for r in sorted(self.records, key=lambda r: r.id):
            w.writerow([r.id, f"{r.arrival:.9f}", f"{r.queuing_s:.9f}", f"{r.prefill_s:.9f}",
                        f"{r.ttft_s:.9f}", f"{r.mean_tpot_s:.9f}", r.output_tokens, int(r.violated)])
        return buf.getvalue()
