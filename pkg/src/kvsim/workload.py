"""Request streams: synthetic fixed-length and ShareGPT-like workloads, JSONL trace replay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

# ShareGPT surrogate: log-normal lengths clamped to the dataset's observed range.
SHAREGPT_MU = 5.0
SHAREGPT_SIGMA = 1.0
SHAREGPT_MIN = 4
SHAREGPT_MAX = 2300


class TraceError(ValueError):
    """A trace file record could not be parsed or violates the trace invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RequestTemplate:
    id: int
    arrival: float
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if not self.arrival >= 0:
            raise ValueError(f"arrival must be >= 0, got {self.arrival}")
        if self.prompt_tokens < 1:
            raise ValueError(f"prompt_tokens must be >= 1, got {self.prompt_tokens}")
        if self.output_tokens < 1:
            raise ValueError(f"output_tokens must be >= 1, got {self.output_tokens}")


@dataclass(frozen=True)
class Trace:
    requests: Tuple[RequestTemplate, ...]
    seed: int | None = None

    def __post_init__(self):
        ids = set()
        prev = -math.inf
        for r in self.requests:
            if r.id in ids:
                raise ValueError(f"duplicate request id {r.id}")
            ids.add(r.id)
            if r.arrival < prev:
                raise ValueError("trace arrivals must be nondecreasing")
            prev = r.arrival

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def max_prompt_tokens(self) -> int:
        return max((r.prompt_tokens for r in self.requests), default=0)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def _poisson_arrivals(rng: np.random.Generator, n: int, rate: float) -> np.ndarray:
    gaps = rng.exponential(1.0 / rate, size=n)
    return np.cumsum(gaps)


def _build(arrivals: Iterable[float], prompts: Iterable[int], outputs: Iterable[int],
           seed: int | None) -> Trace:
    reqs = tuple(
        RequestTemplate(i, float(a), int(p), int(o))
        for i, (a, p, o) in enumerate(zip(arrivals, prompts, outputs))
    )
    return Trace(reqs, seed)


def generate_fixed(n: int, prompt_tokens: int, output_tokens: int, rate: float,
                   seed: int) -> Trace:
    if n < 1:
        raise ValueError("n must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be > 0")
    arrivals = _poisson_arrivals(_rng(seed), n, rate)
    return _build(arrivals, [prompt_tokens] * n, [output_tokens] * n, seed)


def sample_lognormal_lengths(rng: np.random.Generator, n: int, mu: float = SHAREGPT_MU,
                             sigma: float = SHAREGPT_SIGMA, lo: int = SHAREGPT_MIN,
                             hi: int = SHAREGPT_MAX) -> np.ndarray:
    raw = rng.lognormal(mu, sigma, size=n)
    return np.clip(np.rint(raw), lo, hi).astype(np.int64)


def generate_sharegpt_like(n: int, rate: float, seed: int, mu: float = SHAREGPT_MU,
                           sigma: float = SHAREGPT_SIGMA) -> Trace:
    """Poisson arrivals with independent log-normal prompt and output lengths in [4, 2300]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be > 0")
    rng = _rng(seed)
    arrivals = _poisson_arrivals(rng, n, rate)
    prompts = sample_lognormal_lengths(rng, n, mu, sigma)
    outputs = sample_lognormal_lengths(rng, n, mu, sigma)
    return _build(arrivals, prompts, outputs, seed)


_REQUIRED = ("arrival_s", "prompt_tokens", "output_tokens")


def _parse_record(text: str, lineno: int) -> Tuple[float, int, int, int | None]:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceError(f"parse error: {exc.msg}", lineno) from None
    if not isinstance(rec, dict):
        raise TraceError("record must be an object", lineno)
    for key in _REQUIRED:
        if key not in rec:
            raise TraceError(f"missing field {key!r}", lineno)
    try:
        arrival = float(rec["arrival_s"])
        prompt = rec["prompt_tokens"]
        output = rec["output_tokens"]
        if isinstance(prompt, bool) or isinstance(output, bool) or int(prompt) != prompt or int(output) != output:
            raise ValueError
        prompt, output = int(prompt), int(output)
    except (TypeError, ValueError):
        raise TraceError("arrival_s must be a number and token counts integers", lineno) from None
    if not arrival >= 0:
        raise TraceError(f"invariant violation: arrival_s must be >= 0, got {arrival}", lineno)
    if prompt < 1:
        raise TraceError(f"invariant violation: prompt_tokens must be >= 1, got {prompt}", lineno)
    if output < 1:
        raise TraceError(f"invariant violation: output_tokens must be >= 1, got {output}", lineno)
    rid = rec.get("id")
    return arrival, prompt, output, rid


def load_trace(path: str | Path) -> Trace:
    """Read a JSONL trace. Blank and ``#`` lines are skipped; unsorted arrivals are sorted.

    Records without an ``id`` are numbered by file order.
    """
    rows: List[Tuple[float, int, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            arrival, prompt, output, rid = _parse_record(text, lineno)
            rows.append((arrival, prompt, output, len(rows) if rid is None else int(rid)))
    if any(b[0] < a[0] for a, b in zip(rows, rows[1:])):
        log.warning("trace %s has unsorted arrivals; sorting by arrival_s", path)
        rows.sort(key=lambda r: r[0])  # stable: ties keep file order
    reqs = tuple(RequestTemplate(rid, a, p, o) for a, p, o, rid in rows)
    try:
        return Trace(reqs)
    except ValueError as exc:
        raise TraceError(str(exc)) from None


def save_trace(trace: Trace | Sequence[RequestTemplate], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace:
            fh.write(json.dumps({"id": r.id, "arrival_s": r.arrival, "prompt_tokens": r.prompt_tokens,
                                 "output_tokens": r.output_tokens}) + "\n")
