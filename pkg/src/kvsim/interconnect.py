"""Shared PCIe link: KV transfer chunks and tensor-parallel all-reduce windows.

Transfers are split into chunks that run back to back in submission order.
Before a chunk starts the bus is checked; if an all-reduce window covers the
start, the chunk waits ``delta`` times the remaining all-reduce time and
checks again. A chunk never starts if it would run into a window already
registered, and an all-reduce registered while a chunk is in flight waits for
that chunk. Placement of chunks that have not started yet stays provisional
until simulated time passes them, so windows registered later still push
them back.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Tuple

from .cost_model import HardwareSpec

D2H = "device_to_host"
H2D = "host_to_device"
DEFAULT_CHUNK_BYTES = 16 * 1024 * 1024
MIN_DEFER_S = 1e-6
_EPS = 1e-12


@dataclass
class TransferJob:
    bytes: int
    direction: str
    submit_time: float
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    tag: str = ""
    id: int = field(default=-1)
    start: Optional[float] = None
    end: Optional[float] = None
    deferrals: int = 0

    def __post_init__(self):
        if self.bytes < 0:
            raise ValueError("bytes must be >= 0")
        if self.chunk_bytes <= 0:
            raise ValueError("chunk_bytes must be > 0")
        if self.direction not in (D2H, H2D):
            raise ValueError(f"bad direction {self.direction!r}")

    @property
    def n_chunks(self) -> int:
        return -(-self.bytes // self.chunk_bytes)


@dataclass
class _Pending:
    job: TransferJob
    left: int  # bytes not yet committed
    first_start: Optional[float] = None
    deferrals: int = 0


class PcieBus:
    """One aggregate host link per simulation; mutated only by the event loop."""

    def __init__(self, hw: HardwareSpec, delta: float = 0.5, chunk_bytes: int = DEFAULT_CHUNK_BYTES,
                 keep_log: bool = False):
        self.bandwidth = hw.pcie_bandwidth
        self.contended = hw.pcie_contended
        self.delta = delta
        self.chunk_bytes = chunk_bytes
        self.cursor = 0.0  # end of the last committed chunk
        self.allreduce_until = 0.0
        self.windows: List[Tuple[float, float]] = []  # disjoint, sorted
        self._wfront = 0
        self._pending: Deque[_Pending] = deque()
        self._ends: dict[int, float] = {}
        self._prov: dict[int, float] = {}
        self._prov_idle = 0.0
        self._dirty = False
        self._ids = itertools.count()
        self.keep_log = keep_log
        self.log: List[TransferJob] = []
        # every committed occupancy interval, for invariant checks
        self.keep_intervals = False
        self.chunk_intervals: List[Tuple[float, float]] = []
        self.allreduce_intervals: List[Tuple[float, float]] = []
        self.busy_time = 0.0

    # all-reduce side

    def register_allreduce(self, start: float, duration: float) -> float:
        """Reserve the link for an all-reduce; returns when the link is free of it again."""
        if duration < 0:
            raise ValueError("duration must be >= 0")
        if not self.contended or duration == 0:
            return start + duration
        # cursor covers only chunks committed by advance_to(now), i.e. already started;
        # such a chunk runs to completion first, later ones are laid out around the window
        s = max(start, self.cursor)
        if self.keep_intervals:
            self.allreduce_intervals.append((s, s + duration))
        end = self._add_window(s, s + duration)
        self.allreduce_until = max(self.allreduce_until, end)
        self._dirty = True
        return end

    def _add_window(self, s: float, e: float) -> float:
        """Insert [s, e) into the disjoint sorted window list; returns the merged window's end."""
        ws = self.windows
        i = len(ws)
        while i > self._wfront and ws[i - 1][0] > s:
            i -= 1
        if i > self._wfront and ws[i - 1][1] >= s:
            i -= 1
            s = ws[i][0]
            e = max(e, ws[i][1])
            del ws[i]
        while i < len(ws) and ws[i][0] <= e:
            e = max(e, ws[i][1])
            del ws[i]
        ws.insert(i, (s, e))
        return e

    def allreduce_active(self, t: float) -> bool:
        return any(s <= t < e for s, e in self.windows[self._wfront:])

    # transfer side

    def enqueue(self, job: TransferJob) -> TransferJob:
        if job.id < 0:
            job.id = next(self._ids)
        if job.bytes == 0:
            job.start = job.end = job.submit_time
            self._finish(job)
            return job
        self._pending.append(_Pending(job, job.bytes))
        self._dirty = True
        return job

    def submit_transfer(self, job: TransferJob) -> float:
        """Queue ``job`` and return its completion time given the windows known now."""
        self.enqueue(job)
        return self.completion(job)

    def completion(self, job: TransferJob) -> float:
        if job.id in self._ends:
            return self._ends[job.id]
        if self._dirty:
            self._schedule(None)
        return self._prov[job.id]

    def advance_to(self, t: float) -> None:
        """Commit every chunk that starts before ``t``."""
        if self._pending:
            self._schedule(t)

    @property
    def idle_at(self) -> float:
        """When the link runs out of queued transfer work."""
        if not self._pending:
            return self.cursor
        if self._dirty:
            self._schedule(None)
        return self._prov_idle

    def _finish(self, job: TransferJob) -> None:
        self._ends[job.id] = job.end
        if self.keep_log:
            self.log.append(job)

    def _chunk_start(self, t: float, dur: float, wi: int) -> Tuple[float, int, int]:
        """Earliest start >= t for a chunk of ``dur`` seconds; returns (start, deferrals, wi)."""
        windows = self.windows
        while wi < len(windows) and windows[wi][1] <= t + _EPS:
            wi += 1
        k = wi
        deferrals = 0
        while k < len(windows):
            ws, we = windows[k]
            if ws >= t + dur - _EPS:
                break
            if ws > t:
                t = ws  # would run into a known all-reduce: check again at its start
            rem = we - t
            wait = self.delta * rem
            deferrals += 1
            if rem - wait <= MIN_DEFER_S:
                t = we
                k += 1
            else:
                t += wait
        return t, deferrals, wi

    def _schedule(self, commit_before: Optional[float]) -> None:
        """Lay out every pending chunk; chunks starting before ``commit_before`` become final."""
        can_commit = commit_before is not None
        windows = self.windows
        wi = self._wfront
        t_prev = self.cursor
        prov = {}
        for p in self._pending:
            job = p.job
            cb = job.chunk_bytes
            left = p.left
            first = p.first_start
            t = max(t_prev, job.submit_time)
            while left > 0:
                while wi < len(windows) and windows[wi][1] <= t + _EPS:
                    wi += 1
                if wi >= len(windows):
                    # nothing ahead: remaining chunks run back to back
                    if can_commit and t < commit_before:
                        if math.isinf(commit_before):
                            size = left
                        else:
                            n = int((commit_before - t) * self.bandwidth // cb) + 1
                            size = min(left, n * cb)
                        dur = size / self.bandwidth
                        if p.first_start is None:
                            p.first_start = t
                        self._commit(t, t + dur)
                        p.left -= size
                        first = p.first_start
                        left -= size
                        t += dur
                        if left:
                            can_commit = False
                        continue
                    if first is None:
                        first = t
                    t += left / self.bandwidth
                    left = 0
                    break
                size = min(cb, left)
                dur = size / self.bandwidth
                start, ndef, wi = self._chunk_start(t, dur, wi)
                if can_commit and start < commit_before:
                    if p.first_start is None:
                        p.first_start = start
                    p.deferrals += ndef
                    p.left -= size
                    self._commit(start, start + dur)
                    first = p.first_start
                else:
                    can_commit = False
                    if first is None:
                        first = start
                left -= size
                t = start + dur
            prov[job.id] = t
            t_prev = t
            if p.left == 0:
                job.start, job.end, job.deferrals = p.first_start, t, p.deferrals
            else:
                can_commit = False
        while self._pending and self._pending[0].left == 0:
            self._finish(self._pending.popleft().job)
        self._prov = prov
        self._prov_idle = t_prev
        self._dirty = False
        while self._wfront < len(self.windows) and self.windows[self._wfront][1] <= self.cursor:
            self._wfront += 1
        if self._wfront > 4096:
            del self.windows[:self._wfront]
            self._wfront = 0

    def _commit(self, s: float, e: float) -> None:
        self.cursor = e
        self.busy_time += e - s
        if self.keep_intervals:
            self.chunk_intervals.append((s, e))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["submit", "start", "end", "bytes", "direction", "deferrals", "tag"])
            for j in sorted(self.log, key=lambda j: (j.submit_time, j.id)):
                w.writerow([f"{j.submit_time:.9f}", f"{j.start:.9f}", f"{j.end:.9f}", j.bytes,
                            j.direction, j.deferrals, j.tag])
