"""Store-and-forward delivery of sealed envelopes over an intermittent link.

The device enqueues envelopes as incidents are recorded; a consumer calls
:func:`tick` with the simulated clock. While the link is up the head of the
queue is sent whole (``latency = bytes / bandwidth * 1000 + rtt``). While it
is down, envelopes older than the deadline trigger a metadata-only text
fallback record and stay queued for later full delivery.
"""
from __future__ import annotations

import bisect
import itertools
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import vault
from .errors import QueueFull

DEFAULT_CAPACITY = 1024
DEFAULT_DEADLINE_MS = 300_000


@dataclass(frozen=True)
class LinkInterval:
    """Link is up on ``[from_ms, to_ms)`` with the given bandwidth and RTT."""

    from_ms: int
    to_ms: float
    bandwidth_bytes_per_s: float
    rtt_ms: float

    def __post_init__(self):
        if not self.to_ms > self.from_ms:
            raise ValueError(f"empty link interval [{self.from_ms}, {self.to_ms})")
        if not self.bandwidth_bytes_per_s > 0 or self.rtt_ms < 0:
            raise ValueError("bandwidth must be positive and rtt non-negative")

    def transfer_ms(self, nbytes: int) -> float:
        return nbytes / self.bandwidth_bytes_per_s * 1000.0 + self.rtt_ms


class LinkModel:
    def __init__(self, schedule=()):
        intervals = [iv if isinstance(iv, LinkInterval) else LinkInterval(*iv) for iv in schedule]
        for a, b in zip(intervals, intervals[1:]):
            if b.from_ms < a.to_ms:
                raise ValueError("link intervals must be sorted and non-overlapping")
        self.schedule = tuple(intervals)
        self._starts = [iv.from_ms for iv in intervals]

    @classmethod
    def always_up(cls, bandwidth_bytes_per_s=1_000_000, rtt_ms=50) -> "LinkModel":
        return cls([LinkInterval(0, math.inf, bandwidth_bytes_per_s, rtt_ms)])

    def interval_at(self, t_ms) -> LinkInterval | None:
        i = bisect.bisect_right(self._starts, t_ms) - 1
        if i >= 0 and t_ms < self.schedule[i].to_ms:
            return self.schedule[i]
        return None

    def is_up(self, t_ms) -> bool:
        return self.interval_at(t_ms) is not None

    def next_up(self, t_ms) -> float | None:
        """Earliest time >= ``t_ms`` at which the link is up, or None."""
        if self.is_up(t_ms):
            return t_ms
        i = bisect.bisect_right(self._starts, t_ms)
        return self.schedule[i].from_ms if i < len(self.schedule) else None

    def to_list(self):
        return [[iv.from_ms, iv.to_ms, iv.bandwidth_bytes_per_s, iv.rtt_ms] for iv in self.schedule]

    def __repr__(self):
        return f"LinkModel({self.to_list()!r})"


@dataclass(frozen=True)
class TextFallbackRecord:
    session_id: bytes
    timestamp_ms: int
    cls: int
    confidence_x1e4: int

    payload_bytes = 0

    @classmethod
    def from_envelope(cls, envelope: bytes) -> "TextFallbackRecord":
        meta = vault.read_header(envelope).meta
        return cls(meta.session_id, meta.timestamp_ms, int(meta.cls), meta.confidence_x1e4)

    def line(self) -> str:
        return f"SMS {self.session_id.hex()} {self.timestamp_ms} {self.cls} {self.confidence_x1e4}"


@dataclass(frozen=True)
class Transfer:
    envelope_id: int
    latency_ms: float
    bytes: int
    started_at_ms: float
    queued_ms: float
    data: bytes = field(repr=False, compare=False, default=b"")

    @property
    def completed_at_ms(self) -> float:
        return self.started_at_ms + self.latency_ms


@dataclass
class _Pending:
    envelope_id: int
    data: bytes
    enqueued_at: int
    fallback_sent: bool = False


class OutboundQueue:
    """FIFO of sealed envelopes awaiting upload.

    Safe for one producer thread calling :meth:`enqueue` and one consumer
    thread calling :meth:`tick`.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, deadline_ms: int = DEFAULT_DEADLINE_MS):
        if capacity < 1 or deadline_ms <= 0:
            raise ValueError("capacity and deadline_ms must be positive")
        self.capacity = capacity
        self.deadline_ms = deadline_ms
        self.delivered = 0
        self.fallback_sent = 0
        self._pending: deque[_Pending] = deque()
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._busy_until = -math.inf
        self._last_tick = -math.inf

    def __len__(self):
        with self._lock:
            return len(self._pending)

    @property
    def pending_ids(self) -> list[int]:
        with self._lock:
            return [p.envelope_id for p in self._pending]

    def enqueue(self, envelope: bytes, now_ms: int) -> int:
        with self._lock:
            if len(self._pending) >= self.capacity:
                raise QueueFull(f"outbound queue holds {self.capacity} envelopes")
            item = _Pending(next(self._ids), bytes(envelope), now_ms)
            self._pending.append(item)
            return item.envelope_id

    def _fallbacks_due(self, now_ms) -> list[TextFallbackRecord]:
        records = []
        for item in self._pending:
            if not item.fallback_sent and now_ms - item.enqueued_at > self.deadline_ms:
                item.fallback_sent = True
                self.fallback_sent += 1
                records.append(TextFallbackRecord.from_envelope(item.data))
        return records

    def tick(self, link: LinkModel, now_ms, agent_sink: Callable[[bytes], object] | None = None,
             budget_ms: float = 0.0) -> tuple[list[Transfer], list[TextFallbackRecord]]:
        """Advance the queue to ``now_ms``.

        Envelopes may start transmitting anywhere in ``[now_ms, now_ms +
        budget_ms]`` once the previous transfer has finished, and must finish
        before the current link interval closes. Each delivered envelope is
        handed to ``agent_sink``; if the sink raises, the envelope goes back to
        the head of the queue and the exception propagates.
        """
        transfers: list[Transfer] = []
        with self._lock:
            if now_ms < self._last_tick:
                raise ValueError(f"tick time went backwards: {now_ms} < {self._last_tick}")
            self._last_tick = now_ms
            iv = link.interval_at(now_ms)
            if iv is None:
                return transfers, self._fallbacks_due(now_ms)
        horizon = now_ms + budget_ms
        while True:
            with self._lock:
                if not self._pending:
                    break
                start = max(now_ms, self._busy_until)
                head = self._pending[0]
                latency = iv.transfer_ms(len(head.data))
                if start > horizon or start + latency > iv.to_ms:
                    break
                self._pending.popleft()
            if agent_sink is not None:
                try:
                    agent_sink(head.data)
                except BaseException:
                    with self._lock:
                        self._pending.appendleft(head)
                    raise
            with self._lock:
                self._busy_until = start + latency
                self.delivered += 1
            transfers.append(
                Transfer(head.envelope_id, latency, len(head.data), start,
                         start - head.enqueued_at, head.data)
            )
        return transfers, []


def enqueue(queue: OutboundQueue, envelope: bytes, now_ms: int) -> OutboundQueue:
    queue.enqueue(envelope, now_ms)
    return queue


def tick(queue: OutboundQueue, link: LinkModel, now_ms, agent_sink=None, budget_ms: float = 0.0):
    return queue.tick(link, now_ms, agent_sink, budget_ms)
