"""Deterministic event queue with seeded per-message latency."""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

BROADCAST = "*"


@dataclass(frozen=True, order=True)
class SimEvent:
    deliver_at: int
    seq: int
    sent_at: int = field(compare=False)
    src: str = field(compare=False)
    dst: str = field(compare=False)
    payload: Any = field(compare=False)


class Scheduler:
    """Single source of event order.

    Events are delivered in (slot, sequence) order; the sequence number is
    taken from a global counter when the event is enqueued. Latencies come
    from the scheduler's own generator so node code never touches randomness.
    With ``reorder`` set, each latency is pushed to one of the two bounds,
    which maximises overtaking between messages while staying in range.
    """

    def __init__(self, seed: int, latency_min: int = 1, latency_max: int = 1, reorder: bool = False):
        if latency_min < 1 or latency_max < latency_min:
            raise ValueError("latency must satisfy 1 <= min <= max")
        self.rng = random.Random(seed)
        self.latency_min = latency_min
        self.latency_max = latency_max
        self.reorder = reorder
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[SimEvent], None]] = {}
        self.delivered = 0

    def register(self, actor: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[actor] = handler

    @property
    def actors(self) -> list[str]:
        return sorted(self._handlers)

    def latency(self) -> int:
        if self.reorder:
            return self.rng.choice((self.latency_min, self.latency_max))
        return self.rng.randint(self.latency_min, self.latency_max)

    def send(self, src: str, dst: str, payload: Any, delay: int | None = None) -> SimEvent:
        d = self.latency() if delay is None else delay
        if d < 1:
            raise ValueError("events must be delivered strictly later than they are sent")
        ev = SimEvent(self.now + d, self._seq, self.now, src, dst, payload)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def broadcast(self, src: str, dsts: Iterable[str], payload: Any) -> list[SimEvent]:
        return [self.send(src, d, payload) for d in dsts]

    def pending(self) -> int:
        return len(self._queue)

    def next_slot(self) -> int | None:
        return self._queue[0].deliver_at if self._queue else None

    def step(self) -> SimEvent:
        """Deliver exactly one event to its handler."""
        ev = heapq.heappop(self._queue)
        self.now = max(self.now, ev.deliver_at)
        handler = self._handlers.get(ev.dst)
        self.delivered += 1
        if handler is not None:
            handler(ev)
        return ev

    def run_until(self, slot: int) -> int:
        """Deliver every event due at or before ``slot``; returns how many."""
        n = 0
        while self._queue and self._queue[0].deliver_at <= slot:
            self.step()
            n += 1
        self.now = max(self.now, slot)
        return n
