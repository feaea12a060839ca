"""Bounded FIFO channels with virtual-time backpressure.

Each token carries the time it becomes visible to the reader: the sender's
clock, or later if every buffer slot was still occupied.  A slot frees when
the reader picks its token up, so the n-th send cannot land before the
(n - depth)-th pickup — that is the whole backpressure model, and it makes
reported timing independent of scheduling interleave.
"""

from __future__ import annotations

from collections import deque

from ..errors import MalformedStream
from ..graph import DONE


class Channel:
    __slots__ = ("depth", "queue", "sent", "freed", "closed", "label")

    def __init__(self, depth: int, label: str = ""):
        self.depth = depth
        self.queue: deque = deque()  # (token, ready_time)
        self.sent = 0
        self.freed: list[int] = []  # pickup time of each consumed token
        self.closed = False
        self.label = label

    def full(self) -> bool:
        return len(self.queue) >= self.depth

    def empty(self) -> bool:
        return not self.queue

    def push(self, token, clock: int):
        if self.closed:
            raise MalformedStream(f"token after Done on {self.label}")
        slot_free = 0 if self.sent < self.depth else self.freed[self.sent - self.depth]
        self.queue.append((token, max(clock, slot_free)))
        self.sent += 1
        if token is DONE:
            self.closed = True

    def pop(self, reader_clock: int):
        token, ready = self.queue.popleft()
        pickup = max(reader_clock, ready)
        self.freed.append(pickup)
        return token, pickup
