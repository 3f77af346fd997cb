"""Discrete-event scheduler with a virtual or wall clock.

The whole engine is driven off one of these: replay and tests run in
virtual mode (time jumps to the next event, fully deterministic), the
bench subcommand runs in wall mode (time is real, due events are waited
for). Ties are broken by insertion order.
"""

from __future__ import annotations

import heapq
import time

VIRTUAL = "virtual"
WALL = "wall"


class _Entry:
    __slots__ = ("at_us", "seq", "fn", "kind", "cancelled")

    def __init__(self, at_us: int, seq: int, fn, kind: str):
        self.at_us = at_us
        self.seq = seq
        self.fn = fn
        self.kind = kind
        self.cancelled = False

    def __lt__(self, other: "_Entry") -> bool:
        return (self.at_us, self.seq) < (other.at_us, other.seq)

    def cancel(self) -> None:
        self.cancelled = True


class Scheduler:
    def __init__(self, mode: str = VIRTUAL, origin_us: int = 0):
        if mode not in (VIRTUAL, WALL):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._now_us = origin_us
        self._heap: list[_Entry] = []
        self._seq = 0
        self._live = 0  # non-cancelled entries, by kind
        self._live_by_kind: dict[str, int] = {}
        if mode == WALL:
            self._wall_origin_ns = time.perf_counter_ns() - origin_us * 1000

    def now_us(self) -> int:
        if self.mode == WALL:
            return (time.perf_counter_ns() - self._wall_origin_ns) // 1000
        return self._now_us

    def call_at(self, at_us: int, fn, kind: str = "event") -> _Entry:
        entry = _Entry(max(at_us, self.now_us()), self._seq, fn, kind)
        self._seq += 1
        heapq.heappush(self._heap, entry)
        self._live += 1
        self._live_by_kind[kind] = self._live_by_kind.get(kind, 0) + 1
        return entry

    def call_later(self, delay_us: int, fn, kind: str = "event") -> _Entry:
        return self.call_at(self.now_us() + max(0, delay_us), fn, kind)

    def cancel(self, entry: _Entry) -> None:
        if not entry.cancelled:
            entry.cancel()
            self._live -= 1
            self._live_by_kind[entry.kind] -= 1

    def pending(self, exclude_kinds: tuple[str, ...] = ()) -> int:
        """Count of live scheduled entries, optionally excluding kinds
        (e.g. periodic sweeps when deciding whether a run has drained)."""
        n = self._live
        for kind in exclude_kinds:
            n -= self._live_by_kind.get(kind, 0)
        return n

    def peek_us(self) -> int | None:
        """Timestamp of the earliest live entry, or None."""
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].at_us if self._heap else None

    def step(self) -> bool:
        """Run the earliest entry. In wall mode, waits until it is due.
        Returns False if the queue is empty."""
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        if not self._heap:
            return False
        entry = heapq.heappop(self._heap)
        if self.mode == WALL:
            wait_us = entry.at_us - self.now_us()
            if wait_us > 0:
                time.sleep(wait_us / 1e6)
        else:
            self._now_us = max(self._now_us, entry.at_us)
        self._live -= 1
        self._live_by_kind[entry.kind] -= 1
        entry.fn()
        return True

    def run_until_idle(self, exclude_kinds: tuple[str, ...] = ()) -> None:
        """Step until nothing but excluded-kind entries remain."""
        while self.pending(exclude_kinds) > 0:
            self.step()

    def advance_to(self, at_us: int) -> None:
        """Virtual mode only: move the clock forward without events."""
        if self.mode != VIRTUAL:
            raise ValueError("advance_to is only meaningful on a virtual clock")
        self._now_us = max(self._now_us, at_us)
