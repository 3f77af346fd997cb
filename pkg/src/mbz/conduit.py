"""App-side packet conduits.

A conduit is the engine's app-facing boundary: it surfaces raw IP
packets the app sent (with optional app attribution) and accepts the
packets the engine writes back. Implementations here are the trace
replayer and an in-memory conduit for tests and the bench; a live tun
device would slot in behind the same contract.
"""

from __future__ import annotations

from collections import deque

from .clock import Scheduler
from .trace import APP_TO_NET, NET_TO_APP, MalformedTrace, TraceEvent, check_monotonic


class PacketConduit:
    """Contract: whole packets, per-direction ordering preserved.

    next_ready_us() tells the engine when the next app packet becomes
    available (None when the source is exhausted); read_packet() pops it
    once the clock has reached that time.
    """

    def next_ready_us(self) -> int | None:
        raise NotImplementedError

    def read_packet(self) -> tuple[int, bytes, str] | None:
        raise NotImplementedError

    def write_packet(self, data: bytes) -> None:
        raise NotImplementedError


class InMemoryConduit(PacketConduit):
    """Queue-backed conduit; tests and the bench inject packets directly."""

    def __init__(self, scheduler: Scheduler):
        self._scheduler = scheduler
        self._inbox: deque[tuple[int, bytes, str]] = deque()
        self.emitted: list[tuple[int, bytes]] = []

    def inject(self, data: bytes, app_label: str = "", at_us: int | None = None) -> None:
        ts = self._scheduler.now_us() if at_us is None else at_us
        self._inbox.append((ts, data, app_label))

    def next_ready_us(self) -> int | None:
        return self._inbox[0][0] if self._inbox else None

    def read_packet(self) -> tuple[int, bytes, str] | None:
        return self._inbox.popleft() if self._inbox else None

    def write_packet(self, data: bytes) -> None:
        self.emitted.append((self._scheduler.now_us(), data))

    def take_emitted(self) -> list[tuple[int, bytes]]:
        out, self.emitted = self.emitted, []
        return out


class ReplayConduit(PacketConduit):
    """Replays the app-to-net half of a trace in timestamp order.

    Net-to-app events from the trace are not replayed; they are kept in
    `reference_output` so a previous run's output can be diffed against
    this one. `speed` scales pacing and only matters under a wall clock;
    0 means as fast as possible. Under a virtual clock the trace
    timestamps are surfaced as-is.
    """

    def __init__(self, events: list[TraceEvent], speed: float = 0.0):
        if speed < 0:
            raise MalformedTrace(f"bad speed {speed}")
        check_monotonic(events)
        self.speed = speed
        self._pending: deque[TraceEvent] = deque(
            e for e in events if e.direction == APP_TO_NET)
        self.reference_output: list[TraceEvent] = [
            e for e in events if e.direction == NET_TO_APP]
        self.emitted: list[tuple[int, bytes]] = []
        self._scheduler: Scheduler | None = None
        self._ts0 = self._pending[0].ts_us if self._pending else 0
        self._wall_anchor_us: int | None = None  # set at the first read

    def bind(self, scheduler: Scheduler) -> "ReplayConduit":
        self._scheduler = scheduler
        return self

    def _surface_us(self, ts_us: int) -> int:
        if self._scheduler is not None and self._scheduler.mode == "wall":
            # pace relative to the first read so setup time never erodes
            # the inter-packet gaps
            if self.speed <= 0 or self._wall_anchor_us is None:
                return 0
            return self._wall_anchor_us + int((ts_us - self._ts0) / self.speed)
        return ts_us

    def next_ready_us(self) -> int | None:
        if not self._pending:
            return None
        return self._surface_us(self._pending[0].ts_us)

    def read_packet(self) -> tuple[int, bytes, str] | None:
        if not self._pending:
            return None
        event = self._pending.popleft()
        if self._scheduler is not None and self._scheduler.mode == "wall" \
                and self._wall_anchor_us is None:
            self._wall_anchor_us = self._scheduler.now_us()
        return (self._surface_us(event.ts_us), event.packet, event.app_label)

    def write_packet(self, data: bytes) -> None:
        ts = self._scheduler.now_us() if self._scheduler is not None else 0
        self.emitted.append((ts, data))


def replay(events: list[TraceEvent], speed: float = 0.0) -> ReplayConduit:
    """Build a replay conduit over a trace. Raises MalformedTrace on
    decreasing timestamps or a negative speed."""
    return ReplayConduit(events, speed=speed)
