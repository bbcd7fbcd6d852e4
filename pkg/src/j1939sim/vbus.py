"""Deterministic discrete-event CAN bus with priority arbitration.

Time is integer microseconds. Each frame occupies the bus for a fixed
``frame_bits / baud`` and is logged at the instant its transmission ends.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol

from .frame import CanFrame


@dataclass(frozen=True, slots=True)
class BusConfig:
    baud: int = 250_000
    frame_bits: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.baud <= 0 or self.frame_bits <= 0:
            raise ValueError("baud and frame_bits must be positive")

    @property
    def frame_us(self) -> int:
        return (self.frame_bits * 1_000_000) // self.baud


@dataclass(frozen=True, slots=True)
class BusEvent:
    timestamp_us: int
    frame: CanFrame
    origin: str
    injected: bool = False


class Node(Protocol):
    name: str

    def attach(self, bus: "Bus") -> None: ...

    def on_frame(self, ev: BusEvent) -> None: ...

    def on_tx(self, ev: BusEvent, tag: object) -> None: ...


class _Pending:
    __slots__ = ("frame", "node", "tag", "cancelled", "injected")

    def __init__(self, frame: CanFrame, node: int, tag: object, injected: bool):
        self.frame = frame
        self.node = node
        self.tag = tag
        self.injected = injected
        self.cancelled = False


def arbitrate(pending: Iterable[tuple[int, int, int]]) -> tuple[int, int, int]:
    """Pick the winner among ``(can_id, node_index, fifo_seq)`` contenders.

    Lowest identifier wins; identical identifiers go to the lower node index,
    then to the frame queued first.
    """
    return min(pending)


class Bus:
    def __init__(self, config: BusConfig | None = None):
        self.config = config or BusConfig()
        self.frame_us = self.config.frame_us
        self.now = 0
        self.nodes: list[Node] = []
        self.log: list[BusEvent] = []
        self._events: list = []
        self._pending: list = []
        self._seq = itertools.count()
        self._tx: tuple[_Pending, int] | None = None

    def add(self, node: Node) -> int:
        self.nodes.append(node)
        node.attach(self)
        return len(self.nodes) - 1

    def index_of(self, node: Node) -> int:
        return self.nodes.index(node)

    def schedule(self, t: int, fn: Callable[[int], None]) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._events, (t, next(self._seq), fn))

    def send(self, node_index: int, frame: CanFrame, tag: object = None, injected: bool = False) -> _Pending:
        p = _Pending(frame, node_index, tag, injected)
        heapq.heappush(self._pending, (frame.can_id, node_index, next(self._seq), p))
        return p

    def cancel(self, node_index: int, predicate: Callable[[CanFrame, object], bool]) -> int:
        """Withdraw queued, not yet transmitting frames of one node."""
        n = 0
        for _, idx, _, p in self._pending:
            if idx == node_index and not p.cancelled and predicate(p.frame, p.tag):
                p.cancelled = True
                n += 1
        return n

    def pending_count(self, node_index: int) -> int:
        return sum(1 for _, i, _, p in self._pending if i == node_index and not p.cancelled)

    def _start_tx(self) -> None:
        pend = self._pending
        while pend:
            p = heapq.heappop(pend)[3]
            if not p.cancelled:
                self._tx = (p, self.now + self.frame_us)
                return

    def _finish_tx(self) -> None:
        p, end = self._tx
        self._tx = None
        frame = CanFrame(p.frame.can_id, p.frame.data, end)
        sender = self.nodes[p.node]
        ev = BusEvent(end, frame, sender.name, p.injected)
        self.log.append(ev)
        sender.on_tx(ev, p.tag)
        for node in self.nodes:
            if node is not sender:
                node.on_frame(ev)

    def run(self, until_us: int) -> None:
        events = self._events
        while True:
            # an idle bus arbitrates as soon as anything is queued
            if self._tx is None and self._pending:
                self._start_tx()
            t_ev = events[0][0] if events else None
            t_tx = self._tx[1] if self._tx else None
            if t_ev is None and t_tx is None:
                break
            t = t_ev if t_tx is None or (t_ev is not None and t_ev < t_tx) else t_tx
            if t > until_us:
                break
            self.now = t
            if t_tx == t:
                self._finish_tx()
            while events and events[0][0] <= t:
                heapq.heappop(events)[2](t)
        self.now = max(self.now, until_us)


def utilization(log: list[BusEvent], start_us: int, end_us: int,
                baud: int = 250_000, frame_bits: int = 128) -> float:
    """Fraction of bus capacity used by frames completing in [start, end)."""
    if end_us <= start_us:
        return 0.0
    n = sum(1 for ev in log if start_us <= ev.timestamp_us < end_us)
    return n * frame_bits / (baud * (end_us - start_us) / 1_000_000)


def utilization_series(log: list[BusEvent], start_us: int, end_us: int, window_us: int = 1_000_000,
                       baud: int = 250_000, frame_bits: int = 128) -> list[float]:
    """Utilization of consecutive whole windows covering [start, end)."""
    nwin = (end_us - start_us) // window_us
    if nwin <= 0:
        return []
    counts = [0] * nwin
    for ev in log:
        k = (ev.timestamp_us - start_us) // window_us
        if 0 <= k < nwin:
            counts[k] += 1
    cap = baud * window_us / 1_000_000
    return [c * frame_bits / cap for c in counts]
