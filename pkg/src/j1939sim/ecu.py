"""Simulated J1939 controller applications.

An ECU emits its periodic parameter groups, services Requests through a
finite-rate FIFO, runs at most one outgoing transport session at a time
(RTS/CTS or BAM, sharing one connection slot with inbound RTS/CTS sessions),
and reserves memory for every announced inbound transfer. When an
announcement no longer fits in the pool the ECU suspends completely until
all held buffers have been released.
"""
from __future__ import annotations

import logging
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any

from .frame import (
    GLOBAL_ADDRESS, PGN_ACK, PGN_REQUEST, CanFrame, make_id,
)
from .tp import (
    ABORT_BUSY, Bam, BamReceiveSession, ConnAbort, Cts, EndOfMsgAck, OriginatorSession,
    ResponderSession, Rts, SessionState, TpDecodeError, TpDt, TpSession, decode_tpcm,
    decode_tpdt, reassemble, segment, tp_frame,
)
from .vbus import Bus, BusEvent

log = logging.getLogger(__name__)


def parse_payload(spec: Any) -> bytes:
    """Accept bytes, a hex string (spaces allowed) or ``{"text": ...}``."""
    if isinstance(spec, (bytes, bytearray)):
        return bytes(spec)
    if isinstance(spec, dict):
        if "text" in spec:
            return spec["text"].encode("ascii")
        return bytes.fromhex(spec["hex"])
    return bytes.fromhex(str(spec))


@dataclass
class PeriodicPgn:
    pgn: int
    period_ms: int
    data: bytes = b"\xff" * 8
    priority: int = 6
    offset_us: int = 0
    da: int = GLOBAL_ADDRESS


@dataclass
class RequestDuty:
    target: int
    pgn: int
    period_ms: int
    offset_us: int = 0
    priority: int = 6


@dataclass
class TpDuty:
    peer: int
    pgn: int
    data: bytes
    period_ms: tuple[int, int] = (45_000, 60_000)


@dataclass
class BamDuty:
    pgn: int
    data: bytes
    period_ms: int
    offset_us: int = 0
    packet_gap_ms: int = 50


@dataclass
class EcuConfig:
    name: str
    sa: int
    periodic_pgns: list[PeriodicPgn] = field(default_factory=list)
    request_duties: list[RequestDuty] = field(default_factory=list)
    owned_pgns: list[int] = field(default_factory=list)
    request_service_time_ms: float = 10.0
    service_queue_capacity: int = 20
    tp_duties: list[TpDuty] = field(default_factory=list)
    bam_duty: BamDuty | None = None
    memory_pool_bytes: int = 4096
    buffer_hold_timeout_ms: int = 750
    processing_delay_us: int = 5_000
    response_timeout_ms: int = 750
    hold_timeout_ms: int = 1250
    max_per_cts: int = 255
    tp_priority: int = 7
    ack_requests: bool = False
    process_acks: bool = False

    def __post_init__(self) -> None:
        for p in self.periodic_pgns:
            if p.period_ms <= 0:
                raise ValueError(f"{self.name}: PGN {p.pgn} period must be > 0")
        for d in self.tp_duties:
            if not 0 < d.period_ms[0] <= d.period_ms[1]:
                raise ValueError(f"{self.name}: bad TP duty period {d.period_ms}")
        if self.bam_duty is not None and self.bam_duty.period_ms <= 0:
            raise ValueError(f"{self.name}: BAM period must be > 0")
        if self.memory_pool_bytes <= 0:
            raise ValueError(f"{self.name}: memory pool must be > 0")

    @property
    def owns(self) -> set[int]:
        return {p.pgn for p in self.periodic_pgns} | set(self.owned_pgns)

    @classmethod
    def from_dict(cls, d: dict) -> "EcuConfig":
        d = dict(d)
        d["periodic_pgns"] = [
            PeriodicPgn(**{**p, "data": parse_payload(p.get("data", "FF" * 8))})
            for p in d.get("periodic_pgns", [])
        ]
        d["request_duties"] = [RequestDuty(**r) for r in d.get("request_duties", [])]
        d["tp_duties"] = [
            TpDuty(**{**t, "data": parse_payload(t["data"]), "period_ms": tuple(t.get("period_ms", (45_000, 60_000)))})
            for t in d.get("tp_duties", [])
        ]
        if d.get("bam_duty"):
            b = d["bam_duty"]
            d["bam_duty"] = BamDuty(**{**b, "data": parse_payload(b["data"])})
        return cls(**d)

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, bytes):
                return x.hex(" ").upper()
            if isinstance(x, tuple):
                return list(x)
            if isinstance(x, list):
                return [conv(i) for i in x]
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            return x

        return conv(asdict(self))


class _BamSend:
    """Marker occupying the connection slot while a broadcast is in progress."""

    active = True

    def __init__(self, n: int):
        self.remaining = n


@dataclass
class EcuState:
    service_queue: deque = field(default_factory=deque)
    busy_until: int = 0
    holds: dict[int, list] = field(default_factory=dict)  # id -> [bytes, expires_at|None]
    memory_in_use: int = 0
    suspended: bool = False
    slot: Any = None
    originator: OriginatorSession | None = None
    responders: dict[int, ResponderSession] = field(default_factory=dict)
    bam_rx: dict[int, BamReceiveSession] = field(default_factory=dict)
    bam_waiting: bool = False
    tp_waiting: list = field(default_factory=list)


class Ecu:
    def __init__(self, cfg: EcuConfig, seed: int = 0):
        self.cfg = cfg
        self.name = cfg.name
        self.sa = cfg.sa
        self.state = EcuState()
        self.rng = random.Random(f"{seed}/{cfg.name}")
        self.delivered: list[dict] = []
        self.journal: list[dict] = []
        self.bus: Bus | None = None
        self.index = -1
        self._hold_ids = 0
        self._alloc: dict[int, int] = {}  # id(session) -> hold id
        self._wakeups: dict[int, int] = {}  # id(session) -> scheduled time
        self._timing = dict(
            proc_delay=cfg.processing_delay_us,
            hold_timeout=cfg.hold_timeout_ms * 1000,
            response_timeout=cfg.response_timeout_ms * 1000,
        )
        self._owns = cfg.owns
        self._dropped_acks: set[int] = set()

    # -- scheduling -------------------------------------------------------
    def attach(self, bus: Bus) -> None:
        self.bus = bus
        self.index = len(bus.nodes) - 1
        # payloads are static, so each periodic frame is built once
        self._pframes = {id(p): CanFrame(make_id(p.pgn, self.sa, p.da, p.priority), p.data)
                         for p in self.cfg.periodic_pgns}
        for p in self.cfg.periodic_pgns:
            self._arm_periodic(p, 1)
        for r in self.cfg.request_duties:
            self._arm_request(r, 1)
        for d in self.cfg.tp_duties:
            self._arm_tp(d, 0)
        if self.cfg.bam_duty is not None:
            self._arm_bam(1)

    def _arm_periodic(self, p: PeriodicPgn, k: int) -> None:
        due = p.offset_us + k * p.period_ms * 1000
        self.bus.schedule(due, lambda t: self._periodic_due(p, k, t))

    def _periodic_due(self, p: PeriodicPgn, k: int, t: int) -> None:
        self._arm_periodic(p, k + 1)
        if self.state.suspended:
            return
        # the periodic job joins the back of the work FIFO
        at = max(t, self.state.busy_until)
        frame = self._pframes[id(p)]
        if at == t:
            self._send(frame)
        else:
            self.bus.schedule(at, lambda _t: None if self.state.suspended else self._send(frame))

    def _arm_request(self, r: RequestDuty, k: int) -> None:
        due = r.offset_us + k * r.period_ms * 1000
        self.bus.schedule(due, lambda t: self._request_due(r, k, t))

    def _request_due(self, r: RequestDuty, k: int, t: int) -> None:
        self._arm_request(r, k + 1)
        if self.state.suspended or r.pgn in self._dropped_acks:
            return
        self._send(request_frame(r.pgn, self.sa, r.target, r.priority))

    def _arm_tp(self, d: TpDuty, prev: int) -> None:
        lo, hi = d.period_ms
        due = prev + int(self.rng.uniform(lo, hi) * 1000)
        self.bus.schedule(due, lambda t: self._tp_due(d, t))

    def _tp_due(self, d: TpDuty, t: int) -> None:
        self._arm_tp(d, t)
        st = self.state
        if st.suspended:
            self._note(t, "tp_duty_skipped", peer=d.peer, pgn=d.pgn)
            return
        if self._slot_busy():
            # keep the exchange cadence: start as soon as the slot frees up
            if d not in st.tp_waiting:
                st.tp_waiting.append(d)
            return
        self._start_tp(d, t)

    def _start_tp(self, d: TpDuty, t: int) -> None:
        st = self.state
        s = OriginatorSession.open(self.sa, d.peer, d.pgn, d.data, **self._timing)
        st.originator = s
        st.slot = s
        self._emit(s, s.start(t), t)

    def _arm_bam(self, k: int) -> None:
        b = self.cfg.bam_duty
        due = b.offset_us + k * b.period_ms * 1000
        self.bus.schedule(due, lambda t: self._bam_due(k, t))

    def _bam_due(self, k: int, t: int) -> None:
        self._arm_bam(k + 1)
        if self.state.suspended:
            return
        if self._slot_busy():
            self.state.bam_waiting = True
            return
        self._start_bam(t)

    def _start_bam(self, t: int) -> None:
        b = self.cfg.bam_duty
        st = self.state
        st.bam_waiting = False
        chunks = segment(b.data)
        marker = _BamSend(len(chunks))
        st.slot = marker
        prio = self.cfg.tp_priority
        self._send(tp_frame(Bam(len(b.data), len(chunks), b.pgn), self.sa, GLOBAL_ADDRESS, prio), (marker, None))
        for i, c in enumerate(chunks, 1):
            frame = tp_frame(TpDt(i, c), self.sa, GLOBAL_ADDRESS, prio)

            def go(_t, frame=frame):
                if st.slot is marker and not st.suspended:
                    self._send(frame, (marker, "dt"))

            self.bus.schedule(t + i * b.packet_gap_ms * 1000, go)

    def _slot_busy(self) -> bool:
        s = self.state.slot
        return s is not None and s.active

    def _release_slot(self, t: int) -> None:
        st = self.state
        if st.slot is not None and not st.slot.active:
            st.slot = None
        if st.slot is None and st.tp_waiting and not st.suspended:
            self._start_tp(st.tp_waiting.pop(0), t)
        if st.slot is None and st.bam_waiting and not st.suspended and self.cfg.bam_duty:
            self._start_bam(t)

    # -- bus interface ----------------------------------------------------
    def _send(self, frame: CanFrame, tag: object = None) -> None:
        self.bus.send(self.index, frame, tag)

    def on_tx(self, ev: BusEvent, tag: object) -> None:
        if tag is None:
            return
        owner, msg = tag
        t = ev.timestamp_us
        if isinstance(owner, _BamSend):
            if msg == "dt":
                owner.remaining -= 1
                if owner.remaining == 0:
                    owner.active = False
                    self._release_slot(t)
            return
        if owner.active:
            self._emit(owner, owner.on_tx(msg, t), t)

    def on_frame(self, ev: BusEvent) -> None:
        raw = ev.frame.can_id
        pf = (raw >> 16) & 0xFF
        if pf >= 240:
            return
        da = (raw >> 8) & 0xFF
        if da != self.sa and da != GLOBAL_ADDRESS:
            return
        src = raw & 0xFF
        t = ev.timestamp_us
        data = ev.frame.data
        if pf == 0xEC:
            self._on_tpcm(src, da, data, t)
        elif pf == 0xEB:
            if not self.state.suspended:
                self._on_tpdt(src, da, data, t)
        elif self.state.suspended:
            return
        elif pf == 0xEA:
            self._on_request(src, data, t)
        elif pf == 0xE8:
            self._on_ack(src, data, t)

    # -- requests ---------------------------------------------------------
    def _on_request(self, src: int, data: bytes, t: int) -> None:
        if len(data) < 3:
            return
        pgn = data[0] | (data[1] << 8) | (data[2] << 16)
        if pgn not in self._owns:
            return
        st = self.state
        q = st.service_queue
        while q and q[0] <= t:
            q.popleft()
        if len(q) >= self.cfg.service_queue_capacity:
            return
        start = max(t, st.busy_until)
        st.busy_until = start + int(self.cfg.request_service_time_ms * 1000)
        q.append(st.busy_until)
        if self.cfg.ack_requests:
            frame = ack_frame(0, pgn, self.sa, src)
            self.bus.schedule(st.busy_until, lambda _t: None if st.suspended else self._send(frame))

    def _on_ack(self, src: int, data: bytes, t: int) -> None:
        if not self.cfg.process_acks or len(data) < 8:
            return
        code = data[0]
        pgn = data[5] | (data[6] << 8) | (data[7] << 16)
        if code != 0:
            self._dropped_acks.add(pgn)
            self._note(t, "pgn_marked_inactive", pgn=pgn, code=code, src=src)

    # -- transport protocol ----------------------------------------------
    def _on_tpcm(self, src: int, da: int, data: bytes, t: int) -> None:
        try:
            m = decode_tpcm(data)
        except TpDecodeError:
            return
        st = self.state
        if isinstance(m, Rts):
            if da != self.sa:
                return
            self._accept_rts(src, m, t)
        elif isinstance(m, Bam):
            self._accept_bam(src, m, t)
        elif st.suspended:
            return
        elif isinstance(m, (Cts, EndOfMsgAck)):
            s = st.originator
            if s is not None and s.active and s.responder_sa == src and da == self.sa:
                self._emit(s, s.handle(m, t), t)
        elif isinstance(m, ConnAbort):
            for s in (st.originator, st.responders.get(src)):
                if s is not None and s.active and self.sa in (s.originator_sa, s.responder_sa) \
                        and src in (s.originator_sa, s.responder_sa):
                    self._emit(s, s.handle(m, t), t)

    def _accept_rts(self, src: int, m: Rts, t: int) -> None:
        st = self.state
        if st.suspended:
            self._allocate(m.total_bytes, t, attach=False)
            return
        old = st.responders.get(src)
        if old is not None and old.active:
            # the most recent announcement from the same source replaces the session
            self._detach(old, t)
            old.state = SessionState.ABORTED
            self._note(t, "session_replaced", role="responder", peer=src, pgn=old.packeted_pgn)
        elif self._slot_busy() and not isinstance(st.slot, _BamSend):
            self._send(tp_frame(ConnAbort(ABORT_BUSY, m.pgn), self.sa, src, self.cfg.tp_priority))
            return
        hold = self._allocate(m.total_bytes, t)
        if hold is None:
            return
        s = ResponderSession.from_rts(m, src, self.sa, t, own_max=self.cfg.max_per_cts, **self._timing)
        st.responders[src] = s
        if not self._slot_busy():
            # an outgoing broadcast keeps the slot; the receive proceeds alongside it
            st.slot = s
        self._alloc[id(s)] = hold
        self._wake(s)

    def _accept_bam(self, src: int, m: Bam, t: int) -> None:
        st = self.state
        if st.suspended:
            self._allocate(m.total_bytes, t, attach=False)
            return
        old = st.bam_rx.get(src)
        if old is not None and old.active:
            self._detach(old, t)
            old.state = SessionState.ABORTED
        hold = self._allocate(m.total_bytes, t)
        if hold is None:
            return
        s = BamReceiveSession.from_bam(m, src, t, **self._timing)
        st.bam_rx[src] = s
        self._alloc[id(s)] = hold
        self._wake(s)

    def _on_tpdt(self, src: int, da: int, data: bytes, t: int) -> None:
        try:
            dt = decode_tpdt(data)
        except TpDecodeError:
            return
        st = self.state
        s = st.bam_rx.get(src) if da == GLOBAL_ADDRESS else st.responders.get(src)
        if s is not None and s.active:
            self._emit(s, s.handle(dt, t), t)

    def _emit(self, s: TpSession, out: list, t: int) -> None:
        peer = s.responder_sa if s.originator_sa == self.sa else s.originator_sa
        prio = self.cfg.tp_priority
        for msg in out:
            self._send(tp_frame(msg, self.sa, peer, prio), (s, msg))
        if s.active:
            self._wake(s)
        else:
            self._finish(s, t)

    def _wake(self, s: TpSession) -> None:
        w = s.next_wakeup
        if w is None or self._wakeups.get(id(s)) == w:
            return
        self._wakeups[id(s)] = w

        def fire(t: int, s=s) -> None:
            if self._wakeups.get(id(s)) == w:
                del self._wakeups[id(s)]
            if s.active and not self.state.suspended:
                self._emit(s, s.tick(t), t)

        self.bus.schedule(w, fire)

    def _finish(self, s: TpSession, t: int) -> None:
        self._wakeups.pop(id(s), None)
        hold = self._alloc.pop(id(s), None)
        if hold is not None:
            self._free(hold, t)
        role = "originator" if s.originator_sa == self.sa else "responder"
        if isinstance(s, BamReceiveSession):
            role = "bam_receiver"
        rec = dict(role=role, originator=s.originator_sa, responder=s.responder_sa,
                   pgn=s.packeted_pgn, state=s.state.value, reason=s.abort_reason,
                   total_bytes=s.total_bytes, total_packets=s.total_packets,
                   received=len(s.received))
        if s.state is SessionState.ABORTED and isinstance(s, OriginatorSession):
            self.bus.cancel(self.index, lambda f, tag: tag is not None and tag[0] is s and isinstance(tag[1], TpDt))
        if s.state is SessionState.COMPLETE and role != "originator":
            payload = reassemble(s)
            self.delivered.append(dict(t=t, src=s.originator_sa, pgn=s.packeted_pgn, data=payload.hex()))
            rec["data"] = payload.hex()
        self._note(t, "session_end", **rec)
        self._release_slot(t)

    # -- memory pool ------------------------------------------------------
    def _allocate(self, nbytes: int, t: int, attach: bool = True) -> int | None:
        st = self.state
        self._hold_ids += 1
        hid = self._hold_ids
        if st.memory_in_use + nbytes > self.cfg.memory_pool_bytes or not attach:
            # the buffer is reserved anyway but no session can use it
            st.holds[hid] = [nbytes, None]
            st.memory_in_use += nbytes
            self._expire_later(hid, t)
            if not st.suspended:
                self._suspend(t)
            return None
        st.holds[hid] = [nbytes, None]
        st.memory_in_use += nbytes
        return hid

    def _expire_later(self, hid: int, t: int) -> None:
        exp = t + self.cfg.buffer_hold_timeout_ms * 1000
        self.state.holds[hid][1] = exp
        self.bus.schedule(exp, lambda now: self._expire(hid, exp, now))

    def _detach(self, s: TpSession, t: int) -> None:
        hid = self._alloc.pop(id(s), None)
        self._wakeups.pop(id(s), None)
        if hid is not None and hid in self.state.holds:
            self._expire_later(hid, t)

    def _expire(self, hid: int, exp: int, t: int) -> None:
        h = self.state.holds.get(hid)
        if h is not None and h[1] == exp:
            self._free(hid, t)

    def _free(self, hid: int, t: int) -> None:
        st = self.state
        h = st.holds.pop(hid, None)
        if h is None:
            return
        st.memory_in_use -= h[0]
        if st.suspended and st.memory_in_use == 0:
            st.suspended = False
            self._note(t, "resume")

    def _suspend(self, t: int) -> None:
        st = self.state
        st.suspended = True
        self._note(t, "suspend", memory_in_use=st.memory_in_use)
        sessions: list[TpSession] = [s for s in (st.originator, *st.responders.values(), *st.bam_rx.values())
                                     if s is not None and s.active]
        for s in sessions:
            s.state = SessionState.ABORTED
            self._detach(s, t)
            self._note(t, "session_end", role="suspended", originator=s.originator_sa,
                       responder=s.responder_sa, pgn=s.packeted_pgn, state="aborted", reason=None,
                       total_bytes=s.total_bytes, total_packets=s.total_packets, received=len(s.received))
        if isinstance(st.slot, _BamSend):
            st.slot.active = False
        st.slot = None
        st.bam_waiting = False
        st.tp_waiting.clear()
        st.service_queue.clear()
        st.busy_until = t
        self.bus.cancel(self.index, lambda f, tag: True)

    def _note(self, t: int, event: str, **kw) -> None:
        self.journal.append(dict(t=t, ecu=self.name, event=event, **kw))


def request_frame(pgn: int, sa: int, da: int, priority: int = 6) -> CanFrame:
    data = bytes([pgn & 0xFF, (pgn >> 8) & 0xFF, (pgn >> 16) & 0xFF]) + b"\xff" * 5
    return CanFrame(make_id(PGN_REQUEST, sa, da, priority), data)


def ack_frame(code: int, pgn: int, sa: int, requester: int, priority: int = 6) -> CanFrame:
    data = bytes([code, 0xFF, 0xFF, 0xFF, requester, pgn & 0xFF, (pgn >> 8) & 0xFF, (pgn >> 16) & 0xFF])
    return CanFrame(make_id(PGN_ACK, sa, GLOBAL_ADDRESS, priority), data)
