"""J1939 transport protocol: TP.CM / TP.DT codec and session state machines.

The session classes are driven by ``handle(msg, now)`` for inbound messages,
``tick(now)`` when ``next_wakeup`` is reached and ``on_tx(msg, now)`` once one
of their own frames has left the bus. Every call returns the list of TP
messages to put on the bus, addressed to the session peer.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Union

from .frame import GLOBAL_ADDRESS, PGN_TP_CM, PGN_TP_DT, CanFrame, make_id

CTRL_RTS = 16
CTRL_CTS = 17
CTRL_EOMA = 19
CTRL_BAM = 32
CTRL_ABORT = 255

MAX_TP_BYTES = 1785
MIN_TP_BYTES = 9
NO_LIMIT = 255

# abort reasons used by the simulated ECUs; the codec treats reasons as opaque
ABORT_BUSY = 1
ABORT_RESOURCES = 2
ABORT_TIMEOUT = 3
ABORT_CTS_DURING_DT = 4
ABORT_BAD_SEQUENCE = 7

HOLD_TIMEOUT_US = 1_250_000
RESPONSE_TIMEOUT_US = 750_000
PROCESSING_DELAY_US = 5_000


class TpEncodeError(ValueError):
    pass


class TpDecodeError(ValueError):
    def __init__(self, control: int, msg: str | None = None):
        super().__init__(msg or f"unknown TP.CM control byte {control} (0x{control:02X})")
        self.control = control


class IncompleteSessionError(RuntimeError):
    def __init__(self, missing: list[int]):
        super().__init__(f"session incomplete, missing sequences {missing}")
        self.missing = missing


class AckCode(enum.IntEnum):
    ACK = 0
    NACK = 1
    ACCESS_DENIED = 2
    CANNOT_RESPOND = 3


def packets_for(total_bytes: int) -> int:
    return math.ceil(total_bytes / 7)


@dataclass(frozen=True, slots=True)
class Rts:
    total_bytes: int
    total_packets: int
    max_per_cts: int
    pgn: int
    control = CTRL_RTS


@dataclass(frozen=True, slots=True)
class Cts:
    packets_to_send: int
    next_packet: int
    pgn: int
    control = CTRL_CTS


@dataclass(frozen=True, slots=True)
class EndOfMsgAck:
    total_bytes: int
    total_packets: int
    pgn: int
    control = CTRL_EOMA


@dataclass(frozen=True, slots=True)
class ConnAbort:
    reason: int
    pgn: int
    role: int = 0xFF
    control = CTRL_ABORT


@dataclass(frozen=True, slots=True)
class Bam:
    total_bytes: int
    total_packets: int
    pgn: int
    control = CTRL_BAM


TpCm = Union[Rts, Cts, EndOfMsgAck, ConnAbort, Bam]


@dataclass(frozen=True, slots=True)
class TpDt:
    sequence: int
    payload: bytes

    def __post_init__(self) -> None:
        if len(self.payload) != 7:
            raise TpEncodeError(f"TP.DT payload must be 7 bytes, got {len(self.payload)}")


def _check(name: str, value: int, lo: int, hi: int) -> None:
    if not isinstance(value, int) or not lo <= value <= hi:
        raise TpEncodeError(f"{name}={value!r} outside {lo}..{hi}")


def _pgn_bytes(pgn: int) -> list[int]:
    _check("pgn", pgn, 0, 0x3FFFF)
    return [pgn & 0xFF, (pgn >> 8) & 0xFF, (pgn >> 16) & 0xFF]


def validate_tpcm(m: TpCm) -> None:
    """Raise TpEncodeError unless ``m`` is a protocol-conformant message."""
    if isinstance(m, (Rts, Bam)):
        _check("total_bytes", m.total_bytes, MIN_TP_BYTES, MAX_TP_BYTES)
        if m.total_packets != packets_for(m.total_bytes):
            raise TpEncodeError(
                f"total_packets={m.total_packets} inconsistent with total_bytes={m.total_bytes}"
            )
        if isinstance(m, Rts):
            _check("max_per_cts", m.max_per_cts, 1, 255)
    elif isinstance(m, Cts):
        _check("next_packet", m.next_packet, 1, 255)
    elif isinstance(m, EndOfMsgAck):
        _check("total_bytes", m.total_bytes, MIN_TP_BYTES, MAX_TP_BYTES)
        _check("total_packets", m.total_packets, 1, 255)


def encode_tpcm(m: TpCm, strict: bool = True) -> bytes:
    """Encode a connection-management message into its 8-byte payload.

    With ``strict=False`` only field widths are enforced, which is what an
    attacker forging inconsistent announcements needs.
    """
    if strict:
        validate_tpcm(m)
    if isinstance(m, Rts):
        _check("total_bytes", m.total_bytes, 0, 0xFFFF)
        _check("total_packets", m.total_packets, 0, 255)
        _check("max_per_cts", m.max_per_cts, 0, 255)
        body = [CTRL_RTS, m.total_bytes & 0xFF, m.total_bytes >> 8, m.total_packets, m.max_per_cts]
    elif isinstance(m, Cts):
        _check("packets_to_send", m.packets_to_send, 0, 255)
        _check("next_packet", m.next_packet, 0, 255)
        body = [CTRL_CTS, m.packets_to_send, m.next_packet, 0xFF, 0xFF]
    elif isinstance(m, EndOfMsgAck):
        _check("total_bytes", m.total_bytes, 0, 0xFFFF)
        _check("total_packets", m.total_packets, 0, 255)
        body = [CTRL_EOMA, m.total_bytes & 0xFF, m.total_bytes >> 8, m.total_packets, 0xFF]
    elif isinstance(m, ConnAbort):
        _check("reason", m.reason, 0, 255)
        _check("role", m.role, 0, 255)
        body = [CTRL_ABORT, m.reason, m.role, 0xFF, 0xFF]
    elif isinstance(m, Bam):
        _check("total_bytes", m.total_bytes, 0, 0xFFFF)
        _check("total_packets", m.total_packets, 0, 255)
        body = [CTRL_BAM, m.total_bytes & 0xFF, m.total_bytes >> 8, m.total_packets, 0xFF]
    else:
        raise TpEncodeError(f"not a TP.CM message: {m!r}")
    return bytes(body + _pgn_bytes(m.pgn))


def decode_tpcm(payload: bytes) -> TpCm:
    if len(payload) != 8:
        raise TpDecodeError(payload[0] if payload else -1, f"TP.CM payload must be 8 bytes, got {len(payload)}")
    ctrl = payload[0]
    pgn = payload[5] | (payload[6] << 8) | (payload[7] << 16)
    size = payload[1] | (payload[2] << 8)
    if ctrl == CTRL_RTS:
        return Rts(size, payload[3], payload[4], pgn)
    if ctrl == CTRL_CTS:
        return Cts(payload[1], payload[2], pgn)
    if ctrl == CTRL_EOMA:
        return EndOfMsgAck(size, payload[3], pgn)
    if ctrl == CTRL_ABORT:
        return ConnAbort(payload[1], pgn, payload[2])
    if ctrl == CTRL_BAM:
        return Bam(size, payload[3], pgn)
    raise TpDecodeError(ctrl)


def encode_tpdt(dt: TpDt, strict: bool = True) -> bytes:
    _check("sequence", dt.sequence, 1 if strict else 0, 255)
    return bytes([dt.sequence]) + dt.payload


def decode_tpdt(payload: bytes) -> TpDt:
    if len(payload) != 8:
        raise TpDecodeError(-1, f"TP.DT payload must be 8 bytes, got {len(payload)}")
    return TpDt(payload[0], bytes(payload[1:]))


def segment(data: bytes) -> list[bytes]:
    """Split ``data`` into 7-byte TP.DT payloads, padding the last with 0xFF."""
    out = []
    for i in range(0, len(data), 7):
        chunk = data[i : i + 7]
        out.append(chunk + b"\xff" * (7 - len(chunk)))
    return out


def tp_frame(msg: TpCm | TpDt, sa: int, da: int, priority: int = 7, strict: bool = True) -> CanFrame:
    if isinstance(msg, TpDt):
        return CanFrame(make_id(PGN_TP_DT, sa, da, priority), encode_tpdt(msg, strict))
    return CanFrame(make_id(PGN_TP_CM, sa, da, priority), encode_tpcm(msg, strict))


def bam_send(total_bytes: int, pgn: int, data: bytes, sa: int, priority: int = 7) -> list[CanFrame]:
    """Frames of a complete broadcast transfer: the announcement and its packets."""
    if not MIN_TP_BYTES <= total_bytes <= MAX_TP_BYTES:
        raise TpEncodeError(f"BAM size {total_bytes} outside {MIN_TP_BYTES}..{MAX_TP_BYTES}")
    if len(data) != total_bytes:
        raise TpEncodeError(f"data length {len(data)} != total_bytes {total_bytes}")
    chunks = segment(data)
    frames = [tp_frame(Bam(total_bytes, len(chunks), pgn), sa, GLOBAL_ADDRESS, priority)]
    frames += [tp_frame(TpDt(i, c), sa, GLOBAL_ADDRESS, priority) for i, c in enumerate(chunks, 1)]
    return frames


class SessionState(enum.Enum):
    IDLE = "idle"
    RTS_SENT = "rts_sent"
    CTS_RECEIVED = "cts_received"
    SENDING = "sending"
    RECEIVING = "receiving"
    COMPLETE = "complete"
    ABORTED = "aborted"


@dataclass(slots=True)
class TpSession:
    originator_sa: int
    responder_sa: int
    packeted_pgn: int
    total_bytes: int
    total_packets: int
    received: dict[int, bytes] = field(default_factory=dict)
    state: SessionState = SessionState.IDLE
    hold_deadline: int | None = None
    last_activity: int = 0
    abort_reason: int | None = None
    proc_delay: int = PROCESSING_DELAY_US
    hold_timeout: int = HOLD_TIMEOUT_US
    response_timeout: int = RESPONSE_TIMEOUT_US
    action_at: int | None = None

    @property
    def active(self) -> bool:
        return self.state not in (SessionState.COMPLETE, SessionState.ABORTED)

    @property
    def next_wakeup(self) -> int | None:
        if not self.active:
            return None
        times = [t for t in (self.action_at, self.hold_deadline) if t is not None]
        return min(times) if times else None

    def missing(self) -> list[int]:
        return [s for s in range(1, self.total_packets + 1) if s not in self.received]

    def _abort(self, reason: int, notify: bool = True) -> list[TpCm]:
        self.state = SessionState.ABORTED
        self.abort_reason = reason
        self.action_at = self.hold_deadline = None
        return [ConnAbort(reason, self.packeted_pgn)] if notify else []


@dataclass(slots=True)
class OriginatorSession(TpSession):
    """Sender side of an RTS/CTS transfer."""

    data: bytes = b""
    pending_cts: Cts | None = None
    outstanding: int = 0
    holding: bool = False
    abort_after_send: bool = False

    @classmethod
    def open(cls, sa: int, da: int, pgn: int, data: bytes, **timing) -> "OriginatorSession":
        n = len(data)
        if not MIN_TP_BYTES <= n <= MAX_TP_BYTES:
            raise TpEncodeError(f"message size {n} outside {MIN_TP_BYTES}..{MAX_TP_BYTES}")
        return cls(sa, da, pgn, n, packets_for(n), data=data, **timing)

    def start(self, now: int) -> list[TpCm]:
        self.last_activity = now
        return [Rts(self.total_bytes, self.total_packets, NO_LIMIT, self.packeted_pgn)]

    def on_tx(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        if not self.active:
            return []
        if isinstance(msg, Rts) and self.state is SessionState.IDLE:
            self.state = SessionState.RTS_SENT
            self.hold_deadline = now + self.hold_timeout
        elif isinstance(msg, TpDt) and self.outstanding:
            self.outstanding -= 1
            if not self.outstanding:
                if self.abort_after_send:
                    return self._abort(ABORT_BAD_SEQUENCE)
                self.hold_deadline = now + self.hold_timeout
        return []

    def handle(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        if not self.active:
            return []
        self.last_activity = now
        if isinstance(msg, Cts):
            if self.state is SessionState.IDLE:
                # our RTS has not reached the bus yet
                return []
            if self.outstanding:
                return self._abort(ABORT_CTS_DURING_DT)
            # the most recent CTS wins while the reply is being prepared
            self.pending_cts = msg
            self.state = SessionState.CTS_RECEIVED
            if self.action_at is None:
                self.action_at = now + self.proc_delay
            return []
        if isinstance(msg, EndOfMsgAck):
            self.state = SessionState.COMPLETE
            self.action_at = self.hold_deadline = None
            return []
        if isinstance(msg, ConnAbort):
            return self._abort(msg.reason, notify=False)
        return []

    def tick(self, now: int) -> list[TpCm | TpDt]:
        if not self.active:
            return []
        if self.action_at is not None and now >= self.action_at:
            self.action_at = None
            cts, self.pending_cts = self.pending_cts, None
            return self._serve(cts, now) if cts is not None else []
        if self.hold_deadline is not None and now >= self.hold_deadline:
            return self._abort(ABORT_TIMEOUT)
        return []

    def _serve(self, cts: Cts, now: int) -> list[TpCm | TpDt]:
        n, k, total = cts.packets_to_send, cts.next_packet, self.total_packets
        if n == 0:
            self.holding = True
            self.hold_deadline = now + self.hold_timeout
            return []
        self.holding = False
        if k < 1:
            return self._abort(ABORT_BAD_SEQUENCE)
        overrun = False
        if k > total:
            # observed testbed behaviour: only the last packet goes out, then it waits
            seqs = [total]
        elif k + n - 1 > total:
            seqs = list(range(k, total + 1))
            overrun = True
        else:
            seqs = list(range(k, k + n))
        chunks = segment(self.data)
        out: list[TpCm | TpDt] = [TpDt(s, chunks[s - 1]) for s in seqs]
        self.state = SessionState.SENDING
        self.outstanding = len(seqs)
        self.hold_deadline = None
        # the request overran the message: close once the packets are out
        self.abort_after_send = overrun
        return out


@dataclass(slots=True)
class ResponderSession(TpSession):
    """Receiver side of an RTS/CTS transfer."""

    max_per_cts: int = NO_LIMIT
    window_start: int = 1
    window_end: int = 0
    last_seq: int = 0
    pending: str | None = None
    timeouts: int = 0
    holding: bool = False
    eoma_sent: int = 0

    @classmethod
    def from_rts(cls, rts: Rts, originator: int, responder: int, now: int,
                 own_max: int = NO_LIMIT, **timing) -> "ResponderSession":
        s = cls(originator, responder, rts.pgn, rts.total_bytes, rts.total_packets,
                state=SessionState.RECEIVING, last_activity=now, **timing)
        s.max_per_cts = max(1, min(rts.max_per_cts or NO_LIMIT, own_max))
        s.pending = "cts"
        s.action_at = now + s.proc_delay
        return s

    def on_tx(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        return []

    def handle(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        if not self.active:
            return []
        if isinstance(msg, TpDt):
            seq = msg.sequence
            if not 1 <= seq <= self.total_packets or seq in self.received:
                # surplus packets and duplicates are dropped, first arrival wins
                return []
            self.received[seq] = msg.payload
            self.last_seq = seq
            self.last_activity = now
            self.timeouts = 0
            self.holding = False
            self.hold_deadline = now + self.response_timeout
            if len(self.received) == self.total_packets:
                self._defer("eoma", now)
            elif self.window_end and all(
                s in self.received for s in range(self.window_start, self.window_end + 1)
            ):
                self._defer("next", now)
            return []
        if isinstance(msg, ConnAbort):
            self.last_activity = now
            return self._abort(msg.reason, notify=False)
        return []

    def _defer(self, what: str, now: int) -> None:
        self.pending = what
        if self.action_at is None:
            self.action_at = now + self.proc_delay

    def _window(self, start: int, now: int) -> list[TpCm | TpDt]:
        n = max(0, min(self.max_per_cts, self.total_packets - start + 1))
        self.window_start, self.window_end = start, start + n - 1
        if n == 0:
            self.holding = True
            self.hold_deadline = now + self.hold_timeout
        else:
            self.hold_deadline = now + self.response_timeout
        return [Cts(n, start, self.packeted_pgn)]

    def tick(self, now: int) -> list[TpCm | TpDt]:
        if not self.active:
            return []
        if self.action_at is not None and now >= self.action_at:
            self.action_at = None
            what, self.pending = self.pending, None
            if what == "cts":
                return self._window(1, now)
            if what == "eoma":
                self.state = SessionState.COMPLETE
                self.hold_deadline = None
                self.eoma_sent += 1
                return [EndOfMsgAck(self.total_bytes, len(self.received), self.packeted_pgn)]
            if what == "next":
                return self._window(self.window_end + 1, now)
            return []
        if self.hold_deadline is not None and now >= self.hold_deadline:
            if self.holding:
                # the originator owns the hold; drop silently once it lapses
                return self._abort(ABORT_TIMEOUT, notify=False)
            if self.timeouts == 0:
                self.timeouts = 1
                # observed testbed behaviour: resume after the last packet seen
                return self._window(self.last_seq + 1, now)
            return self._abort(ABORT_TIMEOUT)
        return []


@dataclass(slots=True)
class BamReceiveSession(TpSession):
    """Receiver side of a broadcast transfer; never emits anything."""

    @classmethod
    def from_bam(cls, bam: Bam, originator: int, now: int, **timing) -> "BamReceiveSession":
        s = cls(originator, GLOBAL_ADDRESS, bam.pgn, bam.total_bytes, bam.total_packets,
                state=SessionState.RECEIVING, last_activity=now, **timing)
        s.hold_deadline = now + s.response_timeout
        return s

    def on_tx(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        return []

    def handle(self, msg: TpCm | TpDt, now: int) -> list[TpCm | TpDt]:
        if not self.active or not isinstance(msg, TpDt):
            return []
        seq = msg.sequence
        if 1 <= seq <= self.total_packets and seq not in self.received:
            self.received[seq] = msg.payload
            self.last_activity = now
            self.hold_deadline = now + self.response_timeout
            if len(self.received) == self.total_packets:
                self.state = SessionState.COMPLETE
                self.hold_deadline = None
        return []

    def tick(self, now: int) -> list[TpCm | TpDt]:
        if self.active and self.hold_deadline is not None and now >= self.hold_deadline:
            return self._abort(ABORT_TIMEOUT, notify=False)
        return []


def originator_on_event(s: OriginatorSession, event: TpCm | None, now: int):
    """Feed one inbound message (or a timer tick when ``event`` is None)."""
    out = s.tick(now) if event is None else s.handle(event, now)
    return s.state, out


def responder_on_event(s: ResponderSession | None, event: TpCm | TpDt | None, now: int,
                       originator: int = 0, responder: int = 0):
    """Responder transition; an RTS with no session opens one."""
    if isinstance(event, Rts):
        s = ResponderSession.from_rts(event, originator, responder, now)
        return s, s.state, []
    if s is None:
        # CTS, DT or anything else without a session elicits no response
        return None, None, []
    out = s.tick(now) if event is None else s.handle(event, now)
    return s, s.state, out


def reassemble(s: TpSession) -> bytes:
    missing = s.missing()
    if missing:
        raise IncompleteSessionError(missing)
    if s.state is not SessionState.COMPLETE:
        raise IncompleteSessionError([])
    data = b"".join(s.received[i] for i in range(1, s.total_packets + 1))
    return data[: s.total_bytes]
