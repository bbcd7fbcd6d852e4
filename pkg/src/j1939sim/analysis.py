"""Read-only analysis of bus logs: session traces, intervals, equivalence."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from .tp import (
    Bam, ConnAbort, Cts, EndOfMsgAck, Rts, TpDecodeError, decode_tpcm, decode_tpdt,
)
from .vbus import BusEvent

TP_CM_PF = 0xEC
TP_DT_PF = 0xEB
SESSION_IDLE_US = 3_000_000


def render(msg) -> str:
    """Compact text form used in traces: ``rts 18 3``, ``cts 3 5``, ``dt 3`` ..."""
    if isinstance(msg, Rts):
        return f"rts {msg.total_bytes} {msg.total_packets}"
    if isinstance(msg, Cts):
        return f"cts {msg.packets_to_send} {msg.next_packet}"
    if isinstance(msg, EndOfMsgAck):
        return f"eoma {msg.total_bytes} {msg.total_packets}"
    if isinstance(msg, ConnAbort):
        return f"abort {msg.reason}"
    if isinstance(msg, Bam):
        return f"bam {msg.total_bytes} {msg.total_packets}"
    return f"dt {msg.sequence}"


def decode_tp(ev: BusEvent):
    """Decoded TP message of a frame, or None for anything else."""
    pf = (ev.frame.can_id >> 16) & 0xFF
    try:
        if pf == TP_CM_PF:
            return decode_tpcm(ev.frame.data)
        if pf == TP_DT_PF:
            return decode_tpdt(ev.frame.data)
    except (TpDecodeError, ValueError):
        return None
    return None


@dataclass
class TraceItem:
    t: int
    sa: int
    da: int
    msg: object
    injected: bool

    def text(self) -> str:
        return render(self.msg) + (" *" if self.injected else "")


@dataclass
class SessionTrace:
    originator: int
    responder: int
    start_us: int
    items: list[TraceItem] = field(default_factory=list)
    closed: bool = False

    @property
    def end_us(self) -> int:
        return self.items[-1].t

    @property
    def injected(self) -> bool:
        return any(i.injected for i in self.items)

    def texts(self) -> list[str]:
        return [i.text() for i in self.items]

    def dts(self, legit_only: bool = True) -> list[TraceItem]:
        return [i for i in self.items if render(i.msg).startswith("dt")
                and i.sa == self.originator and (not legit_only or not i.injected)]

    def of(self, kind: type, legit_only: bool = True) -> list[TraceItem]:
        return [i for i in self.items if isinstance(i.msg, kind) and (not legit_only or not i.injected)]

    @property
    def eoma(self) -> EndOfMsgAck | None:
        m = [i.msg for i in self.of(EndOfMsgAck) if i.sa == self.responder]
        return m[0] if m else None

    @property
    def state(self) -> str:
        if self.eoma is not None:
            return "complete"
        if self.of(ConnAbort, legit_only=False):
            return "aborted"
        return "open" if not self.closed else "stalled"

    def reassemble(self) -> bytes:
        """Payload as the responder stores it: first arrival per sequence wins."""
        rts = [i.msg for i in self.items if isinstance(i.msg, Rts)]
        if not rts:
            return b""
        total_b, total_p = rts[-1].total_bytes, rts[-1].total_packets
        got: dict[int, bytes] = {}
        for i in self.items:
            if render(i.msg).startswith("dt") and i.sa == self.originator and i.da == self.responder:
                s = i.msg.sequence
                if 1 <= s <= total_p and s not in got:
                    got[s] = i.msg.payload
        data = b"".join(got.get(s, b"") for s in range(1, total_p + 1))
        return data[:total_b]


def session_traces(log: list[BusEvent], pair: tuple[int, int]) -> list[SessionTrace]:
    """Group the RTS/CTS traffic between two addresses into per-session traces.

    A trace opens at an RTS and closes at an EndOfMsgAck, a ConnAbort, or
    after a long silence. An RTS while a trace is open (a duplicate) stays in
    the same trace. Frames outside any trace are dropped.
    """
    a, b = pair
    out: list[SessionTrace] = []
    cur: SessionTrace | None = None
    for ev in log:
        raw = ev.frame.can_id
        pf = (raw >> 16) & 0xFF
        if pf not in (TP_CM_PF, TP_DT_PF):
            continue
        sa, da = raw & 0xFF, (raw >> 8) & 0xFF
        if {sa, da} != {a, b}:
            continue
        msg = decode_tp(ev)
        if msg is None:
            continue
        t = ev.timestamp_us
        if cur is not None and t - cur.end_us > SESSION_IDLE_US:
            cur.closed = True
            cur = None
        if isinstance(msg, Rts):
            if cur is None:
                cur = SessionTrace(sa, da, t)
                out.append(cur)
        elif cur is None:
            continue
        cur.items.append(TraceItem(t, sa, da, msg, ev.injected))
        if isinstance(msg, (EndOfMsgAck, ConnAbort)):
            cur.closed = True
            cur = None
    return out


def select(log: list[BusEvent], *, sa=None, da=None, pf=None, can_id=None, pgn=None, control=None,
           injected: bool | None = False, start_us: int = 0, end_us: int | None = None) -> list[BusEvent]:
    """Filter log entries. ``sa``/``da`` accept an int or a collection."""
    from .frame import raw_pgn

    def ok(v, want):
        if want is None:
            return True
        if isinstance(want, (list, tuple, set, frozenset)):
            return v in want
        return v == want

    out = []
    for ev in log:
        t = ev.timestamp_us
        if t < start_us or (end_us is not None and t >= end_us):
            continue
        if injected is not None and ev.injected != injected:
            continue
        raw = ev.frame.can_id
        if can_id is not None and raw != can_id:
            continue
        if not ok(raw & 0xFF, sa):
            continue
        fpf = (raw >> 16) & 0xFF
        if pf is not None and fpf != pf:
            continue
        if da is not None and (fpf >= 240 or not ok((raw >> 8) & 0xFF, da)):
            continue
        if pgn is not None and raw_pgn(raw) != pgn:
            continue
        if control is not None and (fpf != TP_CM_PF or ev.frame.data[:1] != bytes([control])):
            continue
        out.append(ev)
    return out


def intervals_us(events: list[BusEvent]) -> list[int]:
    ts = [e.timestamp_us for e in events]
    return [b - a for a, b in zip(ts, ts[1:])]


def deliveries(log: list[BusEvent]) -> dict[tuple[int, int], list[bytes]]:
    """Acknowledged RTS/CTS transfers per (originator, responder), as reassembled."""
    pairs = set()
    for ev in log:
        raw = ev.frame.can_id
        if (raw >> 16) & 0xFF == TP_CM_PF and ev.frame.data[:1] == b"\x10":
            pairs.add(frozenset((raw & 0xFF, (raw >> 8) & 0xFF)))
    out: dict[tuple[int, int], list[bytes]] = defaultdict(list)
    for p in pairs:
        if len(p) != 2:
            continue
        for tr in session_traces(log, tuple(sorted(p))):
            if tr.eoma is not None:
                out[(tr.originator, tr.responder)].append(tr.reassemble())
    return dict(out)


def equivalent(log: list[BusEvent], baseline: list[BusEvent], tol_us: int = 5_000,
               end_us: int | None = None) -> tuple[bool, str]:
    """Whether ``log`` matches ``baseline`` once injected frames are removed.

    Frames are grouped by (origin, identifier); each group must carry the same
    data sequence with timestamps agreeing within ``tol_us``.
    """
    def groups(lg):
        g = defaultdict(list)
        for ev in lg:
            if ev.injected or (end_us is not None and ev.timestamp_us >= end_us):
                continue
            g[(ev.origin, ev.frame.can_id)].append((ev.timestamp_us, ev.frame.data))
        return g

    ga, gb = groups(log), groups(baseline)
    if ga.keys() != gb.keys():
        diff = sorted(set(ga) ^ set(gb), key=str)[:3]
        return False, f"frame groups differ: {[(o, f'{i:08X}') for o, i in diff]}"
    for key in sorted(ga, key=str):
        xa, xb = ga[key], gb[key]
        # the tail may legitimately straddle the end of the run
        if abs(len(xa) - len(xb)) > 1:
            return False, f"{key[0]} {key[1]:08X}: {len(xa)} frames vs {len(xb)}"
        for (ta, da), (tb, db) in zip(xa, xb):
            if da != db:
                return False, f"{key[0]} {key[1]:08X}: data differs at t={ta}"
            if abs(ta - tb) > tol_us:
                return False, f"{key[0]} {key[1]:08X}: timing differs at t={ta} vs {tb}"
    da, db = deliveries(log), deliveries(baseline)
    if da != db:
        return False, "delivered transfers differ"
    return True, "equivalent"
