"""29-bit J1939 identifiers and CAN frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

PGN_REQUEST = 59904  # 0xEA00
PGN_ACK = 59392  # 0xE800
PGN_TP_CM = 60416  # 0xEC00
PGN_TP_DT = 60160  # 0xEB00

GLOBAL_ADDRESS = 255
PDU2_THRESHOLD = 240
ID_MASK = 0x1FFFFFFF


class FrameRangeError(ValueError):
    """A frame field or raw identifier is outside its legal range."""


@dataclass(frozen=True, slots=True)
class FrameId:
    priority: int
    edp: int
    dp: int
    pf: int
    ps: int
    sa: int

    @property
    def is_pdu1(self) -> bool:
        return self.pf < PDU2_THRESHOLD


class Destination(NamedTuple):
    """Where a frame is addressed.

    ``kind`` is ``"specific"``, ``"global"`` or ``"group"``; ``value`` is the
    destination address or group extension (255 for global).
    """

    kind: str
    value: int


_LIMITS = (("priority", 7), ("edp", 1), ("dp", 1), ("pf", 255), ("ps", 255), ("sa", 255))


def encode_id(f: FrameId) -> int:
    for name, hi in _LIMITS:
        v = getattr(f, name)
        if not isinstance(v, int) or not 0 <= v <= hi:
            raise FrameRangeError(f"{name}={v!r} outside 0..{hi}")
    return (f.priority << 26) | (f.edp << 25) | (f.dp << 24) | (f.pf << 16) | (f.ps << 8) | f.sa


def decode_id(raw: int) -> FrameId:
    if not 0 <= raw <= ID_MASK:
        raise FrameRangeError(f"identifier 0x{raw:X} does not fit in 29 bits")
    return FrameId(
        priority=(raw >> 26) & 0x7,
        edp=(raw >> 25) & 0x1,
        dp=(raw >> 24) & 0x1,
        pf=(raw >> 16) & 0xFF,
        ps=(raw >> 8) & 0xFF,
        sa=raw & 0xFF,
    )


def pgn_of(f: FrameId) -> int:
    base = (f.edp << 17) | (f.dp << 16) | (f.pf << 8)
    if f.pf < PDU2_THRESHOLD:
        return base
    return base | f.ps


def destination_of(f: FrameId) -> Destination:
    if f.pf >= PDU2_THRESHOLD:
        return Destination("group", f.ps)
    if f.ps == GLOBAL_ADDRESS:
        return Destination("global", GLOBAL_ADDRESS)
    return Destination("specific", f.ps)


def make_id(pgn: int, sa: int, da: int = GLOBAL_ADDRESS, priority: int = 6) -> int:
    """Build a raw identifier for ``pgn`` sent by ``sa``.

    For PDU1 PGNs ``da`` goes into the PS field; for PDU2 PGNs it is ignored.
    """
    pf = (pgn >> 8) & 0xFF
    ps = da if pf < PDU2_THRESHOLD else pgn & 0xFF
    return encode_id(FrameId(priority, (pgn >> 17) & 1, (pgn >> 16) & 1, pf, ps, sa))


# fast-path helpers on raw identifiers, used in the simulation loop
def raw_pf(raw: int) -> int:
    return (raw >> 16) & 0xFF


def raw_ps(raw: int) -> int:
    return (raw >> 8) & 0xFF


def raw_sa(raw: int) -> int:
    return raw & 0xFF


def raw_pgn(raw: int) -> int:
    pf = (raw >> 16) & 0xFF
    pgn = (raw >> 8) & 0x3FF00
    if pf >= PDU2_THRESHOLD:
        pgn |= (raw >> 8) & 0xFF
    return pgn


@dataclass(frozen=True, slots=True)
class CanFrame:
    can_id: int
    data: bytes
    timestamp: int = 0  # microseconds

    def __post_init__(self) -> None:
        if not 0 <= self.can_id <= ID_MASK:
            raise FrameRangeError(f"identifier 0x{self.can_id:X} does not fit in 29 bits")
        if len(self.data) > 8:
            raise FrameRangeError(f"dlc {len(self.data)} > 8")

    @property
    def dlc(self) -> int:
        return len(self.data)

    @property
    def fid(self) -> FrameId:
        return decode_id(self.can_id)

    @property
    def pgn(self) -> int:
        return raw_pgn(self.can_id)

    @property
    def sa(self) -> int:
        return self.can_id & 0xFF

    @property
    def da(self) -> int | None:
        """Destination address for PDU1 frames, None for PDU2."""
        pf = (self.can_id >> 16) & 0xFF
        return (self.can_id >> 8) & 0xFF if pf < PDU2_THRESHOLD else None
