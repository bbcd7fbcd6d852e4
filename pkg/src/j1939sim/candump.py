"""candump-style text logs.

Each frame is one line::

    (SECONDS.MICROS) vcan0 IIIIIIII#DDDDDDDDDDDDDDDD

with the 29-bit identifier as eight upper-case hex digits and the payload as
upper-case hex pairs without separators. This is the ``candump -L`` layout
understood by ``canplayer`` and python-can.
"""
from __future__ import annotations

import re

from .frame import CanFrame
from .vbus import BusEvent

INTERFACE = "vcan0"
_LINE = re.compile(r"^\((\d+)\.(\d{6})\)\s+(\S+)\s+([0-9A-Fa-f]{8})#([0-9A-Fa-f]{0,16})$")


def format_line(frame: CanFrame, timestamp_us: int, iface: str = INTERFACE) -> str:
    sec, usec = divmod(timestamp_us, 1_000_000)
    return f"({sec}.{usec:06d}) {iface} {frame.can_id:08X}#{frame.data.hex().upper()}"


def export_candump(log: list[BusEvent], iface: str = INTERFACE) -> str:
    if not log:
        return ""
    return "\n".join(format_line(ev.frame, ev.timestamp_us, iface) for ev in log) + "\n"


def parse_line(line: str) -> CanFrame:
    m = _LINE.match(line.strip())
    if m is None:
        raise ValueError(f"not a candump line: {line!r}")
    sec, usec, _iface, ident, data = m.groups()
    if len(data) % 2:
        raise ValueError(f"odd number of hex digits in {line!r}")
    return CanFrame(int(ident, 16), bytes.fromhex(data), int(sec) * 1_000_000 + int(usec))


def parse_candump(text: str) -> list[CanFrame]:
    """Frames (timestamped) of a candump text log; blank lines are skipped."""
    return [parse_line(ln) for ln in text.splitlines() if ln.strip()]
