import math
import random

import pytest
from hypothesis import given, strategies as st

from j1939sim.tp import (
    ABORT_BAD_SEQUENCE, ABORT_CTS_DURING_DT, ABORT_TIMEOUT, HOLD_TIMEOUT_US, PROCESSING_DELAY_US,
    RESPONSE_TIMEOUT_US, AckCode, Bam, ConnAbort, Cts, EndOfMsgAck, IncompleteSessionError,
    OriginatorSession, ResponderSession, Rts, SessionState, TpDecodeError, TpDt, TpEncodeError,
    bam_send, decode_tpcm, decode_tpdt, encode_tpcm, encode_tpdt, originator_on_event, reassemble,
    responder_on_event, segment,
)

VIN = b"1M8GDM9A8KP042000*"
H = bytes.fromhex


# -- codec ------------------------------------------------------------------
@pytest.mark.parametrize("msg,wire", [
    (Rts(18, 3, 255, 65260), "10 12 00 03 FF EC FE 00"),
    (Cts(3, 1, 65260), "11 03 01 FF FF EC FE 00"),
    (Bam(1785, 255, 65260), "20 F9 06 FF FF EC FE 00"),
    (EndOfMsgAck(18, 3, 65260), "13 12 00 03 FF EC FE 00"),
    (ConnAbort(1, 65260), "FF 01 FF FF FF EC FE 00"),
])
def test_tpcm_layout(msg, wire):
    assert encode_tpcm(msg) == H(wire)
    assert decode_tpcm(H(wire)) == msg


def test_unknown_control_byte():
    with pytest.raises(TpDecodeError) as e:
        decode_tpcm(H("42 12 00 03 FF EC FE 00"))
    assert e.value.control == 0x42


def test_wrong_length_rejected():
    with pytest.raises(TpDecodeError):
        decode_tpcm(b"\x10\x12")
    with pytest.raises(TpDecodeError):
        decode_tpdt(b"\x01abc")


@pytest.mark.parametrize("bad", [
    Rts(18, 2, 255, 65260),     # packets disagree with size
    Rts(8, 2, 255, 65260),      # below multi-packet minimum
    Bam(1786, 256, 65260),
    Cts(3, 0, 65260),
    Rts(18, 3, 0, 65260),
])
def test_strict_encoding_rejects(bad):
    with pytest.raises(TpEncodeError):
        encode_tpcm(bad)


def test_lenient_encoding_allows_forgery():
    assert encode_tpcm(Rts(18, 2, 255, 65260), strict=False) == H("10 12 00 02 FF EC FE 00")
    with pytest.raises(TpEncodeError):
        encode_tpcm(Rts(70000, 2, 255, 65260), strict=False)


def test_tpdt_roundtrip_and_padding():
    assert segment(b"\x01" * 9) == [b"\x01" * 7, b"\x01\x01" + b"\xff" * 5]
    dt = TpDt(1, VIN[:7])
    assert encode_tpdt(dt) == H("01 31 4D 38 47 44 4D 39")
    assert decode_tpdt(encode_tpdt(dt)) == dt
    with pytest.raises(TpEncodeError):
        TpDt(1, b"short")


def test_ack_codes():
    assert [c.value for c in AckCode] == [0, 1, 2, 3]


def valid_tpcm():
    size = st.integers(9, 1785)
    pgn = st.integers(0, 0x3FFFF)
    return st.one_of(
        st.builds(lambda n, m, p: Rts(n, math.ceil(n / 7), m, p), size, st.integers(1, 255), pgn),
        st.builds(Cts, st.integers(0, 255), st.integers(1, 255), pgn),
        st.builds(lambda n, p: EndOfMsgAck(n, math.ceil(n / 7), p), size, pgn),
        st.builds(ConnAbort, st.integers(0, 255), pgn),
        st.builds(lambda n, p: Bam(n, math.ceil(n / 7), p), size, pgn),
    )


@given(valid_tpcm())
def test_tpcm_roundtrip_property(m):
    wire = encode_tpcm(m)
    assert len(wire) == 8 and wire[0] == m.control
    assert decode_tpcm(wire) == m


# -- BAM ----------------------------------------------------------------------
@pytest.mark.parametrize("n,frames", [(18, 4), (1785, 256)])
def test_bam_send_counts(n, frames):
    out = bam_send(n, 65260, bytes(n), sa=0)
    assert len(out) == frames
    assert all(f.da == 255 for f in out)
    assert out[0].data[0] == 32


def test_bam_send_too_small():
    with pytest.raises(TpEncodeError):
        bam_send(7, 65260, bytes(7), sa=0)


# -- originator ---------------------------------------------------------------
def opened(data=VIN, now=0):
    s = OriginatorSession.open(0, 249, 65260, data)
    (rts,) = s.start(now)
    s.on_tx(rts, now)
    return s


def serve(s, cts, now=1000):
    s.handle(cts, now)
    return s.tick(now + PROCESSING_DELAY_US)


def test_originator_sends_requested_window():
    out = serve(opened(), Cts(3, 1, 65260))
    assert [m.sequence for m in out] == [1, 2, 3]
    assert b"".join(m.payload for m in out)[:18] == VIN


def test_originator_out_of_range_next_sends_last_only():
    s = opened()
    out = serve(s, Cts(3, 5, 65260))
    assert [m.sequence for m in out] == [3]
    assert s.active


def test_originator_overrun_aborts_after_packets():
    s = opened()
    out = serve(s, Cts(4, 1, 65260))
    assert [m.sequence for m in out] == [1, 2, 3]
    assert s.on_tx(out[0], 7000) == [] and s.on_tx(out[1], 7500) == []
    last = s.on_tx(out[2], 8000)
    assert last == [ConnAbort(ABORT_BAD_SEQUENCE, 65260)]
    assert s.state is SessionState.ABORTED


def test_originator_ignores_cts_before_rts_on_bus():
    s = OriginatorSession.open(0, 249, 65260, VIN)
    s.start(0)
    assert s.handle(Cts(3, 1, 65260), 100) == []
    assert s.state is SessionState.IDLE and s.next_wakeup is None


def test_latest_cts_wins_during_processing():
    s = opened()
    s.handle(Cts(3, 1, 65260), 1000)
    s.handle(Cts(3, 5, 65260), 1500)
    out = s.tick(1000 + PROCESSING_DELAY_US)
    assert [m.sequence for m in out] == [3]


def test_cts_mid_transfer_aborts():
    s = opened()
    serve(s, Cts(3, 1, 65260))
    out = s.handle(Cts(3, 1, 65260), 6500)
    assert out == [ConnAbort(ABORT_CTS_DURING_DT, 65260)]


def test_hold_and_timeout():
    s = opened()
    assert serve(s, Cts(0, 1, 65260), now=1000) == []
    t = 1000 + PROCESSING_DELAY_US
    assert s.next_wakeup == t + HOLD_TIMEOUT_US
    state, out = originator_on_event(s, None, t + HOLD_TIMEOUT_US)
    assert state is SessionState.ABORTED and out == [ConnAbort(ABORT_TIMEOUT, 65260)]


def test_eoma_completes_and_abort_aborts():
    s = opened()
    assert originator_on_event(s, EndOfMsgAck(18, 3, 65260), 10)[0] is SessionState.COMPLETE
    s = opened()
    state, out = originator_on_event(s, ConnAbort(9, 65260), 10)
    assert state is SessionState.ABORTED and out == [] and s.abort_reason == 9


# -- responder ----------------------------------------------------------------
def responder(rts=Rts(18, 3, 255, 65260)):
    s, state, out = responder_on_event(None, rts, 0, originator=0, responder=249)
    assert out == [] and state is SessionState.RECEIVING
    return s


def chunks(data=VIN):
    return [TpDt(i, c) for i, c in enumerate(segment(data), 1)]


def test_responder_cts_after_processing_delay():
    s = responder()
    assert s.tick(PROCESSING_DELAY_US) == [Cts(3, 1, 65260)]


def test_responder_full_transfer():
    s = responder()
    s.tick(PROCESSING_DELAY_US)
    for i, dt in enumerate(chunks()):
        assert s.handle(dt, 10_000 + i) == []
    assert s.tick(10_002 + PROCESSING_DELAY_US) == [EndOfMsgAck(18, 3, 65260)]
    assert reassemble(s) == VIN


def test_responder_trusts_packet_count_of_replacing_rts():
    s = responder(Rts(10, 2, 255, 65260))
    assert s.tick(PROCESSING_DELAY_US) == [Cts(2, 1, 65260)]
    for dt in chunks()[:2]:
        s.handle(dt, 10_000)
    assert s.tick(20_000) == [EndOfMsgAck(10, 2, 65260)]


def test_responder_windows_with_limited_cts():
    s = ResponderSession.from_rts(Rts(18, 3, 2, 65260), 0, 249, 0)
    assert s.tick(PROCESSING_DELAY_US) == [Cts(2, 1, 65260)]
    dts = chunks()
    s.handle(dts[0], 6000)
    s.handle(dts[1], 6500)
    assert s.tick(6500 + PROCESSING_DELAY_US) == [Cts(1, 3, 65260)]


def test_first_arrival_wins_and_surplus_ignored():
    s = responder()
    forged = TpDt(3, H("FF FF FF FF FF FF 00"))
    s.handle(forged, 1)
    for dt in chunks():
        s.handle(dt, 2)
    s.handle(TpDt(4, H("FF FF FF FF FF FF 00")), 3)
    assert sorted(s.received) == [1, 2, 3]
    assert s.received[3] == forged.payload
    s.tick(10_000)
    assert reassemble(s) == VIN[:14] + b"\xff" * 4


def test_responder_timeout_rects_then_holds():
    s = responder()
    s.tick(PROCESSING_DELAY_US)
    s.handle(chunks()[2], 10_000)
    out = s.tick(10_000 + RESPONSE_TIMEOUT_US)
    assert out == [Cts(0, 4, 65260)]
    assert s.tick(10_000 + RESPONSE_TIMEOUT_US + HOLD_TIMEOUT_US) == []
    assert s.state is SessionState.ABORTED


def test_responder_second_timeout_aborts():
    s = responder()
    t = PROCESSING_DELAY_US
    s.tick(t)
    assert s.tick(t + RESPONSE_TIMEOUT_US) == [Cts(3, 1, 65260)]
    assert s.tick(t + 2 * RESPONSE_TIMEOUT_US) == [ConnAbort(ABORT_TIMEOUT, 65260)]


def test_cts_without_session_is_silent():
    assert responder_on_event(None, Cts(3, 1, 65260), 0) == (None, None, [])


# -- reassembly ---------------------------------------------------------------
def test_reassemble_truncates_and_reports_missing():
    s = ResponderSession(0, 249, 65260, 9, 2, state=SessionState.COMPLETE)
    s.received = {1: b"ABCDEFG", 2: b"HI" + b"\xff" * 5}
    assert reassemble(s) == b"ABCDEFGHI"
    s.received.pop(2)
    with pytest.raises(IncompleteSessionError) as e:
        reassemble(s)
    assert e.value.missing == [2]


def test_reassembly_matches_bruteforce_oracle():
    rng = random.Random(7)
    for _ in range(1000):
        npk = rng.randint(2, 255)
        nbytes = rng.randint(7 * (npk - 1) + 1, 7 * npk)
        s = ResponderSession.from_rts(Rts(nbytes, npk, 255, 65260), 0, 249, 0)
        arrivals = []
        for seq in range(1, npk + 1):
            arrivals.append((seq, bytes(rng.randrange(256) for _ in range(7))))
        # duplicates and out-of-range packets mixed in, in random order
        arrivals += [(rng.randint(1, npk), bytes(rng.randrange(256) for _ in range(7)))
                     for _ in range(rng.randint(0, 5))]
        arrivals += [(rng.randint(npk + 1, 255), b"\x00" * 7) for _ in range(rng.randint(0, 2)) if npk < 255]
        rng.shuffle(arrivals)
        for seq, payload in arrivals:
            s.handle(TpDt(seq, payload), 1)
        s.tick(10 ** 9)
        first = {}
        for seq, payload in arrivals:
            if seq <= npk:
                first.setdefault(seq, payload)
        oracle = b"".join(first[k] for k in sorted(first))[:nbytes]
        assert reassemble(s) == oracle
