"""Attack scenarios: a declarative catalog, an injecting attacker node, and
the verdict logic that turns a bus log into Impact / NoImpact plus a list of
checked observables."""
from __future__ import annotations

import copy
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analysis import (
    SessionTrace, decode_tp, equivalent, intervals_us, select, session_traces,
)
from .config import Network, TestbedConfig, load_testbed, read_yaml
from .ecu import ack_frame, request_frame
from .frame import CanFrame
from .tp import Bam, ConnAbort, Cts, EndOfMsgAck, Rts, TpDt, tp_frame
from .vbus import BusEvent, utilization_series

log = logging.getLogger(__name__)

CONTROLS = {"rts": 16, "cts": 17, "eoma": 19, "abort": 255, "bam": 32}
OBSERVATION_GRACE_US = 1_250_000
EQUIVALENCE_TOLERANCE_US = 5_000

IMPACT = "Impact"
NO_IMPACT = "NoImpact"


@dataclass
class Phases:
    warmup_s: float
    attack_s: float
    recovery_s: float

    @property
    def attack_start_us(self) -> int:
        return int(self.warmup_s * 1e6)

    @property
    def attack_end_us(self) -> int:
        return int((self.warmup_s + self.attack_s) * 1e6)

    @property
    def end_us(self) -> int:
        return int((self.warmup_s + self.attack_s + self.recovery_s) * 1e6)

    @property
    def total_s(self) -> float:
        return self.warmup_s + self.attack_s + self.recovery_s

    def scaled(self, duration_s: float) -> "Phases":
        k = duration_s / self.total_s
        return Phases(self.warmup_s * k, self.attack_s * k, self.recovery_s * k)


@dataclass
class ScenarioOutcome:
    impact: str
    observables: list[dict] = field(default_factory=list)


@dataclass
class ScenarioSpec:
    id: int
    name: str
    phases: Phases
    trigger: dict
    inject: list[dict]
    expected: ScenarioOutcome
    cases: list[dict] = field(default_factory=list)
    once_per: str | None = None
    repeat_ms: int | None = None
    sweep: dict | None = None

    def __post_init__(self) -> None:
        if self.expected.impact not in (IMPACT, NO_IMPACT):
            raise ValueError(f"scenario {self.id}: impact must be {IMPACT} or {NO_IMPACT}")
        if "frame" not in self.trigger and "every_ms" not in self.trigger:
            raise ValueError(f"scenario {self.id}: trigger needs 'frame' or 'every_ms'")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = copy.deepcopy(d)
        d["phases"] = Phases(**d["phases"])
        exp = d.get("expected", {})
        d["expected"] = ScenarioOutcome(exp.get("impact", IMPACT), exp.get("observables", []))
        return cls(**d)

    def to_dict(self) -> dict:
        d = {
            "id": self.id, "name": self.name,
            "phases": vars(self.phases).copy(),
            "trigger": self.trigger, "inject": self.inject,
            "expected": {"impact": self.expected.impact, "observables": self.expected.observables},
        }
        for k in ("cases", "once_per", "repeat_ms", "sweep"):
            v = getattr(self, k)
            if v:
                d[k] = v
        return copy.deepcopy(d)

    @property
    def max_firings(self) -> int | None:
        if self.cases:
            return len(self.cases)
        if self.sweep:
            lo, hi = self.sweep["values"]
            return hi - lo + 1
        return None


def load_scenarios(path: str | Path | None = None) -> list[ScenarioSpec]:
    d = read_yaml(path, "scenarios.yaml")
    return [ScenarioSpec.from_dict(s) for s in d.get("scenarios", [])]


def catalog() -> list[ScenarioSpec]:
    """The fourteen shipped scenarios, ordered by id."""
    return sorted(load_scenarios(), key=lambda s: s.id)


# -- frame filters and templates -------------------------------------------
def match_frame(flt: dict, ev: BusEvent, msg: Any = None) -> bool:
    raw = ev.frame.can_id
    sa, da, pf = raw & 0xFF, (raw >> 8) & 0xFF, (raw >> 16) & 0xFF
    if "pf" in flt and pf != flt["pf"]:
        return False
    if "control" in flt and (pf != 0xEC or ev.frame.data[:1] != bytes([CONTROLS[flt["control"]]])):
        return False
    if "sa" in flt and sa != flt["sa"]:
        return False
    if "da" in flt and (pf >= 240 or da != flt["da"]):
        return False
    if "pair" in flt and {sa, da} != set(flt["pair"]):
        return False
    for key, want in flt.items():
        if key in ("pf", "control", "sa", "da", "pair"):
            continue
        if msg is None:
            msg = decode_tp(ev)
        name = key[:-3] if key.endswith("_gt") else key
        v = getattr(msg, name, None)
        if v is None or (v <= want if key.endswith("_gt") else v != want):
            return False
    return True


def _resolve(v: Any, ctx: dict) -> Any:
    if isinstance(v, str) and v.startswith("$"):
        return ctx[v[1:]]
    return v


def build_frames(templates: list[dict], ctx: dict) -> list[CanFrame]:
    """Turn injection templates into frames. Forged TP messages skip the
    consistency checks so malformed announcements can be produced."""
    frames = []
    for tpl in templates:
        f = {k: _resolve(v, ctx) for k, v in tpl.items()}
        kind = f.pop("msg")
        sa, da = f.pop("sa"), f.pop("da", 255)
        count = f.pop("count", 1)
        prio = f.pop("priority", 7 if kind in ("rts", "cts", "eoma", "abort", "bam", "dt") else 6)
        if kind == "request":
            frame = request_frame(f["pgn"], sa, da, prio)
        elif kind == "ack":
            frame = ack_frame(f["code"], f["pgn"], sa, da if da != 255 else 0xFF, prio)
        elif kind == "raw":
            frame = CanFrame(f["id"], bytes.fromhex(f["data"]))
        else:
            if kind == "dt":
                m = TpDt(f["sequence"], bytes.fromhex(f["payload"]))
            else:
                cls = {"rts": Rts, "cts": Cts, "eoma": EndOfMsgAck, "abort": ConnAbort, "bam": Bam}[kind]
                m = cls(**f)
            frame = tp_frame(m, sa, da, prio, strict=False)
        frames += [frame] * count
    return frames


# -- the attacker node -----------------------------------------------------
class Attacker:
    """A bus node that injects frames according to a ScenarioSpec."""

    def __init__(self, spec: ScenarioSpec, start_us: int, end_us: int, seed: int = 0):
        self.spec = spec
        self.name = "attacker"
        self.start_us, self.end_us = start_us, end_us
        self.rng = random.Random(f"{seed}/attacker")
        self.firings: list[dict] = []
        self.bus = None
        self.index = -1
        self._sessions: dict[frozenset, dict] = {}
        self._fired: set = set()

    @property
    def injected(self) -> int:
        return sum(f["sent"] for f in self.firings)

    def attach(self, bus) -> None:
        self.bus = bus
        self.index = len(bus.nodes) - 1
        trig = self.spec.trigger
        if "every_ms" in trig:
            first = self.start_us + int(trig.get("offset_ms", 0) * 1000)
            burst = trig.get("burst")
            until = first + self._draw(burst["on_ms"]) if burst else None
            bus.schedule(first, lambda t: self._periodic(t, True, until))

    def _draw(self, rng_ms) -> int:
        return int(self.rng.uniform(*rng_ms) * 1000)

    def _exhausted(self) -> bool:
        m = self.spec.max_firings
        return m is not None and len(self.firings) >= m

    def _periodic(self, t: int, on: bool, until: int | None) -> None:
        if t >= self.end_us or self._exhausted():
            return
        trig = self.spec.trigger
        burst = trig.get("burst")
        if burst and t >= until:
            # switch between sending bursts and quiet gaps
            on = not on
            until = t + self._draw(burst["on_ms" if on else "off_ms"])
        if on:
            pair = trig.get("when_idle")
            if pair is None or not self._open(frozenset(pair), t):
                self._fire({}, t)
        nxt = t + int(trig["every_ms"] * 1000)
        self.bus.schedule(nxt, lambda t2: self._periodic(t2, on, until))

    def _open(self, key: frozenset, t: int) -> bool:
        s = self._sessions.get(key)
        return s is not None and s["open"] and t - s["last"] < 3_000_000

    def _track(self, ev: BusEvent, msg: Any) -> dict | None:
        raw = ev.frame.can_id
        key = frozenset(((raw & 0xFF), (raw >> 8) & 0xFF))
        t = ev.timestamp_us
        s = self._sessions.get(key)
        if isinstance(msg, Rts) and not self._open(key, t):
            s = {"id": (s["id"] + 1) if s else 1, "open": True, "last": t, "pgn": msg.pgn}
            self._sessions[key] = s
        elif s is not None and s["open"]:
            s["last"] = t
            if isinstance(msg, (EndOfMsgAck, ConnAbort)):
                s["open"] = False
        return s

    def on_tx(self, ev: BusEvent, tag: object) -> None:
        if isinstance(tag, int):
            self.firings[tag]["sent"] += 1

    def on_frame(self, ev: BusEvent) -> None:
        pf = (ev.frame.can_id >> 16) & 0xFF
        msg = None
        sess = None
        if pf in (0xEC, 0xEB):
            msg = decode_tp(ev)
            if msg is not None:
                sess = self._track(ev, msg)
        t = ev.timestamp_us
        if not self.start_us <= t < self.end_us:
            return
        trig = self.spec.trigger
        cancel = trig.get("cancel_on")
        if cancel and match_frame(cancel, ev, msg):
            self.bus.cancel(self.index, lambda f, tag: True)
        flt = trig.get("frame")
        if flt is None or self._exhausted() or not match_frame(flt, ev, msg):
            return
        raw = ev.frame.can_id
        if self.spec.once_per == "session":
            if sess is None:
                return
            key = (frozenset(((raw & 0xFF), (raw >> 8) & 0xFF)), sess["id"])
            if key in self._fired:
                return
            self._fired.add(key)
        ctx = {"sa": raw & 0xFF, "da": (raw >> 8) & 0xFF}
        if msg is not None:
            ctx.update({k: getattr(msg, k) for k in getattr(msg, "__slots__", ())})
        if "pgn" not in ctx and sess is not None:
            ctx["pgn"] = sess["pgn"]
        i = self._fire(ctx, t)
        if self.spec.repeat_ms and sess is not None:
            self._schedule_repeat(i, ctx, sess, sess["id"], t)

    def _templates(self, i: int) -> list[dict]:
        tpls = copy.deepcopy(self.spec.inject)
        if self.spec.cases:
            case = self.spec.cases[i % len(self.spec.cases)]
            if "inject" in case:
                tpls = copy.deepcopy(case["inject"])
            else:
                for tpl in tpls:
                    tpl.update(case)
        if self.spec.sweep:
            for tpl in tpls:
                tpl[self.spec.sweep["field"]] = self.spec.sweep["values"][0] + i
        return tpls

    def _fire(self, ctx: dict, t: int) -> int:
        i = len(self.firings)
        frames = build_frames(self._templates(i), ctx)
        self.firings.append({"t": t, "frames": len(frames), "sent": 0, "repeats": 0})
        for f in frames:
            self.bus.send(self.index, f, i, injected=True)
        return i

    def _schedule_repeat(self, i: int, ctx: dict, sess: dict, sid: int, t: int) -> None:
        nxt = t + self.spec.repeat_ms * 1000

        def again(now: int) -> None:
            if now >= self.end_us or not sess["open"] or sess["id"] != sid:
                return
            for f in build_frames(self._templates(i), ctx):
                self.bus.send(self.index, f, i, injected=True)
            self.firings[i]["repeats"] += 1
            self._schedule_repeat(i, ctx, sess, sid, now)

        self.bus.schedule(nxt, again)


# -- running and judging -----------------------------------------------------
@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    phases: Phases
    seed: int
    log: list[BusEvent]
    actual: ScenarioOutcome
    passed: bool
    inconclusive: bool
    firings: list[dict]
    equivalence: str
    utilization: dict

    @property
    def injected(self) -> int:
        return sum(f["sent"] for f in self.firings)

    def report(self) -> dict:
        return {
            "id": self.spec.id,
            "name": self.spec.name,
            "phases": {"warmup_s": self.phases.warmup_s, "attack_s": self.phases.attack_s,
                       "recovery_s": self.phases.recovery_s},
            "expected_impact": self.spec.expected.impact,
            "actual_impact": self.actual.impact,
            "equivalence": self.equivalence,
            "observables": self.actual.observables,
            "injected_frame_count": self.injected,
            "firings": len(self.firings),
            "utilization": self.utilization,
            "inconclusive": self.inconclusive,
            "pass": self.passed,
        }


_BASELINES: dict[tuple, list[BusEvent]] = {}


def baseline_log(testbed: TestbedConfig, seed: int, end_us: int) -> list[BusEvent]:
    """Attack-free log of the same testbed and seed (memoised)."""
    key = (testbed.digest(), seed, end_us)
    if key not in _BASELINES:
        net = Network(testbed, seed)
        net.run(end_us)
        _BASELINES[key] = net.log
    return _BASELINES[key]


def run_scenario(spec: ScenarioSpec, testbed: TestbedConfig | None = None, seed: int = 0,
                 duration_s: float | None = None) -> ScenarioResult:
    testbed = testbed or load_testbed()
    phases = spec.phases.scaled(duration_s) if duration_s else spec.phases
    net = Network(testbed, seed)
    atk = Attacker(spec, phases.attack_start_us, phases.attack_end_us, seed)
    net.bus.add(atk)
    net.run(phases.end_us)
    base = baseline_log(testbed, seed, phases.end_us)
    return assert_outcome(spec, phases, seed, net.log, base, atk.firings, testbed)


def assert_outcome(spec: ScenarioSpec, phases: Phases, seed: int, log_: list[BusEvent],
                   baseline: list[BusEvent], firings: list[dict],
                   testbed: TestbedConfig | None = None) -> ScenarioResult:
    """Judge a finished run against the scenario's expected outcome."""
    bus = (testbed or load_testbed()).bus
    same, why = equivalent(log_, baseline, EQUIVALENCE_TOLERANCE_US)
    impact = NO_IMPACT if same else IMPACT
    ctx = _Ctx(spec, phases, log_, firings, bus.baud, bus.frame_bits)
    checks = []
    for obs in spec.expected.observables:
        ok, measured = OBSERVABLES[obs["kind"]](ctx, obs)
        checks.append({"observable": obs, "ok": bool(ok), "measured": measured})
    inconclusive = not firings or (spec.cases and len(firings) < len(spec.cases))
    util = ctx.util_stats()
    passed = (not inconclusive and impact == spec.expected.impact and all(c["ok"] for c in checks))
    return ScenarioResult(spec, phases, seed, log_, ScenarioOutcome(impact, checks), passed,
                          bool(inconclusive), firings, why, util)


@dataclass
class _Ctx:
    spec: ScenarioSpec
    phases: Phases
    log: list[BusEvent]
    firings: list[dict]
    baud: int
    frame_bits: int

    def window(self, phase: str) -> tuple[int, int]:
        p = self.phases
        if phase == "warmup":
            return 0, p.attack_start_us
        if phase == "attack":
            return p.attack_start_us, p.attack_end_us
        if phase == "observe":
            return p.attack_start_us + OBSERVATION_GRACE_US, p.attack_end_us
        if phase == "recovery":
            return p.attack_end_us + OBSERVATION_GRACE_US, p.end_us
        raise ValueError(phase)

    def matching(self, flt: dict, lo: int, hi: int) -> list[BusEvent]:
        return [ev for ev in select(self.log, start_us=lo, end_us=hi) if match_frame(flt, ev)]

    def attacked(self, pair) -> list[SessionTrace]:
        lo, hi = self.window("attack")
        return [s for s in session_traces(self.log, tuple(pair)) if s.injected and lo <= s.start_us < hi]

    def util_stats(self) -> dict:
        lo, hi = self.window("attack")
        att = utilization_series(self.log, lo, hi, 1_000_000, self.baud, self.frame_bits)
        base = utilization_series(self.log, 0, lo, 1_000_000, self.baud, self.frame_bits)
        r = lambda x: round(x, 4)
        return {
            "attack_max": r(max(att)) if att else 0.0,
            "attack_mean": r(sum(att) / len(att)) if att else 0.0,
            "warmup_mean": r(sum(base) / len(base)) if base else 0.0,
        }


def _obs_interval(ctx: _Ctx, o: dict):
    lo, hi = ctx.window(o.get("phase", "attack"))
    evs = select(ctx.log, can_id=o["can_id"], start_us=lo, end_us=hi)
    iv = [x / 1e6 for x in intervals_us(evs)]
    if not iv:
        return False, {"count": 0}
    mn, mx = min(iv), max(iv)
    ok = o["min_s"] <= mn and mx <= o["max_s"]
    if "min_le" in o:
        ok = ok and mn <= o["min_le"]
    if "max_ge" in o:
        ok = ok and mx >= o["max_ge"]
    return ok, {"count": len(iv), "min_s": round(mn, 6), "max_s": round(mx, 6)}


def _obs_absent(ctx: _Ctx, o: dict):
    lo, hi = ctx.window("observe")
    n = len(ctx.matching(o["match"], lo, hi))
    return n == 0, {"count": n}


def _obs_present(ctx: _Ctx, o: dict):
    lo, hi = ctx.window("attack")
    n = len(ctx.matching(o["match"], lo, hi))
    return n > 0, {"count": n}


def _obs_resumes(ctx: _Ctx, o: dict):
    end = ctx.phases.attack_end_us
    hits = ctx.matching(o["match"], end, ctx.phases.end_us)
    if not hits:
        return False, {"after_s": None}
    dt = (hits[0].timestamp_us - end) / 1e6
    return dt <= o["within_s"], {"after_s": round(dt, 6)}


def _obs_utilization(ctx: _Ctx, o: dict):
    s = ctx.util_stats()
    return s["attack_max"] <= o["max"], s


def _obs_injected_per_firing(ctx: _Ctx, o: dict):
    per = [f["sent"] for f in ctx.firings]
    worst = max(per) if per else 0
    return bool(per) and worst <= o["max"], {"max": worst, "firings": len(per)}


def _obs_session(ctx: _Ctx, o: dict):
    traces = ctx.attacked(o["pair"])
    cases = o["cases"]
    got = []
    ok = len(traces) >= len(cases)
    for i, tr in enumerate(traces[: len(cases)] if cases else traces):
        want = cases[i % len(cases)]
        eoma = tr.eoma
        m = {
            "trace": tr.texts(),
            "dt_count": len(tr.dts()),
            "eoma": [eoma.total_bytes, eoma.total_packets] if eoma else None,
            "abort": bool(tr.of(ConnAbort)),
        }
        good = True
        if "prefix" in want:
            good &= m["trace"][: len(want["prefix"])] == want["prefix"]
        for k in ("dt_count", "eoma", "abort"):
            if k in want:
                good &= m[k] == want[k]
        m["ok"] = good
        ok &= good
        got.append(m)
    return ok, {"sessions": got}


def _obs_reassembly(ctx: _Ctx, o: dict):
    traces = ctx.attacked(o["pair"])
    cases = o["cases"]
    got = []
    ok = len(traces) >= len(cases)
    for i, tr in enumerate(traces[: len(cases)]):
        want = cases[i]
        data = tr.reassemble()
        eoma = tr.eoma
        m = {"data": data.hex(" ").upper(), "eoma": [eoma.total_bytes, eoma.total_packets] if eoma else None}
        good = data == bytes.fromhex(want["data"]) and m["eoma"] == want.get("eoma", m["eoma"])
        m["ok"] = good
        ok &= good
        got.append(m)
    return ok, {"sessions": got}


def _obs_session_state(ctx: _Ctx, o: dict):
    traces = ctx.attacked(o["pair"])
    states = [t.state for t in traces]
    return bool(states) and all(s == o["state"] for s in states), {"states": states}


OBSERVABLES = {
    "interval": _obs_interval,
    "absent": _obs_absent,
    "present": _obs_present,
    "resumes": _obs_resumes,
    "utilization": _obs_utilization,
    "injected_per_firing": _obs_injected_per_firing,
    "session": _obs_session,
    "reassembly": _obs_reassembly,
    "session_state": _obs_session_state,
}
