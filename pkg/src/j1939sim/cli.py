"""Command-line entry point: ``j1939sim run|list|baseline``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from .analysis import intervals_us, select, session_traces
from .attacks import load_scenarios, run_scenario
from .candump import export_candump
from .config import Network, load_testbed
from .vbus import utilization

REPORT_SCHEMA = 1
EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 1, 2, 3

log = logging.getLogger("j1939sim")


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _default_out() -> str:
    return os.environ.get("J1939SIM_OUT", "out")


def _parse_ids(text: str, known: list[int]) -> list[int]:
    if text == "all":
        return known
    ids = []
    for part in text.split(","):
        try:
            i = int(part)
        except ValueError:
            raise ValueError(f"bad scenario id {part!r}") from None
        if i not in known:
            raise ValueError(f"unknown scenario id {i} (known: {known[0]}-{known[-1]})")
        ids.append(i)
    return ids


def cmd_run(args) -> int:
    testbed = load_testbed(args.config)
    specs = {s.id: s for s in load_scenarios(args.scenarios)}
    try:
        ids = _parse_ids(args.scenario, sorted(specs))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    results = []
    for i in ids:
        r = run_scenario(specs[i], testbed, args.seed, args.duration)
        _write_atomic(out / f"scenario-{i}.log", export_candump(r.log))
        results.append(r)
        status = "INCONCLUSIVE" if r.inconclusive else ("PASS" if r.passed else "FAIL")
        print(f"[{status:12}] {i:2d} {r.spec.name:32} expected={r.spec.expected.impact:8} "
              f"actual={r.actual.impact:8} injected={r.injected}")
    scen_blob = json.dumps([specs[i].to_dict() for i in ids], sort_keys=True).encode()
    report = {
        "schema_version": REPORT_SCHEMA,
        "seed": args.seed,
        "duration_s": args.duration,
        "config_hash": testbed.digest(),
        "scenarios_hash": hashlib.sha256(scen_blob).hexdigest()[:16],
        "scenarios": [r.report() for r in results],
        "matrix": {str(r.spec.id): {"expected": r.spec.expected.impact, "actual": r.actual.impact,
                                    "pass": r.passed} for r in results},
        "all_pass": all(r.passed for r in results),
    }
    _write_atomic(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if any(r.inconclusive for r in results):
        return EXIT_INCONCLUSIVE
    return EXIT_OK if report["all_pass"] else EXIT_MISMATCH


def cmd_list(args) -> int:
    for s in sorted(load_scenarios(args.scenarios), key=lambda s: s.id):
        p = s.phases
        print(f"{s.id:2d}  {s.name:32} expected={s.expected.impact:8} "
              f"phases={p.warmup_s:g}/{p.attack_s:g}/{p.recovery_s:g}s")
    return EXIT_OK


def cmd_baseline(args) -> int:
    testbed = load_testbed(args.config)
    net = Network(testbed, args.seed)
    end = int(args.duration * 1e6)
    net.run(end)
    _write_atomic(Path(args.out) / "baseline.log", export_candump(net.log))
    bus = testbed.bus
    print(f"frames: {len(net.log)}  utilization: {utilization(net.log, 0, end, bus.baud, bus.frame_bits):.4f}")
    iv = intervals_us(select(net.log, can_id=0x18FEEF00))
    if iv:
        print(f"PGN 65263 interval: min {min(iv) / 1e3:.3f} ms  max {max(iv) / 1e3:.3f} ms")
    for a, b in ((0, 249), (249, 0)):
        starts = [t.start_us / 1e6 for t in session_traces(net.log, (a, b)) if t.originator == a]
        print(f"RTS/CTS {a}->{b} starts (s): {', '.join(f'{x:.1f}' for x in starts) or '-'}")
    bams = select(net.log, sa=0, control=32)
    if len(bams) > 1:
        gaps = intervals_us(bams)
        print(f"BAM from SA 0: {len(bams)} announcements, mean gap {sum(gaps) / len(gaps) / 1e6:.3f} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="j1939sim", description="J1939 transport-protocol attack simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run attack scenarios and judge them")
    r.add_argument("--scenario", default="all", help="id 1-14, comma list, or 'all'")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--duration", type=float, default=None,
                   help="total run length in seconds; phases are scaled to fit")
    r.add_argument("--out", default=_default_out())
    r.add_argument("--config", default=None, help="testbed YAML file")
    r.add_argument("--scenarios", default=None, help="scenario catalog YAML file")
    r.set_defaults(fn=cmd_run)

    ls = sub.add_parser("list", help="print the scenario catalog")
    ls.add_argument("--scenarios", default=None)
    ls.set_defaults(fn=cmd_list)

    b = sub.add_parser("baseline", help="run the attack-free testbed")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--duration", type=float, default=120.0)
    b.add_argument("--out", default=_default_out())
    b.add_argument("--config", default=None)
    b.set_defaults(fn=cmd_baseline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "duration", None) is not None and args.duration <= 0:
        print("error: --duration must be positive", file=sys.stderr)
        return EXIT_USAGE
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
