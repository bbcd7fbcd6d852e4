"""Testbed presets and network assembly."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .ecu import Ecu, EcuConfig
from .vbus import Bus, BusConfig


@dataclass
class TestbedConfig:
    bus: BusConfig = field(default_factory=BusConfig)
    ecus: list[EcuConfig] = field(default_factory=list)
    attacker_sa: int = 0x80

    __test__ = False  # not a pytest class

    @classmethod
    def from_dict(cls, d: dict) -> "TestbedConfig":
        return cls(
            bus=BusConfig(**d.get("bus", {})),
            ecus=[EcuConfig.from_dict(e) for e in d.get("ecus", [])],
            attacker_sa=d.get("attacker_sa", 0x80),
        )

    def to_dict(self) -> dict:
        return {
            "bus": {"baud": self.bus.baud, "frame_bits": self.bus.frame_bits, "seed": self.bus.seed},
            "ecus": [e.to_dict() for e in self.ecus],
            "attacker_sa": self.attacker_sa,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def ecu(self, name: str) -> EcuConfig:
        for e in self.ecus:
            if e.name == name:
                return e
        raise KeyError(name)


def read_yaml(path: str | Path | None, default: str) -> dict:
    if path is None:
        text = resources.files("j1939sim.data").joinpath(default).read_text()
    else:
        text = Path(path).read_text()
    return yaml.safe_load(text) or {}


def load_testbed(path: str | Path | None = None) -> TestbedConfig:
    """Load a testbed file; ``None`` gives the shipped ECU 0 / ECU 249 / instrument preset."""
    d = read_yaml(path, "testbed.yaml")
    return TestbedConfig.from_dict(d.get("testbed", d))


class Network:
    """A bus populated with the testbed ECUs, ready for extra nodes."""

    def __init__(self, cfg: TestbedConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.bus = Bus(cfg.bus)
        self.ecus: dict[str, Ecu] = {}
        for ec in cfg.ecus:
            e = Ecu(ec, seed)
            self.bus.add(e)
            self.ecus[ec.name] = e

    def by_sa(self, sa: int) -> Ecu:
        for e in self.ecus.values():
            if e.sa == sa:
                return e
        raise KeyError(sa)

    def run(self, until_us: int) -> None:
        self.bus.run(until_us)

    @property
    def log(self):
        return self.bus.log

    def delivered(self) -> list[dict]:
        out = []
        for e in self.ecus.values():
            out += [dict(d, dst=e.sa) for d in e.delivered]
        return sorted(out, key=lambda d: (d["t"], d["dst"]))

    def journal(self) -> list[dict]:
        out = []
        for e in self.ecus.values():
            out += e.journal
        return sorted(out, key=lambda d: d["t"])
