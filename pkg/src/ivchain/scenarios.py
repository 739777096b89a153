"""Scenario definitions: built-in use cases and declarative TOML scenario files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

from .vanet import Adversary, MessageKind, Route, SimConfig, VehicleSpec, load_toml


class ScenarioInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Emission:
    tick: int
    sender: str
    kind: MessageKind


@dataclass(frozen=True)
class AdversarySpec:
    behavior: Adversary
    label: Optional[str] = None
    position: Optional[Tuple[float, float]] = None


@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    groups: Tuple[Tuple[str, ...], ...]


@dataclass(frozen=True)
class Scenario:
    name: str
    vehicles: Tuple[VehicleSpec, ...]
    emissions: Tuple[Emission, ...] = ()
    adversaries: Tuple[AdversarySpec, ...] = ()
    overrides: Mapping = field(default_factory=dict)
    rsu_position: Optional[Tuple[float, float]] = None
    partitions: Tuple[Partition, ...] = ()

    def configure(self, config: SimConfig) -> SimConfig:
        try:
            return SimConfig.from_mapping(self.overrides, config)
        except (TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"{self.name}: {exc}") from None

    def validate(self, config: SimConfig) -> None:
        labels = [v.label for v in self.vehicles]
        if not labels:
            raise ScenarioInvalid(f"{self.name}: empty vehicle roster")
        if len(set(labels)) != len(labels):
            raise ScenarioInvalid(f"{self.name}: duplicate vehicle labels")
        if config.node_count != len(labels):
            raise ScenarioInvalid(f"{self.name}: node_count {config.node_count} but {len(labels)} vehicles")
        known = set(labels)
        for e in self.emissions:
            if e.sender not in known:
                raise ScenarioInvalid(f"{self.name}: emission from unknown vehicle {e.sender!r}")
            if not 0 < e.tick <= config.duration_ticks:
                raise ScenarioInvalid(f"{self.name}: emission tick {e.tick} outside the run")
        adv_labels = [a.label for a in self.adversaries if a.label]
        if len(set(adv_labels)) != len(adv_labels) or known & set(adv_labels) or "rsu" in adv_labels:
            raise ScenarioInvalid(f"{self.name}: adversary labels clash")
        for p in self.partitions:
            if not 0 <= p.start < p.end <= config.duration_ticks:
                raise ScenarioInvalid(f"{self.name}: partition window {p.start}..{p.end} outside the run")
            for group in p.groups:
                for label in group:
                    if label not in known and label != "rsu":
                        raise ScenarioInvalid(f"{self.name}: partition names unknown vehicle {label!r}")


def _periodic(labels: Sequence[str], start: int, period: int, stop: int, kind: MessageKind) -> Tuple[Emission, ...]:
    """Each vehicle reports every ``period`` ticks, staggered evenly."""
    out = []
    stagger = max(1, period // max(1, len(labels)))
    for i, label in enumerate(labels):
        t = start + i * stagger
        while t <= stop:
            out.append(Emission(t, label, kind))
            t += period
    return tuple(sorted(out, key=lambda e: (e.tick, e.sender)))


def intersection(config: SimConfig) -> Scenario:
    """Four vehicles converge on a signalised crossing watched by one RSU.

    The northbound approach reports a hazard at tick 1000; the others then
    announce their crossings.
    """
    c = (500.0, 500.0)
    approach = 120.0
    vehicles = (
        VehicleSpec("north", Route(((c[0], c[1] + approach), (c[0], c[1] - approach)), 12.0)),
        VehicleSpec("east", Route(((c[0] + approach, c[1]), (c[0] - approach, c[1])), 10.0)),
        VehicleSpec("south", Route(((c[0], c[1] - approach), (c[0], c[1] + approach)), 9.0)),
        VehicleSpec("west", Route(((c[0] - approach, c[1]), (c[0] + approach, c[1])), 11.0)),
    )
    emissions = (
        Emission(1000, "north", MessageKind.HAZARD_AHEAD),
        Emission(2000, "east", MessageKind.INTERSECTION_CROSSING),
        Emission(2600, "south", MessageKind.INTERSECTION_CROSSING),
        Emission(3200, "west", MessageKind.INTERSECTION_CROSSING),
    )
    return Scenario(
        "intersection",
        vehicles,
        emissions,
        overrides={"node_count": 4, "duration_ticks": max(config.duration_ticks, 6000)},
        rsu_position=c,
    )


def convoy(config: SimConfig) -> Scenario:
    """A platoon on a straight highway, 60 m apart, every vehicle reporting traffic."""
    n = config.node_count
    vehicles = tuple(
        VehicleSpec(f"car{i}", Route(((100.0 + 60.0 * (n - 1 - i), 100.0), (8100.0 + 60.0 * (n - 1 - i), 100.0)), 20.0))
        for i in range(n)
    )
    labels = [v.label for v in vehicles]
    stop = config.duration_ticks - 1500
    return Scenario("convoy", vehicles, _periodic(labels, 500, 1000, stop, MessageKind.CONGESTION_REPORT))


def _cluster(n: int, speed: float = 5.0) -> Tuple[VehicleSpec, ...]:
    """Vehicles circling a small block so everyone stays within radio range."""
    out = []
    for i in range(n):
        x0 = 400.0 + 15.0 * (i % 5)
        y0 = 400.0 + 15.0 * (i // 5)
        loop = ((x0, y0), (x0 + 60.0, y0), (x0 + 60.0, y0 + 60.0), (x0, y0 + 60.0), (x0, y0))
        out.append(VehicleSpec(f"veh{i}", Route(loop * 40, speed)))
    return tuple(out)


def partition_heal(config: SimConfig) -> Scenario:
    """Two halves of the fleet lose contact for a while, seal on both sides, then reconnect."""
    vehicles = _cluster(config.node_count)
    labels = [v.label for v in vehicles]
    half = (len(labels) + 1) // 2
    d = config.duration_ticks
    partition = Partition(d // 5, d // 2, (tuple(labels[:half]), tuple(labels[half:])))
    emissions = _periodic(labels, 300, 800, d - 2000, MessageKind.CONGESTION_REPORT)
    return Scenario("partition-heal", vehicles, emissions, partitions=(partition,))


def adversary_mix(config: SimConfig) -> Scenario:
    """Honest traffic alongside one replayer, one identity forger and one block tamperer."""
    vehicles = _cluster(config.node_count)
    labels = [v.label for v in vehicles]
    emissions = _periodic(labels, 300, 900, config.duration_ticks - 1500, MessageKind.HAZARD_AHEAD)
    adversaries = (
        AdversarySpec(Adversary.REPLAY, "replayer", (430.0, 430.0)),
        AdversarySpec(Adversary.FORGED_IVTP, "forger", (440.0, 420.0)),
        AdversarySpec(Adversary.TAMPERED_RELAY, "tamperer", (420.0, 440.0)),
    )
    return Scenario("adversary-mix", vehicles, emissions, adversaries)


BUILTINS: Dict[str, Callable[[SimConfig], Scenario]] = {
    "intersection": intersection,
    "convoy": convoy,
    "partition-heal": partition_heal,
    "adversary-mix": adversary_mix,
}


def _point(value) -> Tuple[float, float]:
    x, y = value
    return (float(x), float(y))


def scenario_from_mapping(data: Mapping) -> Scenario:
    """Build a Scenario from a parsed declarative document."""
    allowed = {"name", "vehicles", "emissions", "adversaries", "config", "rsu", "partitions"}
    unknown = set(data) - allowed
    if unknown:
        raise ScenarioInvalid(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    try:
        vehicles = tuple(
            VehicleSpec(v["label"], Route(tuple(_point(p) for p in v["route"]), float(v.get("speed_mps", 0.0))))
            for v in data.get("vehicles", ())
        )
        emissions = tuple(
            Emission(int(e["tick"]), e["sender"], MessageKind.parse(e["kind"])) for e in data.get("emissions", ())
        )
        adversaries = tuple(
            AdversarySpec(
                Adversary(a["behavior"]),
                a.get("label"),
                _point(a["position"]) if "position" in a else None,
            )
            for a in data.get("adversaries", ())
        )
        partitions = tuple(
            Partition(int(p["start"]), int(p["end"]), tuple(tuple(g) for g in p["groups"]))
            for p in data.get("partitions", ())
        )
        rsu = _point(data["rsu"]) if "rsu" in data else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalid(f"malformed scenario: {exc!r}") from None
    overrides = dict(data.get("config", {}))
    overrides.setdefault("node_count", len(vehicles))
    return Scenario(
        data.get("name", "custom"),
        vehicles,
        emissions,
        adversaries,
        overrides,
        rsu,
        partitions,
    )


def load_scenario(name_or_path: str, config: SimConfig) -> Scenario:
    if name_or_path in BUILTINS:
        return BUILTINS[name_or_path](config)
    path = Path(name_or_path)
    if not path.exists():
        raise ScenarioInvalid(f"no builtin scenario or file named {name_or_path!r}")
    return scenario_from_mapping(load_toml(path))
