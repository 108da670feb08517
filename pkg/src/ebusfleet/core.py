"""Shared domain vocabulary: time grid, fleet, blocks, chargers, scenarios, plans.

All types are immutable after construction and safe to share across worker
threads. Times inside the package are slot indices on a TimeGrid; wall-clock
strings ("HH:MM", hours may exceed 24 for the overnight tail) appear only at
the file boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

if TYPE_CHECKING:
    from .twin import DigitalTwin

MAX_HORIZON_MINUTES = 1800  # 30 h: one service day plus the overnight charging tail


@dataclass(frozen=True)
class Defect:
    """A scenario rule violation. Data, not an exception."""

    entity: str
    rule: str

    def __str__(self) -> str:
        return f"{self.entity}: {self.rule}"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform slot grid covering the planning horizon.

    day_start is wall-clock minutes after midnight. Every timestamp handled
    anywhere in the package must be an exact slot boundary.
    """

    day_start: int
    slot_minutes: int = 15
    slot_count: int = 96

    def __post_init__(self) -> None:
        if self.slot_minutes <= 0 or 60 % self.slot_minutes != 0:
            raise ValueError(f"slot_minutes must divide 60, got {self.slot_minutes}")
        if self.slot_count <= 0:
            raise ValueError(f"slot_count must be positive, got {self.slot_count}")
        if self.slot_count * self.slot_minutes > MAX_HORIZON_MINUTES:
            raise ValueError(
                f"horizon {self.slot_count * self.slot_minutes} min exceeds "
                f"{MAX_HORIZON_MINUTES} min"
            )
        if not 0 <= self.day_start < 1440:
            raise ValueError(f"day_start must be in [0, 1440), got {self.day_start}")

    @property
    def horizon_minutes(self) -> int:
        return self.slot_count * self.slot_minutes

    def slot_of(self, wall_clock_minutes: int) -> int:
        """Slot index of a boundary timestamp (minutes after midnight of day 0)."""
        offset = wall_clock_minutes - self.day_start
        if offset % self.slot_minutes != 0:
            raise ValueError(
                f"timestamp {wall_clock_minutes} min is {offset % self.slot_minutes} min "
                f"off the slot boundary"
            )
        slot = offset // self.slot_minutes
        if not 0 <= slot <= self.slot_count:
            raise ValueError(
                f"timestamp {wall_clock_minutes} min is outside the horizon "
                f"(offset {offset} min)"
            )
        return slot

    def time_of(self, slot: int) -> int:
        """Wall-clock minutes of a slot boundary. Inverse of slot_of."""
        if not 0 <= slot <= self.slot_count:
            raise ValueError(f"slot {slot} outside [0, {self.slot_count}]")
        return self.day_start + slot * self.slot_minutes

    def label_of(self, slot: int) -> str:
        """Extended HH:MM label (hours may exceed 24 past midnight)."""
        minutes = self.time_of(slot)
        return f"{minutes // 60:02d}:{minutes % 60:02d}"


def parse_hhmm(text: str, grid: TimeGrid | None = None) -> int:
    """Parse "HH:MM" to minutes after midnight of day 0.

    With a grid, times earlier than day_start roll over to the next day so
    "02:00" against a 05:00 start means 26:00. Extended hours ("26:00") are
    accepted directly.
    """
    parts = text.strip().split(":")
    if len(parts) != 2:
        raise ValueError(f"expected HH:MM, got {text!r}")
    hours, minutes = int(parts[0]), int(parts[1])
    if not (0 <= minutes < 60 and hours >= 0):
        raise ValueError(f"expected HH:MM, got {text!r}")
    total = hours * 60 + minutes
    if grid is not None and total < grid.day_start:
        total += 1440
    return total


@dataclass(frozen=True)
class BusType:
    """Vehicle class: battery size, geometry tags and the predictive twin used."""

    id: str
    battery_capacity: float
    compatible_profile: frozenset[str] = frozenset()
    twin_id: str = ""


@dataclass(frozen=True)
class Bus:
    id: str
    bus_type: str
    soc_initial: float
    soc_min: float = 0.0
    soc_max: float = 1.0
    soc_final_target: float = 0.0


@dataclass(frozen=True)
class Block:
    """A unit of work for a single bus: occupies slots [start_slot, end_slot).

    Energy comes either from a precomputed per-type table (kWh) or from a trip
    profile evaluated by the digital twin.
    """

    id: str
    start_slot: int
    end_slot: int
    distance: float
    energy_kwh: Mapping[str, float] = field(default_factory=dict)
    trip_profile: str | None = None
    required_profile: frozenset[str] = frozenset()

    @property
    def span(self) -> int:
        return self.end_slot - self.start_slot

    def covers(self, slot: int) -> bool:
        return self.start_slot <= slot < self.end_slot


@dataclass(frozen=True)
class Charger:
    id: str
    spot_id: str
    max_power: float


@dataclass(frozen=True)
class OperationalConstraints:
    """Depot-level operating rules for one service day."""

    max_concurrent_sessions_peak: int
    peak_window: tuple[int, int]
    min_buses_in_service: tuple[tuple[int, int], ...] = ()
    setup_slots: int = 1


@dataclass(frozen=True)
class Scenario:
    grid: TimeGrid
    bus_types: tuple[BusType, ...]
    buses: tuple[Bus, ...]
    blocks: tuple[Block, ...]
    chargers: tuple[Charger, ...]
    constraints: OperationalConstraints
    twins: Mapping[str, "DigitalTwin"] = field(default_factory=dict)
    depot_map_id: str | None = None

    def bus_type_of(self, bus: Bus) -> BusType:
        return next(t for t in self.bus_types if t.id == bus.bus_type)

    def bus(self, bus_id: str) -> Bus:
        return next(b for b in self.buses if b.id == bus_id)

    def block(self, block_id: str) -> Block:
        return next(b for b in self.blocks if b.id == block_id)


CERT_OPTIMAL = "proven-optimal"
CERT_BOUNDED = "best-found-with-bound"
CERT_HEURISTIC = "heuristic"


@dataclass(frozen=True)
class Certificate:
    """Quality statement attached to a plan."""

    kind: str
    bound: float | None = None

    def __str__(self) -> str:
        if self.kind == CERT_BOUNDED:
            return f"{CERT_BOUNDED}({self.bound:g})"
        return self.kind


@dataclass(frozen=True)
class Plan:
    """Assignment and charging decisions plus the simulated SOC trajectories.

    charging holds one boolean per slot per bus; soc_trace holds slot-boundary
    values (slot_count + 1 per bus).
    """

    assignments: frozenset[tuple[str, str]]
    charging: Mapping[str, tuple[bool, ...]]
    soc_trace: Mapping[str, tuple[float, ...]]
    objective_miles: float
    certificate: Certificate

    def blocks_of(self, bus_id: str) -> frozenset[str]:
        return frozenset(j for i, j in self.assignments if i == bus_id)

    def bus_serving(self, block_id: str) -> str | None:
        for i, j in self.assignments:
            if j == block_id:
                return i
        return None


def validate_scenario(s: Scenario) -> list[Defect]:
    """Check every scenario invariant. Returns defects; never raises."""
    defects: list[Defect] = []

    def bad(entity: str, rule: str) -> None:
        defects.append(Defect(entity, rule))

    for name, items in (
        ("bus_type", s.bus_types),
        ("bus", s.buses),
        ("block", s.blocks),
        ("charger", s.chargers),
    ):
        seen: set[str] = set()
        for item in items:
            if item.id in seen:
                bad(f"{name} {item.id}", "duplicate id")
            seen.add(item.id)

    type_ids = {t.id for t in s.bus_types}
    for t in s.bus_types:
        if t.battery_capacity <= 0:
            bad(f"bus_type {t.id}", "battery_capacity must be positive")
        if t.twin_id and t.twin_id not in s.twins:
            bad(f"bus_type {t.id}", f"twin_id {t.twin_id!r} does not resolve")

    for b in s.buses:
        if b.bus_type not in type_ids:
            bad(f"bus {b.id}", f"bus_type {b.bus_type!r} does not resolve")
        if not 0.0 <= b.soc_initial <= 1.0:
            bad(f"bus {b.id}", "soc_initial must be within [0, 1]")
        if not b.soc_min < b.soc_final_target:
            bad(f"bus {b.id}", "requires soc_min < soc_final_target")
        if not b.soc_final_target <= b.soc_max <= 1.0:
            bad(f"bus {b.id}", "requires soc_final_target <= soc_max <= 1")
        if not b.soc_min <= b.soc_initial <= b.soc_max:
            bad(f"bus {b.id}", "requires soc_min <= soc_initial <= soc_max")

    used_types = {b.bus_type for b in s.buses}
    for blk in s.blocks:
        if not blk.start_slot < blk.end_slot:
            bad(f"block {blk.id}", "requires start_slot < end_slot")
        if blk.start_slot < 0 or blk.end_slot > s.grid.slot_count:
            bad(f"block {blk.id}", "slots outside the grid horizon")
        if blk.distance <= 0:
            bad(f"block {blk.id}", "distance must be positive")
        if blk.trip_profile is None:
            for t in s.bus_types:
                compatible = blk.required_profile <= t.compatible_profile
                if t.id in used_types and compatible and t.id not in blk.energy_kwh:
                    bad(
                        f"block {blk.id}",
                        f"no energy defined for compatible bus_type {t.id} "
                        f"and no trip profile",
                    )

    spot_ids: set[str] = set()
    for c in s.chargers:
        if c.max_power <= 0:
            bad(f"charger {c.id}", "max_power must be positive")
        if c.spot_id in spot_ids:
            bad(f"charger {c.id}", f"spot {c.spot_id!r} already has a charger")
        spot_ids.add(c.spot_id)

    oc = s.constraints
    if oc.max_concurrent_sessions_peak > len(s.chargers):
        bad("constraints", "max_concurrent_sessions_peak exceeds charger count")
    if oc.max_concurrent_sessions_peak < 0:
        bad("constraints", "max_concurrent_sessions_peak must be non-negative")
    if oc.setup_slots < 1:
        bad("constraints", "setup_slots must be at least 1")
    lo, hi = oc.peak_window
    if not (0 <= lo <= hi <= s.grid.slot_count):
        bad("constraints", "peak_window outside the grid horizon")
    for slot, count in oc.min_buses_in_service:
        if not 0 <= slot < s.grid.slot_count:
            bad("constraints", f"min_buses_in_service slot {slot} outside horizon")
        if count < 0 or count > len(s.buses):
            bad("constraints", f"min_buses_in_service count {count} unsatisfiable")

    return defects


def recompute_objective(s: Scenario, assignments: frozenset[tuple[str, str]]) -> float:
    return sum(s.block(j).distance for _, j in assignments)


# --- scenario file format -------------------------------------------------
#
# Single JSON document, top-level keys: grid, bus_types, buses, blocks,
# chargers, constraints; optional twins (inline twin definitions keyed by
# twin id) and depot_map_id. Times are "HH:MM" resolved against day_start.


def scenario_to_json(s: Scenario) -> dict:
    from .twin import twin_to_json

    grid = s.grid
    return {
        "grid": {
            "day_start": f"{grid.day_start // 60:02d}:{grid.day_start % 60:02d}",
            "slot_minutes": grid.slot_minutes,
            "slot_count": grid.slot_count,
        },
        "bus_types": [
            {
                "id": t.id,
                "battery_capacity": t.battery_capacity,
                "compatible_profile": sorted(t.compatible_profile),
                "twin_id": t.twin_id,
            }
            for t in s.bus_types
        ],
        "buses": [
            {
                "id": b.id,
                "bus_type": b.bus_type,
                "soc_initial": b.soc_initial,
                "soc_min": b.soc_min,
                "soc_max": b.soc_max,
                "soc_final_target": b.soc_final_target,
            }
            for b in s.buses
        ],
        "blocks": [
            {
                "id": blk.id,
                "start": grid.label_of(blk.start_slot),
                "end": grid.label_of(blk.end_slot),
                "distance": blk.distance,
                **({"energy_kwh": dict(blk.energy_kwh)} if blk.energy_kwh else {}),
                **({"trip_profile": blk.trip_profile} if blk.trip_profile else {}),
                "required_profile": sorted(blk.required_profile),
            }
            for blk in s.blocks
        ],
        "chargers": [
            {"id": c.id, "spot_id": c.spot_id, "max_power": c.max_power}
            for c in s.chargers
        ],
        "constraints": {
            "max_concurrent_sessions_peak": s.constraints.max_concurrent_sessions_peak,
            "peak_window": [
                grid.label_of(s.constraints.peak_window[0]),
                grid.label_of(s.constraints.peak_window[1]),
            ],
            "min_buses_in_service": [
                {"slot": grid.label_of(slot), "count": count}
                for slot, count in s.constraints.min_buses_in_service
            ],
            "setup_slots": s.constraints.setup_slots,
        },
        **({"twins": {k: twin_to_json(v) for k, v in s.twins.items()}} if s.twins else {}),
        **({"depot_map_id": s.depot_map_id} if s.depot_map_id else {}),
    }


def scenario_from_json(doc: dict) -> Scenario:
    from .twin import twin_from_json

    g = doc["grid"]
    grid = TimeGrid(
        day_start=parse_hhmm(g["day_start"]),
        slot_minutes=int(g["slot_minutes"]),
        slot_count=int(g["slot_count"]),
    )

    def slot(text: str) -> int:
        return grid.slot_of(parse_hhmm(text, grid))

    twins = {k: twin_from_json(v) for k, v in doc.get("twins", {}).items()}
    bus_types = tuple(
        BusType(
            id=t["id"],
            battery_capacity=float(t["battery_capacity"]),
            compatible_profile=frozenset(t.get("compatible_profile", [])),
            twin_id=t.get("twin_id", ""),
        )
        for t in doc["bus_types"]
    )
    buses = tuple(
        Bus(
            id=b["id"],
            bus_type=b["bus_type"],
            soc_initial=float(b["soc_initial"]),
            soc_min=float(b.get("soc_min", 0.0)),
            soc_max=float(b.get("soc_max", 1.0)),
            soc_final_target=float(b.get("soc_final_target", 0.0)),
        )
        for b in doc["buses"]
    )
    blocks = tuple(
        Block(
            id=blk["id"],
            start_slot=slot(blk["start"]),
            end_slot=slot(blk["end"]),
            distance=float(blk["distance"]),
            energy_kwh={k: float(v) for k, v in blk.get("energy_kwh", {}).items()},
            trip_profile=blk.get("trip_profile"),
            required_profile=frozenset(blk.get("required_profile", [])),
        )
        for blk in doc["blocks"]
    )
    chargers = tuple(
        Charger(id=c["id"], spot_id=c["spot_id"], max_power=float(c["max_power"]))
        for c in doc["chargers"]
    )
    oc = doc["constraints"]
    constraints = OperationalConstraints(
        max_concurrent_sessions_peak=int(oc["max_concurrent_sessions_peak"]),
        peak_window=(slot(oc["peak_window"][0]), slot(oc["peak_window"][1])),
        min_buses_in_service=tuple(
            (slot(e["slot"]), int(e["count"]))
            for e in oc.get("min_buses_in_service", [])
        ),
        setup_slots=int(oc.get("setup_slots", 1)),
    )
    return Scenario(
        grid=grid,
        bus_types=bus_types,
        buses=buses,
        blocks=blocks,
        chargers=chargers,
        constraints=constraints,
        twins=twins,
        depot_map_id=doc.get("depot_map_id"),
    )


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        return scenario_from_json(json.load(fh))


def save_scenario(s: Scenario, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_json(s), fh, indent=2, sort_keys=True)
        fh.write("\n")
