"""Block assignment and charging schedule optimization.

Decides which bus serves which block and in which slots each bus charges,
maximizing served miles subject to SOC dynamics, safety bounds, depot charger
capacity, the peak-window session cap, setup times, service-coverage minima
and bus-to-block compatibility. Charging nonlinearity is handled by forward
simulation at slot granularity, never by linearization.

Ships four routes to a plan: a latest-feasible charging completion
subroutine, a depth-first branch-and-bound (solve_exact), a greedy + local
search heuristic (solve_heuristic), and an exhaustive small-domain oracle
(brute_force_oracle) used to test the others.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .core import (
    CERT_BOUNDED,
    CERT_HEURISTIC,
    CERT_OPTIMAL,
    Block,
    Bus,
    Certificate,
    Plan,
    Scenario,
    validate_scenario,
)
from .twin import ChargingCurve, DigitalTwin, InfeasibleForType, TripProfile, block_energy, charge_added

EPS = 1e-9

SOC_GRID = tuple(round(0.01 * k, 2) for k in range(101))

ORACLE_MAX_BUSES = 2
ORACLE_MAX_BLOCKS = 4
ORACLE_MAX_SLOTS = 12

# exhaustive charging completion kicks in below these sizes when the greedy
# subroutine fails, keeping solve_exact exact on oracle-domain instances
_EXACT_COMPLETION_BUSES = 3
_EXACT_COMPLETION_SLOTS = 16


class SolverError(Exception):
    pass


class ProvenInfeasible(SolverError):
    """Search exhausted every branch without finding a feasible plan."""


class BudgetExhausted(SolverError):
    """Budget ran out before any feasible plan was found; status indeterminate."""


@dataclass(frozen=True)
class Violation:
    """One broken plan constraint, named by family and offending entity."""

    kind: str
    entity: str
    slot: int | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = f" @slot {self.slot}" if self.slot is not None else ""
        tail = f" ({self.detail})" if self.detail else ""
        return f"{self.kind}: {self.entity}{where}{tail}"


@dataclass(frozen=True)
class Instance:
    """Scenario plus the tables the solver consumes.

    energy_table holds SOC-fraction demand per (bus_type, block); pairs whose
    demand exceeds the battery are excluded and therefore incompatible.
    charge_step_table tabulates the one-slot SOC gain on a 1%-step grid per
    bus type, charger power cap applied.
    """

    scenario: Scenario
    energy_table: Mapping[tuple[str, str], float]
    charge_step_table: Mapping[str, tuple[float, ...]]
    curves: Mapping[str, ChargingCurve]
    eligible: Mapping[str, tuple[str, ...]]

    def type_of(self, bus_id: str) -> str:
        return self.scenario.bus(bus_id).bus_type

    def demand(self, bus_id: str, block_id: str) -> float:
        return self.energy_table[(self.type_of(bus_id), block_id)]

    def slot_gain(self, bus_id: str, soc: float) -> float:
        """SOC gained by one charging slot started at the given level."""
        bus_type = self.scenario.bus_type_of(self.scenario.bus(bus_id))
        return (
            charge_added(
                self.curves[bus_type.id],
                bus_type.battery_capacity,
                min(max(soc, 0.0), 1.0),
                self.scenario.grid.slot_minutes,
            )
            - soc
        )

    def max_slot_gain(self, bus_id: str) -> float:
        return max(self.charge_step_table[self.type_of(bus_id)])

    def capacity_at(self, slot: int) -> int:
        oc = self.scenario.constraints
        cap = len(self.scenario.chargers)
        if oc.peak_window[0] <= slot < oc.peak_window[1]:
            cap = min(cap, oc.max_concurrent_sessions_peak)
        return cap

    def candidate_buses(self, block_id: str) -> tuple[str, ...]:
        """Eligible buses whose SOC window can hold the block at all."""
        blk = self.scenario.block(block_id)
        out = []
        for bus_id in self.eligible[block_id]:
            bus = self.scenario.bus(bus_id)
            if bus.soc_min + self.demand(bus_id, block_id) <= bus.soc_max + EPS:
                out.append(bus_id)
        return tuple(out)

    def scaled(self, factor: float) -> "Instance":
        """Pessimism-scaled copy: every energy entry multiplied by factor.

        Entries pushed past a full battery become incompatible, mirroring the
        infeasible-for-type exclusion at build time.
        """
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        table = {}
        for key, fraction in self.energy_table.items():
            scaled = fraction * factor
            if scaled <= 1.0 + EPS:
                table[key] = scaled
        eligible = {
            blk.id: tuple(
                bus_id
                for bus_id in self.eligible[blk.id]
                if (self.type_of(bus_id), blk.id) in table
            )
            for blk in self.scenario.blocks
        }
        return replace(self, energy_table=table, eligible=eligible)


def build_instance(
    s: Scenario,
    twins: Mapping[str, DigitalTwin] | None = None,
    profiles: Mapping[str, TripProfile] | None = None,
) -> Instance:
    """Populate the solver tables for a validated scenario."""
    defects = validate_scenario(s)
    if defects:
        raise ValueError(
            "scenario has defects: " + "; ".join(str(d) for d in defects)
        )
    twins = dict(s.twins) | dict(twins or {})
    profiles = profiles or {}

    used_types = [t for t in s.bus_types if any(b.bus_type == t.id for b in s.buses)]
    for t in used_types:
        if t.twin_id and t.twin_id not in twins:
            raise ValueError(f"bus_type {t.id}: twin {t.twin_id!r} does not resolve")

    power_cap = min((c.max_power for c in s.chargers), default=math.inf)
    energy_table: dict[tuple[str, str], float] = {}
    curves: dict[str, ChargingCurve] = {}
    step_table: dict[str, tuple[float, ...]] = {}
    for t in used_types:
        twin = twins.get(t.twin_id)
        if twin is None:
            raise ValueError(f"bus_type {t.id} has no digital twin")
        curve = twin.charging_curve
        if math.isfinite(power_cap):
            curve = curve.capped(power_cap)
        curves[t.id] = curve
        step_table[t.id] = tuple(
            charge_added(curve, t.battery_capacity, g, s.grid.slot_minutes) - g
            for g in SOC_GRID
        )
        for blk in s.blocks:
            if not blk.required_profile <= t.compatible_profile:
                continue
            profile = profiles.get(blk.trip_profile) if blk.trip_profile else None
            try:
                energy_table[(t.id, blk.id)] = block_energy(twin, blk, t, profile)
            except InfeasibleForType:
                continue

    eligible = {
        blk.id: tuple(
            b.id
            for b in s.buses
            if (b.bus_type, blk.id) in energy_table
        )
        for blk in s.blocks
    }
    return Instance(
        scenario=s,
        energy_table=energy_table,
        charge_step_table=step_table,
        curves=curves,
        eligible=eligible,
    )


# --- forward simulation -----------------------------------------------------


def _bus_schedule(
    inst: Instance, bus_id: str, block_ids: Iterable[str]
) -> tuple[list[str | None], list[float]]:
    """Per-slot (block occupancy, SOC depletion) arrays for one bus."""
    T = inst.scenario.grid.slot_count
    occupied: list[str | None] = [None] * T
    deplete = [0.0] * T
    for block_id in block_ids:
        blk = inst.scenario.block(block_id)
        rate = inst.demand(bus_id, block_id) / blk.span
        for t in range(blk.start_slot, blk.end_slot):
            occupied[t] = block_id
            deplete[t] = rate
    return occupied, deplete


def _simulate_bus(
    inst: Instance,
    bus: Bus,
    occupied: Sequence[str | None],
    deplete: Sequence[float],
    charging: Sequence[bool] | bytearray,
    consumption_scale: float = 1.0,
    t0: int = 0,
    soc0: float | None = None,
) -> list[float]:
    """Slot-boundary SOC values from t0 to the horizon end (inclusive)."""
    gain = inst.slot_gain
    bus_id = bus.id
    soc = bus.soc_initial if soc0 is None else soc0
    trace = [soc]
    for t in range(t0, inst.scenario.grid.slot_count):
        if occupied[t] is not None:
            soc = max(soc - consumption_scale * deplete[t], 0.0)
        elif charging[t]:
            soc = min(soc + gain(bus_id, soc), 1.0)
        trace.append(soc)
    return trace


def simulate_plan(
    inst: Instance,
    plan: Plan,
    consumption_scale: float = 1.0,
) -> Plan:
    """Fill in the SOC traces for a plan's decisions, deterministically.

    SOC falls linearly over each assigned block's slots (scaled) and rises by
    the charging-curve step evaluated at each charging slot's starting SOC.
    Violations are reported by validate_plan, never here.
    """
    s = inst.scenario
    T = s.grid.slot_count
    traces = {}
    for bus in s.buses:
        block_ids = sorted(plan.blocks_of(bus.id))
        occupied, deplete = _bus_schedule(inst, bus.id, block_ids)
        bits = plan.charging.get(bus.id, (False,) * T)
        traces[bus.id] = tuple(
            _simulate_bus(inst, bus, occupied, deplete, bits, consumption_scale)
        )
    return replace(plan, soc_trace=traces)


def make_plan(
    inst: Instance,
    assignments: Iterable[tuple[str, str]],
    charging: Mapping[str, Iterable[bool]],
    certificate: Certificate,
) -> Plan:
    """Assemble a fully traced plan from raw decisions."""
    s = inst.scenario
    T = s.grid.slot_count
    pairs = frozenset(assignments)
    bits = {
        bus.id: tuple(bool(x) for x in charging.get(bus.id, (False,) * T))
        for bus in s.buses
    }
    objective = sum(s.block(j).distance for _, j in pairs)
    plan = Plan(
        assignments=pairs,
        charging=bits,
        soc_trace={},
        objective_miles=objective,
        certificate=certificate,
    )
    return simulate_plan(inst, plan)


# --- validation ---------------------------------------------------------------


def validate_plan(inst: Instance, plan: Plan) -> list[Violation]:
    """Independent re-check of every constraint family against a plan.

    Validates the plan's own SOC traces (simulating at scale 1 when absent),
    so replayed realized traces are judged as recorded.
    """
    s = inst.scenario
    T = s.grid.slot_count
    setup = s.constraints.setup_slots
    out: list[Violation] = []

    if not plan.soc_trace:
        plan = simulate_plan(inst, plan)

    served_count: dict[str, int] = {}
    for bus_id, block_id in plan.assignments:
        served_count[block_id] = served_count.get(block_id, 0) + 1
    for block_id, n in sorted(served_count.items()):
        if n > 1:
            out.append(Violation("double-service", f"block {block_id}",
                                 detail=f"served by {n} buses"))

    bus_ids = {b.id for b in s.buses}
    block_ids = {b.id for b in s.blocks}
    for bus_id, block_id in sorted(plan.assignments):
        if bus_id not in bus_ids or block_id not in block_ids:
            out.append(Violation("incompatible-type", f"{bus_id}->{block_id}",
                                 detail="unknown bus or block"))
        elif bus_id not in inst.eligible.get(block_id, ()):
            out.append(Violation("incompatible-type", f"{bus_id}->{block_id}"))

    valid_pairs = [
        (i, j) for i, j in plan.assignments if i in bus_ids and j in block_ids
    ]

    for bus in s.buses:
        blocks = sorted(
            (s.block(j) for i, j in valid_pairs if i == bus.id),
            key=lambda b: b.start_slot,
        )
        for a, b in zip(blocks, blocks[1:]):
            if b.start_slot < a.end_slot:
                out.append(Violation("overlap", f"bus {bus.id}", slot=b.start_slot,
                                     detail=f"{a.id} and {b.id}"))
            elif b.start_slot - a.end_slot < setup:
                out.append(Violation("setup-gap", f"bus {bus.id}", slot=b.start_slot,
                                     detail=f"{b.id} follows {a.id} too closely"))

        bits = plan.charging.get(bus.id, (False,) * T)
        on_block = [None] * T
        for blk in blocks:
            for t in range(blk.start_slot, min(blk.end_slot, T)):
                on_block[t] = blk.id
        for t in range(T):
            if bits[t] and on_block[t] is not None:
                out.append(Violation("overlap", f"bus {bus.id}", slot=t,
                                     detail=f"charging during block {on_block[t]}"))
                break
        # setup before each charging session: the preceding slots must be
        # idle and not charging (pre-horizon preparation is permitted)
        for t in range(T):
            if bits[t] and (t == 0 or not bits[t - 1]):
                for k in range(max(0, t - setup), t):
                    if on_block[k] is not None or bits[k]:
                        out.append(Violation("setup-gap", f"bus {bus.id}", slot=t,
                                             detail="charging session lacks setup"))
                        break
        # setup before each block start: no charging inside the window
        for blk in blocks:
            for k in range(max(0, blk.start_slot - setup), blk.start_slot):
                if bits[k]:
                    out.append(Violation("setup-gap", f"bus {bus.id}",
                                         slot=blk.start_slot,
                                         detail=f"charging inside setup of {blk.id}"))
                    break

        trace = plan.soc_trace.get(bus.id, ())
        for t, soc in enumerate(trace):
            if soc < bus.soc_min - EPS:
                out.append(Violation("soc-below-min", f"bus {bus.id}", slot=t,
                                     detail=f"{soc:.4f} < {bus.soc_min}"))
                break
        for t, soc in enumerate(trace):
            if soc > bus.soc_max + EPS:
                out.append(Violation("soc-above-max", f"bus {bus.id}", slot=t,
                                     detail=f"{soc:.4f} > {bus.soc_max}"))
                break
        if trace and trace[-1] < bus.soc_final_target - EPS:
            out.append(Violation("final-soc", f"bus {bus.id}", slot=T,
                                 detail=f"{trace[-1]:.4f} < {bus.soc_final_target}"))

    n_chargers = len(s.chargers)
    lo, hi = s.constraints.peak_window
    peak_cap = s.constraints.max_concurrent_sessions_peak
    for t in range(T):
        active = sum(
            1 for bus in s.buses if plan.charging.get(bus.id, (False,) * T)[t]
        )
        if active > n_chargers:
            out.append(Violation("charger-capacity", "depot", slot=t,
                                 detail=f"{active} > {n_chargers} chargers"))
        elif lo <= t < hi and active > peak_cap:
            out.append(Violation("peak-cap", "depot", slot=t,
                                 detail=f"{active} > cap {peak_cap}"))

    for slot, count in s.constraints.min_buses_in_service:
        in_service = sum(
            1 for i, j in valid_pairs if s.block(j).covers(slot)
        )
        if in_service < count:
            out.append(Violation("service-coverage", "fleet", slot=slot,
                                 detail=f"{in_service} < required {count}"))

    return out


# --- charging completion ------------------------------------------------------


def _structure_ok_after_add(
    occupied: Sequence[str | None],
    bits: bytearray,
    c: int,
    setup: int,
    frozen_floor: int,
) -> bool:
    """Local session-structure check for adding charging slot c.

    The run containing c must keep a clean setup window before its first
    slot (slots before frozen_floor or the horizon are assumed prepared),
    and a later run must not find c inside its own setup window.
    """
    start = c
    while start - 1 >= 0 and bits[start - 1]:
        start -= 1
    if start >= frozen_floor:
        for k in range(max(0, start - setup), start):
            if occupied[k] is not None or bits[k]:
                return False
    nxt = None
    for k in range(c + 1, min(c + setup + 1, len(bits))):
        if bits[k]:
            nxt = k
            break
    if nxt is not None and nxt != c + 1:
        return False  # c would sit inside the next session's setup window
    return True


def _blocked_by_own_setup(
    blocks: Sequence[Block], c: int, setup: int
) -> bool:
    """Charging at c conflicts with the setup window of one of the bus's blocks."""
    for blk in blocks:
        if blk.start_slot - setup <= c < blk.start_slot:
            return True
    return False


class _BusState:
    """Mutable per-bus bookkeeping shared by the completion subroutine."""

    __slots__ = ("bus", "blocks", "occupied", "deplete", "bits", "anchor", "t0")

    def __init__(self, inst: Instance, bus: Bus, block_ids: Iterable[str],
                 t0: int, anchor: float, frozen_bits: Iterable[int]):
        self.bus = bus
        self.blocks = sorted(
            (inst.scenario.block(j) for j in block_ids), key=lambda b: b.start_slot
        )
        self.occupied, self.deplete = _bus_schedule(inst, bus.id, block_ids)
        self.bits = bytearray(inst.scenario.grid.slot_count)
        for t in frozen_bits:
            self.bits[t] = 1
        self.anchor = anchor
        self.t0 = t0

    def trace(self, inst: Instance) -> list[float]:
        return _simulate_bus(inst, self.bus, self.occupied, self.deplete,
                             self.bits, 1.0, self.t0, self.anchor)

    def soc_at(self, inst: Instance, slot: int) -> float:
        return self.trace(inst)[slot - self.t0]

    def max_ok(self, inst: Instance) -> bool:
        limit = self.bus.soc_max + EPS
        return all(v <= limit for v in self.trace(inst))


def complete_charging(
    inst: Instance,
    assignments: Iterable[tuple[str, str]],
    *,
    t0: int = 0,
    anchors: Mapping[str, float] | None = None,
    frozen_charging: Mapping[str, Iterable[int]] | None = None,
) -> dict[str, frozenset[int]] | None:
    """Latest-feasible greedy charging schedule for fixed assignments.

    Works through the SOC requirements (each block's demand on top of the
    safety floor, then the final target) in deadline order, placing charging
    slots as late as the setup rules, charger capacity and the peak cap
    allow. Slot contention resolves earliest-next-departure-first, then bus
    id. Returns None when some requirement cannot be met.
    """
    s = inst.scenario
    T = s.grid.slot_count
    setup = s.constraints.setup_slots
    anchors = anchors or {}
    frozen_charging = frozen_charging or {}

    by_bus: dict[str, list[str]] = {b.id: [] for b in s.buses}
    for bus_id, block_id in assignments:
        by_bus[bus_id].append(block_id)

    states: dict[str, _BusState] = {}
    used = [0] * T
    for bus in s.buses:
        st = _BusState(inst, bus, by_bus[bus.id], t0,
                       anchors.get(bus.id, bus.soc_initial),
                       frozen_charging.get(bus.id, ()))
        states[bus.id] = st
        for t in range(T):
            if st.bits[t]:
                used[t] += 1

    reqs: list[tuple[int, str, float]] = []
    for bus in s.buses:
        st = states[bus.id]
        for blk in st.blocks:
            if blk.start_slot >= t0:
                needed = bus.soc_min + inst.demand(bus.id, blk.id)
                reqs.append((blk.start_slot, bus.id, needed))
        reqs.append((T, bus.id, bus.soc_final_target))
    reqs.sort(key=lambda r: (r[0], r[1]))

    for deadline, bus_id, needed in reqs:
        st = states[bus_id]
        scan_from = deadline - 1
        while st.soc_at(inst, deadline) < needed - EPS:
            placed = None
            for c in range(scan_from, t0 - 1, -1):
                if st.bits[c] or st.occupied[c] is not None:
                    continue
                if used[c] >= inst.capacity_at(c):
                    continue
                if _blocked_by_own_setup(st.blocks, c, setup):
                    continue
                if not _structure_ok_after_add(st.occupied, st.bits, c, setup, t0):
                    continue
                st.bits[c] = 1
                if st.max_ok(inst):
                    placed = c
                    break
                st.bits[c] = 0
            if placed is None:
                return None
            used[placed] += 1
            scan_from = placed - 1
    return {bus_id: frozenset(t for t in range(T) if st.bits[t])
            for bus_id, st in states.items()}


def _bus_feasible_uncapped(
    inst: Instance,
    bus: Bus,
    block_ids: frozenset[str],
    t0: int,
    anchor: float,
    frozen_bits: frozenset[int],
    cache: dict,
) -> bool:
    """Can this bus alone, with unlimited chargers, meet its requirements?

    Necessary condition used to prune assignment branches: charger contention
    only ever tightens it.
    """
    key = (bus.id, block_ids)
    hit = cache.get(key)
    if hit is not None:
        return hit
    s = inst.scenario
    T = s.grid.slot_count
    setup = s.constraints.setup_slots
    st = _BusState(inst, bus, block_ids, t0, anchor, frozen_bits)
    ok = True
    reqs = [
        (blk.start_slot, bus.soc_min + inst.demand(bus.id, blk.id))
        for blk in st.blocks
        if blk.start_slot >= t0
    ]
    reqs.append((T, bus.soc_final_target))
    for deadline, needed in sorted(reqs):
        scan_from = deadline - 1
        while st.soc_at(inst, deadline) < needed - EPS:
            placed = None
            for c in range(scan_from, t0 - 1, -1):
                if st.bits[c] or st.occupied[c] is not None:
                    continue
                if _blocked_by_own_setup(st.blocks, c, setup):
                    continue
                if not _structure_ok_after_add(st.occupied, st.bits, c, setup, t0):
                    continue
                st.bits[c] = 1
                if st.max_ok(inst):
                    placed = c
                    break
                st.bits[c] = 0
            if placed is None:
                ok = False
                break
            scan_from = placed - 1
        if not ok:
            break
    cache[key] = ok
    return ok


def _exact_completion(
    inst: Instance,
    assignments: Iterable[tuple[str, str]],
    *,
    t0: int = 0,
    anchors: Mapping[str, float] | None = None,
    frozen_charging: Mapping[str, Iterable[int]] | None = None,
) -> dict[str, frozenset[int]] | None:
    """Backtracking charging completion, exact on small instances.

    Chooses each bus's full charging slot set in turn (latest-rich candidate
    order), backtracking across buses on capacity conflicts. Only invoked
    when the greedy subroutine fails and the instance is small.
    """
    s = inst.scenario
    T = s.grid.slot_count
    setup = s.constraints.setup_slots
    anchors = anchors or {}
    frozen_charging = frozen_charging or {}
    buses = sorted(s.buses, key=lambda b: b.id)

    by_bus: dict[str, list[str]] = {b.id: [] for b in s.buses}
    for bus_id, block_id in assignments:
        by_bus[bus_id].append(block_id)

    def bus_options(bus: Bus) -> list[frozenset[int]]:
        """Inclusion-minimal requirement-satisfying charging sets for one bus.

        A superset of a working set only ever consumes more charger capacity,
        so minimal sets are enough for the joint search.
        """
        st = _BusState(inst, bus, by_bus[bus.id], t0,
                       anchors.get(bus.id, bus.soc_initial),
                       frozen_charging.get(bus.id, ()))
        frozen = frozenset(t for t in range(T) if st.bits[t])
        usable = sorted(
            c for c in range(t0, T)
            if st.occupied[c] is None and not st.bits[c]
            and not _blocked_by_own_setup(st.blocks, c, setup)
        )
        reqs = sorted(
            [(blk.start_slot, bus.soc_min + inst.demand(bus.id, blk.id))
             for blk in st.blocks if blk.start_slot >= t0]
            + [(T, bus.soc_final_target)]
        )

        def satisfies(candidate: frozenset[int]) -> bool:
            bits = bytearray(T)
            for t in frozen | candidate:
                bits[t] = 1
            for t in range(T):
                if bits[t] and (t == 0 or not bits[t - 1]) and t >= t0:
                    for k in range(max(0, t - setup), t):
                        if st.occupied[k] is not None or bits[k]:
                            return False
            trace = _simulate_bus(inst, bus, st.occupied, st.deplete, bits,
                                  1.0, t0, st.anchor)
            if any(v > bus.soc_max + EPS for v in trace):
                return False
            return all(trace[d - t0] >= needed - EPS for d, needed in reqs)

        from itertools import combinations

        found: list[frozenset[int]] = []
        for size in range(0, len(usable) + 1):
            for combo in combinations(usable, size):
                candidate = frozenset(combo)
                if any(prior <= candidate for prior in found):
                    continue
                if satisfies(candidate):
                    found.append(candidate)
        return found

    options = []
    for bus in buses:
        opts = bus_options(bus)
        if not opts:
            return None
        options.append(opts)

    used = [0] * T
    for bus in buses:
        for t in frozen_charging.get(bus.id, ()):
            used[t] += 1

    chosen: dict[str, frozenset[int]] = {}

    def place(k: int) -> bool:
        if k == len(buses):
            return True
        bus = buses[k]
        for candidate in options[k]:
            if all(used[t] < inst.capacity_at(t) for t in candidate):
                for t in candidate:
                    used[t] += 1
                chosen[bus.id] = candidate
                if place(k + 1):
                    return True
                for t in candidate:
                    used[t] -= 1
                del chosen[bus.id]
        return False

    if not place(0):
        return None
    return {
        bus.id: frozenset(frozen_charging.get(bus.id, ())) | chosen.get(bus.id, frozenset())
        for bus in buses
    }
