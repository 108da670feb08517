"""Per-vehicle predictive model: road-load physics, motor efficiency, brake
split, nonlinear charging curve, and least-squares identification of the
road-load parameters from logged wheel-force data.

Forces are N, speeds m/s, powers kW, energies kWh, SOC a fraction of battery
capacity. Charging-time math is done in minutes.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Block, BusType

STANDARD_GRAVITY = 9.80665


class InfeasibleForType(Exception):
    """A block demands more energy than the bus type's battery holds."""

    def __init__(self, block_id: str, type_id: str, demand_kwh: float, capacity: float):
        self.block_id = block_id
        self.type_id = type_id
        super().__init__(
            f"block {block_id} needs {demand_kwh:g} kWh, exceeding the "
            f"{capacity:g} kWh battery of type {type_id}"
        )


@dataclass(frozen=True)
class VehicleParams:
    """Road-load parameters of one vehicle configuration.

    mass_effective is total mass plus rolling inertias; aero_coeff and
    rolling_coeff are the constants of the drag and rolling terms at the
    reference configuration. aux_power is a constant auxiliary draw.
    """

    mass_total: float
    mass_effective: float
    aero_coeff: float
    rolling_coeff: float
    cornering_stiffness: float
    config_id: str = "default"
    aux_power: float = 0.0
    gravity: float = STANDARD_GRAVITY

    def __post_init__(self) -> None:
        for name in ("mass_total", "mass_effective", "aero_coeff", "rolling_coeff",
                     "cornering_stiffness", "gravity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.mass_effective < self.mass_total:
            raise ValueError("mass_effective must be >= mass_total")
        if self.aux_power < 0:
            raise ValueError("aux_power must be non-negative")


@dataclass(frozen=True)
class MotorEfficiencyMap:
    """Bilinear efficiency lookup over (wheel force, speed).

    Queries outside the grid clamp to the nearest node; results never fall
    below floor. The motor-temperature argument is accepted and ignored
    (no thermal model).
    """

    force_axis: tuple[float, ...]
    speed_axis: tuple[float, ...]
    efficiency: tuple[tuple[float, ...], ...]
    floor: float = 0.05

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.force_axis, self.force_axis[1:])):
            raise ValueError("force_axis must be strictly increasing")
        if any(b <= a for a, b in zip(self.speed_axis, self.speed_axis[1:])):
            raise ValueError("speed_axis must be strictly increasing")
        if len(self.efficiency) != len(self.force_axis) or any(
            len(row) != len(self.speed_axis) for row in self.efficiency
        ):
            raise ValueError("efficiency matrix shape must be force_axis x speed_axis")
        if any(not 0.0 < e <= 1.0 for row in self.efficiency for e in row):
            raise ValueError("efficiency entries must be in (0, 1]")
        if not 0.0 < self.floor <= 1.0:
            raise ValueError("floor must be in (0, 1]")

    @classmethod
    def constant(cls, eta: float) -> "MotorEfficiencyMap":
        return cls((0.0, 1.0), (0.0, 1.0), ((eta, eta), (eta, eta)), floor=min(eta, 0.05))

    def lookup(self, force: float, speed: float, motor_temp: float | None = None) -> float:
        del motor_temp  # named in the interface, no thermal model behind it
        eta = _bilinear(self.force_axis, self.speed_axis, self.efficiency, force, speed)
        return max(eta, self.floor)


def _bilinear(
    xs: tuple[float, ...],
    ys: tuple[float, ...],
    grid: tuple[tuple[float, ...], ...],
    x: float,
    y: float,
) -> float:
    x = min(max(x, xs[0]), xs[-1])
    y = min(max(y, ys[0]), ys[-1])
    i = min(bisect_right(xs, x), len(xs) - 1)
    j = min(bisect_right(ys, y), len(ys) - 1)
    i0, j0 = i - 1, j - 1
    tx = (x - xs[i0]) / (xs[i] - xs[i0])
    ty = (y - ys[j0]) / (ys[j] - ys[j0])
    return (
        grid[i0][j0] * (1 - tx) * (1 - ty)
        + grid[i][j0] * tx * (1 - ty)
        + grid[i0][j] * (1 - tx) * ty
        + grid[i][j] * tx * ty
    )


@dataclass(frozen=True)
class BrakeAllocation:
    """Split of a braking demand between regeneration and friction brakes."""

    regen_min_speed: float = 1.5
    max_regen_force: float = 30000.0

    def __post_init__(self) -> None:
        if self.regen_min_speed < 0 or self.max_regen_force < 0:
            raise ValueError("brake allocation parameters must be non-negative")


@dataclass(frozen=True)
class TripSample:
    time_s: float
    speed: float
    accel: float
    bearing: float = 0.0
    path_pos: float = 0.0
    gradient: float = 0.0
    curve_radius: float = math.inf
    wind_speed: float = 0.0
    wind_bearing: float = 0.0
    tire_kpa: float = 700.0


@dataclass(frozen=True)
class TripProfile:
    """Time-ordered kinematic and road samples for one trip."""

    samples: tuple[TripSample, ...]

    def __post_init__(self) -> None:
        times = [s.time_s for s in self.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("sample times must be strictly increasing")
        for s in self.samples:
            if s.speed < 0:
                raise ValueError(f"negative speed at t={s.time_s}")
            if not (s.curve_radius > 0):
                raise ValueError(f"curve_radius must be positive or inf at t={s.time_s}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class ChargingCurve:
    """Piecewise-linear charging power as a function of SOC.

    Breakpoints cover [0, 1]; power is single-peaked and may reach zero only
    at full charge. charge_efficiency scales grid power into stored energy.
    """

    breakpoints: tuple[tuple[float, float], ...]
    charge_efficiency: float = 1.0

    def __post_init__(self) -> None:
        socs = [s for s, _ in self.breakpoints]
        powers = [p for _, p in self.breakpoints]
        if len(self.breakpoints) < 2 or socs[0] != 0.0 or socs[-1] != 1.0:
            raise ValueError("breakpoints must cover [0, 1]")
        if any(b <= a for a, b in zip(socs, socs[1:])):
            raise ValueError("breakpoint SOCs must be strictly increasing")
        for s, p in self.breakpoints:
            if p < 0 or (p == 0 and s != 1.0):
                raise ValueError("power must be positive except possibly at soc=1")
        peak = powers.index(max(powers))
        if any(b < a for a, b in zip(powers[: peak + 1], powers[1 : peak + 1])) or any(
            b > a for a, b in zip(powers[peak:], powers[peak + 1 :])
        ):
            raise ValueError("power must be single-peaked over SOC")
        if not 0.0 < self.charge_efficiency <= 1.0:
            raise ValueError("charge_efficiency must be in (0, 1]")

    def power(self, soc: float) -> float:
        soc = min(max(soc, 0.0), 1.0)
        socs = [s for s, _ in self.breakpoints]
        i = min(bisect_right(socs, soc), len(socs) - 1)
        (s0, p0), (s1, p1) = self.breakpoints[i - 1], self.breakpoints[i]
        return p0 + (p1 - p0) * (soc - s0) / (s1 - s0)

    def capped(self, max_power: float) -> "ChargingCurve":
        """Curve limited by a charger that cannot exceed max_power kW."""
        if max_power <= 0:
            raise ValueError("max_power must be positive")
        pts: list[tuple[float, float]] = []
        for (s0, p0), (s1, p1) in zip(self.breakpoints, self.breakpoints[1:]):
            pts.append((s0, min(p0, max_power)))
            if (p0 - max_power) * (p1 - max_power) < 0:
                t = (max_power - p0) / (p1 - p0)
                pts.append((s0 + t * (s1 - s0), max_power))
        s_last, p_last = self.breakpoints[-1]
        pts.append((s_last, min(p_last, max_power)))
        return ChargingCurve(tuple(pts), self.charge_efficiency)


def default_charging_curve(p_max: float, charge_efficiency: float = 1.0) -> ChargingCurve:
    """Nominal depot curve: ramp-in below 20% SOC, plateau, taper above 80%."""
    return ChargingCurve(
        ((0.0, 0.5 * p_max), (0.2, p_max), (0.8, p_max), (1.0, 0.1 * p_max)),
        charge_efficiency,
    )


@dataclass(frozen=True)
class DigitalTwin:
    """Bundle of the predictive models for one bus type."""

    params: VehicleParams
    efficiency_map: MotorEfficiencyMap
    brake_allocation: BrakeAllocation
    charging_curve: ChargingCurve


# --- traction physics -------------------------------------------------------


def _rolling_factor(sample: TripSample) -> float:
    """cos(grade) while rolling, zero at rest (no rolling resistance standing still)."""
    return math.cos(sample.gradient) if sample.speed > 0 else 0.0


def road_load_force(params: VehicleParams, sample: TripSample) -> float:
    """Total wheel force demand for one sample.

    Gravity/rolling term + aerodynamic drag against the head-wind-adjusted
    relative speed (sign preserving) + inertial term + cornering loss. The
    cornering term vanishes on straight road (infinite radius).
    """
    m, g = params.mass_total, params.gravity
    grade = sample.gradient
    f = m * g * (math.sin(grade) + params.rolling_coeff * _rolling_factor(sample))
    v_rel = sample.speed + sample.wind_speed * math.cos(sample.wind_bearing - sample.bearing)
    f += params.aero_coeff * v_rel * abs(v_rel)
    f += params.mass_effective * sample.accel
    if math.isfinite(sample.curve_radius):
        f += m * m / (4.0 * params.cornering_stiffness * sample.curve_radius**2) * sample.speed**3
    return f


def split_brake_force(alloc: BrakeAllocation, force: float, speed: float,
                      accel: float) -> tuple[float, float]:
    """Split total force into (motor force, friction-brake force).

    The two parts always sum to the input exactly. Below the regeneration
    cutoff speed the friction brakes take everything; above it the motor
    absorbs up to max_regen_force.
    """
    del accel  # part of the interface; the split depends on force and speed only
    if force >= 0:
        return force, 0.0
    if speed < alloc.regen_min_speed:
        return 0.0, force
    f_motor = max(force, -alloc.max_regen_force)
    return f_motor, force - f_motor


def traction_power(emap: MotorEfficiencyMap, f_motor: float, speed: float) -> float:
    """Electrical motor power in kW for a wheel force at a speed.

    Driving divides by efficiency (battery supplies more than mechanical);
    regeneration multiplies (battery recovers less than mechanical).
    """
    mech_w = f_motor * speed
    if mech_w == 0.0:
        return 0.0
    eta = emap.lookup(f_motor, speed)
    if mech_w > 0:
        return mech_w / eta / 1000.0
    return mech_w * eta / 1000.0


def battery_power(params: VehicleParams, emap: MotorEfficiencyMap,
                  alloc: BrakeAllocation, curve: ChargingCurve,
                  sample: TripSample) -> float:
    """Net battery draw in kW at one sample, regen credited at charge efficiency."""
    force = road_load_force(params, sample)
    f_motor, _ = split_brake_force(alloc, force, sample.speed, sample.accel)
    p = traction_power(emap, f_motor, sample.speed) + params.aux_power
    if p < 0:
        p *= curve.charge_efficiency
    return p


def trip_energy(params: VehicleParams, emap: MotorEfficiencyMap,
                alloc: BrakeAllocation, curve: ChargingCurve,
                profile: TripProfile) -> float:
    """Battery energy in kWh for a trip, trapezoidal over the sample times.

    Regeneration may reduce the total but the trip can never net-generate:
    results are floored at zero.
    """
    if len(profile) == 0:
        raise ValueError("empty trip profile")
    powers = [battery_power(params, emap, alloc, curve, s) for s in profile.samples]
    total_kws = 0.0
    for (s0, p0), (s1, p1) in zip(
        zip(profile.samples, powers), zip(profile.samples[1:], powers[1:])
    ):
        total_kws += 0.5 * (p0 + p1) * (s1.time_s - s0.time_s)
    return max(total_kws / 3600.0, 0.0)


def block_energy(twin: DigitalTwin, block: Block, bus_type: BusType,
                 profile: TripProfile | None = None) -> float:
    """Predicted SOC fraction a block consumes on a bus type.

    Uses the block's precomputed kWh when present, otherwise evaluates the
    twin on the given trip profile. Raises InfeasibleForType when the demand
    exceeds the battery.
    """
    if bus_type.id in block.energy_kwh:
        kwh = block.energy_kwh[bus_type.id]
    elif profile is not None:
        kwh = trip_energy(twin.params, twin.efficiency_map, twin.brake_allocation,
                          twin.charging_curve, profile)
    else:
        raise ValueError(
            f"block {block.id} has no energy for type {bus_type.id} and no trip profile"
        )
    fraction = kwh / bus_type.battery_capacity
    if fraction > 1.0:
        raise InfeasibleForType(block.id, bus_type.id, kwh, bus_type.battery_capacity)
    return fraction


# --- charging dynamics ------------------------------------------------------
#
# d(soc)/dt = eta * P(soc) / capacity with P piecewise linear, integrated in
# closed form per piece: linear in time on flat pieces, exponential on sloped
# ones.


def _piece_time_minutes(curve: ChargingCurve, capacity: float,
                        s_from: float, s_to: float) -> float:
    """Minutes to charge s_from -> s_to within one linear piece (s_from < s_to)."""
    p_from, p_to = curve.power(s_from), curve.power(s_to)
    if p_from <= 0.0:
        return math.inf
    scale = 60.0 * capacity / curve.charge_efficiency
    if abs(p_to - p_from) < 1e-12 * max(p_from, 1.0):
        return scale * (s_to - s_from) / p_from
    if p_to <= 0.0:
        return math.inf
    slope = (p_to - p_from) / (s_to - s_from)
    return scale / slope * math.log(p_to / p_from)


def charge_added(curve: ChargingCurve, capacity: float, soc_from: float,
                 duration_minutes: float) -> float:
    """SOC after charging for a duration, capped at full."""
    if not 0.0 <= soc_from <= 1.0:
        raise ValueError(f"soc_from must be within [0, 1], got {soc_from}")
    if duration_minutes < 0:
        raise ValueError("duration must be non-negative")
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    soc = soc_from
    remaining = duration_minutes
    socs = [s for s, _ in curve.breakpoints]
    while remaining > 0.0 and soc < 1.0:
        i = min(bisect_right(socs, soc), len(socs) - 1)
        s_hi = socs[i]
        t_piece = _piece_time_minutes(curve, capacity, soc, s_hi)
        if t_piece <= remaining:
            soc = s_hi
            remaining -= t_piece
        else:
            # includes the asymptotic case where power decays to zero at s_hi
            return _soc_after_within_piece(curve, capacity, soc, s_hi, remaining)
    return min(soc, 1.0)


def _soc_after_within_piece(curve: ChargingCurve, capacity: float, s_from: float,
                            s_hi: float, minutes: float) -> float:
    p_from, p_hi = curve.power(s_from), curve.power(s_hi)
    if p_from <= 0.0:
        return s_from
    rate = curve.charge_efficiency / (60.0 * capacity)
    if abs(p_hi - p_from) < 1e-12 * max(p_from, 1.0):
        return min(s_from + p_from * rate * minutes, s_hi)
    slope = (p_hi - p_from) / (s_hi - s_from)
    p_now = p_from * math.exp(slope * rate * minutes)
    return min(s_from + (p_now - p_from) / slope, s_hi)


def time_to_charge(curve: ChargingCurve, capacity: float, soc_from: float,
                   soc_to: float) -> float:
    """Minutes to charge between two SOC levels; exact inverse of charge_added.

    Returns inf when a zero-power point blocks the way (possible only
    approaching full charge on a curve that tapers to zero).
    """
    if soc_to < soc_from:
        raise ValueError(f"soc_to {soc_to} below soc_from {soc_from}")
    if soc_from < 0.0 or soc_to > 1.0:
        raise ValueError("SOC levels must be within [0, 1]")
    total = 0.0
    soc = soc_from
    socs = [s for s, _ in curve.breakpoints]
    while soc < soc_to:
        i = min(bisect_right(socs, soc), len(socs) - 1)
        s_hi = min(socs[i], soc_to)
        step = _piece_time_minutes(curve, capacity, soc, s_hi)
        if math.isinf(step):
            return math.inf
        total += step
        soc = s_hi
    return total


# --- parameter identification -----------------------------------------------

_LUMPED_NAMES = ("mass_effective", "rolling_force", "aero_coeff", "cornering_lump")


@dataclass(frozen=True)
class RoadLoadFit:
    """Least-squares road-load estimate.

    rolling_force is the lumped M*g*C_r product; cornering_lump is M^2/(4*C_s).
    The convenience fields translate them back to physical parameters using
    the known vehicle mass.
    """

    mass_effective: float
    rolling_coeff: float
    aero_coeff: float
    cornering_stiffness: float
    lumped: dict[str, float]
    residual_rms: float


def fit_road_load(
    logs: Iterable[tuple[TripProfile, Sequence[float]]],
    mass_total: float,
    gravity: float = STANDARD_GRAVITY,
) -> RoadLoadFit:
    """Fit (mass_effective, M*g*C_r, aero_coeff, M^2/4C_s) from wheel-force logs.

    The known gravity-gradient share M*g*sin(grade) is moved to the left-hand
    side; the remaining four lumped parameters are identified by ordinary
    least squares. Rank-deficient regressors are rejected with the deficient
    directions named.
    """
    rows: list[list[float]] = []
    targets: list[float] = []
    for profile, forces in logs:
        if len(forces) != len(profile):
            raise ValueError("force log length must match the profile")
        for sample, force in zip(profile.samples, forces):
            v_rel = sample.speed + sample.wind_speed * math.cos(
                sample.wind_bearing - sample.bearing
            )
            curvature = (
                sample.speed**3 / sample.curve_radius**2
                if math.isfinite(sample.curve_radius)
                else 0.0
            )
            rows.append(
                [sample.accel, _rolling_factor(sample), v_rel * abs(v_rel), curvature]
            )
            targets.append(force - mass_total * gravity * math.sin(sample.gradient))

    if len(rows) < 4:
        raise ValueError(f"need at least 4 samples, got {len(rows)}")
    design = np.asarray(rows)
    y = np.asarray(targets)
    theta, _, rank, singular = np.linalg.lstsq(design, y, rcond=None)
    if rank < 4:
        tol = singular[0] * max(design.shape) * np.finfo(float).eps
        _, _, vt = np.linalg.svd(design)
        deficient = sorted(
            {
                _LUMPED_NAMES[idx]
                for row in vt[rank:]
                for idx in np.flatnonzero(np.abs(row) > 1e-6)
            }
        )
        raise ValueError(
            f"rank-deficient regressor matrix (rank {rank} of 4, tol {tol:.3g}); "
            f"deficient directions: {', '.join(deficient)}"
        )
    residual_rms = float(np.sqrt(np.mean((design @ theta - y) ** 2)))
    m_eff, rolling_force, aero, cornering_lump = (float(t) for t in theta)
    return RoadLoadFit(
        mass_effective=m_eff,
        rolling_coeff=rolling_force / (mass_total * gravity),
        aero_coeff=aero,
        cornering_stiffness=mass_total**2 / (4.0 * cornering_lump),
        lumped=dict(zip(_LUMPED_NAMES, (m_eff, rolling_force, aero, cornering_lump))),
        residual_rms=residual_rms,
    )


# --- file formats -----------------------------------------------------------

TRIP_CSV_COLUMNS = (
    "t_s", "v_mps", "a_mps2", "bearing_rad", "s_m", "grade_rad",
    "curve_radius_m", "wind_mps", "wind_bearing_rad", "tire_kpa",
)


def load_trip_profile(path: str | Path) -> TripProfile:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRIP_CSV_COLUMNS:
            raise ValueError(
                f"trip profile columns must be exactly {','.join(TRIP_CSV_COLUMNS)}"
            )
        samples = tuple(
            TripSample(
                time_s=float(row["t_s"]),
                speed=float(row["v_mps"]),
                accel=float(row["a_mps2"]),
                bearing=float(row["bearing_rad"]),
                path_pos=float(row["s_m"]),
                gradient=float(row["grade_rad"]),
                curve_radius=float(row["curve_radius_m"]),
                wind_speed=float(row["wind_mps"]),
                wind_bearing=float(row["wind_bearing_rad"]),
                tire_kpa=float(row["tire_kpa"]),
            )
            for row in reader
        )
    return TripProfile(samples)


def save_trip_profile(profile: TripProfile, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIP_CSV_COLUMNS)
        for s in profile.samples:
            writer.writerow(
                [s.time_s, s.speed, s.accel, s.bearing, s.path_pos, s.gradient,
                 "inf" if math.isinf(s.curve_radius) else s.curve_radius,
                 s.wind_speed, s.wind_bearing, s.tire_kpa]
            )


def twin_to_json(twin: DigitalTwin) -> dict:
    p = twin.params
    return {
        "vehicle_params": {
            "mass_total": p.mass_total,
            "mass_effective": p.mass_effective,
            "aero_coeff": p.aero_coeff,
            "rolling_coeff": p.rolling_coeff,
            "cornering_stiffness": p.cornering_stiffness,
            "config_id": p.config_id,
            "aux_power": p.aux_power,
            "gravity": p.gravity,
        },
        "efficiency_map": {
            "force_axis": list(twin.efficiency_map.force_axis),
            "speed_axis": list(twin.efficiency_map.speed_axis),
            "efficiency": [list(row) for row in twin.efficiency_map.efficiency],
            "floor": twin.efficiency_map.floor,
        },
        "brake_allocation": {
            "regen_min_speed": twin.brake_allocation.regen_min_speed,
            "max_regen_force": twin.brake_allocation.max_regen_force,
        },
        "charging_curve": {
            "breakpoints": [list(bp) for bp in twin.charging_curve.breakpoints],
            "charge_efficiency": twin.charging_curve.charge_efficiency,
        },
    }


def twin_from_json(doc: dict) -> DigitalTwin:
    vp = doc["vehicle_params"]
    em = doc["efficiency_map"]
    ba = doc["brake_allocation"]
    cc = doc["charging_curve"]
    return DigitalTwin(
        params=VehicleParams(
            mass_total=float(vp["mass_total"]),
            mass_effective=float(vp["mass_effective"]),
            aero_coeff=float(vp["aero_coeff"]),
            rolling_coeff=float(vp["rolling_coeff"]),
            cornering_stiffness=float(vp["cornering_stiffness"]),
            config_id=vp.get("config_id", "default"),
            aux_power=float(vp.get("aux_power", 0.0)),
            gravity=float(vp.get("gravity", STANDARD_GRAVITY)),
        ),
        efficiency_map=MotorEfficiencyMap(
            force_axis=tuple(float(x) for x in em["force_axis"]),
            speed_axis=tuple(float(x) for x in em["speed_axis"]),
            efficiency=tuple(tuple(float(e) for e in row) for row in em["efficiency"]),
            floor=float(em.get("floor", 0.05)),
        ),
        brake_allocation=BrakeAllocation(
            regen_min_speed=float(ba["regen_min_speed"]),
            max_regen_force=float(ba["max_regen_force"]),
        ),
        charging_curve=ChargingCurve(
            breakpoints=tuple((float(s), float(p)) for s, p in cc["breakpoints"]),
            charge_efficiency=float(cc.get("charge_efficiency", 1.0)),
        ),
    )


def load_twin(path: str | Path) -> DigitalTwin:
    import json

    with open(path) as fh:
        return twin_from_json(json.load(fh))


def save_twin(twin: DigitalTwin, path: str | Path) -> None:
    import json

    with open(path, "w") as fh:
        json.dump(twin_to_json(twin), fh, indent=2, sort_keys=True)
        fh.write("\n")
