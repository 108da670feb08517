"""Electric bus fleet operation stack: digital twin, block assignment and
charging schedule solver, depot queue management, and yard maneuver planning."""

from .core import (
    Block,
    Bus,
    BusType,
    Certificate,
    Charger,
    Defect,
    OperationalConstraints,
    Plan,
    Scenario,
    TimeGrid,
    load_scenario,
    save_scenario,
    validate_scenario,
)
from .twin import (
    BrakeAllocation,
    ChargingCurve,
    DigitalTwin,
    MotorEfficiencyMap,
    TripProfile,
    TripSample,
    VehicleParams,
    block_energy,
    charge_added,
    fit_road_load,
    road_load_force,
    split_brake_force,
    time_to_charge,
    traction_power,
    trip_energy,
)

__all__ = [
    "Block", "Bus", "BusType", "Certificate", "Charger", "Defect",
    "OperationalConstraints", "Plan", "Scenario", "TimeGrid",
    "load_scenario", "save_scenario", "validate_scenario",
    "BrakeAllocation", "ChargingCurve", "DigitalTwin", "MotorEfficiencyMap",
    "TripProfile", "TripSample", "VehicleParams",
    "block_energy", "charge_added", "fit_road_load", "road_load_force",
    "split_brake_force", "time_to_charge", "traction_power", "trip_energy",
]

__version__ = "0.1.0"
