import dataclasses

import pytest

from ebusfleet.core import (
    Block,
    Bus,
    BusType,
    Certificate,
    Charger,
    OperationalConstraints,
    Scenario,
    TimeGrid,
    parse_hhmm,
    recompute_objective,
    scenario_from_json,
    scenario_to_json,
    validate_scenario,
)

GRID = TimeGrid(day_start=5 * 60, slot_minutes=15, slot_count=100)


def one_bus_scenario(**overrides):
    fields = dict(
        grid=TimeGrid(day_start=300, slot_minutes=15, slot_count=40),
        bus_types=(BusType(id="std", battery_capacity=400.0),),
        buses=(
            Bus(id="bus-1", bus_type="std", soc_initial=0.85, soc_min=0.35,
                soc_max=1.0, soc_final_target=0.85),
        ),
        blocks=(
            Block(id="blk-1", start_slot=4, end_slot=12, distance=20.0,
                  energy_kwh={"std": 80.0}),
        ),
        chargers=(Charger(id="chg-1", spot_id="spot-1", max_power=150.0),),
        constraints=OperationalConstraints(
            max_concurrent_sessions_peak=1, peak_window=(4, 36)),
    )
    fields.update(overrides)
    return Scenario(**fields)


class TestTimeGrid:
    def test_origin_maps_to_slot_zero(self):
        assert GRID.slot_of(5 * 60) == 0

    def test_afternoon_slot(self):
        # (16:00 - 05:00) / 15 min
        assert GRID.slot_of(16 * 60) == (16 * 60 - 5 * 60) // 15 == 44

    def test_off_boundary_rejected(self):
        with pytest.raises(ValueError, match="7 min"):
            GRID.slot_of(5 * 60 + 7)

    def test_out_of_horizon_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            GRID.slot_of(5 * 60 + 101 * 15)
        with pytest.raises(ValueError, match="outside"):
            GRID.slot_of(5 * 60 - 15)

    def test_round_trip_all_slots(self):
        for k in range(GRID.slot_count + 1):
            assert GRID.slot_of(GRID.time_of(k)) == k

    def test_slot_minutes_must_divide_hour(self):
        with pytest.raises(ValueError):
            TimeGrid(day_start=0, slot_minutes=7, slot_count=10)

    def test_horizon_cap(self):
        with pytest.raises(ValueError):
            TimeGrid(day_start=0, slot_minutes=15, slot_count=121)
        TimeGrid(day_start=0, slot_minutes=15, slot_count=120)

    def test_extended_label(self):
        grid = TimeGrid(day_start=300, slot_minutes=15, slot_count=100)
        assert grid.label_of(0) == "05:00"
        assert grid.label_of(100) == "30:00"


class TestParseHhmm:
    def test_plain(self):
        assert parse_hhmm("16:00") == 960

    def test_rolls_past_midnight_against_day_start(self):
        assert parse_hhmm("02:00", GRID) == 26 * 60

    def test_extended_hours_pass_through(self):
        assert parse_hhmm("26:00", GRID) == 26 * 60

    def test_garbage_rejected(self):
        with pytest.raises(ValueError):
            parse_hhmm("noon")


class TestValidateScenario:
    def test_well_formed_is_clean(self):
        assert validate_scenario(one_bus_scenario()) == []

    def test_zero_length_block(self):
        s = one_bus_scenario(
            blocks=(Block(id="blk-1", start_slot=4, end_slot=4, distance=20.0,
                          energy_kwh={"std": 80.0}),)
        )
        defects = validate_scenario(s)
        assert len(defects) == 1
        assert "blk-1" in defects[0].entity
        assert "start_slot < end_slot" in defects[0].rule

    def test_soc_bound_ordering(self):
        s = one_bus_scenario(
            buses=(Bus(id="bus-1", bus_type="std", soc_initial=0.30, soc_min=0.35,
                       soc_max=1.0, soc_final_target=0.85),)
        )
        defects = validate_scenario(s)
        assert len(defects) == 1
        assert "bus-1" in defects[0].entity

    def test_total_never_raises(self):
        s = one_bus_scenario(
            bus_types=(BusType(id="std", battery_capacity=-1.0),),
            buses=(Bus(id="bus-1", bus_type="ghost", soc_initial=2.0, soc_min=0.9,
                       soc_max=0.1, soc_final_target=0.95),),
            blocks=(Block(id="blk-1", start_slot=9, end_slot=5, distance=-3.0),),
            chargers=(
                Charger(id="c1", spot_id="s1", max_power=0.0),
                Charger(id="c2", spot_id="s1", max_power=10.0),
            ),
            constraints=OperationalConstraints(
                max_concurrent_sessions_peak=5, peak_window=(30, 10),
                min_buses_in_service=((999, 4),), setup_slots=0),
        )
        defects = validate_scenario(s)
        assert len(defects) >= 8

    def test_missing_energy_for_compatible_type(self):
        s = one_bus_scenario(
            blocks=(Block(id="blk-1", start_slot=4, end_slot=12, distance=20.0),)
        )
        defects = validate_scenario(s)
        assert any("no energy" in d.rule for d in defects)

    def test_unused_incompatible_type_needs_no_energy(self):
        s = one_bus_scenario(
            bus_types=(
                BusType(id="std", battery_capacity=400.0),
                BusType(id="mini", battery_capacity=100.0,
                        compatible_profile=frozenset({"short"})),
            ),
            blocks=(Block(id="blk-1", start_slot=4, end_slot=12, distance=20.0,
                          energy_kwh={"std": 80.0},
                          required_profile=frozenset({"short"})),),
        )
        # mini matches the profile but carries no energy entry; it is unused by
        # any bus, so the scenario stays clean
        assert validate_scenario(s) == []

    def test_duplicate_ids_flagged(self):
        s = one_bus_scenario(
            buses=(
                Bus(id="bus-1", bus_type="std", soc_initial=0.85, soc_min=0.35,
                    soc_max=1.0, soc_final_target=0.85),
                Bus(id="bus-1", bus_type="std", soc_initial=0.85, soc_min=0.35,
                    soc_max=1.0, soc_final_target=0.85),
            )
        )
        assert any("duplicate" in d.rule for d in validate_scenario(s))


class TestPlanBasics:
    def test_objective_recomputed_matches(self):
        s = one_bus_scenario()
        assignments = frozenset({("bus-1", "blk-1")})
        assert recompute_objective(s, assignments) == pytest.approx(20.0)

    def test_certificate_strings(self):
        assert str(Certificate("proven-optimal")) == "proven-optimal"
        assert str(Certificate("best-found-with-bound", 42.5)) == (
            "best-found-with-bound(42.5)"
        )


class TestScenarioJson:
    def test_round_trip(self):
        s = one_bus_scenario()
        doc = scenario_to_json(s)
        back = scenario_from_json(doc)
        assert back.grid == s.grid
        assert back.buses == s.buses
        assert back.bus_types == s.bus_types
        assert back.blocks == s.blocks
        assert back.chargers == s.chargers
        assert back.constraints == s.constraints

    def test_times_serialized_as_clock_strings(self):
        doc = scenario_to_json(one_bus_scenario())
        assert doc["grid"]["day_start"] == "05:00"
        assert doc["blocks"][0]["start"] == "06:00"
        assert doc["blocks"][0]["end"] == "08:00"

    def test_types_are_immutable(self):
        s = one_bus_scenario()
        with pytest.raises(dataclasses.FrozenInstanceError):
            s.buses[0].soc_initial = 0.5
