"""Grid construction, demand flows, schedules, and scenario files."""
import numpy as np
import pytest

from cotraffic.network import (ConfigError, build_grid, build_insertion_schedule,
                               assign_vehicle_kinds, grid_scenario,
                               parse_scenario_text, scenario_to_text,
                               standard_flows_1x1, standard_flows_1x6)

# independent oracle for the per-flow counts: hourly rate over a 300 s window
HOURLY_RATES = {"NS": 288, "WE": 240, "EW": 192, "SN": 120}


def test_grid_1x1_shape():
    net = build_grid(1, 1, 300, 15)
    assert len(net.intersections) == 1
    assert len(net.roads) == 8
    assert all(r.length == 300 and r.speed_limit == 15 for r in net.roads.values())
    inter = net.intersections["J0-0"]
    assert len(inter.incoming) == 4 and len(inter.outgoing) == 4


def test_grid_1x6_shares_interior_edges():
    net = build_grid(1, 6, 300, 15)
    assert len(net.intersections) == 6
    # the road between adjacent junctions is outgoing for one, incoming for the next
    rid = "J0-0:J0-1"
    assert rid in net.intersections["J0-0"].outgoing
    assert rid in net.intersections["J0-1"].incoming
    # 5 interior edges + 2 horizontal boundary + 12 vertical boundary, two roads each
    assert len(net.roads) == 2 * (5 + 2 + 12)


@pytest.mark.parametrize("length,limit", [(100.0, 10.0), (300.0, 15.0), (47.5, 31.0)])
def test_grid_in_out_symmetry(length, limit):
    net = build_grid(1, 1, length, limit)
    inter = net.intersections["J0-0"]
    assert len(inter.incoming) == len(inter.outgoing) == 4


def test_grid_in_out_symmetry_larger_grids():
    for rows, cols in [(2, 2), (1, 6), (3, 2)]:
        net = build_grid(rows, cols)
        for inter in net.intersections.values():
            assert len(inter.incoming) == len(inter.outgoing) == 4
            assert not set(inter.incoming) & set(inter.outgoing)


def test_grid_rejects_bad_dimensions():
    for rows, cols in [(0, 1), (1, 0), (-1, 3)]:
        with pytest.raises(ConfigError):
            build_grid(rows, cols)


def test_flows_1x1_totals_and_timing():
    flows = {f.name: f for f in standard_flows_1x1()}
    assert sum(f.count for f in flows.values()) == 70
    assert flows["NS"].start == 45.0
    assert flows["SN"].start == 1.0 and flows["WE"].start == 1.0
    assert flows["EW"].start == 105.0  # one minute after the NS start
    for name, f in flows.items():
        assert f.count == round(HOURLY_RATES[name] * 300 / 3600)
        assert f.period == pytest.approx(3600 / HOURLY_RATES[name])


def test_flows_1x6_totals():
    flows = standard_flows_1x6()
    assert sum(f.count for f in flows) == 240
    assert sum(f.count for f in flows) == 20 + 16 + 6 * (24 + 10)
    by_name = {f.name: f for f in flows}
    assert by_name["NS2"].count == 24 and by_name["NS2"].start == 45.0
    assert by_name["SN4"].count == 10


def test_all_flows_are_straight_routes():
    for grid in ("1x1", "1x6"):
        scen = grid_scenario(grid)
        for flow in scen.flows:
            route = scen.network.straight_route(flow.origin)
            assert route[-1] == flow.destination
            # straight route never revisits a road
            assert len(set(route)) == len(route)


def test_assign_kinds_extremes_and_rounding():
    flows = standard_flows_1x1()
    assert all(k == "HDV" for k in assign_vehicle_kinds(flows, 0.0, 1))
    assert all(k == "CAV" for k in assign_vehicle_kinds(flows, 1.0, 1))
    kinds = assign_vehicle_kinds(flows, 0.4, 1)
    assert sum(k == "CAV" for k in kinds) == 28


def test_assign_kinds_deterministic():
    flows = standard_flows_1x1()
    assert assign_vehicle_kinds(flows, 0.5, 9) == assign_vehicle_kinds(flows, 0.5, 9)
    assert (assign_vehicle_kinds(flows, 0.5, 9)
            != assign_vehicle_kinds(flows, 0.5, 10))


def test_schedule_pure_function_of_spec_and_seed():
    scen = grid_scenario("1x1", penetration=0.5, seed=12)
    a = build_insertion_schedule(scen)
    b = build_insertion_schedule(scen)
    assert a == b
    c = build_insertion_schedule(scen.with_overrides(seed=13))
    assert a != c


def test_schedule_times_and_speeds():
    scen = grid_scenario("1x1", penetration=0.0, seed=5)
    schedule = build_insertion_schedule(scen)
    assert len(schedule) == 70
    ns_times = [e.time for e in schedule if e.vehicle_id.startswith("NS.")]
    assert ns_times[0] == 45.0
    assert ns_times[1] == 57.5
    assert all(0.0 <= e.depart_speed <= 15.0 for e in schedule)
    assert all(e.kind == "HDV" for e in schedule)


def test_scenario_text_round_trip():
    scen = grid_scenario("1x1", horizon=500, penetration=0.3, seed=11)
    text = scenario_to_text(scen)
    parsed = parse_scenario_text(text)
    assert parsed.horizon == 500
    assert parsed.penetration_rate == 0.3
    assert parsed.seed == 11
    assert sum(f.count for f in parsed.flows) == 70
    assert scenario_to_text(parsed) == text


def test_scenario_parser_rejects_unknown_keys():
    good = scenario_to_text(grid_scenario("1x1"))
    with pytest.raises(ConfigError):
        parse_scenario_text(good + "\njunk { a: 1 }")
    with pytest.raises(ConfigError):
        parse_scenario_text(good.replace("horizon", "horizonn"))
    with pytest.raises(ConfigError):
        parse_scenario_text("network { grid: 1x1, lanes: 2 }")


def test_scenario_parser_rejects_bad_routes():
    text = """
network { grid: 1x1 }
flow { name: X, origin: N0:J0-0, destination: J0-0:E0, count: 5, start: 1, period: 10 }
sim { horizon: 100, penetration: 0, seed: 1 }
"""
    with pytest.raises(ConfigError):
        parse_scenario_text(text)


def test_scenario_comments_and_defaults():
    parsed = parse_scenario_text("""
# a comment
network { grid: 1x1, road_length: 200, speed_limit: 10 }
flow { name: A, origin: W0:J0-0, destination: J0-0:E0, count: 3, start: 2, period: 8 }
""")
    assert parsed.horizon == 720
    assert parsed.network.roads["W0:J0-0"].length == 200
    assert parsed.flows[0].count == 3


def test_scenario_invariants_rejected():
    with pytest.raises(ConfigError):
        grid_scenario("1x1", horizon=0)
    with pytest.raises(ConfigError):
        grid_scenario("1x1", penetration=1.5)
    with pytest.raises(ConfigError):
        grid_scenario("2x2")  # only the two named grids have canned demand
