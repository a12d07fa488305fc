"""Discrete-time (1 s) microscopic traffic dynamics.

Uncontrolled vehicles follow the intelligent-driver car-following law, with
red/yellow signals folded in as standing virtual leaders at the stop line.
Controlled vehicles apply an externally commanded acceleration. Kinematics
are semi-implicit Euler with the speed clamped to [0, road limit] before the
position update. Collisions (bumper gap <= 0) remove both vehicles so the
vehicle count stays conserved; rear-end conflicts with time-to-collision
under 3 s are counted as safety events. Fuel and CO2 use a tractive-power
surrogate, accumulated per vehicle per second.

A SimState is single-writer: all mutation flows through `step`. Independent
states can run in parallel processes without shared mutable data.
"""
import bisect
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .network import build_insertion_schedule

DT = 1.0
YELLOW_DURATION = 3
MIN_GREEN = 5
VEHICLE_LENGTH = 5.0
MIN_GAP = 2.5
TTC_THRESHOLD = 3.0
# Virtual stop-line leaders never report a gap below this, so a vehicle held
# exactly at the line still gets a finite braking demand.
STOPLINE_GAP_FLOOR = 0.1
INSERTION_FREE_ZONE = 10.0


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 1.0
    b_comfort: float = 1.5
    delta: float = 4.0
    headway: float = 1.0
    s0: float = 2.0

    def __post_init__(self):
        for name in ("a_max", "b_comfort", "delta", "headway", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be positive")


@dataclass
class Vehicle:
    id: str
    kind: str                  # "HDV" | "CAV"
    road: str
    position: float            # front bumper, meters from road start
    speed: float
    route: tuple
    route_index: int = 0
    accel: float = 0.0         # last realized acceleration
    controlled: bool = False
    length: float = VEHICLE_LENGTH
    min_gap: float = MIN_GAP
    depart_time: int = 0
    fuel_l: float = 0.0
    co2_g: float = 0.0
    distance_m: float = 0.0


@dataclass(frozen=True)
class Phase:
    kind: str        # "green" | "yellow"
    served: frozenset  # approach arms ("N","S",...) allowed to move


@dataclass
class TrafficLight:
    intersection: str
    phases: list
    phase_index: int = 0
    time_in_phase: int = 0
    min_green: int = MIN_GREEN

    @property
    def phase(self):
        return self.phases[self.phase_index]

    def serves(self, approach):
        return approach in self.phase.served

    def signal_for(self, approach):
        """1.0 green, 0.5 yellow, 0.0 red for the given approach arm."""
        if not self.serves(approach):
            return 0.0
        return 1.0 if self.phase.kind == "green" else 0.5


def make_light(intersection_id, min_green=MIN_GREEN):
    """Standard two-green cycle: Green-NS, Yellow-NS, Green-WE, Yellow-WE."""
    ns = frozenset(("N", "S"))
    we = frozenset(("E", "W"))
    return TrafficLight(intersection_id, [
        Phase("green", ns), Phase("yellow", ns),
        Phase("green", we), Phase("yellow", we),
    ], min_green=min_green)


@dataclass(frozen=True)
class CollisionEvent:
    time: int
    road: str
    follower: str
    leader: str


@dataclass(frozen=True)
class TripRecord:
    vehicle_id: str
    kind: str
    depart: int
    arrival: int
    route_length: float
    ideal_time: float
    fuel_l: float
    co2_g: float
    distance_m: float

    @property
    def travel_time(self):
        return self.arrival - self.depart


@dataclass
class SimState:
    network: object
    idm: IdmParams
    clock: int = 0
    vehicles: dict = field(default_factory=dict)
    road_order: dict = field(default_factory=dict)  # road -> ids by position asc
    lights: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)     # insertions not yet placed
    completed: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    inserted_count: int = 0
    collided_count: int = 0
    ttc_event_count: int = 0

    def active_count(self):
        return len(self.vehicles)

    def conservation_ok(self):
        return self.inserted_count == (len(self.vehicles) + len(self.completed)
                                       + self.collided_count)

    def vehicles_on(self, road_id):
        return self.road_order.get(road_id, [])

    def leader_of(self, vehicle_id):
        """(leader vehicle, bumper gap) or None for the road-front vehicle."""
        veh = self.vehicles[vehicle_id]
        order = self.road_order[veh.road]
        idx = order.index(vehicle_id)
        if idx + 1 >= len(order):
            return None
        lead = self.vehicles[order[idx + 1]]
        return lead, lead.position - lead.length - veh.position


def build_sim(scenario, idm=None, min_green=MIN_GREEN):
    sim = SimState(network=scenario.network, idm=idm or IdmParams())
    for road_id in scenario.network.roads:
        sim.road_order[road_id] = []
    for inter_id in scenario.network.intersections:
        sim.lights[inter_id] = make_light(inter_id, min_green=min_green)
    sim.pending = list(build_insertion_schedule(scenario))
    return sim


def idm_accel(v, v_leader, gap, v_limit, p=None):
    """Car-following acceleration for one vehicle.

    Leaderless calls pass v_leader=None and gap=None and keep only the
    free-road term. Output is clamped to [-4.5, a_max].
    """
    p = p or IdmParams()
    if v < 0:
        raise ValueError("speed must be non-negative")
    has_lead = v_leader is not None
    if has_lead and (gap is None or gap <= 0):
        raise ValueError("gap must be positive when a leader is present")
    out = kernels.vehicle_accels(
        np.array([float(v)]), np.array([float(v_leader) if has_lead else 0.0]),
        np.array([float(gap) if has_lead else 1.0]),
        np.array([has_lead]), np.array([float(v_limit)]),
        np.array([False]), np.array([0.0]),
        p.a_max, p.b_comfort, p.delta, p.headway, p.s0)
    return float(out[0])


def red_light_virtual_leader(vehicle, light, road, b_comfort=1.5):
    """Standing virtual leader at the stop line, or None if free to proceed.

    Green for the vehicle's approach: None. Yellow: stop unless the braking
    needed to reach the line exceeds the comfortable rate (the committed
    vehicle proceeds). Red: always stop.
    """
    approach = road.approach
    if approach is None:
        return None
    if light.serves(approach):
        if light.phase.kind == "green":
            return None
        dist = road.length - vehicle.position
        if dist <= 0:
            return None
        needed = vehicle.speed ** 2 / (2.0 * dist)
        if needed > b_comfort:
            return None
        return 0.0, max(dist, STOPLINE_GAP_FLOOR)
    dist = road.length - vehicle.position
    return 0.0, max(dist, STOPLINE_GAP_FLOOR)


def apply_tl_action(light, action):
    """Advance the phase machine one decision.

    time_in_phase counts fully displayed seconds and is advanced by the step
    loop after the movement update, so thresholds read literally: a yellow
    showing 3 s auto-advances, a green showing at least min_green may switch.
    """
    if action not in (0, 1):
        raise ValueError(f"traffic light action must be 0 or 1, got {action!r}")
    phase = light.phase
    if phase.kind == "yellow":
        if light.time_in_phase >= YELLOW_DURATION:
            light.phase_index = (light.phase_index + 1) % len(light.phases)
            light.time_in_phase = 0
    elif action == 1 and light.time_in_phase >= light.min_green:
        light.phase_index = (light.phase_index + 1) % len(light.phases)
        light.time_in_phase = 0
    return light


def _cross_boundary_leader(sim, vehicle, road):
    """(speed, gap) of the rearmost vehicle on the route's next road."""
    if vehicle.route_index + 1 >= len(vehicle.route):
        return None
    next_order = sim.road_order[vehicle.route[vehicle.route_index + 1]]
    if not next_order:
        return None
    lead = sim.vehicles[next_order[0]]
    gap = (road.length - vehicle.position) + lead.position - lead.length
    return lead.speed, max(gap, 1e-9)


def _safe_insertion_speed(drawn, road_front, p):
    """Cap the scheduled entry speed so a stop behind the current tail is
    possible at comfortable braking (the schedule's draw is kept otherwise)."""
    if road_front is None:
        return drawn
    tail_veh, gap = road_front
    if gap <= p.s0:
        return 0.0
    v_safe = np.sqrt(tail_veh.speed ** 2 + 2.0 * p.b_comfort * (gap - p.s0))
    return min(drawn, float(v_safe))


def _attempt_insertions(sim, now):
    """Place due scheduled vehicles; origins with a busy entry zone retry."""
    still_pending = []
    for ins in sim.pending:
        if ins.time > now:
            still_pending.append(ins)
            continue
        origin = ins.route[0]
        order = sim.road_order[origin]
        blocked = any(
            sim.vehicles[vid].position - sim.vehicles[vid].length < INSERTION_FREE_ZONE
            for vid in order)
        if blocked:
            still_pending.append(ins)
            continue
        front = None
        if order:
            tail = sim.vehicles[order[0]]
            front = (tail, tail.position - tail.length - 0.0)
        speed = _safe_insertion_speed(ins.depart_speed, front, sim.idm)
        veh = Vehicle(ins.vehicle_id, ins.kind, origin, 0.0, speed,
                      ins.route, depart_time=now)
        sim.vehicles[veh.id] = veh
        order.insert(0, veh.id)
        sim.inserted_count += 1
    sim.pending = still_pending


def _gap_arrays(sim):
    """Flatten actives road by road; leaders are the next index in-road."""
    ids, pos, speed, length = [], [], [], []
    lead_speed, gap, has_lead = [], [], []
    for road_id in sim.network.roads:
        order = sim.road_order[road_id]
        if not order:
            continue
        n0 = len(ids)
        for vid in order:
            v = sim.vehicles[vid]
            ids.append(vid)
            pos.append(v.position)
            speed.append(v.speed)
            length.append(v.length)
        for i in range(len(order)):
            if i + 1 < len(order):
                lead = sim.vehicles[order[i + 1]]
                lead_speed.append(lead.speed)
                gap.append(lead.position - lead.length - pos[n0 + i])
                has_lead.append(True)
            else:
                lead_speed.append(0.0)
                gap.append(0.0)
                has_lead.append(False)
    return (ids, np.array(pos), np.array(speed), np.array(length),
            np.array(lead_speed), np.array(gap),
            np.array(has_lead, dtype=bool))


def detect_collisions(sim):
    """Remove every same-road adjacent pair with bumper gap <= 0.

    A shared vehicle in a pile-up appears in two events but is removed once;
    the removal count keeps the conservation identity exact.
    """
    ids, _pos, _speed, _length, _ls, gap, has_lead = _gap_arrays(sim)
    if not ids:
        return []
    hit = kernels.collision_followers(gap, has_lead)
    events = []
    to_remove = set()
    for i in np.nonzero(hit)[0]:
        follower = ids[int(i)]
        veh = sim.vehicles[follower]
        order = sim.road_order[veh.road]
        leader = order[order.index(follower) + 1]
        events.append(CollisionEvent(sim.clock, veh.road, follower, leader))
        to_remove.update((follower, leader))
    for vid in to_remove:
        veh = sim.vehicles.pop(vid)
        sim.road_order[veh.road].remove(vid)
    sim.collisions.extend(events)
    sim.collided_count += len(to_remove)
    return events


def count_ttc_events(sim, threshold=TTC_THRESHOLD):
    """Count closing adjacent pairs with time-to-collision under threshold
    this instant, and add them to the cumulative counter."""
    if threshold <= 0:
        raise ValueError("TTC threshold must be positive")
    ids, _pos, speed, _length, lead_speed, gap, has_lead = _gap_arrays(sim)
    if not ids:
        return 0
    events = int(kernels.ttc_events(gap, speed, lead_speed, has_lead,
                                    float(threshold)))
    sim.ttc_event_count += events
    return events


def fuel_rate(v, a):
    """Fuel burn in l/s from the tractive-power surrogate."""
    fuel, _ = kernels.fuel_co2(np.array([float(v)]), np.array([float(a)]))
    return float(fuel[0])


def co2_rate(v, a):
    """CO2 in g/s, proportional to fuel burn."""
    _, co2 = kernels.fuel_co2(np.array([float(v)]), np.array([float(a)]))
    return float(co2[0])


class TraceWriter:
    """Line-oriented per-step trace: t vehicle road position speed accel."""

    def __init__(self, fh):
        self.fh = fh

    def record(self, sim):
        for road_id in sim.network.roads:
            for vid in sim.road_order[road_id]:
                v = sim.vehicles[vid]
                self.fh.write(f"{sim.clock} {vid} {road_id} "
                              f"{v.position:.3f} {v.speed:.3f} {v.accel:.3f}\n")


def step(sim, tl_actions=None, cav_accels=None, trace=None):
    """Advance the world by one second.

    Order: signal transitions, accelerations (commanded or car-following
    with stop-line virtual leaders), kinematics, road transfers and stop-line
    holds, arrivals, insertions, collision and conflict scans, energy
    accounting, clock and phase timers.
    """
    tl_actions = tl_actions or {}
    cav_accels = cav_accels or {}
    for light_id in tl_actions:
        if light_id not in sim.lights:
            raise KeyError(f"unknown traffic light {light_id!r}")
    for vid in cav_accels:
        if vid not in sim.vehicles:
            raise KeyError(f"unknown vehicle {vid!r} in command map")

    now = sim.clock + 1

    for light_id, light in sim.lights.items():
        apply_tl_action(light, tl_actions.get(light_id, 0))

    # acceleration inputs; the front vehicle of a signalized road may face a
    # standing virtual leader at the stop line
    ids = []
    speed, v_limit, lead_speed, gap, has_lead = [], [], [], [], []
    is_cmd, cmd = [], []
    roads_of = []
    for road_id in sim.network.roads:
        order = sim.road_order[road_id]
        if not order:
            continue
        road = sim.network.roads[road_id]
        light = (sim.lights.get(road.approach_intersection)
                 if road.approach_intersection else None)
        for i, vid in enumerate(order):
            veh = sim.vehicles[vid]
            commanded = vid in cav_accels
            veh.controlled = commanded
            ids.append(vid)
            roads_of.append(road)
            speed.append(veh.speed)
            v_limit.append(road.speed_limit)
            is_cmd.append(commanded)
            cmd.append(cav_accels.get(vid, 0.0))
            if i + 1 < len(order):
                lead = sim.vehicles[order[i + 1]]
                lead_speed.append(lead.speed)
                gap.append(max(lead.position - lead.length - veh.position, 1e-9))
                has_lead.append(True)
            else:
                virtual = (red_light_virtual_leader(veh, light, road,
                                                    sim.idm.b_comfort)
                           if light else None)
                if virtual is None and light is not None:
                    # free to cross: follow the tail of the continuation road
                    # so a discharging queue stays a platoon over the boundary
                    virtual = _cross_boundary_leader(sim, veh, road)
                if virtual is not None:
                    lead_speed.append(virtual[0])
                    gap.append(virtual[1])
                    has_lead.append(True)
                else:
                    lead_speed.append(0.0)
                    gap.append(0.0)
                    has_lead.append(False)

    if ids:
        p = sim.idm
        accel = kernels.vehicle_accels(
            np.array(speed), np.array(lead_speed), np.array(gap),
            np.array(has_lead, dtype=bool), np.array(v_limit),
            np.array(is_cmd, dtype=bool), np.array(cmd),
            p.a_max, p.b_comfort, p.delta, p.headway, p.s0)
        new_speed, dx, eff_accel = kernels.kinematics(
            np.array(speed), accel, np.array(v_limit), DT)

        # pass 1: move everyone in place; transfers are queued so that they
        # are position-inserted against settled (post-move) occupants only
        arrivals = []
        transfers = []
        for i, vid in enumerate(ids):
            veh = sim.vehicles[vid]
            road = roads_of[i]
            x_new = veh.position + dx[i]
            moved = dx[i]
            if x_new >= road.length:
                last = veh.route_index + 1 >= len(veh.route)
                served = (road.approach is None
                          or sim.lights[road.approach_intersection].serves(road.approach))
                if last:
                    moved = road.length - veh.position
                    veh.position = road.length
                    veh.speed = float(new_speed[i])
                    veh.accel = float(eff_accel[i])
                    arrivals.append((vid, float(moved), i))
                    continue
                if served:
                    sim.road_order[road.id].remove(vid)
                    veh.route_index += 1
                    veh.road = veh.route[veh.route_index]
                    veh.position = x_new - road.length
                    transfers.append(vid)
                else:
                    # not allowed to cross: pinned at the stop line
                    moved = road.length - veh.position
                    veh.position = road.length
                    new_speed[i] = 0.0
                    eff_accel[i] = max(-veh.speed, -kernels.EMERGENCY_DECEL)
            else:
                veh.position = x_new
            veh.speed = float(new_speed[i])
            veh.accel = float(eff_accel[i])
            veh.distance_m += float(moved)

        for vid in transfers:
            veh = sim.vehicles[vid]
            dest = sim.road_order[veh.road]
            keys = [sim.vehicles[o].position for o in dest]
            dest.insert(bisect.bisect_left(keys, veh.position), vid)

        fuel, co2 = kernels.fuel_co2(new_speed, eff_accel)
        for i, vid in enumerate(ids):
            veh = sim.vehicles.get(vid)
            if veh is None:
                continue
            veh.fuel_l += float(fuel[i]) * DT
            veh.co2_g += float(co2[i]) * DT

        net = sim.network
        for vid, moved, i in arrivals:
            veh = sim.vehicles.pop(vid)
            sim.road_order[veh.road].remove(vid)
            veh.distance_m += moved
            route_len = net.route_length(veh.route)
            ideal = sum(net.roads[r].length / net.roads[r].speed_limit
                        for r in veh.route)
            sim.completed.append(TripRecord(
                vid, veh.kind, veh.depart_time, now, route_len, ideal,
                veh.fuel_l, veh.co2_g, veh.distance_m))

    _attempt_insertions(sim, now)
    sim.clock = now
    detect_collisions(sim)
    count_ttc_events(sim)

    for light in sim.lights.values():
        light.time_in_phase += 1

    if trace is not None:
        trace.record(sim)
    return sim
