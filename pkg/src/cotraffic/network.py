"""Grid road networks, demand flows, and deterministic insertion schedules.

Networks are rows x cols signalized grids. Every edge is realized as two
opposed single-lane roads; perimeter arms end at boundary nodes. All demand
is go-straight, so each vehicle's route is the chain of same-heading roads
from a perimeter entry to the opposite perimeter exit.
"""
import hashlib
import math
import re
from dataclasses import dataclass, replace

import numpy as np

APPROACHES = ("N", "E", "S", "W")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}

DEFAULT_ROAD_LENGTH = 300.0
DEFAULT_SPEED_LIMIT = 15.0
GENERATION_WINDOW_S = 300.0


class ConfigError(ValueError):
    """Bad scenario file or invalid experiment configuration."""


@dataclass(frozen=True)
class Road:
    id: str
    from_node: str
    to_node: str
    length: float
    speed_limit: float
    # Signalized node this road feeds into (None for roads exiting the grid),
    # and the compass arm it occupies there as seen from that intersection.
    approach_intersection: str | None = None
    approach: str | None = None
    # Go-straight continuation across the approached intersection.
    straight_to: str | None = None

    def __post_init__(self):
        if self.length <= 0:
            raise ConfigError(f"road {self.id}: length must be positive")
        if self.speed_limit <= 0:
            raise ConfigError(f"road {self.id}: speed limit must be positive")


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming: tuple  # road ids in N, E, S, W arm order
    outgoing: tuple


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple
    roads: dict
    intersections: dict
    descriptor: str = ""

    def road(self, road_id):
        try:
            return self.roads[road_id]
        except KeyError:
            raise KeyError(f"unknown road {road_id!r}") from None

    @property
    def max_road_length(self):
        return max(r.length for r in self.roads.values())

    def straight_route(self, origin_road_id):
        """Road chain from an entry road to the perimeter, going straight."""
        route = [origin_road_id]
        road = self.road(origin_road_id)
        while road.straight_to is not None:
            route.append(road.straight_to)
            road = self.road(road.straight_to)
        return route

    def route_length(self, route):
        return sum(self.road(rid).length for rid in route)

    def validate(self):
        for inter in self.intersections.values():
            if not inter.incoming or not inter.outgoing:
                raise ConfigError(f"{inter.id}: empty incoming/outgoing set")
            if set(inter.incoming) & set(inter.outgoing):
                raise ConfigError(f"{inter.id}: a road is both incoming and outgoing")
            for rid in inter.incoming + inter.outgoing:
                if rid not in self.roads:
                    raise ConfigError(f"{inter.id}: unknown road {rid}")
        # connectivity over the undirected node graph
        adj = {}
        for r in self.roads.values():
            adj.setdefault(r.from_node, set()).add(r.to_node)
            adj.setdefault(r.to_node, set()).add(r.from_node)
        seen = set()
        stack = [next(iter(adj))]
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(adj[node] - seen)
        if seen != set(self.nodes):
            raise ConfigError("road graph is not connected")
        return self


def _road_id(from_node, to_node):
    return f"{from_node}:{to_node}"


def build_grid(rows, cols, road_length=DEFAULT_ROAD_LENGTH,
               speed_limit=DEFAULT_SPEED_LIMIT):
    """Build a rows x cols signalized grid of two-way single-lane roads."""
    if rows < 1 or cols < 1:
        raise ConfigError("grid dimensions must be >= 1")

    def junction(r, c):
        return f"J{r}-{c}"

    # neighbor node on each arm; boundary arms get dedicated nodes
    def arm_node(r, c, arm):
        if arm == "N":
            return junction(r - 1, c) if r > 0 else f"N{c}"
        if arm == "S":
            return junction(r + 1, c) if r < rows - 1 else f"S{c}"
        if arm == "W":
            return junction(r, c - 1) if c > 0 else f"W{r}"
        return junction(r, c + 1) if c < cols - 1 else f"E{r}"

    nodes = set()
    road_specs = {}
    intersections = {}
    for r in range(rows):
        for c in range(cols):
            j = junction(r, c)
            nodes.add(j)
            incoming, outgoing = [], []
            for arm in APPROACHES:
                other = arm_node(r, c, arm)
                nodes.add(other)
                rid_in = _road_id(other, j)
                rid_out = _road_id(j, other)
                incoming.append(rid_in)
                outgoing.append(rid_out)
                road_specs.setdefault(rid_in, (other, j, arm))
                road_specs.setdefault(rid_out, (j, other, None))
            intersections[j] = Intersection(j, tuple(incoming), tuple(outgoing))

    roads = {}
    for rid, (src, dst, arm) in road_specs.items():
        approach_inter = dst if dst in intersections else None
        # arm is known when dst is the scanning junction; recompute otherwise
        approach = arm
        straight_to = None
        if approach_inter is not None:
            if approach is None:
                inter = intersections[approach_inter]
                approach = APPROACHES[inter.incoming.index(rid)]
            exit_arm = OPPOSITE[approach]
            inter = intersections[approach_inter]
            straight_to = inter.outgoing[APPROACHES.index(exit_arm)]
        roads[rid] = Road(rid, src, dst, float(road_length), float(speed_limit),
                          approach_inter, approach, straight_to)

    net = RoadNetwork(tuple(sorted(nodes)), roads, intersections,
                      descriptor=f"grid:{rows}x{cols}")
    return net.validate()


@dataclass(frozen=True)
class FlowSpec:
    """One insertion stream: `count` vehicles from `start` every `period` s."""
    name: str
    origin: str
    destination: str
    count: int
    start: float
    period: float
    speed_mode: str = "uniform"  # "uniform" in [0, v*] or "fixed"
    fixed_speed: float = 0.0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError(f"flow {self.name}: count must be >= 0")
        if self.period <= 0:
            raise ConfigError(f"flow {self.name}: period must be positive")
        if self.speed_mode not in ("uniform", "fixed"):
            raise ConfigError(f"flow {self.name}: bad speed_mode {self.speed_mode}")


def standard_flows_1x1():
    """The four single-intersection go-straight demand streams.

    Hourly rates 288/240/192/120 over a 300 s window give 24/20/16/10
    vehicles at strictly periodic headways of 3600/rate seconds. Two streams
    start at t=1 s, the heavy north-south stream at t=45 s, and the opposing
    east-west stream one minute after that.
    """
    return [
        FlowSpec("SN", "S0:J0-0", "J0-0:N0", 10, 1.0, 30.0),
        FlowSpec("WE", "W0:J0-0", "J0-0:E0", 20, 1.0, 15.0),
        FlowSpec("NS", "N0:J0-0", "J0-0:S0", 24, 45.0, 12.5),
        FlowSpec("EW", "E0:J0-0", "J0-0:W0", 16, 105.0, 18.75),
    ]


def standard_flows_1x6():
    """Demand for the six-intersection corridor: 240 vehicles total.

    The west-east pair spans the whole corridor with the 1x1 settings; every
    column gets its own vertical pair with the same counts and timing.
    """
    flows = [
        FlowSpec("WE", "W0:J0-0", "J0-5:E0", 20, 1.0, 15.0),
        FlowSpec("EW", "E0:J0-5", "J0-0:W0", 16, 105.0, 18.75),
    ]
    for c in range(6):
        flows.append(FlowSpec(f"SN{c}", f"S{c}:J0-{c}", f"J0-{c}:N{c}",
                              10, 1.0, 30.0))
        flows.append(FlowSpec(f"NS{c}", f"N{c}:J0-{c}", f"J0-{c}:S{c}",
                              24, 45.0, 12.5))
    return flows


@dataclass(frozen=True)
class ScenarioSpec:
    network: RoadNetwork
    flows: tuple
    horizon: int
    penetration_rate: float
    seed: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if not 0.0 <= self.penetration_rate <= 1.0:
            raise ConfigError("penetration rate must lie in [0, 1]")
        for flow in self.flows:
            origin = self.network.road(flow.origin)  # raises on unknown
            route = self.network.straight_route(flow.origin)
            if route[-1] != flow.destination:
                raise ConfigError(
                    f"flow {flow.name}: straight route from {flow.origin} ends at "
                    f"{route[-1]}, not {flow.destination}")
            del origin

    @property
    def total_vehicles(self):
        return sum(f.count for f in self.flows)

    def with_overrides(self, horizon=None, penetration=None, seed=None):
        return replace(
            self,
            horizon=self.horizon if horizon is None else int(horizon),
            penetration_rate=(self.penetration_rate if penetration is None
                              else float(penetration)),
            seed=self.seed if seed is None else int(seed))


def grid_scenario(grid, horizon=720, penetration=1.0, seed=0,
                  road_length=DEFAULT_ROAD_LENGTH,
                  speed_limit=DEFAULT_SPEED_LIMIT):
    """Scenario for a named standard grid, '1x1' or '1x6'."""
    if grid == "1x1":
        net = build_grid(1, 1, road_length, speed_limit)
        flows = standard_flows_1x1()
    elif grid == "1x6":
        net = build_grid(1, 6, road_length, speed_limit)
        flows = standard_flows_1x6()
    else:
        raise ConfigError(f"unknown standard grid {grid!r} (expected 1x1 or 1x6)")
    return ScenarioSpec(net, tuple(flows), int(horizon), float(penetration),
                        int(seed))


def assign_vehicle_kinds(flows, penetration_rate, seed):
    """Kind ('HDV' or 'CAV') per vehicle, in global insertion order.

    The realized CAV count is round(rate * total), half away from zero, and
    the placement is a seeded permutation, fixed before the simulation runs.
    """
    if not 0.0 <= penetration_rate <= 1.0:
        raise ConfigError("penetration rate must lie in [0, 1]")
    total = sum(f.count for f in flows)
    n_cav = int(math.floor(penetration_rate * total + 0.5))
    kinds = np.array(["CAV"] * n_cav + ["HDV"] * (total - n_cav), dtype=object)
    rng = np.random.default_rng(seed)
    return list(rng.permutation(kinds))


@dataclass(frozen=True)
class Insertion:
    """One scheduled vehicle: everything random is drawn up front."""
    time: float
    vehicle_id: str
    kind: str
    route: tuple
    depart_speed: float


def build_insertion_schedule(scenario):
    """Full insertion schedule, a pure function of the scenario (incl. seed).

    Global order is by scheduled time with the flow-list order breaking ties;
    kinds and initial speeds are drawn in that order from one seeded stream.
    """
    net = scenario.network
    entries = []
    for fi, flow in enumerate(scenario.flows):
        route = tuple(net.straight_route(flow.origin))
        for k in range(flow.count):
            entries.append((flow.start + k * flow.period, fi, k, flow, route))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    kinds = assign_vehicle_kinds(scenario.flows, scenario.penetration_rate,
                                 scenario.seed)
    rng = np.random.default_rng(np.random.SeedSequence((scenario.seed, 1)))
    schedule = []
    for (time, fi, k, flow, route), kind in zip(entries, kinds):
        v_star = net.road(flow.origin).speed_limit
        if flow.speed_mode == "uniform":
            speed = float(rng.uniform(0.0, v_star))
        else:
            speed = min(float(flow.fixed_speed), v_star)
        schedule.append(Insertion(time, f"{flow.name}.{k}", kind, route, speed))
    return schedule


# --- scenario files ---------------------------------------------------------
#
# Line-oriented blocks:   name { key: value, key: value }
# '#' starts a comment. Known blocks: network (grid, road_length,
# speed_limit), flow (name, origin, destination, count, start, period),
# sim (horizon, penetration, seed). Unknown blocks or keys are rejected.

_BLOCK_RE = re.compile(r"(\w+)\s*\{([^}]*)\}", re.S)

_BLOCK_KEYS = {
    "network": {"grid", "road_length", "speed_limit"},
    "flow": {"name", "origin", "destination", "count", "start", "period"},
    "sim": {"horizon", "penetration", "seed"},
}


def _parse_entries(block_name, body):
    entries = {}
    for raw in re.split(r"[,\n]", body):
        item = raw.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"{block_name}: expected 'key: value', got {item!r}")
        key, value = item.split(":", 1)
        key = key.strip()
        if key not in _BLOCK_KEYS[block_name]:
            raise ConfigError(f"{block_name}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"{block_name}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def parse_scenario_text(text):
    """Parse scenario file text into a ScenarioSpec."""
    stripped = re.sub(r"#[^\n]*", "", text)
    network_entries = None
    sim_entries = {}
    flow_blocks = []
    consumed = re.sub(_BLOCK_RE, "", stripped).strip()
    if consumed:
        raise ConfigError(f"unparseable scenario content: {consumed[:40]!r}")
    for match in _BLOCK_RE.finditer(stripped):
        name, body = match.group(1), match.group(2)
        if name not in _BLOCK_KEYS:
            raise ConfigError(f"unknown block {name!r}")
        entries = _parse_entries(name, body)
        if name == "network":
            if network_entries is not None:
                raise ConfigError("duplicate network block")
            network_entries = entries
        elif name == "sim":
            sim_entries = entries
        else:
            flow_blocks.append(entries)
    if network_entries is None:
        raise ConfigError("missing network block")

    grid = network_entries.get("grid", "1x1")
    m = re.fullmatch(r"(\d+)x(\d+)", grid)
    if not m:
        raise ConfigError(f"network: bad grid {grid!r} (expected RxC)")
    rows, cols = int(m.group(1)), int(m.group(2))
    net = build_grid(rows, cols,
                     float(network_entries.get("road_length", DEFAULT_ROAD_LENGTH)),
                     float(network_entries.get("speed_limit", DEFAULT_SPEED_LIMIT)))

    flows = []
    for i, entries in enumerate(flow_blocks):
        for required in ("origin", "destination", "count", "start", "period"):
            if required not in entries:
                raise ConfigError(f"flow #{i}: missing key {required!r}")
        flows.append(FlowSpec(
            entries.get("name", f"flow{i}"), entries["origin"],
            entries["destination"], int(entries["count"]),
            float(entries["start"]), float(entries["period"])))

    return ScenarioSpec(
        net, tuple(flows),
        horizon=int(sim_entries.get("horizon", 720)),
        penetration_rate=float(sim_entries.get("penetration", 1.0)),
        seed=int(sim_entries.get("seed", 0)))


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scenario_text(fh.read())


def scenario_to_text(scenario):
    """Serialize a grid scenario back to the file format."""
    m = re.fullmatch(r"grid:(\d+)x(\d+)", scenario.network.descriptor)
    if not m:
        raise ConfigError("only grid-backed scenarios can be serialized")
    any_road = next(iter(scenario.network.roads.values()))
    lines = [
        f"network {{ grid: {m.group(1)}x{m.group(2)}, "
        f"road_length: {any_road.length:g}, speed_limit: {any_road.speed_limit:g} }}"
    ]
    for f in scenario.flows:
        lines.append(
            f"flow {{ name: {f.name}, origin: {f.origin}, destination: "
            f"{f.destination}, count: {f.count}, start: {f.start:g}, "
            f"period: {f.period:g} }}")
    lines.append(
        f"sim {{ horizon: {scenario.horizon}, "
        f"penetration: {scenario.penetration_rate:g}, seed: {scenario.seed} }}")
    return "\n".join(lines) + "\n"


def scenario_fingerprint(scenario):
    """Stable hash of the resolved scenario, for run manifests."""
    payload = scenario_to_text(scenario).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
