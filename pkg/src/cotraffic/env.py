"""Multi-agent layer over the micro-simulator.

Builds the per-agent observation vectors that stand in for the V2X state
exchange, routes sampled actions into the simulator, and scores both agent
types: signal agents by normalized intersection pressure, vehicle agents by
the speed deficit and positive-acceleration norm of their road's traffic.

Cooperation modes:
  COTV       state exchange, closest connected vehicle per incoming road
  COTV_STAR  state exchange, every connected vehicle on the incoming roads
  I_COTV     no exchanged state (vehicle blocks zeroed, signal entry zeroed)
  M_COTV     COTV plus the other agent type's previous action as state
"""
import enum
import math
from dataclasses import dataclass

import numpy as np

from .simulation import MIN_GAP, VEHICLE_LENGTH, build_sim, step

ACCEL_NORM = 3.0       # commanded-acceleration scale used for normalization
DEFAULT_A_STAR = 9.0   # acceleration normalizer in the vehicle reward
COLLISION_REWARD = -2.0  # terminal reward when an acting vehicle is removed


class CooperationMode(enum.Enum):
    COTV = "cotv"
    COTV_STAR = "cotv-star"
    I_COTV = "i-cotv"
    M_COTV = "m-cotv"


@dataclass(frozen=True)
class EnvConfig:
    mode: CooperationMode = CooperationMode.COTV
    tl_agents: bool = True
    cav_agents: bool = True
    a_star: float = DEFAULT_A_STAR


def max_road_capacity(network, vehicle_length=VEHICLE_LENGTH, min_gap=MIN_GAP):
    """Vehicles that fit on the longest road at minimum spacing."""
    c = int(math.floor(network.max_road_length / (vehicle_length + min_gap)))
    if c < 1:
        raise ValueError("road too short to hold a single vehicle")
    return c


def _closest_per_road(sim, road_id):
    """Active CAVs on the road ordered closest-to-intersection first."""
    order = sim.road_order.get(road_id, [])
    return [vid for vid in reversed(order) if sim.vehicles[vid].kind == "CAV"]


def select_cav_agents(sim, mode):
    """Vehicle agents for this step, in deterministic road-scan order.

    Per signalized intersection and incoming road: the closest CAV, or every
    CAV in the COTV_STAR mode. A road feeds one intersection, so no vehicle
    repeats.
    """
    selected = []
    for inter in sim.network.intersections.values():
        for road_id in inter.incoming:
            cavs = _closest_per_road(sim, road_id)
            if not cavs:
                continue
            if mode is CooperationMode.COTV_STAR:
                selected.extend(cavs)
            else:
                selected.append(cavs[0])
    return selected


def tl_obs_dim(network, mode):
    dims = set()
    for inter in network.intersections.values():
        n_in, n_out = len(inter.incoming), len(inter.outgoing)
        d = 1 + n_in + n_out + n_in * (3 + n_in)
        if mode is CooperationMode.M_COTV:
            d += n_in
        dims.add(d)
    if len(dims) != 1:
        raise ValueError("intersections disagree on observation size")
    return dims.pop()


def cav_obs_dim(mode):
    return 8 if mode is CooperationMode.M_COTV else 7


def tl_observation(sim, light, mode, c=None, prev_commands=None):
    """Signal-agent state vector.

    Layout: [phase/nphases] then one vehicle-count slot per incoming and per
    outgoing road (normalized by the road capacity c), then one block per
    incoming road for its closest vehicle: [speed/v*, accel/3, distance/len,
    road-slot one-hot]. Empty road sentinel: [0, 0, 1, one-hot]. I_COTV zeroes
    the vehicle blocks; M_COTV appends the previous commanded acceleration
    (over 3) of the acting vehicle on each incoming road, sentinel 0.
    """
    c = c if c is not None else max_road_capacity(sim.network)
    inter = sim.network.intersections[light.intersection]
    n_in = len(inter.incoming)
    obs = [light.phase_index / len(light.phases)]
    for rid in inter.incoming:
        obs.append(len(sim.road_order.get(rid, [])) / c)
    for rid in inter.outgoing:
        obs.append(len(sim.road_order.get(rid, [])) / c)
    for slot, rid in enumerate(inter.incoming):
        one_hot = [0.0] * n_in
        one_hot[slot] = 1.0
        if mode is CooperationMode.I_COTV:
            obs.extend([0.0, 0.0, 0.0] + [0.0] * n_in)
            continue
        road = sim.network.roads[rid]
        order = sim.road_order.get(rid, [])
        if order:
            veh = sim.vehicles[order[-1]]  # highest position = closest
            obs.extend([veh.speed / road.speed_limit,
                        veh.accel / ACCEL_NORM,
                        (road.length - veh.position) / road.length])
        else:
            obs.extend([0.0, 0.0, 1.0])
        obs.extend(one_hot)
    if mode is CooperationMode.M_COTV:
        prev_commands = prev_commands or {}
        for rid in inter.incoming:
            obs.append(prev_commands.get(rid, 0.0) / ACCEL_NORM)
    return np.asarray(obs, dtype=np.float64)


def cav_observation(sim, vehicle_id, mode, prev_tl_action=None):
    """Vehicle-agent state vector.

    Layout: [own speed/v*, own accel/3, leader speed/v*, leader accel/3,
    gap/road length (1 when no leader), distance-to-intersection/road length,
    signal for own approach in {1 green, 0.5 yellow, 0 red}]. I_COTV pins the
    signal entry at 0; M_COTV appends the light's previous action bit.
    """
    veh = sim.vehicles[vehicle_id]
    road = sim.network.roads[veh.road]
    v_star = road.speed_limit
    lead = sim.leader_of(vehicle_id)
    if lead is not None:
        lead_veh, gap = lead
        lead_block = [lead_veh.speed / v_star, lead_veh.accel / ACCEL_NORM,
                      max(gap, 0.0) / road.length]
    else:
        lead_block = [0.0, 0.0, 1.0]
    dist = (road.length - veh.position) / road.length
    if mode is CooperationMode.I_COTV or road.approach_intersection is None:
        signal = 0.0
    else:
        light = sim.lights[road.approach_intersection]
        signal = light.signal_for(road.approach)
    obs = [veh.speed / v_star, veh.accel / ACCEL_NORM] + lead_block + [dist, signal]
    if mode is CooperationMode.M_COTV:
        obs.append(float(prev_tl_action or 0))
    return np.asarray(obs, dtype=np.float64)


def tl_reward(sim, light, c=None):
    """Negative intersection pressure over the road capacity."""
    c = c if c is not None else max_road_capacity(sim.network)
    inter = sim.network.intersections[light.intersection]
    n_in = sum(len(sim.road_order.get(r, [])) for r in inter.incoming)
    n_out = sum(len(sim.road_order.get(r, [])) for r in inter.outgoing)
    return -(n_in - n_out) / c


def cav_reward(sim, vehicle_id, a_star=DEFAULT_A_STAR):
    """Speed-deficit plus positive-acceleration penalty over the agent's road.

    Both terms cover every vehicle K on the road: the mean deficit of speed
    from the limit (speeds capped at the limit), and the root of the summed
    squared positive accelerations (each over a_star) divided by |K| squared.
    Both terms live in [-1, 0]; negative accelerations are clipped to zero.
    """
    veh = sim.vehicles[vehicle_id]
    road = sim.network.roads[veh.road]
    members = sim.road_order[veh.road]
    if not members:
        raise ValueError("reward undefined for an empty road")
    v_star = road.speed_limit
    k = len(members)
    deficit = 0.0
    accel_sq = 0.0
    for vid in members:
        other = sim.vehicles[vid]
        deficit += (v_star - min(other.speed, v_star)) / v_star
        a_pos = max(other.accel, 0.0)
        accel_sq += (a_pos / a_star) ** 2
    r1 = -deficit / k
    r2 = -math.sqrt(accel_sq / (k * k))
    return r1 + r2


@dataclass
class AgentStep:
    agent_id: str
    agent_type: str        # "TL" | "CAV"
    obs: np.ndarray
    action: float
    log_prob: float
    value: float
    reward: float = 0.0
    done: bool = False
    t: int = 0


class TrafficEnv:
    """Owns one SimState and the per-step agent bookkeeping.

    `step` builds observations for all signal agents and the selected vehicle
    agents, asks the policies for actions, advances the simulator, scores the
    post-transition state, and returns one AgentStep per acting agent. A
    vehicle agent leaving the selected set (crossed the line, displaced,
    removed, or arrived) has done=True on its final record; signal agents are
    closed by the rollout loop at the horizon.
    """

    def __init__(self, scenario, cfg=None):
        self.scenario = scenario
        self.cfg = cfg or EnvConfig()
        self.c = max_road_capacity(scenario.network)
        self.sim = None
        self._prev_tl_action = {}
        self._prev_cmd_by_road = {}

    def reset(self):
        self.sim = build_sim(self.scenario)
        self._prev_tl_action = {lid: 0 for lid in self.sim.lights}
        self._prev_cmd_by_road = {}
        return self.sim

    def tl_ids(self):
        return list(self.sim.lights)

    def step(self, tl_policy=None, cav_policy=None, rng=None, sample=True,
             tl_override=None, trace=None):
        sim = self.sim
        cfg = self.cfg
        records = []

        tl_actions = {}
        if cfg.tl_agents and tl_policy is not None:
            for lid in sim.lights:
                obs = tl_observation(sim, sim.lights[lid], cfg.mode, self.c,
                                     self._prev_cmd_by_road)
                action, logp, value = tl_policy.act(obs, rng, sample)
                tl_actions[lid] = int(action)
                records.append(AgentStep(lid, "TL", obs, float(action),
                                         logp, value, t=sim.clock))
        elif tl_override is not None:
            tl_actions = tl_override(sim)

        cav_actions = {}
        cav_records = {}
        cmd_road = {}
        if cfg.cav_agents and cav_policy is not None:
            for vid in select_cav_agents(sim, cfg.mode):
                road = sim.vehicles[vid].road
                inter = sim.network.roads[road].approach_intersection
                obs = cav_observation(sim, vid, cfg.mode,
                                      self._prev_tl_action.get(inter, 0))
                action, logp, value = cav_policy.act(obs, rng, sample)
                cav_actions[vid] = float(action)
                cmd_road[vid] = road
                rec = AgentStep(vid, "CAV", obs, float(action), logp, value,
                                t=sim.clock)
                records.append(rec)
                cav_records[vid] = rec

        completed_before = len(sim.completed)
        step(sim, tl_actions, cav_actions, trace=trace)

        for rec in records:
            if rec.agent_type == "TL":
                rec.reward = tl_reward(sim, sim.lights[rec.agent_id], self.c)
        if cav_records:
            arrived = {t.vehicle_id for t in sim.completed[completed_before:]}
            still_selected = set(select_cav_agents(sim, cfg.mode))
            for vid, rec in cav_records.items():
                if vid not in sim.vehicles:
                    # arrived agents exit cleanly; removed ones were collided
                    rec.reward = 0.0 if vid in arrived else COLLISION_REWARD
                    rec.done = True
                    continue
                rec.reward = cav_reward(sim, vid, cfg.a_star)
                rec.done = vid not in still_selected

        self._prev_tl_action = {lid: tl_actions.get(lid, 0) for lid in sim.lights}
        self._prev_cmd_by_road = {cmd_road[vid]: cmd
                                  for vid, cmd in cav_actions.items()}
        return records


def env_step(env, tl_policy, cav_policy, rng=None, sample=True):
    """One environment transition; returns (sim, agent records)."""
    records = env.step(tl_policy, cav_policy, rng=rng, sample=sample)
    return env.sim, records
