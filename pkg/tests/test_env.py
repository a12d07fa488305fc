"""Agent selection, observation layouts, rewards, and the env transition."""
import math

import numpy as np
import pytest

from cotraffic.env import (CooperationMode, EnvConfig, TrafficEnv,
                           cav_obs_dim, cav_observation, max_road_capacity,
                           select_cav_agents, tl_obs_dim, tl_observation,
                           tl_reward, cav_reward)
from cotraffic.network import build_grid, grid_scenario
from cotraffic.policy import Policy, init_params
from cotraffic.simulation import build_sim

from test_simulation import empty_sim, put_vehicle

COTV = CooperationMode.COTV
STAR = CooperationMode.COTV_STAR
ICOTV = CooperationMode.I_COTV
MCOTV = CooperationMode.M_COTV


def test_capacity_constant():
    assert max_road_capacity(build_grid(1, 1, 300, 15)) == 40
    assert max_road_capacity(build_grid(1, 6, 300, 15)) == 40
    assert max_road_capacity(build_grid(1, 1, 299.9, 15)) == 39


# --- agent selection ---------------------------------------------------------

def selection_fixture():
    sim = empty_sim()
    put_vehicle(sim, "far", "N0:J0-0", 50.0, 5.0, kind="CAV")     # 250 m out
    put_vehicle(sim, "mid", "N0:J0-0", 150.0, 5.0, kind="CAV")    # 150 m out
    put_vehicle(sim, "near", "N0:J0-0", 250.0, 5.0, kind="CAV")   # 50 m out
    return sim


def test_select_closest_only():
    assert select_cav_agents(selection_fixture(), COTV) == ["near"]


def test_select_star_takes_all():
    assert select_cav_agents(selection_fixture(), STAR) == ["near", "mid", "far"]


def test_select_skips_hdv_only_roads():
    sim = empty_sim()
    put_vehicle(sim, "h1", "N0:J0-0", 250.0, 5.0, kind="HDV")
    put_vehicle(sim, "c1", "W0:J0-0", 100.0, 5.0, kind="CAV")
    assert select_cav_agents(sim, COTV) == ["c1"]


def test_hdv_closer_than_cav_does_not_block_selection():
    sim = empty_sim()
    put_vehicle(sim, "h", "N0:J0-0", 280.0, 5.0, kind="HDV")
    put_vehicle(sim, "c", "N0:J0-0", 100.0, 5.0, kind="CAV")
    assert select_cav_agents(sim, COTV) == ["c"]


# --- observations ------------------------------------------------------------

def test_tl_observation_empty_intersection():
    sim = empty_sim()
    obs = tl_observation(sim, sim.lights["J0-0"], COTV)
    assert obs.shape == (tl_obs_dim(sim.network, COTV),)
    assert obs.shape == (1 + 4 + 4 + 4 * 7,)
    assert obs[0] == 0.0
    assert np.all(obs[1:9] == 0.0)
    blocks = obs[9:].reshape(4, 7)
    for slot, block in enumerate(blocks):
        assert block[0] == 0.0 and block[1] == 0.0 and block[2] == 1.0
        one_hot = block[3:]
        assert one_hot[slot] == 1.0 and one_hot.sum() == 1.0


def test_tl_observation_counts_normalized():
    sim = empty_sim()
    for k in range(10):
        put_vehicle(sim, f"v{k}", "N0:J0-0", 10.0 + 20 * k, 3.0)
    obs = tl_observation(sim, sim.lights["J0-0"], COTV)
    inter = sim.network.intersections["J0-0"]
    slot = inter.incoming.index("N0:J0-0")
    assert obs[1 + slot] == pytest.approx(10 / 40)


def test_tl_observation_closest_vehicle_block():
    sim = empty_sim()
    put_vehicle(sim, "back", "N0:J0-0", 100.0, 6.0)
    near = put_vehicle(sim, "front", "N0:J0-0", 270.0, 12.0)
    near.accel = -1.5
    obs = tl_observation(sim, sim.lights["J0-0"], COTV)
    inter = sim.network.intersections["J0-0"]
    slot = inter.incoming.index("N0:J0-0")
    block = obs[9 + 7 * slot: 9 + 7 * (slot + 1)]
    assert block[0] == pytest.approx(12.0 / 15.0)
    assert block[1] == pytest.approx(-0.5)
    assert block[2] == pytest.approx(30.0 / 300.0)


def test_icotv_zeroes_vehicle_blocks_but_not_counts():
    sim = empty_sim()
    put_vehicle(sim, "v", "N0:J0-0", 270.0, 12.0)
    obs = tl_observation(sim, sim.lights["J0-0"], ICOTV)
    assert np.all(obs[9:] == 0.0)
    assert obs[1:9].sum() > 0.0


def test_icotv_mode_ablation_property():
    """Perturbing only instantaneous vehicle state leaves I-CoTV unchanged."""
    rng = np.random.default_rng(8)
    for _ in range(20):
        sim = empty_sim()
        for k in range(6):
            put_vehicle(sim, f"v{k}", "N0:J0-0", 20.0 + 40 * k,
                        float(rng.uniform(0, 15)))
        before_i = tl_observation(sim, sim.lights["J0-0"], ICOTV)
        before_c = tl_observation(sim, sim.lights["J0-0"], COTV)
        for veh in sim.vehicles.values():
            veh.speed = float(rng.uniform(0, 15))
            veh.accel = float(rng.uniform(-3, 3))
        after_i = tl_observation(sim, sim.lights["J0-0"], ICOTV)
        after_c = tl_observation(sim, sim.lights["J0-0"], COTV)
        np.testing.assert_array_equal(before_i, after_i)
        assert not np.array_equal(before_c, after_c)


def test_mcotv_extends_with_previous_commands():
    sim = empty_sim()
    assert tl_obs_dim(sim.network, MCOTV) == tl_obs_dim(sim.network, COTV) + 4
    obs = tl_observation(sim, sim.lights["J0-0"], MCOTV,
                         prev_commands={"N0:J0-0": 1.5})
    inter = sim.network.intersections["J0-0"]
    slot = inter.incoming.index("N0:J0-0")
    tail = obs[-4:]
    assert tail[slot] == pytest.approx(0.5)
    assert tail.sum() == pytest.approx(0.5)


def test_cav_observation_sentinels_and_signal():
    sim = empty_sim()
    put_vehicle(sim, "solo", "N0:J0-0", 150.0, 9.0, kind="CAV")
    obs = cav_observation(sim, "solo", COTV)
    assert obs.shape == (7,)
    assert obs[0] == pytest.approx(0.6)
    assert obs[2] == 0.0 and obs[3] == 0.0 and obs[4] == 1.0  # leader sentinels
    assert obs[5] == pytest.approx(0.5)
    assert obs[6] == 1.0  # green NS

    sim.lights["J0-0"].phase_index = 1
    assert cav_observation(sim, "solo", COTV)[6] == 0.5  # yellow
    sim.lights["J0-0"].phase_index = 2
    assert cav_observation(sim, "solo", COTV)[6] == 0.0  # red
    assert cav_observation(sim, "solo", ICOTV)[6] == 0.0  # ablated

    assert cav_obs_dim(MCOTV) == 8
    obs_m = cav_observation(sim, "solo", MCOTV, prev_tl_action=1)
    assert obs_m[7] == 1.0


def test_cav_observation_leader_gap():
    sim = empty_sim()
    put_vehicle(sim, "me", "N0:J0-0", 100.0, 9.0, kind="CAV")
    put_vehicle(sim, "lead", "N0:J0-0", 135.0, 12.0)
    obs = cav_observation(sim, "me", COTV)
    assert obs[2] == pytest.approx(0.8)
    assert obs[4] == pytest.approx(30.0 / 300.0)


def test_observation_length_constant_during_run():
    scen = grid_scenario("1x1", penetration=0.5, seed=4)
    env = TrafficEnv(scen, EnvConfig(COTV))
    env.reset()
    tl_p = Policy(init_params("tl", tl_obs_dim(scen.network, COTV), seed=0))
    cav_p = Policy(init_params("cav", cav_obs_dim(COTV), seed=0))
    rng = np.random.default_rng(0)
    lengths_tl, lengths_cav = set(), set()
    for _ in range(120):
        for rec in env.step(tl_p, cav_p, rng=rng):
            (lengths_tl if rec.agent_type == "TL" else lengths_cav).add(
                rec.obs.shape)
        for rec_obs in ():
            pass
    assert lengths_tl == {(tl_obs_dim(scen.network, COTV),)}
    assert lengths_cav <= {(cav_obs_dim(COTV),)}


# --- rewards -----------------------------------------------------------------

def test_tl_reward_examples():
    sim = empty_sim()
    for k in range(10):
        put_vehicle(sim, f"in{k}", "N0:J0-0", 10.0 + 25 * k, 3.0)
    for k in range(4):
        put_vehicle(sim, f"out{k}", "J0-0:S0", 10.0 + 25 * k, 3.0)
    assert tl_reward(sim, sim.lights["J0-0"]) == pytest.approx(-0.15)

    sim2 = empty_sim()
    for k in range(3):
        put_vehicle(sim2, f"i{k}", "W0:J0-0", 10.0 + 30 * k, 3.0)
        put_vehicle(sim2, f"o{k}", "J0-0:E0", 10.0 + 30 * k, 3.0)
    assert tl_reward(sim2, sim2.lights["J0-0"]) == pytest.approx(0.0)

    sim3 = empty_sim()
    for k in range(12):
        put_vehicle(sim3, f"o{k}", "J0-0:W0", 10.0 + 20 * k, 3.0)
    assert tl_reward(sim3, sim3.lights["J0-0"]) == pytest.approx(0.30)


def test_cav_reward_examples():
    sim = empty_sim()
    a = put_vehicle(sim, "a", "N0:J0-0", 100.0, 15.0, kind="CAV")
    a.accel = 0.0
    assert cav_reward(sim, "a") == pytest.approx(0.0)

    sim2 = empty_sim()
    b = put_vehicle(sim2, "b", "N0:J0-0", 100.0, 7.5, kind="CAV")
    b.accel = 0.0
    assert cav_reward(sim2, "b") == pytest.approx(-0.5)

    sim3 = empty_sim()
    c = put_vehicle(sim3, "c", "N0:J0-0", 100.0, 15.0, kind="CAV")
    d = put_vehicle(sim3, "d", "N0:J0-0", 200.0, 15.0, kind="CAV")
    c.accel = 3.0
    d.accel = -2.0  # clipped to zero in the norm term
    assert cav_reward(sim3, "c") == pytest.approx(-1.0 / 6.0, rel=1e-12)


def eq_tl_oracle(speeds_in_counts, out_counts, c):
    """Direct transcription of the pressure penalty."""
    return -(sum(speeds_in_counts) - sum(out_counts)) / c


def eq_cav_oracle(speeds, accels, v_star, a_star):
    k = len(speeds)
    r1 = -sum((v_star - min(v, v_star)) / v_star for v in speeds) / k
    r2 = -math.sqrt(sum((max(a, 0.0) / a_star) ** 2 for a in accels) / k ** 2)
    return r1 + r2


def test_reward_oracle_equivalence_randomized():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        sim = empty_sim()
        inter = sim.network.intersections["J0-0"]
        in_counts, out_counts = [], []
        for rid in inter.incoming:
            n = int(rng.integers(0, 6))
            in_counts.append(n)
            for k in range(n):
                put_vehicle(sim, f"{rid}_{k}", rid, 5.0 + 40 * k,
                            float(rng.uniform(0, 15)))
        for rid in inter.outgoing:
            n = int(rng.integers(0, 6))
            out_counts.append(n)
            for k in range(n):
                put_vehicle(sim, f"{rid}_{k}", rid, 5.0 + 40 * k,
                            float(rng.uniform(0, 15)))
        got = tl_reward(sim, sim.lights["J0-0"])
        want = eq_tl_oracle(in_counts, out_counts, 40)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-15)
        assert -4.0 <= got <= 4.0

        road = "N0:J0-0"
        if sim.road_order[road]:
            speeds, accels = [], []
            for vid in sim.road_order[road]:
                veh = sim.vehicles[vid]
                veh.accel = float(rng.uniform(-4.5, 3.0))
                veh.speed = float(rng.uniform(0, 16.0))  # may exceed the cap
                speeds.append(veh.speed)
                accels.append(veh.accel)
            agent = sim.road_order[road][0]
            got = cav_reward(sim, agent)
            want = eq_cav_oracle(speeds, accels, 15.0, 9.0)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-15)
            assert -2.0 <= got <= 0.0


# --- environment transition --------------------------------------------------

def make_policies(network, mode, seed=0):
    return (Policy(init_params("tl", tl_obs_dim(network, mode), seed=seed)),
            Policy(init_params("cav", cav_obs_dim(mode), seed=seed)))


def test_env_step_tl_only_at_zero_penetration():
    scen = grid_scenario("1x1", penetration=0.0, seed=2)
    env = TrafficEnv(scen, EnvConfig(COTV))
    env.reset()
    tl_p, cav_p = make_policies(scen.network, COTV)
    rng = np.random.default_rng(0)
    for _ in range(60):
        records = env.step(tl_p, cav_p, rng=rng)
        assert len(records) == 1
        assert records[0].agent_type == "TL"


def test_env_step_cotv_agent_count():
    scen = grid_scenario("1x1", penetration=1.0, seed=2)
    env = TrafficEnv(scen, EnvConfig(COTV))
    sim = env.reset()
    for slot, rid in enumerate(sim.network.intersections["J0-0"].incoming):
        for k in range(3):
            put_vehicle(sim, f"{slot}_{k}", rid, 50.0 + 60 * k, 5.0, kind="CAV")
    sim.pending = []
    tl_p, cav_p = make_policies(scen.network, COTV)
    records = env.step(tl_p, cav_p, rng=np.random.default_rng(0))
    assert len(records) == 5  # 1 signal + 4 closest vehicles


def test_env_step_star_agent_count():
    scen = grid_scenario("1x1", penetration=1.0, seed=2)
    env = TrafficEnv(scen, EnvConfig(STAR))
    sim = env.reset()
    for slot, rid in enumerate(sim.network.intersections["J0-0"].incoming):
        for k in range(3):
            put_vehicle(sim, f"{slot}_{k}", rid, 50.0 + 60 * k, 5.0, kind="CAV")
    sim.pending = []
    tl_p, cav_p = make_policies(scen.network, STAR)
    records = env.step(tl_p, cav_p, rng=np.random.default_rng(0))
    assert len(records) == 13  # 1 signal + all 12 vehicles


def test_cotv_agent_count_bound_over_episode():
    scen = grid_scenario("1x1", penetration=1.0, seed=6)
    env = TrafficEnv(scen, EnvConfig(COTV))
    env.reset()
    tl_p, cav_p = make_policies(scen.network, COTV)
    rng = np.random.default_rng(1)
    for _ in range(300):
        records = env.step(tl_p, cav_p, rng=rng)
        n_cav = sum(r.agent_type == "CAV" for r in records)
        assert n_cav <= 4


def test_retirement_closes_segment_with_done():
    scen = grid_scenario("1x1", penetration=1.0, seed=2)
    env = TrafficEnv(scen, EnvConfig(COTV))
    sim = env.reset()
    sim.pending = []
    veh = put_vehicle(sim, "c", "N0:J0-0", 298.0, 15.0,
                      route=["N0:J0-0", "J0-0:S0"], kind="CAV")
    tl_p, cav_p = make_policies(scen.network, COTV)

    class KeepPolicy:
        def act(self, obs, rng, sample):
            return 0, 0.0, 0.0

    records = env.step(KeepPolicy(), cav_p, rng=np.random.default_rng(0))
    cav_recs = [r for r in records if r.agent_type == "CAV"]
    assert len(cav_recs) == 1
    assert cav_recs[0].done  # crossed the stop line, left the control set
    assert veh.road == "J0-0:S0"
    assert np.isfinite(cav_recs[0].reward)
