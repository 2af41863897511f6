import itertools

import numpy as np
import pandas as pd
import pytest
import torch

from thermal_workbench.config import ControlConfig, PlantConfig, RunConfig
from thermal_workbench.control import (TRACE_COLUMNS, ActionBounds, ComfortBounds, MappedAction, PlantBackend,
                                       ReplayBuffer, RewardTerms, RewardWeights, SacAgent, ThermalEnv, TwinCritic,
                                       _disturbance_row, action_violation, baseline_controller, baseline_policy,
                                       bellman_target, coil_energy, comfort_violation, compose_reward,
                                       evaluate_policy, free_float_policy, make_model_env, make_plant_env,
                                       map_action, normalize_action, polyak_update, reward, reward_terms,
                                       sac_update, seed_replay_from_plant, train_agent)
from thermal_workbench.errors import ContractError, InputError
from thermal_workbench.models import decode_step
from thermal_workbench.plant import PlantParams, generate_weather

NOON = pd.Timestamp("2024-06-03 12:00")
NIGHT = pd.Timestamp("2024-06-03 03:00")
LIMITS = ((0.09, 0.28), (0.0, 0.28), (12.8, 32.2))


@pytest.fixture
def bounds():
    return ActionBounds()


@pytest.fixture
def comfort():
    return ComfortBounds()


@pytest.fixture(scope="module")
def weather():
    return generate_weather(4, seed=0, start="2024-06-03")


@pytest.fixture(scope="module")
def design_day():
    """Two clear, fully occupied weekdays sized within the coil's cooling capacity."""
    index = pd.date_range("2024-06-03", periods=192, freq="15min", name="timestamp")
    hours = index.hour.to_numpy() + index.minute.to_numpy() / 60.0
    solar = 640.0 * np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)
    solar[(hours < 6.0) | (hours >= 18.0)] = 0.0
    return pd.DataFrame({"t_out_c": 24.0 + 3.0 * np.sin(2 * np.pi * (hours - 9.0) / 24.0), "solar_wm2": solar,
                         "occupancy": np.where((hours >= 8.0) & (hours < 18.0), 8, 0)}, index=index)


def small_control(**overrides):
    values = dict(batch_size=16, hidden=8, start_steps=10, episodes=2, episode_len=8, buffer_capacity=200)
    values.update(overrides)
    return ControlConfig(**values)


class TestActionMapping:
    def test_upper_corner(self, bounds):
        mapped = map_action([1.0, 0.0, 1.0], bounds, NOON)
        assert mapped.q_sup == pytest.approx(0.28)
        assert mapped.t_sup == pytest.approx(32.2)

    def test_lower_corner(self, bounds):
        mapped = map_action([-1.0, -1.0, -1.0], bounds, NOON)
        assert (mapped.q_sup, mapped.q_out, mapped.t_sup) == pytest.approx((0.09, 0.0, 12.8))

    def test_midpoints(self, bounds):
        mapped = map_action([0.0, 0.0, 0.0], bounds, NOON)
        assert (mapped.q_sup, mapped.q_out, mapped.t_sup) == pytest.approx((0.185, 0.0925, 22.5))

    def test_unoccupied_allows_zero_airflow(self, bounds):
        assert map_action([-1.0, 0.0, 0.0], bounds, NIGHT).q_sup == 0.0

    def test_requests_are_kept_but_outputs_clamped(self, bounds):
        for a in itertools.product([-1.7, -0.3, 1.0, 2.5], repeat=3):
            mapped = map_action(a, bounds, NOON)
            assert 0.09 <= mapped.q_sup <= 0.28
            assert 0.0 <= mapped.q_out <= mapped.q_sup
            assert 12.8 <= mapped.t_sup <= 32.2
        assert map_action([2.5, 0.0, 0.0], bounds, NOON).requested[0] > 0.28

    def test_normalize_inverts_map(self, bounds):
        a = normalize_action(0.2, 0.05, 18.0, bounds, NOON)
        mapped = map_action(a, bounds, NOON)
        assert (mapped.q_sup, mapped.q_out, mapped.t_sup) == pytest.approx((0.2, 0.05, 18.0))

    def test_rejects_wrong_width(self, bounds):
        with pytest.raises(InputError):
            map_action([0.0, 0.0], bounds, NOON)


class TestPenalties:
    def test_comfort_examples(self, comfort):
        assert comfort_violation(23.0, comfort, NOON) == 0.0
        assert comfort_violation(25.0, comfort, NOON) == pytest.approx(1.8)
        assert comfort_violation(18.3, comfort, NIGHT) == 0.0

    def test_action_examples(self):
        inside = MappedAction(0.2, 0.05, 20.0, (0.2, 0.05, 20.0), LIMITS)
        assert action_violation(inside) == 0.0
        airflow = MappedAction(0.28, 0.0, 20.0, (0.30, 0.0, 20.0), LIMITS)
        assert action_violation(airflow) == pytest.approx(42.3776)
        supply = MappedAction(0.2, 0.0, 32.2, (0.2, 0.0, 34.0), LIMITS)
        assert action_violation(supply) == pytest.approx(3.24)

    def test_coil_examples(self):
        assert coil_energy(0.2, 0.1, 30.0, 24.0, 14.0) == pytest.approx(3.1356)
        assert coil_energy(0.2, 0.1, 30.0, 24.0, 27.0) == 0.0
        assert coil_energy(0.0, 0.0, 30.0, 24.0, 14.0) == 0.0
        assert coil_energy(0.2, 0.0, 30.0, 24.0, 30.0) == pytest.approx(1.4472)

    def test_coil_contract(self):
        with pytest.raises(ContractError):
            coil_energy(0.1, 0.2, 30.0, 24.0, 14.0)


class TestReward:
    def test_all_satisfied(self, bounds, comfort):
        a = [-1.0, -1.0, 0.0]
        mapped = map_action(a, bounds, NIGHT)
        r = reward(22.0, NIGHT, mapped, a, a, 25.0, 22.0, comfort, RewardWeights())
        assert r == pytest.approx(0.04)

    def test_comfort_only(self):
        terms = RewardTerms(l_s=1.8, l_a=(0.0, 0.0, 0.0), l_e=0.0, l_q=0.0, l_r=0.0)
        assert compose_reward(terms, RewardWeights()) == pytest.approx(-0.18)

    def test_smoothness(self, bounds, comfort):
        a, prev = [0.5, -0.2, 0.0], [0.0, 0.0, 0.0]
        mapped = map_action(a, bounds, NIGHT)
        terms = reward_terms(22.0, NIGHT, mapped, a, prev, 22.0, 22.0, comfort)
        assert terms.l_r == pytest.approx(0.7)

    @pytest.mark.parametrize("l_s, l_a, expected", [
        (0.0, (0.0, 0.0, 0.0), 1.0), (0.1, (0.0, 0.0, 0.0), 0.0), (0.0, (0.0, 3.2, 0.0), 0.0), (1.0, (1.0, 0, 0), 0.0)])
    def test_comfort_bonus_iff_no_violation(self, l_s, l_a, expected):
        assert RewardTerms(l_s, l_a, 0.0, 0.0, 0.0).l_c == expected


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buffer = ReplayBuffer(2, 3, capacity=3)
        for i in range(5):
            buffer.add(np.full(2, i), np.zeros(3), float(i), np.full(2, i + 1), False)
        assert len(buffer) == 3
        np.testing.assert_array_equal(buffer.ordered("reward"), [2.0, 3.0, 4.0])

    def test_sampling_without_replacement(self):
        buffer = ReplayBuffer(1, 3, capacity=10, seed=0)
        for i in range(10):
            buffer.add([i], np.zeros(3), float(i), [i], False)
        batch = buffer.sample(10)
        assert sorted(batch["reward"].tolist()) == list(map(float, range(10)))
        with pytest.raises(ContractError):
            buffer.sample(11)


class TestSacPieces:
    def test_terminal_target_is_reward(self):
        r = torch.tensor([1.5, -0.2], dtype=torch.float64)
        y = bellman_target(r, torch.ones(2, dtype=torch.float64), torch.tensor([10.0, 20.0], dtype=torch.float64),
                           torch.tensor([-1.0, 3.0], dtype=torch.float64), 0.2, 0.98)
        torch.testing.assert_close(y, r)

    def test_polyak_full_copy(self):
        torch.manual_seed(0)
        source, target = TwinCritic(4, 3, (8,)), TwinCritic(4, 3, (8,))
        polyak_update(target, source, 1.0)
        for t, s in zip(target.parameters(), source.parameters()):
            torch.testing.assert_close(t, s)

    def test_tau_validation(self):
        with pytest.raises(InputError):
            ControlConfig(tau=0.0)
        with pytest.raises(InputError):
            ControlConfig(episodes=5, max_epochs=4)

    def test_targets_fixed_without_critic_learning(self):
        agent = SacAgent(small_control(lr=0.0), seed=0)
        before = [p.detach().clone() for p in agent.target.parameters()]
        buffer = ReplayBuffer(11, 3, capacity=64, seed=0)
        rng = np.random.default_rng(0)
        for _ in range(32):
            buffer.add(rng.normal(22.0, 2.0, 11), rng.uniform(-1, 1, 3), rng.normal(), rng.normal(22.0, 2.0, 11),
                       False)
        for _ in range(3):
            diagnostics = sac_update(agent, buffer.sample(16))
        assert np.isfinite(diagnostics["critic_loss"])
        for p, b in zip(agent.target.parameters(), before):
            torch.testing.assert_close(p, b)

    def test_save_and_load(self, tmp_path):
        agent = SacAgent(small_control(), seed=2)
        agent.save(tmp_path / "agent.json")
        loaded = SacAgent.load(tmp_path / "agent.json")
        obs = np.linspace(18.0, 26.0, 11)
        np.testing.assert_allclose(loaded.act(obs, deterministic=True), agent.act(obs, deterministic=True))

    def test_load_missing(self, tmp_path):
        with pytest.raises(InputError):
            SacAgent.load(tmp_path / "none.json")


class TestBaseline:
    def test_mid_band_keeps_minimum_airflow(self, bounds, comfort):
        q_sup, q_out, t_sup = baseline_controller(22.85, NOON, bounds, comfort)
        assert q_sup == pytest.approx(0.09)
        assert q_out == pytest.approx(0.027)
        assert t_sup == pytest.approx(22.85)

    def test_hot_zone_gets_full_cooling(self, bounds, comfort):
        q_sup, _, t_sup = baseline_controller(25.0, NOON, bounds, comfort)
        assert q_sup == pytest.approx(0.28)
        assert t_sup == pytest.approx(12.8)

    def test_cold_zone_gets_heating(self, bounds, comfort):
        q_sup, _, t_sup = baseline_controller(21.0, NOON, bounds, comfort)
        assert q_sup == pytest.approx(0.28)
        assert t_sup == pytest.approx(32.2)

    def test_unoccupied_in_band_is_off(self, bounds, comfort):
        assert baseline_controller(22.5, NIGHT, bounds, comfort)[:2] == (0.0, 0.0)


class TestPlantEnvironment:
    def test_truncates_at_two_days(self, weather):
        env = make_plant_env(RunConfig(), weather)
        policy = baseline_policy(env.bounds, env.comfort)
        steps, truncated = 0, False
        obs, _ = env.reset(seed=0)
        while not truncated:
            obs, _, terminated, truncated, _ = env.step(policy(obs, env.timestamp))
            assert not terminated
            steps += 1
        assert steps == 192
        with pytest.raises(ContractError):
            env.step(np.zeros(3))

    def test_step_before_reset(self, weather):
        with pytest.raises(ContractError):
            make_plant_env(RunConfig(), weather).step(np.zeros(3))

    def test_seeded_trajectories_match(self, weather):
        runs = []
        for _ in range(2):
            env = make_plant_env(RunConfig(), weather, episode_len=24)
            policy = baseline_policy(env.bounds, env.comfort)
            obs, _ = env.reset(seed=5)
            trace = [obs]
            for _ in range(24):
                obs, *_ = env.step(policy(obs, env.timestamp))
                trace.append(obs)
            runs.append(np.array(trace))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_observation_layout(self, weather):
        env = make_plant_env(RunConfig(), weather, episode_len=4)
        obs, info = env.reset(seed=0, options={"start": 48})
        assert obs.shape == (11,)
        assert info["timestamp"] == weather.index[48]
        assert tuple(obs[-2:]) == (21.7, 24.0)
        np.testing.assert_array_equal(obs[6:9], np.zeros(3))

    def test_free_float_uses_no_energy(self, weather):
        env = make_plant_env(RunConfig(), weather)
        report = evaluate_policy(free_float_policy(env.bounds), env, days=1, seed=0, start=96)
        assert report.energy_kwh < 1e-9
        assert report.violation_ch_per_day >= 0.0
        assert list(report.trace.columns) == TRACE_COLUMNS
        assert len(report.trace) == 96

    def test_baseline_report(self, weather):
        env = make_plant_env(RunConfig(), weather)
        report = evaluate_policy(baseline_policy(env.bounds, env.comfort), env, days=1, seed=0, start=96)
        assert report.energy_kwh > 0.0
        assert report.peak_kw > 0.0
        assert set(report.to_dict()) == {"energy_kwh", "violation_ch_per_day", "peak_kw", "smoothness",
                                         "mean_reward"}

    def test_violation_ignores_sensor_noise(self):
        weather = generate_weather(3, seed=0, start="2024-01-15")
        reports = []
        for sigma in (0.0, 0.5):
            env = make_plant_env(RunConfig(plant=PlantConfig(noise_sigma=sigma)), weather)
            reports.append(evaluate_policy(free_float_policy(env.bounds), env, days=1, seed=0, start=96))
        clean, noisy = reports
        assert clean.violation_ch_per_day > 0.0
        assert noisy.violation_ch_per_day == pytest.approx(clean.violation_ch_per_day, abs=1e-6)
        np.testing.assert_allclose(noisy.trace["t_zone_c"], clean.trace["t_zone_c"], atol=1e-6)

    def test_baseline_holds_the_band_on_a_design_day(self, design_day):
        cfg = ControlConfig()
        env = ThermalEnv(PlantBackend(PlantParams(noise_sigma=0.0), initial_range=(23.0, 24.0)), design_day,
                         ActionBounds.from_config(cfg), ComfortBounds.from_config(cfg),
                         RewardWeights.from_config(cfg), episode_len=96)
        report = evaluate_policy(baseline_policy(env.bounds, env.comfort), env, days=1, seed=0, start=0)
        assert report.energy_kwh > 0.0
        assert report.violation_ch_per_day < 0.05

    def test_replay_prefill(self, weather):
        env = make_plant_env(RunConfig(), weather, episode_len=8)
        buffer = ReplayBuffer(11, 3, capacity=100)
        added = seed_replay_from_plant(buffer, env, baseline_policy(env.bounds, env.comfort), episodes=2)
        assert added == len(buffer) == 16
        assert buffer.ordered("done").sum() == 0.0


class TestModelEnvironment:
    def test_zero_load_follows_disturbance_prediction(self, constrained_model, plant_frame):
        cfg = RunConfig(control=small_control())
        env = make_model_env(cfg, constrained_model, plant_frame)
        obs, _ = env.reset(seed=0, options={"start": 96})
        hidden, temperature, ts = env.backend.hidden, env.backend.temperature, env.timestamp
        row = plant_frame.loc[ts]
        action = normalize_action(0.2, 0.05, float(obs[0]), env.bounds, ts)
        _, _, _, _, info = env.step(action)
        assert info["u_kw"] == pytest.approx(0.0, abs=1e-9)
        with torch.no_grad():
            expected, _ = decode_step(constrained_model, temperature, 0.0, _disturbance_row(row, ts), hidden)
        assert info["t_zone"] == pytest.approx(float(expected), abs=1e-9)

    def test_rejects_start_without_history(self, constrained_model, plant_frame):
        env = make_model_env(RunConfig(control=small_control()), constrained_model, plant_frame)
        with pytest.raises(InputError):
            env.reset(seed=0, options={"start": 3})


class TestTrainAgent:
    def test_smoke(self, weather, tmp_path):
        cfg = small_control()
        env = make_plant_env(RunConfig(control=cfg), weather)
        agent, curve = train_agent(SacAgent(cfg, seed=0), env, episodes=2, seed=0)
        assert [row["episode"] for row in curve.rows] == [1, 2]
        assert agent.updates > 0
        curve.write_csv(tmp_path / "curve.csv")
        assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "episode,reward,alpha,critic_loss,policy_loss"

    def test_episode_cap(self, weather):
        cfg = small_control(max_epochs=2)
        env = make_plant_env(RunConfig(control=cfg), weather)
        with pytest.raises(InputError):
            train_agent(SacAgent(cfg, seed=0), env, episodes=3)

    @pytest.mark.slow
    def test_trained_agent_beats_random_actions(self, weather):
        cfg = ControlConfig(batch_size=256, start_steps=500, episodes=40, episode_len=96, buffer_capacity=20_000)
        env = make_plant_env(RunConfig(control=cfg), weather)
        agent, _ = train_agent(SacAgent(cfg, seed=0), env, episodes=cfg.episodes, seed=0)
        rng = np.random.default_rng(0)
        trained = evaluate_policy(agent.policy_fn(deterministic=True), env, days=1, seed=0, start=96)
        uniform = evaluate_policy(lambda obs, ts: rng.uniform(-1.0, 1.0, size=3), env, days=1, seed=0, start=96)
        assert trained.mean_reward > uniform.mean_reward
