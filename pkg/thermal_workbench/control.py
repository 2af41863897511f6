"""
Supervisory control: reward terms, action mapping, a soft actor-critic agent,
the gymnasium environment over either a trained zone model or the plant, and
a simplified rule-based baseline.

Actions are normalized triples (q_sup, q_out, T_sup) in [-1, 1]; ``map_action``
turns them into physical setpoints under the schedule-dependent bounds.
"""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
import pandas as pd
import torch
from gymnasium import spaces

from .config import ControlConfig, RunConfig
from .errors import ContractError, DivergenceError, InputError
from .models import SequenceModel, decode_step, encode, time_of_day_features
from .numerics import DTYPE, Mlp, ParamSet, adam_step, as_numpy, backward
from .plant import CP_AIR, RHO_AIR, PlantParams, PlantState, plant_step, thermal_load_kw

logger = logging.getLogger(__name__)

CFM_PER_M3S = 2118.88
F_PER_K = 1.8
ACTION_DIM = 3
OBS_DIM = 11
AGENT_FORMAT = "thermal-workbench/agent-v1"

# observation = (T_z, T_out, solar, occupancy, sin, cos, prev action x3, comfort lo, comfort hi)
OBS_OFFSET = np.array([22.0, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 22.0, 22.0])
OBS_SCALE = np.array([5.0, 10.0, 800.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0])


def _hour(timestamp) -> float:
    ts = pd.Timestamp(timestamp)
    return ts.hour + ts.minute / 60.0 + ts.second / 3600.0


@dataclass(frozen=True)
class ActionBounds:
    q_sup_min_occupied: float = 0.09
    q_sup_min_unoccupied: float = 0.0
    q_sup_max: float = 0.28
    t_sup_min: float = 12.8
    t_sup_max: float = 32.2
    occupied_start_h: float = 6.0
    occupied_end_h: float = 18.0

    def __post_init__(self):
        if not (0.0 <= self.q_sup_min_unoccupied <= self.q_sup_max and 0.0 <= self.q_sup_min_occupied <= self.q_sup_max):
            raise InputError("airflow bounds must satisfy 0 <= lower <= upper")
        if self.t_sup_min > self.t_sup_max:
            raise InputError("supply temperature bounds must satisfy lower <= upper")

    @classmethod
    def from_config(cls, cfg: ControlConfig) -> "ActionBounds":
        return cls(cfg.q_sup_min_occupied, cfg.q_sup_min_unoccupied, cfg.q_sup_max, cfg.t_sup_min, cfg.t_sup_max,
                   cfg.occupied_start_h, cfg.occupied_end_h)

    def occupied(self, timestamp) -> bool:
        return self.occupied_start_h <= _hour(timestamp) < self.occupied_end_h

    def q_sup_range(self, timestamp) -> Tuple[float, float]:
        lo = self.q_sup_min_occupied if self.occupied(timestamp) else self.q_sup_min_unoccupied
        return lo, self.q_sup_max


@dataclass(frozen=True)
class ComfortBounds:
    occupied: Tuple[float, float] = (21.7, 24.0)
    unoccupied: Tuple[float, float] = (18.3, 26.7)
    occupied_start_h: float = 6.0
    occupied_end_h: float = 18.0

    def __post_init__(self):
        lo, hi = self.occupied
        ulo, uhi = self.unoccupied
        if not (ulo <= lo <= hi <= uhi):
            raise InputError(f"occupied band {self.occupied} must lie inside the unoccupied band {self.unoccupied}")

    @classmethod
    def from_config(cls, cfg: ControlConfig) -> "ComfortBounds":
        return cls(tuple(cfg.comfort_occupied), tuple(cfg.comfort_unoccupied), cfg.occupied_start_h,
                   cfg.occupied_end_h)

    def band(self, timestamp) -> Tuple[float, float]:
        if self.occupied_start_h <= _hour(timestamp) < self.occupied_end_h:
            return self.occupied
        return self.unoccupied


@dataclass(frozen=True)
class RewardWeights:
    r1: float = -0.1
    r2_q_sup: float = -0.01
    r2_q_out: float = -0.01
    r2_t_sup: float = -0.033
    r3: float = -1e-4
    r4: float = -2.5e-5
    r5: float = 0.04
    r6: float = -1e-3

    @classmethod
    def from_config(cls, cfg: ControlConfig) -> "RewardWeights":
        return cls(cfg.r1, cfg.r2_q_sup, cfg.r2_q_out, cfg.r2_t_sup, cfg.r3, cfg.r4, cfg.r5, cfg.r6)


@dataclass(frozen=True)
class MappedAction:
    q_sup: float
    q_out: float
    t_sup: float
    requested: Tuple[float, float, float]  # pre-clamp physical requests
    limits: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]


def _affine(a: float, lo: float, hi: float) -> float:
    return lo + (a + 1.0) * 0.5 * (hi - lo)


def _clip(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def map_action(a_norm, bounds: ActionBounds, timestamp) -> MappedAction:
    a = np.asarray(a_norm, dtype=float).reshape(-1)
    if a.shape != (ACTION_DIM,) or not np.all(np.isfinite(a)):
        raise InputError(f"normalized action must be {ACTION_DIM} finite values, got {a_norm!r}")
    q_lo, q_hi = bounds.q_sup_range(timestamp)
    q_sup_req = _affine(a[0], q_lo, q_hi)
    q_sup = _clip(q_sup_req, q_lo, q_hi)
    q_out_req = _affine(a[1], 0.0, q_sup)
    q_out = _clip(q_out_req, 0.0, q_sup)
    t_sup_req = _affine(a[2], bounds.t_sup_min, bounds.t_sup_max)
    t_sup = _clip(t_sup_req, bounds.t_sup_min, bounds.t_sup_max)
    return MappedAction(q_sup, q_out, t_sup, (q_sup_req, q_out_req, t_sup_req),
                        ((q_lo, q_hi), (0.0, q_sup), (bounds.t_sup_min, bounds.t_sup_max)))


def normalize_action(q_sup: float, q_out: float, t_sup: float, bounds: ActionBounds, timestamp) -> np.ndarray:
    """Inverse of ``map_action`` for in-bounds setpoints; a degenerate range maps to -1."""
    def inv(v, lo, hi):
        return -1.0 if hi - lo <= 0 else float(np.clip(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0))

    q_lo, q_hi = bounds.q_sup_range(timestamp)
    return np.array([inv(q_sup, q_lo, q_hi), inv(q_out, 0.0, q_sup), inv(t_sup, bounds.t_sup_min, bounds.t_sup_max)])


def comfort_violation(t_zone: float, comfort: ComfortBounds, timestamp) -> float:
    """Band exceedance in Fahrenheit degrees."""
    lo, hi = comfort.band(timestamp)
    return (max(0.0, t_zone - hi) + max(0.0, lo - t_zone)) * F_PER_K


def action_violation_terms(action: MappedAction) -> Tuple[float, float, float]:
    """Per-action exceedance of the requested setpoints: (q_sup CFM, q_out CFM, T_sup F)."""
    units = (CFM_PER_M3S, CFM_PER_M3S, F_PER_K)
    terms = []
    for value, (lo, hi), unit in zip(action.requested, action.limits, units):
        terms.append((max(0.0, value - hi) + max(0.0, lo - value)) * unit)
    return tuple(terms)


def action_violation(action: MappedAction) -> float:
    return sum(action_violation_terms(action))


def coil_energy(q_sup: float, q_out: float, t_out: float, t_room: float, t_sup: float) -> float:
    """Coil duty magnitude in kW from mixed-air and supply temperatures."""
    if q_out < 0 or q_out > q_sup + 1e-12:
        raise ContractError(f"outdoor airflow {q_out} must lie in [0, q_sup={q_sup}]")
    if q_sup <= 0:
        return 0.0
    t_mix = (q_out / q_sup) * t_out + ((q_sup - q_out) / q_sup) * t_room
    return abs(CP_AIR * RHO_AIR * q_sup * (t_mix - t_sup))


@dataclass(frozen=True)
class RewardTerms:
    l_s: float
    l_a: Tuple[float, float, float]
    l_e: float
    l_q: float
    l_r: float

    @property
    def l_c(self) -> float:
        return 1.0 if self.l_s == 0 and sum(self.l_a) == 0 else 0.0


def compose_reward(terms: RewardTerms, weights: RewardWeights) -> float:
    r2 = (weights.r2_q_sup, weights.r2_q_out, weights.r2_t_sup)
    return (weights.r1 * terms.l_s
            + sum(w * v for w, v in zip(r2, terms.l_a))
            + weights.r3 * terms.l_e
            + weights.r4 * terms.l_q
            + weights.r5 * terms.l_c
            + weights.r6 * terms.l_r)


def reward_terms(t_zone_next: float, next_timestamp, action: MappedAction, a_norm, a_prev, t_out: float,
                 t_room: float, comfort: ComfortBounds) -> RewardTerms:
    return RewardTerms(
        l_s=comfort_violation(t_zone_next, comfort, next_timestamp),
        l_a=action_violation_terms(action),
        l_e=coil_energy(action.q_sup, action.q_out, t_out, t_room, action.t_sup),
        l_q=action.q_sup * CFM_PER_M3S,
        l_r=float(np.abs(np.asarray(a_norm, dtype=float) - np.asarray(a_prev, dtype=float)).sum()),
    )


def reward(t_zone_next: float, next_timestamp, action: MappedAction, a_norm, a_prev, t_out: float, t_room: float,
           comfort: ComfortBounds, weights: RewardWeights) -> float:
    return compose_reward(reward_terms(t_zone_next, next_timestamp, action, a_norm, a_prev, t_out, t_room, comfort),
                          weights)


class ReplayBuffer:
    """FIFO ring buffer of transitions; sampling is uniform without replacement within a batch."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int, seed: int = 0):
        if capacity < 1:
            raise InputError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action, reward: float, next_obs, done: bool) -> None:
        self.obs[self.ptr] = obs
        self.action[self.ptr] = action
        self.reward[self.ptr] = reward
        self.next_obs[self.ptr] = next_obs
        self.done[self.ptr] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered(self, name: str) -> np.ndarray:
        """Stored column oldest first."""
        data = getattr(self, name)
        if self.size < self.capacity:
            return data[:self.size]
        return np.concatenate([data[self.ptr:], data[:self.ptr]])

    def sample(self, batch_size: int) -> Dict[str, torch.Tensor]:
        if batch_size > self.size:
            raise ContractError(f"cannot sample {batch_size} transitions from a buffer holding {self.size}")
        idx = self.rng.choice(self.size, size=batch_size, replace=False)
        batch = dict(obs=self.obs[idx], action=self.action[idx], reward=self.reward[idx],
                     next_obs=self.next_obs[idx], done=self.done[idx])
        return {k: torch.as_tensor(v, dtype=DTYPE) for k, v in batch.items()}


LOG_STD_RANGE = (-20.0, 2.0)


class GaussianPolicy(torch.nn.Module):
    """tanh-squashed diagonal Gaussian."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int]):
        super().__init__()
        self.act_dim = act_dim
        self.net = Mlp((obs_dim, *hidden, 2 * act_dim))

    def forward(self, obs: torch.Tensor):
        out = self.net(obs)
        mean, log_std = out[:, :self.act_dim], out[:, self.act_dim:]
        return mean, log_std.clamp(*LOG_STD_RANGE)

    def sample(self, obs: torch.Tensor, generator: Optional[torch.Generator] = None, deterministic: bool = False):
        mean, log_std = self(obs)
        std = log_std.exp()
        if deterministic:
            pre = mean
        else:
            pre = mean + std * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        action = torch.tanh(pre)
        log_prob = torch.distributions.Normal(mean, std).log_prob(pre).sum(dim=-1)
        log_prob = log_prob - torch.log(1.0 - action.pow(2) + 1e-6).sum(dim=-1)
        return action, log_prob


class TwinCritic(torch.nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int]):
        super().__init__()
        self.q1 = Mlp((obs_dim + act_dim, *hidden, 1))
        self.q2 = Mlp((obs_dim + act_dim, *hidden, 1))

    def forward(self, obs: torch.Tensor, action: torch.Tensor):
        x = torch.cat([obs, action], dim=1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


def polyak_update(target: torch.nn.Module, source: torch.nn.Module, tau: float) -> None:
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            tp.copy_(tau * sp + (1.0 - tau) * tp)


def bellman_target(reward: torch.Tensor, done: torch.Tensor, next_q: torch.Tensor, next_log_prob: torch.Tensor,
                   alpha: float, gamma: float) -> torch.Tensor:
    return reward + gamma * (1.0 - done) * (next_q - alpha * next_log_prob)


class SacAgent:
    def __init__(self, config: ControlConfig, seed: int = 0, obs_dim: int = OBS_DIM, act_dim: int = ACTION_DIM):
        self.config = config
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        hidden = (config.hidden,) * config.hidden_layers
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.policy = GaussianPolicy(obs_dim, act_dim, hidden)
            self.critic = TwinCritic(obs_dim, act_dim, hidden)
        self.target = copy.deepcopy(self.critic)
        self.target.requires_grad_(False)
        self.policy_params = ParamSet(self.policy, lr=config.lr)
        self.critic_params = ParamSet(self.critic, lr=config.lr)
        self.log_alpha = torch.tensor(math.log(config.alpha), dtype=DTYPE, requires_grad=config.auto_entropy)
        self.alpha_optimizer = torch.optim.Adam([self.log_alpha], lr=config.lr) if config.auto_entropy else None
        self.target_entropy = -float(act_dim)
        self.generator = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def prepare(self, obs) -> torch.Tensor:
        obs = np.asarray(obs, dtype=float).reshape(-1, self.obs_dim)
        return torch.as_tensor((obs - OBS_OFFSET[:self.obs_dim]) / OBS_SCALE[:self.obs_dim], dtype=DTYPE)

    def act(self, obs, deterministic: bool = False) -> np.ndarray:
        with torch.no_grad():
            action, _ = self.policy.sample(self.prepare(obs), self.generator, deterministic)
        return as_numpy(action)[0]

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=self.act_dim)

    def policy_fn(self, deterministic: bool = True) -> "Policy":
        return lambda obs, timestamp: self.act(obs, deterministic)

    def to_dict(self) -> dict:
        return {
            "format": AGENT_FORMAT,
            "schema_version": 1,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "config": asdict(self.config),
            "log_alpha": float(self.log_alpha.detach()),
            "policy": self.policy_params.to_dict(),
            "critic": self.critic_params.to_dict(),
            "target": ParamSet(self.target).to_dict(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SacAgent":
        path = Path(path)
        if not path.exists():
            raise InputError(f"agent checkpoint not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("format") != AGENT_FORMAT:
            raise InputError(f"{path} is not an agent checkpoint (format {doc.get('format')!r})")
        agent = cls(ControlConfig(**doc["config"]), obs_dim=doc["obs_dim"], act_dim=doc["act_dim"])
        agent.policy_params.load_dict(doc["policy"])
        agent.critic_params.load_dict(doc["critic"])
        ParamSet(agent.target).load_dict(doc["target"])
        with torch.no_grad():
            agent.log_alpha.fill_(doc["log_alpha"])
        return agent


def sac_update(agent: SacAgent, batch: Dict[str, torch.Tensor]) -> Dict[str, float]:
    cfg = agent.config
    obs, next_obs = agent.prepare(batch["obs"].numpy()), agent.prepare(batch["next_obs"].numpy())
    action, rew, done = batch["action"], batch["reward"], batch["done"]
    alpha = agent.alpha
    agent.updates += 1

    with torch.no_grad():
        next_action, next_logp = agent.policy.sample(next_obs, agent.generator)
        tq1, tq2 = agent.target(next_obs, next_action)
        y = bellman_target(rew, done, torch.min(tq1, tq2), next_logp, alpha, cfg.gamma)
    q1, q2 = agent.critic(obs, action)
    critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
    if not torch.isfinite(critic_loss):
        raise DivergenceError(f"non-finite critic loss at update {agent.updates}")
    agent.critic_params.zero_grad()
    backward(critic_loss)
    adam_step(agent.critic_params, cfg.lr)

    new_action, logp = agent.policy.sample(obs, agent.generator)
    pq1, pq2 = agent.critic(obs, new_action)
    policy_loss = (alpha * logp - torch.min(pq1, pq2)).mean()
    if not torch.isfinite(policy_loss):
        raise DivergenceError(f"non-finite policy loss at update {agent.updates}")
    agent.policy_params.zero_grad()
    backward(policy_loss)
    adam_step(agent.policy_params, cfg.lr)

    alpha_loss = 0.0
    if agent.alpha_optimizer is not None:
        loss = -(agent.log_alpha * (logp.detach() + agent.target_entropy)).mean()
        agent.alpha_optimizer.zero_grad()
        loss.backward()
        agent.alpha_optimizer.step()
        alpha_loss = float(loss)

    polyak_update(agent.target, agent.critic, cfg.tau)
    return {"critic_loss": float(critic_loss), "policy_loss": float(policy_loss), "alpha": agent.alpha,
            "alpha_loss": alpha_loss, "entropy": float(-logp.detach().mean())}


class PlantBackend:
    """Ground-truth zone; the initial temperature is drawn per episode."""

    min_history = 0

    def __init__(self, params: PlantParams, initial_range: Tuple[float, float] = (21.0, 24.0)):
        self.params = params
        self.initial_range = initial_range
        self.state: Optional[PlantState] = None
        self.temperature = float("nan")

    def reset(self, exogenous: pd.DataFrame, start: int, rng: np.random.Generator) -> None:
        t0 = float(rng.uniform(*self.initial_range))
        self.state = PlantState(t0, t0)
        self.rng = rng
        self.temperature = self._measure()

    def _measure(self) -> float:
        noise = self.rng.normal(0.0, self.params.noise_sigma) if self.params.noise_sigma > 0 else 0.0
        return self.state.T_z + noise

    def advance(self, u_kw: float, row: pd.Series, timestamp) -> float:
        self.state = plant_step(self.state, u_kw, float(row["t_out_c"]), float(row["solar_wm2"]),
                                float(row["occupancy"]), self.params)
        self.temperature = self._measure()
        return self.temperature

    @property
    def true_temperature(self) -> float:
        return self.state.T_z


class ModelBackend:
    """Trained zone model; reset warms the encoder on the telemetry preceding the episode start."""

    def __init__(self, model: SequenceModel):
        self.model = model
        self.min_history = model.config.encoder_len
        self.hidden = None
        self.temperature = float("nan")

    def reset(self, exogenous: pd.DataFrame, start: int, rng: np.random.Generator) -> None:
        L = self.model.config.encoder_len
        history = exogenous.iloc[start - L:start]
        with torch.no_grad():
            enc = encode(self.model, history)
            last = history.iloc[-1]
            x, self.hidden = decode_step(self.model, enc.x_end, float(last["u_hvac_kw"]),
                                         _disturbance_row(last, history.index[-1]), enc.hidden)
        self.temperature = float(x.reshape(-1)[0])

    def advance(self, u_kw: float, row: pd.Series, timestamp) -> float:
        with torch.no_grad():
            x, self.hidden = decode_step(self.model, self.temperature, u_kw, _disturbance_row(row, timestamp),
                                         self.hidden)
        self.temperature = float(x.reshape(-1)[0])
        return self.temperature

    @property
    def true_temperature(self) -> float:
        return self.temperature


def _disturbance_row(row: pd.Series, timestamp) -> np.ndarray:
    sin_cos = time_of_day_features(pd.DatetimeIndex([pd.Timestamp(timestamp)]))[0]
    return np.array([row["t_out_c"], row["solar_wm2"], row["occupancy"], sin_cos[0], sin_cos[1]], dtype=float)


class ThermalEnv(gym.Env):
    """
    Single-zone environment at the telemetry time step. Episodes start at
    midnight and end by truncation after ``episode_len`` steps.
    """

    metadata = {"render_modes": []}

    def __init__(self, backend, exogenous: pd.DataFrame, bounds: ActionBounds, comfort: ComfortBounds,
                 weights: RewardWeights, episode_len: int = 192, steps_per_day: int = 96):
        super().__init__()
        if len(exogenous) < backend.min_history + episode_len + 1:
            raise InputError(f"exogenous series of {len(exogenous)} steps is too short for a {episode_len}-step "
                             f"episode after {backend.min_history} history steps")
        self.backend = backend
        self.exogenous = exogenous
        self.bounds = bounds
        self.comfort = comfort
        self.weights = weights
        self.episode_len = episode_len
        self.steps_per_day = steps_per_day
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBS_DIM,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(ACTION_DIM,), dtype=np.float64)
        self._t = 0
        self._steps = 0
        self._limit = episode_len
        self._prev = np.zeros(ACTION_DIM)
        self._active = False

    def episode_starts(self, length: int) -> List[int]:
        first = math.ceil(self.backend.min_history / self.steps_per_day) * self.steps_per_day
        return list(range(first, len(self.exogenous) - length, self.steps_per_day))

    @property
    def timestamp(self) -> pd.Timestamp:
        return self.exogenous.index[self._t]

    def _observation(self) -> np.ndarray:
        row = self.exogenous.iloc[self._t]
        ts = self.exogenous.index[self._t]
        lo, hi = self.comfort.band(ts)
        sin_cos = time_of_day_features(pd.DatetimeIndex([ts]))[0]
        return np.array([self.backend.temperature, row["t_out_c"], row["solar_wm2"], row["occupancy"],
                         sin_cos[0], sin_cos[1], *self._prev, lo, hi], dtype=float)

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed)
        options = options or {}
        self._limit = int(options.get("episode_len", self.episode_len))
        if "start" in options:
            start = int(options["start"])
            if start < self.backend.min_history or start + self._limit >= len(self.exogenous):
                raise InputError(f"episode start {start} leaves no room for history or the episode")
        else:
            starts = self.episode_starts(self._limit)
            if not starts:
                raise InputError("no episode start fits the exogenous series")
            start = starts[int(self.np_random.integers(len(starts)))]
        self._t = start
        self._steps = 0
        self._prev = np.zeros(ACTION_DIM)
        self.backend.reset(self.exogenous, start, self.np_random)
        self._active = True
        return self._observation(), {"timestamp": self.exogenous.index[start]}

    def step(self, action):
        if not self._active:
            raise ContractError("step called on a finished or unreset episode; call reset first")
        a = np.asarray(action, dtype=float).reshape(-1)
        ts = self.exogenous.index[self._t]
        row = self.exogenous.iloc[self._t]
        mapped = map_action(a, self.bounds, ts)
        t_room = self.backend.temperature
        u_kw = thermal_load_kw(mapped.q_sup, mapped.t_sup, t_room)
        t_next = self.backend.advance(u_kw, row, ts)
        next_ts = self.exogenous.index[self._t + 1]
        terms = reward_terms(t_next, next_ts, mapped, a, self._prev, float(row["t_out_c"]), t_room, self.comfort)
        r = compose_reward(terms, self.weights)

        self._t += 1
        self._steps += 1
        self._prev = np.clip(a, -1.0, 1.0)
        truncated = self._steps >= self._limit
        if truncated:
            self._active = False
        lo, hi = self.comfort.band(next_ts)
        info = {"timestamp": ts, "u_kw": u_kw, "q_sup": mapped.q_sup, "q_out": mapped.q_out, "t_sup": mapped.t_sup,
                "coil_kw": terms.l_e, "t_zone": t_next, "t_true": self.backend.true_temperature, "lower": lo,
                "upper": hi, "terms": terms}
        return self._observation(), r, False, truncated, info


def make_plant_env(cfg: RunConfig, exogenous: pd.DataFrame, episode_len: Optional[int] = None) -> ThermalEnv:
    params = cfg.plant.params()
    return ThermalEnv(PlantBackend(params), exogenous, ActionBounds.from_config(cfg.control),
                      ComfortBounds.from_config(cfg.control), RewardWeights.from_config(cfg.control),
                      episode_len or cfg.control.episode_len, params.steps_per_day)


def make_model_env(cfg: RunConfig, model: SequenceModel, telemetry: pd.DataFrame) -> ThermalEnv:
    return ThermalEnv(ModelBackend(model), telemetry, ActionBounds.from_config(cfg.control),
                      ComfortBounds.from_config(cfg.control), RewardWeights.from_config(cfg.control),
                      cfg.control.episode_len, cfg.plant.params().steps_per_day)


Policy = Callable[[np.ndarray, pd.Timestamp], np.ndarray]


def baseline_controller(t_zone: float, timestamp, bounds: ActionBounds, comfort: ComfortBounds,
                        throttle_k: float = 1.0, outdoor_fraction: float = 0.3) -> Tuple[float, float, float]:
    """
    Proportional cooling/heating loops that saturate at the band edges, with a
    deadband in between. Occupied hours keep the minimum airflow and a fixed
    outdoor-air share. Returns (q_sup, q_out, T_sup).
    """
    lo, hi = comfort.band(timestamp)
    q_min, q_max = bounds.q_sup_range(timestamp)
    cool = float(np.clip((t_zone - (hi - throttle_k)) / throttle_k, 0.0, 1.0))
    heat = float(np.clip(((lo + throttle_k) - t_zone) / throttle_k, 0.0, 1.0))
    if cool > 0:
        q_sup = q_min + cool * (q_max - q_min)
        t_sup = t_zone - cool * (t_zone - bounds.t_sup_min)
    elif heat > 0:
        q_sup = q_min + heat * (q_max - q_min)
        t_sup = t_zone + heat * (bounds.t_sup_max - t_zone)
    else:
        q_sup, t_sup = q_min, t_zone
    t_sup = float(np.clip(t_sup, bounds.t_sup_min, bounds.t_sup_max))
    q_out = outdoor_fraction * q_sup if bounds.occupied(timestamp) else 0.0
    return q_sup, q_out, t_sup


def baseline_policy(bounds: ActionBounds, comfort: ComfortBounds) -> Policy:
    def policy(obs: np.ndarray, timestamp) -> np.ndarray:
        q_sup, q_out, t_sup = baseline_controller(float(obs[0]), timestamp, bounds, comfort)
        return normalize_action(q_sup, q_out, t_sup, bounds, timestamp)
    return policy


def free_float_policy(bounds: ActionBounds) -> Policy:
    """Minimum airflow, no outdoor air, supply at zone temperature: zero coil duty."""
    def policy(obs: np.ndarray, timestamp) -> np.ndarray:
        q_lo, _ = bounds.q_sup_range(timestamp)
        return normalize_action(q_lo, 0.0, float(obs[0]), bounds, timestamp)
    return policy


@dataclass
class PolicyReport:
    energy_kwh: float
    violation_ch_per_day: float
    peak_kw: float
    smoothness: float
    mean_reward: float
    trace: pd.DataFrame = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"energy_kwh": self.energy_kwh, "violation_ch_per_day": self.violation_ch_per_day,
                "peak_kw": self.peak_kw, "smoothness": self.smoothness, "mean_reward": self.mean_reward}


TRACE_COLUMNS = ["timestamp", "t_zone_c", "lower_c", "upper_c", "q_sup_m3s", "q_out_m3s", "t_sup_c", "coil_kw"]


def evaluate_policy(policy: Policy, env: ThermalEnv, days: int, seed: int = 0, start: Optional[int] = None) -> PolicyReport:
    """
    One continuous rollout of ``days`` days. Comfort violation is integrated in
    C-hours on the noise-free zone temperature.
    """
    steps = days * env.steps_per_day
    options = {"episode_len": steps}
    if start is not None:
        options["start"] = start
    obs, _ = env.reset(seed=seed, options=options)
    step_h = 24.0 / env.steps_per_day
    rows, rewards, smooth = [], [], []
    energy = violation = peak = 0.0
    for _ in range(steps):
        ts = env.timestamp
        obs, r, terminated, truncated, info = env.step(policy(obs, ts))
        energy += info["coil_kw"] * step_h
        peak = max(peak, info["coil_kw"])
        t_true = info["t_true"]
        violation += (max(0.0, t_true - info["upper"]) + max(0.0, info["lower"] - t_true)) * step_h
        smooth.append(info["terms"].l_r)
        rewards.append(r)
        rows.append([ts.isoformat(), t_true, info["lower"], info["upper"], info["q_sup"], info["q_out"],
                     info["t_sup"], info["coil_kw"]])
        if terminated or truncated:
            break
    return PolicyReport(
        energy_kwh=energy,
        violation_ch_per_day=violation / days,
        peak_kw=peak,
        smoothness=float(np.mean(smooth)),
        mean_reward=float(np.mean(rewards)),
        trace=pd.DataFrame(rows, columns=TRACE_COLUMNS),
    )


def seed_replay_from_plant(buffer: ReplayBuffer, env: ThermalEnv, policy: Policy, episodes: int, seed: int = 0) -> int:
    """Pre-fill the buffer with plant transitions under ``policy``; returns the number added."""
    added = 0
    for ep in range(episodes):
        obs, _ = env.reset(seed=seed + ep)
        done = False
        while not done:
            ts = env.timestamp
            action = policy(obs, ts)
            next_obs, r, terminated, truncated, _ = env.step(action)
            buffer.add(obs, action, r, next_obs, terminated)
            obs, done = next_obs, terminated or truncated
            added += 1
    logger.info(f"replay pre-filled with {added} plant transitions over {episodes} episodes")
    return added


@dataclass
class LearningCurve:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        pd.DataFrame(self.rows, columns=["episode", "reward", "alpha", "critic_loss", "policy_loss"]).to_csv(
            path, index=False)


def train_agent(agent: SacAgent, env: ThermalEnv, episodes: int, seed: int = 0,
                buffer: Optional[ReplayBuffer] = None) -> Tuple[SacAgent, LearningCurve]:
    cfg = agent.config
    if episodes > cfg.max_epochs:
        raise InputError(f"{episodes} episodes exceed the cap of {cfg.max_epochs}")
    buffer = buffer or ReplayBuffer(OBS_DIM, ACTION_DIM, cfg.buffer_capacity, seed)
    curve = LearningCurve()
    steps = 0
    for ep in range(1, episodes + 1):
        obs, _ = env.reset(seed=seed + ep)
        total, diags, done = 0.0, [], False
        while not done:
            action = agent.random_action() if steps < cfg.start_steps else agent.act(obs)
            next_obs, r, terminated, truncated, _ = env.step(action)
            buffer.add(obs, action, r, next_obs, terminated)
            obs, done = next_obs, terminated or truncated
            total += r
            steps += 1
            if len(buffer) >= cfg.batch_size:
                diags.append(sac_update(agent, buffer.sample(cfg.batch_size)))
        row = {"episode": ep, "reward": total, "alpha": agent.alpha,
               "critic_loss": float(np.mean([d["critic_loss"] for d in diags])) if diags else float("nan"),
               "policy_loss": float(np.mean([d["policy_loss"] for d in diags])) if diags else float("nan")}
        curve.rows.append(row)
        logger.info(f"episode {ep}: reward {total:.3f}, alpha {agent.alpha:.4f}, {len(diags)} updates")
    return agent, curve
