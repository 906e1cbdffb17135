"""CursorAssist: a desk-scale two-player cooperative task with a hidden goal.

The human controls an avatar, the robot controls an end effector, both on the
unit square.  One of two goal points (fixed offsets from the avatar) is
active; only the human observes which one.  The shared reward pays for
effector/goal contact, charges the effector's distance to the goal and
penalises touching the avatar's body anywhere other than the goal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from .nn import ContractError


class ConfigError(ValueError):
    """Invalid environment or run configuration."""


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    human_obs_dim: int
    robot_obs_dim: int
    human_action_dim: int
    robot_action_dim: int
    horizon: int
    reward_range_hint: tuple[float, float]


@dataclass(frozen=True)
class CursorAssistConfig:
    horizon: int = 50
    a_max: float = 0.05
    r_contact: float = 10.0
    w_dist: float = 1.0
    r_body: float = 20.0
    r_goal_radius: float = 0.05
    r_body_radius: float = 0.1
    success_streak: int = 10
    goal_offsets: tuple[tuple[float, float], tuple[float, float]] = ((-0.2, 0.1), (0.2, 0.1))
    human_start: tuple[float, float] = (0.5, 0.35)
    robot_start: tuple[float, float] = (0.5, 0.85)

    def __post_init__(self):
        offsets = tuple(tuple(float(v) for v in o) for o in self.goal_offsets)
        object.__setattr__(self, "goal_offsets", offsets)
        object.__setattr__(self, "human_start", tuple(float(v) for v in self.human_start))
        object.__setattr__(self, "robot_start", tuple(float(v) for v in self.robot_start))

    def validate(self) -> "CursorAssistConfig":
        if int(self.horizon) != self.horizon or self.horizon <= 0:
            raise ConfigError("horizon must be a positive integer")
        if not self.a_max > 0:
            raise ConfigError("a_max must be positive")
        for name in ("r_contact", "w_dist", "r_body"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (self.r_goal_radius > 0 and self.r_body_radius > 0):
            raise ConfigError("radii must be positive")
        if self.success_streak <= 0:
            raise ConfigError("success_streak must be positive")
        if len(self.goal_offsets) != 2 or any(len(o) != 2 for o in self.goal_offsets):
            raise ConfigError("goal_offsets must be two 2D offsets")
        for p in (self.human_start, self.robot_start):
            if len(p) != 2 or not all(0.0 <= v <= 1.0 for v in p):
                raise ConfigError("start positions must lie in the unit square")
        return self

    @classmethod
    def from_dict(cls, d: dict | None) -> "CursorAssistConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown env keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad env config: {exc}") from exc
        return cfg.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goal_offsets"] = [list(o) for o in self.goal_offsets]
        d["human_start"] = list(self.human_start)
        d["robot_start"] = list(self.robot_start)
        return d

    @property
    def spec(self) -> EnvSpec:
        lo = -self.horizon * (self.r_body + self.w_dist * math.sqrt(2.0))
        hi = self.horizon * self.r_contact
        return EnvSpec(
            state_dim=6,
            human_obs_dim=HUMAN_OBS_DIM,
            robot_obs_dim=ROBOT_OBS_DIM,
            human_action_dim=2,
            robot_action_dim=2,
            horizon=int(self.horizon),
            reward_range_hint=(lo, hi),
        )


# avatar xy, effector xy, elapsed fraction; the human also gets the goal one-hot
ROBOT_OBS_DIM = 5
HUMAN_OBS_DIM = ROBOT_OBS_DIM + 2


@dataclass
class CursorAssistState:
    human_avatar: np.ndarray
    robot_effector: np.ndarray
    goal_index: int
    goal_offsets: tuple[tuple[float, float], tuple[float, float]]
    step: int = 0
    contact_streak: int = 0
    best_streak: int = 0

    @property
    def goal_point(self) -> np.ndarray:
        return self.human_avatar + np.asarray(self.goal_offsets[self.goal_index])


@dataclass
class Trajectory:
    human_obs: np.ndarray
    robot_obs: np.ndarray
    human_actions: np.ndarray
    robot_actions: np.ndarray
    rewards: np.ndarray
    success: bool
    goal_index: int = 0
    partner: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    def to_record(self) -> dict:
        return {
            "schema_version": TRAJECTORY_SCHEMA_VERSION,
            "human_obs": self.human_obs.tolist(),
            "robot_obs": self.robot_obs.tolist(),
            "human_actions": self.human_actions.tolist(),
            "robot_actions": self.robot_actions.tolist(),
            "rewards": self.rewards.tolist(),
            "success": bool(self.success),
            "goal_index": int(self.goal_index),
            "partner": int(self.partner),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        if rec.get("schema_version") != TRAJECTORY_SCHEMA_VERSION:
            raise ContractError(f"unsupported trajectory schema {rec.get('schema_version')!r}")
        arr = lambda k: np.asarray(rec[k], dtype=np.float64)  # noqa: E731
        return cls(
            human_obs=arr("human_obs"),
            robot_obs=arr("robot_obs"),
            human_actions=arr("human_actions"),
            robot_actions=arr("robot_actions"),
            rewards=arr("rewards"),
            success=bool(rec["success"]),
            goal_index=int(rec.get("goal_index", 0)),
            partner=int(rec.get("partner", 0)),
        )


TRAJECTORY_SCHEMA_VERSION = 1


class Policy(Protocol):
    obs_dim: int
    act_dim: int

    def act(self, obs: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray: ...


# ----------------------------------------------------------------------
# Single-state API
# ----------------------------------------------------------------------


def _reset(config: CursorAssistConfig, rng: np.random.Generator) -> CursorAssistState:
    return CursorAssistState(
        human_avatar=np.array(config.human_start, dtype=np.float64),
        robot_effector=np.array(config.robot_start, dtype=np.float64),
        goal_index=int(rng.integers(2)),
        goal_offsets=config.goal_offsets,
    )


def reset(env_config: CursorAssistConfig, seed: int) -> CursorAssistState:
    """Fixed start positions; the hidden goal is drawn uniformly from ``seed``."""
    env_config.validate()
    return _reset(env_config, np.random.default_rng(seed))


def reward_fn(config: CursorAssistConfig, effector: np.ndarray, avatar: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Shared per-step reward, vectorised over leading axes."""
    d_goal = np.linalg.norm(effector - goal, axis=-1)
    d_body = np.linalg.norm(effector - avatar, axis=-1)
    contact = d_goal <= config.r_goal_radius
    body = (d_body <= config.r_body_radius) & ~contact
    return -config.w_dist * d_goal + config.r_contact * contact - config.r_body * body


def step(
    config: CursorAssistConfig, state: CursorAssistState, a_H, a_R
) -> tuple[CursorAssistState, float]:
    """Advance one step with velocities ``a_H`` (avatar) and ``a_R`` (effector)."""
    a_H = np.clip(np.asarray(a_H, dtype=np.float64), -config.a_max, config.a_max)
    a_R = np.clip(np.asarray(a_R, dtype=np.float64), -config.a_max, config.a_max)
    avatar = np.clip(state.human_avatar + a_H, 0.0, 1.0)
    effector = np.clip(state.robot_effector + a_R, 0.0, 1.0)
    goal = avatar + np.asarray(config.goal_offsets[state.goal_index])
    r = float(reward_fn(config, effector, avatar, goal))
    in_contact = np.linalg.norm(effector - goal) <= config.r_goal_radius
    streak = state.contact_streak + 1 if in_contact else 0
    new = replace(
        state,
        human_avatar=avatar,
        robot_effector=effector,
        step=state.step + 1,
        contact_streak=streak,
        best_streak=max(state.best_streak, streak),
    )
    return new, r


def observe(config: CursorAssistConfig, state: CursorAssistState) -> tuple[np.ndarray, np.ndarray]:
    o_R = np.concatenate([state.human_avatar, state.robot_effector, [state.step / config.horizon]])
    one_hot = np.zeros(2)
    one_hot[state.goal_index] = 1.0
    return np.concatenate([o_R, one_hot]), o_R


# ----------------------------------------------------------------------
# Batched rollouts
# ----------------------------------------------------------------------


def episode_seed(seed: int, index: int) -> int:
    """Per-episode seed derived from (run seed, episode index)."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def _check_policy(pol, obs_dim: int, act_dim: int, who: str) -> None:
    if pol.obs_dim != obs_dim or pol.act_dim != act_dim:
        raise ContractError(
            f"{who} policy expects obs {pol.obs_dim}/act {pol.act_dim}, env provides obs {obs_dim}/act {act_dim}"
        )


def rollout(
    env_config: CursorAssistConfig,
    pi_H,
    pi_R,
    n_episodes: int,
    seed: int,
    *,
    deterministic: bool = False,
    partners: Sequence[int] | None = None,
) -> list[Trajectory]:
    """Run ``n_episodes`` full-horizon episodes in lock-step.

    ``pi_H`` may be a single policy or a list of policies; in the latter case
    ``partners[i]`` names the human partner for episode ``i``.  Policies emit
    normalised actions which are scaled by ``a_max`` before entering the
    dynamics; the trajectories keep the unscaled samples.
    """
    cfg = env_config.validate()
    if n_episodes <= 0:
        raise ContractError("n_episodes must be positive")
    humans = list(pi_H) if isinstance(pi_H, (list, tuple)) else [pi_H]
    if partners is None:
        if len(humans) != 1:
            raise ContractError("partners required when several human policies are given")
        partners_arr = np.zeros(n_episodes, dtype=np.int64)
    else:
        partners_arr = np.asarray(partners, dtype=np.int64)
        if partners_arr.shape != (n_episodes,) or partners_arr.min() < 0 or partners_arr.max() >= len(humans):
            raise ContractError("partners must index the human policy list, one per episode")
    for h in humans:
        _check_policy(h, HUMAN_OBS_DIM, 2, "human")
    _check_policy(pi_R, ROBOT_OBS_DIM, 2, "robot")

    T, N = cfg.horizon, n_episodes
    goal_idx = np.empty(N, dtype=np.int64)
    noise_H = np.empty((N, T, 2))
    noise_R = np.empty((N, T, 2))
    for i in range(N):
        rng = np.random.default_rng(episode_seed(seed, i))
        goal_idx[i] = _reset(cfg, rng).goal_index
        noise_H[i] = rng.standard_normal((T, 2))
        noise_R[i] = rng.standard_normal((T, 2))

    offsets = np.asarray(cfg.goal_offsets)[goal_idx]
    avatar = np.tile(np.asarray(cfg.human_start), (N, 1))
    effector = np.tile(np.asarray(cfg.robot_start), (N, 1))
    one_hot = np.eye(2)[goal_idx]
    streak = np.zeros(N, dtype=np.int64)
    best = np.zeros(N, dtype=np.int64)

    h_obs = np.empty((N, T, HUMAN_OBS_DIM))
    r_obs = np.empty((N, T, ROBOT_OBS_DIM))
    h_act = np.empty((N, T, 2))
    r_act = np.empty((N, T, 2))
    rewards = np.empty((N, T))
    groups = [(g, np.flatnonzero(partners_arr == g)) for g in range(len(humans))]
    for t in range(T):
        o_R = np.concatenate([avatar, effector, np.full((N, 1), t / T)], axis=1)
        o_H = np.concatenate([o_R, one_hot], axis=1)
        u_H = np.empty((N, 2))
        for g, rows in groups:
            if rows.size:
                u_H[rows] = humans[g].act(o_H[rows], None if deterministic else noise_H[rows, t])
        u_R = pi_R.act(o_R, None if deterministic else noise_R[:, t])
        avatar = np.clip(avatar + np.clip(cfg.a_max * u_H, -cfg.a_max, cfg.a_max), 0.0, 1.0)
        effector = np.clip(effector + np.clip(cfg.a_max * u_R, -cfg.a_max, cfg.a_max), 0.0, 1.0)
        goal = avatar + offsets
        rewards[:, t] = reward_fn(cfg, effector, avatar, goal)
        contact = np.linalg.norm(effector - goal, axis=1) <= cfg.r_goal_radius
        streak = np.where(contact, streak + 1, 0)
        best = np.maximum(best, streak)
        h_obs[:, t], r_obs[:, t], h_act[:, t], r_act[:, t] = o_H, o_R, u_H, u_R

    return [
        Trajectory(
            human_obs=h_obs[i],
            robot_obs=r_obs[i],
            human_actions=h_act[i],
            robot_actions=r_act[i],
            rewards=rewards[i],
            success=bool(best[i] >= cfg.success_streak),
            goal_index=int(goal_idx[i]),
            partner=int(partners_arr[i]),
        )
        for i in range(N)
    ]


def success_rate(trajs: Sequence[Trajectory]) -> float:
    return float(np.mean([t.success for t in trajs])) if trajs else 0.0


def mean_return(trajs: Sequence[Trajectory]) -> float:
    return float(np.mean([t.total_return for t in trajs])) if trajs else 0.0
