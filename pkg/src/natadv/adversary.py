"""Natural-yet-adversarial human policies for a frozen robot.

For a naturalness weight ``lam`` the adversary maximises the inverted task
reward minus ``lam`` times a divergence estimate, GAIL-style: each iteration
collects rollouts against the robot, takes a PPO step on the shaped reward
and then updates the discriminator on fresh adversarial vs canonical
features.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .env import ConfigError, CursorAssistConfig, Trajectory, mean_return, rollout, success_rate
from .frontier import normalize_adversarialness
from .naturalness import (
    CanonicalDataset,
    Discriminator,
    GanConfig,
    MmdConfig,
    MmdMetric,
    naturalness_score,
    stack_features,
    trajectory_features,
)
from .nn import GaussianPolicy
from .rl import TAG_ADV, TAG_DISC, TAG_EVAL, PpoBatch, PpoConfig, PpoLearner, TrainingError, derive_seed

log = logging.getLogger(__name__)

METRICS = ("ls_gan", "kl_logistic", "mmd")
EVAL_SEED = 2024


@dataclass
class AdversaryConfig:
    lam: float = 1.0
    metric_kind: str = "ls_gan"
    discriminator_updates_per_iter: int = 1
    iterations: int = 120
    seed: int = 0
    eval_episodes: int = 40
    eval_seed: int = EVAL_SEED
    collapse_threshold: float = 0.6
    # reset the copied human's action log-std for exploration; None keeps it
    explore_log_std: float | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)

    def validate(self) -> "AdversaryConfig":
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("lambda must be a finite non-negative number")
        if self.metric_kind not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.iterations <= 0 or self.discriminator_updates_per_iter < 0:
            raise ConfigError("iterations must be positive")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be positive")
        self.ppo.validate()
        if self.metric_kind != "mmd":
            self.gan = GanConfig.from_dict({**self.gan.to_dict(), "loss_kind": self.metric_kind})
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("ppo", "gan", "mmd")}
        d["ppo"] = self.ppo.to_dict()
        d["gan"] = self.gan.to_dict()
        d["mmd"] = asdict(self.mmd)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdversaryConfig":
        d = dict(d)
        ppo = PpoConfig.from_dict(d.pop("ppo", None))
        gan = GanConfig.from_dict(d.pop("gan", None))
        mmd = MmdConfig.from_dict(d.pop("mmd", None))
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown adversary keys: {sorted(unknown)}")
        return cls(ppo=ppo, gan=gan, mmd=mmd, **d).validate()


@dataclass
class AdversaryResult:
    policy: GaussianPolicy
    naturalness: float
    adversarialness: float
    robot_return: float
    robot_success: float
    curves: list[dict]
    metric: object = None
    eval_trajectories: list[Trajectory] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "naturalness": self.naturalness,
            "adversarialness": self.adversarialness,
            "robot_return": self.robot_return,
            "robot_success": self.robot_success,
        }


def adversary_reward(env_reward, d_score, lam: float, kind: str = "ls_gan", generator_target: float = 0.0):
    """Per-step adversary reward: inverted task reward minus the weighted naturalness penalty.

    ``ls_gan``: ``-r - lam * (D - target)^2``; ``kl_logistic``: ``-r - lam * D``;
    ``mmd``: ``d_score`` is the episode's MMD^2, charged at every step.
    """
    r = -np.asarray(env_reward, dtype=np.float64)
    d = np.asarray(d_score, dtype=np.float64)
    if kind == "ls_gan":
        pen = (d - generator_target) ** 2
    elif kind in ("kl_logistic", "mmd"):
        pen = d
    else:
        raise ConfigError(f"unknown metric {kind!r}")
    return r - lam * pen


def default_normalization(env_config: CursorAssistConfig) -> tuple[float, float]:
    lo, hi = env_config.spec.reward_range_hint
    return (-hi, -lo)


def build_metric(canonical: CanonicalDataset, config: AdversaryConfig):
    if config.metric_kind == "mmd":
        return MmdMetric(canonical, config.mmd, seed=derive_seed(config.seed, TAG_DISC, 0))
    dim = trajectory_features(canonical.trajectories[0]).shape[1]
    mean, scale = canonical.feature_stats()
    return Discriminator(dim, config.gan, seed=derive_seed(config.seed, TAG_DISC, 0),
                         feature_std=canonical.movement_std, feature_mean=mean, feature_scale=scale)


def shaped_rewards(metric, trajs: list[Trajectory], config: AdversaryConfig) -> tuple[np.ndarray, np.ndarray]:
    """(adversary rewards, raw penalty inputs) for a batch of episodes, shape (N, T)."""
    env_r = np.stack([t.rewards for t in trajs])
    if config.metric_kind == "mmd":
        pen = metric.episode_penalties(trajs)[:, None] * np.ones_like(env_r)
    else:
        pen = metric.scores(stack_features(trajs)).reshape(env_r.shape)
    r = adversary_reward(env_r, pen, config.lam, config.metric_kind, config.gan.generator_target)
    return r, pen


def train_adversary(
    robot: GaussianPolicy,
    human: GaussianPolicy,
    canonical: CanonicalDataset,
    env_config: CursorAssistConfig,
    config: AdversaryConfig,
    normalization: tuple[float, float] | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> AdversaryResult:
    """Train one adversary, initialised from the synthetic human, against a frozen robot."""
    config.validate()
    normalization = normalization or default_normalization(env_config)
    adv = human.copy()
    if config.explore_log_std is not None:
        adv.log_std.data[:] = config.explore_log_std
    learner = PpoLearner(adv, config.ppo, derive_seed(config.seed, TAG_ADV, 0))
    metric = build_metric(canonical, config)
    can_feats = canonical.features()
    disc_rng = np.random.default_rng(derive_seed(config.seed, TAG_DISC, 1))
    n_ep = config.ppo.episodes_per_iter(env_config.horizon)
    curves: list[dict] = []
    for it in range(config.iterations):
        trajs = rollout(env_config, adv, robot, n_ep, derive_seed(config.seed, TAG_ADV, it + 1))
        rewards, pen = shaped_rewards(metric, trajs, config)
        if not np.all(np.isfinite(rewards)):
            raise TrainingError(f"non-finite adversary reward at iteration {it}")
        batch = PpoBatch(obs=np.stack([t.human_obs for t in trajs]),
                         actions=np.stack([t.human_actions for t in trajs]), rewards=rewards)
        m = learner.update(batch)
        rec = {"iter": it, "robot_return": mean_return(trajs), "adv_reward": float(rewards.sum(1).mean()),
               "penalty": float(pen.mean()), "pg_loss": m["pg_loss"]}
        if isinstance(metric, Discriminator):
            adv_feats = stack_features(trajs)
            for _ in range(config.discriminator_updates_per_iter):
                rec["disc_loss"] = metric.update(adv_feats, can_feats, disc_rng)
            acc = float(np.mean(metric.scores(can_feats) < 0.0))
            rec["canonical_accuracy"] = acc
            if acc < config.collapse_threshold and it >= 1:
                warnings.warn(f"discriminator accuracy on canonical data fell to {acc:.2f} at iteration {it}",
                              RuntimeWarning, stacklevel=2)
        curves.append(rec)
        if callback:
            callback(it, rec)

    eval_trajs = rollout(env_config, adv, robot, config.eval_episodes, derive_seed(config.eval_seed, TAG_EVAL, 7))
    ret = mean_return(eval_trajs)
    return AdversaryResult(
        policy=adv,
        naturalness=naturalness_score(metric, eval_trajs),
        adversarialness=normalize_adversarialness(ret, *normalization),
        robot_return=ret,
        robot_success=success_rate(eval_trajs),
        curves=curves,
        metric=metric,
        eval_trajectories=eval_trajs,
    )
