"""PPO with an optional behaviour-cloning term, co-optimisation and personalised robots."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .env import (
    HUMAN_OBS_DIM,
    ROBOT_OBS_DIM,
    ConfigError,
    CursorAssistConfig,
    Trajectory,
    mean_return,
    rollout,
    success_rate,
)
from .nn import Adam, GaussianPolicy, Mlp, Tensor, as_tensor, maximum, minimum

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced non-finite values or diverged."""


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


# stream tags for derive_seed, so different phases never share randomness
TAG_COOP, TAG_ROBOT, TAG_ADV, TAG_DISC, TAG_EVAL, TAG_FT, TAG_INIT, TAG_SHUFFLE = range(101, 109)


@dataclass
class PpoConfig:
    clip_eps: float = 0.3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_iter: int = 30
    minibatches: int = 20
    steps_per_iter: int = 4800
    iterations: int = 120
    value_clip: float = 10.0
    grad_clip: float = 20.0
    bc_coeff: float = 1.0
    rl_coeff: float = 0.1
    entropy_coeff: float = 0.001
    lr: float = 5e-5
    critic_lr: float | None = None
    adam_eps: float = 1e-4
    reward_scale: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    normalize_advantages: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "PpoConfig":
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        for name in ("epochs_per_iter", "minibatches", "steps_per_iter", "iterations"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("lr and adam_eps must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict | None) -> "PpoConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown rl keys: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad rl config: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def episodes_per_iter(self, horizon: int) -> int:
        return max(1, self.steps_per_iter // horizon)


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets for fixed-length episodes (rows) that end at the horizon."""
    N, T = rewards.shape
    adv = np.zeros((N, T))
    running = np.zeros(N)
    for t in range(T - 1, -1, -1):
        next_v = values[:, t + 1] if t + 1 < T else 0.0
        delta = rewards[:, t] + gamma * next_v - values[:, t]
        running = delta + gamma * lam * running
        adv[:, t] = running
    return adv, adv + values


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, clip_eps: float) -> Tensor:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    adv = as_tensor(advantages)
    return minimum(ratio * adv, ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * adv)


@dataclass
class PpoBatch:
    obs: np.ndarray  # (N, T, obs_dim)
    actions: np.ndarray  # (N, T, act_dim)
    rewards: np.ndarray  # (N, T)
    expert_actions: np.ndarray | None = None  # (N, T, act_dim)


class PpoLearner:
    """Owns a policy, its critic and both optimisers."""

    def __init__(
        self,
        policy: GaussianPolicy,
        config: PpoConfig,
        seed: int,
        critic: Mlp | None = None,
    ):
        self.config = config.validate()
        self.policy = policy
        self.critic = critic or Mlp(
            [policy.obs_dim, *config.hidden, 1], rng=np.random.default_rng(derive_seed(seed, TAG_INIT, 1))
        )
        self.pi_opt = Adam(policy.parameters(), lr=config.lr, eps=config.adam_eps, grad_clip=config.grad_clip)
        self.vf_opt = Adam(
            self.critic.parameters(),
            lr=config.critic_lr or config.lr,
            eps=config.adam_eps,
            grad_clip=config.grad_clip,
        )
        self.seed = seed
        self.updates = 0

    def update(self, batch: PpoBatch) -> dict:
        return ppo_update(self, batch)


def ppo_update(learner: PpoLearner, batch: PpoBatch) -> dict:
    """Clipped-surrogate PPO over ``epochs_per_iter`` x ``minibatches`` steps.

    Returns mean losses, the mean KL from the pre-update policy and the
    clipped fraction.  The behaviour-cloning term is only present when the
    batch carries expert actions; then the loss is
    ``rl_coeff * ppo + bc_coeff * bc``.
    """
    cfg = learner.config
    policy, critic = learner.policy, learner.critic
    if batch.rewards.size == 0:
        raise TrainingError("empty batch")
    N, T = batch.rewards.shape
    obs = batch.obs.reshape(N * T, -1)
    acts = batch.actions.reshape(N * T, -1)
    rewards = batch.rewards * cfg.reward_scale

    values = critic.predict(obs).reshape(N, T)
    adv, returns = compute_gae(rewards, values, cfg.gamma, cfg.gae_lambda)
    adv, returns, values = adv.ravel(), returns.ravel(), values.ravel()
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(returns))):
        raise TrainingError("non-finite advantages; rewards or critic diverged")
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    old_logp = policy.log_prob(obs, acts).data
    expert = None if batch.expert_actions is None else batch.expert_actions.reshape(N * T, -1)

    rng = np.random.default_rng(derive_seed(learner.seed, TAG_SHUFFLE, learner.updates))
    n = N * T
    mb = max(1, n // cfg.minibatches)
    sums = {"pg_loss": 0.0, "bc_loss": 0.0, "vf_loss": 0.0, "clip_frac": 0.0}
    count = 0
    for _ in range(cfg.epochs_per_iter):
        perm = rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = perm[k * mb : (k + 1) * mb] if k < cfg.minibatches - 1 else perm[k * mb :]
            if idx.size == 0:
                continue
            o = obs[idx]
            logp = policy.log_prob(o, acts[idx])
            ratio = (logp - old_logp[idx]).exp()
            pg_loss = -clipped_surrogate(ratio, adv[idx], cfg.clip_eps).mean()
            loss = pg_loss - cfg.entropy_coeff * policy.entropy()
            bc_val = 0.0
            if expert is not None:
                bc = (policy.mean(o) - expert[idx]).square().sum(axis=1).mean()
                loss = cfg.rl_coeff * loss + cfg.bc_coeff * bc
                bc_val = bc.item()
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite policy loss at update {learner.updates}")
            learner.pi_opt.zero_grad()
            loss.backward()
            learner.pi_opt.step()

            v = critic.forward(o).reshape(-1)
            v_old = values[idx]
            v_clipped = (v - v_old).clip(-cfg.value_clip, cfg.value_clip) + v_old
            ret = returns[idx]
            vf_loss = maximum((v - ret).square(), (v_clipped - ret).square()).mean() * 0.5
            if not np.isfinite(vf_loss.item()):
                raise TrainingError(f"non-finite value loss at update {learner.updates}")
            learner.vf_opt.zero_grad()
            vf_loss.backward()
            learner.vf_opt.step()

            sums["pg_loss"] += pg_loss.item()
            sums["bc_loss"] += bc_val
            sums["vf_loss"] += vf_loss.item()
            sums["clip_frac"] += float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps))
            count += 1
    learner.updates += 1
    new_logp = policy.log_prob_np(obs, acts)
    metrics = {k: v / max(count, 1) for k, v in sums.items()}
    metrics["approx_kl"] = float(np.mean(old_logp - new_logp))
    metrics["entropy"] = policy.entropy().item()
    return metrics


# ----------------------------------------------------------------------
# Training drivers
# ----------------------------------------------------------------------


@dataclass
class CoopPair:
    human_policy: GaussianPolicy
    robot_policy: GaussianPolicy
    history: list[dict] = field(default_factory=list)


def _batch(trajs: Sequence[Trajectory], who: str, rewards: np.ndarray | None = None) -> PpoBatch:
    if who == "human":
        obs = np.stack([t.human_obs for t in trajs])
        acts = np.stack([t.human_actions for t in trajs])
    else:
        obs = np.stack([t.robot_obs for t in trajs])
        acts = np.stack([t.robot_actions for t in trajs])
    r = np.stack([t.rewards for t in trajs]) if rewards is None else rewards
    return PpoBatch(obs=obs, actions=acts, rewards=r)


def _diverged(history: list[dict], floor: float, patience: int) -> bool:
    if len(history) < patience:
        return False
    return all(h["return"] < floor for h in history[-patience:])


def new_policy(obs_dim: int, config: PpoConfig, seed: int, tag: int) -> GaussianPolicy:
    rng = np.random.default_rng(derive_seed(seed, TAG_INIT, tag))
    return GaussianPolicy(obs_dim, 2, hidden=config.hidden, rng=rng, init_log_std=config.init_log_std)


def cooptimize(
    env_config: CursorAssistConfig,
    seed: int,
    iterations: int | None = None,
    config: PpoConfig | None = None,
    *,
    divergence_floor: float | None = None,
    patience: int = 50,
    callback: Callable[[int, dict], None] | None = None,
) -> CoopPair:
    """Train a human and a robot jointly on the shared reward; both are updated every iteration."""
    config = (config or PpoConfig()).validate()
    iterations = iterations or config.iterations
    floor = divergence_floor if divergence_floor is not None else 0.5 * env_config.spec.reward_range_hint[0]
    human = new_policy(HUMAN_OBS_DIM, config, seed, 1)
    robot = new_policy(ROBOT_OBS_DIM, config, seed, 2)
    h_learn = PpoLearner(human, config, derive_seed(seed, TAG_COOP, 1))
    r_learn = PpoLearner(robot, config, derive_seed(seed, TAG_COOP, 2))
    n_ep = config.episodes_per_iter(env_config.horizon)
    history: list[dict] = []
    for it in range(iterations):
        trajs = rollout(env_config, human, robot, n_ep, derive_seed(seed, TAG_COOP, it))
        hm = h_learn.update(_batch(trajs, "human"))
        rm = r_learn.update(_batch(trajs, "robot"))
        rec = {
            "iter": it,
            "return": mean_return(trajs),
            "success": success_rate(trajs),
            "human_pg_loss": hm["pg_loss"],
            "robot_pg_loss": rm["pg_loss"],
            "robot_vf_loss": rm["vf_loss"],
        }
        history.append(rec)
        if callback:
            callback(it, rec)
        if _diverged(history, floor, patience):
            raise TrainingError(f"co-optimisation diverged: return below {floor:.1f} for {patience} iterations")
    return CoopPair(human, robot, history)


def train_personalized(
    human: GaussianPolicy,
    env_config: CursorAssistConfig,
    config: PpoConfig | None = None,
    expert: GaussianPolicy | None = None,
    *,
    seed: int = 0,
    iterations: int | None = None,
    robot: GaussianPolicy | None = None,
    partner_sampler: Callable[[int, int], tuple[list, np.ndarray]] | None = None,
    tag: int = TAG_ROBOT,
    callback: Callable[[int, dict], None] | None = None,
) -> tuple[GaussianPolicy, list[dict]]:
    """Train (or, given ``robot``, resume) a robot against a frozen human.

    ``partner_sampler(iteration, n_episodes)`` may supply a population
    ``(policies, partner_index_per_episode)`` in place of the single human.
    """
    config = (config or PpoConfig()).validate()
    iterations = iterations or config.iterations
    robot = robot if robot is not None else new_policy(ROBOT_OBS_DIM, config, seed, 3)
    learner = PpoLearner(robot, config, derive_seed(seed, tag, 0))
    n_ep = config.episodes_per_iter(env_config.horizon)
    history: list[dict] = []
    for it in range(iterations):
        if partner_sampler is None:
            humans, partners = human, None
        else:
            humans, partners = partner_sampler(it, n_ep)
        trajs = rollout(env_config, humans, robot, n_ep, derive_seed(seed, tag, it), partners=partners)
        batch = _batch(trajs, "robot")
        if expert is not None:
            # the dynamics saturate at |u| = 1, so that is the action the expert effectively takes
            batch.expert_actions = np.clip(
                expert.act(batch.obs.reshape(-1, batch.obs.shape[-1]), None), -1.0, 1.0
            ).reshape(batch.actions.shape)
        m = learner.update(batch)
        rec = {"iter": it, "return": mean_return(trajs), "success": success_rate(trajs), **m}
        history.append(rec)
        if callback:
            callback(it, rec)
    return robot, history


def evaluate(
    env_config: CursorAssistConfig, human, robot, n_episodes: int, seed: int, deterministic: bool = False
) -> dict:
    trajs = rollout(env_config, human, robot, n_episodes, derive_seed(seed, TAG_EVAL), deterministic=deterministic)
    return {"return": mean_return(trajs), "success": success_rate(trajs), "trajectories": trajs}
