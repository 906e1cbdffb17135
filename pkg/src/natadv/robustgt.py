"""Fine-tune a robot against the synthetic human mixed with failure-case adversaries."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import ConfigError, CursorAssistConfig
from .frontier import Frontier, FrontierPoint
from .nn import ContractError, GaussianPolicy
from .rl import TAG_FT, PpoConfig, derive_seed, train_personalized

log = logging.getLogger(__name__)


@dataclass
class PopulationSpec:
    base_human: GaussianPolicy
    adversaries: list[GaussianPolicy] = field(default_factory=list)
    adversary_rate: float = 0.15

    def validate(self) -> "PopulationSpec":
        if not 0.0 <= self.adversary_rate <= 1.0:
            raise ConfigError("adversary_rate must lie in [0, 1]")
        if self.adversary_rate > 0 and not self.adversaries:
            raise ConfigError("a positive adversary_rate needs at least one adversary")
        return self

    @property
    def policies(self) -> list[GaussianPolicy]:
        return [self.base_human, *self.adversaries]


def select_failure_cases(
    frontier: Frontier | Sequence[FrontierPoint],
    nat_range: tuple[float, float] = (0.2, 0.8),
    n: int = 3,
) -> list[str]:
    """Run ids of the ``n`` most adversarial runs whose naturalness lies in ``nat_range``.

    Considers every scanned run, not only the Pareto subset; ties in
    adversarialness go to the lower lambda, then to the run id.
    """
    points = frontier.all_points if isinstance(frontier, Frontier) else list(frontier)
    if not points:
        raise ContractError("frontier has no points")
    if n < 1:
        raise ContractError("n must be >= 1")
    lo, hi = nat_range
    cands = [p for p in points if lo <= p.naturalness <= hi]
    if not cands:
        warnings.warn(f"no run has naturalness in [{lo}, {hi}]", RuntimeWarning, stacklevel=2)
        return []
    cands.sort(key=lambda p: (-p.adversarialness, p.lam, p.run_id))
    return [p.run_id for p in cands[:n]]


def partner_schedule(seed: int, rate: float, n_adversaries: int, iteration: int, n_episodes: int) -> np.ndarray:
    """Partner index per episode: 0 is the base human, 1..n an adversary (uniform).

    A pure function of (seed, rate, adversary count, iteration).
    """
    rng = np.random.default_rng(derive_seed(seed, TAG_FT, 1, iteration))
    adv = rng.random(n_episodes) < rate
    which = rng.integers(1, n_adversaries + 1, size=n_episodes) if n_adversaries else np.zeros(n_episodes, int)
    return np.where(adv, which, 0).astype(np.int64)


def robust_finetune(
    robot: GaussianPolicy,
    population: PopulationSpec,
    env_config: CursorAssistConfig,
    config: PpoConfig,
    *,
    seed: int,
    iterations: int,
    expert: GaussianPolicy | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> tuple[GaussianPolicy, list[dict]]:
    """Resume PPO on a copy of ``robot`` with partners drawn from ``population``."""
    population.validate()
    pols = population.policies
    n_adv = len(population.adversaries)

    def sampler(it: int, n_ep: int):
        return pols, partner_schedule(seed, population.adversary_rate, n_adv, it, n_ep)

    return train_personalized(population.base_human, env_config, config, expert, seed=seed,
                              iterations=iterations, robot=robot.copy(), partner_sampler=sampler,
                              tag=TAG_FT, callback=callback)
