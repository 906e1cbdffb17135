"""Naturalness measures: least-squares and logistic discriminators, and kernel MMD.

Discriminators score individual observation feature vectors; a trajectory's
score is the mean over its steps, and a trajectory counts as natural when
that mean is below zero (canonical data is pushed towards the negative
target).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import ConfigError, Trajectory
from .nn import Adam, ContractError, Mlp, Tensor, as_tensor

log = logging.getLogger(__name__)

CANONICAL_SCHEMA = "natadv.canonical"


def trajectory_features(traj: Trajectory) -> np.ndarray:
    """Per-step observation features the naturalness measures look at."""
    return traj.human_obs


def stack_features(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.concatenate([trajectory_features(t) for t in trajs], axis=0)


@dataclass
class CanonicalDataset:
    trajectories: list[Trajectory]
    movement_std: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.trajectories:
            raise ContractError("canonical dataset must be nonempty")
        dims = {trajectory_features(t).shape[1] for t in self.trajectories}
        if len(dims) != 1:
            raise ContractError("canonical trajectories come from different observation spaces")
        diffs = np.concatenate([np.diff(trajectory_features(t), axis=0) for t in self.trajectories], axis=0)
        self.movement_std = diffs.std(axis=0) if len(diffs) > 1 else np.zeros(dims.pop())

    def __len__(self) -> int:
        return len(self.trajectories)

    def features(self) -> np.ndarray:
        return stack_features(self.trajectories)

    def feature_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean and scale for standardising features; constant dims get scale 1."""
        f = self.features()
        std = f.std(axis=0)
        return f.mean(axis=0), np.where(std > 1e-6, std, 1.0)

    def dumps(self) -> str:
        lines = [json.dumps({"schema": CANONICAL_SCHEMA, **t.to_record()}, sort_keys=True) for t in self.trajectories]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "CanonicalDataset":
        trajs = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.pop("schema", None) != CANONICAL_SCHEMA:
                raise ContractError(f"{path}: not a canonical dataset record")
            trajs.append(Trajectory.from_record(rec))
        return cls(trajs)


# ----------------------------------------------------------------------
# Losses on raw scores
# ----------------------------------------------------------------------


def _wmean(x: Tensor, w: np.ndarray | None) -> Tensor:
    if w is None:
        return x.mean()
    w = np.asarray(w, dtype=np.float64)
    return (x * (w / w.sum())).sum()


def ls_gan_objective(
    adv_scores,
    can_scores,
    *,
    adversarial_target: float = 1.0,
    canonical_target: float = -1.0,
    agent_weight: float = 1.0,
    expert_weight: float = 1.0,
    adv_weights: np.ndarray | None = None,
    can_weights: np.ndarray | None = None,
) -> Tensor:
    """agent_w * E_adv[(D - 1)^2] + expert_w * E_can[(D + 1)^2] with the default targets."""
    a, c = as_tensor(adv_scores), as_tensor(can_scores)
    if a.data.size == 0 or c.data.size == 0:
        raise ContractError("both batches must be nonempty")
    return agent_weight * _wmean((a - adversarial_target).square(), adv_weights) + expert_weight * _wmean(
        (c - canonical_target).square(), can_weights
    )


def kl_logistic_objective(
    adv_scores,
    can_scores,
    *,
    agent_weight: float = 1.0,
    expert_weight: float = 1.0,
    adv_weights: np.ndarray | None = None,
    can_weights: np.ndarray | None = None,
) -> Tensor:
    """E_adv[log(1 + e^-D)] + E_can[log(1 + e^D)]; optimum D = log(p_adv / p_can)."""
    a, c = as_tensor(adv_scores), as_tensor(can_scores)
    if a.data.size == 0 or c.data.size == 0:
        raise ContractError("both batches must be nonempty")
    return agent_weight * _wmean((-a).softplus(), adv_weights) + expert_weight * _wmean(c.softplus(), can_weights)


def optimal_ls_gan_score(p_adv, p_can, agent_weight: float = 1.0, expert_weight: float = 1.0,
                         adversarial_target: float = 1.0, canonical_target: float = -1.0):
    """Pointwise minimiser of the weighted least-squares objective."""
    wa = agent_weight * np.asarray(p_adv, dtype=np.float64)
    we = expert_weight * np.asarray(p_can, dtype=np.float64)
    return (wa * adversarial_target + we * canonical_target) / (wa + we)


# ----------------------------------------------------------------------
# Discriminator
# ----------------------------------------------------------------------


@dataclass
class GanConfig:
    loss_kind: str = "ls_gan"
    canonical_target: float = -1.0
    adversarial_target: float = 1.0
    generator_target: float = 0.0
    noise_std_scale: float = 10.0
    noise_decay: float = 0.98
    grad_penalty_coeff: float = 0.3
    expert_loss_weight: float = 4.0
    agent_loss_weight: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    adam_eps: float = 1e-8
    batch_size: int = 512

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "GanConfig":
        if self.loss_kind not in ("ls_gan", "kl_logistic"):
            raise ConfigError(f"unknown discriminator loss {self.loss_kind!r}")
        if not 0.0 < self.noise_decay <= 1.0:
            raise ConfigError("noise_decay must lie in (0, 1]")
        if self.noise_std_scale < 0 or self.grad_penalty_coeff < 0:
            raise ConfigError("noise scale and gradient penalty must be non-negative")
        if self.expert_loss_weight <= 0 or self.agent_loss_weight <= 0:
            raise ConfigError("loss weights must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict | None) -> "GanConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown gan keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Discriminator:
    """Per-step score network; inputs are standardised so the gradient penalty is scale-free.

    ``feature_std`` is the canonical per-step movement scale that sets the
    instance-noise level; ``feature_mean``/``feature_scale`` standardise inputs.
    """

    def __init__(self, feature_dim: int, config: GanConfig | None = None, seed: int = 0,
                 feature_std: np.ndarray | None = None, feature_mean: np.ndarray | None = None,
                 feature_scale: np.ndarray | None = None):
        self.config = (config or GanConfig()).validate()
        self.net = Mlp([feature_dim, *self.config.hidden, 1], rng=np.random.default_rng(seed))
        self.opt = Adam(self.net.parameters(), lr=self.config.lr, eps=self.config.adam_eps)
        self.feature_std = np.zeros(feature_dim) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
        self.feature_mean = np.zeros(feature_dim) if feature_mean is None else np.asarray(feature_mean, dtype=np.float64)
        self.feature_scale = np.ones(feature_dim) if feature_scale is None else np.asarray(feature_scale, dtype=np.float64)
        if np.any(self.feature_scale <= 0):
            raise ContractError("feature_scale must be positive")
        self.updates = 0
        self._rng = np.random.default_rng([seed, 7])

    @property
    def loss_kind(self) -> str:
        return self.config.loss_kind

    def noise_std(self) -> np.ndarray:
        c = self.config
        return c.noise_std_scale * self.feature_std * c.noise_decay**self.updates

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self.net.predict(self.standardize(features)).reshape(-1)

    def trajectory_scores(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        return np.array([self.scores(trajectory_features(t)).mean() for t in trajs])

    def loss(self, adv_feats: np.ndarray, can_feats: np.ndarray, *, noise: bool = True,
             adv_weights=None, can_weights=None, rng: np.random.Generator | None = None) -> Tensor:
        c = self.config
        rng = rng or self._rng
        if noise:
            std = self.noise_std()
            adv_feats = adv_feats + rng.standard_normal(adv_feats.shape) * std
            can_feats = can_feats + rng.standard_normal(can_feats.shape) * std
        adv_feats, can_feats = self.standardize(adv_feats), self.standardize(can_feats)
        d_adv = self.net.forward(adv_feats).reshape(-1)
        d_can = self.net.forward(can_feats).reshape(-1)
        w = dict(agent_weight=c.agent_loss_weight, expert_weight=c.expert_loss_weight,
                 adv_weights=adv_weights, can_weights=can_weights)
        if c.loss_kind == "ls_gan":
            loss = ls_gan_objective(d_adv, d_can, adversarial_target=c.adversarial_target,
                                    canonical_target=c.canonical_target, **w)
        else:
            loss = kl_logistic_objective(d_adv, d_can, **w)
        if c.grad_penalty_coeff > 0:
            g = self.net.input_gradient(can_feats)
            loss = loss + c.grad_penalty_coeff * g.square().sum(axis=1).mean()
        return loss

    def update(self, adv_feats: np.ndarray, can_feats: np.ndarray, rng: np.random.Generator | None = None,
               adv_weights=None, can_weights=None) -> float:
        """One gradient step on (sub-sampled) adversarial vs canonical features; anneals the input noise."""
        rng = rng or self._rng
        bs = self.config.batch_size
        if adv_weights is None and len(adv_feats) > bs:
            adv_feats = adv_feats[rng.choice(len(adv_feats), bs, replace=False)]
        if can_weights is None and len(can_feats) > bs:
            can_feats = can_feats[rng.choice(len(can_feats), bs, replace=False)]
        loss = self.loss(adv_feats, can_feats, adv_weights=adv_weights, can_weights=can_weights, rng=rng)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.updates += 1
        return loss.item()

    def state(self) -> dict:
        return {
            "kind": "discriminator",
            "config": json.dumps(self.config.to_dict(), sort_keys=True),
            "net": self.net.state(),
            "feature_std": self.feature_std.copy(),
            "feature_mean": self.feature_mean.copy(),
            "feature_scale": self.feature_scale.copy(),
            "updates": self.updates,
        }

    @classmethod
    def from_state(cls, state: dict) -> "Discriminator":
        cfg = GanConfig.from_dict(json.loads(state["config"]))
        d = cls(state["net"]["layer_sizes"][0], cfg, feature_std=state["feature_std"],
                feature_mean=state.get("feature_mean"), feature_scale=state.get("feature_scale"))
        d.net = Mlp.from_state(state["net"])
        d.opt = Adam(d.net.parameters(), lr=cfg.lr, eps=cfg.adam_eps)
        d.updates = int(state["updates"])
        return d


# ----------------------------------------------------------------------
# MMD
# ----------------------------------------------------------------------


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def rbf_kernel(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-_sq_dists(X, Y) / (2.0 * bandwidth**2))


def _ordered(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # fixed operand order keeps mmd2(A, B) and mmd2(B, A) bit-identical
    if (A.shape, A.tobytes()) > (B.shape, B.tobytes()):
        return B, A
    return A, B


def mmd2(A, B, bandwidth: float, unbiased: bool = False) -> float:
    """Squared MMD with an RBF kernel ``exp(-|x-y|^2 / (2 bandwidth^2))``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(A) == 0 or len(B) == 0:
        raise ContractError("mmd2 needs two nonempty sets")
    if bandwidth <= 0:
        raise ContractError("bandwidth must be positive")
    A, B = _ordered(A, B)
    kaa = rbf_kernel(A, A, bandwidth)
    kbb = rbf_kernel(B, B, bandwidth)
    kab = rbf_kernel(A, B, bandwidth)
    if unbiased:
        m, n = len(A), len(B)
        if m < 2 or n < 2:
            raise ContractError("unbiased estimator needs at least two samples per set")
        taa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        tbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        return float(taa + tbb - 2.0 * kab.mean())
    return float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())


def median_bandwidth(X: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_points:
        X = X[np.random.default_rng(seed).choice(len(X), max_points, replace=False)]
    d = _sq_dists(X, X)
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(d[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


@dataclass
class MmdConfig:
    bandwidth: float | None = None  # None -> median heuristic on canonical features
    unbiased: bool = False
    n_bootstrap: int = 20
    reference_points: int = 1000

    @classmethod
    def from_dict(cls, d: dict | None) -> "MmdConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown mmd keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.bandwidth is not None and cfg.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        return cfg


class MmdMetric:
    """Discriminator-free naturalness: exp(-MMD^2 / rho) against the canonical features.

    ``rho`` is the median MMD^2 between random halves of the canonical
    episodes, i.e. the discrepancy canonical data shows against itself.
    """

    loss_kind = "mmd"

    def __init__(self, canonical: CanonicalDataset, config: MmdConfig | None = None, seed: int = 0):
        self.config = config or MmdConfig()
        feats = canonical.features()
        self.bandwidth = self.config.bandwidth or median_bandwidth(feats, seed=seed)
        rng = np.random.default_rng([seed, 3])
        n_ref = min(self.config.reference_points, len(feats))
        self.reference = feats[np.sort(rng.choice(len(feats), n_ref, replace=False))]
        self._ref_self = float(rbf_kernel(self.reference, self.reference, self.bandwidth).mean())
        self.rho = self._calibrate(canonical, rng)

    def _calibrate(self, canonical: CanonicalDataset, rng: np.random.Generator) -> float:
        trajs = canonical.trajectories
        if len(trajs) < 2:
            return 1.0
        vals = []
        for _ in range(self.config.n_bootstrap):
            perm = rng.permutation(len(trajs))
            half = len(trajs) // 2
            a = stack_features([trajs[i] for i in perm[:half]])
            b = stack_features([trajs[i] for i in perm[half:]])
            vals.append(mmd2(a, b, self.bandwidth, self.config.unbiased))
        rho = float(np.median(vals))
        return rho if rho > 0 else 1e-12

    def mmd2_to_canonical(self, feats: np.ndarray) -> float:
        return mmd2(feats, self.reference, self.bandwidth, self.config.unbiased)

    def episode_penalties(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        """Biased MMD^2 of each episode's step features against the canonical reference set."""
        out = np.empty(len(trajs))
        for i, t in enumerate(trajs):
            f = trajectory_features(t)
            kee = rbf_kernel(f, f, self.bandwidth).mean()
            ker = rbf_kernel(f, self.reference, self.bandwidth).mean()
            out[i] = kee + self._ref_self - 2.0 * ker
        return out

    def naturalness(self, trajs: Sequence[Trajectory]) -> float:
        return float(np.exp(-max(self.mmd2_to_canonical(stack_features(trajs)), 0.0) / self.rho))


# ----------------------------------------------------------------------
# Scoring and diagnostics
# ----------------------------------------------------------------------


def fraction_natural(trajectory_scores: Sequence[float]) -> float:
    s = np.asarray(trajectory_scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("no trajectories to score")
    return float(np.mean(s < 0.0))


def naturalness_score(metric, trajectories: Sequence[Trajectory]) -> float:
    """Fraction of trajectories classified canonical, or the MMD similarity in [0, 1]."""
    if isinstance(metric, MmdMetric):
        return metric.naturalness(trajectories)
    return fraction_natural(metric.trajectory_scores(trajectories))


def chi2_estimate(metric, trajectories=None, *, scores=None, weights=None) -> float:
    """Mean squared trajectory score; with an optimal least-squares discriminator this is a chi^2 estimate."""
    if scores is None:
        scores = metric.trajectory_scores(trajectories)
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("no scores")
    if weights is None:
        return float(np.mean(s * s))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sum(w * s * s) / np.sum(w))


def probe_discriminator(disc: Discriminator, canonical: CanonicalDataset, noise_levels: Sequence[float],
                        seed: int = 0) -> list[float]:
    """Accuracy on canonical step features perturbed by ``level * movement_std`` Gaussian noise."""
    feats = canonical.features()
    rng = np.random.default_rng(seed)
    out = []
    for level in noise_levels:
        noised = feats + rng.standard_normal(feats.shape) * (float(level) * canonical.movement_std)
        out.append(float(np.mean(disc.scores(noised) < 0.0)))
    return out


def warn_if_collapsed(disc: Discriminator, canonical_feats: np.ndarray, threshold: float = 0.6) -> float:
    acc = float(np.mean(disc.scores(canonical_feats) < 0.0))
    if acc < threshold:
        warnings.warn(f"discriminator accuracy on canonical data fell to {acc:.2f} (mode collapse?)",
                      RuntimeWarning, stacklevel=2)
    return acc
