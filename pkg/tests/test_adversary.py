import numpy as np
import pytest

from natadv.adversary import (
    METRICS,
    AdversaryConfig,
    adversary_reward,
    build_metric,
    shaped_rewards,
    train_adversary,
)
from natadv.env import ConfigError, rollout
from natadv.naturalness import Discriminator, MmdMetric
from natadv.rl import TAG_ADV, TAG_EVAL, PpoConfig, derive_seed


def tiny_config(**kw):
    base = dict(lam=1.0, iterations=2, eval_episodes=4, discriminator_updates_per_iter=2,
                ppo=PpoConfig(steps_per_iter=40, epochs_per_iter=1, minibatches=1).to_dict())
    base.update(kw)
    return AdversaryConfig.from_dict(base)


def test_lambda_zero_inverts_reward():
    r = np.array([1.5, -2.0, 0.0])
    np.testing.assert_array_equal(adversary_reward(r, np.array([3.0, -1.0, 9.0]), 0.0), -r)


def test_ls_gan_penalty_arithmetic():
    assert adversary_reward(0.0, 2.0, 0.5, "ls_gan") == pytest.approx(-2.0)
    assert adversary_reward(0.0, 2.0, 0.5, "ls_gan", generator_target=-1.0) == pytest.approx(-4.5)


def test_kl_and_mmd_penalties_linear():
    assert adversary_reward(1.0, 0.25, 2.0, "kl_logistic") == pytest.approx(-1.5)
    assert adversary_reward(1.0, 0.25, 2.0, "mmd") == pytest.approx(-1.5)


def test_large_lambda_penalty_dominates():
    env_r = np.array([-10.0, 10.0])
    out = adversary_reward(env_r, np.array([0.5, -0.5]), 1e6)
    assert np.all(out < 0)
    assert np.all(np.abs(out + 1e6 * 0.25) <= 10.0 + 1e-9)


def test_unknown_metric():
    with pytest.raises(ConfigError):
        adversary_reward(0.0, 0.0, 1.0, "wasserstein")


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(lam=-1.0)
    with pytest.raises(ConfigError):
        tiny_config(iterations=0)
    cfg = tiny_config()
    assert AdversaryConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kind", METRICS)
def test_build_metric_kinds(canonical, kind):
    m = build_metric(canonical, tiny_config(metric_kind=kind))
    assert isinstance(m, MmdMetric if kind == "mmd" else Discriminator)
    if kind != "mmd":
        assert m.loss_kind == kind


def test_lambda_zero_shaped_rewards_equal_inverted_env(canonical, short_env, human, robot):
    cfg = tiny_config(lam=0.0)
    trajs = rollout(short_env, human, robot, 3, seed=0)
    r, _ = shaped_rewards(build_metric(canonical, cfg), trajs, cfg)
    assert r.tobytes() == (-np.stack([t.rewards for t in trajs])).tobytes()


def test_mmd_penalty_constant_within_episode(canonical, short_env, human, robot):
    cfg = tiny_config(metric_kind="mmd")
    trajs = rollout(short_env, human, robot, 3, seed=0)
    _, pen = shaped_rewards(build_metric(canonical, cfg), trajs, cfg)
    assert np.all(pen == pen[:, :1])


@pytest.mark.parametrize("kind", METRICS)
def test_train_adversary_deterministic(canonical, short_env, human, robot, kind):
    cfg = tiny_config(metric_kind=kind)
    a = train_adversary(robot, human, canonical, short_env, cfg, normalization=(0.0, 10.0))
    b = train_adversary(robot, human, canonical, short_env, cfg, normalization=(0.0, 10.0))
    assert a.summary() == b.summary()
    assert a.policy.flat_parameters().tobytes() == b.policy.flat_parameters().tobytes()
    assert 0.0 <= a.naturalness <= 1.0 and 0.0 <= a.adversarialness <= 1.0
    assert len(a.curves) == cfg.iterations and len(a.eval_trajectories) == cfg.eval_episodes


def test_adversary_starts_from_human(canonical, short_env, human, robot):
    cfg = tiny_config(iterations=1, explore_log_std=-0.2)
    res = train_adversary(robot, human, canonical, short_env, cfg, normalization=(0.0, 10.0))
    assert res.policy.mlp.layer_sizes == human.mlp.layer_sizes
    # the human itself is untouched
    assert not np.shares_memory(res.policy.log_std.data, human.log_std.data)
    assert np.all(human.log_std.data == -0.5)


def test_evaluation_seed_disjoint_from_training():
    cfg = tiny_config()
    train = {derive_seed(cfg.seed, TAG_ADV, it + 1) for it in range(120)}
    assert derive_seed(cfg.eval_seed, TAG_EVAL, 7) not in train


def test_collapse_warning(canonical, short_env, human, robot):
    cfg = tiny_config(iterations=3, collapse_threshold=1.01)
    with pytest.warns(RuntimeWarning, match="discriminator accuracy"):
        train_adversary(robot, human, canonical, short_env, cfg, normalization=(0.0, 10.0))
