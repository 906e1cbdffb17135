import numpy as np
import pytest

from natadv.env import CursorAssistConfig, HUMAN_OBS_DIM, ROBOT_OBS_DIM
from natadv.nn import GaussianPolicy, parameter
from natadv.rl import (
    PpoBatch,
    PpoConfig,
    PpoLearner,
    clipped_surrogate,
    compute_gae,
    cooptimize,
    derive_seed,
    evaluate,
    ppo_update,
    train_personalized,
)
from natadv.env import ConfigError


def test_paper_defaults_roundtrip():
    cfg = PpoConfig()
    assert (cfg.clip_eps, cfg.bc_coeff, cfg.rl_coeff, cfg.grad_clip, cfg.value_clip) == (0.3, 1.0, 0.1, 20.0, 10.0)
    assert (cfg.epochs_per_iter, cfg.minibatches, cfg.steps_per_iter) == (30, 20, 4800)
    assert PpoConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("bad", [{"clip_eps": 1.0}, {"gamma": 0.0}, {"minibatches": 0}, {"what": 1}])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        PpoConfig.from_dict(bad)


def test_clipped_ratio_positive_advantage():
    r = parameter(np.array([1.5]))
    out = clipped_surrogate(r, np.array([2.0]), 0.3)
    assert out.data[0] == pytest.approx(1.3 * 2.0)
    out.sum().backward()
    assert r.grad[0] == 0.0


def test_clipped_ratio_negative_advantage_unclipped_side():
    r = parameter(np.array([1.5]))
    out = clipped_surrogate(r, np.array([-1.0]), 0.3)
    assert out.data[0] == pytest.approx(-1.5)


def test_gae_lambda_one_is_discounted_return_minus_baseline():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
    adv, ret = compute_gae(r, v, 0.9, 1.0)
    disc = np.zeros_like(r)
    for t in range(7):
        disc[:, t] = sum(0.9 ** (k - t) * r[:, k] for k in range(t, 7))
    np.testing.assert_allclose(adv, disc - v, atol=1e-12)
    np.testing.assert_allclose(ret, disc, atol=1e-12)


def test_gae_lambda_zero_is_td_error():
    r, v = np.ones((1, 3)), np.array([[0.5, 0.2, 0.1]])
    adv, _ = compute_gae(r, v, 0.5, 0.0)
    np.testing.assert_allclose(adv, [[1 + 0.5 * 0.2 - 0.5, 1 + 0.5 * 0.1 - 0.2, 1 - 0.1]])


def _batch(rng, n=4, t=5, obs_dim=3):
    return PpoBatch(obs=rng.normal(size=(n, t, obs_dim)), actions=rng.normal(size=(n, t, 2)),
                    rewards=rng.normal(size=(n, t)))


def test_ratio_is_one_right_after_sync(monkeypatch):
    import natadv.rl as rl

    seen = []
    orig = rl.clipped_surrogate

    def spy(ratio, adv, eps):
        seen.append(ratio.data.copy())
        return orig(ratio, adv, eps)

    monkeypatch.setattr(rl, "clipped_surrogate", spy)
    pol = GaussianPolicy(3, 2, hidden=(8,), rng=np.random.default_rng(0))
    learner = PpoLearner(pol, PpoConfig(epochs_per_iter=2, minibatches=2, lr=1e-2), seed=0)
    ppo_update(learner, _batch(np.random.default_rng(1)))
    assert np.all(seen[0] == 1.0)
    assert not np.all(seen[-1] == 1.0)


def test_zero_advantages_leave_mean_unchanged():
    pol = GaussianPolicy(3, 2, hidden=(8,), rng=np.random.default_rng(0))
    cfg = PpoConfig(epochs_per_iter=2, minibatches=2, entropy_coeff=0.0, normalize_advantages=False, gamma=1.0,
                    gae_lambda=1.0)
    learner = PpoLearner(pol, cfg, seed=0)
    for p in learner.critic.parameters():
        p.data[:] = 0.0
    before = pol.flat_parameters()
    b = _batch(np.random.default_rng(1))
    b.rewards = np.zeros_like(b.rewards)
    m = ppo_update(learner, b)
    assert m["pg_loss"] == 0.0 and m["bc_loss"] == 0.0
    np.testing.assert_array_equal(before, pol.flat_parameters())


def test_bc_term_only_with_expert():
    rng = np.random.default_rng(0)
    pol = GaussianPolicy(3, 2, hidden=(8,), rng=rng)
    learner = PpoLearner(pol, PpoConfig(epochs_per_iter=1, minibatches=1), seed=0)
    b = _batch(np.random.default_rng(2))
    assert ppo_update(learner, b)["bc_loss"] == 0.0
    b.expert_actions = np.ones_like(b.actions)
    assert ppo_update(learner, b)["bc_loss"] > 0.0


def test_bandit_converges_to_optimum():
    # one-step bandit, reward -(a - 0.7)^2 per action dim: optimum mean action is 0.7
    pol = GaussianPolicy(1, 2, hidden=(8,), rng=np.random.default_rng(0))
    learner = PpoLearner(pol, PpoConfig(epochs_per_iter=4, minibatches=2, lr=3e-3, entropy_coeff=0.0), seed=0)
    rng = np.random.default_rng(1)
    obs = np.ones((64, 1, 1))
    for _ in range(500):
        a = pol.act(obs[:, 0], rng.standard_normal((64, 2)))
        r = -((a - 0.7) ** 2).sum(axis=1, keepdims=True)
        ppo_update(learner, PpoBatch(obs=obs, actions=a[:, None, :], rewards=r))
    np.testing.assert_allclose(pol.act(np.ones((1, 1)))[0], [0.7, 0.7], atol=0.05)


def test_cooptimize_seed_sensitivity_and_determinism():
    env = CursorAssistConfig(horizon=10)
    cfg = PpoConfig(steps_per_iter=40, epochs_per_iter=1, minibatches=1)
    a = cooptimize(env, 0, 2, cfg)
    b = cooptimize(env, 1, 2, cfg)
    c = cooptimize(env, 0, 2, cfg)
    assert np.linalg.norm(a.human_policy.flat_parameters() - b.human_policy.flat_parameters()) > 0
    assert a.human_policy.flat_parameters().tobytes() == c.human_policy.flat_parameters().tobytes()
    assert [h["return"] for h in a.history] == [h["return"] for h in c.history]


def test_train_personalized_resumes_given_robot():
    env = CursorAssistConfig(horizon=10)
    cfg = PpoConfig(steps_per_iter=40, epochs_per_iter=1, minibatches=1)
    human = GaussianPolicy(HUMAN_OBS_DIM, 2, hidden=(8,), rng=np.random.default_rng(0))
    start = GaussianPolicy(ROBOT_OBS_DIM, 2, hidden=(8,), rng=np.random.default_rng(1))
    robot, hist = train_personalized(human, env, cfg, seed=0, iterations=2, robot=start.copy())
    assert len(hist) == 2 and all(h["bc_loss"] == 0.0 for h in hist)
    assert robot.mlp.layer_sizes == start.mlp.layer_sizes
    assert not np.array_equal(robot.flat_parameters(), start.flat_parameters())


def test_derive_seed_separates_streams():
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert derive_seed(3, 4, 5) == derive_seed(3, 4, 5)


def _smooth(x, w=20):
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, np.ones(w) / w, mode="valid")


@pytest.fixture(scope="module")
def robot_runs(workflow):
    """Desk-preset personalised robots for three seeds, with and without the expert."""
    cfg, iters = workflow.cfg.ppo, workflow.cfg.raw["robot"]["iterations"]
    out = {}
    for seed in (0, 1, 2):
        for use_expert in (True, False):
            expert = workflow.coop_robot if use_expert else None
            robot, hist = train_personalized(workflow.human, workflow.cfg.env, cfg, expert, seed=seed, iterations=iters)
            ev = evaluate(workflow.cfg.env, workflow.human, robot, 100, seed)
            out[seed, use_expert] = (ev["success"], hist)
    return out


def test_expert_helps_personalised_robot(robot_runs):
    with_e = [robot_runs[s, True][0] for s in (0, 1, 2)]
    without = [robot_runs[s, False][0] for s in (0, 1, 2)]
    assert np.mean(with_e) >= np.mean(without)


def test_training_return_monotone_after_smoothing(robot_runs):
    # nondecreasing up to a noise allowance of 5% of the curve's own range
    for seed in (0, 1, 2):
        sm = _smooth([h["return"] for h in robot_runs[seed, True][1]])
        tol = 0.05 * (sm.max() - sm.min())
        drawdown = np.max(np.maximum.accumulate(sm) - sm)
        assert drawdown <= tol, (seed, drawdown, tol)
        assert sm[-1] > sm[0]
