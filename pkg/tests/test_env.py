import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from natadv.env import (
    HUMAN_OBS_DIM,
    ROBOT_OBS_DIM,
    ConfigError,
    CursorAssistConfig,
    CursorAssistState,
    Trajectory,
    observe,
    reset,
    reward_fn,
    rollout,
    step,
)
from natadv.nn import ContractError, GaussianPolicy

from conftest import ConstantPolicy


def _state(cfg, avatar, effector, goal_index=0, step_=0):
    return CursorAssistState(np.array(avatar, float), np.array(effector, float), goal_index, cfg.goal_offsets, step_)


def test_reset_is_deterministic(env_cfg):
    a, b = reset(env_cfg, 7), reset(env_cfg, 7)
    assert a.goal_index == b.goal_index
    np.testing.assert_array_equal(a.human_avatar, b.human_avatar)
    np.testing.assert_array_equal(a.robot_effector, b.robot_effector)
    assert a.goal_index in (0, 1)


def test_goal_frequency_binomial_bound(env_cfg):
    # 1000 fair draws: P(|freq - 0.5| > 0.05) is about 0.0016
    zeros = sum(reset(env_cfg, s).goal_index == 0 for s in range(1000))
    assert 0.45 <= zeros / 1000 <= 0.55


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        reset(CursorAssistConfig(horizon=0), 0)
    with pytest.raises(ConfigError):
        CursorAssistConfig.from_dict({"no_such_key": 1})


def test_spec_invariants(env_cfg):
    spec = env_cfg.spec
    assert spec.horizon > 0 and min(spec.state_dim, spec.human_obs_dim, spec.robot_obs_dim) > 0
    assert spec.reward_range_hint[0] < spec.reward_range_hint[1]


def test_reward_contact_case(env_cfg):
    s = reset(env_cfg, 0)
    s.robot_effector = s.goal_point.copy()
    _, r = step(env_cfg, s, np.zeros(2), np.zeros(2))
    assert r == pytest.approx(10.0, abs=1e-12)


def test_reward_linear_distance(env_cfg):
    s = reset(env_cfg, 0)
    goal = s.goal_point
    s.robot_effector = goal + np.array([0.0, 0.3])
    _, r = step(env_cfg, s, np.zeros(2), np.zeros(2))
    assert r == pytest.approx(-0.3, abs=1e-12)


def test_reward_body_penalty(env_cfg):
    avatar = np.array([0.5, 0.35])
    goal = avatar + np.asarray(env_cfg.goal_offsets[0])
    r = float(reward_fn(env_cfg, avatar, avatar, goal))
    assert r == pytest.approx(-20.0 - np.linalg.norm(avatar - goal), abs=1e-12)


def test_actions_clamped_and_positions_boxed(env_cfg):
    s = _state(env_cfg, [0.99, 0.01], [0.0, 1.0])
    s2, _ = step(env_cfg, s, np.array([5.0, -5.0]), np.array([-1.0, 1.0]))
    np.testing.assert_allclose(s2.human_avatar, [1.0, 0.0])
    np.testing.assert_allclose(s2.robot_effector, [0.0, 1.0])
    s3, _ = step(env_cfg, _state(env_cfg, [0.5, 0.5], [0.5, 0.5]), np.array([1.0, 1.0]), np.zeros(2))
    np.testing.assert_allclose(s3.human_avatar, [0.55, 0.55])


def test_observation_hiding(env_cfg):
    a = _state(env_cfg, [0.3, 0.4], [0.6, 0.7], goal_index=0, step_=3)
    b = _state(env_cfg, [0.3, 0.4], [0.6, 0.7], goal_index=1, step_=3)
    oh_a, or_a = observe(env_cfg, a)
    oh_b, or_b = observe(env_cfg, b)
    assert len(oh_a) == len(or_a) + 2
    np.testing.assert_array_equal(or_a, or_b)
    diff = np.flatnonzero(oh_a != oh_b)
    np.testing.assert_array_equal(diff, [len(or_a), len(or_a) + 1])


def test_rollout_deterministic(env_cfg, human, robot):
    a = rollout(env_cfg, human, robot, 4, seed=11)
    b = rollout(env_cfg, human, robot, 4, seed=11)
    for x, y in zip(a, b):
        for f in ("human_obs", "robot_obs", "human_actions", "robot_actions", "rewards"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()
    c = rollout(env_cfg, human, robot, 4, seed=12)
    assert any(not np.array_equal(x.rewards, y.rewards) for x, y in zip(a, c))


def test_rollout_static_closed_form(env_cfg):
    trajs = rollout(env_cfg, ConstantPolicy(HUMAN_OBS_DIM), ConstantPolicy(ROBOT_OBS_DIM), 6, seed=3)
    for t in trajs:
        goal = np.asarray(env_cfg.human_start) + np.asarray(env_cfg.goal_offsets[t.goal_index])
        d0 = np.linalg.norm(np.asarray(env_cfg.robot_start) - goal)
        assert t.total_return == pytest.approx(-env_cfg.w_dist * d0 * env_cfg.horizon, rel=1e-12)
        assert not t.success


def test_rollout_dimension_mismatch(env_cfg, human):
    wrong = GaussianPolicy(ROBOT_OBS_DIM + 1, 2, hidden=(4,))
    with pytest.raises(ContractError):
        rollout(env_cfg, human, wrong, 1, seed=0)


def test_success_needs_contact_streak():
    cfg = CursorAssistConfig(horizon=30, success_streak=5)
    # robot heads straight for the goal of index 0 and parks there
    class Seeker:
        obs_dim, act_dim = ROBOT_OBS_DIM, 2

        def act(self, obs, noise=None):
            goal = obs[:, :2] + np.asarray(cfg.goal_offsets[0])
            return np.clip((goal - obs[:, 2:4]) / cfg.a_max, -1, 1)

    trajs = rollout(cfg, ConstantPolicy(HUMAN_OBS_DIM), Seeker(), 20, seed=0)
    for t in trajs:
        assert t.success == (t.goal_index == 0)


def test_trajectory_record_roundtrip(env_cfg, human, robot):
    t = rollout(env_cfg, human, robot, 1, seed=0)[0]
    back = Trajectory.from_record(t.to_record())
    np.testing.assert_array_equal(back.human_obs, t.human_obs)
    np.testing.assert_array_equal(back.rewards, t.rewards)
    assert back.success == t.success and back.goal_index == t.goal_index


@given(
    st.lists(st.floats(0, 1), min_size=2, max_size=2),
    st.lists(st.floats(0, 1), min_size=2, max_size=2),
    st.integers(0, 1),
)
def test_reward_bounded(avatar, effector, g):
    cfg = CursorAssistConfig()
    goal = np.asarray(avatar) + np.asarray(cfg.goal_offsets[g])
    r = float(reward_fn(cfg, np.asarray(effector), np.asarray(avatar), goal))
    assert -cfg.r_body - cfg.w_dist * math.sqrt(2) - 1e-12 <= r <= cfg.r_contact


@given(st.integers(0, 2**31 - 1))
def test_robot_obs_independent_of_goal(seed):
    cfg = CursorAssistConfig()
    s = reset(cfg, seed)
    other = CursorAssistState(s.human_avatar, s.robot_effector, 1 - s.goal_index, s.goal_offsets)
    np.testing.assert_array_equal(observe(cfg, s)[1], observe(cfg, other)[1])


def test_contact_streak_bounded_by_step(env_cfg):
    s = reset(env_cfg, 0)
    s.robot_effector = s.goal_point.copy()
    for _ in range(5):
        s, _ = step(env_cfg, s, np.zeros(2), np.zeros(2))
        assert s.contact_streak <= s.step
    assert s.contact_streak == 5
