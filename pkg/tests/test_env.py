import csv
import math

import numpy as np
import pytest

from safeplan import env as circle
from safeplan.env import CircleConfig, EnvState

CFG = CircleConfig()


def state(x, y, vx=0.0, vy=0.0, t=0):
    return EnvState(np.array([x, y], float), np.array([vx, vy], float), t)


def test_reset_is_deterministic_and_supported():
    s1, o1 = circle.reset(7)
    s2, o2 = circle.reset(7)
    assert o1.tobytes() == o2.tobytes()
    assert not np.array_equal(circle.reset(8)[0].position, s1.position)
    for seed in range(1000):
        s, _ = circle.reset(seed)
        assert np.all(np.abs(s.position) <= 0.5)
        assert np.all(s.velocity == 0.0) and s.step_index == 0


@pytest.mark.parametrize("action", [(0, 0), (1, 1), (-1, 0.5)])
def test_outside_boundary_costs_one(action):
    _, res = circle.step(state(CFG.x_lim + 0.1, 0.0), action)
    assert res.cost == 1.0


def test_origin_at_rest_is_free():
    _, res = circle.step(state(0.0, 0.0), (0.0, 0.0))
    assert res.reward == 0.0 and res.cost == 0.0


def test_reward_hand_evaluated_on_ring():
    # direct formula at p = (1.5, 0), v = (0, 1): (0 + 1.5 * 1) / (1 + 0) * 0.1
    assert circle.reward_fn((1.5, 0.0), (0.0, 1.0), CFG) == pytest.approx(0.15)
    # one step with zero action: v = (0, 0.95), p = (1.5, 0.095)
    # radius = sqrt(2.25 + 0.009025) = 1.5030049..., reward = 1.425 / 1.0030049 * 0.1
    nxt, res = circle.step(state(1.5, 0.0, 0.0, 1.0), (0.0, 0.0))
    np.testing.assert_allclose(nxt.velocity, [0.0, 0.95])
    np.testing.assert_allclose(nxt.position, [1.5, 0.095])
    assert res.reward == pytest.approx(1.425 / (1.0 + (math.sqrt(2.259025) - 1.5)) * 0.1, abs=1e-12)
    assert res.cost == 1.0  # the ring at x = 1.5 lies outside the boundary


def test_semi_implicit_euler_update():
    nxt, _ = circle.step(state(0.2, -0.1, 0.5, 0.3), (0.4, -1.0))
    v = np.array([0.5, 0.3]) * 0.95 + np.array([0.4, -1.0]) * 0.1
    np.testing.assert_allclose(nxt.velocity, v)
    np.testing.assert_allclose(nxt.position, np.array([0.2, -0.1]) + v * 0.1)


def test_speed_is_bounded():
    s = state(0.0, 0.0, 1.99, 0.1)
    for _ in range(200):
        s, _ = circle.step(s, (1.0, 1.0))
        assert math.hypot(*s.velocity) <= CFG.v_max + 1e-12


def test_walls_clamp_and_zero_normal_velocity():
    nxt, _ = circle.step(state(2.99, 0.0, 1.5, 0.5), (1.0, 0.0))
    assert nxt.position[0] == 3.0 and nxt.velocity[0] == 0.0 and nxt.velocity[1] != 0.0


def test_cost_depends_only_on_x():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        s = state(*rng.uniform(-3, 3, 2), *rng.uniform(-1, 1, 2))
        nxt, res = circle.step(s, rng.uniform(-1, 1, 2))
        assert res.cost == float(abs(nxt.position[0]) > CFG.x_lim)


def test_reflection_negates_reward():
    rng = np.random.default_rng(1)
    for _ in range(500):
        x, y, vx, vy = rng.uniform(-2, 2, 4)
        a = rng.uniform(-1, 1, 2)
        _, r1 = circle.step(state(x, y, vx, vy), a)
        _, r2 = circle.step(state(x, -y, vx, -vy), (a[0], -a[1]))
        assert r1.reward == pytest.approx(-r2.reward, abs=1e-12)


def test_terminal_only_at_episode_length():
    cfg = CircleConfig(episode_length=20)
    s, _ = circle.reset(0, cfg)
    flags = []
    for _ in range(20):
        s, res = circle.step(s, (0.1, 0.1), cfg)
        flags.append(res.terminal)
    assert flags == [0] * 19 + [1]
    with pytest.raises(RuntimeError):
        circle.step(s, (0.0, 0.0), cfg)


def test_action_validation(caplog):
    with pytest.raises(ValueError):
        circle.step(state(0, 0), (np.nan, 0.0))
    with caplog.at_level("WARNING"):
        nxt, _ = circle.step(state(0, 0), (5.0, 0.0))
    assert "clamping" in caplog.text
    assert nxt.velocity[0] == pytest.approx(0.1)


def test_full_determinism():
    def run():
        s, _ = circle.reset(3)
        acts = np.random.default_rng(4).uniform(-1, 1, (300, 2))
        out = []
        for a in acts:
            s, res = circle.step(s, a)
            out.append(np.concatenate([s.position, s.velocity, [res.reward, res.cost]]))
        return np.array(out)
    assert run().tobytes() == run().tobytes()


def test_vector_observation_layout():
    s = state(1.0, 1.0, 0.3, -0.4)
    o = circle.vector_obs(s, CFG)
    assert o.shape == (8,) and o.dtype == np.float32
    np.testing.assert_allclose(o, [1, 1, 0.3, -0.4, math.sqrt(0.5), math.sqrt(0.5), 0.25, 0.5], atol=1e-6)


def test_render_properties():
    img = circle.render(state(0.0, 0.0))
    assert img.shape == (16, 16) and img.min() >= 0.0 and img.max() <= 1.0
    assert np.all(img[7:9, 7:9] == 1.0)
    assert np.array_equal(img, circle.render(state(0.0, 0.0)))
    corner = circle.render(state(3.0, 3.0))
    assert np.all(corner[0:2, 14:16] == 1.0)
    assert np.isclose(img, 0.5).any() and np.isclose(img, 0.3).any()


def test_image_mode_observation():
    cfg = CircleConfig(obs_mode="image")
    _, obs = circle.reset(0, cfg)
    assert obs.shape == (256,) and cfg.obs_dim == 256


def test_episode_cost_counts():
    R = circle.StepResult
    assert circle.episode_cost([R(None, 0.0, 0.0, 0)] * 500) == 0
    assert circle.episode_cost([R(None, 0.0, 1.0, 0)] * 30 + [R(None, 0.0, 0.0, 0)] * 470) == 30
    s, _ = circle.reset(5)
    results = []
    rng = np.random.default_rng(5)
    for _ in range(500):
        s, res = circle.step(s, rng.uniform(-1, 1, 2))
        results.append(res)
    recount = sum(1 for r in results if r.cost == 1.0)
    assert circle.episode_cost(results) == recount


def test_trajectory_dump_header(tmp_path):
    path = tmp_path / "t.csv"
    circle.dump_trajectory(path, [{"step": 0, "x": 1, "y": 2, "vx": 0, "vy": 0, "ax": 0, "ay": 0,
                                   "reward": 0.5, "cost": 0}])
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "x", "y", "vx", "vy", "ax", "ay", "reward", "cost"]
    assert len(rows) == 2
