"""2D point-mass circle task with a cost boundary.

The agent is rewarded for counter-clockwise circulation near a ring of radius
1.5 and pays a cost of 1 on every step where |x| exceeds ``x_lim``. The ring
crosses the boundary, so reward and cost pull against each other.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

GRID = 16


@dataclass(frozen=True)
class CircleConfig:
    dt: float = 0.1
    drag: float = 0.05
    a_max: float = 1.0
    v_max: float = 2.0
    ring_radius: float = 1.5
    x_lim: float = 1.25
    episode_length: int = 500
    arena: float = 3.0
    reward_scale: float = 0.1
    obs_mode: str = "vector"

    @property
    def obs_dim(self) -> int:
        return 8 if self.obs_mode == "vector" else GRID * GRID


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    step_index: int = 0

    def copy(self):
        return EnvState(self.position.copy(), self.velocity.copy(), self.step_index)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    cost: float
    terminal: int
    info: dict = field(default_factory=dict)


def reward_fn(position, velocity, cfg: CircleConfig) -> float:
    """Signed tangential circulation, damped away from the ring."""
    x, y = position
    vx, vy = velocity
    radius = math.hypot(x, y)
    return float((-y * vx + x * vy) / (1.0 + abs(radius - cfg.ring_radius)) * cfg.reward_scale)


def cost_fn(position, cfg: CircleConfig) -> float:
    return 1.0 if abs(position[0]) > cfg.x_lim else 0.0


def vector_obs(state: EnvState, cfg: CircleConfig) -> np.ndarray:
    x, y = state.position
    vx, vy = state.velocity
    theta = math.atan2(y, x)
    return np.array([x, y, vx, vy, math.cos(theta), math.sin(theta),
                     cfg.x_lim - abs(x), math.hypot(vx, vy)], dtype=np.float32)


def _to_grid(x, y, cfg):
    u = (x + cfg.arena) / (2 * cfg.arena) * GRID
    v = (cfg.arena - y) / (2 * cfg.arena) * GRID
    return u, v


def _background(cfg: CircleConfig) -> np.ndarray:
    img = np.zeros((GRID, GRID), np.float32)
    centers = (np.arange(GRID) + 0.5) / GRID * 2 * cfg.arena - cfg.arena
    xs, ys = np.meshgrid(centers, -centers)
    half = cfg.arena / GRID
    img[np.abs(np.hypot(xs, ys) - cfg.ring_radius) < half] = 0.5
    for xb in (-cfg.x_lim, cfg.x_lim):
        col = int((xb + cfg.arena) / (2 * cfg.arena) * GRID)
        img[:, min(max(col, 0), GRID - 1)] = np.maximum(img[:, min(max(col, 0), GRID - 1)], 0.3)
    return img


_BACKGROUNDS: dict = {}


def render(state: EnvState, cfg: CircleConfig = CircleConfig()) -> np.ndarray:
    """16x16 grayscale grid: ring at 0.5, boundary columns at 0.3, agent as a 2x2 blob at 1.0."""
    key = (cfg.arena, cfg.ring_radius, cfg.x_lim)
    if key not in _BACKGROUNDS:
        _BACKGROUNDS[key] = _background(cfg)
    img = _BACKGROUNDS[key].copy()
    u, v = _to_grid(*state.position, cfg)
    c0 = min(max(int(round(u)) - 1, 0), GRID - 2)
    r0 = min(max(int(round(v)) - 1, 0), GRID - 2)
    img[r0:r0 + 2, c0:c0 + 2] = 1.0
    return img


def observe(state: EnvState, cfg: CircleConfig) -> np.ndarray:
    if cfg.obs_mode == "vector":
        return vector_obs(state, cfg)
    return render(state, cfg).reshape(-1)


def reset(seed: int, cfg: CircleConfig = CircleConfig()) -> tuple[EnvState, np.ndarray]:
    rng = np.random.default_rng(seed)
    state = EnvState(rng.uniform(-0.5, 0.5, size=2), np.zeros(2), 0)
    return state, observe(state, cfg)


def step(state: EnvState, action, cfg: CircleConfig = CircleConfig()) -> tuple[EnvState, StepResult]:
    a = np.asarray(action, dtype=np.float64).reshape(2)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a}")
    if np.any(np.abs(a) > 1.0):
        log.warning("action %s outside [-1, 1]; clamping", a)
        a = np.clip(a, -1.0, 1.0)
    if state.step_index >= cfg.episode_length:
        raise RuntimeError("step() called on a finished episode")
    v = state.velocity * (1.0 - cfg.drag) + a * cfg.a_max * cfg.dt
    speed = math.hypot(*v)
    if speed > cfg.v_max:
        v = v * (cfg.v_max / speed)
    p = state.position + v * cfg.dt
    for i in range(2):
        if abs(p[i]) > cfg.arena:
            p[i] = math.copysign(cfg.arena, p[i])
            v[i] = 0.0
    nxt = EnvState(p, v, state.step_index + 1)
    terminal = int(nxt.step_index == cfg.episode_length)
    result = StepResult(observe(nxt, cfg), reward_fn(p, v, cfg), cost_fn(p, cfg), terminal)
    return nxt, result


def episode_cost(results) -> float:
    return float(sum(r.cost for r in results))


class CircleEnv:
    """Stateful convenience wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, cfg: CircleConfig = CircleConfig()):
        self.cfg = cfg
        self.state: EnvState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(seed, self.cfg)
        return obs

    def step(self, action) -> StepResult:
        self.state, result = step(self.state, action, self.cfg)
        return result


TRAJECTORY_COLUMNS = ["step", "x", "y", "vx", "vy", "ax", "ay", "reward", "cost"]


def dump_trajectory(path, rows, extra_columns=()):
    """Write a debugging CSV. ``rows`` are dicts keyed by TRAJECTORY_COLUMNS (+ extras)."""
    cols = TRAJECTORY_COLUMNS + list(extra_columns)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
