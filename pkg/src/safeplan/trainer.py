"""Interleaved collect/train loop, evaluation, metrics and checkpoints."""
from __future__ import annotations

import csv
import logging
import pickle
import time
from pathlib import Path

import numpy as np

from safeplan import env as circle
from safeplan import lagrangian
from safeplan.buffer import ReplayBuffer
from safeplan.config import TrainConfig, dump_config
from safeplan.discriminator import DiscBatch, Discriminator
from safeplan.distributions import DiagGaussian
from safeplan.errors import CheckpointFormatError, NumericError, ShapeError
from safeplan.nn import autodiff as ad
from safeplan.nn.autodiff import Graph, Tensor
from safeplan.nn.checkpoint import read_tensors, write_tensors
from safeplan.nn.optim import clip_by_global_norm, opt_step
from safeplan.planner import plan_action, planner_budget
from safeplan.policy import (
    COST_CRITIC,
    CONTROL,
    REWARD_CRITIC,
    SAFE,
    Actor,
    Critic,
    control_actor_loss,
    critic_loss,
    lambda_targets,
    rollout,
    safe_actor_loss,
)
from safeplan.world_model import LatentState, WorldModel

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "env_step", "episode_return", "episode_cost", "lambda_p", "C_k",
    "wm_recon", "wm_reward", "wm_cost", "wm_kl",
    "actor_c_loss", "actor_s_loss", "critic_r_loss", "critic_c_loss", "disc_loss",
    "chose_safe_rate", "wallclock_s",
]


class Agent:
    """World model plus the five trainable policy heads (and target critics)."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        wc, pc = cfg.wm, cfg.policy
        self.wm = WorldModel(wc, rng)
        self.actor_c = Actor(CONTROL, wc.feat_dim, wc.act_dim, pc, rng)
        self.actor_s = Actor(SAFE, wc.feat_dim, wc.act_dim, pc, rng)
        self.critic_r = Critic(REWARD_CRITIC, wc.feat_dim, pc, rng)
        self.critic_c = Critic(COST_CRITIC, wc.feat_dim, pc, rng)
        self.target_r = Critic(REWARD_CRITIC + "_target", wc.feat_dim, pc, rng)
        self.target_c = Critic(COST_CRITIC + "_target", wc.feat_dim, pc, rng)
        self.disc = Discriminator(wc.feat_dim, wc.act_dim, cfg.disc, rng)
        self.sync_targets()

    def sync_targets(self):
        self.target_r.params.copy_from(self.critic_r.params, lambda n: n.replace("_target", "", 1))
        self.target_c.params.copy_from(self.critic_c.params, lambda n: n.replace("_target", "", 1))

    def paramsets(self) -> dict:
        return {
            "wm": self.wm.params, CONTROL: self.actor_c.params, SAFE: self.actor_s.params,
            REWARD_CRITIC: self.critic_r.params, COST_CRITIC: self.critic_c.params,
            REWARD_CRITIC + "_target": self.target_r.params, COST_CRITIC + "_target": self.target_c.params,
            "disc": self.disc.params,
        }

    def entries(self) -> dict:
        out = {}
        for prefix, ps in self.paramsets().items():
            out.update(ps.state())
            out[f"{prefix}.step"] = np.asarray(ps.step, np.float32)
        return out

    def load_entries(self, entries: dict):
        try:
            for prefix, ps in self.paramsets().items():
                ps.load_state(entries, _scalar(entries[f"{prefix}.step"]))
        except KeyError as e:
            raise CheckpointFormatError(f"checkpoint is missing entry {e}") from e
        except ShapeError as e:
            raise CheckpointFormatError(f"checkpoint does not match the configured model: {e}") from e

    def fingerprint(self) -> str:
        return "".join(ps.fingerprint()[:16] for ps in self.paramsets().values())


def _scalar(arr) -> int:
    return int(np.asarray(arr).reshape(-1)[0])


def _update(ps, loss: Tensor, graph: Graph, lr: float, clip: float, phase: str) -> float:
    try:
        grads = ad.grad(loss, graph, ps.params)
    except NumericError as e:
        raise NumericError(f"[{phase}] {e}", op=e.op) from e
    grads, _ = clip_by_global_norm(grads, clip)
    opt_step(ps, grads, lr)
    return float(loss.data)


def _flatten_states(post: LatentState, limit: int, rng) -> LatentState:
    h = post.h.data.reshape(-1, post.h.shape[-1])
    z = post.z.data.reshape(-1, post.z.shape[-1])
    m = post.dist.mean.data.reshape(z.shape)
    s = post.dist.std.data.reshape(z.shape)
    if limit and limit < h.shape[0]:
        idx = np.sort(rng.choice(h.shape[0], size=limit, replace=False))
        h, z, m, s = h[idx], z[idx], m[idx], s[idx]
    return LatentState(Tensor(h), Tensor(z), DiagGaussian(Tensor(m), Tensor(s)))


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.output_dir)
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng, self.train_rng, self.act_rng, env_rng = (np.random.default_rng(s) for s in seeds)
        self.agent = Agent(cfg, init_rng)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.lagrange = lagrangian.LagrangeState(
            multiplier=cfg.lagrange.init, alpha=cfg.lagrange.alpha, budget=cfg.budget,
            lam_min=cfg.lagrange.lam_min, lam_max=cfg.lagrange.lam_max, window=cfg.lagrange.window,
            episode_length=cfg.env.episode_length, paper_sign=cfg.lagrange.paper_sign,
        )
        self.b_s = planner_budget(cfg.budget, cfg.plan_horizon, cfg.env.episode_length, cfg.bs_scale)
        self.env_seed_base = int(env_rng.integers(0, 2**31 - 1))
        self.env_step = 0
        self.grad_steps = 0
        self.episode_index = 0
        self.wallclock = 0.0
        self._clock_mark = None
        self.metrics_rows: list[dict] = []
        self.last_losses: dict = {}
        self._csv_written = 0
        self._start_episode()

    # -- environment interaction -------------------------------------------
    @property
    def trained(self) -> bool:
        return self.grad_steps > 0

    def _start_episode(self):
        seed = self.env_seed_base + self.episode_index
        self.env_state, obs = circle.reset(seed, self.cfg.env)
        self.latent = self.agent.wm.initial_state(1)
        self.prev_action = np.zeros((1, self.cfg.wm.act_dim), np.float32)
        self.episode = {"obs": [obs], "actions": [self.prev_action[0].copy()], "rewards": [0.0],
                        "costs": [circle.cost_fn(self.env_state.position, self.cfg.env)], "terminals": [0.0]}
        self.ep_return = 0.0
        self.ep_cost = 0.0
        self.ep_safe = 0
        self._observe(obs)

    def _observe(self, obs):
        self.latent, _ = self.agent.wm.observe_step(self.latent, self.prev_action, obs[None], self.act_rng)

    def collect_step(self):
        """Plan, act, and record one transition; flush the episode at its end."""
        cfg = self.cfg
        warmup = not self.trained
        action, diag = plan_action(self.latent, self.agent.wm, self.agent.actor_c, self.agent.actor_s,
                                   cfg.plan_horizon, self.b_s, self.act_rng, mode="sample", force_control=warmup)
        action = action.reshape(1, -1)
        if warmup and cfg.prefill_noise > 0:
            action = np.clip(action + self.act_rng.normal(0.0, cfg.prefill_noise, action.shape), -1.0, 1.0)
        action = action.astype(np.float32)
        self.env_state, res = circle.step(self.env_state, action[0], cfg.env)
        self.env_step += 1
        self.ep_return += res.reward
        self.ep_cost += res.cost
        self.ep_safe += diag.chose_safe
        lagrangian.record_cost(self.lagrange, res.cost)
        ep = self.episode
        ep["obs"].append(res.observation)
        ep["actions"].append(action[0])
        ep["rewards"].append(res.reward)
        ep["costs"].append(res.cost)
        ep["terminals"].append(float(res.terminal))
        self.prev_action = action
        if res.terminal:
            self._finish_episode()
        else:
            self._observe(res.observation)
        return res, diag

    def _finish_episode(self):
        steps = len(self.episode["rewards"]) - 1
        self.buffer.add_episode({k: np.asarray(v, np.float32) for k, v in self.episode.items()})
        row = {
            "env_step": self.env_step, "episode_return": self.ep_return, "episode_cost": self.ep_cost,
            "lambda_p": self.lagrange.multiplier, "C_k": lagrangian.mean_cost(self.lagrange),
            "chose_safe_rate": self.ep_safe / steps,
        }
        self._emit(row)
        log.info("episode %d step %d return %.2f cost %.0f safe %.2f lambda %.3f",
                 self.episode_index, self.env_step, self.ep_return, self.ep_cost,
                 self.ep_safe / steps, self.lagrange.multiplier)
        self.episode_index += 1
        self.flush_metrics()
        self._start_episode()

    # -- training ------------------------------------------------------------
    def train_step(self) -> dict:
        """World model, control actor + reward critic, safe actor + cost critic, discriminator, multiplier."""
        cfg, ag, rng = self.cfg, self.agent, self.train_rng
        pc, phases = cfg.policy, cfg.phases
        out = {}

        batch = self.buffer.sample_sequences(cfg.batch, cfg.seq_len, rng)
        res = ag.wm.world_loss(batch, rng)
        if "wm" in phases:
            _update(ag.wm.params, res.loss, res.graph, cfg.wm.lr, cfg.wm.grad_clip, "world_model")
        b = res.breakdown
        out.update(wm_recon=b.recon, wm_reward=b.reward, wm_cost=b.cost, wm_kl=b.kl_raw, wm_total=b.total)
        del res.graph

        if phases & {"control", "safe", "disc"}:
            start = _flatten_states(res.posterior, cfg.imag_starts, rng)
            wm_frozen = ag.wm.params.frozen()

        if "control" in phases:
            g = Graph()
            with g:
                traj = rollout(ag.actor_c, ag.wm, start, pc.horizon, rng, wm_frozen, gamma=pc.gamma, heads=("reward",),
                               critics={"reward": (ag.target_r, ag.target_r.params.frozen())})
                targets = lambda_targets(traj.rewards, traj.discounts, traj.reward_values, pc.lam)
                loss = control_actor_loss(traj, targets, pc.eta)
            out["actor_c_loss"] = _update(ag.actor_c.params, loss, g, pc.actor_lr, pc.grad_clip, "control_actor")
            g = Graph()
            with g:
                loss = critic_loss(ag.critic_r, traj.feats[:-1], targets)
            out["critic_r_loss"] = _update(ag.critic_r.params, loss, g, pc.critic_lr, pc.grad_clip, "reward_critic")

        if phases & {"safe", "disc"}:
            g = Graph()
            with g:
                traj = rollout(ag.actor_s, ag.wm, start, pc.horizon, rng, wm_frozen, gamma=pc.gamma, heads=("cost",),
                               critics={"cost": (ag.target_c, ag.target_c.params.frozen())})
                ctargets = lambda_targets(traj.costs, traj.discounts, traj.cost_values, pc.lam)
                scores = ag.disc.clone_signal(traj.feats[:-1], traj.actions)
                loss = safe_actor_loss(traj, ctargets, self.lagrange.multiplier, scores, pc.eta)
            if "safe" in phases:
                out["actor_s_loss"] = _update(ag.actor_s.params, loss, g, pc.actor_lr, pc.grad_clip, "safe_actor")
                g = Graph()
                with g:
                    loss = critic_loss(ag.critic_c, traj.feats[:-1], ctargets)
                out["critic_c_loss"] = _update(ag.critic_c.params, loss, g, pc.critic_lr, pc.grad_clip, "cost_critic")
            out["imag_cost"] = float(ctargets.values.data.mean())

        if "disc" in phases:
            feats = traj.feats.data[:-1]
            control_actions = ag.actor_c.dist(Tensor(feats)).sample(rng).data
            dbatch = DiscBatch(feats, control_actions, traj.actions.data)
            g = Graph()
            with g:
                loss = ag.disc.train_loss(dbatch)
            out["disc_loss"] = _update(ag.disc.params, loss, g, cfg.disc.lr, cfg.disc.grad_clip, "discriminator")

        if "lagrange" in phases and self.lagrange.costs:
            lagrangian.update_multiplier(self.lagrange)

        self.grad_steps += 1
        if self.grad_steps % pc.target_every == 0:
            ag.sync_targets()
        self.last_losses = out
        if self.grad_steps % cfg.log_every == 0:
            row = {"env_step": self.env_step, "lambda_p": self.lagrange.multiplier,
                   "C_k": lagrangian.mean_cost(self.lagrange) if self.lagrange.costs else ""}
            row.update({k: v for k, v in out.items() if k in METRIC_COLUMNS})
            self._emit(row)
        return out

    def run(self, total_steps=None, until=None):
        """Collect until ``env_step`` reaches ``until`` (default: config total)."""
        cfg = self.cfg
        target = until if until is not None else (total_steps if total_steps is not None else cfg.total_steps)
        self._clock_mark = time.perf_counter()
        try:
            while self.env_step < target:
                self.collect_step()
                if self.env_step >= cfg.prefill and self.env_step % cfg.train_every == 0 and len(self.buffer):
                    self.train_step()
                if cfg.checkpoint_every and self.env_step % cfg.checkpoint_every == 0:
                    self._tick()
                    self.save(self.out_dir / "checkpoint")
                    self.flush_metrics()
        finally:
            self._tick()
            self._clock_mark = None
        self.flush_metrics()

    def _tick(self):
        """Fold time elapsed inside ``run`` into the wallclock counter."""
        if self._clock_mark is not None:
            now = time.perf_counter()
            self.wallclock += now - self._clock_mark
            self._clock_mark = now

    # -- metrics ---------------------------------------------------------------
    def _emit(self, row: dict):
        full = {k: "" for k in METRIC_COLUMNS}
        full.update(row)
        self._tick()
        full["wallclock_s"] = round(self.wallclock, 3)
        self.metrics_rows.append(full)

    def flush_metrics(self, path=None):
        """Append rows not yet written to the metrics CSV (header written once)."""
        path = Path(path or self.out_dir / "metrics.csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        new = self.metrics_rows[self._csv_written:]
        write_header = not path.exists() or self._csv_written == 0
        with open(path, "w" if write_header else "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            if write_header:
                w.writeheader()
                new = self.metrics_rows
            for r in new:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        self._csv_written = len(self.metrics_rows)
        return path

    # -- checkpoints -----------------------------------------------------------
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensors(d / "params.nmdr", self.agent.entries())
        latent = (self.latent.h.data, self.latent.z.data, self.latent.dist.mean.data, self.latent.dist.std.data)
        state = {
            "config": self.cfg, "buffer": self.buffer, "lagrange": self.lagrange,
            "rngs": [r.bit_generator.state for r in (self.train_rng, self.act_rng)],
            "env_seed_base": self.env_seed_base, "env_step": self.env_step, "grad_steps": self.grad_steps,
            "episode_index": self.episode_index, "wallclock": self.wallclock,
            "env_state": self.env_state, "latent": latent, "prev_action": self.prev_action,
            "episode": self.episode, "ep_stats": (self.ep_return, self.ep_cost, self.ep_safe),
            "metrics_rows": self.metrics_rows,
        }
        with open(d / "trainer_state.pkl", "wb") as f:
            pickle.dump(state, f)
        (d / "config.cfg").write_text(dump_config(self.cfg))
        return d

    @classmethod
    def load(cls, directory, out_dir=None) -> "Trainer":
        d = Path(directory)
        try:
            with open(d / "trainer_state.pkl", "rb") as f:
                state = pickle.load(f)
        except (OSError, pickle.UnpicklingError) as e:
            raise CheckpointFormatError(f"cannot read trainer state in {d}: {e}") from e
        tr = cls(state["config"], out_dir)
        tr.agent.load_entries(read_tensors(d / "params.nmdr"))
        tr.buffer = state["buffer"]
        tr.lagrange = state["lagrange"]
        for r, s in zip((tr.train_rng, tr.act_rng), state["rngs"]):
            r.bit_generator.state = s
        for k in ("env_seed_base", "env_step", "grad_steps", "episode_index", "wallclock",
                  "env_state", "prev_action", "episode", "metrics_rows"):
            setattr(tr, k, state[k])
        tr.ep_return, tr.ep_cost, tr.ep_safe = state["ep_stats"]
        h, z, m, s = state["latent"]
        tr.latent = LatentState(Tensor(h), Tensor(z), DiagGaussian(Tensor(m), Tensor(s)))
        tr._csv_written = 0
        return tr


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def load_agent(directory, cfg: TrainConfig | None = None) -> tuple[Agent, TrainConfig]:
    """Agent parameters (and config) from a checkpoint directory or a bare .nmdr file."""
    p = Path(directory)
    if p.is_dir():
        if cfg is None:
            from safeplan.config import apply_overrides, parse_config_text

            cfg_path = p / "config.cfg"
            cfg = apply_overrides(TrainConfig(), parse_config_text(cfg_path.read_text())) if cfg_path.exists() \
                else TrainConfig()
        p = p / "params.nmdr"
    cfg = cfg or TrainConfig()
    agent = Agent(cfg, np.random.default_rng(0))
    agent.load_entries(read_tensors(p))
    return agent, cfg


def run_episode(agent: Agent, cfg: TrainConfig, seed: int, mode: str = "mean", use_planner: bool = True,
                policy: str | None = None, rng=None, record: bool = False):
    """One evaluation episode; no learning, no buffer writes."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    b_s = planner_budget(cfg.budget, cfg.plan_horizon, cfg.env.episode_length, cfg.bs_scale)
    state, obs = circle.reset(seed, cfg.env)
    latent = agent.wm.initial_state(1)
    prev = np.zeros((1, cfg.wm.act_dim), np.float32)
    ret = cost = 0.0
    n_safe = 0
    rows = []
    for t in range(cfg.env.episode_length):
        latent, _ = agent.wm.observe_step(latent, prev, obs[None], rng)
        if policy == "random":
            action = rng.uniform(-1.0, 1.0, size=(1, cfg.wm.act_dim))
            diag = None
        elif use_planner:
            action, diag = plan_action(latent, agent.wm, agent.actor_c, agent.actor_s, cfg.plan_horizon, b_s,
                                       rng, mode=mode)
            n_safe += diag.chose_safe
        else:
            action, diag = agent.actor_c.act(latent, mode, rng), None
        action = np.asarray(action, np.float32).reshape(1, -1)
        pos = state.position.copy()
        state, res = circle.step(state, action[0], cfg.env)
        ret += res.reward
        cost += res.cost
        if record:
            row = {"step": t, "x": state.position[0], "y": state.position[1], "vx": state.velocity[0],
                   "vy": state.velocity[1], "ax": action[0, 0], "ay": action[0, 1], "reward": res.reward,
                   "cost": res.cost, "x_prev": pos[0], "y_prev": pos[1]}
            if diag is not None:
                row.update(c_obs=diag.c_obs, c_sum=diag.c_sum, chose_safe=diag.chose_safe)
            rows.append(row)
        prev = action
        obs = res.observation
    return {"return": ret, "cost": cost, "chose_safe_rate": n_safe / cfg.env.episode_length, "rows": rows}


def evaluate(agent: Agent, cfg: TrainConfig, n_episodes: int, mode: str = "mean", use_planner: bool = True,
             policy: str | None = None, seed_base: int = 1_000_000, dump_dir=None) -> dict:
    """Planner-in-the-loop evaluation summary over ``n_episodes`` fresh episodes."""
    eps = []
    for i in range(n_episodes):
        ep = run_episode(agent, cfg, seed_base + i, mode, use_planner, policy, record=dump_dir is not None)
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            circle.dump_trajectory(Path(dump_dir) / f"episode_{i:03d}.csv", ep["rows"],
                                   extra_columns=("c_obs", "c_sum", "chose_safe"))
        eps.append(ep)
    returns = [e["return"] for e in eps]
    costs = [e["cost"] for e in eps]
    return {
        "episodes": n_episodes, "mean_return": float(np.mean(returns)), "mean_cost": float(np.mean(costs)),
        "returns": returns, "costs": costs,
        "chose_safe_rate": float(np.mean([e["chose_safe_rate"] for e in eps])),
        "violation": bool(np.mean(costs) > cfg.budget), "budget": cfg.budget,
    }

