"""Run configuration, read from INI files.

Run-level fields live in ``[train]``; every other section names a component::

    [train]
    seed = 3
    total_steps = 300000

    [lagrange]
    alpha = 0.02

Command-line overrides use dotted keys (``lagrange.alpha=0.05``); keys
without a dot address ``[train]``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from safeplan.discriminator import DiscriminatorConfig
from safeplan.env import CircleConfig
from safeplan.policy import PolicyConfig
from safeplan.world_model import WorldModelConfig


@dataclass(frozen=True)
class LagrangeConfig:
    init: float = 1.0
    alpha: float = 0.02
    lam_min: float = 1e-3
    lam_max: float = 100.0
    window: int = 50
    paper_sign: bool = False


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    total_steps: int = 300_000
    prefill: int = 5000
    train_every: int = 5
    batch: int = 16
    seq_len: int = 50
    imag_starts: int = 0          # 0 = every posterior state of the batch
    buffer_capacity: int = 1_000_000
    budget: float = 25.0
    bs_scale: float = 1.0
    plan_horizon: int = 15
    prefill_noise: float = 0.3
    log_every: int = 100
    checkpoint_every: int = 0     # env steps; 0 = only at the end
    train_phases: str = "wm,control,safe,disc,lagrange"
    output_dir: str = "runs/default"
    env: CircleConfig = field(default_factory=CircleConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    lagrange: LagrangeConfig = field(default_factory=LagrangeConfig)

    def __post_init__(self):
        for name in ("total_steps", "train_every", "batch", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.plan_horizon < 0 or self.budget < 0 or self.prefill < 0:
            raise ValueError("plan_horizon, budget and prefill must be non-negative")
        if self.wm.obs_dim != self.env.obs_dim:
            object.__setattr__(self, "wm", dataclasses.replace(self.wm, obs_dim=self.env.obs_dim))

    @property
    def phases(self) -> set:
        return {p.strip() for p in self.train_phases.split(",") if p.strip()}


SECTIONS = ("env", "wm", "policy", "disc", "lagrange")


def _coerce(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        value = float(raw.replace("_", ""))
        if value != int(value):
            raise ValueError(f"not an integer: {raw!r}")
        return int(value)
    if isinstance(current, float):
        return float(raw)
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


TOP = "train"


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case
    return cp


def parse_config_text(text: str) -> dict:
    """Flatten INI text into {key: raw string} with dotted keys for component sections."""
    cp = _parser()
    cp.read_string(text)
    out = {}
    for sec in cp.sections():
        for key, value in cp.items(sec):
            out[key if sec == TOP else f"{sec}.{key}"] = value
    return out


def apply_overrides(cfg: TrainConfig, entries: dict) -> TrainConfig:
    top, sections = {}, {s: {} for s in SECTIONS}
    for key, raw in entries.items():
        if key == "obs_mode":
            key = "env.obs_mode"
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise KeyError(f"unknown config section {sec!r}")
            sub = getattr(cfg, sec)
            if name not in {f.name for f in dataclasses.fields(sub)}:
                raise KeyError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(raw, getattr(sub, name))
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or key in SECTIONS:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, getattr(cfg, key))
    for sec, vals in sections.items():
        if vals:
            top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    return dataclasses.replace(cfg, **top)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    cfg = apply_overrides(TrainConfig(), parse_config_text(text))
    if overrides:
        cfg = apply_overrides(cfg, {k: str(v) for k, v in overrides.items()})
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    cp = _parser()
    cp[TOP] = {f.name: str(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in SECTIONS}
    for sec in SECTIONS:
        sub = getattr(cfg, sec)
        cp[sec] = {f.name: str(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
