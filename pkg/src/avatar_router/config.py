"""INI configuration (``[section]`` then ``key = value``) with typed fields."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .router_net import RouterLossWeights
from .trainer import StagePlan, TeacherForcingConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    count: int = 288
    mix: float = 0.1
    seed: int = 0
    test_fraction: float = 1 / 9  # 256 train / 32 test at the default count


@dataclass
class RouterConfig:
    ce: float = 1.0
    st: float = 0.001
    layer: float = 8.0
    mean: bool = False
    theta: float = 0.6
    max_iters: int = 16
    loss_weight: float = 1.0


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 16
    steps_stage1: int = 500
    steps_stage2: int = 2000
    steps_stage3: int = 1000
    cond_drop: float = 0.05
    inpaint_drop: float = 0.5
    guidance_drop: float = 0.05
    dynamic_rate: float = 0.5
    kappa: float = 1.0
    sigma_face: float = 0.3
    tf_p_drop: float = 0.1
    tf_sigma: float = 0.05
    self_forcing: float = 0.5
    inflate_audio: bool = True
    seed: int = 0
    t_diff: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 7.0
    mode: str = "intra"
    seed: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def router_weights(self) -> RouterLossWeights:
        return RouterLossWeights(self.router.ce, self.router.st, self.router.layer)

    def stage_plan(self, stage: int) -> StagePlan:
        tr = self.train
        steps = {1: tr.steps_stage1, 2: tr.steps_stage2, 3: tr.steps_stage3}
        if stage not in steps:
            raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
        return StagePlan(
            stage=stage,
            steps=steps[stage],
            lr=tr.lr,
            batch_size=tr.batch_size,
            cond_drop=tr.cond_drop,
            inpaint_drop=tr.inpaint_drop,
            guidance_drop=tr.guidance_drop,
            dynamic_rate=tr.dynamic_rate,
            kappa=tr.kappa,
            sigma_face=tr.sigma_face,
            teacher=TeacherForcingConfig(tr.tf_p_drop, tr.tf_sigma),
            router_weights=self.router_weights(),
            router_mean=self.router.mean,
            router_loss_weight=self.router.loss_weight,
            self_forcing=tr.self_forcing,
            inflate_audio=tr.inflate_audio,
            theta=self.router.theta,
            max_iters=self.router.max_iters,
            t_diff=tr.t_diff,
            beta_start=tr.beta_start,
            beta_end=tr.beta_end,
        )


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        state = configparser.ConfigParser.BOOLEAN_STATES.get(raw.lower())
        if state is None:
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return state
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"expected {type(current).__name__}, got {raw!r}") from exc
    return raw


def parse_config(text: str) -> Config:
    """INI text with one ``[section]`` per config group; unknown keys are rejected."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    cfg = Config()
    sections = {f.name for f in fields(cfg)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        for name, raw in parser[section].items():
            if name not in names:
                raise ConfigError(f"unknown config key {section}.{name}")
            setattr(target, name, _parse_value(raw.strip(), getattr(target, name)))
    # re-run dataclass validation on the assembled sections
    try:
        cfg.model.dit()
        cfg.router_weights()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(encoding="utf-8"))


def dump_config(cfg: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in fields(cfg):
        obj = getattr(cfg, section.name)
        values = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            values[f.name] = str(v).lower() if isinstance(v, bool) else str(v)
        parser[section.name] = values
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
