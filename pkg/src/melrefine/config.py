"""Strict YAML configuration for the pipeline commands.

One file with sections dsp, flow, model, train, and simulate. Every key
has a default; unknown keys and unknown sections are errors, not
warnings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import dsp
from .flow import FlowConfig
from .net import EstimatorConfig
from .simulate import DegradationSpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


@dataclass(frozen=True)
class DspSection:
    sample_rate: int = dsp.SAMPLE_RATE
    n_fft: int = dsp.N_FFT
    hop: int = dsp.HOP
    n_mels: int = dsp.N_MELS
    f_min: float = dsp.F_MIN
    f_max: float = dsp.F_MAX
    log_floor: float = dsp.LOG_FLOOR
    griffin_lim_iterations: int = dsp.GRIFFIN_LIM_ITERATIONS
    griffin_lim_momentum: float = dsp.GRIFFIN_LIM_MOMENTUM


@dataclass(frozen=True)
class FlowSection:
    sigma_min: float = 0.0
    n_steps: int = 64


@dataclass(frozen=True)
class ModelSection:
    n_blocks: int = 2
    model_dim: int = 128
    n_heads: int = 4
    conv_kernel: int = 7
    time_embed_dim: int = 128
    head_channels: int = 32


@dataclass(frozen=True)
class TrainSection:
    manifest: str = ""
    checkpoint_path: str = "checkpoint.bin"
    batch_size: int = 4
    total_steps: int = 2000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 500
    dtype: str = "float64"


@dataclass(frozen=True)
class SimulateSection:
    clean_dir: str = ""
    out_dir: str = ""
    seed: int = 0
    specs: tuple = ()


@dataclass(frozen=True)
class Config:
    dsp: DspSection = field(default_factory=DspSection)
    flow: FlowSection = field(default_factory=FlowSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(sigma_min=self.flow.sigma_min, n_steps=self.flow.n_steps)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            n_blocks=self.model.n_blocks,
            model_dim=self.model.model_dim,
            n_heads=self.model.n_heads,
            conv_kernel=self.model.conv_kernel,
            time_embed_dim=self.model.time_embed_dim,
            n_mels=self.dsp.n_mels,
            head_channels=self.model.head_channels,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size,
            total_steps=t.total_steps,
            learning_rate=t.learning_rate,
            beta1=t.beta1,
            beta2=t.beta2,
            weight_decay=t.weight_decay,
            eps=t.eps,
            seed=t.seed,
            checkpoint_interval=t.checkpoint_interval,
            dtype=t.dtype,
        )

    def degradation_specs(self) -> list[DegradationSpec]:
        return [DegradationSpec(**s) for s in self.simulate.specs]


def _parse_section(cls, name: str, raw: dict):
    allowed = {f.name: f.type for f in fields(cls)}
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in section '{name}'")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section '{name}': {e}") from e


_SPEC_KEYS = {"snr_db", "rt60_s", "smear_frames", "seed"}


def _parse_specs(raw_specs, section: str) -> tuple:
    if not isinstance(raw_specs, list):
        raise ConfigError(f"'specs' in section '{section}' must be a list")
    specs = []
    for i, entry in enumerate(raw_specs):
        if not isinstance(entry, dict):
            raise ConfigError(f"specs[{i}] in section '{section}' must be a mapping")
        unknown = set(entry) - _SPEC_KEYS
        if unknown:
            raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in specs[{i}]")
        if "snr_db" not in entry:
            raise ConfigError(f"specs[{i}] is missing required key 'snr_db'")
        specs.append(dict(entry))
    return tuple(specs)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    sections = {"dsp": DspSection, "flow": FlowSection, "model": ModelSection,
                "train": TrainSection, "simulate": SimulateSection}
    unknown = set(raw) - set(sections)
    if unknown:
        raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")

    parsed = {}
    for name, cls in sections.items():
        body = raw.get(name, {}) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        if name == "simulate" and "specs" in body:
            body = dict(body)
            body["specs"] = _parse_specs(body["specs"], name)
        parsed[name] = _parse_section(cls, name, body)

    cfg = Config(**parsed)
    # Surface invalid values (e.g. odd conv kernels) at load time, with context.
    try:
        cfg.flow_config()
        cfg.estimator_config()
        cfg.train_config()
        cfg.degradation_specs()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg
