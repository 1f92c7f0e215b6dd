"""Run configuration: five INI sections covering every hyperparameter.

Defaults follow the training recipe (learning rate 5e-4, beta 0.01, unit
contrastive weights, time lag 80 frames, one encoder/decoder update followed
by three adversarial updates).  Unknown keys are rejected so typos fail
loudly.  Every run directory receives a resolved echo of the configuration
it actually used.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SEED_ENV_VAR = "SPKSTYLE_SEED"


@dataclass
class FeaturesConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    frame_rate: int = 80
    window_ms: float = 25.0
    log_floor: float = 1e-10
    vtlp_min: float = 0.9
    vtlp_max: float = 1.1
    norm_eps: float = 1e-5


@dataclass
class ModelConfig:
    utt_dim: int = 256
    utt_hidden: int = 512
    utt_layers: int = 4
    se_hidden: int = 256
    emb_dim: int = 128
    content_hidden: int = 256
    content_dim: int = 64
    downsample: int = 4
    dec_hidden: int = 512
    cpc_head_hidden: int = 128
    cpc_head_dim: int = 128
    adv_hidden: int = 128
    kernel_size: int = 5
    leaky_slope: float = 0.2
    dtype: str = "float32"


@dataclass
class LossConfig:
    tau_frames: int = 80
    lambda_s: float = 1.0
    lambda_z: float = 1.0
    beta: float = 0.01


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    crop_frames: int = 160
    iterations: int = 5000
    adv_updates: int = 3
    checkpoint_interval: int = 1000


@dataclass
class EvalConfig:
    probe_hidden: int = 128
    probe_layers: int = 3
    probe_steps: int = 600
    probe_lr: float = 5e-4
    n_target: int = 400
    n_nontarget: int = 1200


@dataclass
class RunConfig:
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("features", "model", "loss", "train", "eval")

    def validate(self) -> "RunConfig":
        if self.train.batch_size < 2:
            raise ConfigError("batch_size must be >= 2: the contrastive loss needs in-batch negatives")
        if self.train.crop_frames <= self.loss.tau_frames:
            raise ConfigError(
                f"crop_frames ({self.train.crop_frames}) must exceed tau_frames ({self.loss.tau_frames})"
            )
        d = self.model.downsample
        if d < 1 or d & (d - 1):
            raise ConfigError(f"downsample must be a power of two, got {d}")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.model.dtype!r}")
        if self.loss.lambda_s < 0 or self.loss.lambda_z < 0 or self.loss.beta < 0:
            raise ConfigError("loss weights must be non-negative")
        return self


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes")
    return target_type(value)


def load_config(path) -> RunConfig:
    """Parse an INI file into a RunConfig; unknown sections/keys are errors."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    return config_from_parser(parser, source=str(path))


def config_from_string(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return config_from_parser(parser, source="<string>")


def config_from_parser(parser: configparser.ConfigParser, source: str) -> RunConfig:
    cfg = RunConfig()
    for section in parser.sections():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"{source}: unknown config section [{section}]")
        target = getattr(cfg, section)
        fields = {f.name: f.type for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {key!r} in section [{section}]")
            current = getattr(target, key)
            try:
                setattr(target, key, _coerce(raw, type(current)))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {raw!r}") from exc
    return cfg.validate()


def config_to_string(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section in RunConfig.SECTIONS:
        parser.add_section(section)
        for f in dataclasses.fields(getattr(cfg, section)):
            parser.set(section, f.name, repr(getattr(getattr(cfg, section), f.name)).strip("'"))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_to_string(cfg), encoding="utf-8")
