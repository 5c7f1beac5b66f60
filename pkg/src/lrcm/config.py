"""Run configuration: a strict JSON-backed tree covering model, diffusion,
loss, training, metrics, and paths sections.

Unknown keys are rejected at load time and every value is validated against
its owning module's constraints before any computation starts.  Overrides use
dotted paths (``training.steps=500``) with values coerced to the type of the
default they replace.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .diffusion import GuidanceConfig
from .errors import ConfigError
from .metrics import MetricConfig
from .training import LossConfig


@dataclass
class ModelSection:
    d_model: int = 64
    n_blocks: int = 20
    heads: int = 4
    conv_kernel: int = 5
    t_seq: int = 900
    mtmm_enabled: bool = False
    memory_frames: int = 120
    pose_dim: int = 61
    audio_dim: int = 3
    text_dim: int = 512
    text_bottleneck: int = 64
    time_dim: int = 64
    ssm_state: int = 8

    def denoiser_config(self) -> DenoiserConfig:
        cfg = DenoiserConfig(
            pose_dim=self.pose_dim, d_model=self.d_model, n_blocks=self.n_blocks,
            heads=self.heads, conv_kernel=self.conv_kernel, t_seq=self.t_seq,
            audio_dim=self.audio_dim, text_dim=self.text_dim,
            text_bottleneck=self.text_bottleneck, time_dim=self.time_dim,
            mtmm_enabled=self.mtmm_enabled, memory_frames=self.memory_frames,
            ssm_state=self.ssm_state,
        )
        cfg.validate()
        return cfg


@dataclass
class DiffusionSection:
    beta_min: float = 0.01
    beta_max: float = 0.7
    steps: int = 200
    guidance_gamma: float = 1.0
    guidance_delta: float = 1.0
    condition_dropout: float = 0.1
    clip_x0: float | None = 5.0  # reverse-step clean-sample clamp; null disables

    def validate(self):
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ConfigError(f"diffusion bounds out of range: [{self.beta_min}, {self.beta_max}]")
        if self.steps < 2:
            raise ConfigError("diffusion needs at least 2 steps")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ConfigError("clip_x0 must be positive or null")
        GuidanceConfig(self.guidance_gamma, self.guidance_delta, self.condition_dropout)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(gamma=self.guidance_gamma, delta=self.guidance_delta,
                              condition_dropout_prob=self.condition_dropout)


@dataclass
class LossSection:
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    lambda_j: float = 1.0
    epsilon: float = 1e-8

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_v, self.lambda_a, self.lambda_j, self.epsilon)


@dataclass
class TrainingSection:
    phase: int = 1
    lr: float | None = None       # None: use the phase default
    batch: int | None = None      # None: use the phase default
    steps: int = 200
    seed: int = 0
    weight_decay: float = 1e-4
    noise_inject_p: float = 0.05
    noise_inject_sigma: float = 0.1
    checkpoint_every: int | None = None

    def validate(self):
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if not 0.0 <= self.noise_inject_p <= 1.0:
            raise ConfigError("noise injection probability must be in [0, 1]")


@dataclass
class MetricsSection:
    bas_sigma: float = 9.0
    rs_sigma: float = 30.0
    pff_percentile: float = 25.0
    pff_min_frames: int = 5
    pff_max_frames: int = 90
    div_pairs: int = 200
    div_seed: int = 0

    def metric_config(self) -> MetricConfig:
        return MetricConfig(bas_sigma=self.bas_sigma, rs_sigma=self.rs_sigma,
                            pff_percentile=self.pff_percentile,
                            pff_min_frames=self.pff_min_frames,
                            pff_max_frames=self.pff_max_frames,
                            div_pairs=self.div_pairs, div_seed=self.div_seed)


@dataclass
class PathsSection:
    manifest: str = "data/manifest.jsonl"
    checkpoints: str = "checkpoints"
    reports: str = "reports"
    embeddings: str | None = None


_SECTION_TYPES = {
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "loss": LossSection,
    "training": TrainingSection,
    "metrics": MetricsSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        self.model.denoiser_config()
        self.diffusion.validate()
        self.loss.loss_config()
        self.training.validate()
        self.metrics.metric_config()
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTION_TYPES}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for section_name, payload in data.items():
            if section_name not in _SECTION_TYPES:
                raise ConfigError(f"unknown config section {section_name!r}")
            section = getattr(cfg, section_name)
            known = {f.name for f in dataclasses.fields(section)}
            for key, value in payload.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section_name}.{key}")
                setattr(section, key, value)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def _coerce(text: str, like):
    if like is None or isinstance(like, str):
        return None if text == "null" else text
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {text!r}")
    if isinstance(like, int):
        return None if text == "null" else int(text)
    if isinstance(like, float):
        return None if text == "null" else float(text)
    raise ConfigError(f"cannot coerce override {text!r}")


def apply_overrides(config: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides in place, then re-validate."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        path, raw = pair.split("=", 1)
        parts = path.strip().lstrip("-").split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path {path!r} must be section.key")
        section_name, key = parts
        if section_name not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(config, section_name)
        known = {f.name: f for f in dataclasses.fields(section)}
        if key not in known:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        current = getattr(section, key)
        if current is None:
            # Typed by the field annotation: ints for counts, floats otherwise.
            anno = str(known[key].type)
            if "int" in anno:
                value = None if raw == "null" else int(raw)
            elif "float" in anno:
                value = None if raw == "null" else float(raw)
            else:
                value = None if raw == "null" else raw
        else:
            value = _coerce(raw.strip(), current)
        setattr(section, key, value)
    return config.validate()
