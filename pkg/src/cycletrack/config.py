"""Run configuration: defaults < CYCLETRACK_SEED < YAML file < ``--section.key=value`` flags."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .backbone import EncoderConfig
from .cycle import TrainSchedule
from .dca import DcaConfig
from .heads import LossWeights

SEED_ENV = "CYCLETRACK_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_dir: str | None = None
    eval_dir: str | None = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    dca: DcaConfig = field(default_factory=DcaConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self):
        return asdict(self)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def encoder_config(self) -> EncoderConfig:
        """Encoder config with the DCA-level saliency direction applied."""
        return dataclasses.replace(self.encoder, saliency_direction=self.dca.saliency_direction,
                                   max_context_tokens=max(self.encoder.max_context_tokens, self.dca.token_length))

    def validate(self):
        try:
            self.train.validate()
            EncoderConfig(**asdict(self.encoder))
            LossWeights(**asdict(self.loss))
            self.dca.schedule(self.train.total_epochs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.dca.token_length > self.encoder.num_search_tokens:
            raise ConfigError("dca.token_length: exceeds the number of search tokens")
        if self.dca.saliency_direction not in ("template_to_search", "search_to_template"):
            raise ConfigError(f"dca.saliency_direction: unknown value {self.dca.saliency_direction!r}")
        return self


# full-length training schedule; the encoder stays desk-scale
PAPER_SCHEDULE = {
    "train": {
        "total_epochs": 150,
        "steps_per_epoch": 1250,  # 10,000 pairs per epoch at batch size 8
        "batch_size": 8,
        "lr_backbone": 2.5e-5,
        "lr_rest": 2.5e-4,
        "lr_decay_epoch": 120,
        "weight_decay": 1e-4,
    },
    "dca": {"switch_epoch": 75, "token_length": 8},
}

ABLATIONS = {
    "full": {},
    "no-prompt": {"dca": {"use_prompt": False}},
    "no-noise": {"dca": {"use_noise": False}},
    "query": {"dca": {"learned_queries": True}},
}


def _sections():
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def _merge_section(obj, values: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}: unknown config key")
        setattr(obj, key, value)


def apply(cfg: RunConfig, tree: dict) -> RunConfig:
    sections = _sections()
    for key, value in (tree or {}).items():
        if key not in sections:
            raise ConfigError(f"{key}: unknown config key")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            _merge_section(current, value, f"{key}.")
        else:
            setattr(cfg, key, value)
    return cfg


def parse_override(text: str) -> dict:
    """``--train.total_epochs=5`` -> ``{"train": {"total_epochs": 5}}``."""
    body = text[2:] if text.startswith("--") else text
    if "=" not in body:
        raise ConfigError(f"{body}: override needs the form --section.key=value")
    key, raw = body.split("=", 1)
    value = yaml.safe_load(raw) if raw != "" else None
    if isinstance(value, str):
        try:
            value = float(value)  # YAML 1.1 reads "1e-3" as a string
        except ValueError:
            pass
    parts = key.split(".")
    tree = value
    for part in reversed(parts):
        tree = {part: tree}
    return tree


def _coerce(cfg: RunConfig):
    """Cast values to the declared field types and rebuild nested configs."""
    def fix(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            t = str(f.type)
            try:
                if v is None:
                    continue
                if t.startswith("int") and not isinstance(v, bool):
                    if isinstance(v, float) and not v.is_integer():
                        raise ValueError
                    setattr(obj, f.name, int(v))
                elif t.startswith("float"):
                    setattr(obj, f.name, float(v))
                elif t == "bool" and not isinstance(v, bool):
                    raise ValueError
            except (TypeError, ValueError):
                raise ConfigError(f"{prefix}{f.name}: expected {t}, got {v!r}") from None
    for name in ("encoder", "train", "dca", "loss", "data"):
        fix(getattr(cfg, name), f"{name}.")
    fix_top = {"seed": int}
    for name, typ in fix_top.items():
        try:
            setattr(cfg, name, typ(getattr(cfg, name)))
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected {typ.__name__}") from None
    try:
        cfg.encoder = EncoderConfig(**asdict(cfg.encoder))
        cfg.dca = DcaConfig(**asdict(cfg.dca))
        cfg.loss = LossWeights(**asdict(cfg.loss))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None, overrides=(), paper_schedule=False, ablation=None) -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env_seed!r}") from None
    if paper_schedule:
        apply(cfg, PAPER_SCHEDULE)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        apply(cfg, tree)
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"ablate: unknown variant {ablation!r}, choose from {sorted(ABLATIONS)}")
        apply(cfg, ABLATIONS[ablation])
    for text in overrides:
        apply(cfg, parse_override(text))
    return _coerce(cfg).validate()
