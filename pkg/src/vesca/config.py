"""Run configuration: one flat JSON document.

Keys mirror :class:`~vesca.attack.AttackConfig`, :class:`~vesca.data.SynthParams`
and :class:`~vesca.encoder.EncoderSpec` field names (``image_side``,
``channels`` and ``patch_side`` are shared by the data generator and the
encoder), plus the run-level keys of :class:`RunConfig`. Unknown keys are
rejected; keys starting with ``_comment`` are ignored so that files can carry
notes.

The default patch-augmentation grid is ``ns = 8``, which matches the 8 x 8
token grid of a 32-pixel image with 4-pixel patches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig
from .data import SynthParams
from .encoder import EncoderSpec


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass
class RunConfig:
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(ns=8))
    synth: SynthParams = field(default_factory=SynthParams)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    seed: int = 0
    out_dir: str = "out"
    dataset: str | None = None
    encoder_checkpoint: str | None = None
    num_images: int = 64
    samples: int = 1
    reference_size: int = 40
    jobs: int = 1
    decline_samples: int = 5
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.2
    downstream_epochs: int = 15
    downstream_lr: float = 0.5
    batch_size: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.reference_size < 2 or self.reference_size > self.synth.num_source:
            raise ConfigError("reference_size must be between 2 and the source pool size")
        if not 1 <= self.num_images <= self.synth.num_target_test:
            raise ConfigError("num_images must be between 1 and num_target_test")
        for name in ("samples", "jobs", "decline_samples", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "downstream_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        ns = self.attack.ns
        if ns is not None and self.encoder.image_side % ns:
            raise ConfigError(f"ns={ns} does not divide image_side={self.encoder.image_side}")
        if self.encoder.image_side != self.synth.image_side:
            raise ConfigError("encoder and data generator disagree on image_side")

    @classmethod
    def run_keys(cls) -> list:
        return [f.name for f in fields(cls) if f.name not in ("attack", "synth", "encoder")]

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        """Build from a flat mapping; relative paths resolve against ``base_dir``."""
        groups = {
            "attack": set(AttackConfig.field_names()),
            "synth": {f.name for f in fields(SynthParams)},
            "encoder": {f.name for f in fields(EncoderSpec)},
        }
        run_keys = set(cls.run_keys())
        unknown = sorted(k for k in doc if not k.startswith("_comment")
                         and k not in run_keys and not any(k in g for g in groups.values()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parts = {name: {k: doc[k] for k in keys if k in doc} for name, keys in groups.items()}
        parts["attack"].setdefault("ns", 8)
        run = {k: doc[k] for k in run_keys if k in doc}
        if base_dir is not None:
            for key in ("out_dir", "dataset", "encoder_checkpoint"):
                if run.get(key) is not None:
                    run[key] = str((Path(base_dir) / run[key]))
        try:
            return cls(attack=AttackConfig(**parts["attack"]), synth=SynthParams(**parts["synth"]),
                       encoder=EncoderSpec(**parts["encoder"]), **run)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        """Flat mapping; ``from_dict(to_dict())`` reproduces the config."""
        out = {}
        out.update(self.encoder.to_dict())
        out.update(self.synth.to_dict())
        out.update(self.attack.to_dict())
        out.update({k: getattr(self, k) for k in self.run_keys()})
        return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc, path.parent)


def default_config_dict() -> dict:
    doc = {"_comment": "ns=8 matches the 8x8 token grid of 32-pixel images with 4-pixel patches"}
    doc.update(RunConfig().to_dict())
    return doc


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = ["ConfigError", "RunConfig", "load_config", "save_config", "default_config_dict"]
