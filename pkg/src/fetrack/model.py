"""The full network (CDFI + regressor + classifier), its config file, and checkpoint IO."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Module, load_checkpoint, save_checkpoint
from .cdfi import CDFI, CdfiConfig, config_from_dict
from .errors import ConfigError, NotFound
from .heads import Classifier, HeadConfig, IoURegressor


@dataclass
class ModelConfig:
    cdfi: CdfiConfig = field(default_factory=CdfiConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    @classmethod
    def toy(cls, **cdfi_overrides):
        return cls(CdfiConfig.toy(**cdfi_overrides), HeadConfig())

    def to_dict(self):
        return {"cdfi": asdict(self.cdfi), "heads": asdict(self.heads)}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"cdfi", "heads"}
        if unknown:
            raise ConfigError(f"unknown model config sections {sorted(unknown)}")
        return cls(config_from_dict(CdfiConfig, data.get("cdfi", {})),
                   config_from_dict(HeadConfig, data.get("heads", {})))


class TrackerNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config.cdfi
        self.cdfi = CDFI(c)
        rng = np.random.default_rng(c.seed + 1)
        self.regressor = IoURegressor(c.low_channels, c.high_channels, rng, config.heads)
        self.classifier = Classifier(c.low_channels, rng, config.heads)

    def parameter_groups(self):
        """Parameters split into the three learning-rate groups."""
        return {
            "classifier": self.classifier.parameters(),
            "regressor": self.regressor.parameters(),
            "cdfi": self.cdfi.parameters(),
        }


def config_path_for(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".json")


def save_model(model: TrackerNet, path):
    path = Path(path)
    save_checkpoint(path, model.state_dict())
    config_path_for(path).write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_model(path, config: ModelConfig | None = None) -> TrackerNet:
    path = Path(path)
    if config is None:
        cfg_path = config_path_for(path)
        if not cfg_path.exists():
            raise NotFound(f"model config {cfg_path} not found next to checkpoint")
        config = ModelConfig.from_dict(json.loads(cfg_path.read_text()))
    model = TrackerNet(config)
    model.load_state_dict(load_checkpoint(path))
    return model.eval()
