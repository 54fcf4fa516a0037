"""Run configuration files (JSON).

Schema::

    {
      "checkpoint": "runs/ckpt",          # checkpoint directory
      "output_dir": "runs/out",
      "seeds": [0, 1, 2],
      "modes": ["baseline", "amb_only", "full"],
      "guidance": {...GuidanceConfig fields, all optional...},
      "dataset": {...DatasetConfig fields, all optional...},
      "model": {...ModelConfig fields, all optional...}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..controller import normalize_mode
from ..losses import GuidanceConfig
from ..toy_mmdit.dataset import DatasetConfig
from ..toy_mmdit.model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    checkpoint: str = "checkpoint"
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    modes: list[str] = field(default_factory=lambda: ["baseline", "amb_only", "full"])
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig | None = None

    def __post_init__(self):
        self.modes = [normalize_mode(m) for m in self.modes]

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
            "modes": list(self.modes),
            "guidance": self.guidance.to_dict(),
            "dataset": self.dataset.to_dict(),
            "model": None if self.model is None else self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"checkpoint", "output_dir", "seeds", "modes", "guidance", "dataset", "model"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            guidance = GuidanceConfig.from_dict({**GuidanceConfig().to_dict(), **d.get("guidance", {})})
            dataset = DatasetConfig.from_dict({**DatasetConfig().to_dict(), **d.get("dataset", {})})
            model = d.get("model")
            model = None if model is None else ModelConfig.from_dict({**ModelConfig().to_dict(), **model})
            return cls(
                checkpoint=d.get("checkpoint", "checkpoint"),
                output_dir=d.get("output_dir", "runs"),
                seeds=[int(s) for s in d.get("seeds", range(10))],
                modes=list(d.get("modes", ["baseline", "amb_only", "full"])),
                guidance=guidance,
                dataset=dataset,
                model=model,
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def save_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config.to_dict(), indent=2))
    return path


def load_run_config(path, require_checkpoint: bool = False) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    config = RunConfig.from_dict(data)
    if require_checkpoint and not Path(config.checkpoint).is_dir():
        raise ConfigError(f"checkpoint directory {config.checkpoint!r} does not exist")
    return config
