"""Training configuration: optimizer schedule, loss weights and ablations."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError
from .predictor import LossWeights


@dataclass
class TrainConfig:
    lr0: float = 1e-2
    decay: float = 0.2            # lr multiplier applied every `decay_every` epochs
    decay_every: int = 10
    momentum: float = 0.9
    batch: int = 32               # positive outfits per step; negatives are added per pair
    epochs: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 7
    # ablations
    use_vse: bool = True
    use_projection: bool = True
    layers_enabled: tuple[int, ...] = (1, 2, 3, 4)
    # sampling / stability
    negatives_per_positive: int = 1
    clip_norm: float = 5.0
    # architecture
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    input_side: int = 32
    hidden_dim: int = 1024
    mlp_support: int | None = 4   # inputs per hidden unit at init; None = dense
    joint_dim: int = 64
    vse_margin: float = 0.2
    shared_side_masks: bool = False

    def validate(self):
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        layers = tuple(sorted(set(self.layers_enabled)))
        if not layers or any(k not in (1, 2, 3, 4) for k in layers):
            raise ConfigError(f"layers_enabled must be a nonempty subset of 1..4, got {self.layers_enabled}")
        if self.weights.lambda1 < 0 or self.weights.lambda2 < 0 or self.weights.lambda3 < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.hidden_dim < 1 or self.joint_dim < 1:
            raise ConfigError("hidden_dim and joint_dim must be >= 1")
        if self.mlp_support is not None and self.mlp_support < 1:
            raise ConfigError("mlp_support must be >= 1 or None")
        if self.vse_margin <= 0:
            raise ConfigError("vse_margin must be positive")

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.layers_enabled)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"lambda1": self.weights.lambda1,
                        "lambda2": self.weights.lambda2,
                        "lambda3": self.weights.lambda3}
        d["layers_enabled"] = list(self.layers)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", {})
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "weights"})
        cfg = replace(cfg,
                      weights=LossWeights(**w) if w else LossWeights(),
                      layers_enabled=tuple(d.get("layers_enabled", cfg.layers_enabled)),
                      stage_channels=tuple(d.get("stage_channels", cfg.stage_channels)))
        cfg.validate()
        return cfg
