"""Four-stage convolutional feature extractor with per-stage GAP vectors.

Each stage is conv3x3 (stride 1, pad 1) -> relu -> maxpool2, so the spatial
side halves per stage (32 -> 16 -> 8 -> 4 -> 2 for the default input).  The
output is not a single embedding but one global-average-pooled vector per
stage: early stages carry low-level cues (color, local texture energy),
later stages carry more abstract ones.  All downstream similarity logic
consumes these per-stage vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

N_STAGES = 4


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    input_side: int = 32
    input_channels: int = 3
    seed: int = 0

    def validate(self):
        if len(self.stage_channels) != N_STAGES:
            raise ConfigError(f"expected {N_STAGES} stage channel counts, got {self.stage_channels}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channels must be >= 1")
        if self.input_side % 16 != 0 or self.input_side <= 0:
            raise ConfigError("input side must be a positive multiple of 16")
        if self.input_channels < 1:
            raise ConfigError("input channels must be >= 1")


@dataclass
class LayerFeatures:
    """Per-stage GAP vectors for one item; vectors[k] has stage_channels[k] dims."""

    vectors: list[Tensor]

    def as_arrays(self) -> list[np.ndarray]:
        return [v.data.copy() for v in self.vectors]


@dataclass
class BackboneParams:
    config: BackboneConfig
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def named_parameters(self):
        for i, (k, b) in enumerate(zip(self.kernels, self.biases), start=1):
            yield f"conv{i}.weight", k
            yield f"conv{i}.bias", b


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(cfg: BackboneConfig) -> BackboneParams:
    """Seeded parameter initialization; kernels glorot-uniform, biases zero."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 101])))
    params = BackboneParams(config=cfg)
    c_in = cfg.input_channels
    for c_out in cfg.stage_channels:
        shape = (c_out, c_in, 3, 3)
        w = glorot_uniform(rng, shape, fan_in=c_in * 9, fan_out=c_out * 9)
        params.kernels.append(ad.parameter(w))
        params.biases.append(ad.parameter(np.zeros(c_out)))
        c_in = c_out
    return params


def extract_batch(images: Tensor, params: BackboneParams) -> list[Tensor]:
    """Run all stages over a batch; returns one [N, C_k] matrix per stage.

    ``images`` is [N, C, S, S] with S == config.input_side.  Internally the
    stages run channels-last; only the entry point pays a layout transform.
    """
    cfg = params.config
    if images.data.ndim != 4 or images.data.shape[1] != cfg.input_channels \
            or images.data.shape[2] != cfg.input_side or images.data.shape[3] != cfg.input_side:
        raise ShapeError(f"expected [N, {cfg.input_channels}, {cfg.input_side}, "
                         f"{cfg.input_side}] images, got {images.data.shape}")
    feats = []
    h = ad.permute(images, (0, 2, 3, 1))
    for k, b in zip(params.kernels, params.biases):
        h = ad.conv2d_nhwc(h, k, stride=1, pad=1, bias=b)
        h = ad.relu(h)
        h = ad.maxpool2_nhwc(h)
        feats.append(ad.global_avg_pool_nhwc(h))
    return feats


def extract(image: Tensor, params: BackboneParams) -> LayerFeatures:
    """Per-stage GAP vectors for a single [C, S, S] image."""
    if image.data.ndim != 3:
        raise ShapeError(f"expected [C, S, S] image, got {image.data.shape}")
    mats = extract_batch(ad.reshape(image, (1,) + image.data.shape), params)
    return LayerFeatures(vectors=[ad.reshape(m, (m.data.shape[1],)) for m in mats])
