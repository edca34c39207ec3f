"""The full compatibility model: backbone, masks, normalization, MLP, VSE.

This module owns the batched forward pass used by training, evaluation and
diagnosis.  A batch of padded outfits becomes one image stack; per-stage GAP
features come back as [B*5, C_k] matrices whose row for (outfit b, slot s)
is ``b * 5 + s``.  Padded outfits are always in the fixed slot order, so a
condition's two sides map directly to two slot indices and the whole
similarity computation vectorizes over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import comparison as cmp
from .backbone import BackboneConfig, BackboneParams, extract_batch, init_backbone
from .comparison import (CONDITIONS, MaskBank, NormStats, condition_names,
                         normalize_batch)
from .config import TrainConfig
from .data import PaddedOutfit, SLOT_ORDER
from .errors import ModelError, ShapeError
from .predictor import MlpParams, init_mlp, score_batch
from .vse import Vocabulary, VseParams, init_vse

N_SLOTS = len(SLOT_ORDER)


@dataclass
class ForwardResult:
    scores: Tensor            # [B] logits
    flat_norm: Tensor         # [B, flat_dim] normalized similarities (watch-point)
    flat_raw: np.ndarray      # [B, flat_dim] raw similarities (values only)
    features: list[Tensor]    # per stage, [n_unique_images, C_k]
    slot_rows: np.ndarray     # [B, 5] -> row of each slot's image in `features`
    n_outfits: int

    def probabilities(self) -> np.ndarray:
        return ad._stable_sigmoid(self.scores.data)

    def occurrence_features(self) -> list[Tensor]:
        """Per-stage features with one row per (outfit, slot) occurrence."""
        idx = self.slot_rows.reshape(-1)
        return [ad.take_rows(f, idx) for f in self.features]


class Model:
    """Bundles all parameter banks plus normalization state and vocabulary."""

    def __init__(self, cfg: TrainConfig, backbone: BackboneParams, masks: MaskBank,
                 mlp: MlpParams, vse: VseParams, norm: NormStats,
                 vocab: Vocabulary, mean_images: dict | None = None):
        self.cfg = cfg
        self.backbone = backbone
        self.masks = masks
        self.mlp = mlp
        self.vse = vse
        self.norm = norm
        self.vocab = vocab
        self.mean_images = mean_images
        self._token_cache: dict[str, np.ndarray] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, cfg: TrainConfig, vocab: Vocabulary,
              mean_images: dict | None = None) -> "Model":
        cfg.validate()
        backbone = init_backbone(BackboneConfig(
            stage_channels=tuple(cfg.stage_channels),
            input_side=cfg.input_side, seed=cfg.seed))
        masks = MaskBank.ones(cfg.stage_channels, shared_sides=cfg.shared_side_masks)
        flat_dim = cmp.N_CONDITIONS * len(cfg.layers)
        mlp = init_mlp(flat_dim, cfg.hidden_dim, seed=cfg.seed,
                       support=cfg.mlp_support)
        vse = init_vse(len(vocab), visual_dim=cfg.stage_channels[-1],
                       joint_dim=cfg.joint_dim, margin=cfg.vse_margin, seed=cfg.seed)
        norm = NormStats.identity(flat_dim)
        return cls(cfg, backbone, masks, mlp, vse, norm, vocab, mean_images)

    @property
    def flat_dim(self) -> int:
        return cmp.N_CONDITIONS * len(self.cfg.layers)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.backbone.named_parameters())
        out += list(self.masks.named_parameters())
        out += list(self.mlp.named_parameters())
        out += list(self.vse.named_parameters())
        return out

    def condition_order(self) -> list[str]:
        return condition_names()

    # -- forward ------------------------------------------------------------

    def _unique_images(self, padded: list[PaddedOutfit]):
        """Deduplicate item images by id across the batch.

        Negatives share 4 of 5 slots with their positives and every padded
        slot of a type shares one mean image, so the backbone typically runs
        on about half as many images as there are batch slots.
        """
        row_of: dict[str, int] = {}
        images = []
        slot_rows = np.empty((len(padded), N_SLOTS), dtype=np.int64)
        for b, p in enumerate(padded):
            for s, item in enumerate(p.items):
                row = row_of.get(item.id)
                if row is None:
                    row = len(images)
                    row_of[item.id] = row
                    images.append(item.image)
                slot_rows[b, s] = row
        return np.stack(images), slot_rows

    def _compare_batch(self, features: list[Tensor], slot_rows: np.ndarray) -> Tensor:
        """Raw flattened similarities [B, flat_dim], stage-major, canonical
        condition order inside each stage block."""
        cols = []
        for k in self.cfg.layers:
            layer = k - 1
            feats = features[layer]
            for cond, (ta, tb) in enumerate(CONDITIONS):
                xi = ad.take_rows(feats, slot_rows[:, int(ta)])
                xj = ad.take_rows(feats, slot_rows[:, int(tb)])
                if self.cfg.use_projection:
                    mi = self.masks.mask_rows(layer, [cond], [0])
                    mj = self.masks.mask_rows(layer, [cond], [1])
                    pi = ad.relu(ad.mul(xi, mi))
                    pj = ad.relu(ad.mul(xj, mj))
                else:
                    pi, pj = ad.relu(xi), ad.relu(xj)
                cols.append(ad.rowwise_cosine(pi, pj))
        return ad.stack_cols(cols)

    def forward_batch(self, padded: list[PaddedOutfit], train: bool) -> ForwardResult:
        """Score a batch of padded outfits; train mode updates norm statistics."""
        if not padded:
            raise ShapeError("empty batch")
        stack, slot_rows = self._unique_images(padded)
        features = extract_batch(ad.Tensor(stack), self.backbone)
        flat_raw = self._compare_batch(features, slot_rows)
        raw_copy = flat_raw.data.copy()
        flat_norm = normalize_batch(flat_raw, self.norm, train=train)
        flat_norm.retain_grad()
        scores = score_batch(flat_norm, self.mlp)
        return ForwardResult(scores=scores, flat_norm=flat_norm, flat_raw=raw_copy,
                             features=features, slot_rows=slot_rows,
                             n_outfits=len(padded))

    def probabilities(self, padded: list[PaddedOutfit], batch_size: int = 64) -> np.ndarray:
        """Eval-mode compatibility probabilities, batched, no graph kept."""
        out = np.empty(len(padded))
        with ad.no_grad():
            for lo in range(0, len(padded), batch_size):
                chunk = padded[lo:lo + batch_size]
                res = self.forward_batch(chunk, train=False)
                out[lo:lo + len(chunk)] = res.probabilities()
        return out

    # -- VSE plumbing --------------------------------------------------------

    def _token_ids(self, tokens: list[str]) -> np.ndarray:
        key = "\x00".join(tokens)
        ids = self._token_cache.get(key)
        if ids is None:
            ids = self.vocab.encode(tokens)
            self._token_cache[key] = ids
        return ids

    def vse_pairs(self, padded: list[PaddedOutfit], res: ForwardResult,
                  only_first_n: int | None = None):
        """(visual rows, token id lists) for the present items of a batch.

        ``only_first_n`` restricts to the first n outfits (the positives,
        when the batch is positives followed by sampled negatives).
        """
        n = len(padded) if only_first_n is None else only_first_n
        rows, token_ids = [], []
        for b in range(n):
            for s in range(N_SLOTS):
                if padded[b].present[s]:
                    rows.append(res.slot_rows[b, s])
                    token_ids.append(self._token_ids(padded[b].items[s].tokens))
        visual = ad.take_rows(res.features[len(self.cfg.stage_channels) - 1],
                              np.asarray(rows))
        return visual, token_ids

    # -- feature access for retrieval ---------------------------------------

    def layer_features(self, images: np.ndarray, layer: int,
                       batch_size: int = 256) -> np.ndarray:
        """Eval-mode GAP features (unprojected) at one stage for [N,3,S,S] images."""
        if not 1 <= layer <= len(self.cfg.stage_channels):
            raise ShapeError(f"layer must be in 1..{len(self.cfg.stage_channels)}")
        chunks = []
        with ad.no_grad():
            for lo in range(0, images.shape[0], batch_size):
                feats = extract_batch(ad.Tensor(images[lo:lo + batch_size]), self.backbone)
                chunks.append(feats[layer - 1].data)
        return np.concatenate(chunks, axis=0)

    def require_mean_images(self) -> dict:
        if not self.mean_images:
            raise ModelError("model has no per-type mean images; train or load a checkpoint first")
        return self.mean_images
