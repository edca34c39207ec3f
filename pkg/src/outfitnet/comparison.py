"""Type-conditioned similarities between item features.

Every unordered pair of item types is a *condition*.  Each condition owns,
per backbone stage, a learnable gating mask per side; a feature vector is
projected by elementwise multiplication with its side's mask followed by
relu, and the similarity of a pair is the cosine of the two projections.
Similarities are then standardized per (stage, condition) slot with
batch-norm style running statistics (no learnable affine), keeping their
scale comparable across conditions for the downstream predictor and for
gradient readout.

The condition enumeration order defined here is the canonical one: it is
written into checkpoints and diagnosis reports, and the flattened
similarity vector is laid out stage-major with conditions in this order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import LayerFeatures
from .errors import BatchError, ItemTypeError, ShapeError


class ItemType(enum.IntEnum):
    TOP = 0
    BOTTOM = 1
    SHOE = 2
    BAG = 3
    ACCESSORY = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "ItemType":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ItemTypeError(f"unknown item type {label!r}") from None


ITEM_TYPES: tuple[ItemType, ...] = tuple(ItemType)

# Canonical condition order: unordered type pairs, lexicographic by type value.
CONDITIONS: tuple[tuple[ItemType, ItemType], ...] = tuple(combinations(ITEM_TYPES, 2))
N_CONDITIONS = len(CONDITIONS)  # C(5, 2) == 10
COND_INDEX = {pair: i for i, pair in enumerate(CONDITIONS)}


def condition_of(a: ItemType, b: ItemType) -> int:
    """Index of the unordered condition (a, b); order of arguments is irrelevant."""
    if a == b:
        raise ItemTypeError(f"no condition for identical types ({a.label})")
    return COND_INDEX[(a, b) if a < b else (b, a)]


def condition_name(cond: int) -> str:
    a, b = CONDITIONS[cond]
    return f"{a.label}+{b.label}"


def condition_names() -> list[str]:
    return [condition_name(i) for i in range(N_CONDITIONS)]


@dataclass
class MaskBank:
    """Learnable gating masks: one per (stage, condition, side).

    ``per_layer[k]`` is a [N_CONDITIONS * n_sides, C_k] tensor; the row for
    (condition c, side s) is ``c * n_sides + s``.  With ``shared_sides``
    both sides of a condition read the same row.  Masks start at all ones
    so the initial projection is a plain relu.
    """

    per_layer: list[Tensor]
    shared_sides: bool = False

    @property
    def n_sides(self) -> int:
        return 1 if self.shared_sides else 2

    @classmethod
    def ones(cls, stage_channels: Sequence[int], shared_sides: bool = False) -> "MaskBank":
        n_sides = 1 if shared_sides else 2
        layers = [ad.parameter(np.ones((N_CONDITIONS * n_sides, c)))
                  for c in stage_channels]
        return cls(per_layer=layers, shared_sides=shared_sides)

    def row(self, layer: int, cond: int, side: int) -> int:
        if self.shared_sides:
            side = 0
        return cond * self.n_sides + side

    def mask_rows(self, layer: int, conds, sides) -> Tensor:
        """Differentiable gather of mask rows -> [len(conds), C_layer]."""
        idx = np.asarray([self.row(layer, c, s) for c, s in zip(conds, sides)])
        return ad.take_rows(self.per_layer[layer], idx)

    def named_parameters(self):
        for k, t in enumerate(self.per_layer, start=1):
            yield f"masks.layer{k}", t


def project(x: Tensor, bank: MaskBank, layer: int, cond: int, side: int) -> Tensor:
    """Gate a [C] feature vector by its condition mask and rectify."""
    x = ad.as_tensor(x)
    if x.data.ndim != 1 or x.data.shape[0] != bank.per_layer[layer].data.shape[1]:
        raise ShapeError(f"feature dim {x.data.shape} does not match layer {layer + 1} masks")
    row = bank.mask_rows(layer, [cond], [side])
    gated = ad.mul(ad.reshape(x, (1, -1)), row)
    return ad.reshape(ad.relu(gated), (x.data.shape[0],))


def pair_similarity(x_i: Tensor, x_j: Tensor, bank: MaskBank, layer: int,
                    cond: int, use_projection: bool = True) -> float:
    """Cosine of the two projected features; 0 if either projection is ~zero.

    ``side`` assignment follows the condition's canonical type order, so the
    result is symmetric in (i, j) by construction.
    """
    if use_projection:
        pi = project(x_i, bank, layer, cond, side=0)
        pj = project(x_j, bank, layer, cond, side=1)
    else:
        pi = ad.relu(ad.as_tensor(x_i))
        pj = ad.relu(ad.as_tensor(x_j))
    c = ad.rowwise_cosine(ad.reshape(pi, (1, -1)), ad.reshape(pj, (1, -1)))
    return c.item()


@dataclass
class ComparisonStack:
    """All pairwise similarities of one padded outfit.

    ``matrices[k]`` is the symmetric N x N similarity matrix at stage k
    (diagonal left at 0: self-similarity is never computed or used), and
    ``flat`` is the stage-major flattened vector of upper-triangle values in
    canonical condition order.  ``flat`` is a differentiable tensor.
    """

    matrices: np.ndarray  # [K, N, N]
    flat: Tensor          # [K * N_CONDITIONS]
    layers: tuple[int, ...]


def compare_outfit(features: Sequence[LayerFeatures], types: Sequence[ItemType],
                   bank: MaskBank, layers: Sequence[int] = (1, 2, 3, 4),
                   use_projection: bool = True) -> ComparisonStack:
    """Raw comparison stack for one padded outfit (5 items, distinct types).

    Similarities are indexed by condition, not by item position, so
    permuting the items permutes nothing in ``flat``.
    """
    n = len(features)
    if n != len(types):
        raise ShapeError("features and types length mismatch")
    if len(set(types)) != n:
        raise ItemTypeError("outfit has duplicate item types")
    slot_of = {t: i for i, t in enumerate(types)}

    k_list = sorted(layers)
    mats = np.zeros((len(k_list), n, n))
    cols = []
    for mi, k in enumerate(k_list):
        layer = k - 1
        for cond, (ta, tb) in enumerate(CONDITIONS):
            if ta not in slot_of or tb not in slot_of:
                raise ItemTypeError(f"outfit missing type {ta.label} or {tb.label}")
            i, j = slot_of[ta], slot_of[tb]
            xi = ad.reshape(features[i].vectors[layer], (1, -1))
            xj = ad.reshape(features[j].vectors[layer], (1, -1))
            if use_projection:
                rows_i = bank.mask_rows(layer, [cond], [0])
                rows_j = bank.mask_rows(layer, [cond], [1])
                pi = ad.relu(ad.mul(xi, rows_i))
                pj = ad.relu(ad.mul(xj, rows_j))
            else:
                pi, pj = ad.relu(xi), ad.relu(xj)
            sim = ad.rowwise_cosine(pi, pj)
            cols.append(sim)
            mats[mi, i, j] = mats[mi, j, i] = sim.data[0]
    flat = ad.reshape(ad.stack_cols(cols), (len(cols),))
    return ComparisonStack(matrices=mats, flat=flat, layers=tuple(k_list))


@dataclass
class NormStats:
    """Running mean/variance per flattened similarity slot."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, n_slots: int, momentum: float = 0.1, eps: float = 1e-5) -> "NormStats":
        return cls(mean=np.zeros(n_slots), var=np.ones(n_slots),
                   momentum=momentum, eps=eps)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        m = self.momentum
        self.mean = (1.0 - m) * self.mean + m * batch_mean
        self.var = (1.0 - m) * self.var + m * batch_var

    def copy(self) -> "NormStats":
        return NormStats(mean=self.mean.copy(), var=self.var.copy(),
                         momentum=self.momentum, eps=self.eps)


def normalize_batch(flats: Tensor, stats: NormStats, train: bool) -> Tensor:
    """Standardize a [B, n_slots] matrix of flattened similarities.

    Train mode uses batch statistics (population variance) and folds them
    into the running stats; eval mode applies the running stats and allows
    B == 1.
    """
    if flats.data.ndim != 2:
        raise ShapeError("normalize_batch expects [B, n_slots]")
    if train:
        if flats.data.shape[0] < 2:
            raise BatchError("train-mode normalization needs a batch of >= 2 outfits")
        out, mu, var = ad.batchnorm_cols_train(flats, eps=stats.eps)
        stats.update(mu, var)
        return out
    return ad.batchnorm_cols_eval(flats, stats.mean, stats.var, eps=stats.eps)


def normalize(stacks, stats: NormStats, mode: str):
    """Spec-level wrapper over :func:`normalize_batch` for ComparisonStacks.

    ``mode`` is "train" (list of stacks, batch statistics) or "eval"
    (single stack or list, running statistics).  Returns normalized flat
    tensors in the same arrangement as the input.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    single = isinstance(stacks, ComparisonStack)
    items = [stacks] if single else list(stacks)
    if mode == "train" and len(items) < 2:
        raise BatchError("train-mode normalization needs a batch of >= 2 outfits")
    mat = ad.concat_rows([ad.reshape(s.flat, (1, -1)) for s in items])
    out = normalize_batch(mat, stats, train=(mode == "train"))
    rows = [ad.reshape(ad.take_rows(out, [i]), (out.data.shape[1],))
            for i in range(len(items))]
    return rows[0] if single else rows


def mask_l1(bank: MaskBank, layers: Sequence[int] = (1, 2, 3, 4)) -> Tensor:
    """Sum of absolute mask entries over the given stages (sparsity pressure)."""
    total = None
    for k in sorted(layers):
        s = ad.tsum(ad.tabs(bank.per_layer[k - 1]))
        total = s if total is None else ad.add(total, s)
    return total


def emb_l2_from_matrices(per_layer: Sequence[Tensor], n_outfits: int) -> Tensor:
    """Sum of per-item per-stage feature norms, averaged over outfits.

    ``per_layer[k]`` holds all items' stage-k features as rows.
    """
    total = None
    for mat in per_layer:
        s = ad.tsum(ad.rowwise_l2norm(mat))
        total = s if total is None else ad.add(total, s)
    return ad.mul(total, 1.0 / n_outfits)


def emb_l2(batch: Sequence[Sequence[LayerFeatures]]) -> Tensor:
    """Embedding-norm penalty for a batch of outfits' item features."""
    n_layers = len(batch[0][0].vectors)
    mats = []
    for k in range(n_layers):
        rows = [ad.reshape(feat.vectors[k], (1, -1))
                for outfit in batch for feat in outfit]
        mats.append(ad.concat_rows(rows))
    return emb_l2_from_matrices(mats, n_outfits=len(batch))
