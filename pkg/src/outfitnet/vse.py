"""Visual-semantic embedding: a joint space for descriptor tokens and
final-stage visual features, trained with a bidirectional margin loss.

An item's text embedding is the mean of its tokens' embedding columns; its
visual embedding is a linear projection of the stage-4 GAP feature.  Both
are L2-normalized (cosine similarity becomes a dot product).  The loss asks
every matching pair to beat every non-matching pair in the same mini-batch
by at least the margin, in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import glorot_uniform
from .errors import BatchError, ConfigError, InputError, ShapeError, VocabError


class Vocabulary:
    """Dense token -> index map with deterministic (sorted) order."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = sorted(set(tokens))
        if not self.tokens:
            raise InputError("vocabulary cannot be empty")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        try:
            return np.asarray([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as e:
            raise VocabError(f"unknown token {e.args[0]!r}") from None


@dataclass
class VseParams:
    w_t: Tensor  # word embeddings, [joint_dim, vocab]
    w_i: Tensor  # visual projection, [joint_dim, visual_dim]
    margin: float = 0.2

    def named_parameters(self):
        yield "vse.w_t", self.w_t
        yield "vse.w_i", self.w_i


def init_vse(vocab_size: int, visual_dim: int, joint_dim: int, margin: float,
             seed: int) -> VseParams:
    if margin <= 0:
        raise ConfigError("vse margin must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 303])))
    w_t = glorot_uniform(rng, (joint_dim, vocab_size), fan_in=vocab_size, fan_out=joint_dim)
    w_i = glorot_uniform(rng, (joint_dim, visual_dim), fan_in=visual_dim, fan_out=joint_dim)
    return VseParams(w_t=ad.parameter(w_t), w_i=ad.parameter(w_i), margin=margin)


def text_embed_batch(token_ids: Sequence[np.ndarray], p: VseParams,
                     vocab_size: int) -> Tensor:
    """Normalized mean token embeddings for a batch of items -> [B, joint_dim].

    The token lists become a constant weighting matrix, so the whole batch
    is one matmul against the embedding table.
    """
    if not token_ids:
        raise InputError("empty batch")
    weights = np.zeros((len(token_ids), vocab_size))
    for r, ids in enumerate(token_ids):
        if len(ids) == 0:
            raise InputError("item has an empty token list")
        weights[r, :] = np.bincount(ids, minlength=vocab_size) / len(ids)
    mixed = ad.matmul(ad.Tensor(weights), ad.transpose2d(p.w_t))
    return ad.l2_normalize_rows(mixed)


def text_embed(tokens: Sequence[str], p: VseParams, vocab: Vocabulary) -> Tensor:
    """Normalized mean embedding of one item's descriptor tokens -> [joint_dim]."""
    if not tokens:
        raise InputError("token list is empty")
    ids = vocab.encode(tokens)
    out = text_embed_batch([ids], p, len(vocab))
    return ad.reshape(out, (out.data.shape[1],))


def visual_embed_batch(x: Tensor, p: VseParams) -> Tensor:
    """Normalized visual projections for a [B, visual_dim] batch -> [B, joint_dim]."""
    if x.data.ndim != 2 or x.data.shape[1] != p.w_i.data.shape[1]:
        raise ShapeError(f"expected [B, {p.w_i.data.shape[1]}] features, got {x.data.shape}")
    return ad.l2_normalize_rows(ad.matmul(x, ad.transpose2d(p.w_i)))


def visual_embed(x: Tensor, p: VseParams) -> Tensor:
    """Normalized visual projection of one final-stage feature vector."""
    t = ad.as_tensor(x)
    if t.data.ndim != 1:
        raise ShapeError(f"expected a vector, got {t.data.shape}")
    out = visual_embed_batch(ad.reshape(t, (1, -1)), p)
    return ad.reshape(out, (out.data.shape[1],))


def vse_loss(u: Tensor, v: Tensor, margin: float) -> Tensor:
    """Bidirectional hinge loss over a batch of matching (u, v) rows.

    ``u`` and ``v`` are [B, joint_dim], already normalized, with row i of u
    matching row i of v; the other B-1 rows serve as the non-matching set.
    Each direction's hinge sum is averaged by B*(B-1).
    """
    if u.data.shape != v.data.shape or u.data.ndim != 2:
        raise ShapeError("vse_loss expects matching [B, D] embeddings")
    b = u.data.shape[0]
    if b < 2:
        raise BatchError("vse_loss needs a batch of >= 2 pairs")
    sim = ad.matmul(u, ad.transpose2d(v))          # sim[i, k] = d(u_i, v_k)
    match = ad.reshape(ad.rowwise_dot(u, v), (b, 1))
    off_diag = ad.Tensor(1.0 - np.eye(b))
    hinge_u = ad.relu(ad.add(ad.sub(ad.Tensor([[margin]]), match), sim))
    hinge_v = ad.relu(ad.add(ad.sub(ad.Tensor([[margin]]), match), ad.transpose2d(sim)))
    total = ad.add(ad.tsum(ad.mul(hinge_u, off_diag)),
                   ad.tsum(ad.mul(hinge_v, off_diag)))
    return ad.mul(total, 1.0 / (b * (b - 1)))
