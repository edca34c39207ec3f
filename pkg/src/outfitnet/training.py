"""End-to-end training: SGD with momentum, step decay, joint loss.

Each step takes a mini-batch of positive outfits, pairs every positive with
freshly sampled same-type-substitution negatives, pads everything to the
five fixed slots and runs one joint forward/backward.  Validation AUC is
computed after every epoch against a fixed, seeded set of sampled
negatives, and the best-scoring parameters are kept.  The returned
checkpoint stores float32 parameters; its recorded validation AUC is
re-measured from the quantized parameters so that loading a saved file and
re-evaluating reproduces the number exactly.

One protocol detail exists solely for the sake of diagnosis: after every
step the score head's output weights are projected onto the nonnegative
orthant.  The score is then a nonnegative combination of relu detectors
plus a (very negative) output bias, i.e. convex in the similarities, with
the "default incompatible" level carried by the bias.  On a faulty outfit
the detectors covering the broken similarities go quiet, so the score
gradient vanishes exactly where the problem is, which is the property the
gradient readout needs.  Unconstrained training instead converges onto
anomaly detectors whose gradients concentrate on the broken similarities
with the opposite sign, and the diagnosis ranking comes out inverted.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, quantize
from .comparison import NormStats, emb_l2_from_matrices, mask_l1
from .config import TrainConfig
from .data import DatasetManifest, Outfit, pad_outfit, sample_negative
from .errors import ConfigError, DivergenceError
from .evaluation import auc
from .model import Model
from .predictor import total_loss_tensor
from .vse import Vocabulary, text_embed_batch, visual_embed_batch, vse_loss


def _rng(*tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(tags))))


@dataclass
class SgdMomentum:
    """v <- mu*v - lr*g; theta <- theta + v, with global-norm gradient clipping.

    Banks named in ``nonneg`` are projected onto the nonnegative orthant
    after each (non-zero) step.
    """

    params: list[tuple[str, Tensor]]
    momentum: float
    clip_norm: float
    nonneg: tuple[str, ...] = ()
    velocity: dict[str, np.ndarray] = None

    def __post_init__(self):
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self, lr: float):
        if lr == 0.0:
            return
        grads = [(name, t) for name, t in self.params if t.grad is not None]
        total = 0.0
        for _, t in grads:
            total += float((t.grad * t.grad).sum())
        gnorm = np.sqrt(total)
        scale = 1.0 if (self.clip_norm <= 0 or gnorm <= self.clip_norm) \
            else self.clip_norm / gnorm
        for name, t in grads:
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * scale * t.grad
            t.data = t.data + v
        for name, t in self.params:
            if name in self.nonneg:
                np.maximum(t.data, 0.0, out=t.data)

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None


def _first_non_finite(model: Model) -> str | None:
    for name, t in model.named_parameters():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def _sample_negatives(positives: list[Outfit], manifest: DatasetManifest,
                      rng: np.random.Generator, per_positive: int) -> list[Outfit]:
    return [sample_negative(pos, manifest, rng)
            for pos in positives for _ in range(per_positive)]


def validation_probabilities(model: Model, manifest: DatasetManifest,
                             negatives: list[Outfit]):
    means = model.require_mean_images()
    padded = [pad_outfit(o, means) for o in manifest.outfits] + \
             [pad_outfit(o, means) for o in negatives]
    probs = model.probabilities(padded)
    labels = [1] * len(manifest.outfits) + [0] * len(negatives)
    return probs, labels


def train(dataset: dict[str, DatasetManifest], cfg: TrainConfig,
          log_stream=None, log_every: int = 1) -> Checkpoint:
    """Train a fresh model; returns the best-on-validation checkpoint."""
    cfg.validate()
    if "train" not in dataset or "val" not in dataset:
        raise ConfigError("dataset must provide train and val splits")
    train_split, val_split = dataset["train"], dataset["val"]
    if log_stream is None:
        log_stream = sys.stderr

    from .data import mean_images
    vocab = Vocabulary(train_split.all_tokens())
    means = mean_images(train_split)
    model = Model.build(cfg, vocab, means)
    opt = SgdMomentum(params=model.named_parameters(), momentum=cfg.momentum,
                      clip_norm=cfg.clip_norm, nonneg=("mlp.w2",))

    # one fixed negative set makes validation AUC comparable across epochs
    val_negatives = _sample_negatives(val_split.outfits, val_split,
                                      _rng(cfg.seed, 12), per_positive=1)

    best = None  # (auc, epoch, params snapshot, norm stats snapshot)
    outfits = train_split.outfits
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr0 * cfg.decay ** ((epoch - 1) // cfg.decay_every)
        erng = _rng(cfg.seed, 11, epoch)
        order = erng.permutation(len(outfits))
        epoch_losses = {"clf": 0.0, "emb": 0.0, "mask": 0.0, "vse": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            if len(idx) < 2:
                continue  # batchnorm needs at least two outfits
            positives = [outfits[i] for i in idx]
            negatives = _sample_negatives(positives, train_split, erng,
                                          cfg.negatives_per_positive)
            batch = [pad_outfit(o, means) for o in positives + negatives]
            labels = np.array([1.0] * len(positives) + [0.0] * len(negatives))

            res = model.forward_batch(batch, train=True)
            clf = ad.tmean(ad.bce_with_logits(res.scores, labels))
            emb = emb_l2_from_matrices(res.occurrence_features(),
                                       n_outfits=len(batch))
            mask = mask_l1(model.masks, layers=cfg.layers) if cfg.use_projection else None
            vse = None
            if cfg.use_vse:
                visual, token_ids = model.vse_pairs(batch, res,
                                                    only_first_n=len(positives))
                u = visual_embed_batch(visual, model.vse)
                v = text_embed_batch(token_ids, model.vse, len(vocab))
                vse = vse_loss(u, v, margin=cfg.vse_margin)
            total = total_loss_tensor(clf, emb, mask, vse, cfg.weights)

            if not np.isfinite(total.data):
                bad = _first_non_finite(model) or "loss"
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}; first bad bank: {bad}",
                    parameter=bad)

            opt.zero_grad()
            ad.backward(total)
            opt.step(lr)

            epoch_losses["clf"] += clf.item()
            epoch_losses["emb"] += emb.item()
            epoch_losses["mask"] += mask.item() if mask is not None else 0.0
            epoch_losses["vse"] += vse.item() if vse is not None else 0.0
            epoch_losses["total"] += total.item()
            n_batches += 1

        bad = _first_non_finite(model)
        if bad is not None:
            raise DivergenceError(f"parameter bank {bad} went non-finite "
                                  f"after epoch {epoch}", parameter=bad)

        probs, labels = validation_probabilities(model, val_split, val_negatives)
        val_auc = auc(list(probs), labels)
        if best is None or val_auc > best[0]:
            best = (val_auc, epoch,
                    {name: t.data.copy() for name, t in model.named_parameters()},
                    model.norm.copy())
        if log_stream is not None and (epoch % log_every == 0 or epoch == cfg.epochs):
            record = {"epoch": epoch, "lr": lr, "val_auc": val_auc,
                      "best_val_auc": best[0]}
            for k in ("total", "clf", "emb", "mask", "vse"):
                record[f"loss_{k}"] = epoch_losses[k] / max(n_batches, 1)
            print(json.dumps(record, sort_keys=True), file=log_stream, flush=True)

    # restore best, quantize to the storage precision, re-measure its AUC so
    # the recorded number is exactly reproducible from the saved file
    _, best_epoch, best_params, best_norm = best
    for name, t in model.named_parameters():
        t.data = quantize(best_params[name])
    model.norm = NormStats(mean=quantize(best_norm.mean), var=quantize(best_norm.var))
    model.mean_images = {t: quantize(m) for t, m in means.items()}
    probs, labels = validation_probabilities(model, val_split, val_negatives)
    recorded_auc = auc(list(probs), labels)
    return Checkpoint.from_model(model, best_val_auc=recorded_auc,
                                 best_epoch=best_epoch)
