"""Evaluation tasks: compatibility AUC, fill-in-the-blank, per-stage
retrieval and planted-fault diagnosis metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .comparison import CONDITIONS, ItemType
from .data import (DatasetManifest, Item, Outfit, make_fitb, pad_outfit,
                   sample_negative)
from .diagnosis import item_importance, similarity_gradients
from .errors import MetricError
from .model import Model


def _rng(*tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(tags))))


def auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form: P(s+ > s-) + 0.5 P(tie).

    Computed from average ranks so ties contribute exactly one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def compatibility_scores(model: Model, manifest: DatasetManifest,
                         seed: int) -> tuple[np.ndarray, list[int]]:
    """Probabilities and labels for positives plus 1:1 sampled negatives."""
    rng = _rng(seed, 31)
    means = model.require_mean_images()
    negatives = [sample_negative(o, manifest, rng) for o in manifest.outfits]
    padded = [pad_outfit(o, means) for o in manifest.outfits] + \
             [pad_outfit(o, means) for o in negatives]
    probs = model.probabilities(padded)
    labels = [1] * len(manifest.outfits) + [0] * len(negatives)
    return probs, labels


def compatibility_auc(model: Model, manifest: DatasetManifest, seed: int) -> float:
    probs, labels = compatibility_scores(model, manifest, seed)
    return auc(probs, labels)


def fitb_accuracy(model: Model, manifest: DatasetManifest, seed: int,
                  n_questions: int | None = None) -> float:
    """Fraction of questions where the true option scores highest.

    Ties resolve to the lowest option index.  Questions cycle through the
    manifest's positives; each question's four completed outfits are scored
    in one batch.
    """
    rng = _rng(seed, 32)
    means = model.require_mean_images()
    outfits = manifest.outfits
    if n_questions is None:
        n_questions = len(outfits)
    correct = 0
    padded_batch, answers = [], []
    for q in range(n_questions):
        pos = outfits[q % len(outfits)]
        question = make_fitb(pos, manifest, rng)
        for opt in question.options:
            completed = Outfit(items=question.question.items + [opt], label=1)
            padded_batch.append(pad_outfit(completed, means))
        answers.append(question.answer_index)
    probs = model.probabilities(padded_batch)
    for qi, ans in enumerate(answers):
        four = probs[4 * qi:4 * qi + 4]
        if int(np.argmax(four)) == ans:  # argmax returns the first max: tie rule
            correct += 1
    return correct / n_questions


def retrieve(query: Item, layer: int, corpus: list[Item], k: int,
             model: Model) -> list[tuple[str, float]]:
    """Top-k corpus items by cosine of stage-`layer` GAP features (unprojected)."""
    if not corpus:
        return []
    images = np.stack([query.image] + [it.image for it in corpus])
    feats = model.layer_features(images, layer)
    qv, rest = feats[0], feats[1:]
    norms = np.linalg.norm(rest, axis=1) * max(np.linalg.norm(qv), 1e-12)
    sims = rest @ qv / np.maximum(norms, 1e-12)
    ranked = sorted(range(len(corpus)), key=lambda i: (-sims[i], corpus[i].id))
    return [(corpus[i].id, float(sims[i])) for i in ranked[:k]]


def diagnosis_hits(model: Model, negatives: list[Outfit]) -> tuple[float, float]:
    """hit@1: most important item is the planted fault; hit@3: the fault is
    an endpoint of one of the 3 largest edge importances."""
    means = model.require_mean_images()
    hit1 = hit3 = 0
    for neg in negatives:
        if neg.fault is None:
            raise MetricError("negative outfit lacks a planted fault index")
        padded = pad_outfit(neg, means)
        grads = similarity_gradients(padded, model)
        omega = item_importance(grads, padded.present, model.cfg.layers)
        worst = max(sorted(omega), key=lambda s: omega[s])
        if worst == padded.fault_slot:
            hit1 += 1
        grid = grads.reshape(len(model.cfg.layers), len(CONDITIONS))
        edge_vals = []
        for c, (a, b) in enumerate(CONDITIONS):
            if padded.present[int(a)] and padded.present[int(b)]:
                for ki in range(len(model.cfg.layers)):
                    edge_vals.append((grid[ki, c], int(a), int(b)))
        edge_vals.sort(key=lambda e: -e[0])
        touched = set()
        for val, a, b in edge_vals[:3]:
            touched.update((a, b))
        if padded.fault_slot in touched:
            hit3 += 1
    n = len(negatives)
    return hit1 / n, hit3 / n


def diagnosis_metrics(model: Model, manifest: DatasetManifest, seed: int,
                      n_negatives: int = 200) -> tuple[float, float]:
    rng = _rng(seed, 33)
    negatives = []
    outfits = manifest.outfits
    for i in range(n_negatives):
        negatives.append(sample_negative(outfits[i % len(outfits)], manifest, rng))
    return diagnosis_hits(model, negatives)


@dataclass
class EvalReport:
    seed: int
    reps: int
    n_outfits: int
    auc: list[float] = field(default_factory=list)
    fitb_accuracy: list[float] = field(default_factory=list)
    diagnosis_hit_at_1: list[float] = field(default_factory=list)
    diagnosis_hit_at_3: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = {"format": "eval-report-v1", "seed": self.seed, "reps": self.reps,
               "n_outfits": self.n_outfits}
        for name in ("auc", "fitb_accuracy", "diagnosis_hit_at_1", "diagnosis_hit_at_3"):
            vals = getattr(self, name)
            if not vals:
                continue
            out[name] = {"mean": float(np.mean(vals)), "values": [float(v) for v in vals]}
            if len(vals) > 1:
                out[name]["std"] = float(np.std(vals))
        return out


def evaluate(model: Model, manifest: DatasetManifest, tasks: set[str],
             reps: int, seed: int, n_diagnosis: int = 200) -> EvalReport:
    """Run the requested tasks `reps` times with distinct sampling seeds."""
    report = EvalReport(seed=seed, reps=reps, n_outfits=len(manifest.outfits))
    for rep in range(reps):
        rep_seed = seed + 1000 * rep
        if "auc" in tasks:
            report.auc.append(compatibility_auc(model, manifest, rep_seed))
        if "fitb" in tasks:
            report.fitb_accuracy.append(fitb_accuracy(model, manifest, rep_seed))
        if "diagnosis" in tasks:
            h1, h3 = diagnosis_metrics(model, manifest, rep_seed, n_diagnosis)
            report.diagnosis_hit_at_1.append(h1)
            report.diagnosis_hit_at_3.append(h3)
    return report
