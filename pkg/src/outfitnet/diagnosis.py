"""Gradient-based incompatibility diagnosis and greedy outfit revision.

The score is backpropagated to the normalized similarity inputs; because
compatible outfits carry label 1 here, the *negated* gradient of the score
is the importance of each similarity for the incompatibility (the larger,
the more problematic).  Item importance sums the edge importances over all
similarity edges touching the item.  Revision repeatedly substitutes the
most problematic item with better-scoring candidates until the
compatibility probability clears a threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .comparison import CONDITIONS, condition_name
from .data import Item, Outfit, PaddedOutfit, SLOT_ORDER, pad_outfit
from .errors import ModelError, PoolError
from .model import Model, N_SLOTS
from .predictor import score as mlp_score

REVISE_THRESHOLD = 0.9


@dataclass
class EdgeImportance:
    layer: int
    condition: int
    importance: float       # negated score gradient: larger = more incompatible
    raw_similarity: float
    normalized_similarity: float
    display: float = 0.0

    def slots(self) -> tuple[int, int]:
        a, b = CONDITIONS[self.condition]
        return int(a), int(b)


@dataclass
class DiagnosisReport:
    probability: float
    score: float
    edges: list[EdgeImportance]
    item_importance: dict[int, float]          # slot -> importance (present only)
    item_ids: dict[int, str]
    edge_display_span: float = 0.0
    item_display_span: float = 0.0
    display_normalized: bool = False

    def to_json_dict(self) -> dict:
        lo = min(self.item_importance.values()) if self.item_importance else 0.0
        return {
            "format": "diagnosis-v1",
            "probability": self.probability,
            "score": self.score,
            "condition_order": [condition_name(i) for i in range(len(CONDITIONS))],
            "display_normalized": self.display_normalized,
            "edge_display_span": self.edge_display_span,
            "item_display_span": self.item_display_span,
            "edges": [{
                "layer": e.layer,
                "condition": condition_name(e.condition),
                "importance": e.importance,
                "raw_similarity": e.raw_similarity,
                "normalized_similarity": e.normalized_similarity,
                "display": e.display,
            } for e in self.edges],
            "items": [{
                "slot": SLOT_ORDER[s].label,
                "id": self.item_ids[s],
                "importance": w,
                "display": (w - lo) / self.item_display_span
                if self.item_display_span > 0 else 0.0,
            } for s, w in sorted(self.item_importance.items())],
        }


def similarity_gradients(padded: PaddedOutfit, model: Model) -> np.ndarray:
    """Importance of every normalized similarity: -d(score)/d(similarity).

    Returns a [flat_dim] vector in the model's stage-major flat order.
    """
    if model is None:
        raise ModelError("no model provided")
    res = model.forward_batch([padded], train=False)
    root = ad.reshape(res.scores, (1,))
    ad.backward(root)
    grad = res.flat_norm.grad[0].copy()
    return -grad


def _edges_of_slot(slot: int) -> list[int]:
    return [c for c, (a, b) in enumerate(CONDITIONS) if slot in (int(a), int(b))]


def item_importance(edge_grads: np.ndarray, present: np.ndarray,
                    layers: tuple[int, ...]) -> dict[int, float]:
    """Sum each present item's edge importances over all stages.

    Only edges with both endpoints present contribute; padded slots get no
    entry at all.
    """
    grid = np.asarray(edge_grads).reshape(len(layers), len(CONDITIONS))
    out: dict[int, float] = {}
    for s in range(N_SLOTS):
        if not present[s]:
            continue
        total = 0.0
        for c in _edges_of_slot(s):
            a, b = CONDITIONS[c]
            if present[int(a)] and present[int(b)]:
                total += float(grid[:, c].sum())
        out[s] = total
    return out


def diagnose(outfit: Outfit, model: Model) -> DiagnosisReport:
    """Full diagnosis of one outfit: per-edge and per-item importances.

    Display values follow the max-min span convention: after the affine
    rescale the span between the largest and smallest value is exactly 1,
    which never reorders anything.
    """
    means = model.require_mean_images()
    padded = pad_outfit(outfit, means)
    res = model.forward_batch([padded], train=False)
    root = ad.reshape(res.scores, (1,))
    ad.backward(root)
    grads = -res.flat_norm.grad[0]
    s = res.scores.data[0]

    layers = model.cfg.layers
    edges = []
    for ki, k in enumerate(layers):
        for c in range(len(CONDITIONS)):
            i = ki * len(CONDITIONS) + c
            edges.append(EdgeImportance(
                layer=k, condition=c, importance=float(grads[i]),
                raw_similarity=float(res.flat_raw[0, i]),
                normalized_similarity=float(res.flat_norm.data[0, i])))
    vals = np.array([e.importance for e in edges])
    span = float(vals.max() - vals.min())
    if span > 0:
        for e in edges:
            e.display = (e.importance - float(vals.min())) / span

    items = item_importance(grads, padded.present, layers)
    item_vals = np.array(list(items.values()))
    item_span = float(item_vals.max() - item_vals.min()) if len(item_vals) > 1 else 0.0

    return DiagnosisReport(
        probability=float(ad._stable_sigmoid(np.asarray([s]))[0]),
        score=float(s),
        edges=edges,
        item_importance=items,
        item_ids={s_: padded.items[s_].id for s_ in items},
        edge_display_span=span,
        item_display_span=item_span,
        display_normalized=span > 0,
    )


def taylor_residual(padded: PaddedOutfit, model: Model, delta: np.ndarray) -> float:
    """|s(f + delta) - s(f) - g . delta| at the normalized similarities.

    Zero whenever delta stays inside one relu activation region of the MLP
    (the score is piecewise linear in its inputs).
    """
    res = model.forward_batch([padded], train=False)
    root = ad.reshape(res.scores, (1,))
    ad.backward(root)
    g = res.flat_norm.grad[0]
    f0 = res.flat_norm.data[0]
    s0 = res.scores.data[0]
    delta = np.asarray(delta, dtype=np.float64)
    with ad.no_grad():
        s1 = mlp_score(f0 + delta, model.mlp)
    return float(abs(s1 - s0 - g @ delta))


@dataclass
class Substitution:
    iteration: int
    slot: str
    removed: str
    inserted: str
    probability_before: float
    probability_after: float


@dataclass
class RevisionResult:
    outfit: Outfit
    log: list[Substitution] = field(default_factory=list)
    reached_threshold: bool = False
    probability: float = 0.0

    def trajectory(self) -> list[float]:
        if not self.log:
            return [self.probability]
        return [self.log[0].probability_before] + [s.probability_after for s in self.log]


def revise(outfit: Outfit, model: Model, pool: dict, thr: float = REVISE_THRESHOLD,
           rng: np.random.Generator | None = None) -> RevisionResult:
    """Greedy revision: substitute the most problematic item while it helps.

    ``pool`` maps ItemType -> candidate Items.  Per outer iteration (at most
    one per outfit item) the outfit is re-diagnosed, the item with the
    largest importance is scanned against its type's candidates in seeded
    random order, every strictly score-improving substitution is accepted,
    and the loop returns early once sigma(score) clears ``thr``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    means = model.require_mean_images()
    current = Outfit(items=list(outfit.items), label=outfit.label, fault=outfit.fault)
    log: list[Substitution] = []
    prob = float(model.probabilities([pad_outfit(current, means)])[0])
    if prob > thr:
        return RevisionResult(outfit=current, log=log, reached_threshold=True,
                              probability=prob)

    for iteration in range(len(outfit.items)):
        padded = pad_outfit(current, means)
        grads = similarity_gradients(padded, model)
        omega = item_importance(grads, padded.present, model.cfg.layers)
        worst_slot = max(sorted(omega), key=lambda s: omega[s])
        worst_type = SLOT_ORDER[worst_slot]
        candidates = list(pool.get(worst_type, []))
        if not candidates:
            raise PoolError(f"no candidates of type {worst_type.label}")
        slot_in_outfit = next(i for i, it in enumerate(current.items)
                              if it.type == worst_type)
        for ci in rng.permutation(len(candidates)):
            cand: Item = candidates[int(ci)]
            if cand.id == current.items[slot_in_outfit].id:
                continue
            trial_items = list(current.items)
            trial_items[slot_in_outfit] = cand
            trial = Outfit(items=trial_items, label=current.label)
            p_new = float(model.probabilities([pad_outfit(trial, means)])[0])
            if p_new > prob:
                log.append(Substitution(
                    iteration=iteration, slot=worst_type.label,
                    removed=current.items[slot_in_outfit].id, inserted=cand.id,
                    probability_before=prob, probability_after=p_new))
                current, prob = trial, p_new
            if prob > thr:
                return RevisionResult(outfit=current, log=log,
                                      reached_threshold=True, probability=prob)
    return RevisionResult(outfit=current, log=log, reached_threshold=prob > thr,
                          probability=prob)
