"""Two-layer MLP scoring head and the training losses.

The normalized similarity vector is mapped to a single compatibility logit
s; sigma(s) is read as the probability that the outfit is compatible
(label 1).  The total training loss combines the classification term with
the embedding-norm, mask-sparsity and visual-semantic terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import glorot_uniform
from .errors import ShapeError


@dataclass
class MlpParams:
    w1: Tensor  # [hidden, n_inputs]
    b: Tensor   # [hidden]
    w2: Tensor  # [1, hidden]
    b2: Tensor  # [1], output bias

    @property
    def n_inputs(self) -> int:
        return self.w1.data.shape[1]

    def named_parameters(self):
        yield "mlp.w1", self.w1
        yield "mlp.b", self.b
        yield "mlp.w2", self.w2
        yield "mlp.b2", self.b2


@dataclass
class LossWeights:
    """Weights of the auxiliary losses: embedding norm, mask sparsity, VSE."""

    lambda1: float = 5e-3
    lambda2: float = 5e-4
    lambda3: float = 1.0


def init_mlp(n_inputs: int, hidden: int, seed: int,
             support: int | None = None) -> MlpParams:
    """Seeded MLP initialization; biases zero.

    With ``support`` = k, each hidden unit starts connected to a random
    k-subset of the inputs (the other first-layer weights start at 0).
    Narrow overlapping supports are what give the gradient diagnosis its
    resolution: a broken similarity silences only the detectors whose
    support overlaps it, and the many unaffected detectors keep the score
    gradient alive everywhere else.  Dense initialization instead yields
    units that all see every input, and on a clearly-broken outfit every
    one of them can go quiet at once, leaving nothing to diagnose with.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 202])))
    if support is None or support >= n_inputs:
        w1 = glorot_uniform(rng, (hidden, n_inputs), fan_in=n_inputs, fan_out=hidden)
    else:
        w1 = np.zeros((hidden, n_inputs))
        bound = np.sqrt(6.0 / (support + 1))
        for u in range(hidden):
            cols = rng.choice(n_inputs, size=support, replace=False)
            w1[u, cols] = rng.uniform(-bound, bound, size=support)
    w2 = glorot_uniform(rng, (1, hidden), fan_in=hidden, fan_out=1)
    return MlpParams(w1=ad.parameter(w1), b=ad.parameter(np.zeros(hidden)),
                     w2=ad.parameter(w2), b2=ad.parameter(np.zeros(1)))


def score_batch(flat: Tensor, params: MlpParams) -> Tensor:
    """Logits for a [B, n_inputs] batch of flattened similarity vectors -> [B].

    The output bias matters beyond calibration: it absorbs the "default
    incompatible" level, so confidently-low scores do not require hidden
    units that fire *because* similarities are low.  Without it, every
    trained model we produced answered diagnosis queries with inverted
    gradients (the score rose steepest at the already-broken similarities).
    """
    if flat.data.ndim != 2 or flat.data.shape[1] != params.n_inputs:
        raise ShapeError(f"expected [B, {params.n_inputs}] input, got {flat.data.shape}")
    h = ad.relu(ad.add(ad.matmul(flat, ad.transpose2d(params.w1)),
                       ad.reshape(params.b, (1, -1))))
    out = ad.add(ad.matmul(h, ad.transpose2d(params.w2)),
                 ad.reshape(params.b2, (1, 1)))
    return ad.reshape(out, (flat.data.shape[0],))


def score(flat, params: MlpParams) -> float:
    """Compatibility logit for a single flattened similarity vector."""
    t = ad.as_tensor(flat)
    if t.data.ndim != 1 or t.data.shape[0] != params.n_inputs:
        raise ShapeError(f"expected a length-{params.n_inputs} vector, got {t.data.shape}")
    return score_batch(ad.reshape(t, (1, -1)), params).item()


def probability(s: float) -> float:
    """sigma(s): compatibility probability of a logit."""
    return float(ad._stable_sigmoid(np.asarray([float(s)]))[0])


def bce_loss(s: float, y: int) -> float:
    """Binary cross entropy of a logit against a {0,1} label (log-domain)."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    return ad.bce_with_logits(ad.Tensor([float(s)]), [float(y)]).item()


def total_loss(clf: float, emb: float, mask: float, vse: float,
               w: LossWeights) -> float:
    """Weighted sum: clf + lambda1*emb + lambda2*mask + lambda3*vse."""
    return clf + w.lambda1 * emb + w.lambda2 * mask + w.lambda3 * vse


def total_loss_tensor(clf: Tensor, emb: Tensor | None, mask: Tensor | None,
                      vse: Tensor | None, w: LossWeights) -> Tensor:
    """Differentiable total loss; disabled components pass None and add 0."""
    total = clf
    if emb is not None:
        total = ad.add(total, ad.mul(emb, w.lambda1))
    if mask is not None:
        total = ad.add(total, ad.mul(mask, w.lambda2))
    if vse is not None:
        total = ad.add(total, ad.mul(vse, w.lambda3))
    return total
