"""Training objectives: masked-row reconstruction, proxy contrast, joint sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import MaskPlan


@dataclass(frozen=True)
class LossWeights:
    lambda1: float  # reconstruction strength
    lambda2: float  # contrastive strength

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("at least one loss weight must be positive")


def reconstruction_loss(x: ad.Tensor, z: ad.Tensor, plan: MaskPlan) -> ad.Tensor:
    """Mean over masked rows of (1 - cos(x_v, z_v))^2. Each term lies in [0,4]."""
    if not plan.masked:
        raise ValueError("reconstruction loss needs at least one masked node")
    idx = list(plan.masked)
    xm = ad.gather_rows(x, idx)
    zm = ad.gather_rows(z, idx)
    cos = ad.row_cosine(xm, zm)
    ones = x.tape.constant(np.ones(len(idx)))
    return ad.mean_all(ad.square(ad.sub(ones, cos)))


def contrastive_loss(g: ad.Tensor, y: int, p0: ad.Tensor, p1: ad.Tensor) -> ad.Tensor:
    """Pull the graph embedding toward its class proxy, push from the other.

    y=1: cos(g,p0)^2 + (1-cos(g,p1))^2; y=0 swaps the proxy roles.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    own, other = (p1, p0) if y == 1 else (p0, p1)
    one = g.tape.constant(1.0)
    pull = ad.square(ad.sub(one, ad.cosine(g, own)))
    push = ad.square(ad.cosine(g, other))
    return ad.add(push, pull)


def joint_loss(l_rec: ad.Tensor, l_cl: ad.Tensor, weights: LossWeights) -> ad.Tensor:
    return ad.add(ad.scale(l_rec, weights.lambda1), ad.scale(l_cl, weights.lambda2))


def cross_entropy_logits(logits: ad.Tensor, y: int) -> ad.Tensor:
    """Two-class cross-entropy from raw logits, used by the MLP-head variants.

    Computed as logsumexp(logits - max) - logit_y with the max detached, which
    keeps exp in range without changing the gradient.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    tape = logits.tape
    shift = tape.constant(np.full(2, float(logits.value.max())))
    shifted = ad.sub(logits, shift)
    lse = ad.log(ad.sum_all(ad.exp(shifted)))
    pick = np.zeros(2)
    pick[y] = 1.0
    return ad.sub(lse, ad.dot(shifted, tape.constant(pick)))
